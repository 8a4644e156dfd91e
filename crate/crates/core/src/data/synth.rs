//! Synthetic traffic generator: diffused hotspots with a daily cycle and
//! multiplicative log-normal noise.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::stream_rng;
use crate::tensor::Tensor;

use super::series::GridSeries;

/// Largest stable coefficient of the explicit 5-point diffusion step.
pub const MAX_DIFFUSION: f64 = 0.25;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default, deny_unknown_fields))]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub dt_minutes: u32,
    pub diurnal_period_steps: usize,
    pub n_hotspots: usize,
    /// Per-step coefficient κ of `u += κ ∇²u`.
    pub diffusion_coefficient: f64,
    pub diffusion_steps: usize,
    /// Log-space standard deviation of the multiplicative noise.
    pub noise_std: f64,
    /// Relative amplitude of each hotspot's daily oscillation.
    pub diurnal_amplitude: f64,
    /// Period, in frames, of a slow modulation of hotspot intensity
    /// (0 disables it).
    pub slow_period_steps: usize,
    pub slow_amplitude: f64,
    /// Fraction of the series after which every hotspot intensity is
    /// multiplied by `regime_gain`.
    pub regime_change_at: Option<f64>,
    pub regime_gain: f64,
    #[cfg_attr(feature = "serde", serde(skip))]
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 20,
            width: 20,
            frames: 2016,
            dt_minutes: 10,
            diurnal_period_steps: 144,
            n_hotspots: 6,
            diffusion_coefficient: 0.2,
            diffusion_steps: 30,
            noise_std: 0.15,
            diurnal_amplitude: 0.6,
            slow_period_steps: 0,
            slow_amplitude: 0.0,
            regime_change_at: None,
            regime_gain: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.frames == 0 || self.diurnal_period_steps == 0 {
            return Err(Error::config("synthetic grid dimensions, length and period must be positive"));
        }
        if !(self.diffusion_coefficient >= 0.0 && self.diffusion_coefficient <= MAX_DIFFUSION) {
            return Err(Error::config(format!(
                "diffusion coefficient {} is unstable for the explicit 5-point scheme (require 0 <= kappa <= {MAX_DIFFUSION})",
                self.diffusion_coefficient
            )));
        }
        if !(self.noise_std >= 0.0) || !(self.diurnal_amplitude >= 0.0) || !(self.slow_amplitude >= 0.0) {
            return Err(Error::config("noise and amplitudes must be nonnegative"));
        }
        if let Some(f) = self.regime_change_at {
            if !(0.0..=1.0).contains(&f) || !(self.regime_gain >= 0.0) {
                return Err(Error::config("regime change needs a fraction in [0, 1] and a nonnegative gain"));
            }
        }
        Ok(())
    }
}

struct Hotspot {
    kernel: Vec<f64>,
    intensity: f64,
    phase: f64,
}

/// One explicit step `u + κ ∇²u` with zero values outside the grid.
fn diffuse(u: &[f64], h: usize, w: usize, kappa: f64) -> Vec<f64> {
    let at = |i: isize, j: isize| {
        if i < 0 || j < 0 || i >= h as isize || j >= w as isize {
            0.0
        } else {
            u[i as usize * w + j as usize]
        }
    };
    let mut out = vec![0.0; h * w];
    for i in 0..h as isize {
        for j in 0..w as isize {
            let c = at(i, j);
            let lap = at(i - 1, j) + at(i + 1, j) + at(i, j - 1) + at(i, j + 1) - 4.0 * c;
            out[i as usize * w + j as usize] = c + kappa * lap;
        }
    }
    out
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<GridSeries> {
    cfg.validate()?;
    let (h, w, n) = (cfg.height, cfg.width, cfg.frames);
    let mut rng = stream_rng(cfg.seed, "synth");
    let hotspots: Vec<Hotspot> = (0..cfg.n_hotspots)
        .map(|_| {
            let (r, c) = (rng.gen_range(0..h), rng.gen_range(0..w));
            let mut kernel = vec![0.0; h * w];
            kernel[r * w + c] = 1.0;
            for _ in 0..cfg.diffusion_steps {
                kernel = diffuse(&kernel, h, w, cfg.diffusion_coefficient);
            }
            let peak = kernel.iter().cloned().fold(0.0, f64::max).max(1e-12);
            kernel.iter_mut().for_each(|v| *v /= peak);
            Hotspot { kernel, intensity: rng.gen_range(0.5..1.5), phase: rng.gen_range(-0.5..0.5) }
        })
        .collect();
    let mut noise_rng = stream_rng(cfg.seed, "synth.noise");
    let change = cfg.regime_change_at.map(|f| (f * n as f64).round() as usize);
    let two_pi = std::f64::consts::TAU;
    let mut data = Vec::with_capacity(n * h * w);
    let mut frame = vec![0.0f64; h * w];
    for t in 0..n {
        frame.iter_mut().for_each(|v| *v = 0.0);
        let day = two_pi * t as f64 / cfg.diurnal_period_steps as f64;
        let slow = if cfg.slow_period_steps > 0 {
            1.0 + cfg.slow_amplitude * (two_pi * t as f64 / cfg.slow_period_steps as f64).sin()
        } else {
            1.0
        };
        let gain = match change {
            Some(c) if t >= c => cfg.regime_gain,
            _ => 1.0,
        };
        for hs in &hotspots {
            let level = hs.intensity * slow * gain * (1.0 + cfg.diurnal_amplitude * (day + hs.phase).sin());
            for (f, k) in frame.iter_mut().zip(&hs.kernel) {
                *f += level * k;
            }
        }
        for v in &frame {
            let noise = if cfg.noise_std > 0.0 {
                let e: f64 = StandardNormal.sample(&mut noise_rng);
                (cfg.noise_std * e - 0.5 * cfg.noise_std * cfg.noise_std).exp()
            } else {
                1.0
            };
            data.push((v * noise).max(0.0) as f32);
        }
    }
    GridSeries::new(Tensor::new(vec![n, h, w], data)?, cfg.dt_minutes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig { height: 8, width: 8, frames: 600, ..Default::default() }
    }

    #[test]
    fn no_hotspots_no_noise_is_zero() {
        let s = synth_generate(&SynthConfig { n_hotspots: 0, noise_std: 0.0, ..small() }).unwrap();
        assert!(s.frames.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deterministic_given_seed() {
        let a = synth_generate(&small()).unwrap();
        let b = synth_generate(&small()).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let c = synth_generate(&SynthConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn nonnegative() {
        let s = synth_generate(&SynthConfig { noise_std: 1.0, ..small() }).unwrap();
        assert!(s.frames.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn unstable_diffusion_rejected() {
        let err = synth_generate(&SynthConfig { diffusion_coefficient: 0.3, ..small() }).unwrap_err();
        assert!(err.to_string().contains("0.25"), "{err}");
    }

    #[test]
    fn diffusion_conserves_interior_mass() {
        let mut u = vec![0.0; 81];
        u[40] = 1.0;
        let v = diffuse(&diffuse(&u, 9, 9, 0.2), 9, 9, 0.2);
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(v.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn autocorrelation_peaks_at_daily_period() {
        let s = synth_generate(&SynthConfig { frames: 144 * 6, ..small() }).unwrap();
        let hw = 64;
        let mean: Vec<f64> =
            (0..s.len()).map(|t| s.frames.data()[t * hw..(t + 1) * hw].iter().map(|&v| v as f64).sum::<f64>() / hw as f64).collect();
        let mu = mean.iter().sum::<f64>() / mean.len() as f64;
        let acf = |lag: usize| -> f64 {
            let n = mean.len() - lag;
            (0..n).map(|i| (mean[i] - mu) * (mean[i + lag] - mu)).sum::<f64>() / n as f64
        };
        let best = (100..200).max_by(|&a, &b| acf(a).partial_cmp(&acf(b)).unwrap()).unwrap();
        assert!((best as i64 - 144).abs() <= 1, "peak at lag {best}");
    }
}
