//! Inference-time input perturbations, applied to normalized frames.

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::stream_rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DriftKind {
    None,
    ScaleOffset,
    SpatialShift,
    Volatility,
}

impl DriftKind {
    pub const ALL: [DriftKind; 4] = [DriftKind::None, DriftKind::ScaleOffset, DriftKind::SpatialShift, DriftKind::Volatility];

    pub fn name(self) -> &'static str {
        match self {
            DriftKind::None => "none",
            DriftKind::ScaleOffset => "scale_offset",
            DriftKind::SpatialShift => "spatial_shift",
            DriftKind::Volatility => "volatility",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown drift kind {s:?}; expected none, scale_offset, spatial_shift or volatility")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DriftSpec {
    pub kind: DriftKind,
    pub alpha: f64,
    pub beta: f64,
    /// Translation in cells along both axes (positive moves content down
    /// and right).
    pub k: i64,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for DriftSpec {
    fn default() -> Self {
        Self { kind: DriftKind::None, alpha: 1.25, beta: 0.25, k: 5, sigma: 0.25, seed: 0 }
    }
}

impl DriftSpec {
    pub fn of(kind: DriftKind) -> Self {
        Self { kind, ..Self::default() }
    }
}

/// Applies the drift to a tensor whose last two axes are spatial
/// (`[H, W]`, `[T, H, W]`, `[N, H, W]`, ...).
pub fn drift_apply(x: &Tensor<f32>, spec: &DriftSpec) -> Result<Tensor<f32>> {
    if x.rank() < 2 {
        return Err(Error::shape(format!("drift needs spatial axes, got shape {:?}", x.shape())));
    }
    match spec.kind {
        DriftKind::None => Ok(x.clone()),
        DriftKind::ScaleOffset => {
            let (a, b) = (spec.alpha, spec.beta);
            Ok(x.map(|v| (a * v as f64 + b) as f32))
        }
        DriftKind::SpatialShift => shift(x, spec.k),
        DriftKind::Volatility => {
            if !(spec.sigma >= 0.0) {
                return Err(Error::config("volatility sigma must be nonnegative"));
            }
            let normal = Normal::new(0.0, spec.sigma).map_err(|e| Error::config(e.to_string()))?;
            let mut rng = stream_rng(spec.seed, "drift.volatility");
            let mut out = x.clone();
            for v in out.data_mut() {
                *v = (*v as f64 + normal.sample(&mut rng)) as f32;
            }
            Ok(out)
        }
    }
}

fn shift(x: &Tensor<f32>, k: i64) -> Result<Tensor<f32>> {
    let r = x.rank();
    let (h, w) = (x.shape()[r - 2], x.shape()[r - 1]);
    if k.unsigned_abs() as usize >= h.min(w) {
        return Err(Error::config(format!("shift of {k} cells does not fit a {h}x{w} frame")));
    }
    let mut out = Tensor::zeros(x.shape());
    let plane = h * w;
    for (src, dst) in x.data().chunks(plane).zip(out.data_mut().chunks_mut(plane)) {
        for i in 0..h as i64 {
            let si = i - k;
            if si < 0 || si >= h as i64 {
                continue;
            }
            for j in 0..w as i64 {
                let sj = j - k;
                if sj < 0 || sj >= w as i64 {
                    continue;
                }
                dst[i as usize * w + j as usize] = src[si as usize * w + sj as usize];
            }
        }
    }
    Ok(out)
}
