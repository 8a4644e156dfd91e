use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::normalize::Normalizer;
use super::patches::Origin;
use super::series::GridSeries;
use super::windows::{Split, Splits, WindowSpec};

/// A series prepared for one model geometry: normalized frames, the
/// chronological split and the patch grid.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    /// `[N, H, W]`, normalized with `norm`.
    pub frames: Tensor<f32>,
    pub norm: Normalizer,
    pub splits: Splits,
    pub spec: WindowSpec,
    pub origins: Vec<Origin>,
}

impl Dataset {
    /// Fits the normalizer on the training frames. Pass `norm` to reuse
    /// statistics from a checkpoint instead.
    pub fn prepare(
        series: &GridSeries,
        spec: WindowSpec,
        train_frac: f64,
        val_frac: f64,
        norm: Option<Normalizer>,
    ) -> Result<Self> {
        let (n, h, w) = (series.len(), series.height(), series.width());
        if n < spec.history + 1 {
            return Err(Error::Data(format!("series has {n} frames; need at least {}", spec.history + 1)));
        }
        let origins = spec.origins(h, w)?;
        let splits = Splits::new(n, train_frac, val_frac)?;
        let norm = match norm {
            Some(n) => n,
            None => {
                if splits.train.is_empty() {
                    return Err(Error::Data("training split is empty".into()));
                }
                let hw = h * w;
                Normalizer::fit(&series.frames.data()[splits.train.start * hw..splits.train.end * hw])?
            }
        };
        Ok(Self { height: h, width: w, frames: norm.apply(&series.frames), norm, splits, spec, origins })
    }

    /// Last-input-frame indices of the samples whose targets fall in `split`.
    pub fn times(&self, split: Split) -> std::ops::Range<usize> {
        self.splits.sample_times(split, self.spec.history)
    }

    /// `(origin, t)` keys grouped by location, chronological within each.
    pub fn sample_keys(&self, split: Split) -> Vec<(Origin, usize)> {
        let times = self.times(split);
        self.origins.iter().flat_map(|&o| times.clone().map(move |t| (o, t))).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalizer_fit_on_training_frames_only() {
        let frames = Tensor::from_fn(&[20, 4, 4], |i| (i / 16) as f32);
        let s = GridSeries::new(frames, 10).unwrap();
        let spec = WindowSpec { history: 3, patch_h: 2, patch_w: 2 };
        let d = Dataset::prepare(&s, spec, 0.5, 0.2, None).unwrap();
        assert_eq!(d.norm.mean, 4.5);
        let train = &d.frames.data()[..10 * 16];
        let mean = train.iter().map(|&v| v as f64).sum::<f64>() / train.len() as f64;
        let var = train.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / train.len() as f64;
        assert!(mean.abs() < 1e-6);
        assert!((var.sqrt() - 1.0).abs() < 1e-6);
        assert_eq!(d.origins.len(), 4);
        assert_eq!(d.sample_keys(Split::Train).len(), 4 * d.times(Split::Train).len());
    }

    #[test]
    fn too_short_series_rejected() {
        let s = GridSeries::new(Tensor::zeros(&[3, 2, 2]), 10).unwrap();
        let spec = WindowSpec { history: 3, patch_h: 2, patch_w: 2 };
        assert!(Dataset::prepare(&s, spec, 0.7, 0.1, None).is_err());
    }
}
