use crate::data::{DriftSpec, Normalizer};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Errors in raw (denormalized) traffic units.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub mae: f64,
    pub rmse: f64,
    pub horizon: usize,
    /// Number of scored cells.
    pub n_samples: usize,
    pub drift: Option<DriftSpec>,
    pub memory_enabled: bool,
}

/// Running sums of absolute and squared raw-unit errors.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ErrorAccumulator {
    pub sum_abs: f64,
    pub sum_sq: f64,
    pub n: usize,
}

impl ErrorAccumulator {
    /// Adds every element pair of normalized `preds` and `targets`.
    pub fn add(&mut self, preds: &[f32], targets: &[f32], norm: &Normalizer) -> Result<()> {
        if preds.len() != targets.len() {
            return Err(Error::shape(format!("{} predictions for {} targets", preds.len(), targets.len())));
        }
        for (&p, &t) in preds.iter().zip(targets) {
            let d = norm.invert_value(p as f64) - norm.invert_value(t as f64);
            self.sum_abs += d.abs();
            self.sum_sq += d * d;
        }
        self.n += preds.len();
        Ok(())
    }

    pub fn finish(&self, horizon: usize, drift: Option<DriftSpec>, memory_enabled: bool) -> Result<MetricReport> {
        if self.n == 0 {
            return Err(Error::Data(format!("no samples to score at horizon {horizon}")));
        }
        let mae = self.sum_abs / self.n as f64;
        let rmse = (self.sum_sq / self.n as f64).sqrt();
        // last-ulp rounding guard
        let rmse = rmse.max(mae);
        Ok(MetricReport { mae, rmse, horizon, n_samples: self.n, drift, memory_enabled })
    }
}

/// MAE and RMSE of normalized predictions after inverting the z-score.
pub fn mae_rmse(preds: &Tensor<f32>, targets: &Tensor<f32>, norm: &Normalizer) -> Result<MetricReport> {
    preds.expect_shape(targets.shape())?;
    let mut acc = ErrorAccumulator::default();
    acc.add(preds.data(), targets.data(), norm)?;
    acc.finish(1, None, true)
}
