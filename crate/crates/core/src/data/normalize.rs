use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Global z-score statistics fit on the training frames.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalizer {
    pub mean: f64,
    pub std: f64,
}

impl Normalizer {
    /// Population mean and standard deviation. A constant input yields
    /// `std = 1` so the map stays invertible.
    pub fn fit(values: &[f32]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Data("cannot fit a normalizer on no data".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        if !mean.is_finite() || !std.is_finite() {
            return Err(Error::Data("non-finite statistics".into()));
        }
        Ok(Self { mean, std: if std > 1e-12 { std } else { 1.0 } })
    }

    pub fn apply_value(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn invert_value(&self, v: f64) -> f64 {
        v * self.std + self.mean
    }

    pub fn apply<T: Scalar>(&self, x: &Tensor<T>) -> Tensor<T> {
        x.map(|v| T::of(self.apply_value(v.to_f64())))
    }

    pub fn invert<T: Scalar>(&self, x: &Tensor<T>) -> Tensor<T> {
        x.map(|v| T::of(self.invert_value(v.to_f64())))
    }

    pub fn to_meta(&self) -> Vec<(String, String)> {
        vec![
            ("norm.mean".into(), format!("{:e}", self.mean)),
            ("norm.std".into(), format!("{:e}", self.std)),
        ]
    }

    pub fn from_meta(meta: &[(String, String)]) -> Result<Self> {
        let get = |k: &str| -> Result<f64> {
            meta.iter()
                .find(|(key, _)| key == k)
                .ok_or_else(|| Error::Format(format!("checkpoint metadata lacks {k}")))?
                .1
                .parse()
                .map_err(|_| Error::Format(format!("bad value for {k}")))
        };
        let n = Self { mean: get("norm.mean")?, std: get("norm.std")? };
        if !(n.std > 0.0) {
            return Err(Error::Format("normalizer std must be positive".into()));
        }
        Ok(n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn standardizes_fit_data() {
        let vals: Vec<f32> = (0..1000).map(|i| ((i * 37) % 101) as f32 * 0.7 + 12.0).collect();
        let n = Normalizer::fit(&vals).unwrap();
        let z: Vec<f64> = vals.iter().map(|&v| n.apply_value(v as f64)).collect();
        let mean = z.iter().sum::<f64>() / z.len() as f64;
        let std = (z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / z.len() as f64).sqrt();
        assert!(mean.abs() < 1e-6);
        assert!((std - 1.0).abs() < 1e-6);
    }

    #[test]
    fn constant_data_keeps_positive_std() {
        let n = Normalizer::fit(&[3.0; 10]).unwrap();
        assert_eq!(n.std, 1.0);
        assert!(Normalizer::fit(&[]).is_err());
    }

    #[test]
    fn meta_round_trip() {
        let n = Normalizer { mean: 41.123456789, std: 0.000123 };
        assert_eq!(Normalizer::from_meta(&n.to_meta()).unwrap(), n);
    }

    proptest! {
        #[test]
        fn apply_and_invert_are_inverse(mean in -1e3f64..1e3, std in 1e-2f64..1e3, v in -1e4f64..1e4) {
            let n = Normalizer { mean, std };
            let back = n.invert_value(n.apply_value(v));
            prop_assert!((back - v).abs() <= 1e-6 * v.abs().max(1.0));
            let fwd = n.apply_value(n.invert_value(v));
            prop_assert!((fwd - v).abs() <= 1e-6 * v.abs().max(1.0));
        }
    }
}
