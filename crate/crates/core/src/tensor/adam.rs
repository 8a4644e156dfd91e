use super::{Scalar, Tensor};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Per-parameter moment estimates.
#[derive(Clone, Debug)]
pub struct AdamState<T: Scalar> {
    pub first_moment: Tensor<T>,
    pub second_moment: Tensor<T>,
    pub step_count: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(shape: &[usize]) -> Self {
        Self { first_moment: Tensor::zeros(shape), second_moment: Tensor::zeros(shape), step_count: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpdateOutcome {
    Applied,
    SkippedNonFinite,
}

/// Bias-corrected Adam step applied in place. A gradient containing NaN or
/// infinity leaves both the parameter and the state untouched.
pub fn adam_update<T: Scalar>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<UpdateOutcome> {
    param.expect_shape(grad.shape())?;
    param.expect_shape(state.first_moment.shape())?;
    if !grad.all_finite() {
        return Ok(UpdateOutcome::SkippedNonFinite);
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let c1 = T::one() - T::of(cfg.beta1.powi(t));
    let c2 = T::one() - T::of(cfg.beta2.powi(t));
    let (lr, eps) = (T::of(cfg.lr), T::of(cfg.eps));
    let m = state.first_moment.data_mut();
    let v = state.second_moment.data_mut();
    for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
        *m = b1 * *m + (T::one() - b1) * g;
        *v = b2 * *v + (T::one() - b2) * g * g;
        let mhat = *m / c1;
        let vhat = *v / c2;
        *p -= lr * mhat / (vhat.sqrt() + eps);
    }
    Ok(UpdateOutcome::Applied)
}

/// Adam over an ordered list of parameters.
#[derive(Clone, Debug)]
pub struct Adam<T: Scalar> {
    pub config: AdamConfig,
    pub states: Vec<AdamState<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new<'a>(config: AdamConfig, shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        Self { config, states: shapes.into_iter().map(AdamState::new).collect() }
    }

    /// Updates every parameter, or none if any gradient is non-finite.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>]) -> Result<UpdateOutcome> {
        if grads.iter().any(|g| !g.all_finite()) {
            return Ok(UpdateOutcome::SkippedNonFinite);
        }
        for ((p, g), s) in params.iter_mut().zip(grads).zip(&mut self.states) {
            adam_update(p, g, s, &self.config)?;
        }
        Ok(UpdateOutcome::Applied)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_param() {
        let mut p = Tensor::new(vec![3], vec![1.0f64, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let mut st = AdamState::new(&[3]);
        adam_update(&mut p, &Tensor::zeros(&[3]), &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let cfg = AdamConfig { lr: 0.1, ..Default::default() };
        for g in [3.0f64, -0.02] {
            let mut p = Tensor::scalar(1.0f64);
            let mut st = AdamState::new(&[1]);
            adam_update(&mut p, &Tensor::scalar(g), &mut st, &cfg).unwrap();
            // mhat = g, vhat = g^2, so the step is lr * g / (|g| + eps)
            let expect = 1.0 - 0.1 * g / (g.abs() + 1e-8);
            assert!((p.data()[0] - expect).abs() < 1e-15);
            assert!((p.data()[0] - (1.0 - 0.1 * g.signum())).abs() < 1e-6);
        }
    }

    #[test]
    fn quadratic_decreases_monotonically() {
        let cfg = AdamConfig { lr: 0.1, ..Default::default() };
        let mut x = Tensor::scalar(1.0f64);
        let mut st = AdamState::new(&[1]);
        let mut f_prev = 1.0;
        for _ in 0..5 {
            let g = Tensor::scalar(2.0 * x.data()[0]);
            adam_update(&mut x, &g, &mut st, &cfg).unwrap();
            let f = x.data()[0].powi(2);
            assert!(f < f_prev);
            f_prev = f;
        }
    }

    #[test]
    fn non_finite_gradient_is_skipped() {
        let mut p = Tensor::scalar(1.0f32);
        let mut st = AdamState::new(&[1]);
        let out = adam_update(&mut p, &Tensor::scalar(f32::NAN), &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(out, UpdateOutcome::SkippedNonFinite);
        assert_eq!(p.data(), &[1.0]);
        assert_eq!(st.step_count, 0);
    }

    #[test]
    fn step_count_increments_by_one() {
        let mut p = Tensor::scalar(1.0f32);
        let mut st = AdamState::new(&[1]);
        for i in 1..=4 {
            adam_update(&mut p, &Tensor::scalar(0.3), &mut st, &AdamConfig::default()).unwrap();
            assert_eq!(st.step_count, i);
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = Tensor::<f32>::zeros(&[2]);
        let mut st = AdamState::new(&[2]);
        assert!(adam_update(&mut p, &Tensor::zeros(&[3]), &mut st, &AdamConfig::default()).is_err());
    }
}
