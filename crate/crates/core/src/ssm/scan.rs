use crate::error::Result;
use crate::tensor::kernels::{self, ScanDims};
use crate::tensor::{Scalar, Tensor};

/// Per-step selective-scan coefficients for a time-major batch of `T*B`
/// rows.
///
/// * `delta`  `[T*B, D, H, W]`, strictly positive step sizes
/// * `a_eff`  `[T*B, D*S]`, strictly negative decay rates
/// * `b_eff`, `c_eff` `[T*B, S, H, W]`, input and output couplings
/// * `d_skip` `[D]`
#[derive(Clone, Debug)]
pub struct SsmParams<T: Scalar> {
    pub delta: Tensor<T>,
    pub a_eff: Tensor<T>,
    pub b_eff: Tensor<T>,
    pub c_eff: Tensor<T>,
    pub d_skip: Tensor<T>,
}

/// Per-pixel hidden state `[B, D, S, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenState<T: Scalar> {
    pub h: Tensor<T>,
}

impl<T: Scalar> HiddenState<T> {
    pub fn zeros(batch: usize, channels: usize, state: usize, h: usize, w: usize) -> Self {
        Self { h: Tensor::zeros(&[batch, channels, state, h, w]) }
    }
}

/// Runs the recurrence over `steps` time steps of `x [T*B, D, H, W]`.
/// Returns the readout sequence (same shape as `x`) and the final state.
pub fn ssm_scan<T: Scalar>(
    x: &Tensor<T>,
    params: &SsmParams<T>,
    h0: &HiddenState<T>,
    steps: usize,
) -> Result<(Tensor<T>, HiddenState<T>)> {
    let out = kernels::selective_scan(
        x,
        &params.delta,
        &params.a_eff,
        &params.b_eff,
        &params.c_eff,
        &params.d_skip,
        &h0.h,
        steps,
    )?;
    let h = out.final_state().reshape(h0.h.shape())?;
    Ok((out.y, HiddenState { h }))
}

/// Scalar per-pixel loops over (b, d, s, i, j, t) applying the recurrence
/// one element at a time. Test oracle for [`ssm_scan`].
pub fn ssm_scan_reference<T: Scalar>(
    x: &Tensor<T>,
    params: &SsmParams<T>,
    h0: &HiddenState<T>,
    steps: usize,
) -> Result<(Tensor<T>, HiddenState<T>)> {
    let ScanDims { batch, channels, state, .. } = ScanDims::infer(
        x,
        &params.delta,
        &params.a_eff,
        &params.b_eff,
        &params.c_eff,
        &params.d_skip,
        &h0.h,
        steps,
    )?;
    let (hh, ww) = (x.shape()[2], x.shape()[3]);
    let xi = |t: usize, b: usize, d: usize, i: usize, j: usize| (((t * batch + b) * channels + d) * hh + i) * ww + j;
    let si = |t: usize, b: usize, s: usize, i: usize, j: usize| (((t * batch + b) * state + s) * hh + i) * ww + j;
    let hi = |b: usize, d: usize, s: usize, i: usize, j: usize| (((b * channels + d) * state + s) * hh + i) * ww + j;
    let mut readout = vec![T::zero(); x.len()];
    let mut h_final = h0.h.data().to_vec();
    for b in 0..batch {
        for d in 0..channels {
            for s in 0..state {
                for i in 0..hh {
                    for j in 0..ww {
                        let mut h = h0.h.data()[hi(b, d, s, i, j)];
                        for t in 0..steps {
                            let a = params.a_eff.data()[(t * batch + b) * channels * state + d * state + s];
                            let dt = params.delta.data()[xi(t, b, d, i, j)];
                            let xv = x.data()[xi(t, b, d, i, j)];
                            let bv = params.b_eff.data()[si(t, b, s, i, j)];
                            let cv = params.c_eff.data()[si(t, b, s, i, j)];
                            h = (a * dt).exp() * h + (dt * xv) * bv;
                            readout[xi(t, b, d, i, j)] += h * cv;
                        }
                        h_final[hi(b, d, s, i, j)] = h;
                    }
                }
            }
        }
    }
    for t in 0..steps {
        for b in 0..batch {
            for d in 0..channels {
                for i in 0..hh {
                    for j in 0..ww {
                        let k = xi(t, b, d, i, j);
                        readout[k] += params.d_skip.data()[d] * x.data()[k];
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), readout)?,
        HiddenState { h: Tensor::new(h0.h.shape().to_vec(), h_final)? },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_case(
        seed: u64,
        steps: usize,
        b: usize,
        d: usize,
        s: usize,
        h: usize,
        w: usize,
    ) -> (Tensor<f64>, SsmParams<f64>, HiddenState<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = |shape: &[usize], lo: f64, hi: f64| Tensor::from_fn(shape, |_| rng.gen_range(lo..hi));
        let x = t(&[steps * b, d, h, w], -1.0, 1.0);
        let params = SsmParams {
            delta: t(&[steps * b, d, h, w], 1e-4, 1.5),
            a_eff: t(&[steps * b, d * s], -3.0, -0.05),
            b_eff: t(&[steps * b, s, h, w], -1.0, 1.0),
            c_eff: t(&[steps * b, s, h, w], -1.0, 1.0),
            d_skip: t(&[d], -1.0, 1.0),
        };
        let h0 = HiddenState { h: t(&[b, d, s, h, w], -1.0, 1.0) };
        (x, params, h0)
    }

    #[test]
    fn zero_input_decays_geometrically() {
        let (mut x, p, h0) = random_case(1, 4, 1, 2, 3, 2, 2);
        x.data_mut().fill(0.0);
        let mut prev = h0.clone();
        for t in 0..4 {
            let step = |k: &Tensor<f64>| k.slice_outer(t, 1).unwrap();
            let pt = SsmParams {
                delta: step(&p.delta),
                a_eff: step(&p.a_eff),
                b_eff: step(&p.b_eff),
                c_eff: step(&p.c_eff),
                d_skip: p.d_skip.clone(),
            };
            let (_, next) = ssm_scan(&step(&x), &pt, &prev, 1).unwrap();
            assert!(next.h.max_abs() <= prev.h.max_abs());
            prev = next;
        }
        // closed form after 4 steps: h0 * prod_t exp(a_t * delta_t)
        let (_, hn) = ssm_scan(&x, &p, &h0, 4).unwrap();
        for (k, &v) in hn.h.data().iter().enumerate() {
            let (dd, ss, px) = ((k / 12) % 2, (k / 4) % 3, k % 4);
            let mut expect = h0.h.data()[k];
            for t in 0..4 {
                expect *= (p.a_eff.data()[t * 6 + dd * 3 + ss] * p.delta.data()[(t * 2 + dd) * 4 + px]).exp();
            }
            assert!((v - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn one_step_from_zero_state_closed_form() {
        let (x, p, _) = random_case(2, 1, 1, 2, 2, 2, 2);
        let h0 = HiddenState::zeros(1, 2, 2, 2, 2);
        let (y, _) = ssm_scan(&x, &p, &h0, 1).unwrap();
        for d in 0..2 {
            for px in 0..4 {
                let k = d * 4 + px;
                let u = p.delta.data()[k] * x.data()[k];
                let mut expect = 0.0;
                for s in 0..2 {
                    expect += u * p.b_eff.data()[s * 4 + px] * p.c_eff.data()[s * 4 + px];
                }
                expect += p.d_skip.data()[d] * x.data()[k];
                assert!((y.data()[k] - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn zero_readout_coupling_leaves_skip() {
        let (x, mut p, h0) = random_case(3, 3, 2, 1, 2, 2, 2);
        p.c_eff.data_mut().fill(0.0);
        let (y, _) = ssm_scan_reference(&x, &p, &h0, 3).unwrap();
        for (k, &v) in y.data().iter().enumerate() {
            assert_eq!(v, p.d_skip.data()[0] * x.data()[k]);
        }
    }

    #[test]
    fn zero_step_size_freezes_state() {
        let (x, mut p, h0) = random_case(4, 3, 1, 2, 2, 2, 2);
        p.delta.data_mut().fill(0.0);
        let (_, hn) = ssm_scan_reference(&x, &p, &h0, 3).unwrap();
        assert_eq!(hn, h0);
        let (_, hk) = ssm_scan(&x, &p, &h0, 3).unwrap();
        assert_eq!(hk, h0);
    }

    #[test]
    fn tiny_patch_matches_reference_bit_for_bit() {
        let (x, p, h0) = random_case(5, 3, 1, 1, 2, 2, 2);
        let (y, h) = ssm_scan(&x, &p, &h0, 3).unwrap();
        let (yr, hr) = ssm_scan_reference(&x, &p, &h0, 3).unwrap();
        assert_eq!(y, yr);
        assert_eq!(h, hr);
    }

    #[test]
    fn non_finite_step_reports_index() {
        let (x, mut p, h0) = random_case(6, 3, 1, 1, 1, 2, 2);
        p.b_eff.data_mut()[2 * 4] = f64::INFINITY;
        let err = ssm_scan(&x, &p, &h0, 3).unwrap_err();
        assert!(matches!(err, crate::Error::NonFinite { step: 2, .. }), "{err}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn kernel_equals_reference(seed in any::<u64>(), steps in 1usize..5, b in 1usize..3,
                                   d in 1usize..4, s in 1usize..4, h in 1usize..4, w in 1usize..4) {
            let (x, p, h0) = random_case(seed, steps, b, d, s, h, w);
            let (y, hn) = ssm_scan(&x, &p, &h0, steps).unwrap();
            let (yr, hr) = ssm_scan_reference(&x, &p, &h0, steps).unwrap();
            prop_assert_eq!(y, yr);
            prop_assert_eq!(hn, hr);
        }
    }
}
