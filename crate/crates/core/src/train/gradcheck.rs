//! Central-difference gradient checks against the tape.

use rand::seq::index::sample;

use super::{record_loss, TrainConfig};
use crate::error::{Error, Result};
use crate::rng::stream_rng;
use crate::ssm::{Bound, MemoryStep, NestS6, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Magnitude below which errors are measured absolutely.
pub const REL_FLOOR: f64 = 1e-6;

/// Tensors larger than this are checked on a 5% coordinate sample.
pub const FULL_CHECK_LIMIT: usize = 1000;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `name[index]` of the worst coordinate.
    pub worst: String,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn ensure(&self, tol: f64) -> Result<()> {
        if self.max_rel_err < tol {
            Ok(())
        } else {
            Err(Error::GradCheck(format!(
                "{} analytic {:e} numeric {:e} rel {:e}",
                self.worst, self.analytic, self.numeric, self.max_rel_err
            )))
        }
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

fn eval_loss(params: &ParamStore<f64>, loss: &impl Fn(&mut Tape<f64>, &Bound) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let l = loss(&mut tape, &p)?;
    Ok(tape.value(l).data()[0])
}

/// Compares tape gradients of a scalar `loss` with central differences of
/// step `h` for every parameter coordinate (sampled for large tensors).
pub fn finite_difference_check(
    params: &ParamStore<f64>,
    h: f64,
    seed: u64,
    loss: impl Fn(&mut Tape<f64>, &Bound) -> Result<Var>,
) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let l = loss(&mut tape, &p)?;
    let grads = tape.backprop(l)?;
    let analytic: Vec<Tensor<f64>> = p.vars().map(|(_, v)| grads.wrt(v)).collect();
    let names: Vec<String> = params.iter().map(|(k, _)| k.to_string()).collect();

    let mut rng = stream_rng(seed, "gradcheck");
    let mut work = params.clone();
    let mut report =
        GradCheckReport { max_rel_err: 0.0, worst: String::new(), analytic: 0.0, numeric: 0.0, checked: 0 };
    for (pi, name) in names.iter().enumerate() {
        let n = analytic[pi].len();
        let coords: Vec<usize> = if n <= FULL_CHECK_LIMIT {
            (0..n).collect()
        } else {
            let mut v = sample(&mut rng, n, n.div_ceil(20)).into_vec();
            v.sort_unstable();
            v
        };
        for i in coords {
            let orig = params.iter().nth(pi).unwrap().1.data()[i];
            let set = |w: &mut ParamStore<f64>, x: f64| w.tensors_mut().nth(pi).unwrap().data_mut()[i] = x;
            set(&mut work, orig + h);
            let up = eval_loss(&work, &loss)?;
            set(&mut work, orig - h);
            let down = eval_loss(&work, &loss)?;
            set(&mut work, orig);
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[pi].data()[i];
            let e = rel_err(a, numeric);
            report.checked += 1;
            if !(e <= report.max_rel_err) {
                report = GradCheckReport { max_rel_err: e, worst: format!("{name}[{i}]"), analytic: a, numeric, ..report };
            }
        }
    }
    Ok(report)
}

/// Checks the full training loss of `model` on one batch. `memory` supplies
/// `(prev, surprise)` for a teacher-forced write; `None` runs without memory.
pub fn grad_check(
    model: &NestS6<f64>,
    windows: &Tensor<f64>,
    targets: &Tensor<f64>,
    memory: Option<(&Tensor<f64>, &Tensor<f64>)>,
    cfg: &TrainConfig,
    h: f64,
) -> Result<GradCheckReport> {
    finite_difference_check(&model.params, h, cfg.seed, |tape, p| {
        let step = match memory {
            Some((prev, surprise)) => MemoryStep::Write { prev, surprise },
            None => MemoryStep::Off,
        };
        Ok(record_loss(model, tape, p, windows, targets, step, cfg)?.0)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssm::ModelConfig;

    #[test]
    fn rel_err_floor() {
        assert_eq!(rel_err(1.0, 1.0), 0.0);
        assert!((rel_err(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((rel_err(1e-9, 0.0) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn linear_head_is_exact() {
        let cfg = ModelConfig {
            channels: 4,
            state_dim: 2,
            n_blocks: 1,
            patch_h: 2,
            patch_w: 2,
            history: 3,
            ..Default::default()
        };
        let model = NestS6::<f64>::new(cfg, 3).unwrap();
        let mut head = ParamStore::<f64>::empty();
        for (k, v) in model.params.iter().filter(|(k, _)| k.starts_with("fast.head")) {
            head.insert(k, v.clone());
        }
        assert!(!head.is_empty());
        let z = Tensor::from_fn(&[2, 4, 2, 2], |i| (i as f64 * 0.7).sin());
        let r = finite_difference_check(&head, 1e-5, 0, |tape, p| {
            let x = tape.constant(z.clone());
            let y = tape.conv2d(x, p.get("fast.head.w")?, Some(p.get("fast.head.b")?), 1, 0)?;
            Ok(tape.sum(y))
        })
        .unwrap();
        assert_eq!(r.checked, 5);
        assert!(r.max_rel_err < 1e-10, "{r:?}");
    }
}
