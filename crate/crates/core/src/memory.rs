//! Slow learner: a persistent spatial memory `M` with learned scalar decay
//! `lambda = sigmoid(slow.lambda_logit)`, written through a small learned
//! optimizer network `phi_opt(z, S)` and injected into the latent stream
//! through a sigmoid gate.
//!
//! Teacher-forced step:  `M_t = lambda * M_{t-1} + (1 - lambda) * phi_opt(z_t, S_t)`
//! Free-running step:    `M_t = lambda * M_{t-1}`
//! Injection:            `z~ = z + sigmoid(g(z)) * M_t`

use crate::error::{Error, Result};
use crate::ssm::{Bound, ModelConfig, ParamStore};
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MemoryMode {
    /// Ground truth keeps arriving: surprise-driven writes.
    TeacherForced,
    /// Predictions are fed back: decay only.
    FreeRunning,
    /// Ablation: `M = 0`, no writes, no injection.
    Disabled,
}

impl MemoryMode {
    fn name(self) -> &'static str {
        match self {
            MemoryMode::TeacherForced => "teacher_forced",
            MemoryMode::FreeRunning => "free_running",
            MemoryMode::Disabled => "disabled",
        }
    }
}

/// Memory tensor `[B, D, H, W]` for one batch of streams plus its mode and
/// instrumentation counters.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryState<T: Scalar> {
    pub m: Tensor<T>,
    pub mode: MemoryMode,
    writes: u64,
    decays: u64,
}

impl<T: Scalar> MemoryState<T> {
    pub fn zeros(batch: usize, cfg: &ModelConfig, mode: MemoryMode) -> Self {
        Self::from_tensor(Tensor::zeros(&[batch, cfg.channels, cfg.patch_h, cfg.patch_w]), mode)
    }

    pub fn from_tensor(m: Tensor<T>, mode: MemoryMode) -> Self {
        Self { m, mode, writes: 0, decays: 0 }
    }

    /// Number of write-path executions since creation.
    pub fn writes(&self) -> u64 {
        self.writes
    }

    pub fn decays(&self) -> u64 {
        self.decays
    }

    pub fn batch(&self) -> usize {
        self.m.shape()[0]
    }

    /// `M <- lambda * M`.
    pub fn decay(&mut self, lambda: T) {
        for v in self.m.data_mut() {
            *v *= lambda;
        }
        self.decays += 1;
    }

    /// Teacher-forced convex update. Rejected unless the mode is
    /// [`MemoryMode::TeacherForced`].
    pub fn write(&mut self, params: &ParamStore<T>, z_ctx: &Tensor<T>, surprise: &Surprise<T>) -> Result<()> {
        if self.mode != MemoryMode::TeacherForced {
            return Err(Error::MemoryMode(self.mode.name()));
        }
        let mut tape = Tape::new();
        let p = params.bind(&mut tape);
        let prev = tape.constant(self.m.clone());
        let z = tape.constant(z_ctx.clone());
        let s = tape.constant(surprise.s.clone());
        let next = memory_write(&mut tape, &p, prev, z, s)?;
        self.commit_write(tape.value(next).clone());
        Ok(())
    }

    pub(crate) fn commit_write(&mut self, m: Tensor<T>) {
        self.m = m;
        self.writes += 1;
    }

    pub(crate) fn commit_decay(&mut self, m: Tensor<T>) {
        self.m = m;
        self.decays += 1;
    }
}

pub fn lambda<T: Scalar>(params: &ParamStore<T>) -> Result<T> {
    let logit = params
        .get("slow.lambda_logit")
        .ok_or_else(|| Error::config("model has no memory parameters"))?
        .data()[0];
    Ok(T::one() / (T::one() + (-logit).exp()))
}

/// Per-pixel absolute one-step error `[B, 1, H, W]`, detached from any tape.
#[derive(Clone, Debug, PartialEq)]
pub struct Surprise<T: Scalar> {
    pub s: Tensor<T>,
}

/// `|y_hat_prev - y_prev|`. Accepts `[H, W]` or `[B, H, W]` operands.
pub fn compute_surprise<T: Scalar>(y_hat_prev: &Tensor<T>, y_prev: &Tensor<T>) -> Result<Surprise<T>> {
    let diff = y_hat_prev.zip_map(y_prev, |a, b| (a - b).abs())?;
    let shape = match *y_hat_prev.shape() {
        [h, w] => vec![1, 1, h, w],
        [b, h, w] => vec![b, 1, h, w],
        [b, 1, h, w] => vec![b, 1, h, w],
        ref s => return Err(Error::shape(format!("surprise operands must be [H,W] or [B,H,W], got {s:?}"))),
    };
    Ok(Surprise { s: diff.reshape(&shape)? })
}

/// `phi_opt(z, S)`: two 1x1 convolutions over `concat(z, S)` with SiLU in
/// between; the output passes through tanh so writes stay in (-1, 1).
pub fn phi_opt<T: Scalar>(tape: &mut Tape<T>, p: &Bound, z_ctx: Var, surprise: Var) -> Result<Var> {
    let cat = tape.concat_channels(z_ctx, surprise)?;
    let h = tape.conv2d(cat, p.get("slow.phi.w1")?, Some(p.get("slow.phi.b1")?), 1, 0)?;
    let h = tape.silu(h);
    let o = tape.conv2d(h, p.get("slow.phi.w2")?, Some(p.get("slow.phi.b2")?), 1, 0)?;
    Ok(tape.tanh(o))
}

pub fn memory_write<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    m_prev: Var,
    z_ctx: Var,
    surprise: Var,
) -> Result<Var> {
    let lam = tape.sigmoid(p.get("slow.lambda_logit")?);
    let keep = tape.scale_by(m_prev, lam)?;
    let one_minus = tape.affine(lam, -T::one(), T::one());
    let phi = phi_opt(tape, p, z_ctx, surprise)?;
    let write = tape.scale_by(phi, one_minus)?;
    tape.add(keep, write)
}

pub fn memory_decay<T: Scalar>(tape: &mut Tape<T>, p: &Bound, m_prev: Var) -> Result<Var> {
    let lam = tape.sigmoid(p.get("slow.lambda_logit")?);
    tape.scale_by(m_prev, lam)
}

/// `z [T*B, D, H, W] + sigmoid(conv1x1(z)) * M` with `M [B, D, H, W]`
/// broadcast over the `steps` time slices.
pub fn memory_inject<T: Scalar>(tape: &mut Tape<T>, p: &Bound, z: Var, m: Var, steps: usize) -> Result<Var> {
    let g = tape.conv2d(z, p.get("slow.gate.w")?, Some(p.get("slow.gate.b")?), 1, 0)?;
    let gate = tape.sigmoid(g);
    let m = if steps > 1 { tape.repeat_outer(m, steps)? } else { m };
    let gm = tape.mul(gate, m)?;
    tape.add(z, gm)
}

/// Plain-tensor injection for a single time slice `z [B, D, H, W]`.
pub fn inject<T: Scalar>(params: &ParamStore<T>, z: &Tensor<T>, mem: &MemoryState<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let zv = tape.constant(z.clone());
    let mv = tape.constant(mem.m.clone());
    let out = memory_inject(&mut tape, &p, zv, mv, 1)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ModelConfig {
        ModelConfig { channels: 3, state_dim: 2, n_blocks: 1, low_rank: 1, patch_h: 4, patch_w: 4, ..Default::default() }
    }

    fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0))
    }

    fn set_lambda(p: &mut ParamStore<f64>, lam: f64) {
        p.get_mut("slow.lambda_logit").unwrap().data_mut()[0] = (lam / (1.0 - lam)).ln();
    }

    fn phi_value(p: &ParamStore<f64>, z: &Tensor<f64>, s: &Surprise<f64>) -> Tensor<f64> {
        let mut tape = Tape::new();
        let b = p.bind(&mut tape);
        let (zv, sv) = (tape.constant(z.clone()), tape.constant(s.s.clone()));
        let o = phi_opt(&mut tape, &b, zv, sv).unwrap();
        tape.value(o).clone()
    }

    #[test]
    fn surprise_is_absolute_error() {
        let a = Tensor::new(vec![1, 2], vec![1.0f64, -2.0]).unwrap();
        let z = Tensor::zeros(&[1, 2]);
        assert_eq!(compute_surprise(&a, &z).unwrap().s.data(), &[1.0, 2.0]);
        assert_eq!(compute_surprise(&a, &a).unwrap().s.data(), &[0.0, 0.0]);
        let (x, y) = (rand(&[2, 3, 3], 1), rand(&[2, 3, 3], 2));
        let s = compute_surprise(&x, &y).unwrap();
        assert_eq!(s.s.shape(), &[2, 1, 3, 3]);
        for i in 0..x.len() {
            assert_eq!(s.s.data()[i], (x.data()[i] - y.data()[i]).abs());
        }
        assert!(compute_surprise(&x, &rand(&[2, 3, 4], 3)).is_err());
    }

    #[test]
    fn large_logit_freezes_memory() {
        let mut p = ParamStore::<f64>::init(&cfg(), 1).unwrap();
        p.get_mut("slow.lambda_logit").unwrap().data_mut()[0] = 40.0;
        let prev = rand(&[1, 3, 4, 4], 4);
        let mut mem = MemoryState::from_tensor(prev.clone(), MemoryMode::TeacherForced);
        let s = compute_surprise(&rand(&[4, 4], 5), &rand(&[4, 4], 6)).unwrap();
        mem.write(&p, &rand(&[1, 3, 4, 4], 7), &s).unwrap();
        for (a, b) in mem.m.data().iter().zip(prev.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn half_write_from_empty_memory() {
        let mut p = ParamStore::<f64>::init(&cfg(), 2).unwrap();
        set_lambda(&mut p, 0.5);
        let z = rand(&[1, 3, 4, 4], 8);
        let s = compute_surprise(&rand(&[4, 4], 9), &rand(&[4, 4], 10)).unwrap();
        let mut mem = MemoryState::zeros(1, &cfg(), MemoryMode::TeacherForced);
        mem.write(&p, &z, &s).unwrap();
        let phi = phi_value(&p, &z, &s);
        for (a, b) in mem.m.data().iter().zip(phi.data()) {
            assert!((a - 0.5 * b).abs() < 1e-15);
        }
        assert_eq!(mem.writes(), 1);
    }

    #[test]
    fn writes_are_convex_and_bounded() {
        let p = ParamStore::<f64>::init(&cfg(), 3).unwrap();
        let mut mem = MemoryState::from_tensor(rand(&[2, 3, 4, 4], 11).map(|v| 3.0 * v), MemoryMode::TeacherForced);
        for step in 0..20 {
            let prev = mem.m.clone();
            let z = rand(&[2, 3, 4, 4], 100 + step).map(|v| 10.0 * v);
            let s = compute_surprise(&rand(&[2, 4, 4], 200 + step), &rand(&[2, 4, 4], 300 + step)).unwrap();
            let phi = phi_value(&p, &z, &s);
            mem.write(&p, &z, &s).unwrap();
            assert!(mem.m.max_abs() <= prev.max_abs().max(1.0));
            for i in 0..prev.len() {
                let (lo, hi) = (prev.data()[i].min(phi.data()[i]), prev.data()[i].max(phi.data()[i]));
                assert!(mem.m.data()[i] >= lo - 1e-12 && mem.m.data()[i] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn write_rejected_when_free_running() {
        let p = ParamStore::<f64>::init(&cfg(), 4).unwrap();
        let mut mem = MemoryState::zeros(1, &cfg(), MemoryMode::FreeRunning);
        let s = compute_surprise(&rand(&[4, 4], 1), &rand(&[4, 4], 2)).unwrap();
        assert!(matches!(mem.write(&p, &rand(&[1, 3, 4, 4], 3), &s), Err(Error::MemoryMode(_))));
        assert_eq!(mem.writes(), 0);
    }

    #[test]
    fn decay_is_geometric() {
        let mut mem = MemoryState::from_tensor(Tensor::scalar(1.0f64), MemoryMode::FreeRunning);
        mem.decay(0.9);
        mem.decay(0.9);
        assert!((mem.m.data()[0] - 0.81).abs() < 1e-15);
        let start = rand(&[1, 3, 4, 4], 12);
        let mut mem = MemoryState::from_tensor(start.clone(), MemoryMode::FreeRunning);
        for _ in 0..5 {
            mem.decay(0.7);
        }
        for (a, b) in mem.m.data().iter().zip(start.data()) {
            assert!((a - b * 0.7f64.powi(5)).abs() < 1e-15);
        }
        let mut zero = MemoryState::<f64>::zeros(1, &cfg(), MemoryMode::FreeRunning);
        zero.decay(0.3);
        assert_eq!(zero.m.max_abs(), 0.0);
    }

    #[test]
    fn injection_limits() {
        let mut p = ParamStore::<f64>::init(&cfg(), 5).unwrap();
        let z = rand(&[1, 3, 4, 4], 13);
        let zero = MemoryState::zeros(1, &cfg(), MemoryMode::TeacherForced);
        assert_eq!(inject(&p, &z, &zero).unwrap(), z);

        let m = rand(&[1, 3, 4, 4], 14);
        let mem = MemoryState::from_tensor(m.clone(), MemoryMode::TeacherForced);
        p.get_mut("slow.gate.w").unwrap().data_mut().fill(0.0);
        p.get_mut("slow.gate.b").unwrap().data_mut().fill(-1e4);
        assert_eq!(inject(&p, &z, &mem).unwrap(), z);
        p.get_mut("slow.gate.b").unwrap().data_mut().fill(1e4);
        let out = inject(&p, &z, &mem).unwrap();
        for i in 0..z.len() {
            assert!((out.data()[i] - z.data()[i] - m.data()[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn gate_bounds_injection_by_memory() {
        let p = ParamStore::<f64>::init(&cfg(), 6).unwrap();
        let z = rand(&[1, 3, 4, 4], 15);
        let m = rand(&[1, 3, 4, 4], 16);
        let mem = MemoryState::from_tensor(m.clone(), MemoryMode::TeacherForced);
        let out = inject(&p, &z, &mem).unwrap();
        for i in 0..z.len() {
            assert!((out.data()[i] - z.data()[i]).abs() <= m.data()[i].abs());
        }
    }

    #[test]
    fn lambda_initialised_to_point_nine() {
        let p = ParamStore::<f64>::init(&cfg(), 7).unwrap();
        assert!((lambda(&p).unwrap() - 0.9).abs() < 1e-12);
    }
}
