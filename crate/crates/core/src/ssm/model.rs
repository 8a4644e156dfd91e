use super::config::ModelConfig;
use super::params::{block_prefix, Bound, ParamStore};
use super::scan::SsmParams;
use crate::error::{Error, Result};
use crate::memory::{self, compute_surprise, MemoryMode, MemoryState};
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// How the slow learner participates in one forward pass.
pub enum MemoryStep<'a, T: Scalar> {
    /// No memory: no write, no injection.
    Off,
    /// Teacher-forced write from `prev [B, D, H, W]` and `surprise [B, 1, H, W]`.
    Write { prev: &'a Tensor<T>, surprise: &'a Tensor<T> },
    /// Free-running decay of `prev`.
    Decay { prev: &'a Tensor<T> },
}

/// Result of one recorded forward pass.
pub struct Forward {
    /// Next-patch prediction `[B, 1, H, W]`, normalized units.
    pub pred: Var,
    /// Updated memory `[B, D, H, W]` when the memory path ran.
    pub memory: Option<Var>,
}

/// Tape variables for the per-step scan coefficients of one block.
pub struct SsmParamVars {
    pub delta: Var,
    pub a_eff: Var,
    pub b_eff: Var,
    pub c_eff: Var,
    pub d_skip: Var,
}

/// Stem -> optional memory injection -> Conv-SSM blocks -> 1x1 head.
#[derive(Clone, Debug, PartialEq)]
pub struct NestS6<T: Scalar = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

/// `windows [B, T, H, W] -> u [T*B, 2, H, W]`, time-major. Channel 0 is the
/// frame, channel 1 its difference to the previous frame (zero at t = 0).
pub fn build_input<T: Scalar>(windows: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, steps, h, w] = match *windows.shape() {
        [b, t, h, w] => [b, t, h, w],
        [t, h, w] => [1, t, h, w],
        ref s => return Err(Error::shape(format!("windows must be [B,T,H,W] or [T,H,W], got {s:?}"))),
    };
    if steps == 0 {
        return Err(Error::shape("window needs at least one frame"));
    }
    let hw = h * w;
    let x = windows.data();
    let mut u = vec![T::zero(); steps * b * 2 * hw];
    for t in 0..steps {
        for bi in 0..b {
            let cur = &x[(bi * steps + t) * hw..][..hw];
            let prev = &x[(bi * steps + t.saturating_sub(1)) * hw..][..hw];
            let dst = &mut u[(t * b + bi) * 2 * hw..][..2 * hw];
            dst[..hw].copy_from_slice(cur);
            for p in 0..hw {
                dst[hw + p] = cur[p] - prev[p];
            }
        }
    }
    Tensor::new(vec![steps * b, 2, h, w], u)
}

/// Last frame of every window: `[B, T, H, W] -> [B, H, W]`.
pub fn last_frames<T: Scalar>(windows: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, steps, h, w] = match *windows.shape() {
        [b, t, h, w] => [b, t, h, w],
        ref s => return Err(Error::shape(format!("windows must be [B,T,H,W], got {s:?}"))),
    };
    let hw = h * w;
    let mut out = Vec::with_capacity(b * hw);
    for bi in 0..b {
        out.extend_from_slice(&windows.data()[(bi * steps + steps - 1) * hw..][..hw]);
    }
    Tensor::new(vec![b, h, w], out)
}

/// Per-stream inference state: memory plus the previous prediction, which
/// the next teacher-forced step turns into a surprise signal.
#[derive(Clone, Debug)]
pub struct StreamState<T: Scalar> {
    pub memory: MemoryState<T>,
    pub prev_pred: Option<Tensor<T>>,
    /// Ground truth `[B, H, W]` for the frame `prev_pred` targeted, when it
    /// differs from the newest input frame (e.g. under input drift).
    /// Consumed by the next step.
    pub truth: Option<Tensor<T>>,
}

impl<T: Scalar> StreamState<T> {
    pub fn new(batch: usize, cfg: &ModelConfig, mode: MemoryMode) -> Self {
        Self { memory: MemoryState::zeros(batch, cfg, mode), prev_pred: None, truth: None }
    }

    /// Surprise against `truth`, else the newest observed frame; zero at
    /// stream start.
    pub fn surprise(&self, windows: &Tensor<T>) -> Result<Tensor<T>> {
        let last = match &self.truth {
            Some(t) => t.clone(),
            None => last_frames(windows)?,
        };
        match &self.prev_pred {
            Some(p) => Ok(compute_surprise(p, &last)?.s),
            None => {
                let s = last.shape();
                Ok(Tensor::zeros(&[s[0], 1, s[1], s[2]]))
            }
        }
    }
}

impl<T: Scalar> NestS6<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ParamStore::init(&config, seed)?;
        Ok(Self { config, params })
    }

    /// Same fast learner with the slow learner removed from the architecture.
    pub fn without_memory(&self) -> Self {
        Self {
            config: ModelConfig { memory: false, ..self.config.clone() },
            params: self.params.without_memory(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> NestS6<U> {
        NestS6 { config: self.config.clone(), params: self.params.cast() }
    }

    pub fn to_checkpoint(&self, extra_meta: &[(String, String)]) -> Checkpoint {
        let mut meta = self.config.to_meta();
        meta.extend_from_slice(extra_meta);
        Checkpoint {
            meta,
            tensors: self.params.iter().map(|(k, v)| (k.to_string(), v.cast::<f32>())).collect(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = ModelConfig::from_meta(&ck.meta)?;
        let reference = ParamStore::<T>::init(&config, 0)?;
        let mut params = ParamStore::empty();
        for (name, shape_ref) in reference.iter() {
            let t = ck
                .tensors
                .get(name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name}")))?;
            if t.shape() != shape_ref.shape() {
                return Err(Error::Format(format!(
                    "tensor {name}: checkpoint shape {:?}, config expects {:?}",
                    t.shape(),
                    shape_ref.shape()
                )));
            }
            params.insert(name, t.cast());
        }
        if ck.tensors.len() != reference.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, config expects {}",
                ck.tensors.len(),
                reference.len()
            )));
        }
        Ok(Self { config, params })
    }

    fn conv(&self, tape: &mut Tape<T>, p: &Bound, x: Var, name: &str, groups: usize, padding: usize) -> Result<Var> {
        tape.conv2d(x, p.get(&format!("{name}.w"))?, Some(p.get(&format!("{name}.b"))?), groups, padding)
    }

    /// 3x3 same-padding convolution (2 -> D channels) followed by SiLU.
    pub fn stem_on(&self, tape: &mut Tape<T>, p: &Bound, u: Var) -> Result<Var> {
        let z = self.conv(tape, p, u, "fast.stem", 1, 1)?;
        Ok(tape.silu(z))
    }

    /// Depthwise 3x3 conv then windowed attention, each pre-normalized and
    /// residual.
    pub fn local_mix_on(&self, tape: &mut Tape<T>, p: &Bound, block: usize, z: Var) -> Result<Var> {
        let pre = block_prefix(block);
        let d = self.config.channels;
        let n1 = tape.layer_norm(z, p.get(&format!("{pre}.norm1.g"))?, p.get(&format!("{pre}.norm1.b"))?)?;
        let dw = self.conv(tape, p, n1, &format!("{pre}.dw"), d, 1)?;
        let a = tape.add(z, dw)?;
        let n2 = tape.layer_norm(a, p.get(&format!("{pre}.norm2.g"))?, p.get(&format!("{pre}.norm2.b"))?)?;
        let q = self.conv(tape, p, n2, &format!("{pre}.attn.q"), 1, 0)?;
        let k = self.conv(tape, p, n2, &format!("{pre}.attn.k"), 1, 0)?;
        let v = self.conv(tape, p, n2, &format!("{pre}.attn.v"), 1, 0)?;
        let o = tape.window_attention(q, k, v, self.config.window())?;
        let o = self.conv(tape, p, o, &format!("{pre}.attn.o"), 1, 0)?;
        tape.add(a, o)
    }

    /// Delta, B and C from 1x1 convolutions; A = -exp(a_base + U V^T pool(z)).
    pub fn predict_params_on(&self, tape: &mut Tape<T>, p: &Bound, block: usize, z: Var) -> Result<SsmParamVars> {
        let pre = block_prefix(block);
        let (d, s, r) = (self.config.channels, self.config.state_dim, self.config.low_rank);
        let rows = tape.value(z).shape()[0];
        let dl = self.conv(tape, p, z, &format!("{pre}.ssm.delta"), 1, 0)?;
        let dl = tape.softplus(dl);
        let delta = tape.affine(dl, T::one(), T::of(self.config.delta_min));
        let b_eff = self.conv(tape, p, z, &format!("{pre}.ssm.b"), 1, 0)?;
        let c_eff = self.conv(tape, p, z, &format!("{pre}.ssm.c"), 1, 0)?;
        let base = tape.reshape(p.get(&format!("{pre}.ssm.a_base"))?, &[d * s])?;
        let modulation = if r > 0 {
            let pooled = tape.global_avg_pool(z)?;
            let low = tape.linear(pooled, p.get(&format!("{pre}.ssm.lr_v"))?, None)?;
            tape.linear(low, p.get(&format!("{pre}.ssm.lr_u"))?, None)?
        } else {
            tape.constant(Tensor::zeros(&[rows, d * s]))
        };
        let pre_a = tape.add_row_bias(modulation, base)?;
        let e = tape.exp(pre_a);
        let a_eff = tape.affine(e, -T::one(), T::zero());
        let d_skip = p.get(&format!("{pre}.ssm.d_skip"))?;
        Ok(SsmParamVars { delta, a_eff, b_eff, c_eff, d_skip })
    }

    /// Full recorded forward pass over `windows [B, T, H, W]`.
    pub fn forward(&self, tape: &mut Tape<T>, p: &Bound, windows: &Tensor<T>, mem: MemoryStep<'_, T>) -> Result<Forward> {
        let cfg = &self.config;
        let [b, steps, h, w] = match *windows.shape() {
            [b, t, h, w] => [b, t, h, w],
            ref s => return Err(Error::shape(format!("windows must be [B,T,H,W], got {s:?}"))),
        };
        if (h, w) != (cfg.patch_h, cfg.patch_w) {
            return Err(Error::shape(format!(
                "window patch {h}x{w} does not match model patch {}x{}",
                cfg.patch_h, cfg.patch_w
            )));
        }
        let u = tape.constant(build_input(windows)?);
        let mut z = self.stem_on(tape, p, u)?;

        let memory = match mem {
            MemoryStep::Off => None,
            _ if !cfg.memory => {
                return Err(Error::config("memory step requested on a model without memory"));
            }
            MemoryStep::Write { prev, surprise } => {
                let prev = tape.constant(prev.clone());
                let s = tape.constant(surprise.clone());
                let ctx = tape.slice_outer(z, (steps - 1) * b, b)?;
                Some(memory::memory_write(tape, p, prev, ctx, s)?)
            }
            MemoryStep::Decay { prev } => {
                let prev = tape.constant(prev.clone());
                Some(memory::memory_decay(tape, p, prev)?)
            }
        };
        if let Some(m) = memory {
            z = memory::memory_inject(tape, p, z, m, steps)?;
        }

        let (d, s) = (cfg.channels, cfg.state_dim);
        for block in 0..cfg.n_blocks {
            let mixed = self.local_mix_on(tape, p, block, z)?;
            let pre = block_prefix(block);
            let x = tape.layer_norm(mixed, p.get(&format!("{pre}.norm3.g"))?, p.get(&format!("{pre}.norm3.b"))?)?;
            let sp = self.predict_params_on(tape, p, block, x)?;
            let h0 = tape.constant(Tensor::zeros(&[b, d, s, h, w]));
            let y = tape.selective_scan(x, sp.delta, sp.a_eff, sp.b_eff, sp.c_eff, sp.d_skip, h0, steps)?;
            z = tape.add(mixed, y)?;
        }
        let last = tape.slice_outer(z, (steps - 1) * b, b)?;
        let pred = self.conv(tape, p, last, "fast.head", 1, 0)?;
        Ok(Forward { pred, memory })
    }

    /// One streaming step for a batch of windows: prediction `[B, H, W]`.
    /// The memory follows `state.memory.mode` (always off for memory-free
    /// models) and `state` is advanced.
    pub fn step(&self, windows: &Tensor<T>, state: &mut StreamState<T>) -> Result<Tensor<T>> {
        let mode = if self.config.memory { state.memory.mode } else { MemoryMode::Disabled };
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let surprise;
        let mem = match mode {
            MemoryMode::Disabled => MemoryStep::Off,
            MemoryMode::TeacherForced => {
                surprise = state.surprise(windows)?;
                MemoryStep::Write { prev: &state.memory.m, surprise: &surprise }
            }
            MemoryMode::FreeRunning => MemoryStep::Decay { prev: &state.memory.m },
        };
        state.truth = None;
        let out = self.forward(&mut tape, &p, windows, mem)?;
        if let Some(m) = out.memory {
            let m = tape.value(m).clone();
            match mode {
                MemoryMode::TeacherForced => state.memory.commit_write(m),
                _ => state.memory.commit_decay(m),
            }
        }
        let pv = tape.value(out.pred);
        let s = pv.shape();
        let pred = pv.clone().reshape(&[s[0], s[2], s[3]])?;
        state.prev_pred = Some(pred.clone());
        Ok(pred)
    }

    /// Single-patch convenience: `x_seq [T, H, W] -> [H, W]`. Without a
    /// stream state the memory path is off.
    pub fn predict_patch(&self, x_seq: &Tensor<T>, state: Option<&mut StreamState<T>>) -> Result<Tensor<T>> {
        let s = x_seq.shape();
        if s.len() != 3 {
            return Err(Error::shape(format!("x_seq must be [T,H,W], got {s:?}")));
        }
        let windows = x_seq.clone().reshape(&[1, s[0], s[1], s[2]])?;
        let mut scratch;
        let state = match state {
            Some(st) => st,
            None => {
                scratch = StreamState::new(1, &self.config, MemoryMode::Disabled);
                &mut scratch
            }
        };
        let y = self.step(&windows, state)?;
        y.reshape(&[s[1], s[2]])
    }

    /// Plain-tensor stem over `u [N, 2, H, W]`.
    pub fn stem_forward(&self, u: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let uv = tape.constant(u.clone());
        let z = self.stem_on(&mut tape, &p, uv)?;
        Ok(tape.value(z).clone())
    }

    pub fn local_mix(&self, block: usize, z: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let zv = tape.constant(z.clone());
        let o = self.local_mix_on(&mut tape, &p, block, zv)?;
        Ok(tape.value(o).clone())
    }

    pub fn predict_params(&self, block: usize, z: &Tensor<T>) -> Result<SsmParams<T>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let zv = tape.constant(z.clone());
        let v = self.predict_params_on(&mut tape, &p, block, zv)?;
        Ok(SsmParams {
            delta: tape.value(v.delta).clone(),
            a_eff: tape.value(v.a_eff).clone(),
            b_eff: tape.value(v.b_eff).clone(),
            c_eff: tape.value(v.c_eff).clone(),
            d_skip: tape.value(v.d_skip).clone(),
        })
    }
}
