//! One-step-ahead training: SmoothL1 plus an interior Laplacian penalty,
//! teacher-forced memory writes, clipped Adam steps and early stopping.

pub mod gradcheck;
pub mod log;

use crate::data::{Dataset, Origin, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions, MetricReport, ModelForecaster};
use crate::memory::compute_surprise;
use crate::ssm::{Bound, Forward, MemoryStep, NestS6};
use crate::tensor::{Adam, AdamConfig, Scalar, Tape, Tensor, UpdateOutcome, Var};

pub use gradcheck::{finite_difference_check, grad_check, GradCheckReport};
pub use log::{LogRow, TrainLog};

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default, deny_unknown_fields))]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Weight of the Laplacian penalty.
    pub laplacian_weight: f64,
    pub smooth_l1_beta: f64,
    #[cfg_attr(feature = "serde", serde(skip))]
    pub seed: u64,
    pub grad_clip_norm: f64,
    pub train_frac: f64,
    pub val_frac: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Caps optimizer steps per epoch.
    pub max_steps_per_epoch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            lr: 1e-3,
            laplacian_weight: 0.1,
            smooth_l1_beta: 1.0,
            seed: 0,
            grad_clip_norm: 1.0,
            train_frac: 0.7,
            val_frac: 0.1,
            patience: 5,
            max_steps_per_epoch: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr must be finite and nonnegative, got {}", self.lr)));
        }
        if !(self.laplacian_weight >= 0.0) {
            return Err(Error::config("laplacian_weight must be >= 0"));
        }
        if !(self.smooth_l1_beta > 0.0) {
            return Err(Error::config("smooth_l1_beta must be > 0"));
        }
        if !(self.grad_clip_norm > 0.0) {
            return Err(Error::config("grad_clip_norm must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        Ok(())
    }
}

/// `smooth_l1(pred, target) + weight * laplacian(pred)` on the tape.
pub fn loss_on<T: Scalar>(
    tape: &mut Tape<T>,
    pred: Var,
    target: &Tensor<T>,
    beta: f64,
    laplacian_weight: f64,
) -> Result<Var> {
    let data = tape.smooth_l1(pred, target, T::of(beta))?;
    let lap = tape.laplacian_penalty(pred)?;
    let lap = tape.affine(lap, T::of(laplacian_weight), T::zero());
    tape.add(data, lap)
}

/// Records forward and loss for one batch. `targets` is `[B, H, W]`.
pub fn record_loss<T: Scalar>(
    model: &NestS6<T>,
    tape: &mut Tape<T>,
    p: &Bound,
    windows: &Tensor<T>,
    targets: &Tensor<T>,
    mem: MemoryStep<'_, T>,
    cfg: &TrainConfig,
) -> Result<(Var, Forward)> {
    let fwd = model.forward(tape, p, windows, mem)?;
    let s = targets.shape();
    let target = targets.clone().reshape(&[s[0], 1, s[1], s[2]])?;
    let loss = loss_on(tape, fwd.pred, &target, cfg.smooth_l1_beta, cfg.laplacian_weight)?;
    Ok((loss, fwd))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub steps: usize,
    pub skipped: usize,
    /// More than 1% of steps were skipped.
    pub flagged: bool,
    /// Loss of every applied step, in order.
    pub losses: Vec<f64>,
    pub mean_loss: f64,
    pub val: Option<MetricReport>,
}

/// Splits chronologically grouped keys into `batch` contiguous lanes of
/// equal length (the remainder is dropped).
pub fn make_lanes(keys: &[(Origin, usize)], batch: usize) -> Vec<Vec<(Origin, usize)>> {
    let batch = batch.min(keys.len()).max(1);
    let len = keys.len() / batch;
    if len == 0 {
        return Vec::new();
    }
    keys.chunks(len).take(batch).map(|c| c.to_vec()).collect()
}

pub struct Trainer {
    pub model: NestS6<f32>,
    pub cfg: TrainConfig,
    adam: Adam<f32>,
    pub global_step: usize,
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub best: NestS6<f32>,
    pub best_epoch: usize,
    pub best_val_mae: Option<f64>,
    pub history: Vec<EpochStats>,
}

impl Trainer {
    pub fn new(model: NestS6<f32>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let adam = Adam::new(
            AdamConfig { lr: cfg.lr, ..AdamConfig::default() },
            model.params.iter().map(|(_, t)| t.shape()),
        );
        Ok(Self { model, cfg, adam, global_step: 0 })
    }

    /// One pass over the training split. Each lane is a chronological run
    /// of samples; memory and surprise restart whenever a lane jumps to a
    /// new location or time.
    pub fn train_epoch(&mut self, data: &Dataset, epoch: usize) -> Result<EpochStats> {
        let cfg = &self.model.config;
        let (d, hp, wp) = (cfg.channels, cfg.patch_h, cfg.patch_w);
        let lanes = make_lanes(&data.sample_keys(Split::Train), self.cfg.batch_size);
        if lanes.is_empty() {
            return Err(Error::Data("training split has no samples".into()));
        }
        let b = lanes.len();
        let mut steps = lanes[0].len();
        if let Some(cap) = self.cfg.max_steps_per_epoch {
            steps = steps.min(cap);
        }
        let plane = hp * wp;
        let mut mem = Tensor::<f32>::zeros(&[b, d, hp, wp]);
        let mut prev_pred = Tensor::<f32>::zeros(&[b, hp, wp]);
        let mut valid = vec![false; b];
        let mut losses = Vec::with_capacity(steps);
        let mut skipped = 0;
        for s in 0..steps {
            let keys: Vec<_> = lanes.iter().map(|l| l[s]).collect();
            for (i, &(o, t)) in keys.iter().enumerate() {
                let continues = s > 0 && lanes[i][s - 1].0 == o && lanes[i][s - 1].1 + 1 == t;
                if !continues {
                    mem.data_mut()[i * d * plane..(i + 1) * d * plane].fill(0.0);
                    valid[i] = false;
                }
            }
            let windows = data.spec.batch_windows(&data.frames, &keys)?;
            let targets = data.spec.batch_patches(&data.frames, &keys, 1)?;
            let last = data.spec.batch_patches(&data.frames, &keys, 0)?;
            let mut surprise = compute_surprise(&prev_pred, &last)?.s;
            for (i, &v) in valid.iter().enumerate() {
                if !v {
                    surprise.data_mut()[i * plane..(i + 1) * plane].fill(0.0);
                }
            }
            let mut tape = Tape::new();
            let p = self.model.params.bind(&mut tape);
            let step = if self.model.config.memory {
                MemoryStep::Write { prev: &mem, surprise: &surprise }
            } else {
                MemoryStep::Off
            };
            let (loss, fwd) = record_loss(&self.model, &mut tape, &p, &windows, &targets, step, &self.cfg)?;
            let lv = tape.value(loss).data()[0] as f64;
            self.global_step += 1;
            if !lv.is_finite() {
                skipped += 1;
                valid.fill(false);
                continue;
            }
            let grads = tape.backprop(loss)?;
            let mut g: Vec<Tensor<f32>> = p.vars().map(|(_, v)| grads.wrt(v)).collect();
            let norm = g.iter().flat_map(|t| t.data()).map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
            if !norm.is_finite() {
                skipped += 1;
                valid.fill(false);
                continue;
            }
            if norm > self.cfg.grad_clip_norm {
                let scale = (self.cfg.grad_clip_norm / norm) as f32;
                for t in &mut g {
                    t.data_mut().iter_mut().for_each(|x| *x *= scale);
                }
            }
            let mut params: Vec<&mut Tensor<f32>> = self.model.params.tensors_mut().collect();
            if self.adam.step(&mut params, &g)? == UpdateOutcome::SkippedNonFinite {
                skipped += 1;
                valid.fill(false);
                continue;
            }
            if let Some(m) = fwd.memory {
                mem = tape.value(m).clone();
            }
            prev_pred = tape.value(fwd.pred).clone().reshape(&[b, hp, wp])?;
            valid.fill(true);
            losses.push(lv);
        }
        let mean_loss = if losses.is_empty() { f64::NAN } else { losses.iter().sum::<f64>() / losses.len() as f64 };
        let flagged = skipped * 100 > steps;
        if flagged {
            log::warn_flagged(epoch, skipped, steps);
        }
        if steps > 0 && skipped == steps {
            return Err(Error::NonFinite { what: "training step", step: self.global_step });
        }
        Ok(EpochStats { epoch, steps, skipped, flagged, losses, mean_loss, val: None })
    }

    /// One-step validation metrics with the memory path active.
    pub fn validate(&self, data: &Dataset) -> Result<Option<MetricReport>> {
        if data.times(Split::Val).is_empty() {
            return Ok(None);
        }
        let f = ModelForecaster::new(&self.model, true);
        let opts = EvalOptions { split: Split::Val, ..EvalOptions::default() };
        let out = evaluate(&f, data, &opts, f.memory)?;
        Ok(out.trace.reports.into_iter().next())
    }

    /// Trains for up to `epochs`, keeping the parameters with the best
    /// validation MAE. `on_epoch` sees every finished epoch.
    pub fn fit(&mut self, data: &Dataset, mut on_epoch: impl FnMut(&EpochStats, &Self)) -> Result<FitOutcome> {
        let mut best = self.model.clone();
        let mut best_epoch = 0;
        let mut best_mae: Option<f64> = None;
        let mut stale = 0;
        let mut history = Vec::new();
        for epoch in 1..=self.cfg.epochs {
            let mut stats = self.train_epoch(data, epoch)?;
            stats.val = self.validate(data)?;
            on_epoch(&stats, self);
            match stats.val.as_ref().map(|v| v.mae) {
                Some(mae) if best_mae.map_or(true, |b| mae < b) => {
                    best = self.model.clone();
                    best_epoch = epoch;
                    best_mae = Some(mae);
                    stale = 0;
                }
                Some(_) => stale += 1,
                None => {
                    best = self.model.clone();
                    best_epoch = epoch;
                }
            }
            history.push(stats);
            if stale >= self.cfg.patience {
                break;
            }
        }
        Ok(FitOutcome { best, best_epoch, best_val_mae: best_mae, history })
    }
}
