use crate::data::{drift_apply, Dataset, DriftKind, DriftSpec, Normalizer, Split};
use crate::error::{Error, Result};
use crate::ssm::NestS6;
use crate::tensor::Tensor;

use super::forecast::{Forecaster, ModelForecaster, StepKind};
use super::metrics::{ErrorAccumulator, MetricReport};

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub split: Split,
    /// Rollout length; 1 is plain one-step evaluation.
    pub horizon: usize,
    pub drift: DriftSpec,
    /// Shift the targets along with the inputs under spatial-shift drift.
    pub shift_targets: bool,
    pub per_pixel_map: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { split: Split::Test, horizon: 1, drift: DriftSpec::default(), shift_targets: false, per_pixel_map: false }
    }
}

/// Per-horizon reports plus accumulation `metric(H) - metric(1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutTrace {
    pub reports: Vec<MetricReport>,
    pub delta_mae: f64,
    pub delta_rmse: f64,
}

impl RolloutTrace {
    pub fn from_reports(reports: Vec<MetricReport>) -> Result<Self> {
        let (first, last) = match (reports.first(), reports.last()) {
            (Some(f), Some(l)) => (f, l),
            _ => return Err(Error::Data("rollout produced no reports".into())),
        };
        Ok(Self { delta_mae: last.mae - first.mae, delta_rmse: last.rmse - first.rmse, reports })
    }
}

#[derive(Clone, Debug)]
pub struct EvalOutput {
    pub trace: RolloutTrace,
    /// Per-cell one-step RMSE `[H, W]` in raw units.
    pub rmse_map: Option<Tensor<f64>>,
}

/// Drops the oldest frame of every window and appends `next [B, H, W]`.
pub fn shift_append(windows: &Tensor<f32>, next: &Tensor<f32>) -> Result<Tensor<f32>> {
    let [b, t, h, w] = match *windows.shape() {
        [b, t, h, w] => [b, t, h, w],
        ref s => return Err(Error::shape(format!("windows must be [B,T,H,W], got {s:?}"))),
    };
    next.expect_shape(&[b, h, w])?;
    let hw = h * w;
    let mut out = Vec::with_capacity(windows.len());
    for bi in 0..b {
        out.extend_from_slice(&windows.data()[(bi * t + 1) * hw..(bi + 1) * t * hw]);
        out.extend_from_slice(&next.data()[bi * hw..(bi + 1) * hw]);
    }
    Tensor::new(windows.shape().to_vec(), out)
}

/// Feeds predictions back for `truth.len()` steps, starting with one
/// observed step on `seed`. `truth[h-1]` holds frames `t + h` as `[B, H, W]`.
pub fn rollout<F: Forecaster>(
    f: &F,
    state: &mut F::State,
    seed: &Tensor<f32>,
    truth: &[Tensor<f32>],
    norm: &Normalizer,
    memory_enabled: bool,
) -> Result<RolloutTrace> {
    if truth.is_empty() {
        return Err(Error::Data("rollout needs at least one truth frame".into()));
    }
    let mut window = seed.clone();
    let mut reports = Vec::with_capacity(truth.len());
    let mut pred = f.step(&window, state, StepKind::Observed)?;
    for (h, target) in truth.iter().enumerate() {
        if h > 0 {
            window = shift_append(&window, &pred)?;
            pred = f.step(&window, state, StepKind::FedBack)?;
        }
        let mut acc = ErrorAccumulator::default();
        acc.add(pred.data(), target.data(), norm)?;
        reports.push(acc.finish(h + 1, None, memory_enabled)?);
    }
    RolloutTrace::from_reports(reports)
}

/// Streams every patch location chronologically through `split`. At each
/// origin the forecaster takes one observed step (horizon 1) and, for
/// `horizon > 1`, a forked free-running rollout scored against frames
/// `t + h` that lie inside the split.
pub fn evaluate<F: Forecaster>(f: &F, data: &Dataset, opts: &EvalOptions, memory_enabled: bool) -> Result<EvalOutput> {
    if opts.horizon == 0 {
        return Err(Error::config("horizon must be at least 1"));
    }
    let inputs = drift_apply(&data.frames, &opts.drift)?;
    let shifted;
    let targets = if opts.shift_targets && opts.drift.kind == DriftKind::SpatialShift {
        shifted = drift_apply(&data.frames, &opts.drift)?;
        &shifted
    } else {
        &data.frames
    };
    let times = data.times(opts.split);
    if times.is_empty() {
        return Err(Error::Data(format!("{} split has no samples", opts.split.name())));
    }
    let split_end = data.splits.frames(opts.split).end;
    let spec = data.spec;
    let (gw, hw) = (data.width, data.height * data.width);
    let mut state = f.init_state(data.origins.len());
    let mut accs = vec![ErrorAccumulator::default(); opts.horizon];
    let mut sq_map = vec![0.0f64; if opts.per_pixel_map { hw } else { 0 }];
    let mut map_frames = 0usize;
    for t in times {
        let keys: Vec<_> = data.origins.iter().map(|&o| (o, t)).collect();
        let windows = spec.batch_windows(&inputs, &keys)?;
        f.observe(&mut state, &spec.batch_patches(targets, &keys, 0)?);
        let pred = f.step(&windows, &mut state, StepKind::Observed)?;
        let target = spec.batch_patches(targets, &keys, 1)?;
        accs[0].add(pred.data(), target.data(), &data.norm)?;
        if opts.per_pixel_map {
            let ph = spec.patch_h * spec.patch_w;
            for (b, &((r0, c0), _)) in keys.iter().enumerate() {
                for k in 0..ph {
                    let (r, c) = (k / spec.patch_w, k % spec.patch_w);
                    let d = data.norm.invert_value(pred.data()[b * ph + k] as f64)
                        - data.norm.invert_value(target.data()[b * ph + k] as f64);
                    sq_map[(r0 + r) * gw + c0 + c] += d * d;
                }
            }
            map_frames += 1;
        }
        if opts.horizon > 1 && t + 2 < split_end {
            let mut fork = state.clone();
            let mut window = windows;
            let mut p = pred;
            for h in 2..=opts.horizon {
                if t + h >= split_end {
                    break;
                }
                window = shift_append(&window, &p)?;
                p = f.step(&window, &mut fork, StepKind::FedBack)?;
                let target = spec.batch_patches(targets, &keys, h)?;
                accs[h - 1].add(p.data(), target.data(), &data.norm)?;
            }
        }
    }
    let reports = accs
        .iter()
        .enumerate()
        .map(|(h, a)| a.finish(h + 1, Some(opts.drift), memory_enabled))
        .collect::<Result<Vec<_>>>()?;
    let rmse_map = if opts.per_pixel_map {
        let cells = sq_map.into_iter().map(|s| (s / map_frames as f64).sqrt()).collect();
        Some(Tensor::new(vec![data.height, data.width], cells)?)
    } else {
        None
    };
    Ok(EvalOutput { trace: RolloutTrace::from_reports(reports)?, rmse_map })
}

/// One-step test MAE/RMSE of `model` under `spec`, with the slow learner
/// active or ablated. Never writes to the model.
pub fn drift_eval(model: &NestS6<f32>, data: &Dataset, spec: &DriftSpec, memory_enabled: bool) -> Result<MetricReport> {
    let f = ModelForecaster::new(model, memory_enabled);
    let opts = EvalOptions { drift: *spec, ..EvalOptions::default() };
    let mut out = evaluate(&f, data, &opts, f.memory)?;
    Ok(out.trace.reports.remove(0))
}

/// Per-cell RMSE over stacked full-grid predictions `[N, H, W]`.
pub fn per_pixel_rmse_map(preds: &Tensor<f32>, targets: &Tensor<f32>, norm: &Normalizer) -> Result<Tensor<f64>> {
    preds.expect_shape(targets.shape())?;
    preds.expect_shape_rank(3, "prediction stack")?;
    let (n, h, w) = (preds.shape()[0], preds.shape()[1], preds.shape()[2]);
    if n == 0 {
        return Err(Error::Data("no frames for the RMSE map".into()));
    }
    let mut sq = vec![0.0f64; h * w];
    for (i, (&p, &t)) in preds.data().iter().zip(targets.data()).enumerate() {
        let d = norm.invert_value(p as f64) - norm.invert_value(t as f64);
        sq[i % (h * w)] += d * d;
    }
    Tensor::new(vec![h, w], sq.into_iter().map(|s| (s / n as f64).sqrt()).collect())
}
