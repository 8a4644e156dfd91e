use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use nests6_core::data::{synth_generate, Dataset, DriftKind, GridSeries, Normalizer, Split};
use nests6_core::eval::{
    count_macs, drift_eval, evaluate, write_heatmap, write_reports, EvalOptions, EvalOutput, MacCount, MetricReport,
    ModelForecaster, Persistence,
};
use nests6_core::ssm::{ModelConfig, NestS6};
use nests6_core::tensor::checkpoint::Checkpoint;
use nests6_core::train::{LogRow, TrainLog, Trainer};
use nests6_core::{Error, Result};

use crate::config::RunConfig;

pub const SERIES_FILE: &str = "series.grid";
pub const CHECKPOINT_FILE: &str = "checkpoint.nsts6";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const EVAL_FILE: &str = "eval.csv";
pub const ROLLOUT_FILE: &str = "rollout.csv";
pub const DRIFT_FILE: &str = "drift.csv";
pub const MACS_FILE: &str = "macs.csv";
pub const HEATMAP_FILE: &str = "rmse_map.pgm";

pub struct Context {
    pub cfg: RunConfig,
    pub out: PathBuf,
    /// Upper bound on worker threads. Every command currently runs on one.
    pub workers: usize,
}

impl Context {
    pub fn new(cfg: RunConfig, workers: usize) -> Result<Self> {
        if workers == 0 {
            return Err(Error::config("--workers must be at least 1"));
        }
        let out = cfg.resolve_out_dir();
        Ok(Self { cfg, out, workers })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn ensure_out(&self) -> Result<()> {
        std::fs::create_dir_all(&self.out)?;
        Ok(())
    }

    pub fn load_series(&self) -> Result<GridSeries> {
        match &self.cfg.data.path {
            None => synth_generate(&self.cfg.synth),
            Some(p) if p.extension().is_some_and(|e| e == "csv") => {
                let dt = self.cfg.data.csv_dt_minutes.unwrap_or(self.cfg.synth.dt_minutes);
                GridSeries::from_csv(File::open(p)?, dt)
            }
            Some(p) => GridSeries::load(p),
        }
    }

    fn dataset(&self, norm: Option<Normalizer>) -> Result<Dataset> {
        let t = &self.cfg.train;
        Dataset::prepare(&self.load_series()?, self.cfg.window_spec(), t.train_frac, t.val_frac, norm)
    }

    fn checkpoint_path(&self, given: Option<&Path>) -> PathBuf {
        given.map(Path::to_path_buf).unwrap_or_else(|| self.path(CHECKPOINT_FILE))
    }

    /// Loads a checkpoint whose model section must equal the config's.
    pub fn load_model(&self, given: Option<&Path>) -> Result<(NestS6<f32>, Normalizer)> {
        let ck = Checkpoint::load(self.checkpoint_path(given))?;
        let model = NestS6::from_checkpoint(&ck)?;
        if model.config != self.cfg.model {
            return Err(Error::Config(format!(
                "checkpoint and config disagree on the model\ncheckpoint:\n{}config:\n{}",
                meta_text(&model.config),
                meta_text(&self.cfg.model)
            )));
        }
        Ok((model, Normalizer::from_meta(&ck.meta)?))
    }
}

fn meta_text(cfg: &ModelConfig) -> String {
    cfg.to_meta().iter().map(|(k, v)| format!("  {k}={v}\n")).collect()
}

pub fn cmd_synth(ctx: &Context, output: Option<&Path>) -> Result<PathBuf> {
    let series = synth_generate(&ctx.cfg.synth)?;
    let path = match output {
        Some(p) => p.to_path_buf(),
        None => {
            ctx.ensure_out()?;
            ctx.path(SERIES_FILE)
        }
    };
    series.save(&path)?;
    let d = series.frames.data();
    let n = d.len() as f64;
    let mean = d.iter().map(|&x| x as f64).sum::<f64>() / n;
    let std = (d.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
    let (lo, hi) = d.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    println!(
        "wrote {} ({} frames of {}x{}, dt {} min) mean {mean:.4} std {std:.4} min {lo:.4} max {hi:.4}",
        path.display(),
        series.len(),
        series.height(),
        series.width(),
        series.dt_minutes
    );
    Ok(path)
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub best_epoch: usize,
    pub best_val_mae: Option<f64>,
    pub persistence_val_mae: Option<f64>,
}

pub fn cmd_train(ctx: &Context) -> Result<TrainSummary> {
    let cfg = &ctx.cfg;
    let data = ctx.dataset(None)?;
    let model = NestS6::new(cfg.model.clone(), cfg.seed)?;
    let mut trainer = Trainer::new(model, cfg.train.clone())?;
    ctx.ensure_out()?;
    let log_path = ctx.path(TRAIN_LOG_FILE);
    let mut log = TrainLog::new(BufWriter::new(File::create(&log_path)?))?;
    let mut log_err = None;
    let outcome = trainer.fit(&data, |s, t| {
        let row = LogRow {
            epoch: s.epoch,
            step: t.global_step,
            train_loss: s.mean_loss,
            val_mae: s.val.as_ref().map(|v| v.mae),
            val_rmse: s.val.as_ref().map(|v| v.rmse),
            lr: t.cfg.lr,
            skipped_steps: s.skipped,
        };
        if let Err(e) = log.write(&row) {
            log_err.get_or_insert(e);
        }
        let val = row.val_mae.map(|m| format!(" val_mae {m:.4}")).unwrap_or_default();
        println!("epoch {} loss {:.5}{val} skipped {}", s.epoch, s.mean_loss, s.skipped);
    })?;
    if let Some(e) = log_err {
        return Err(e);
    }
    let persistence = if data.times(Split::Val).is_empty() {
        None
    } else {
        let opts = EvalOptions { split: Split::Val, ..EvalOptions::default() };
        Some(evaluate(&Persistence, &data, &opts, false)?.trace.reports[0].mae)
    };
    let mut meta = data.norm.to_meta();
    meta.push(("train.best_epoch".into(), outcome.best_epoch.to_string()));
    let ck_path = ctx.path(CHECKPOINT_FILE);
    outcome.best.to_checkpoint(&meta).save(&ck_path)?;
    if let (Some(m), Some(p)) = (outcome.best_val_mae, persistence) {
        println!("best epoch {} val_mae {m:.4} (persistence {p:.4})", outcome.best_epoch);
    }
    println!("wrote {} and {}", ck_path.display(), log_path.display());
    Ok(TrainSummary {
        checkpoint: ck_path,
        log: log_path,
        best_epoch: outcome.best_epoch,
        best_val_mae: outcome.best_val_mae,
        persistence_val_mae: persistence,
    })
}

#[derive(Clone, Debug, Default)]
pub struct EvalRequest {
    pub checkpoint: Option<PathBuf>,
    pub horizon: Option<usize>,
    pub drift: Option<DriftKind>,
    pub no_memory: bool,
    pub per_pixel_map: bool,
}

fn run_eval(ctx: &Context, req: &EvalRequest, default_horizon: usize, file: &str) -> Result<EvalOutput> {
    let (model, norm) = ctx.load_model(req.checkpoint.as_deref())?;
    let data = ctx.dataset(Some(norm))?;
    let e = &ctx.cfg.eval;
    let kind = match req.drift {
        Some(k) => k,
        None => DriftKind::parse(&e.drift)?,
    };
    let opts = EvalOptions {
        split: e.split()?,
        horizon: req.horizon.unwrap_or(default_horizon),
        drift: e.drift_spec(kind, ctx.cfg.seed),
        shift_targets: e.shift_targets,
        per_pixel_map: req.per_pixel_map || e.per_pixel_map,
    };
    let f = ModelForecaster::new(&model, e.memory && !req.no_memory);
    let out = evaluate(&f, &data, &opts, f.memory)?;
    ctx.ensure_out()?;
    let path = ctx.path(file);
    write_reports(BufWriter::new(File::create(&path)?), &ctx.cfg.run_id, opts.split, &out.trace.reports)?;
    for r in &out.trace.reports {
        println!("h={} mae {:.4} rmse {:.4} n {}", r.horizon, r.mae, r.rmse, r.n_samples);
    }
    if out.trace.reports.len() > 1 {
        println!("delta_mae {:.4} delta_rmse {:.4}", out.trace.delta_mae, out.trace.delta_rmse);
    }
    if let Some(map) = &out.rmse_map {
        let max = write_heatmap(map, ctx.path(HEATMAP_FILE))?;
        println!("wrote {} (max rmse {max:.4})", ctx.path(HEATMAP_FILE).display());
    }
    println!("wrote {}", path.display());
    Ok(out)
}

pub fn cmd_eval(ctx: &Context, req: &EvalRequest) -> Result<EvalOutput> {
    run_eval(ctx, req, ctx.cfg.eval.horizon, EVAL_FILE)
}

pub fn cmd_rollout(ctx: &Context, req: &EvalRequest) -> Result<EvalOutput> {
    run_eval(ctx, req, ctx.cfg.eval.rollout_horizon, ROLLOUT_FILE)
}

/// Every drift kind, with and without the memory path.
pub fn cmd_drift(ctx: &Context, checkpoint: Option<&Path>) -> Result<Vec<MetricReport>> {
    let (model, norm) = ctx.load_model(checkpoint)?;
    let data = ctx.dataset(Some(norm))?;
    let mut reports = Vec::new();
    for kind in DriftKind::ALL {
        let spec = ctx.cfg.eval.drift_spec(kind, ctx.cfg.seed);
        for memory in [true, false] {
            let r = drift_eval(&model, &data, &spec, memory)?;
            println!("{:<14} memory {:<3} mae {:.4} rmse {:.4}", kind.name(), if r.memory_enabled { "on" } else { "off" }, r.mae, r.rmse);
            reports.push(r);
        }
    }
    ctx.ensure_out()?;
    let path = ctx.path(DRIFT_FILE);
    write_reports(BufWriter::new(File::create(&path)?), &ctx.cfg.run_id, Split::Test, &reports)?;
    println!("wrote {}", path.display());
    Ok(reports)
}

pub fn cmd_macs(ctx: &Context, checkpoint: Option<&Path>, grid: Option<(usize, usize)>) -> Result<MacCount> {
    let model_cfg = match checkpoint {
        Some(p) => ModelConfig::from_meta(&Checkpoint::load(p)?.meta)?,
        None => ctx.cfg.model.clone(),
    };
    let (h, w) = grid.unwrap_or((ctx.cfg.synth.height, ctx.cfg.synth.width));
    let m = count_macs(&model_cfg, h, w)?;
    let scale = m.patches * m.steps;
    println!("{:<28} {:>14} {:>16}", "layer", "macs/patch/step", "macs");
    let mut csv = String::from("layer,macs_per_patch_step,macs,transcendentals\n");
    for l in &m.layers {
        println!("{:<28} {:>14} {:>16}", l.name, l.macs, l.macs * scale);
        csv.push_str(&format!("{},{},{},{}\n", l.name, l.macs, l.macs * scale, l.transcendentals * scale));
    }
    println!("total {} MACs over {} patches x {} steps ({} transcendentals)", m.total, m.patches, m.steps, m.transcendentals);
    csv.push_str(&format!("total,{},{},{}\n", m.total / scale.max(1), m.total, m.transcendentals));
    ctx.ensure_out()?;
    std::fs::write(ctx.path(MACS_FILE), csv)?;
    Ok(m)
}
