//! Run configuration: one TOML file with a root seed and one section per
//! stage. Every key is optional; unknown keys are rejected.

use std::path::{Path, PathBuf};

use nests6_core::data::{DriftKind, DriftSpec, Split, SynthConfig, WindowSpec};
use nests6_core::ssm::ModelConfig;
use nests6_core::train::TrainConfig;
use nests6_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub const OUT_ENV: &str = "NSTS6_OUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root of every random stream (data, init, drift noise).
    pub seed: u64,
    /// Label written into report rows.
    pub run_id: String,
    pub out_dir: PathBuf,
    pub data: DataSection,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Grid series file (`.csv` is imported as t,row,col,value). Without
    /// it a synthetic series is generated from `[synth]`.
    pub path: Option<PathBuf>,
    /// Sampling interval assumed for CSV imports.
    pub csv_dt_minutes: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub split: String,
    pub horizon: usize,
    pub rollout_horizon: usize,
    pub drift: String,
    pub alpha: f64,
    pub beta: f64,
    pub k: i64,
    pub sigma: f64,
    pub shift_targets: bool,
    pub memory: bool,
    pub per_pixel_map: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        let d = DriftSpec::default();
        Self {
            split: "test".into(),
            horizon: 1,
            rollout_horizon: 6,
            drift: "none".into(),
            alpha: d.alpha,
            beta: d.beta,
            k: d.k,
            sigma: d.sigma,
            shift_targets: false,
            memory: true,
            per_pixel_map: false,
        }
    }
}

impl EvalSection {
    pub fn split(&self) -> Result<Split> {
        Split::parse(&self.split)
    }

    pub fn drift_spec(&self, kind: DriftKind, seed: u64) -> DriftSpec {
        DriftSpec { kind, alpha: self.alpha, beta: self.beta, k: self.k, sigma: self.sigma, seed }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            run_id: "nests6".into(),
            out_dir: PathBuf::from("runs"),
            data: DataSection::default(),
            synth: SynthConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.synth.seed = cfg.seed;
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.synth.validate()?;
        self.train.validate()?;
        self.eval.split()?;
        DriftKind::parse(&self.eval.drift)?;
        if self.eval.horizon == 0 || self.eval.rollout_horizon == 0 {
            return Err(Error::config("horizons must be at least 1"));
        }
        Ok(())
    }

    pub fn window_spec(&self) -> WindowSpec {
        WindowSpec { history: self.model.history, patch_h: self.model.patch_h, patch_w: self.model.patch_w }
    }

    /// `NSTS6_OUT` wins over `out_dir`.
    pub fn resolve_out_dir(&self) -> PathBuf {
        std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| self.out_dir.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_all_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn sections_and_root_seed() {
        let cfg = RunConfig::parse("seed = 9\n[model]\nchannels = 8\n[train]\nepochs = 2\n").unwrap();
        assert_eq!(cfg.model.channels, 8);
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!((cfg.synth.seed, cfg.train.seed), (9, 9));
        assert_eq!(cfg.model.state_dim, ModelConfig::default().state_dim);
    }

    #[test]
    fn unknown_keys_are_errors() {
        for text in ["chanels = 3", "[model]\nchanels = 3", "[nope]\nx = 1", "[synth]\nseed = 3"] {
            let err = RunConfig::parse(text).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{text}");
        }
    }

    #[test]
    fn invalid_values_are_errors() {
        assert!(RunConfig::parse("[synth]\ndiffusion_coefficient = 0.3").is_err());
        assert!(RunConfig::parse("[eval]\ndrift = \"tilt\"").is_err());
        assert!(RunConfig::parse("[model]\npatch_h = 0").is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = RunConfig::default();
        cfg.synth.regime_change_at = Some(0.85);
        cfg.data.path = Some("x.grid".into());
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }
}
