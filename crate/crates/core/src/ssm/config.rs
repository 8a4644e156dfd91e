use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Architecture hyperparameters. Serialized as `key=value` lines inside
/// checkpoints.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default, deny_unknown_fields))]
pub struct ModelConfig {
    /// Latent channels D.
    pub channels: usize,
    /// State size D_s per channel.
    pub state_dim: usize,
    pub n_blocks: usize,
    /// Attention window side; 0 picks the largest common divisor of the patch
    /// sides that is at most 5.
    pub window_size: usize,
    /// Rank of the input-conditioned decay modulation; 0 disables it.
    pub low_rank: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    /// History length T in frames.
    pub history: usize,
    /// Whether the slow-learner memory path exists.
    pub memory: bool,
    pub delta_min: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            state_dim: 4,
            n_blocks: 2,
            window_size: 0,
            low_rank: 2,
            patch_h: 20,
            patch_w: 20,
            history: 6,
            memory: true,
            delta_min: 1e-4,
        }
    }
}

impl ModelConfig {
    pub fn window(&self) -> usize {
        if self.window_size > 0 {
            return self.window_size;
        }
        (1..=5).rev().find(|d| self.patch_h % d == 0 && self.patch_w % d == 0).unwrap_or(1)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("channels", self.channels),
            ("state_dim", self.state_dim),
            ("n_blocks", self.n_blocks),
            ("patch_h", self.patch_h),
            ("patch_w", self.patch_w),
            ("history", self.history),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        let ws = self.window();
        if self.patch_h % ws != 0 || self.patch_w % ws != 0 {
            return Err(Error::config(format!(
                "window_size {ws} does not divide patch {}x{}",
                self.patch_h, self.patch_w
            )));
        }
        if self.low_rank > self.state_dim {
            return Err(Error::config(format!(
                "low_rank {} exceeds state_dim {}",
                self.low_rank, self.state_dim
            )));
        }
        if !(self.delta_min > 0.0) {
            return Err(Error::config("delta_min must be positive"));
        }
        Ok(())
    }

    pub fn to_meta(&self) -> Vec<(String, String)> {
        [
            ("model.channels", self.channels.to_string()),
            ("model.state_dim", self.state_dim.to_string()),
            ("model.n_blocks", self.n_blocks.to_string()),
            ("model.window_size", self.window_size.to_string()),
            ("model.low_rank", self.low_rank.to_string()),
            ("model.patch_h", self.patch_h.to_string()),
            ("model.patch_w", self.patch_w.to_string()),
            ("model.history", self.history.to_string()),
            ("model.memory", self.memory.to_string()),
            ("model.delta_min", format!("{:e}", self.delta_min)),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn from_meta(meta: &[(String, String)]) -> Result<Self> {
        let map: BTreeMap<&str, &str> =
            meta.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
        fn get<V: std::str::FromStr>(map: &BTreeMap<&str, &str>, key: &str) -> Result<V> {
            let raw = map
                .get(key)
                .ok_or_else(|| Error::Format(format!("checkpoint metadata lacks {key}")))?;
            raw.parse()
                .map_err(|_| Error::Format(format!("bad value {raw:?} for {key}")))
        }
        let cfg = Self {
            channels: get(&map, "model.channels")?,
            state_dim: get(&map, "model.state_dim")?,
            n_blocks: get(&map, "model.n_blocks")?,
            window_size: get(&map, "model.window_size")?,
            low_rank: get(&map, "model.low_rank")?,
            patch_h: get(&map, "model.patch_h")?,
            patch_w: get(&map, "model.patch_w")?,
            history: get(&map, "model.history")?,
            memory: get(&map, "model.memory")?,
            delta_min: get(&map, "model.delta_min")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_defaults_to_largest_divisor_up_to_five() {
        let mut c = ModelConfig { patch_h: 20, patch_w: 20, ..Default::default() };
        assert_eq!(c.window(), 5);
        c.patch_h = 8;
        c.patch_w = 8;
        assert_eq!(c.window(), 4);
        c.patch_h = 2;
        c.patch_w = 2;
        assert_eq!(c.window(), 2);
        c.patch_h = 50;
        c.patch_w = 50;
        assert_eq!(c.window(), 5);
        c.patch_h = 7;
        c.patch_w = 7;
        assert_eq!(c.window(), 1);
    }

    #[test]
    fn rejects_bad_configs() {
        let c = ModelConfig { window_size: 3, patch_h: 8, patch_w: 8, ..Default::default() };
        assert!(c.validate().is_err());
        let c = ModelConfig { low_rank: 5, state_dim: 4, ..Default::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn meta_round_trip() {
        let c = ModelConfig { channels: 8, memory: false, delta_min: 2.5e-4, ..Default::default() };
        assert_eq!(ModelConfig::from_meta(&c.to_meta()).unwrap(), c);
    }
}
