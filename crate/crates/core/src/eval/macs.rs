//! Analytic multiply-accumulate ledger.
//!
//! Conventions: one MAC is a multiply followed by an add; an elementwise
//! product counts as one MAC; plain additions are free. `exp`, `softplus`,
//! `sigmoid` and `tanh` evaluations are tallied separately as
//! transcendentals. Per layer, for a patch of `P = H_p * W_p` pixels:
//!
//! | layer            | MACs                                         |
//! |------------------|----------------------------------------------|
//! | conv             | `Cout * P * (Cin / groups) * kh * kw`        |
//! | layer norm       | `3 * D * P` (mean, variance, scale+shift)    |
//! | SiLU             | `D * P`                                      |
//! | window attention | `2 * L * D * P` for `L` tokens per window    |
//! | A modulation     | `D * P + r * D + D * S * r`                  |
//! | selective scan   | `5 * D * S * P + D * P` (skip term)          |
//! | memory write     | `D * P` decay + `D * P` write scaling        |
//! | memory gate      | `D * P` gate product                         |
//!
//! The model is costed as a streaming forecaster: every time step runs
//! the stem, memory, blocks and head once, so a full-grid count is
//! `patches * T * per_step`.

use crate::error::Result;
use crate::ssm::ModelConfig;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerMacs {
    pub name: String,
    pub macs: u64,
    pub transcendentals: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MacCount {
    /// Per-patch, per-step entries.
    pub layers: Vec<LayerMacs>,
    pub patches: u64,
    pub steps: u64,
    /// `patches * steps * sum(layers.macs)`.
    pub total: u64,
    pub transcendentals: u64,
}

pub fn conv_macs(cin: usize, cout: usize, groups: usize, k: usize, pixels: usize) -> u64 {
    (cout * pixels * (cin / groups) * k * k) as u64
}

pub fn count_macs(cfg: &ModelConfig, grid_h: usize, grid_w: usize) -> Result<MacCount> {
    cfg.validate()?;
    let origins = crate::data::patch_origins(grid_h, grid_w, cfg.patch_h, cfg.patch_w)?;
    let (d, s, r) = (cfg.channels, cfg.state_dim, cfg.low_rank);
    let p = cfg.patch_h * cfg.patch_w;
    let win = cfg.window();
    let l = win * win;
    let mut layers = Vec::new();
    let mut add = |name: String, macs: usize, trans: usize| {
        layers.push(LayerMacs { name, macs: macs as u64, transcendentals: trans as u64 })
    };
    add("stem.conv3x3".into(), conv_macs(2, d, 1, 3, p) as usize, 0);
    add("stem.silu".into(), d * p, d * p);
    if cfg.memory {
        add("memory.phi.conv1".into(), conv_macs(d + 1, d, 1, 1, p) as usize, 0);
        add("memory.phi.silu".into(), d * p, d * p);
        add("memory.phi.conv2".into(), conv_macs(d, d, 1, 1, p) as usize, d * p);
        add("memory.update".into(), 2 * d * p, 1);
        add("memory.gate.conv".into(), conv_macs(d, d, 1, 1, p) as usize, d * p);
        add("memory.gate.product".into(), d * p, 0);
    }
    for b in 0..cfg.n_blocks {
        let pre = format!("block{b}");
        add(format!("{pre}.norm1"), 3 * d * p, 0);
        add(format!("{pre}.depthwise3x3"), conv_macs(d, d, d, 3, p) as usize, 0);
        add(format!("{pre}.norm2"), 3 * d * p, 0);
        add(format!("{pre}.attn.qkvo"), 4 * conv_macs(d, d, 1, 1, p) as usize, 0);
        add(format!("{pre}.attn.window"), 2 * l * d * p, l * p);
        add(format!("{pre}.norm3"), 3 * d * p, 0);
        add(format!("{pre}.ssm.delta"), conv_macs(d, d, 1, 1, p) as usize, d * p);
        add(format!("{pre}.ssm.b"), conv_macs(d, s, 1, 1, p) as usize, 0);
        add(format!("{pre}.ssm.c"), conv_macs(d, s, 1, 1, p) as usize, 0);
        add(format!("{pre}.ssm.a_mod"), d * p + r * d + d * s * r, d * s);
        add(format!("{pre}.ssm.scan"), 5 * d * s * p + d * p, d * s * p);
    }
    add("head.conv1x1".into(), conv_macs(d, 1, 1, 1, p) as usize, 0);
    let patches = origins.len() as u64;
    let steps = cfg.history as u64;
    let per_step: u64 = layers.iter().map(|l| l.macs).sum();
    let trans: u64 = layers.iter().map(|l| l.transcendentals).sum();
    Ok(MacCount { layers, patches, steps, total: patches * steps * per_step, transcendentals: patches * steps * trans })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            channels: 2,
            state_dim: 1,
            low_rank: 1,
            n_blocks: 1,
            patch_h: 2,
            patch_w: 2,
            history: 1,
            memory: false,
            ..Default::default()
        }
    }

    #[test]
    fn pointwise_conv_closed_form() {
        assert_eq!(conv_macs(16, 16, 1, 1, 400), 16 * 16 * 400);
    }

    #[test]
    fn hand_ledger_tiny_config() {
        // P = 4, D = 2, S = 1, r = 1, one 2x2 window (L = 4)
        let expect: [(&str, u64); 14] = [
            ("stem.conv3x3", 2 * 4 * 2 * 9),
            ("stem.silu", 8),
            ("block0.norm1", 24),
            ("block0.depthwise3x3", 2 * 4 * 9),
            ("block0.norm2", 24),
            ("block0.attn.qkvo", 4 * 2 * 2 * 4),
            ("block0.attn.window", 2 * 4 * 4 * 2),
            ("block0.norm3", 24),
            ("block0.ssm.delta", 16),
            ("block0.ssm.b", 8),
            ("block0.ssm.c", 8),
            ("block0.ssm.a_mod", 8 + 2 + 2),
            ("block0.ssm.scan", 40 + 8),
            ("head.conv1x1", 8),
        ];
        let m = count_macs(&tiny(), 2, 2).unwrap();
        assert_eq!(m.layers.len(), expect.len());
        for (got, (name, macs)) in m.layers.iter().zip(expect) {
            assert_eq!((got.name.as_str(), got.macs), (name, macs));
        }
        assert_eq!(m.total, 524);
        assert_eq!(m.total, m.layers.iter().map(|l| l.macs).sum::<u64>());
    }

    #[test]
    fn linear_in_patches_and_steps() {
        for memory in [false, true] {
            let cfg = ModelConfig { memory, ..tiny() };
            let one = count_macs(&cfg, 2, 2).unwrap().total;
            assert_eq!(count_macs(&cfg, 4, 4).unwrap().total, 4 * one);
            assert_eq!(count_macs(&cfg, 6, 2).unwrap().total, 3 * one);
            let t6 = count_macs(&ModelConfig { history: 6, ..cfg }, 2, 2).unwrap().total;
            assert_eq!(t6, 6 * one);
        }
        let d = ModelConfig::default();
        assert_eq!(count_macs(&d, 40, 40).unwrap().total, 4 * count_macs(&d, 20, 20).unwrap().total);
    }

    #[test]
    fn indivisible_grid_rejected() {
        assert!(count_macs(&tiny(), 3, 2).is_err());
    }
}
