use indexmap::IndexMap;
use rand::Rng;

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::rng::stream_rng;
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Named, ordered parameter tensors. Fast-learner names start with `fast.`,
/// slow-learner (memory) names with `slow.`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Scalar> {
    tensors: IndexMap<String, Tensor<T>>,
}

/// Parameters recorded as leaves on one tape.
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::config(format!("missing parameter {name}")))
    }

    pub fn vars(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

pub(crate) fn block_prefix(i: usize) -> String {
    format!("fast.blocks.{i}")
}

pub const LAMBDA_INIT: f64 = 0.9;
pub const DELTA_INIT_MIN: f64 = 1e-3;
pub const DELTA_INIT_MAX: f64 = 0.1;

impl<T: Scalar> ParamStore<T> {
    pub fn empty() -> Self {
        Self { tensors: IndexMap::new() }
    }

    /// Fresh parameters drawn from the `init` stream of `seed`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream_rng(seed, "init");
        let (d, s, r) = (cfg.channels, cfg.state_dim, cfg.low_rank);
        let mut store = Self::empty();
        let mut uniform = |shape: &[usize], fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            Tensor::from_fn(shape, |_| T::of(rng.gen_range(-bound..bound)))
        };
        let mut dt_rng = stream_rng(seed, "init.delta");
        // softplus(b) log-uniform in [DELTA_INIT_MIN, DELTA_INIT_MAX]
        let mut delta_bias = || {
            Tensor::from_fn(&[d], |_| {
                let dt = (dt_rng.gen_range(DELTA_INIT_MIN.ln()..DELTA_INIT_MAX.ln())).exp();
                T::of(dt + (-(-dt).exp_m1()).ln())
            })
        };
        let mut entries: Vec<(String, Tensor<T>)> = Vec::new();
        entries.push(("fast.stem.w".into(), uniform(&[d, 2, 3, 3], 18)));
        entries.push(("fast.stem.b".into(), Tensor::zeros(&[d])));
        for i in 0..cfg.n_blocks {
            let p = block_prefix(i);
            entries.push((format!("{p}.norm1.g"), Tensor::full(&[d], T::one())));
            entries.push((format!("{p}.norm1.b"), Tensor::zeros(&[d])));
            entries.push((format!("{p}.dw.w"), uniform(&[d, 1, 3, 3], 9)));
            entries.push((format!("{p}.dw.b"), Tensor::zeros(&[d])));
            entries.push((format!("{p}.norm2.g"), Tensor::full(&[d], T::one())));
            entries.push((format!("{p}.norm2.b"), Tensor::zeros(&[d])));
            for proj in ["q", "k", "v", "o"] {
                entries.push((format!("{p}.attn.{proj}.w"), uniform(&[d, d, 1, 1], d)));
                entries.push((format!("{p}.attn.{proj}.b"), Tensor::zeros(&[d])));
            }
            entries.push((format!("{p}.norm3.g"), Tensor::full(&[d], T::one())));
            entries.push((format!("{p}.norm3.b"), Tensor::zeros(&[d])));
            entries.push((format!("{p}.ssm.delta.w"), uniform(&[d, d, 1, 1], d)));
            entries.push((format!("{p}.ssm.delta.b"), delta_bias()));
            entries.push((format!("{p}.ssm.b.w"), uniform(&[s, d, 1, 1], d)));
            entries.push((format!("{p}.ssm.b.b"), Tensor::zeros(&[s])));
            entries.push((format!("{p}.ssm.c.w"), uniform(&[s, d, 1, 1], d)));
            entries.push((format!("{p}.ssm.c.b"), Tensor::zeros(&[s])));
            // A = -exp(a_base): decay rates 1..=S per channel at init
            entries.push((
                format!("{p}.ssm.a_base"),
                Tensor::from_fn(&[d, s], |k| T::of(((k % s) as f64 + 1.0).ln())),
            ));
            if r > 0 {
                entries.push((format!("{p}.ssm.lr_u"), Tensor::zeros(&[d * s, r])));
                entries.push((format!("{p}.ssm.lr_v"), uniform(&[r, d], d)));
            }
            entries.push((format!("{p}.ssm.d_skip"), Tensor::zeros(&[d])));
        }
        entries.push(("fast.head.w".into(), uniform(&[1, d, 1, 1], d)));
        entries.push(("fast.head.b".into(), Tensor::zeros(&[1])));
        if cfg.memory {
            entries.push(("slow.phi.w1".into(), uniform(&[d, d + 1, 1, 1], d + 1)));
            entries.push(("slow.phi.b1".into(), Tensor::zeros(&[d])));
            entries.push(("slow.phi.w2".into(), uniform(&[d, d, 1, 1], d)));
            entries.push(("slow.phi.b2".into(), Tensor::zeros(&[d])));
            entries.push(("slow.gate.w".into(), uniform(&[d, d, 1, 1], d)));
            entries.push(("slow.gate.b".into(), Tensor::zeros(&[d])));
            let logit = (LAMBDA_INIT / (1.0 - LAMBDA_INIT)).ln();
            entries.push(("slow.lambda_logit".into(), Tensor::scalar(T::of(logit))));
        }
        for (k, v) in entries {
            store.tensors.insert(k, v);
        }
        Ok(store)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.tensors.values_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Copy without the slow-learner parameters.
    pub fn without_memory(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| !k.starts_with("slow."))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound { vars: self.tensors.iter().map(|(k, v)| (k.clone(), tape.param(v.clone()))).collect() }
    }

    /// Order-sensitive FNV-1a digest over names, shapes and raw bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for (k, v) in &self.tensors {
            eat(k.as_bytes());
            for &e in v.shape() {
                eat(&(e as u64).to_le_bytes());
            }
            for &x in v.data() {
                eat(&x.to_f64().to_bits().to_le_bytes());
            }
        }
        h
    }
}
