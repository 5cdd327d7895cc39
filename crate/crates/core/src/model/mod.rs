//! Tiny decoder-only transformer: configuration, weights, token sequences.

mod recall;

pub use recall::{build_recall_model, RecallVocab, RECALL_LAYER};

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::numerics::Mat;

pub const NORM_EPS: f32 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub rope_base: f64,
    pub max_seq: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq", self.max_seq),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !self.d_head().is_multiple_of(2) {
            return Err(Error::Config(format!(
                "head width {} must be even for rotary positions",
                self.d_head()
            )));
        }
        if !(self.rope_base.is_finite() && self.rope_base > 1.0) {
            return Err(Error::Config("rope_base must be finite and > 1".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Small default used by the CLI when no config file is given.
    pub fn toy() -> Self {
        Self {
            n_layers: 4,
            n_heads: 4,
            d_model: 64,
            d_ff: 128,
            vocab_size: 128,
            rope_base: 10_000.0,
            max_seq: 1024,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub wo: Mat,
    /// `d_model x 2*d_ff`: gate columns first, then up-projection columns.
    pub mlp_in: Mat,
    pub mlp_out: Mat,
    pub attn_norm: Vec<f32>,
    pub mlp_norm: Vec<f32>,
}

impl LayerWeights {
    fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        Self {
            wq: Mat::zeros(d, d),
            wk: Mat::zeros(d, d),
            wv: Mat::zeros(d, d),
            wo: Mat::zeros(d, d),
            mlp_in: Mat::zeros(d, 2 * cfg.d_ff),
            mlp_out: Mat::zeros(cfg.d_ff, d),
            attn_norm: vec![1.0; d],
            mlp_norm: vec![1.0; d],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Weights {
    pub config: ModelConfig,
    pub embedding: Mat,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f32>,
    pub unembed: Mat,
}

impl Weights {
    /// All projections zero, all norm gains one.
    pub fn zeros(config: &ModelConfig) -> Self {
        Self {
            config: config.clone(),
            embedding: Mat::zeros(config.vocab_size, config.d_model),
            layers: (0..config.n_layers)
                .map(|_| LayerWeights::zeros(config))
                .collect(),
            final_norm: vec![1.0; config.d_model],
            unembed: Mat::zeros(config.d_model, config.vocab_size),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.embedding.is_finite()
            && self.unembed.is_finite()
            && self.layers.iter().all(|l| {
                [&l.wq, &l.wk, &l.wv, &l.wo, &l.mlp_in, &l.mlp_out]
                    .iter()
                    .all(|m| m.is_finite())
            })
    }
}

/// Seeded Gaussian weights with standard deviation `1/sqrt(d_model)`.
pub fn init_random(config: &ModelConfig, seed: u64) -> Result<Weights> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, 1.0 / (config.d_model as f32).sqrt())
        .map_err(|e| Error::Config(e.to_string()))?;
    let mut fill = |m: &mut Mat| {
        for v in m.data_mut() {
            *v = normal.sample(&mut rng);
        }
    };
    let mut w = Weights::zeros(config);
    fill(&mut w.embedding);
    for layer in &mut w.layers {
        for m in [
            &mut layer.wq,
            &mut layer.wk,
            &mut layer.wv,
            &mut layer.wo,
            &mut layer.mlp_in,
            &mut layer.mlp_out,
        ] {
            fill(m);
        }
    }
    fill(&mut w.unembed);
    Ok(w)
}

/// A prompt laid out as system prompt, then vision tokens, then question.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentedSequence {
    pub tokens: Vec<u32>,
    pub sys_len: usize,
    pub vis_len: usize,
    pub ques_len: usize,
    pub positions: Vec<usize>,
}

impl SegmentedSequence {
    pub fn new(sys: &[u32], vis: &[u32], ques: &[u32]) -> Self {
        let tokens = [sys, vis, ques].concat();
        let positions = (0..tokens.len()).collect();
        Self {
            tokens,
            sys_len: sys.len(),
            vis_len: vis.len(),
            ques_len: ques.len(),
            positions,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn sys(&self) -> &[u32] {
        &self.tokens[..self.sys_len]
    }

    pub fn vis(&self) -> &[u32] {
        &self.tokens[self.sys_len..self.sys_len + self.vis_len]
    }

    pub fn ques(&self) -> &[u32] {
        &self.tokens[self.sys_len + self.vis_len..]
    }

    pub fn validate(&self) -> Result<()> {
        if self.sys_len + self.vis_len + self.ques_len != self.tokens.len() {
            return Err(contract(format!(
                "segments {}+{}+{} do not cover {} tokens",
                self.sys_len,
                self.vis_len,
                self.ques_len,
                self.tokens.len()
            )));
        }
        if self.positions.len() != self.tokens.len() {
            return Err(contract("positions length differs from token count"));
        }
        Ok(())
    }
}

/// Embedding-table lookup in sequence order.
pub fn embed(seq: &SegmentedSequence, w: &Weights) -> Result<Mat> {
    let vocab = w.config.vocab_size;
    let mut out = Mat::zeros(seq.len(), w.config.d_model);
    for (r, &id) in seq.tokens.iter().enumerate() {
        if id as usize >= vocab {
            return Err(contract(format!(
                "token id {id} outside vocabulary of {vocab}"
            )));
        }
        out.row_mut(r).copy_from_slice(w.embedding.row(id as usize));
    }
    Ok(out)
}
