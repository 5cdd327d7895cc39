//! Multiply-accumulate accounting.
//!
//! Two independent routes produce a [`FlopsReport`]: closed-form counts from
//! the model shape and prompt lengths ([`count_full`], [`count_moref`]), and a
//! [`MacTally`] that the engine feeds from every matmul and attention kernel
//! it actually runs. Softmax and normalization work is tracked separately and
//! kept out of `total`.

use serde::{Deserialize, Serialize};

use crate::engine::MoRefConfig;
use crate::error::Result;
use crate::fusion::keep_count;
use crate::model::{ModelConfig, SegmentedSequence};
use crate::numerics::AttnWork;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    QkvProj,
    AttnScores,
    AttnAv,
    OutProj,
    Mlp,
    Eq2Overhead,
    Unembed,
}

/// Prompt segment lengths.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeqDims {
    pub sys_len: usize,
    pub vis_len: usize,
    pub ques_len: usize,
}

impl SeqDims {
    pub fn total(&self) -> usize {
        self.sys_len + self.vis_len + self.ques_len
    }
}

impl From<&SegmentedSequence> for SeqDims {
    fn from(s: &SegmentedSequence) -> Self {
        Self {
            sys_len: s.sys_len,
            vis_len: s.vis_len,
            ques_len: s.ques_len,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub qkv_proj: u64,
    pub attn_scores: u64,
    pub attn_av: u64,
    pub out_proj: u64,
    pub mlp: u64,
    pub eq2_overhead: u64,
    pub unembed: u64,
    pub total: u64,
    /// Exponentials evaluated by softmax; not part of `total`.
    pub softmax_elems: u64,
    /// Elements passed through RMS normalization; not part of `total`.
    pub norm_elems: u64,
    /// Score plus value-aggregation MACs restricted to vision queries and
    /// vision keys, per layer, summed over active sequences.
    pub vision_vision_by_layer: Vec<u64>,
    /// Like `vision_vision_by_layer`, but counting the whole square vision
    /// block per sequence instead of only its causal half.
    pub vision_vision_block_by_layer: Vec<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ratio_vs_baseline: Option<f64>,
}

impl FlopsReport {
    fn add(&mut self, phase: Phase, macs: u64) {
        let slot = match phase {
            Phase::QkvProj => &mut self.qkv_proj,
            Phase::AttnScores => &mut self.attn_scores,
            Phase::AttnAv => &mut self.attn_av,
            Phase::OutProj => &mut self.out_proj,
            Phase::Mlp => &mut self.mlp,
            Phase::Eq2Overhead => &mut self.eq2_overhead,
            Phase::Unembed => &mut self.unembed,
        };
        *slot += macs;
        self.total += macs;
    }

    fn add_vision_vision(&mut self, layer: usize, causal: u64, block: u64) {
        if self.vision_vision_by_layer.len() <= layer {
            self.vision_vision_by_layer.resize(layer + 1, 0);
            self.vision_vision_block_by_layer.resize(layer + 1, 0);
        }
        self.vision_vision_by_layer[layer] += causal;
        self.vision_vision_block_by_layer[layer] += block;
    }

    pub fn phase_sum(&self) -> u64 {
        self.qkv_proj
            + self.attn_scores
            + self.attn_av
            + self.out_proj
            + self.mlp
            + self.eq2_overhead
            + self.unembed
    }

    /// Returns a copy with `ratio_vs_baseline = total / baseline.total`.
    pub fn with_baseline(mut self, baseline: &FlopsReport) -> Self {
        self.ratio_vs_baseline = Some(self.total as f64 / baseline.total as f64);
        self
    }
}

/// Instrumented counter fed by the engine while it runs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MacTally {
    report: FlopsReport,
    layer: usize,
}

impl MacTally {
    pub fn new() -> Self {
        Self::default()
    }

    /// Layer that subsequent vision-vision attention work is attributed to.
    pub fn set_layer(&mut self, layer: usize) {
        self.layer = layer;
    }

    pub fn matmul(&mut self, phase: Phase, rows: usize, inner: usize, cols: usize) {
        self.report.add(phase, (rows * inner * cols) as u64);
    }

    pub fn attention(&mut self, work: &AttnWork) {
        self.report.add(Phase::AttnScores, work.score_macs);
        self.report.add(Phase::AttnAv, work.av_macs);
        self.report.softmax_elems += work.softmax_elems;
        if work.window.is_some() {
            self.report
                .add_vision_vision(self.layer, work.window_macs, work.window_block_macs);
        }
    }

    pub fn eq2(&mut self, macs: u64, softmax_elems: u64) {
        self.report.add(Phase::Eq2Overhead, macs);
        self.report.softmax_elems += softmax_elems;
    }

    pub fn norm(&mut self, elems: usize) {
        self.report.norm_elems += elems as u64;
    }

    pub fn merge(&mut self, other: &MacTally) {
        let o = &other.report;
        let r = &mut self.report;
        r.qkv_proj += o.qkv_proj;
        r.attn_scores += o.attn_scores;
        r.attn_av += o.attn_av;
        r.out_proj += o.out_proj;
        r.mlp += o.mlp;
        r.eq2_overhead += o.eq2_overhead;
        r.unembed += o.unembed;
        r.total += o.total;
        r.softmax_elems += o.softmax_elems;
        r.norm_elems += o.norm_elems;
        for (layer, (&causal, &block)) in o
            .vision_vision_by_layer
            .iter()
            .zip(&o.vision_vision_block_by_layer)
            .enumerate()
        {
            r.add_vision_vision(layer, causal, block);
        }
    }

    pub fn report(&self) -> FlopsReport {
        self.report.clone()
    }
}

fn causal_pairs(t: usize) -> u64 {
    (t * (t + 1) / 2) as u64
}

/// One decoder layer over a `t`-token sequence whose vision segment has
/// `vis` tokens.
fn count_layer(r: &mut FlopsReport, cfg: &ModelConfig, layer: usize, t: usize, vis: usize) {
    let d = cfg.d_model as u64;
    let t64 = t as u64;
    r.add(Phase::QkvProj, 3 * t64 * d * d);
    r.add(Phase::AttnScores, d * causal_pairs(t));
    r.add(Phase::AttnAv, d * causal_pairs(t));
    r.add(Phase::OutProj, t64 * d * d);
    r.add(Phase::Mlp, 3 * t64 * d * cfg.d_ff as u64);
    r.softmax_elems += cfg.n_heads as u64 * causal_pairs(t);
    r.norm_elems += 2 * t64 * d;
    let vis64 = vis as u64;
    r.add_vision_vision(layer, 2 * d * causal_pairs(vis), 2 * d * vis64 * vis64);
}

fn count_head(r: &mut FlopsReport, cfg: &ModelConfig, ques_len: usize) {
    let d = cfg.d_model as u64;
    r.norm_elems += ques_len as u64 * d;
    r.add(Phase::Unembed, ques_len as u64 * d * cfg.vocab_size as u64);
}

/// Dense causal prefill over the undivided prompt.
pub fn count_full(cfg: &ModelConfig, dims: SeqDims) -> FlopsReport {
    let mut r = FlopsReport::default();
    for layer in 0..cfg.n_layers {
        count_layer(&mut r, cfg, layer, dims.total(), dims.vis_len);
    }
    count_head(&mut r, cfg, dims.ques_len);
    r
}

/// Chunked prefill: `n` chunks through the pre-fusion layers, one merged
/// sequence afterwards. `ratio_vs_baseline` is left unset.
pub fn count_moref(cfg: &ModelConfig, dims: SeqDims, moref: &MoRefConfig) -> Result<FlopsReport> {
    moref.validate(cfg)?;
    let n = moref.n_chunks;
    let chunk_vis = dims.vis_len / n;
    let chunk_len = dims.sys_len + chunk_vis + dims.ques_len;
    let pre_layers = moref.fusion_layer.unwrap_or(cfg.n_layers);
    let d = cfg.d_model as u64;

    let mut r = FlopsReport::default();
    for layer in 0..pre_layers {
        for _ in 0..n {
            count_layer(&mut r, cfg, layer, chunk_len, chunk_vis);
            r.add(Phase::Eq2Overhead, (dims.ques_len * chunk_vis) as u64 * d);
            r.softmax_elems += (cfg.n_heads * dims.ques_len * chunk_vis) as u64;
        }
    }
    if moref.fusion_layer.is_some() {
        let merged_vis = n * keep_count(chunk_vis, moref.drop_rate())?;
        let merged_len = dims.sys_len + merged_vis + dims.ques_len;
        for layer in pre_layers..cfg.n_layers {
            count_layer(&mut r, cfg, layer, merged_len, merged_vis);
        }
    }
    count_head(&mut r, cfg, dims.ques_len);
    Ok(r)
}

/// Cost relative to a single-reference dense run when every layer costs the
/// same: `n` chunks for `fusion_layer` layers, one sequence for the rest.
pub fn layer_ratio_model(n_layers: usize, n_chunks: usize, fusion_layer: usize) -> f64 {
    (fusion_layer * n_chunks + (n_layers - fusion_layer)) as f64 / n_layers as f64
}

/// 7B-shape accounting presets reproducing the extended-frame table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Table1x128,
    Table1x256,
    Table1x512,
}

/// Tokens per frame in the reference video setup.
pub const TOKENS_PER_FRAME: usize = 182;
pub const BASELINE_FRAMES: usize = 64;

impl Preset {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "table1-128" => Some(Self::Table1x128),
            "table1-256" => Some(Self::Table1x256),
            "table1-512" => Some(Self::Table1x512),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Table1x128 => "table1-128",
            Self::Table1x256 => "table1-256",
            Self::Table1x512 => "table1-512",
        }
    }

    pub fn frames(&self) -> usize {
        match self {
            Self::Table1x128 => 128,
            Self::Table1x256 => 256,
            Self::Table1x512 => 512,
        }
    }

    /// Reported percentage for the chunked run.
    pub fn reported_percent(&self) -> f64 {
        match self {
            Self::Table1x128 => 110.4,
            Self::Table1x256 => 163.2,
            Self::Table1x512 => 400.0,
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            n_layers: 28,
            n_heads: 28,
            d_model: 3584,
            d_ff: 18944,
            vocab_size: 152_064,
            rope_base: 1_000_000.0,
            max_seq: 32_768,
            seed: 0,
        }
    }

    pub fn moref(&self) -> MoRefConfig {
        let (n, l) = match self {
            Self::Table1x128 => (2, 3),
            Self::Table1x256 => (4, 6),
            Self::Table1x512 => (8, 12),
        };
        MoRefConfig {
            m_units: 64,
            n_chunks: n,
            fusion_layer: Some(l),
            ..MoRefConfig::default()
        }
    }

    pub fn dims(&self) -> SeqDims {
        SeqDims {
            sys_len: 0,
            vis_len: self.frames() * TOKENS_PER_FRAME,
            ques_len: 1,
        }
    }

    pub fn baseline_dims(&self) -> SeqDims {
        SeqDims {
            vis_len: BASELINE_FRAMES * TOKENS_PER_FRAME,
            ..self.dims()
        }
    }
}

/// Analytic report for a preset, with its ratio against the 64-frame dense run.
pub fn preset_report(preset: Preset) -> Result<FlopsReport> {
    let model = preset.model();
    let baseline = count_full(&model, preset.baseline_dims());
    Ok(count_moref(&model, preset.dims(), &preset.moref())?.with_baseline(&baseline))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            n_heads: 1,
            d_model: 8,
            d_ff: 16,
            vocab_size: 10,
            rope_base: 10_000.0,
            max_seq: 4096,
            seed: 0,
        }
    }

    fn dims(t: usize) -> SeqDims {
        SeqDims {
            sys_len: 0,
            vis_len: t,
            ques_len: 0,
        }
    }

    #[test]
    fn causal_scores_closed_form() {
        let r = count_full(&cfg(), dims(10));
        assert_eq!(r.attn_scores, 8 * 10 * 11 / 2);
        assert_eq!(r.total, r.phase_sum());
    }

    #[test]
    fn doubling_length() {
        let a = count_full(&cfg(), dims(1000));
        let b = count_full(&cfg(), dims(2000));
        let q = b.attn_scores as f64 / a.attn_scores as f64;
        assert!((q - 4.0).abs() < 0.01, "{q}");
        assert_eq!(b.qkv_proj, 2 * a.qkv_proj);
        assert_eq!(b.mlp, 2 * a.mlp);
    }

    #[test]
    fn single_chunk_costs_only_eq2() {
        let c = ModelConfig {
            n_layers: 3,
            ..cfg()
        };
        let d = SeqDims {
            sys_len: 3,
            vis_len: 12,
            ques_len: 4,
        };
        let full = count_full(&c, d);
        let moref = count_moref(&c, d, &MoRefConfig::default()).unwrap();
        assert_eq!(moref.total - full.total, moref.eq2_overhead);
        assert_eq!(moref.eq2_overhead, 3 * 4 * 12 * 8);
        assert!(moref.eq2_overhead < moref.attn_scores);
    }

    #[test]
    fn layer_ratio_values() {
        assert!((layer_ratio_model(28, 2, 3) - 31.0 / 28.0).abs() < 1e-12);
        assert!((layer_ratio_model(28, 4, 6) - 46.0 / 28.0).abs() < 1e-12);
        assert!((layer_ratio_model(28, 8, 12) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn presets_land_near_layer_ratio() {
        for p in [Preset::Table1x128, Preset::Table1x256, Preset::Table1x512] {
            let r = preset_report(p).unwrap();
            let m = p.moref();
            let model = layer_ratio_model(28, m.n_chunks, m.fusion_layer.unwrap());
            let got = r.ratio_vs_baseline.unwrap();
            assert!((got - model).abs() < 0.01, "{} {got} {model}", p.name());
        }
    }
}
