//! Prefill, decoding and scenario runs.
//!
//! A chunked prefill partitions the vision segment, runs the first
//! `fusion_layer` layers per chunk with gated question fusion, merges the
//! surviving vision tokens into one sequence and finishes the stack with
//! ordinary causal attention. Without fusion every layer runs chunked and
//! decoding keeps one cache per chunk.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    cross_modal_map, fuse_question_outputs, gating_weights, moref_layer_metered, CrossModalMap,
    GatingOptions, GatingWeights, LayerChunkState,
};
use crate::block::{argmax, attend, dense_layer, finish_layer, logits, project_qkv, Meter};
use crate::error::{contract, Error, Result};
use crate::flops::{count_full, count_moref, FlopsReport, SeqDims};
use crate::fusion::{importance, merge, select_tokens, GlobalReference, Provenance};
use crate::model::{embed, ModelConfig, SegmentedSequence, Weights};
use crate::numerics::{rotate_heads, Mat};
use crate::partition::{apply_plan, build_plan, PartitionPlan};

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoRefFlags {
    /// Scale question-vision scores by `1/sqrt(d_head)` before the softmax.
    #[serde(default = "yes")]
    pub eq2_scaled: bool,
    #[serde(default)]
    pub per_head_gating: bool,
    /// Include gating and fusion traces in reports.
    #[serde(default)]
    pub trace: bool,
}

impl Default for MoRefFlags {
    fn default() -> Self {
        Self {
            eq2_scaled: true,
            per_head_gating: false,
            trace: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoRefConfig {
    #[serde(rename = "m")]
    pub m_units: usize,
    #[serde(rename = "n")]
    pub n_chunks: usize,
    /// Number of chunked layers before the merge; `None` keeps every layer
    /// chunked.
    #[serde(default)]
    pub fusion_layer: Option<usize>,
    /// Fraction of each chunk's vision tokens pruned at fusion; defaults to
    /// `1 - 1/n`.
    #[serde(default)]
    pub drop_rate: Option<f64>,
    #[serde(default)]
    pub flags: MoRefFlags,
}

impl Default for MoRefConfig {
    fn default() -> Self {
        Self {
            m_units: 1,
            n_chunks: 1,
            fusion_layer: None,
            drop_rate: None,
            flags: MoRefFlags::default(),
        }
    }
}

impl MoRefConfig {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.n_chunks == 0 || self.m_units == 0 {
            return Err(Error::Config("m and n must be at least 1".into()));
        }
        if let Some(l) = self.fusion_layer {
            if l == 0 || l > cfg.n_layers {
                return Err(Error::Config(format!(
                    "fusion layer {l} outside 1..={}",
                    cfg.n_layers
                )));
            }
        }
        let drop = self.drop_rate();
        if !(0.0..1.0).contains(&drop) {
            return Err(Error::Config(format!("drop rate {drop} outside [0, 1)")));
        }
        Ok(())
    }

    pub fn drop_rate(&self) -> f64 {
        self.drop_rate
            .unwrap_or(1.0 - 1.0 / self.n_chunks.max(1) as f64)
    }

    pub fn gating(&self) -> GatingOptions {
        GatingOptions {
            eq2_scaled: self.flags.eq2_scaled,
            per_head: self.flags.per_head_gating,
        }
    }
}

/// Rotary keys and values of one active sequence at one layer.
#[derive(Clone, Debug)]
pub struct KvEntry {
    pub k: Mat,
    pub v: Mat,
    pub positions: Vec<usize>,
}

impl KvEntry {
    fn new(k: Mat, v: Mat) -> Self {
        let positions = (0..k.rows()).collect();
        Self { k, v, positions }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    fn push(&mut self, k: &Mat, v: &Mat) -> Result<()> {
        self.k = Mat::vstack(&[&self.k, k])?;
        self.v = Mat::vstack(&[&self.v, v])?;
        self.positions.push(self.positions.len());
        Ok(())
    }
}

/// `layers[l][s]` is the cache of active sequence `s` at layer `l`.
#[derive(Clone, Debug, Default)]
pub struct KvCache {
    pub layers: Vec<Vec<KvEntry>>,
}

impl KvCache {
    pub fn n_sequences(&self) -> usize {
        self.layers.first().map_or(0, Vec::len)
    }

    /// Tokens cached per sequence.
    pub fn seq_len(&self) -> usize {
        self.layers
            .first()
            .and_then(|l| l.first())
            .map_or(0, KvEntry::len)
    }

    pub fn validate(&self) -> Result<()> {
        let (n, len) = (self.n_sequences(), self.seq_len());
        for layer in &self.layers {
            if layer.len() != n {
                return Err(contract("layers cache different numbers of sequences"));
            }
            for e in layer {
                if e.len() != len || e.k.rows() != len || e.v.rows() != len {
                    return Err(contract("cache length differs from processed tokens"));
                }
            }
        }
        Ok(())
    }
}

/// Everything generation needs after a prefill.
#[derive(Clone, Debug)]
pub struct DecodeState {
    pub cache: KvCache,
    /// Present when decoding stays chunked and fuses per layer.
    pub chunked: Option<GatingOptions>,
    /// Vision rows of every chunk cache, used for decode-time gating.
    pub vis_range: (usize, usize),
    pub last_logits: Vec<f32>,
}

/// Per-layer agreement of the segments that every chunk shares.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LayerCheck {
    pub layer: usize,
    pub sys_deviation: f32,
    pub ques_deviation: f32,
}

#[derive(Clone, Debug)]
pub struct FusionOutcome {
    /// Layer whose map drove the selection.
    pub source_layer: usize,
    pub kept: Vec<Vec<usize>>,
    pub reference: GlobalReference,
    /// Chunk states right before the merge.
    pub pre_merge: LayerChunkState,
}

/// Kept sets and provenance as they appear in a traced report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FusionTrace {
    pub fusion_layer: usize,
    pub source_layer: usize,
    pub drop_rate: f64,
    pub merged_len: usize,
    pub kept: Vec<Vec<usize>>,
    pub provenance: Vec<Provenance>,
}

impl FusionOutcome {
    pub fn trace(&self, fusion_layer: usize) -> FusionTrace {
        FusionTrace {
            fusion_layer,
            source_layer: self.source_layer,
            drop_rate: self.reference.drop_rate,
            merged_len: self.reference.sequence.len(),
            kept: self.kept.clone(),
            provenance: self.reference.provenance.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Prefill {
    /// Logits of the question rows (chunk 0's copy when decoding stays
    /// chunked).
    pub logits: Mat,
    /// Final hidden states of every active sequence.
    pub hidden: Vec<Mat>,
    pub state: DecodeState,
    pub plan: Option<PartitionPlan>,
    pub gating: Vec<GatingWeights>,
    pub maps: Vec<CrossModalMap>,
    pub checks: Vec<LayerCheck>,
    pub fusion: Option<FusionOutcome>,
    /// MACs counted while running.
    pub flops: FlopsReport,
    /// Activation elements allocated per layer, summed over active sequences.
    pub activation_by_layer: Vec<usize>,
}

impl Prefill {
    pub fn final_logits(&self) -> Vec<f32> {
        self.logits.row(self.logits.rows() - 1).to_vec()
    }

    pub fn peak_activation(&self) -> usize {
        self.activation_by_layer.iter().copied().max().unwrap_or(0)
    }
}

fn check_capacity(len: usize, cfg: &ModelConfig) -> Result<()> {
    if len > cfg.max_seq {
        return Err(Error::Capacity {
            needed: len,
            max: cfg.max_seq,
        });
    }
    Ok(())
}

fn check_prompt(seq: &SegmentedSequence, cfg: &ModelConfig) -> Result<()> {
    seq.validate()?;
    if seq.ques_len == 0 {
        return Err(Error::Config("question segment is empty".into()));
    }
    if let Some(&id) = seq.tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::Config(format!(
            "token id {id} outside vocabulary of {}",
            cfg.vocab_size
        )));
    }
    Ok(())
}

fn head(h: &Mat, ques: (usize, usize), w: &Weights, meter: &mut Meter) -> Result<Mat> {
    logits(&h.slice_rows(ques.0, ques.1), w, meter)
}

/// Runs `layers` densely over one sequence, caching each layer's keys and
/// values.
#[allow(clippy::too_many_arguments)]
fn dense_stack(
    w: &Weights,
    layers: std::ops::Range<usize>,
    mut h: Mat,
    positions: &[usize],
    window: (usize, usize),
    meter: &mut Meter,
    cache: &mut Vec<Vec<KvEntry>>,
    activation: &mut Vec<usize>,
) -> Result<Mat> {
    let cfg = &w.config;
    for l in layers {
        let mut m = Meter::default();
        m.tally.set_layer(l);
        let (next, p) = dense_layer(&h, &w.layers[l], cfg, positions, Some(window), &mut m)?;
        cache.push(vec![KvEntry::new(p.k, p.v)]);
        activation.push(m.activation_elems);
        meter.absorb(&m);
        h = next;
    }
    Ok(h)
}

/// Dense causal forward over the undivided prompt.
pub fn oracle_prefill(weights: &Weights, seq: &SegmentedSequence) -> Result<Prefill> {
    let cfg = &weights.config;
    check_prompt(seq, cfg)?;
    check_capacity(seq.len(), cfg)?;
    let mut meter = Meter::default();
    let mut layers = Vec::with_capacity(cfg.n_layers);
    let mut activation = Vec::with_capacity(cfg.n_layers);
    let vis = (seq.sys_len, seq.sys_len + seq.vis_len);
    let h = dense_stack(
        weights,
        0..cfg.n_layers,
        embed(seq, weights)?,
        &seq.positions,
        vis,
        &mut meter,
        &mut layers,
        &mut activation,
    )?;
    let logits = head(&h, (vis.1, seq.len()), weights, &mut meter)?;
    Ok(Prefill {
        state: DecodeState {
            cache: KvCache { layers },
            chunked: None,
            vis_range: vis,
            last_logits: logits.row(logits.rows() - 1).to_vec(),
        },
        logits,
        hidden: vec![h],
        plan: None,
        gating: Vec::new(),
        maps: Vec::new(),
        checks: Vec::new(),
        fusion: None,
        flops: meter.tally.report(),
        activation_by_layer: activation,
    })
}

/// Moves chunk caches of the chunked layers onto the merged sequence: keeps
/// the surviving vision rows, takes system and question rows from chunk 0,
/// and rotates keys from chunk-local to merged positions.
fn merged_cache(
    chunk_kv: &[Vec<(Mat, Mat)>],
    state: &LayerChunkState,
    reference: &GlobalReference,
    cfg: &ModelConfig,
) -> Result<Vec<Vec<KvEntry>>> {
    let sys = state.sys_len;
    let merged_vis = reference.provenance.len();
    let mut rows: Vec<(usize, usize)> = (0..sys).map(|r| (0, r)).collect();
    rows.extend(
        reference
            .provenance
            .iter()
            .map(|p| (p.chunk, sys + p.local)),
    );
    rows.extend((0..state.ques_len).map(|r| (0, sys + state.vis_len + r)));
    let shifts: Vec<f64> = rows
        .iter()
        .enumerate()
        .map(|(merged, &(_, local))| merged as f64 - local as f64)
        .collect();
    debug_assert_eq!(rows.len(), sys + merged_vis + state.ques_len);

    chunk_kv
        .iter()
        .map(|layer| {
            let mut k = Mat::zeros(rows.len(), cfg.d_model);
            let mut v = Mat::zeros(rows.len(), cfg.d_model);
            for (i, &(c, r)) in rows.iter().enumerate() {
                k.row_mut(i).copy_from_slice(layer[c].0.row(r));
                v.row_mut(i).copy_from_slice(layer[c].1.row(r));
            }
            let k = rotate_heads(&k, &shifts, cfg.rope_base, cfg.n_heads)?;
            Ok(vec![KvEntry::new(k, v)])
        })
        .collect()
}

/// Chunked prefill: partition, chunked layers with gated question fusion,
/// optional merge, then dense layers over the merged sequence.
pub fn prefill(weights: &Weights, seq: &SegmentedSequence, moref: &MoRefConfig) -> Result<Prefill> {
    let cfg = &weights.config;
    moref.validate(cfg)?;
    check_prompt(seq, cfg)?;
    let plan = build_plan(seq.vis_len, moref.m_units, moref.n_chunks)?;
    let set = apply_plan(seq, &plan)?;
    check_capacity(set.chunks[0].len(), cfg)?;

    let mut meter = Meter::default();
    let hidden = set
        .chunks
        .iter()
        .map(|c| embed(c, weights))
        .collect::<Result<Vec<_>>>()?;
    let mut state = LayerChunkState::new(set.chunks, hidden)?;
    let pre_layers = moref.fusion_layer.unwrap_or(cfg.n_layers);
    let opts = moref.gating();

    let mut gating = Vec::with_capacity(pre_layers);
    let mut maps = Vec::with_capacity(pre_layers);
    let mut checks = Vec::with_capacity(pre_layers);
    let mut activation = Vec::with_capacity(cfg.n_layers);
    let mut chunk_kv = Vec::with_capacity(pre_layers);
    for l in 0..pre_layers {
        let mut m = Meter::default();
        let out = moref_layer_metered(&state, &weights.layers[l], cfg, opts, l, &mut m)?;
        activation.push(m.activation_elems);
        meter.absorb(&m);
        checks.push(LayerCheck {
            layer: l,
            sys_deviation: out.sys_deviation,
            ques_deviation: out.ques_deviation,
        });
        gating.push(out.gating);
        maps.push(out.map);
        chunk_kv.push(out.kv);
        state = out.state;
    }

    let Some(fusion_layer) = moref.fusion_layer else {
        let logits = head(&state.hidden[0], state.ques_range(), weights, &mut meter)?;
        let layers = chunk_kv
            .into_iter()
            .map(|layer| layer.into_iter().map(|(k, v)| KvEntry::new(k, v)).collect())
            .collect();
        return Ok(Prefill {
            state: DecodeState {
                cache: KvCache { layers },
                chunked: Some(opts),
                vis_range: state.vis_range(),
                last_logits: logits.row(logits.rows() - 1).to_vec(),
            },
            logits,
            hidden: state.hidden,
            plan: Some(plan),
            gating,
            maps,
            checks,
            fusion: None,
            flops: meter.tally.report(),
            activation_by_layer: activation,
        });
    };

    let source = maps
        .last()
        .ok_or_else(|| contract("fusion before any chunked layer"))?;
    let kept = select_tokens(&importance(source), moref.drop_rate())?;
    let reference = merge(&state, &kept, &plan, moref.drop_rate())?;
    let merged = &reference.sequence;
    check_capacity(merged.len(), cfg)?;

    let mut layers = merged_cache(&chunk_kv, &state, &reference, cfg)?;
    drop(chunk_kv);
    let vis = (merged.sys_len, merged.sys_len + merged.vis_len);
    let h = dense_stack(
        weights,
        fusion_layer..cfg.n_layers,
        reference.hidden.clone(),
        &merged.positions,
        vis,
        &mut meter,
        &mut layers,
        &mut activation,
    )?;
    let logits = head(&h, (vis.1, merged.len()), weights, &mut meter)?;
    Ok(Prefill {
        state: DecodeState {
            cache: KvCache { layers },
            chunked: None,
            vis_range: vis,
            last_logits: logits.row(logits.rows() - 1).to_vec(),
        },
        logits,
        hidden: vec![h],
        plan: Some(plan),
        gating,
        maps,
        checks,
        fusion: Some(FusionOutcome {
            source_layer: fusion_layer - 1,
            kept,
            reference,
            pre_merge: state,
        }),
        flops: meter.tally.report(),
        activation_by_layer: activation,
    })
}

/// One decoding step for `token`; returns its logits.
fn decode_step(weights: &Weights, state: &mut DecodeState, token: u32) -> Result<Vec<f32>> {
    let cfg = &weights.config;
    let pos = state.cache.seq_len();
    let mut meter = Meter::default();
    let mut x = weights
        .embedding
        .slice_rows(token as usize, token as usize + 1);
    for (lw, entries) in weights.layers.iter().zip(state.cache.layers.iter_mut()) {
        let p = project_qkv(&x, lw, cfg, &[pos], &mut meter)?;
        let mut outs = Vec::with_capacity(entries.len());
        for e in entries.iter_mut() {
            e.push(&p.k, &p.v)?;
            outs.push(attend(&p.q, &e.k, &e.v, cfg, pos, None, &mut meter)?);
        }
        let o = match state.chunked {
            None => outs.pop().ok_or_else(|| contract("empty layer cache"))?,
            Some(opts) => {
                let (a, b) = state.vis_range;
                let q = vec![p.q.clone(); entries.len()];
                let k_vis: Vec<Mat> = entries.iter().map(|e| e.k.slice_rows(a, b)).collect();
                let map = cross_modal_map(&q, &k_vis, cfg.n_heads, opts.eq2_scaled, 0)?;
                fuse_question_outputs(&outs, &gating_weights(&map, opts.per_head))?
            }
        };
        x = finish_layer(&x, &o, lw, &mut meter)?;
    }
    Ok(logits(&x, weights, &mut meter)?.row(0).to_vec())
}

/// Greedy decoding of `max_new` tokens from a prefilled state. Ties go to the
/// smaller token id.
pub fn generate(weights: &Weights, state: &mut DecodeState, max_new: usize) -> Result<Vec<u32>> {
    if max_new == 0 {
        return Ok(Vec::new());
    }
    state.cache.validate()?;
    check_capacity(state.cache.seq_len() + max_new, &weights.config)?;
    let mut out = Vec::with_capacity(max_new);
    let mut token = argmax(&state.last_logits);
    loop {
        out.push(token);
        if out.len() == max_new {
            return Ok(out);
        }
        state.last_logits = decode_step(weights, state, token)?;
        token = argmax(&state.last_logits);
    }
}

/// Explicit token ids, or uniform ids drawn from a seeded generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TokenSource {
    Ids(Vec<u32>),
    Generated { seed: u64, len: usize },
}

impl TokenSource {
    pub fn resolve(&self, vocab_size: usize) -> Vec<u32> {
        match self {
            Self::Ids(ids) => ids.clone(),
            Self::Generated { seed, len } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                (0..*len)
                    .map(|_| rng.random_range(0..vocab_size as u32))
                    .collect()
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub sys_tokens: TokenSource,
    pub vis_tokens: TokenSource,
    pub ques_tokens: TokenSource,
    #[serde(default)]
    pub max_new: usize,
    #[serde(default)]
    pub moref: MoRefConfig,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("scenario: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn sequence(&self, vocab_size: usize) -> SegmentedSequence {
        SegmentedSequence::new(
            &self.sys_tokens.resolve(vocab_size),
            &self.vis_tokens.resolve(vocab_size),
            &self.ques_tokens.resolve(vocab_size),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Timings {
    pub prefill_ms: f64,
    pub generate_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunReport {
    pub moref: MoRefConfig,
    pub dims: SeqDims,
    /// Layer whose cross-modal map drives fusion, if fusion is on.
    pub fusion_map_layer: Option<usize>,
    pub final_logits: Vec<f32>,
    pub generated_tokens: Vec<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gating_trace: Option<Vec<GatingWeights>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fusion: Option<FusionTrace>,
    pub flops: FlopsReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timings: Option<Timings>,
}

impl RunReport {
    pub fn without_timings(&self) -> Self {
        Self {
            timings: None,
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

/// Prefill, greedy generation and cost accounting for one scenario. The
/// report's FLOPs are the analytic count, checked against the counter the
/// prefill fed while running.
pub fn run_scenario(
    weights: &Weights,
    scenario: &Scenario,
    moref: &MoRefConfig,
) -> Result<RunReport> {
    let cfg = &weights.config;
    let seq = scenario.sequence(cfg.vocab_size);
    let start = Instant::now();
    let mut pre = prefill(weights, &seq, moref)?;
    let prefill_ms = ms(start);
    let start = Instant::now();
    let generated_tokens = generate(weights, &mut pre.state, scenario.max_new)?;
    let generate_ms = ms(start);

    let dims = SeqDims::from(&seq);
    let analytic = count_moref(cfg, dims, moref)?;
    if analytic != pre.flops {
        return Err(Error::Consistency(
            "instrumented MAC count differs from the analytic count".into(),
        ));
    }
    let trace = moref.flags.trace;
    Ok(RunReport {
        moref: moref.clone(),
        dims,
        fusion_map_layer: moref.fusion_layer.map(|l| l - 1),
        final_logits: pre.final_logits(),
        generated_tokens,
        gating_trace: trace.then(|| pre.gating.clone()),
        fusion: match (&pre.fusion, moref.fusion_layer) {
            (Some(f), Some(l)) if trace => Some(f.trace(l)),
            _ => None,
        },
        flops: analytic.with_baseline(&count_full(cfg, dims)),
        timings: Some(Timings {
            prefill_ms,
            generate_ms,
        }),
    })
}
