//! Mixture-of-reference attention for one decoder layer.
//!
//! Each chunk runs ordinary causal attention on its own prompt. The question
//! rows of every chunk are then replaced by one convex combination of all
//! chunks' question outputs, weighted by how sharply each chunk's question
//! queries attend to its vision keys.

use rayon::prelude::*;
use serde::Serialize;

use crate::block::{attend, finish_layer, project_qkv, Meter};
use crate::error::{contract, Result};
use crate::model::{LayerWeights, ModelConfig, SegmentedSequence};
use crate::numerics::{dot, softmax_in_place, Mat};

/// Question-to-vision attention per chunk, averaged over heads.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossModalMap {
    pub layer: usize,
    pub n_chunks: usize,
    pub l_ques: usize,
    pub l_vis: usize,
    /// `n_chunks x l_ques x l_vis`, row-major.
    pub values: Vec<f32>,
    /// Largest single-head entry, `[chunk][head]`.
    pub head_max: Vec<Vec<f32>>,
}

impl CrossModalMap {
    pub fn chunk(&self, i: usize) -> &[f32] {
        let n = self.l_ques * self.l_vis;
        &self.values[i * n..(i + 1) * n]
    }

    pub fn get(&self, chunk: usize, q: usize, v: usize) -> f32 {
        self.chunk(chunk)[q * self.l_vis + v]
    }

    pub fn chunk_max(&self, i: usize) -> f32 {
        self.chunk(i)
            .iter()
            .copied()
            .fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn chunk_mean(&self, i: usize) -> f32 {
        let c = self.chunk(i);
        c.iter().sum::<f32>() / c.len() as f32
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GatingWeights {
    pub layer: usize,
    pub omega: Vec<f32>,
    /// Per-head weights `[head][chunk]` when gating per head.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_head: Option<Vec<Vec<f32>>>,
}

impl GatingWeights {
    /// Chunk with the largest weight; ties go to the lower index.
    pub fn argmax(&self) -> usize {
        crate::block::argmax(&self.omega) as usize
    }
}

/// Hidden states of every chunk entering a layer.
#[derive(Clone, Debug)]
pub struct LayerChunkState {
    pub chunks: Vec<SegmentedSequence>,
    pub hidden: Vec<Mat>,
    pub sys_len: usize,
    /// Vision tokens per chunk.
    pub vis_len: usize,
    pub ques_len: usize,
}

impl LayerChunkState {
    pub fn new(chunks: Vec<SegmentedSequence>, hidden: Vec<Mat>) -> Result<Self> {
        let first = chunks.first().ok_or_else(|| contract("no chunks"))?;
        let (sys_len, vis_len, ques_len) = (first.sys_len, first.vis_len, first.ques_len);
        let state = Self {
            chunks,
            hidden,
            sys_len,
            vis_len,
            ques_len,
        };
        state.validate()?;
        Ok(state)
    }

    pub fn validate(&self) -> Result<()> {
        if self.chunks.len() != self.hidden.len() {
            return Err(contract("chunk and hidden-state counts differ"));
        }
        for (c, h) in self.chunks.iter().zip(&self.hidden) {
            if (c.sys_len, c.vis_len, c.ques_len) != (self.sys_len, self.vis_len, self.ques_len) {
                return Err(contract("chunks have different segment lengths"));
            }
            if h.rows() != c.len() {
                return Err(contract("hidden rows differ from chunk length"));
            }
        }
        Ok(())
    }

    pub fn n_chunks(&self) -> usize {
        self.chunks.len()
    }

    pub fn chunk_len(&self) -> usize {
        self.sys_len + self.vis_len + self.ques_len
    }

    pub fn vis_range(&self) -> (usize, usize) {
        (self.sys_len, self.sys_len + self.vis_len)
    }

    pub fn ques_range(&self) -> (usize, usize) {
        (self.sys_len + self.vis_len, self.chunk_len())
    }
}

/// One chunk's attention output (before the output projection) together with
/// its projections.
#[derive(Clone, Debug)]
pub struct ChunkAttention {
    pub o: Mat,
    pub q: Mat,
    pub k: Mat,
    pub v: Mat,
}

impl ChunkAttention {
    pub fn o_sys(&self, s: &LayerChunkState) -> Mat {
        self.o.slice_rows(0, s.sys_len)
    }

    pub fn o_vis(&self, s: &LayerChunkState) -> Mat {
        let (a, b) = s.vis_range();
        self.o.slice_rows(a, b)
    }

    pub fn o_ques(&self, s: &LayerChunkState) -> Mat {
        let (a, b) = s.ques_range();
        self.o.slice_rows(a, b)
    }

    pub fn q_ques(&self, s: &LayerChunkState) -> Mat {
        let (a, b) = s.ques_range();
        self.q.slice_rows(a, b)
    }

    pub fn k_vis(&self, s: &LayerChunkState) -> Mat {
        let (a, b) = s.vis_range();
        self.k.slice_rows(a, b)
    }
}

pub(crate) fn chunk_attention_metered(
    state: &LayerChunkState,
    lw: &LayerWeights,
    cfg: &ModelConfig,
    layer: usize,
    meter: &mut Meter,
) -> Result<Vec<ChunkAttention>> {
    state.validate()?;
    let window = Some(state.vis_range());
    let results: Vec<(ChunkAttention, Meter)> = state
        .chunks
        .par_iter()
        .zip(&state.hidden)
        .map(|(chunk, x)| {
            let mut m = Meter::default();
            m.tally.set_layer(layer);
            let p = project_qkv(x, lw, cfg, &chunk.positions, &mut m)?;
            let o = attend(&p.q, &p.k, &p.v, cfg, 0, window, &mut m)?;
            Ok((
                ChunkAttention {
                    o,
                    q: p.q,
                    k: p.k,
                    v: p.v,
                },
                m,
            ))
        })
        .collect::<Result<_>>()?;
    Ok(results
        .into_iter()
        .map(|(a, m)| {
            meter.absorb(&m);
            a
        })
        .collect())
}

/// Causal attention computed independently per chunk.
pub fn chunk_attention(
    state: &LayerChunkState,
    lw: &LayerWeights,
    cfg: &ModelConfig,
) -> Result<Vec<ChunkAttention>> {
    chunk_attention_metered(state, lw, cfg, 0, &mut Meter::default())
}

pub(crate) fn cross_modal_map_metered(
    q_ques: &[Mat],
    k_vis: &[Mat],
    n_heads: usize,
    scaled: bool,
    layer: usize,
    meter: &mut Meter,
) -> Result<CrossModalMap> {
    if q_ques.len() != k_vis.len() || q_ques.is_empty() {
        return Err(contract(
            "cross-modal map needs one query and key block per chunk",
        ));
    }
    let (l_ques, l_vis, width) = (q_ques[0].rows(), k_vis[0].rows(), q_ques[0].cols());
    if l_ques == 0 || l_vis == 0 {
        return Err(contract("cross-modal map needs question and vision tokens"));
    }
    if q_ques
        .iter()
        .any(|q| (q.rows(), q.cols()) != (l_ques, width))
        || k_vis.iter().any(|k| (k.rows(), k.cols()) != (l_vis, width))
        || width % n_heads != 0
    {
        return Err(contract("cross-modal map block shapes differ"));
    }
    let dh = width / n_heads;
    let scale = if scaled {
        1.0 / (dh as f32).sqrt()
    } else {
        1.0
    };
    let inv_heads = 1.0 / n_heads as f32;

    let mut values = Vec::with_capacity(q_ques.len() * l_ques * l_vis);
    let mut head_max = Vec::with_capacity(q_ques.len());
    let mut row = vec![0.0f32; l_vis];
    for (q, k) in q_ques.iter().zip(k_vis) {
        let mut sum = vec![0.0f32; l_ques * l_vis];
        let mut maxes = vec![f32::NEG_INFINITY; n_heads];
        for (h, max) in maxes.iter_mut().enumerate() {
            let cols = h * dh..(h + 1) * dh;
            for r in 0..l_ques {
                let qr = &q.row(r)[cols.clone()];
                for (j, s) in row.iter_mut().enumerate() {
                    *s = dot(qr, &k.row(j)[cols.clone()]);
                }
                softmax_in_place(&mut row, scale);
                for (acc, &p) in sum[r * l_vis..(r + 1) * l_vis].iter_mut().zip(&row) {
                    *acc += p;
                    *max = max.max(p);
                }
            }
        }
        values.extend(sum.iter().map(|s| s * inv_heads));
        head_max.push(maxes);
        meter.tally.eq2(
            (l_ques * l_vis * width) as u64,
            (n_heads * l_ques * l_vis) as u64,
        );
    }
    Ok(CrossModalMap {
        layer,
        n_chunks: q_ques.len(),
        l_ques,
        l_vis,
        values,
        head_max,
    })
}

/// Softmax over each chunk's vision keys for each question query, averaged
/// over heads. `scaled` applies the usual `1/sqrt(d_head)` factor.
pub fn cross_modal_map(
    q_ques: &[Mat],
    k_vis: &[Mat],
    n_heads: usize,
    scaled: bool,
    layer: usize,
) -> Result<CrossModalMap> {
    cross_modal_map_metered(q_ques, k_vis, n_heads, scaled, layer, &mut Meter::default())
}

fn normalize(maxes: impl Iterator<Item = f32>) -> Vec<f32> {
    let maxes: Vec<f32> = maxes.collect();
    let total: f32 = maxes.iter().sum();
    maxes.iter().map(|m| m / total).collect()
}

/// Per-chunk weight proportional to the chunk's largest map entry.
pub fn gating_weights(a: &CrossModalMap, per_head: bool) -> GatingWeights {
    if !per_head {
        return GatingWeights {
            layer: a.layer,
            omega: normalize((0..a.n_chunks).map(|i| a.chunk_max(i))),
            per_head: None,
        };
    }
    let n_heads = a.head_max.first().map_or(0, Vec::len);
    let heads: Vec<Vec<f32>> = (0..n_heads)
        .map(|h| normalize(a.head_max.iter().map(|m| m[h])))
        .collect();
    let omega = (0..a.n_chunks)
        .map(|i| heads.iter().map(|w| w[i]).sum::<f32>() / n_heads as f32)
        .collect();
    GatingWeights {
        layer: a.layer,
        omega,
        per_head: Some(heads),
    }
}

/// Convex combination of the chunks' question outputs in ascending chunk
/// order. With per-head weights each head's column block uses its own row.
pub fn fuse_question_outputs(o_ques: &[Mat], w: &GatingWeights) -> Result<Mat> {
    let first = o_ques.first().ok_or_else(|| contract("nothing to fuse"))?;
    if o_ques.len() != w.omega.len() {
        return Err(contract(format!(
            "{} question blocks but {} weights",
            o_ques.len(),
            w.omega.len()
        )));
    }
    if o_ques
        .iter()
        .any(|o| (o.rows(), o.cols()) != (first.rows(), first.cols()))
    {
        return Err(contract("question output shapes differ across chunks"));
    }
    let n_heads = w.per_head.as_ref().map_or(1, Vec::len);
    if first.cols() % n_heads != 0 {
        return Err(contract("question width not divisible by gating heads"));
    }
    let dh = first.cols() / n_heads;
    let weight = |chunk: usize, col: usize| -> f32 {
        match &w.per_head {
            Some(heads) => heads[col / dh][chunk],
            None => w.omega[chunk],
        }
    };
    let mut fused = Mat::zeros(first.rows(), first.cols());
    for (i, o) in o_ques.iter().enumerate() {
        for r in 0..o.rows() {
            let src = o.row(r);
            for (c, f) in fused.row_mut(r).iter_mut().enumerate() {
                let term = weight(i, c) * src[c];
                *f = if i == 0 { term } else { *f + term };
            }
        }
    }
    Ok(fused)
}

/// Everything one chunked layer produces.
#[derive(Clone, Debug)]
pub struct MorefLayerOutput {
    pub state: LayerChunkState,
    pub map: CrossModalMap,
    pub gating: GatingWeights,
    /// Rotary keys and values per chunk, for the decode cache.
    pub kv: Vec<(Mat, Mat)>,
    /// Largest difference of a chunk's system-prompt attention output from
    /// chunk 0's.
    pub sys_deviation: f32,
    /// Largest difference of a chunk's question hidden states from chunk 0's
    /// after the layer.
    pub ques_deviation: f32,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct GatingOptions {
    pub eq2_scaled: bool,
    pub per_head: bool,
}

pub(crate) fn moref_layer_metered(
    state: &LayerChunkState,
    lw: &LayerWeights,
    cfg: &ModelConfig,
    opts: GatingOptions,
    layer: usize,
    meter: &mut Meter,
) -> Result<MorefLayerOutput> {
    let attn = chunk_attention_metered(state, lw, cfg, layer, meter)?;
    let q_ques: Vec<Mat> = attn.iter().map(|a| a.q_ques(state)).collect();
    let k_vis: Vec<Mat> = attn.iter().map(|a| a.k_vis(state)).collect();
    let map = cross_modal_map_metered(&q_ques, &k_vis, cfg.n_heads, opts.eq2_scaled, layer, meter)?;
    let gating = gating_weights(&map, opts.per_head);
    let o_ques: Vec<Mat> = attn.iter().map(|a| a.o_ques(state)).collect();
    let fused = fuse_question_outputs(&o_ques, &gating)?;

    let sys0 = attn[0].o_sys(state);
    let sys_deviation = attn
        .iter()
        .map(|a| a.o_sys(state).max_abs_diff(&sys0))
        .fold(0.0, f32::max);

    let ques_start = state.ques_range().0;
    let finished: Vec<(Mat, Meter)> = attn
        .par_iter()
        .zip(&state.hidden)
        .map(|(a, x)| {
            let mut m = Meter::default();
            let mut o = a.o.clone();
            o.set_rows(ques_start, &fused);
            Ok((finish_layer(x, &o, lw, &mut m)?, m))
        })
        .collect::<Result<_>>()?;
    let hidden: Vec<Mat> = finished
        .into_iter()
        .map(|(h, m)| {
            meter.absorb(&m);
            h
        })
        .collect();

    let (qa, qb) = state.ques_range();
    let ques0 = hidden[0].slice_rows(qa, qb);
    let ques_deviation = hidden
        .iter()
        .map(|h| h.slice_rows(qa, qb).max_abs_diff(&ques0))
        .fold(0.0, f32::max);

    Ok(MorefLayerOutput {
        state: LayerChunkState {
            hidden,
            ..state.clone()
        },
        map,
        gating,
        kv: attn.into_iter().map(|a| (a.k, a.v)).collect(),
        sys_deviation,
        ques_deviation,
    })
}

/// Chunk attention, cross-modal map, gating and question fusion, followed by
/// the output projection and MLP in every chunk.
pub fn moref_layer(
    state: &LayerChunkState,
    lw: &LayerWeights,
    cfg: &ModelConfig,
    opts: GatingOptions,
    layer: usize,
) -> Result<MorefLayerOutput> {
    moref_layer_metered(state, lw, cfg, opts, layer, &mut Meter::default())
}
