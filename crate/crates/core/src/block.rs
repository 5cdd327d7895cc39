//! Decoder block pieces shared by the dense and chunked paths, with MAC and
//! activation accounting.

use crate::error::Result;
use crate::flops::{MacTally, Phase};
use crate::model::{LayerWeights, ModelConfig, Weights, NORM_EPS};
use crate::numerics::{
    apply_rope_heads, matmul, multi_head_causal_attention, rms_norm, silu, AttnWork, Mat,
};

/// Per-forward accounting: MACs plus activation elements allocated.
#[derive(Clone, Debug, Default)]
pub(crate) struct Meter {
    pub tally: MacTally,
    pub activation_elems: usize,
}

impl Meter {
    fn track(&mut self, m: &Mat) {
        self.activation_elems += m.len();
    }

    pub fn absorb(&mut self, other: &Meter) {
        self.tally.merge(&other.tally);
        self.activation_elems += other.activation_elems;
    }
}

pub(crate) fn linear(x: &Mat, w: &Mat, phase: Phase, meter: &mut Meter) -> Result<Mat> {
    let out = matmul(x, w)?;
    meter.tally.matmul(phase, x.rows(), x.cols(), w.cols());
    meter.track(&out);
    Ok(out)
}

fn norm(x: &Mat, gain: &[f32], meter: &mut Meter) -> Result<Mat> {
    let out = rms_norm(x, gain, NORM_EPS)?;
    meter.tally.norm(x.len());
    meter.track(&out);
    Ok(out)
}

/// Rotary-positioned query/key and plain value projections of one sequence.
#[derive(Clone, Debug)]
pub(crate) struct Projections {
    pub q: Mat,
    pub k: Mat,
    pub v: Mat,
}

pub(crate) fn project_qkv(
    x: &Mat,
    lw: &LayerWeights,
    cfg: &ModelConfig,
    positions: &[usize],
    meter: &mut Meter,
) -> Result<Projections> {
    let h = norm(x, &lw.attn_norm, meter)?;
    let q = linear(&h, &lw.wq, Phase::QkvProj, meter)?;
    let k = linear(&h, &lw.wk, Phase::QkvProj, meter)?;
    let v = linear(&h, &lw.wv, Phase::QkvProj, meter)?;
    Ok(Projections {
        q: apply_rope_heads(&q, positions, cfg.rope_base, cfg.n_heads)?,
        k: apply_rope_heads(&k, positions, cfg.rope_base, cfg.n_heads)?,
        v,
    })
}

/// Causal attention of `q` (rows starting at `q_offset`) over `k`/`v`; the
/// optional window marks the vision span for accounting.
pub(crate) fn attend(
    q: &Mat,
    k: &Mat,
    v: &Mat,
    cfg: &ModelConfig,
    q_offset: usize,
    window: Option<(usize, usize)>,
    meter: &mut Meter,
) -> Result<Mat> {
    let mut work = AttnWork {
        window,
        ..AttnWork::default()
    };
    let o = multi_head_causal_attention(q, k, v, cfg.n_heads, q_offset, &mut work)?;
    meter.tally.attention(&work);
    meter.track(&o);
    Ok(o)
}

/// Output projection, residual, then the gated MLP with its residual.
pub(crate) fn finish_layer(x: &Mat, o: &Mat, lw: &LayerWeights, meter: &mut Meter) -> Result<Mat> {
    let mut x = x.clone();
    x.add_assign(&linear(o, &lw.wo, Phase::OutProj, meter)?)?;
    let h = norm(&x, &lw.mlp_norm, meter)?;
    let gate_up = linear(&h, &lw.mlp_in, Phase::Mlp, meter)?;
    let d_ff = lw.mlp_out.rows();
    let mut act = Mat::zeros(x.rows(), d_ff);
    for r in 0..x.rows() {
        let gu = gate_up.row(r);
        for (c, a) in act.row_mut(r).iter_mut().enumerate() {
            *a = silu(gu[c]) * gu[d_ff + c];
        }
    }
    meter.track(&act);
    x.add_assign(&linear(&act, &lw.mlp_out, Phase::Mlp, meter)?)?;
    meter.track(&x);
    Ok(x)
}

/// Full dense layer over one sequence starting at position 0.
pub(crate) fn dense_layer(
    x: &Mat,
    lw: &LayerWeights,
    cfg: &ModelConfig,
    positions: &[usize],
    window: Option<(usize, usize)>,
    meter: &mut Meter,
) -> Result<(Mat, Projections)> {
    let p = project_qkv(x, lw, cfg, positions, meter)?;
    let o = attend(&p.q, &p.k, &p.v, cfg, 0, window, meter)?;
    Ok((finish_layer(x, &o, lw, meter)?, p))
}

pub(crate) fn logits(h: &Mat, w: &Weights, meter: &mut Meter) -> Result<Mat> {
    let h = norm(h, &w.final_norm, meter)?;
    linear(&h, &w.unembed, Phase::Unembed, meter)
}

/// Index of the largest logit; ties go to the smaller token id.
pub fn argmax(logits: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &x) in logits.iter().enumerate() {
        if x > logits[best] {
            best = i;
        }
    }
    best as u32
}
