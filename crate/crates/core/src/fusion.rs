//! Reference fusion: rank each chunk's vision tokens by the attention the
//! question pays them, keep the top share per chunk, and splice the survivors
//! back together in their original temporal order.

use serde::Serialize;

use crate::attention::{CrossModalMap, LayerChunkState};
use crate::error::{contract, Error, Result};
use crate::model::SegmentedSequence;
use crate::numerics::Mat;
use crate::partition::{inverse_map, PartitionPlan};

/// Largest cross-chunk question-state difference `merge` tolerates.
pub const QUESTION_AGREEMENT_TOL: f32 = 1e-5;

/// Question-averaged cross-modal map, one row per chunk.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceMatrix {
    pub values: Vec<Vec<f32>>,
    pub source_layer: usize,
}

pub fn importance(a: &CrossModalMap) -> ImportanceMatrix {
    let inv = 1.0 / a.l_ques as f32;
    let values = (0..a.n_chunks)
        .map(|i| {
            let chunk = a.chunk(i);
            (0..a.l_vis)
                .map(|j| (0..a.l_ques).map(|q| chunk[q * a.l_vis + j]).sum::<f32>() * inv)
                .collect()
        })
        .collect();
    ImportanceMatrix {
        values,
        source_layer: a.layer,
    }
}

/// Tokens kept out of `l_vis` at `drop_rate`: `ceil((1 - drop_rate) * l_vis)`,
/// with a small slack so that products such as `0.5 * 8` that land a hair
/// above an integer do not round up.
pub fn keep_count(l_vis: usize, drop_rate: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&drop_rate) {
        return Err(Error::Fusion(format!(
            "drop rate {drop_rate} outside [0, 1)"
        )));
    }
    let exact = (1.0 - drop_rate) * l_vis as f64;
    let keep = ((exact - 1e-9).ceil().max(0.0) as usize).min(l_vis);
    if keep == 0 {
        return Err(Error::Fusion(format!(
            "drop rate {drop_rate} keeps no tokens out of {l_vis}"
        )));
    }
    Ok(keep)
}

/// Per chunk, the local indices of the highest-importance tokens, ascending.
/// Equal scores favour the smaller index.
pub fn select_tokens(e: &ImportanceMatrix, drop_rate: f64) -> Result<Vec<Vec<usize>>> {
    e.values
        .iter()
        .map(|row| {
            let keep = keep_count(row.len(), drop_rate)?;
            let mut order: Vec<usize> = (0..row.len()).collect();
            order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            order.truncate(keep);
            order.sort_unstable();
            Ok(order)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Provenance {
    pub chunk: usize,
    pub local: usize,
    pub original: usize,
}

/// The single sequence processed after fusion.
#[derive(Clone, Debug)]
pub struct GlobalReference {
    pub sequence: SegmentedSequence,
    /// Hidden states aligned with `sequence`.
    pub hidden: Mat,
    /// One entry per surviving vision token, in merged order.
    pub provenance: Vec<Provenance>,
    pub drop_rate: f64,
}

pub fn merge(
    state: &LayerChunkState,
    kept: &[Vec<usize>],
    plan: &PartitionPlan,
    drop_rate: f64,
) -> Result<GlobalReference> {
    state.validate()?;
    if kept.len() != state.n_chunks() || plan.n_chunks != state.n_chunks() {
        return Err(contract(
            "kept sets, plan and chunk state disagree on chunk count",
        ));
    }
    if plan.chunk_len() != state.vis_len {
        return Err(contract(
            "plan chunk length differs from chunk vision length",
        ));
    }
    for set in kept {
        if set.windows(2).any(|w| w[0] >= w[1]) || set.last().is_some_and(|&j| j >= state.vis_len) {
            return Err(contract("kept set not strictly ascending within the chunk"));
        }
    }

    let (qa, qb) = state.ques_range();
    let ques0 = state.hidden[0].slice_rows(qa, qb);
    for (i, h) in state.hidden.iter().enumerate().skip(1) {
        let diff = h.slice_rows(qa, qb).max_abs_diff(&ques0);
        if diff.is_nan() || diff > QUESTION_AGREEMENT_TOL {
            return Err(Error::Consistency(format!(
                "question states of chunk {i} differ from chunk 0 by {diff}"
            )));
        }
    }

    let mut provenance = Vec::with_capacity(kept.iter().map(Vec::len).sum());
    for (chunk, set) in kept.iter().enumerate() {
        for &local in set {
            provenance.push(Provenance {
                chunk,
                local,
                original: inverse_map(plan, chunk, local)?,
            });
        }
    }
    provenance.sort_by_key(|p| p.original);

    let sys = state.sys_len;
    let first = &state.chunks[0];
    let mut hidden = Mat::zeros(
        sys + provenance.len() + state.ques_len,
        state.hidden[0].cols(),
    );
    hidden.set_rows(0, &state.hidden[0].slice_rows(0, sys));
    let mut vis_tokens = Vec::with_capacity(provenance.len());
    for (slot, p) in provenance.iter().enumerate() {
        let row = sys + p.local;
        hidden
            .row_mut(sys + slot)
            .copy_from_slice(state.hidden[p.chunk].row(row));
        vis_tokens.push(state.chunks[p.chunk].tokens[row]);
    }
    hidden.set_rows(sys + provenance.len(), &ques0);

    Ok(GlobalReference {
        sequence: SegmentedSequence::new(first.sys(), &vis_tokens, first.ques()),
        hidden,
        provenance,
        drop_rate,
    })
}
