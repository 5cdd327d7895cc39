//! Multi-reference partition: split the vision segment into `m` temporal
//! units, split each unit into `n` fragments, and gather fragment `j` of every
//! unit into chunk `j`.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::model::SegmentedSequence;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartitionPlan {
    pub m_units: usize,
    pub n_chunks: usize,
    /// For each chunk, the original vision indices it holds, ascending.
    pub chunk_index_map: Vec<Vec<usize>>,
    /// Unit start offsets followed by `vis_len`.
    pub unit_boundaries: Vec<usize>,
}

/// JSON form of a plan.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanFile {
    m_units: usize,
    n_chunks: usize,
    chunk_index_map: Vec<Vec<usize>>,
}

/// Sizes of `total` split into `parts` near-equal pieces, larger ones first.
fn even_split(total: usize, parts: usize) -> impl Iterator<Item = usize> {
    let (base, extra) = (total / parts, total % parts);
    (0..parts).map(move |i| base + usize::from(i < extra))
}

pub fn build_plan(vis_len: usize, m: usize, n: usize) -> Result<PartitionPlan> {
    if n == 0 || m == 0 {
        return Err(Error::Partition(format!(
            "unit count {m} and chunk count {n} must both be at least 1"
        )));
    }
    if !vis_len.is_multiple_of(n) {
        return Err(Error::Partition(format!(
            "vision length {vis_len} is not divisible by {n} chunks"
        )));
    }
    if m * n > vis_len {
        return Err(Error::Partition(format!(
            "{m} units x {n} chunks exceeds vision length {vis_len}"
        )));
    }

    let mut unit_boundaries = Vec::with_capacity(m + 1);
    let mut chunk_index_map = vec![Vec::with_capacity(vis_len / n); n];
    let mut start = 0;
    for unit_len in even_split(vis_len, m) {
        unit_boundaries.push(start);
        let mut frag_start = start;
        for (chunk, frag_len) in even_split(unit_len, n).enumerate() {
            chunk_index_map[chunk].extend(frag_start..frag_start + frag_len);
            frag_start += frag_len;
        }
        start += unit_len;
    }
    unit_boundaries.push(vis_len);

    let want = vis_len / n;
    if chunk_index_map.iter().any(|c| c.len() != want) {
        return Err(Error::Partition(format!(
            "{m} units over {vis_len} tokens give unequal chunk lengths for {n} chunks"
        )));
    }
    Ok(PartitionPlan {
        m_units: m,
        n_chunks: n,
        chunk_index_map,
        unit_boundaries,
    })
}

impl PartitionPlan {
    pub fn vis_len(&self) -> usize {
        self.chunk_index_map.iter().map(Vec::len).sum()
    }

    pub fn chunk_len(&self) -> usize {
        self.chunk_index_map.first().map_or(0, Vec::len)
    }

    /// Chunk holding original vision index `original`.
    pub fn chunk_of(&self, original: usize) -> Option<usize> {
        self.chunk_index_map
            .iter()
            .position(|c| c.binary_search(&original).is_ok())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&PlanFile {
            m_units: self.m_units,
            n_chunks: self.n_chunks,
            chunk_index_map: self.chunk_index_map.clone(),
        })?)
    }

    /// Parses a plan and checks it against a freshly built one.
    pub fn from_json(text: &str) -> Result<Self> {
        let file: PlanFile = serde_json::from_str(text)?;
        let vis_len = file.chunk_index_map.iter().map(Vec::len).sum();
        let plan = build_plan(vis_len, file.m_units, file.n_chunks)?;
        if plan.chunk_index_map != file.chunk_index_map {
            return Err(Error::Partition(
                "chunk_index_map does not match (m_units, n_chunks)".into(),
            ));
        }
        Ok(plan)
    }
}

pub fn inverse_map(plan: &PartitionPlan, chunk: usize, local: usize) -> Result<usize> {
    plan.chunk_index_map
        .get(chunk)
        .and_then(|c| c.get(local))
        .copied()
        .ok_or_else(|| contract(format!("no local index {local} in chunk {chunk}")))
}

/// The per-chunk prompts: identical system prompt and question around each
/// chunk's share of the vision tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct ChunkSet {
    pub chunks: Vec<SegmentedSequence>,
    pub plan: PartitionPlan,
}

pub fn apply_plan(seq: &SegmentedSequence, plan: &PartitionPlan) -> Result<ChunkSet> {
    seq.validate()?;
    if plan.vis_len() != seq.vis_len {
        return Err(Error::Partition(format!(
            "plan covers {} vision tokens but sequence has {}",
            plan.vis_len(),
            seq.vis_len
        )));
    }
    let vis = seq.vis();
    let chunks = plan
        .chunk_index_map
        .iter()
        .map(|indices| {
            let gathered: Vec<u32> = indices.iter().map(|&i| vis[i]).collect();
            SegmentedSequence::new(seq.sys(), &gathered, seq.ques())
        })
        .collect();
    Ok(ChunkSet {
        chunks,
        plan: plan.clone(),
    })
}
