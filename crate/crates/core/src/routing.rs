//! Associative-recall routing suite on the hand-wired recall model.
//!
//! Each instance is `[BOS] [k v k v ...] [QUERY probe]` with every key present
//! exactly once and the probe's pair placed inside a chosen chunk. The suite
//! checks that gating routes to that chunk and that greedy decoding under
//! chunked inference answers as often as dense attention does.

use serde::Serialize;

use crate::engine::{generate, oracle_prefill, prefill, MoRefConfig};
use crate::error::{Error, Result};
use crate::model::{
    build_recall_model, ModelConfig, RecallVocab, SegmentedSequence, Weights, RECALL_LAYER,
};

pub struct RecallTask {
    pub vocab: RecallVocab,
    pub weights: Weights,
}

/// Shape used for the recall model: one head, a residual wide enough for
/// the wiring, and a slow rotary base so content pairs barely rotate.
pub fn recall_config(pairs: usize) -> ModelConfig {
    let vocab = RecallVocab::new(pairs, pairs);
    let needed = 3 + 4 * pairs;
    ModelConfig {
        n_layers: 3,
        n_heads: 1,
        d_model: 64.max(needed + needed % 2),
        d_ff: 16,
        vocab_size: vocab.size(),
        rope_base: 1e6,
        max_seq: 512,
        seed: 0,
    }
}

impl RecallTask {
    /// `pairs` keys and `pairs` values.
    pub fn new(pairs: usize) -> Result<Self> {
        let config = recall_config(pairs);
        Ok(Self {
            vocab: RecallVocab::new(pairs, pairs),
            weights: build_recall_model(&config, pairs, pairs)?,
        })
    }

    pub fn pairs(&self) -> usize {
        self.vocab.key_vocab
    }

    /// Prompt whose needle `(key, value)` lands in `needle_chunk` of an
    /// `n_chunks`-way single-unit partition. The other keys fill the remaining
    /// slots in ascending order, each paired with a value other than `value`.
    pub fn instance(
        &self,
        key: usize,
        value: usize,
        n_chunks: usize,
        needle_chunk: usize,
    ) -> Result<SegmentedSequence> {
        let pairs = self.pairs();
        if n_chunks == 0 || !pairs.is_multiple_of(n_chunks) {
            return Err(Error::Config(format!(
                "{pairs} pairs cannot be split evenly into {n_chunks} chunks"
            )));
        }
        if needle_chunk >= n_chunks {
            return Err(Error::Config(format!(
                "needle chunk {needle_chunk} outside 0..{n_chunks}"
            )));
        }
        if key >= pairs || value >= pairs {
            return Err(Error::Config(
                "needle key or value outside the vocabulary".into(),
            ));
        }
        let per_chunk = pairs / n_chunks;
        let slot = needle_chunk * per_chunk + key % per_chunk;
        let mut others = (0..pairs).filter(|&k| k != key);
        let mut vis = Vec::with_capacity(2 * pairs);
        for s in 0..pairs {
            let (k, v) = if s == slot {
                (key, value)
            } else {
                let k = others.next().expect("one key per remaining slot");
                let shift = if pairs > 1 { 1 + k % (pairs - 1) } else { 0 };
                (k, (value + shift) % pairs)
            };
            vis.push(self.vocab.key(k));
            vis.push(self.vocab.value(v));
        }
        Ok(SegmentedSequence::new(
            &[RecallVocab::BOS],
            &vis,
            &[RecallVocab::QUERY, self.vocab.key(key)],
        ))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RoutingCase {
    pub n_chunks: usize,
    pub needle_chunk: usize,
    pub key: usize,
    pub value: usize,
    pub omega: Vec<f32>,
    pub routed_chunk: usize,
    pub expected_token: u32,
    pub moref_token: u32,
    pub oracle_token: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RoutingSummary {
    pub fusion_layer: Option<usize>,
    pub cases: usize,
    pub routed: usize,
    pub moref_correct: usize,
    pub oracle_correct: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RoutingReport {
    pub pairs: usize,
    pub gating_layer: usize,
    pub summary: RoutingSummary,
    pub cases: Vec<RoutingCase>,
}

impl RoutingReport {
    pub fn all_routed(&self) -> bool {
        self.summary.routed == self.summary.cases
    }

    pub fn accuracy_matches_oracle(&self) -> bool {
        self.summary.moref_correct == self.summary.oracle_correct
    }
}

/// Runs every `(key, value)` needle over every chunk placement for each
/// chunk count, or only `needle_chunk` when given.
pub fn run_routing_suite(
    task: &RecallTask,
    n_chunks: &[usize],
    needle_chunk: Option<usize>,
    fusion_layer: Option<usize>,
) -> Result<RoutingReport> {
    let pairs = task.pairs();
    let mut cases = Vec::new();
    for &n in n_chunks {
        let placements: Vec<usize> = match needle_chunk {
            Some(c) => vec![c],
            None => (0..n).collect(),
        };
        let moref = MoRefConfig {
            m_units: 1,
            n_chunks: n,
            fusion_layer,
            ..MoRefConfig::default()
        };
        for &chunk in &placements {
            for key in 0..pairs {
                for value in 0..pairs {
                    let seq = task.instance(key, value, n, chunk)?;
                    let mut pre = prefill(&task.weights, &seq, &moref)?;
                    let omega = pre.gating[RECALL_LAYER].omega.clone();
                    let moref_token = generate(&task.weights, &mut pre.state, 1)?[0];
                    let mut oracle = oracle_prefill(&task.weights, &seq)?;
                    let oracle_token = generate(&task.weights, &mut oracle.state, 1)?[0];
                    cases.push(RoutingCase {
                        n_chunks: n,
                        needle_chunk: chunk,
                        key,
                        value,
                        routed_chunk: pre.gating[RECALL_LAYER].argmax(),
                        omega,
                        expected_token: task.vocab.value(value),
                        moref_token,
                        oracle_token,
                    });
                }
            }
        }
    }
    let count = |f: &dyn Fn(&RoutingCase) -> bool| cases.iter().filter(|c| f(c)).count();
    let summary = RoutingSummary {
        fusion_layer,
        cases: cases.len(),
        routed: count(&|c| c.routed_chunk == c.needle_chunk),
        moref_correct: count(&|c| c.moref_token == c.expected_token),
        oracle_correct: count(&|c| c.oracle_token == c.expected_token),
    };
    Ok(RoutingReport {
        pairs,
        gating_layer: RECALL_LAYER,
        summary,
        cases,
    })
}
