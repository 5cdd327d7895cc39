//! Hand-wired two-circuit associative recall model.
//!
//! Layer 0 is a previous-token head: every position attends to the token
//! right before it (using only the fast rotary frequencies) and copies that
//! token's key identity into a "previous key" subspace. Layer 1 is an
//! induction head: the probe key at the end of the question matches against
//! the "previous key" subspace using only the slowest rotary pairs, which are
//! effectively position-free, and copies the value identity of the matched
//! token into an "answer" subspace read by the unembedding.
//!
//! Residual layout: `[one | bos, query | key id | value id | prev key | answer]`.

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Weights};
use crate::numerics::rope_angle;

/// Layer whose question-to-vision attention carries the recall decision.
pub const RECALL_LAYER: usize = 1;

const NUM_SPECIALS: usize = 2;
const MAX_FAST_PAIRS: usize = 12;
const MIN_FAST_PAIRS: usize = 4;
/// Target attention-logit gap between the intended key and the runner-up.
const LOGIT_MARGIN: f64 = 30.0;
/// Largest rotation the slow pairs may accumulate over `max_seq` positions.
const MAX_SLOW_DRIFT: f64 = 0.1;

/// Token id layout of the recall vocabulary.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RecallVocab {
    pub key_vocab: usize,
    pub val_vocab: usize,
}

impl RecallVocab {
    pub const BOS: u32 = 0;
    pub const QUERY: u32 = 1;

    pub fn new(key_vocab: usize, val_vocab: usize) -> Self {
        Self {
            key_vocab,
            val_vocab,
        }
    }

    pub fn key(&self, k: usize) -> u32 {
        assert!(k < self.key_vocab);
        (NUM_SPECIALS + k) as u32
    }

    pub fn value(&self, v: usize) -> u32 {
        assert!(v < self.val_vocab);
        (NUM_SPECIALS + self.key_vocab + v) as u32
    }

    pub fn size(&self) -> usize {
        NUM_SPECIALS + self.key_vocab + self.val_vocab
    }

    fn residual_width(&self) -> usize {
        1 + NUM_SPECIALS + 2 * self.key_vocab + 2 * self.val_vocab
    }
}

struct Layout {
    one: usize,
    special: usize,
    key: usize,
    value: usize,
    prev_key: usize,
    answer: usize,
}

impl Layout {
    fn new(v: &RecallVocab) -> Self {
        let special = 1;
        let key = special + NUM_SPECIALS;
        let value = key + v.key_vocab;
        let prev_key = value + v.val_vocab;
        let answer = prev_key + v.key_vocab;
        Self {
            one: 0,
            special,
            key,
            value,
            prev_key,
            answer,
        }
    }
}

/// Gap between the score at offset -1 and the best other causal offset, for
/// a unit-weight sum over the first `pairs` rotary frequencies.
fn previous_token_margin(pairs: usize, width: usize, base: f64, max_seq: usize) -> f64 {
    let score = |x: f64| -> f64 {
        (0..pairs)
            .map(|p| rope_angle(x, p, width, base).cos())
            .sum()
    };
    // Offset 1 scores `score(0)`; offset 0 and offsets 2.. score `score(±1)`,
    // `score(1)`, `score(2)`, ... as cosine is even.
    let peak = score(0.0);
    let runner_up = (1..max_seq.max(2))
        .map(|x| score(x as f64))
        .fold(f64::NEG_INFINITY, f64::max);
    peak - runner_up
}

/// Builds weights for which greedy decoding of
/// `[BOS] [k1 v1 k2 v2 ...] [QUERY probe]` emits the value paired with `probe`.
pub fn build_recall_model(
    config: &ModelConfig,
    key_vocab: usize,
    val_vocab: usize,
) -> Result<Weights> {
    config.validate()?;
    let vocab = RecallVocab::new(key_vocab, val_vocab);
    let too_small = |what: String| Err(Error::Config(format!("recall model: {what}")));
    if key_vocab == 0 || val_vocab == 0 {
        return too_small("key and value vocabularies must be non-empty".into());
    }
    if config.n_layers < 2 {
        return too_small(format!("needs at least 2 layers, got {}", config.n_layers));
    }
    if config.vocab_size < vocab.size() {
        return too_small(format!(
            "vocab_size {} < {} required",
            config.vocab_size,
            vocab.size()
        ));
    }
    if config.d_model < vocab.residual_width() {
        return too_small(format!(
            "d_model {} < {} required",
            config.d_model,
            vocab.residual_width()
        ));
    }
    let d = config.d_model;
    let dh = config.d_head();
    let half = dh / 2;
    let slow_pairs = key_vocab.div_ceil(2);
    if key_vocab > dh || val_vocab > dh || slow_pairs + MIN_FAST_PAIRS > half {
        return too_small(format!("head width {dh} too narrow"));
    }
    let fast_pairs = MAX_FAST_PAIRS.min(half - slow_pairs);
    let first_slow = half - slow_pairs;
    let drift = rope_angle(config.max_seq as f64, first_slow, dh, config.rope_base);
    if drift > MAX_SLOW_DRIFT {
        return too_small(format!(
            "rope_base {} rotates the content pairs by {drift:.3} rad over max_seq",
            config.rope_base
        ));
    }
    let margin = previous_token_margin(fast_pairs, dh, config.rope_base, config.max_seq);
    if margin < 0.25 {
        return too_small(format!("previous-token margin {margin:.3} too small"));
    }

    let lay = Layout::new(&vocab);
    let mut w = Weights::zeros(config);

    // Every token embeds as one + its own identity dimension, so all
    // embeddings share the same RMS.
    let identity_dim = |id: usize| -> usize {
        if id < NUM_SPECIALS {
            lay.special + id
        } else if id < NUM_SPECIALS + key_vocab {
            lay.key + id - NUM_SPECIALS
        } else {
            lay.value + id - NUM_SPECIALS - key_vocab
        }
    };
    for id in 0..vocab.size() {
        w.embedding.set(id, lay.one, 1.0);
        w.embedding.set(id, identity_dim(id), 1.0);
    }

    let sqrt_dh = (dh as f64).sqrt();
    let rms_embed = (2.0 / d as f64).sqrt();

    // Layer 0: previous-token head over the fast pairs, driven by the constant
    // `one` feature. q.k peaks when the key sits one position back.
    let l0 = &mut w.layers[0];
    let c0 = (LOGIT_MARGIN * sqrt_dh * rms_embed * rms_embed / margin).sqrt();
    for p in 0..fast_pairs {
        let theta = rope_angle(1.0, p, dh, config.rope_base);
        l0.wq.set(lay.one, 2 * p, (c0 * theta.cos()) as f32);
        l0.wq.set(lay.one, 2 * p + 1, (-c0 * theta.sin()) as f32);
        l0.wk.set(lay.one, 2 * p, c0 as f32);
    }
    for k in 0..key_vocab {
        l0.wv.set(lay.key + k, k, rms_embed as f32);
        l0.wo.set(k, lay.prev_key + k, 1.0);
    }

    // Layer 1: induction head matching the probe's key id against each
    // token's previous-key id within the slow pairs.
    let l1 = &mut w.layers[RECALL_LAYER];
    let rms_probe = rms_embed;
    let rms_value = (3.0 / d as f64).sqrt();
    let s1 = (LOGIT_MARGIN * sqrt_dh * rms_probe * rms_value).sqrt() as f32;
    for k in 0..key_vocab {
        let slot = 2 * first_slow + k;
        l1.wq.set(lay.key + k, slot, s1);
        l1.wk.set(lay.prev_key + k, slot, s1);
    }
    for v in 0..val_vocab {
        l1.wv.set(lay.value + v, v, rms_value as f32);
        l1.wo.set(v, lay.answer + v, 1.0);
    }

    for v in 0..val_vocab {
        w.unembed.set(lay.answer + v, vocab.value(v) as usize, 1.0);
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 3,
            n_heads: 1,
            d_model: 64,
            d_ff: 16,
            vocab_size: 18,
            rope_base: 1e6,
            max_seq: 512,
            seed: 0,
        }
    }

    #[test]
    fn vocab_layout() {
        let v = RecallVocab::new(8, 8);
        assert_eq!(v.key(0), 2);
        assert_eq!(v.value(0), 10);
        assert_eq!(v.size(), 18);
    }

    #[test]
    fn builds_for_default_shape() {
        let w = build_recall_model(&cfg(), 8, 8).unwrap();
        assert!(w.is_finite());
        assert!(w.layers[2].wq.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn rejects_small_configs() {
        let one_layer = ModelConfig {
            n_layers: 1,
            ..cfg()
        };
        assert!(build_recall_model(&one_layer, 8, 8).is_err());
        let narrow = ModelConfig {
            d_model: 32,
            ..cfg()
        };
        assert!(build_recall_model(&narrow, 8, 8).is_err());
        let small_vocab = ModelConfig {
            vocab_size: 12,
            ..cfg()
        };
        assert!(build_recall_model(&small_vocab, 8, 8).is_err());
        let fast_rope = ModelConfig {
            rope_base: 100.0,
            ..cfg()
        };
        assert!(build_recall_model(&fast_rope, 8, 8).is_err());
    }

    #[test]
    fn previous_token_margin_is_positive() {
        assert!(previous_token_margin(12, 64, 1e6, 512) > 0.5);
    }
}
