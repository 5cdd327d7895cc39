mod common;

use common::{
    dense_logits, dense_logits_all, max_abs_diff, moref_logits, random_case, random_sequence,
    small_config,
};
use moref::engine::{oracle_prefill, prefill, MoRefConfig};
use moref::model::{init_random, SegmentedSequence};
use moref::partition::build_plan;

#[test]
fn oracle_matches_explicit_mask_reference() {
    let cfg = small_config(2, 2, 32);
    let w = init_random(&cfg, 11).unwrap();
    let seq = random_sequence(5, 64, 3, 20, 4);
    let pre = oracle_prefill(&w, &seq).unwrap();
    let diff = max_abs_diff(&dense_logits(&w, &seq), &pre.logits);
    assert!(diff <= 1e-5, "max diff {diff}");
}

#[test]
fn oracle_is_deterministic() {
    let cfg = small_config(3, 4, 64);
    let w = init_random(&cfg, 2).unwrap();
    let seq = random_sequence(9, 64, 2, 40, 3);
    let a = oracle_prefill(&w, &seq).unwrap();
    let b = oracle_prefill(&w, &seq).unwrap();
    assert_eq!(a.logits, b.logits);
}

#[test]
fn oracle_prefix_property() {
    let cfg = small_config(2, 2, 32);
    let w = init_random(&cfg, 4).unwrap();
    let tokens = random_sequence(1, 64, 0, 0, 30).tokens;
    let short = oracle_prefill(&w, &SegmentedSequence::new(&[], &[], &tokens[..18])).unwrap();
    let long = oracle_prefill(&w, &SegmentedSequence::new(&[], &[], &tokens)).unwrap();
    assert_eq!(long.logits.slice_rows(0, 18), short.logits);
    // and the reference agrees that later tokens do not leak backwards
    let reference = dense_logits_all(&w, &tokens);
    assert!(max_abs_diff(&reference[..18].to_vec(), &short.logits) <= 1e-5);
}

#[test]
fn single_chunk_without_fusion_equals_oracle() {
    for seed in 0..8 {
        let (cfg, seq) = random_case(seed);
        let w = init_random(&cfg, seed).unwrap();
        let moref = prefill(&w, &seq, &MoRefConfig::default()).unwrap();
        let oracle = oracle_prefill(&w, &seq).unwrap();
        let diff = moref.logits.max_abs_diff(&oracle.logits);
        assert!(diff <= 1e-4, "seed {seed}: {diff}");
    }
}

#[test]
fn chunked_prefill_matches_reference() {
    let cfg = small_config(3, 2, 32);
    let w = init_random(&cfg, 21).unwrap();
    let seq = random_sequence(3, 64, 3, 24, 4);
    for (m, n, fusion) in [
        (1, 2, None),
        (4, 2, None),
        (2, 4, None),
        (1, 2, Some(1)),
        (3, 2, Some(2)),
        (2, 4, Some(3)),
        (6, 4, Some(2)),
    ] {
        let moref = MoRefConfig {
            m_units: m,
            n_chunks: n,
            fusion_layer: fusion,
            ..MoRefConfig::default()
        };
        let plan = build_plan(seq.vis_len, m, n).unwrap();
        let got = prefill(&w, &seq, &moref).unwrap();
        let want = moref_logits(&w, &seq, &plan, fusion, moref.drop_rate());
        let diff = max_abs_diff(&want, &got.logits);
        assert!(diff <= 1e-4, "m={m} n={n} fusion={fusion:?}: {diff}");
    }
}

#[test]
fn custom_drop_rate_matches_reference() {
    let cfg = small_config(3, 1, 32);
    let w = init_random(&cfg, 8).unwrap();
    let seq = random_sequence(4, 64, 2, 32, 3);
    let plan = build_plan(32, 2, 2).unwrap();
    for drop in [0.0, 0.25, 0.75] {
        let moref = MoRefConfig {
            m_units: 2,
            n_chunks: 2,
            fusion_layer: Some(2),
            drop_rate: Some(drop),
            ..MoRefConfig::default()
        };
        let got = prefill(&w, &seq, &moref).unwrap();
        let want = moref_logits(&w, &seq, &plan, Some(2), drop);
        assert!(max_abs_diff(&want, &got.logits) <= 1e-4, "drop {drop}");
    }
}
