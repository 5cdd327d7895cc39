use moref::attention::{cross_modal_map, fuse_question_outputs, gating_weights, CrossModalMap};
use moref::cli::render_vision_mask;
use moref::fusion::{importance, keep_count, select_tokens, ImportanceMatrix};
use moref::numerics::{causal_attention, row_softmax, Mat};
use moref::partition::{build_plan, inverse_map};
use proptest::prelude::*;

fn mat(rows: usize, cols: usize) -> impl Strategy<Value = Mat> {
    prop::collection::vec(-3.0f32..3.0, rows * cols)
        .prop_map(move |d| Mat::new(rows, cols, d).unwrap())
}

/// `(vis_len, m, n)` triples that build a valid plan.
fn valid_plan_args() -> impl Strategy<Value = (usize, usize, usize)> {
    (1usize..=8, 1usize..=12, 1usize..=8)
        .prop_flat_map(|(n, per_chunk, units_per)| {
            let vis = n * per_chunk * units_per.max(1);
            (Just(vis), 1..=vis / n, Just(n))
        })
        .prop_filter("plan must build", |&(v, m, n)| build_plan(v, m, n).is_ok())
}

proptest! {
    #[test]
    fn partition_is_a_bijection((vis, m, n) in valid_plan_args()) {
        let plan = build_plan(vis, m, n).unwrap();
        let mut seen = vec![false; vis];
        for (c, idx) in plan.chunk_index_map.iter().enumerate() {
            prop_assert_eq!(idx.len(), vis / n);
            prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
            for (local, &orig) in idx.iter().enumerate() {
                prop_assert!(!seen[orig]);
                seen[orig] = true;
                prop_assert_eq!(inverse_map(&plan, c, local).unwrap(), orig);
                prop_assert_eq!(plan.chunk_of(orig), Some(c));
            }
        }
        prop_assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn units_are_contiguous_and_near_equal((vis, m, n) in valid_plan_args()) {
        let plan = build_plan(vis, m, n).unwrap();
        let sizes: Vec<usize> = plan.unit_boundaries.windows(2).map(|w| w[1] - w[0]).collect();
        prop_assert_eq!(sizes.len(), m);
        prop_assert!(sizes.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(sizes[0] - sizes[m - 1] <= 1);
    }

    #[test]
    fn mask_matches_definition((vis, m, n) in valid_plan_args()) {
        prop_assume!(vis <= 64);
        let plan = build_plan(vis, m, n).unwrap();
        let r = render_vision_mask(&plan);
        for i in 0..vis {
            for j in 0..vis {
                let same = plan.chunk_of(i) == plan.chunk_of(j);
                prop_assert_eq!(r.grid[i][j], j <= i && same);
            }
        }
    }

    #[test]
    fn softmax_rows_are_simplex(m in mat(4, 7), scale in 0.05f32..4.0) {
        let s = row_softmax(&m, scale);
        for r in 0..4 {
            let row = s.row(r);
            prop_assert!(row.iter().all(|&x| (0.0..=1.0).contains(&x)));
            prop_assert!((row.iter().sum::<f32>() - 1.0).abs() <= 1e-5);
        }
    }

    #[test]
    fn gating_is_a_simplex(q in mat(3, 8), k0 in mat(5, 8), k1 in mat(5, 8), k2 in mat(5, 8), per_head in any::<bool>()) {
        let a = cross_modal_map(&[q.clone(), q.clone(), q], &[k0, k1, k2], 2, true, 0).unwrap();
        let w = gating_weights(&a, per_head);
        prop_assert!(w.omega.iter().all(|&x| x >= 0.0));
        prop_assert!((w.omega.iter().sum::<f32>() - 1.0).abs() <= 1e-6);
        if let Some(heads) = &w.per_head {
            for h in heads {
                prop_assert!((h.iter().sum::<f32>() - 1.0).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn importance_rows_sum_to_one(q in mat(4, 8), k0 in mat(6, 8), k1 in mat(6, 8)) {
        let a = cross_modal_map(&[q.clone(), q], &[k0, k1], 4, true, 0).unwrap();
        let e = importance(&a);
        for i in 0..2 {
            prop_assert!((e.values[i].iter().sum::<f32>() - 1.0).abs() <= 1e-6);
            for j in 0..6 {
                let direct = (0..4).map(|r| a.get(i, r, j) as f64).sum::<f64>() / 4.0;
                prop_assert!((e.values[i][j] as f64 - direct).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn fusion_is_convex(a in mat(2, 4), b in mat(2, 4), w0 in 0.0f32..1.0) {
        let w = moref::attention::GatingWeights { layer: 0, omega: vec![w0, 1.0 - w0], per_head: None };
        let f = fuse_question_outputs(&[a.clone(), b.clone()], &w).unwrap();
        for i in 0..8 {
            let (x, y) = (a.data()[i], b.data()[i]);
            prop_assert!(f.data()[i] >= x.min(y) - 1e-5 && f.data()[i] <= x.max(y) + 1e-5);
        }
    }

    #[test]
    fn selection_keeps_the_right_count(row in prop::collection::vec(0.0f32..1.0, 1..40), drop in 0.0f64..0.95) {
        let e = ImportanceMatrix { values: vec![row.clone()], source_layer: 0 };
        let kept = select_tokens(&e, drop).unwrap();
        let k = keep_count(row.len(), drop).unwrap();
        prop_assert_eq!(kept[0].len(), k);
        prop_assert!(kept[0].windows(2).all(|w| w[0] < w[1]));
        // every kept score beats or ties every dropped one
        let min_kept = kept[0].iter().map(|&j| row[j]).fold(f32::INFINITY, f32::min);
        for j in (0..row.len()).filter(|j| !kept[0].contains(j)) {
            prop_assert!(row[j] <= min_kept);
        }
    }

    #[test]
    fn selection_is_monotone(row in prop::collection::vec(0.0f32..1.0, 2..30), pick in any::<prop::sample::Index>(), bump in 0.0f32..1.0, drop in 0.0f64..0.9) {
        let e = ImportanceMatrix { values: vec![row.clone()], source_layer: 0 };
        let before = select_tokens(&e, drop).unwrap();
        let j = pick.index(row.len());
        prop_assume!(before[0].contains(&j));
        let mut raised = row.clone();
        raised[j] += bump;
        let after = select_tokens(&ImportanceMatrix { values: vec![raised], source_layer: 0 }, drop).unwrap();
        prop_assert!(after[0].contains(&j));
    }

    #[test]
    fn attention_is_causal(q in mat(6, 4), k in mat(6, 4), v in mat(6, 4), k2 in mat(6, 4), v2 in mat(6, 4), cut in 1usize..6) {
        // replacing keys and values after `cut` leaves rows before `cut` unchanged
        let mut k_alt = k.clone();
        let mut v_alt = v.clone();
        k_alt.set_rows(cut, &k2.slice_rows(cut, 6));
        v_alt.set_rows(cut, &v2.slice_rows(cut, 6));
        let a = causal_attention(&q, &k, &v, 0).unwrap();
        let b = causal_attention(&q, &k_alt, &v_alt, 0).unwrap();
        prop_assert_eq!(a.slice_rows(0, cut), b.slice_rows(0, cut));
    }
}

#[test]
fn cross_modal_map_rows_are_simplex() {
    let q = Mat::new(2, 4, vec![0.5, -1.0, 2.0, 0.1, 1.0, 1.0, -1.0, 0.0]).unwrap();
    let k = Mat::new(3, 4, (0..12).map(|i| i as f32 * 0.1).collect()).unwrap();
    let a: CrossModalMap = cross_modal_map(&[q], &[k], 2, false, 0).unwrap();
    for r in 0..2 {
        let sum: f32 = (0..3).map(|j| a.get(0, r, j)).sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }
}
