//! Independent f64 reference forwards with explicit attention masks.
#![allow(dead_code)]

use moref::model::{ModelConfig, SegmentedSequence, Weights, NORM_EPS};
use moref::numerics::Mat;
use moref::partition::PartitionPlan;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type M = Vec<Vec<f64>>;

pub fn to64(m: &Mat) -> M {
    (0..m.rows())
        .map(|r| m.row(r).iter().map(|&x| x as f64).collect())
        .collect()
}

fn matmul(a: &M, b: &Mat) -> M {
    let b = to64(b);
    a.iter()
        .map(|row| {
            (0..b[0].len())
                .map(|j| row.iter().zip(&b).map(|(x, br)| x * br[j]).sum())
                .collect()
        })
        .collect()
}

fn rms_norm(x: &M, gain: &[f32]) -> M {
    x.iter()
        .map(|row| {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
            let inv = 1.0 / (ms + NORM_EPS as f64).sqrt();
            row.iter()
                .zip(gain)
                .map(|(v, &g)| v * inv * g as f64)
                .collect()
        })
        .collect()
}

fn rope(x: &M, positions: &[usize], base: f64, n_heads: usize) -> M {
    let dh = x[0].len() / n_heads;
    x.iter()
        .zip(positions)
        .map(|(row, &pos)| {
            let mut out = row.clone();
            for h in 0..n_heads {
                for p in 0..dh / 2 {
                    let angle = pos as f64 / base.powf(2.0 * p as f64 / dh as f64);
                    let (i0, i1) = (h * dh + 2 * p, h * dh + 2 * p + 1);
                    out[i0] = row[i0] * angle.cos() - row[i1] * angle.sin();
                    out[i1] = row[i0] * angle.sin() + row[i1] * angle.cos();
                }
            }
            out
        })
        .collect()
}

fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = e.iter().sum();
    e.iter().map(|x| x / sum).collect()
}

/// Attention where `mask[i][j]` says query `i` may see key `j`; masked
/// scores are set to negative infinity before the softmax.
pub fn masked_attention(q: &M, k: &M, v: &M, n_heads: usize, mask: &[Vec<bool>]) -> M {
    let dh = q[0].len() / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![vec![0.0; v[0].len()]; q.len()];
    for h in 0..n_heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..q.len() {
            let scores: Vec<f64> = (0..k.len())
                .map(|j| {
                    if mask[i][j] {
                        cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() * scale
                    } else {
                        f64::NEG_INFINITY
                    }
                })
                .collect();
            let p = softmax(&scores);
            for (j, pj) in p.iter().enumerate() {
                for c in cols.clone() {
                    out[i][c] += pj * v[j][c];
                }
            }
        }
    }
    out
}

pub fn causal_mask(t: usize) -> Vec<Vec<bool>> {
    (0..t).map(|i| (0..t).map(|j| j <= i).collect()).collect()
}

struct Attn {
    q: M,
    k: M,
    o: M,
}

fn attention_part(x: &M, w: &Weights, layer: usize, positions: &[usize]) -> Attn {
    let cfg = &w.config;
    let lw = &w.layers[layer];
    let h = rms_norm(x, &lw.attn_norm);
    let q = rope(&matmul(&h, &lw.wq), positions, cfg.rope_base, cfg.n_heads);
    let k = rope(&matmul(&h, &lw.wk), positions, cfg.rope_base, cfg.n_heads);
    let v = matmul(&h, &lw.wv);
    let o = masked_attention(&q, &k, &v, cfg.n_heads, &causal_mask(x.len()));
    Attn { q, k, o }
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn finish(x: &M, o: &M, w: &Weights, layer: usize) -> M {
    let lw = &w.layers[layer];
    let proj = matmul(o, &lw.wo);
    let x: M = x
        .iter()
        .zip(&proj)
        .map(|(a, b)| a.iter().zip(b).map(|(p, q)| p + q).collect())
        .collect();
    let h = rms_norm(&x, &lw.mlp_norm);
    let gu = matmul(&h, &lw.mlp_in);
    let dff = lw.mlp_out.rows();
    let act: M = gu
        .iter()
        .map(|r| (0..dff).map(|c| silu(r[c]) * r[dff + c]).collect())
        .collect();
    let down = matmul(&act, &lw.mlp_out);
    x.iter()
        .zip(&down)
        .map(|(a, b)| a.iter().zip(b).map(|(p, q)| p + q).collect())
        .collect()
}

fn embed(tokens: &[u32], w: &Weights) -> M {
    tokens
        .iter()
        .map(|&t| {
            w.embedding
                .row(t as usize)
                .iter()
                .map(|&x| x as f64)
                .collect()
        })
        .collect()
}

fn head(h: &M, w: &Weights) -> M {
    matmul(&rms_norm(h, &w.final_norm), &w.unembed)
}

/// Dense causal forward; logits of every row.
pub fn dense_logits_all(w: &Weights, tokens: &[u32]) -> M {
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let mut x = embed(tokens, w);
    for l in 0..w.config.n_layers {
        let a = attention_part(&x, w, l, &positions);
        x = finish(&x, &a.o, w, l);
    }
    head(&x, w)
}

/// Dense causal forward; logits of the question rows.
pub fn dense_logits(w: &Weights, seq: &SegmentedSequence) -> M {
    let all = dense_logits_all(w, &seq.tokens);
    all[seq.sys_len + seq.vis_len..].to_vec()
}

/// Chunked forward: per-chunk causal attention, question outputs mixed by
/// weights proportional to each chunk's peak head-averaged question-to-vision
/// attention, optional top-k merge at `fusion_layer`, dense layers after.
pub fn moref_logits(
    w: &Weights,
    seq: &SegmentedSequence,
    plan: &PartitionPlan,
    fusion_layer: Option<usize>,
    drop_rate: f64,
) -> M {
    let cfg = &w.config;
    let (s, q) = (seq.sys_len, seq.ques_len);
    let lv = plan.chunk_len();
    let vis = seq.vis();
    let chunks: Vec<Vec<u32>> = plan
        .chunk_index_map
        .iter()
        .map(|idx| {
            let mut t = seq.sys().to_vec();
            t.extend(idx.iter().map(|&i| vis[i]));
            t.extend_from_slice(seq.ques());
            t
        })
        .collect();
    let len = s + lv + q;
    let positions: Vec<usize> = (0..len).collect();
    let mut xs: Vec<M> = chunks.iter().map(|t| embed(t, w)).collect();
    let pre = fusion_layer.unwrap_or(cfg.n_layers);
    let dh = cfg.d_model / cfg.n_heads;
    let mut last_maps: Vec<M> = Vec::new();

    for l in 0..pre {
        let parts: Vec<Attn> = xs
            .iter()
            .map(|x| attention_part(x, w, l, &positions))
            .collect();
        let maps: Vec<M> = parts
            .iter()
            .map(|a| {
                let mut avg = vec![vec![0.0; lv]; q];
                for h in 0..cfg.n_heads {
                    let cols = h * dh..(h + 1) * dh;
                    for (r, avg_row) in avg.iter_mut().enumerate() {
                        let scores: Vec<f64> = (0..lv)
                            .map(|j| {
                                cols.clone()
                                    .map(|c| a.q[s + lv + r][c] * a.k[s + j][c])
                                    .sum::<f64>()
                                    / (dh as f64).sqrt()
                            })
                            .collect();
                        for (acc, p) in avg_row.iter_mut().zip(softmax(&scores)) {
                            *acc += p / cfg.n_heads as f64;
                        }
                    }
                }
                avg
            })
            .collect();
        let peaks: Vec<f64> = maps
            .iter()
            .map(|m| {
                m.iter()
                    .flatten()
                    .copied()
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        let total: f64 = peaks.iter().sum();
        let mut fused = vec![vec![0.0; cfg.d_model]; q];
        for (a, peak) in parts.iter().zip(&peaks) {
            for (r, row) in fused.iter_mut().enumerate() {
                for (c, x) in row.iter_mut().enumerate() {
                    *x += peak / total * a.o[s + lv + r][c];
                }
            }
        }
        xs = xs
            .iter()
            .zip(parts)
            .map(|(x, mut a)| {
                a.o[s + lv..].clone_from_slice(&fused);
                finish(x, &a.o, w, l)
            })
            .collect();
        last_maps = maps;
    }

    let Some(_) = fusion_layer else {
        return head(&xs[0][s + lv..].to_vec(), w);
    };
    let keep = ((1.0 - drop_rate) * lv as f64 - 1e-9).ceil() as usize;
    let mut survivors: Vec<(usize, usize, usize)> = Vec::new();
    for (c, map) in last_maps.iter().enumerate() {
        let e: Vec<f64> = (0..lv)
            .map(|j| map.iter().map(|row| row[j]).sum::<f64>() / q as f64)
            .collect();
        let mut order: Vec<usize> = (0..lv).collect();
        order.sort_by(|&a, &b| e[b].partial_cmp(&e[a]).unwrap().then(a.cmp(&b)));
        for &j in &order[..keep] {
            survivors.push((plan.chunk_index_map[c][j], c, j));
        }
    }
    survivors.sort();
    let mut x: M = xs[0][..s].to_vec();
    x.extend(survivors.iter().map(|&(_, c, j)| xs[c][s + j].clone()));
    x.extend(xs[0][s + lv..].iter().cloned());
    let merged_positions: Vec<usize> = (0..x.len()).collect();
    for l in pre..cfg.n_layers {
        let a = attention_part(&x, w, l, &merged_positions);
        x = finish(&x, &a.o, w, l);
    }
    let start = x.len() - q;
    head(&x[start..].to_vec(), w)
}

pub fn max_abs_diff(a: &M, b: &Mat) -> f64 {
    assert_eq!((a.len(), a[0].len()), (b.rows(), b.cols()));
    let mut worst = 0.0f64;
    for (r, row) in a.iter().enumerate() {
        for (c, &x) in row.iter().enumerate() {
            worst = worst.max((x - b.get(r, c) as f64).abs());
        }
    }
    worst
}

/// Random model shape and prompt in the ranges the equivalence checks use:
/// 2 to 4 layers, width 32 to 128, 32 to 256 tokens.
pub fn random_case(seed: u64) -> (ModelConfig, SegmentedSequence) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_heads = [1, 2, 4][rng.random_range(0..3)];
    let d_model = 8 * rng.random_range(4..=16);
    let cfg = ModelConfig {
        n_layers: rng.random_range(2..=4),
        n_heads,
        d_model,
        d_ff: 2 * d_model,
        vocab_size: 96,
        rope_base: 10_000.0,
        max_seq: 512,
        seed,
    };
    let total = rng.random_range(32..=256);
    let sys = rng.random_range(0..=8);
    let ques = rng.random_range(1..=8);
    let vis = total - sys - ques;
    let mut ids = |n: usize| -> Vec<u32> { (0..n).map(|_| rng.random_range(0..96)).collect() };
    let seq = SegmentedSequence::new(&ids(sys), &ids(vis), &ids(ques));
    (cfg, seq)
}

/// Random prompt with the given segment lengths.
pub fn random_sequence(
    seed: u64,
    vocab: usize,
    sys: usize,
    vis: usize,
    ques: usize,
) -> SegmentedSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids =
        |n: usize| -> Vec<u32> { (0..n).map(|_| rng.random_range(0..vocab as u32)).collect() };
    SegmentedSequence::new(&ids(sys), &ids(vis), &ids(ques))
}

pub fn small_config(n_layers: usize, n_heads: usize, d_model: usize) -> ModelConfig {
    ModelConfig {
        n_layers,
        n_heads,
        d_model,
        d_ff: 2 * d_model,
        vocab_size: 64,
        rope_base: 10_000.0,
        max_seq: 512,
        seed: 0,
    }
}
