mod common;

use common::*;
use mpq_core::corpus::TokenBatch;
use mpq_core::model::{
    lstm_step, target_log_probs, transformer_step, ContextOverflow, LstmState, ModelSpec, TransformerDecoder,
};
use mpq_core::ParamVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Row `r` of a gate matrix applied to `[x, h, 1]`.
fn affine(w: &[f64], cols: usize, r: usize, x: &[f64], h: &[f64]) -> f64 {
    let row = &w[r * cols..(r + 1) * cols];
    let mut s = row[cols - 1];
    for (i, v) in x.iter().chain(h).enumerate() {
        s += row[i] * v;
    }
    s
}

#[test]
fn lstm_step_matches_straight_line_cell() {
    let spec = ModelSpec::lstm(6, 8, 1);
    let p = spec.init_params(42).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let h0: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let c0: Vec<f64> = (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let state = LstmState { c: vec![c0.clone()], h: vec![h0.clone()] };
    let (logits, next) = lstm_step(&spec, &p, &x, &state).unwrap();

    let cols = 17;
    let (wf, wi, wc, wo) = (p.tensor(1).data(), p.tensor(2).data(), p.tensor(3).data(), p.tensor(4).data());
    let mut c = vec![0.0; 8];
    let mut h = vec![0.0; 8];
    for r in 0..8 {
        let f = sig(affine(wf, cols, r, &x, &h0));
        let i = sig(affine(wi, cols, r, &x, &h0));
        let g = affine(wc, cols, r, &x, &h0).tanh();
        let o = sig(affine(wo, cols, r, &x, &h0));
        c[r] = f * c0[r] + i * g;
        h[r] = o * c[r].tanh();
    }
    let wout = p.tensor(5).data();
    let expect_logits: Vec<f64> = (0..6).map(|r| affine(wout, 9, r, &h, &[])).collect();
    assert_rel_close(&next.c[0], &c, 0.0, 1e-12, "c");
    assert_rel_close(&next.h[0], &h, 0.0, 1e-12, "h");
    assert_rel_close(&logits, &expect_logits, 0.0, 1e-12, "logits");
    for v in &next.h[0] {
        assert!(v.abs() < 1.0);
    }
}

fn matvec(w: &[f64], cols: usize, x: &[f64], bias: bool) -> Vec<f64> {
    let rows = w.len() / cols;
    (0..rows)
        .map(|r| {
            let mut s = if bias { w[r * cols + cols - 1] } else { 0.0 };
            for (i, v) in x.iter().enumerate() {
                s += w[r * cols + i] * v;
            }
            s
        })
        .collect()
}

fn norm(x: &[f64]) -> Vec<f64> {
    let m = x.iter().sum::<f64>() / x.len() as f64;
    let var = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.len() as f64;
    x.iter().map(|v| (v - m) / (var + 1e-5).sqrt()).collect()
}

/// Single-head straight-line transformer returning logits at every position.
fn reference_transformer(spec: &ModelSpec, p: &ParamVector, tokens: &[usize]) -> Vec<Vec<f64>> {
    assert_eq!(spec.num_heads, 1);
    let d = spec.hidden_dim;
    let emb = p.tensor(0);
    let mut xs: Vec<Vec<f64>> = tokens
        .iter()
        .enumerate()
        .map(|(t, &w)| (0..d).map(|j| emb.row(w)[j] + emb.row(spec.vocab_size + t)[j]).collect())
        .collect();
    for l in 0..spec.num_layers {
        let w = |j: usize| p.tensor(1 + 6 * l + j).data();
        let q: Vec<_> = xs.iter().map(|x| matvec(w(0), d, x, false)).collect();
        let k: Vec<_> = xs.iter().map(|x| matvec(w(1), d, x, false)).collect();
        let v: Vec<_> = xs.iter().map(|x| matvec(w(2), d, x, false)).collect();
        let mut next = Vec::new();
        for t in 0..xs.len() {
            let scores: Vec<f64> = (0..=t)
                .map(|s| q[t].iter().zip(&k[s]).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            let mut y = vec![0.0; d];
            for s in 0..=t {
                for j in 0..d {
                    y[j] += e[s] / z * v[s][j];
                }
            }
            let zt: Vec<f64> = matvec(w(3), d, &y, false).iter().zip(&xs[t]).map(|(a, b)| a + b).collect();
            let o = norm(&zt);
            let hid: Vec<f64> = matvec(w(4), d + 1, &o, true)
                .into_iter()
                .map(|x| 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh()))
                .collect();
            let s: Vec<f64> = matvec(w(5), spec.ff_dim + 1, &hid, true).iter().zip(&o).map(|(a, b)| a + b).collect();
            next.push(norm(&s));
        }
        xs = next;
    }
    let out = p.tensor(p.len() - 1).data();
    xs.iter().map(|x| matvec(out, d + 1, x, true)).collect()
}

fn log_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::MIN, f64::max);
    let z = x.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
    x.iter().map(|v| v - z).collect()
}

#[test]
fn transformer_matches_straight_line_reference() {
    let mut spec = ModelSpec::transformer(7, 8, 2, 1);
    spec.ff_dim = 16;
    spec.max_context = 8;
    let p = spec.init_params(3).unwrap();
    let tokens = [2, 5, 1];
    let reference = reference_transformer(&spec, &p, &tokens);
    // Batched path: the target after the last token is arbitrary.
    let batch = TokenBatch::new(vec![vec![2, 5, 1, 0]]).unwrap();
    let lp = target_log_probs(&spec, &p, &batch).unwrap();
    for t in 0..3 {
        assert_rel_close(&lp[t], &log_softmax(&reference[t]), 0.0, 1e-10, "batched");
    }
    // Cached incremental path.
    let mut dec = TransformerDecoder::new(&spec, &p).unwrap();
    for t in 0..3 {
        let logits = dec.push(tokens[t]).unwrap();
        assert_rel_close(&logits, &reference[t], 0.0, 1e-10, "decoder");
    }
    let last = transformer_step(&spec, &p, &tokens, ContextOverflow::Error).unwrap();
    assert_rel_close(&last, &reference[2], 0.0, 1e-10, "step");
}

#[test]
fn attention_over_one_position_returns_its_value() {
    use mpq_core::grad::Tape;
    let mut tape = Tape::new();
    let q = tape.constant(1, 4, vec![0.3, -2.0, 1.0, 5.0]).unwrap();
    let k = tape.constant(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let v = tape.constant(1, 4, vec![0.1, 0.2, -0.3, 7.5]).unwrap();
    let y = tape.causal_attention(q, k, v, 1, 1, 2).unwrap();
    assert_eq!(tape.value(y), &[0.1, 0.2, -0.3, 7.5]);
}

#[test]
fn context_overflow_is_never_silent() {
    let mut spec = tiny_transformer();
    spec.max_context = 3;
    let p = spec.init_params(0).unwrap();
    assert!(transformer_step(&spec, &p, &[1, 2, 3, 0], ContextOverflow::Error).is_err());
    let trunc = transformer_step(&spec, &p, &[1, 2, 3, 0], ContextOverflow::Truncate).unwrap();
    let direct = transformer_step(&spec, &p, &[2, 3, 0], ContextOverflow::Error).unwrap();
    assert_eq!(trunc, direct);
}

fn prefix_is_bit_identical(spec: &ModelSpec) {
    let p = spec.init_params(8).unwrap();
    let full = TokenBatch::new(vec![vec![1, 3, 0, 2, 2, 1], vec![3, 3, 1, 0]]).unwrap();
    let short = TokenBatch::new(vec![vec![1, 3, 0], vec![3, 3, 1, 0]]).unwrap();
    let a = target_log_probs(spec, &p, &full).unwrap();
    let b = target_log_probs(spec, &p, &short).unwrap();
    // First sequence: 2 shared targets; second sequence unchanged.
    for (i, j) in [(0, 0), (1, 1), (5, 2), (6, 3), (7, 4)] {
        assert_eq!(a[i], b[j], "position {i}");
    }
    for row in a.iter().chain(&b) {
        let s: f64 = row.iter().map(|x| x.exp()).sum();
        assert!((s - 1.0).abs() < 1e-9);
    }
}

#[test]
fn causal_prefix_property() {
    let mut t = tiny_transformer();
    t.max_context = 6;
    prefix_is_bit_identical(&t);
    prefix_is_bit_identical(&ModelSpec::lstm(4, 5, 2));
}
