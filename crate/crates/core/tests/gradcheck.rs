mod common;

use common::*;
use mpq_core::grad::{hvp, Objective};
use mpq_core::model::{forward_backward, BatchObjective, ModelSpec};
use mpq_core::ParamVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn check_model(spec: &ModelSpec, seed: u64) {
    let params = spec.init_params(seed).unwrap();
    assert!(params.total_count() <= 200, "{} params", params.total_count());
    let batch = random_batch(spec.vocab_size, 3, 4, seed);
    let obj = BatchObjective { spec, batch: &batch };
    let (_, g) = forward_backward(spec, &params, &batch).unwrap();
    let fd = fd_grad(&params, 1e-5, |p| obj.loss(p).unwrap());
    assert_rel_close(&g.flatten(), &fd, 1e-4, 1e-8, "grad");
}

#[test]
fn lstm_gradients_match_finite_differences() {
    for seed in 0..3 {
        check_model(&tiny_lstm(), seed);
    }
    // Two layers exercise the stacked cell path.
    let mut s = ModelSpec::lstm(3, 2, 2);
    s.max_context = 8;
    check_model(&s, 7);
}

#[test]
fn transformer_gradients_match_finite_differences() {
    for seed in 0..3 {
        check_model(&tiny_transformer(), seed);
    }
}

#[test]
fn gradients_are_deterministic() {
    for spec in [tiny_lstm(), tiny_transformer()] {
        let p = spec.init_params(5).unwrap();
        let b = random_batch(spec.vocab_size, 3, 4, 5);
        let (l1, g1) = forward_backward(&spec, &p, &b).unwrap();
        let (l2, g2) = forward_backward(&spec, &p, &b).unwrap();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert_eq!(g1, g2);
    }
}

#[test]
fn unused_embedding_rows_have_zero_gradient() {
    let spec = ModelSpec::lstm(10, 3, 1);
    let p = spec.init_params(0).unwrap();
    let b = mpq_core::corpus::TokenBatch::new(vec![vec![1, 2, 3], vec![2, 1]]).unwrap();
    let (_, g) = forward_backward(&spec, &p, &b).unwrap();
    let emb = g.tensor(0);
    for row in [0, 4, 5, 6, 7, 8, 9] {
        assert!(emb.row(row).iter().all(|&x| x == 0.0), "row {row}");
    }
    assert!(emb.row(1).iter().any(|&x| x != 0.0));
}

/// Hessian from second differences of the loss alone.
fn explicit_hessian(obj: &BatchObjective, p: &ParamVector, h: f64) -> Vec<Vec<f64>> {
    let flat = p.flatten();
    let n = flat.len();
    let f = |d: &[(usize, f64)]| {
        let mut x = flat.clone();
        for &(i, s) in d {
            x[i] += s;
        }
        obj.loss(&p.unflatten(&x).unwrap()).unwrap()
    };
    let mut hess = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let v = (f(&[(i, h), (j, h)]) - f(&[(i, h), (j, -h)]) - f(&[(i, -h), (j, h)]) + f(&[(i, -h), (j, -h)]))
                / (4.0 * h * h);
            hess[i][j] = v;
            hess[j][i] = v;
        }
    }
    hess
}

#[test]
fn hvp_matches_explicit_hessian() {
    let spec = ModelSpec::lstm(3, 2, 1);
    let p = spec.init_params(11).unwrap();
    let batch = random_batch(3, 2, 3, 11);
    let obj = BatchObjective { spec: &spec, batch: &batch };
    let hess = explicit_hessian(&obj, &p, 1e-4);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let v: Vec<f64> = (0..p.total_count()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let expect: Vec<f64> = hess.iter().map(|row| row.iter().zip(&v).map(|(a, b)| a * b).sum()).collect();
    let got = hvp(&obj, &p, &p.unflatten(&v).unwrap(), mpq_core::grad::default_hvp_eps(&p)).unwrap().flatten();
    let num: f64 = got.iter().zip(&expect).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let den: f64 = expect.iter().map(|a| a * a).sum::<f64>().sqrt();
    assert!(num / den < 1e-3, "relative error {}", num / den);
}

#[test]
fn hvp_is_linear() {
    let spec = tiny_transformer();
    let p = spec.init_params(2).unwrap();
    let batch = random_batch(4, 2, 4, 2);
    let obj = BatchObjective { spec: &spec, batch: &batch };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = p.total_count();
    let v1 = p.unflatten(&(0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>()).unwrap();
    let v2 = p.unflatten(&(0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>()).unwrap();
    let eps = mpq_core::grad::default_hvp_eps(&p);
    let (a, b) = (0.7, -1.3);
    let mut comb = v1.clone();
    comb.scale(a);
    comb.add_scaled(b, &v2);
    let lhs = hvp(&obj, &p, &comb, eps).unwrap().flatten();
    let h1 = hvp(&obj, &p, &v1, eps).unwrap();
    let h2 = hvp(&obj, &p, &v2, eps).unwrap();
    let mut rhs = h1;
    rhs.scale(a);
    rhs.add_scaled(b, &h2);
    let rhs = rhs.flatten();
    let num: f64 = lhs.iter().zip(&rhs).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let den: f64 = rhs.iter().map(|a| a * a).sum::<f64>().sqrt();
    assert!(num / den < 1e-3, "relative error {}", num / den);
}
