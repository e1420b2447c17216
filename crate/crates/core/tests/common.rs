#![allow(dead_code)]

use mpq_core::corpus::TokenBatch;
use mpq_core::model::ModelSpec;
use mpq_core::ParamVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_lstm() -> ModelSpec {
    ModelSpec::lstm(4, 2, 1)
}

pub fn tiny_transformer() -> ModelSpec {
    let mut s = ModelSpec::transformer(4, 4, 1, 2);
    s.ff_dim = 4;
    s.max_context = 4;
    s
}

pub fn random_batch(vocab: usize, seqs: usize, len: usize, seed: u64) -> TokenBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    TokenBatch::new(
        (0..seqs)
            .map(|i| (0..len - (i % 2)).map(|_| rng.gen_range(0..vocab)).collect())
            .collect(),
    )
    .unwrap()
}

/// Central finite-difference gradient of `f`.
pub fn fd_grad(params: &ParamVector, eps: f64, f: impl Fn(&ParamVector) -> f64) -> Vec<f64> {
    let flat = params.flatten();
    (0..flat.len())
        .map(|i| {
            let mut p = flat.clone();
            p[i] += eps;
            let up = f(&params.unflatten(&p).unwrap());
            p[i] -= 2.0 * eps;
            let down = f(&params.unflatten(&p).unwrap());
            (up - down) / (2.0 * eps)
        })
        .collect()
}

pub fn assert_rel_close(a: &[f64], b: &[f64], rel: f64, abs: f64, what: &str) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        let tol = rel * x.abs().max(y.abs()) + abs;
        assert!((x - y).abs() <= tol, "{what}[{i}]: {x} vs {y}");
    }
}

/// Exhaustive nearest-code scan with the documented tie rule.
pub fn argmin_code_oracle(theta: f64, bits: u8, alpha: f64) -> i8 {
    let codes: Vec<i32> = if bits == 1 {
        vec![-1, 1]
    } else {
        let m = (1i32 << (bits - 1)) - 1;
        (-m..=m).collect()
    };
    let mut best: Option<(f64, i32)> = None;
    for c in codes {
        let d = (theta - alpha * c as f64).abs();
        let take = match best {
            None => true,
            Some((bd, bc)) => d < bd || (d == bd && (c.abs(), c) < (bc.abs(), bc)),
        };
        if take {
            best = Some((d, c));
        }
    }
    best.unwrap().1 as i8
}

/// Minimizer of `‖x - a V‖²` found by bisection on the derivative sign.
pub fn scale_oracle(x: &[f64], v: &[i8]) -> f64 {
    let deriv = |a: f64| -> f64 { x.iter().zip(v).map(|(xi, &vi)| vi as f64 * (a * vi as f64 - xi)).sum() };
    let bound = x.iter().map(|t| t.abs()).sum::<f64>() + 1.0;
    let (mut lo, mut hi) = (-bound, bound);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            break;
        }
        if deriv(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

/// `L(θ) = ½ Σ a_i θ_i² − b·θ` over a single flat tensor.
pub struct Quadratic {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl mpq_core::grad::Objective for Quadratic {
    fn loss_and_grad(&self, p: &ParamVector) -> mpq_core::Result<(f64, ParamVector)> {
        let x = p.flatten();
        let loss = x.iter().zip(&self.a).zip(&self.b).map(|((x, a), b)| 0.5 * a * x * x - b * x).sum();
        let g: Vec<f64> = x.iter().zip(&self.a).zip(&self.b).map(|((x, a), b)| a * x - b).collect();
        Ok((loss, p.unflatten(&g)?))
    }
}

pub fn flat_params(v: &[f64]) -> ParamVector {
    ParamVector::new(vec![("w".into(), mpq_core::Tensor::new(vec![v.len()], v.to_vec()).unwrap())]).unwrap()
}

/// A small word corpus split into train and validation parts.
pub fn toy_corpus(lines: usize) -> (mpq_core::corpus::Vocab, mpq_core::corpus::Corpus, mpq_core::corpus::Corpus) {
    use mpq_core::corpus::{synthetic_text, Corpus, TokenMode, Vocab};
    let text = synthetic_text(5, lines);
    let vtext = synthetic_text(6, lines / 5 + 1);
    let vocab = Vocab::build(&text, TokenMode::Word, None, 1).unwrap();
    let train = Corpus::from_text(&text, &vocab, TokenMode::Word);
    let valid = Corpus::from_text(&vtext, &vocab, TokenMode::Word);
    (vocab, train, valid)
}
