//! Full-precision baseline training with Adam.

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::model::{forward_backward, perplexity, ModelSpec};
use crate::tensor::ParamVector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub clip_norm: Option<f64>,
    /// Plateaus tolerated before stopping; each one halves the learning rate
    /// and restarts from the best weights.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 10, lr: 3e-3, batch_size: 32, seed: 0, clip_norm: Some(5.0), patience: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_ce: f64,
    pub val_ppl: f64,
}

struct Adam {
    m: ParamVector,
    v: ParamVector,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(p: &ParamVector) -> Self {
        Adam { m: p.zeros_like(), v: p.zeros_like(), t: 0 }
    }

    fn step(&mut self, params: &mut ParamVector, grads: &ParamVector, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..params.len() {
            let g = grads.tensor(i).data();
            let m = self.m.tensor_mut(i).data_mut();
            for (m, g) in m.iter_mut().zip(g) {
                *m = Self::B1 * *m + (1.0 - Self::B1) * g;
            }
            let v = self.v.tensor_mut(i).data_mut();
            for (v, g) in v.iter_mut().zip(g) {
                *v = Self::B2 * *v + (1.0 - Self::B2) * g * g;
            }
            let (m, v) = (self.m.tensor(i).data(), self.v.tensor(i).data());
            for ((p, m), v) in params.tensor_mut(i).data_mut().iter_mut().zip(m).zip(v) {
                *p -= lr * (m / c1) / ((v / c2).sqrt() + Self::EPS);
            }
        }
    }
}

/// Trains from `init_seed` weights; returns the best-validation weights and per-epoch logs.
pub fn pretrain(
    spec: &ModelSpec,
    train: &Corpus,
    valid: &Corpus,
    init_seed: u64,
    cfg: &TrainConfig,
) -> Result<(ParamVector, Vec<EpochLog>)> {
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::config("batch_size and lr must be positive"));
    }
    let mut params = spec.init_params(init_seed)?;
    let mut opt = Adam::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best = (perplexity(spec, &params, valid)?, params.clone());
    let mut logs = Vec::new();
    let mut stale = 0;
    let mut lr = cfg.lr;
    for epoch in 1..=cfg.epochs {
        let batches = train.shuffled_batches(cfg.batch_size, spec.max_context, &mut rng);
        let mut ce = 0.0;
        for b in &batches {
            let (loss, mut g) = forward_backward(spec, &params, b)?;
            if let Some(c) = cfg.clip_norm {
                let n = g.norm_sq().sqrt();
                if n > c {
                    g.scale(c / n);
                }
            }
            opt.step(&mut params, &g, lr);
            ce += loss;
        }
        let val_ppl = perplexity(spec, &params, valid)?;
        let log = EpochLog { epoch, train_ce: ce / batches.len().max(1) as f64, val_ppl };
        info!("{}", serde_json::to_string(&log).expect("plain data serializes"));
        logs.push(log);
        if val_ppl < best.0 {
            best = (val_ppl, params.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience.max(1) {
                break;
            }
            params = best.1.clone();
            lr *= 0.5;
        }
    }
    Ok((best.1, logs))
}
