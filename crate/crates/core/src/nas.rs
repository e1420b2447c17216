//! Differentiable mixed-precision search: each cluster's weights are a
//! softmax-weighted mix of its quantized branches, with a bit penalty.
//!
//! Every branch enters the network through a linear map (projection or
//! embedding lookup), so mixing branch outputs equals running the network
//! once on the mixed weights.

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, TokenBatch};
use crate::error::{Error, Result};
use crate::model::{cluster_layout, forward_backward, ClusterLayout, ModelSpec};
use crate::quant::{PrecisionAssignment, BIT_WIDTHS};
use crate::sensitivity::PrototypeSet;
use crate::tensor::ParamVector;

#[derive(Debug, Clone)]
pub struct Supernet {
    pub spec: ModelSpec,
    layout: ClusterLayout,
    /// Dequantized branch weights, indexed like `BIT_WIDTHS`.
    branches: Vec<ParamVector>,
    /// Architecture logits per cluster.
    pub logits: Vec<[f64; 4]>,
    pub beta: f64,
}

pub fn softmax4(a: &[f64; 4]) -> [f64; 4] {
    let m = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = a.map(|x| (x - m).exp());
    let s: f64 = e.iter().sum();
    e.map(|x| x / s)
}

impl Supernet {
    /// Uniform logits over the prototypes' branches.
    pub fn new(prototypes: &PrototypeSet, beta: f64) -> Result<Self> {
        prototypes.check_complete()?;
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(Error::config("beta must be >= 0"));
        }
        let layout = cluster_layout(&prototypes.spec);
        let branches = BIT_WIDTHS.iter().map(|b| prototypes.get(*b).cloned()).collect::<Result<Vec<_>>>()?;
        Ok(Supernet {
            spec: prototypes.spec.clone(),
            logits: vec![[0.0; 4]; layout.len()],
            layout,
            branches,
            beta,
        })
    }

    pub fn layout(&self) -> &ClusterLayout {
        &self.layout
    }

    pub fn selection_weights(&self) -> Vec<[f64; 4]> {
        self.logits.iter().map(softmax4).collect()
    }

    /// `Σ_n softmax(a)_n W_n` per cluster.
    pub fn effective_params(&self) -> ParamVector {
        let mut p = self.branches[0].zeros_like();
        for (c, w) in self.layout.clusters.iter().zip(self.selection_weights()) {
            let dst = c.slice_mut(&mut p);
            for (n, br) in self.branches.iter().enumerate() {
                for (d, s) in dst.iter_mut().zip(c.slice(br)) {
                    *d += w[n] * s;
                }
            }
        }
        p
    }

    /// `β Σ_l Σ_n softmax(a^l)_n √n`.
    pub fn penalty(&self) -> f64 {
        let roots = BIT_WIDTHS.map(|b| (b as f64).sqrt());
        self.beta * self.selection_weights().iter().map(|w| (0..4).map(|n| w[n] * roots[n]).sum::<f64>()).sum::<f64>()
    }

    /// Per-cluster argmax of the selection weights; ties go to fewer bits.
    pub fn assignment(&self) -> PrecisionAssignment {
        let bits = self
            .logits
            .iter()
            .map(|a| {
                let mut best = 0;
                for n in 1..4 {
                    if a[n] > a[best] {
                        best = n;
                    }
                }
                BIT_WIDTHS[best]
            })
            .collect::<Vec<_>>();
        PrecisionAssignment::from_bits(&self.layout, &bits).expect("layout-aligned widths")
    }
}

/// Cross entropy of the mixed network.
pub fn supernet_forward(net: &Supernet, batch: &TokenBatch) -> Result<f64> {
    Ok(forward_backward(&net.spec, &net.effective_params(), batch)?.0)
}

pub fn nas_objective(net: &Supernet, batch: &TokenBatch) -> Result<f64> {
    Ok(supernet_forward(net, batch)? + net.penalty())
}

/// Objective and its gradient with respect to every logit.
pub fn nas_gradient(net: &Supernet, batch: &TokenBatch) -> Result<(f64, Vec<[f64; 4]>)> {
    let (ce, g) = forward_backward(&net.spec, &net.effective_params(), batch)?;
    let roots = BIT_WIDTHS.map(|b| (b as f64).sqrt());
    let mut grads = Vec::with_capacity(net.logits.len());
    for (c, w) in net.layout.clusters.iter().zip(net.selection_weights()) {
        let gc = c.slice(&g);
        let d: [f64; 4] = std::array::from_fn(|n| gc.iter().zip(c.slice(&net.branches[n])).map(|(a, b)| a * b).sum());
        let mean_d: f64 = (0..4).map(|n| w[n] * d[n]).sum();
        let mean_r: f64 = (0..4).map(|n| w[n] * roots[n]).sum();
        grads.push(std::array::from_fn(|n| w[n] * (d[n] - mean_d) + net.beta * w[n] * (roots[n] - mean_r)));
    }
    Ok((ce + net.penalty(), grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Objective is logged every this many steps.
    pub log_every: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig { steps: 2000, lr: 0.01, batch_size: 32, seed: 0, log_every: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub beta: f64,
    pub assignment: PrecisionAssignment,
    pub avg_bits: f64,
    pub logits: Vec<[f64; 4]>,
    /// `(step, objective)` samples.
    pub history: Vec<(usize, f64)>,
}

/// Gradient descent on the logits from uniform; branch weights stay frozen.
pub fn search(net: &mut Supernet, corpus: &Corpus, cfg: &SearchConfig) -> Result<SearchResult> {
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::config("search needs positive batch_size and lr"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::new();
    for step in 0..cfg.steps {
        let batch = corpus.sample_batch(cfg.batch_size, net.spec.max_context, &mut rng)?;
        let (obj, grads) = nas_gradient(net, &batch)?;
        for (a, g) in net.logits.iter_mut().zip(&grads) {
            for n in 0..4 {
                a[n] -= cfg.lr * g[n];
            }
        }
        if !obj.is_finite() || net.logits.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::Diverged(format!("search step {step}: objective {obj}, logits {:?}", net.logits)));
        }
        if cfg.log_every > 0 && step % cfg.log_every == 0 {
            history.push((step, obj));
        }
    }
    let assignment = net.assignment();
    let avg_bits = assignment.avg_bits(&net.layout);
    info!("search beta={} avg_bits={avg_bits:.4}", net.beta);
    Ok(SearchResult { beta: net.beta, assignment, avg_bits, logits: net.logits.clone(), history })
}

/// Searches with `beta`, starting from uniform logits.
pub fn search_with_beta(prototypes: &PrototypeSet, corpus: &Corpus, beta: f64, cfg: &SearchConfig) -> Result<SearchResult> {
    let mut net = Supernet::new(prototypes, beta)?;
    search(&mut net, corpus, cfg)
}

/// Bisects `β` on a log scale for the largest achieved average precision not above `target`.
pub fn search_for_target(
    prototypes: &PrototypeSet,
    corpus: &Corpus,
    target: f64,
    bisect_steps: usize,
    cfg: &SearchConfig,
) -> Result<SearchResult> {
    if !(1.0..=8.0).contains(&target) {
        return Err(Error::config(format!("target average bits {target} outside [1, 8]")));
    }
    let run = |beta: f64| search_with_beta(prototypes, corpus, beta, cfg);
    let free = run(0.0)?;
    if free.avg_bits <= target {
        return Ok(free);
    }
    let mut lo = 1e-6;
    let mut hi_result = None;
    let mut beta = 1e-5;
    for _ in 0..24 {
        let r = run(beta)?;
        if r.avg_bits <= target {
            hi_result = Some(r);
            break;
        }
        lo = beta;
        beta *= 4.0;
    }
    let mut best = hi_result.ok_or_else(|| Error::config(format!("no beta reached {target} average bits")))?;
    let mut hi = best.beta;
    for _ in 0..bisect_steps {
        let mid = (lo * hi).sqrt();
        let r = run(mid)?;
        if r.avg_bits <= target {
            hi = mid;
            if r.avg_bits >= best.avg_bits {
                best = r;
            }
        } else {
            lo = mid;
        }
    }
    Ok(best)
}
