//! ADMM training of quantized language models: extra-gradient update of the
//! full-precision weights, alternating scale/code fit, multiplier update.
//! Also hosts the offline (post-training) quantizer and the modified-BP
//! baseline trainer.

use log::{debug, info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, TokenBatch};
use crate::error::{Error, Result};
use crate::grad::Objective;
use crate::model::{cluster_layout, forward_backward, perplexity, BatchObjective, ClusterLayout, ModelSpec};
use crate::packio::QuantizedModel;
use crate::quant::{self, max_code, PrecisionAssignment, QuantTable, QuantizedCluster};
use crate::tensor::ParamVector;

/// Initial scale of every quantization table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum AlphaInit {
    /// Best of a geometric grid below `max|x| / max_code`, by quantization error.
    Auto,
    Fixed(f64),
}

impl std::str::FromStr for AlphaInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(AlphaInit::Auto);
        }
        s.parse::<f64>()
            .ok()
            .filter(|a| *a > 0.0 && a.is_finite())
            .map(AlphaInit::Fixed)
            .ok_or_else(|| Error::config(format!("alpha_init must be \"auto\" or a positive number, got {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdmmConfig {
    pub gamma: f64,
    pub eta1: f64,
    pub eta2: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    /// Relative improvement of the inner objective below which it stops.
    pub inner_tol: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub alpha_init: AlphaInit,
    /// Minibatch steps per outer iteration; `None` means one epoch.
    pub steps_per_outer: Option<usize>,
    /// Outer iterations without validation improvement before stopping.
    pub patience: usize,
    /// Abort once validation perplexity exceeds this multiple of its initial value.
    pub divergence_factor: f64,
    /// Optional global gradient-norm clip.
    pub clip_norm: Option<f64>,
    /// Step size of the modified-BP baseline.
    pub modbp_lr: f64,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        AdmmConfig {
            gamma: 1e-3,
            eta1: 0.02,
            eta2: 0.001,
            max_outer: 20,
            max_inner: 20,
            inner_tol: 1e-9,
            batch_size: 32,
            seed: 0,
            alpha_init: AlphaInit::Auto,
            steps_per_outer: None,
            patience: 3,
            divergence_factor: 10.0,
            clip_norm: None,
            modbp_lr: 0.02,
        }
    }
}

impl AdmmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::config("gamma must be >= 0"));
        }
        if !(self.eta1 >= 0.0 && self.eta2 >= 0.0 && self.modbp_lr >= 0.0) {
            return Err(Error::config("learning rates must be >= 0"));
        }
        if self.max_inner == 0 {
            return Err(Error::config("max_inner must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if self.steps_per_outer == Some(0) {
            return Err(Error::config("steps_per_outer must be >= 1"));
        }
        Ok(())
    }
}

/// `F_ce(Θ) + γ/2 ‖Θ − Z + λ‖² − γ/2 ‖λ‖²` for a frozen quantized reference `Z`.
pub fn augmented_loss(
    obj: &(impl Objective + ?Sized),
    theta: &ParamVector,
    reference: &ParamVector,
    lambda: &ParamVector,
    gamma: f64,
) -> Result<f64> {
    let ce = obj.loss(theta)?;
    let mut shifted = theta.axpy(-1.0, reference);
    shifted.add_scaled(1.0, lambda);
    let v = ce + 0.5 * gamma * (shifted.norm_sq() - lambda.norm_sq());
    if !v.is_finite() {
        return Err(Error::numeric("augmented_loss", format!("value {v}")));
    }
    Ok(v)
}

/// `∇F_ce(Θ) + γ (Θ − Z + λ)`.
pub fn augmented_grad(
    obj: &(impl Objective + ?Sized),
    theta: &ParamVector,
    reference: &ParamVector,
    lambda: &ParamVector,
    gamma: f64,
) -> Result<(f64, ParamVector)> {
    let (ce, mut g) = obj.loss_and_grad(theta)?;
    if gamma != 0.0 {
        g.add_scaled(gamma, theta);
        g.add_scaled(-gamma, reference);
        g.add_scaled(gamma, lambda);
    }
    if !g.is_finite() {
        return Err(Error::numeric("extra_gradient_step", "non-finite gradient"));
    }
    Ok((ce, g))
}

fn clip(g: &mut ParamVector, clip_norm: Option<f64>) {
    if let Some(c) = clip_norm {
        let n = g.norm_sq().sqrt();
        if n > c {
            g.scale(c / n);
        }
    }
}

/// Lookahead `Θ̄ = Θ − η1 ∇L(Θ)`, then commit `Θ − η2 ∇L(Θ̄)`. Returns the
/// new weights and the cross entropy at `Θ`.
pub fn extra_gradient_step(
    obj: &(impl Objective + ?Sized),
    theta: &ParamVector,
    reference: &ParamVector,
    lambda: &ParamVector,
    cfg: &AdmmConfig,
) -> Result<(ParamVector, f64)> {
    let (ce, mut g) = augmented_grad(obj, theta, reference, lambda, cfg.gamma)?;
    clip(&mut g, cfg.clip_norm);
    let look = theta.axpy(-cfg.eta1, &g);
    let (_, mut g2) = augmented_grad(obj, &look, reference, lambda, cfg.gamma)?;
    clip(&mut g2, cfg.clip_norm);
    Ok((theta.axpy(-cfg.eta2, &g2), ce))
}

/// Result of the alternating scale/code fit on one cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct InnerResult {
    pub scale: f64,
    pub codes: Vec<i8>,
    /// `‖x − αV‖²` before the first and after every iteration.
    pub objectives: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Alternates `fit_scale` and `quantize_nearest` on `x = Θ + λ` starting from `scale`.
pub fn inner_loop_update(x: &[f64], bits: u8, scale: f64, max_inner: usize, inner_tol: f64) -> Result<InnerResult> {
    let mut alpha = scale;
    let mut codes = quant::quantize_nearest(x, &QuantTable::new(bits, alpha)?)?;
    let mut obj = quant::quant_error(x, &codes, alpha);
    let mut objectives = vec![obj];
    for it in 1..=max_inner.max(1) {
        let fitted = match quant::fit_scale(x, &codes) {
            Ok(a) if a > 0.0 && a.is_finite() => a,
            Ok(_) | Err(Error::DegenerateCodes) => {
                warn!("inner loop: degenerate codes, keeping scale {alpha}");
                return Ok(InnerResult { scale: alpha, codes, objectives, iterations: it, converged: true });
            }
            Err(e) => return Err(e),
        };
        let next = quant::quantize_nearest(x, &QuantTable::new(bits, fitted)?)?;
        let next_obj = quant::quant_error(x, &next, fitted);
        let unchanged = next == codes;
        let small = obj - next_obj <= inner_tol * obj;
        alpha = fitted;
        codes = next;
        obj = next_obj;
        objectives.push(obj);
        if unchanged || small {
            return Ok(InnerResult { scale: alpha, codes, objectives, iterations: it, converged: true });
        }
    }
    Ok(InnerResult { scale: alpha, codes, objectives, iterations: max_inner, converged: false })
}

/// `λ + Θ − Z`.
pub fn multiplier_update(lambda: &ParamVector, theta: &ParamVector, reference: &ParamVector) -> ParamVector {
    let mut l = lambda.clone();
    l.add_scaled(1.0, theta);
    l.add_scaled(-1.0, reference);
    l
}

/// Starting scale for a cluster.
pub fn initial_scale(x: &[f64], bits: u8, init: AlphaInit) -> f64 {
    match init {
        AlphaInit::Fixed(a) => a,
        AlphaInit::Auto => {
            let max = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if max == 0.0 {
                return 1.0;
            }
            let top = max / max_code(bits) as f64;
            let mut best = (f64::INFINITY, top);
            for j in 0..16 {
                let a = top * 0.8f64.powi(j);
                let t = QuantTable { bits, scale: a };
                let err: f64 = x.iter().map(|&v| (v - a * quant::nearest_code(v, &t) as f64).powi(2)).sum();
                if err < best.0 {
                    best = (err, a);
                }
            }
            best.1
        }
    }
}

/// Per-cluster table state of an ADMM run.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterState {
    pub bits: u8,
    pub scale: f64,
    pub codes: Vec<i8>,
}

#[derive(Debug, Clone)]
pub struct AdmmState {
    pub theta: ParamVector,
    pub lambda: ParamVector,
    pub clusters: Vec<ClusterState>,
    /// Dequantized reference `Z = f(Θ)`.
    pub reference: ParamVector,
    pub k: usize,
    pub val_history: Vec<f64>,
}

impl AdmmState {
    /// Fresh state: `λ = 0` and tables fitted to `theta`.
    pub fn new(layout: &ClusterLayout, theta: ParamVector, assignment: &PrecisionAssignment, cfg: &AdmmConfig) -> Result<Self> {
        let lambda = theta.zeros_like();
        let scales = layout
            .clusters
            .iter()
            .zip(&assignment.entries)
            .map(|(c, (_, b))| initial_scale(c.slice(&theta), *b, cfg.alpha_init))
            .collect::<Vec<_>>();
        AdmmState::resume(layout, theta, lambda, assignment, &scales, cfg)
    }

    /// State with given multipliers and warm-start scales.
    pub fn resume(
        layout: &ClusterLayout,
        theta: ParamVector,
        lambda: ParamVector,
        assignment: &PrecisionAssignment,
        scales: &[f64],
        cfg: &AdmmConfig,
    ) -> Result<Self> {
        assignment.validate(layout)?;
        theta.check_structure(&lambda)?;
        if scales.len() != layout.len() || scales.iter().any(|a| !(*a > 0.0)) {
            return Err(Error::config("one positive scale per cluster required"));
        }
        let mut s = AdmmState {
            reference: theta.zeros_like(),
            clusters: assignment
                .entries
                .iter()
                .zip(scales)
                .map(|((_, b), a)| ClusterState { bits: *b, scale: *a, codes: Vec::new() })
                .collect(),
            theta,
            lambda,
            k: 0,
            val_history: Vec::new(),
        };
        s.requantize(layout, cfg)?;
        Ok(s)
    }

    /// Runs the inner loop on every cluster of `Θ + λ` and rebuilds `Z`.
    /// Scales are rounded to `f32` so `Z` matches the packed model exactly.
    pub fn requantize(&mut self, layout: &ClusterLayout, cfg: &AdmmConfig) -> Result<()> {
        for (c, st) in layout.clusters.iter().zip(self.clusters.iter_mut()) {
            let x: Vec<f64> = c.slice(&self.theta).iter().zip(c.slice(&self.lambda)).map(|(t, l)| t + l).collect();
            let r = inner_loop_update(&x, st.bits, st.scale, cfg.max_inner, cfg.inner_tol)?;
            if !r.converged {
                debug!("inner loop for {} stopped after {} iterations", c.id, r.iterations);
            }
            st.scale = r.scale as f32 as f64;
            st.codes = r.codes;
            c.slice_mut(&mut self.reference).copy_from_slice(&quant::dequantize(&st.codes, st.scale));
        }
        Ok(())
    }

    pub fn residual_norm(&self) -> f64 {
        self.theta.axpy(-1.0, &self.reference).norm_sq().sqrt()
    }

    pub fn scales(&self) -> Vec<f64> {
        self.clusters.iter().map(|c| c.scale).collect()
    }

    pub fn quantized_clusters(&self, layout: &ClusterLayout) -> Result<Vec<QuantizedCluster>> {
        layout
            .clusters
            .iter()
            .zip(&self.clusters)
            .map(|(c, s)| QuantizedCluster::new(c.id.clone(), s.bits, s.scale, s.codes.clone()))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub k: usize,
    pub train_ce: f64,
    pub val_ppl: f64,
    pub alphas: Vec<f64>,
    pub residual_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub trainer: String,
    pub initial_val_ppl: f64,
    pub iterations: Vec<IterationLog>,
    /// Iteration whose weights were returned (0 = before any training).
    pub best_k: usize,
    pub best_val_ppl: f64,
}

impl TrainingReport {
    /// One JSON object per outer iteration.
    pub fn to_json_lines(&self) -> String {
        self.iterations
            .iter()
            .map(|l| serde_json::to_string(l).expect("plain data serializes") + "\n")
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct AdmmOutcome {
    pub model: QuantizedModel,
    /// State at the returned iterate, for continued training.
    pub state: AdmmState,
    pub report: TrainingReport,
}

fn epoch_batches(train: &Corpus, spec: &ModelSpec, cfg: &AdmmConfig, rng: &mut ChaCha8Rng) -> Vec<TokenBatch> {
    let mut batches = train.shuffled_batches(cfg.batch_size, spec.max_context, rng);
    if let Some(s) = cfg.steps_per_outer {
        while batches.len() < s {
            let more = train.shuffled_batches(cfg.batch_size, spec.max_context, rng);
            batches.extend(more);
        }
        batches.truncate(s);
    }
    batches
}

/// Outer-loop bookkeeping shared by the ADMM and modified-BP trainers.
struct Tracker {
    report: TrainingReport,
    best: Option<AdmmState>,
    stale: usize,
}

impl Tracker {
    fn new(trainer: &str, initial: &AdmmState, ppl: f64) -> Self {
        Tracker {
            report: TrainingReport {
                trainer: trainer.to_string(),
                initial_val_ppl: ppl,
                iterations: Vec::new(),
                best_k: 0,
                best_val_ppl: ppl,
            },
            best: Some(initial.clone()),
            stale: 0,
        }
    }

    /// Records an iteration; returns whether to continue.
    fn record(&mut self, state: &AdmmState, log: IterationLog, cfg: &AdmmConfig) -> Result<bool> {
        info!("{}", serde_json::to_string(&log).expect("plain data serializes"));
        let ppl = log.val_ppl;
        self.report.iterations.push(log);
        if !(ppl <= cfg.divergence_factor * self.report.initial_val_ppl) {
            return Err(Error::Diverged(format!(
                "{} validation perplexity {ppl} exceeds {}x initial {}; history {}",
                self.report.trainer,
                cfg.divergence_factor,
                self.report.initial_val_ppl,
                self.report.to_json_lines().replace('\n', " ")
            )));
        }
        if ppl < self.report.best_val_ppl {
            self.report.best_val_ppl = ppl;
            self.report.best_k = state.k;
            self.best = Some(state.clone());
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        Ok(self.stale < cfg.patience.max(1))
    }

    fn finish(self, spec: &ModelSpec, layout: &ClusterLayout, vocab_hash: u64) -> Result<AdmmOutcome> {
        let state = self.best.expect("initial state recorded");
        let model = QuantizedModel::new(spec.clone(), vocab_hash, state.quantized_clusters(layout)?)?;
        Ok(AdmmOutcome { model, state, report: self.report })
    }
}

/// ADMM training from `state`. With `max_outer = 0` the result is the
/// offline quantization of the starting weights.
pub fn train_quantized_from(
    spec: &ModelSpec,
    train: &Corpus,
    valid: &Corpus,
    mut state: AdmmState,
    cfg: &AdmmConfig,
    vocab_hash: u64,
) -> Result<AdmmOutcome> {
    cfg.validate()?;
    let layout = cluster_layout(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ppl0 = perplexity(spec, &state.reference, valid)?;
    state.val_history.push(ppl0);
    let mut tracker = Tracker::new("admm", &state, ppl0);
    for _ in 0..cfg.max_outer {
        let mut ce_sum = 0.0;
        let batches = epoch_batches(train, spec, cfg, &mut rng);
        for batch in &batches {
            let obj = BatchObjective { spec, batch };
            let (theta, ce) = extra_gradient_step(&obj, &state.theta, &state.reference, &state.lambda, cfg)?;
            state.theta = theta;
            ce_sum += ce;
        }
        state.requantize(&layout, cfg)?;
        state.lambda = multiplier_update(&state.lambda, &state.theta, &state.reference);
        state.k += 1;
        let val_ppl = perplexity(spec, &state.reference, valid)?;
        state.val_history.push(val_ppl);
        let log = IterationLog {
            k: state.k,
            train_ce: ce_sum / batches.len().max(1) as f64,
            val_ppl,
            alphas: state.scales(),
            residual_norm: state.residual_norm(),
        };
        if !tracker.record(&state, log, cfg)? {
            break;
        }
    }
    tracker.finish(spec, &layout, vocab_hash)
}

/// ADMM training of a model quantized per `assignment`, starting from `params`.
pub fn train_quantized(
    spec: &ModelSpec,
    train: &Corpus,
    valid: &Corpus,
    params: ParamVector,
    assignment: &PrecisionAssignment,
    cfg: &AdmmConfig,
    vocab_hash: u64,
) -> Result<AdmmOutcome> {
    cfg.validate()?;
    let layout = cluster_layout(spec);
    spec.check_params(&params)?;
    let state = AdmmState::new(&layout, params, assignment, cfg)?;
    train_quantized_from(spec, train, valid, state, cfg, vocab_hash)
}

/// Post-training quantization: the scale/code alternation on fixed weights.
pub fn quantize_offline(
    spec: &ModelSpec,
    params: &ParamVector,
    assignment: &PrecisionAssignment,
    cfg: &AdmmConfig,
    vocab_hash: u64,
) -> Result<QuantizedModel> {
    let layout = cluster_layout(spec);
    spec.check_params(params)?;
    let state = AdmmState::new(&layout, params.clone(), assignment, cfg)?;
    QuantizedModel::new(spec.clone(), vocab_hash, state.quantized_clusters(&layout)?)
}

/// Modified back-propagation baseline: forward and backward at the
/// quantized weights, update applied to the full-precision copy.
pub fn train_modified_bp(
    spec: &ModelSpec,
    train: &Corpus,
    valid: &Corpus,
    params: ParamVector,
    assignment: &PrecisionAssignment,
    cfg: &AdmmConfig,
    vocab_hash: u64,
) -> Result<AdmmOutcome> {
    cfg.validate()?;
    let layout = cluster_layout(spec);
    spec.check_params(&params)?;
    let mut state = AdmmState::new(&layout, params, assignment, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ppl0 = perplexity(spec, &state.reference, valid)?;
    state.val_history.push(ppl0);
    let mut tracker = Tracker::new("modbp", &state, ppl0);
    for _ in 0..cfg.max_outer {
        let mut ce_sum = 0.0;
        let batches = epoch_batches(train, spec, cfg, &mut rng);
        for batch in &batches {
            let (ce, mut g) = forward_backward(spec, &state.reference, batch)?;
            clip(&mut g, cfg.clip_norm);
            state.theta.add_scaled(-cfg.modbp_lr, &g);
            state.requantize(&layout, cfg)?;
            ce_sum += ce;
        }
        state.k += 1;
        let val_ppl = perplexity(spec, &state.reference, valid)?;
        state.val_history.push(val_ppl);
        let log = IterationLog {
            k: state.k,
            train_ce: ce_sum / batches.len().max(1) as f64,
            val_ppl,
            alphas: state.scales(),
            residual_norm: state.residual_norm(),
        };
        if !tracker.record(&state, log, cfg)? {
            break;
        }
    }
    tracker.finish(spec, &layout, vocab_hash)
}
