//! Per-cluster quantization sensitivity: KL divergence of one-cluster hybrid
//! models, and Hessian-trace weighted quantization error.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, TokenBatch};
use crate::error::{Error, Result};
use crate::grad::{default_hvp_eps, hvp, Objective};
use crate::model::{cluster_layout, target_log_probs, BatchObjective, ClusterLayout, ModelSpec, WeightCluster};
use crate::packio::QuantizedModel;
use crate::quant::BIT_WIDTHS;
use crate::tensor::ParamVector;

/// Floor applied to both distributions inside the KL log ratio.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Kl,
    Hessian,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Kl => "kl",
            Method::Hessian => "hes",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kl" => Ok(Method::Kl),
            "hes" | "hessian" => Ok(Method::Hessian),
            _ => Err(Error::config(format!("unknown sensitivity method {s:?} (kl|hes)"))),
        }
    }
}

/// Which data the sensitivity is measured on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleSpec {
    /// Randomly drawn minibatches; `None` uses every training batch in order.
    pub num_batches: Option<usize>,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SampleSpec {
    fn default() -> Self {
        SampleSpec { num_batches: Some(1), batch_size: 32, seed: 0 }
    }
}

impl SampleSpec {
    pub fn batches(&self, corpus: &Corpus, max_len: usize) -> Result<Vec<TokenBatch>> {
        match self.num_batches {
            None => {
                let b = corpus.batches(self.batch_size, max_len);
                if b.is_empty() {
                    return Err(Error::config("empty sensitivity corpus"));
                }
                Ok(b)
            }
            Some(0) => Err(Error::config("num_batches must be >= 1")),
            Some(k) => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                (0..k).map(|_| corpus.sample_batch(self.batch_size, max_len, &mut rng)).collect()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Probe {
    Rademacher,
    Gaussian,
    /// Standard basis vectors over the cluster; `m` is ignored. Exact for quadratics.
    Basis,
}

impl std::str::FromStr for Probe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rademacher" => Ok(Probe::Rademacher),
            "gaussian" => Ok(Probe::Gaussian),
            "basis" => Ok(Probe::Basis),
            _ => Err(Error::config(format!("unknown probe {s:?} (rademacher|gaussian|basis)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HutchinsonConfig {
    pub samples: usize,
    pub probe: Probe,
    /// Finite-difference step; `None` picks one from the weight magnitude.
    pub eps: Option<f64>,
}

impl Default for HutchinsonConfig {
    fn default() -> Self {
        HutchinsonConfig { samples: 50, probe: Probe::Rademacher, eps: None }
    }
}

/// Uniform-precision quantized models keyed by bit-width, as dequantized weights.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    pub spec: ModelSpec,
    pub weights: BTreeMap<u8, ParamVector>,
}

impl PrototypeSet {
    pub fn from_models(models: &[QuantizedModel]) -> Result<Self> {
        let first = models.first().ok_or_else(|| Error::config("no prototypes given"))?;
        let mut weights = BTreeMap::new();
        for m in models {
            if m.spec != first.spec || m.vocab_hash != first.vocab_hash {
                return Err(Error::config("prototypes disagree on architecture or vocabulary"));
            }
            let bits = m.clusters[0].bits;
            if m.clusters.iter().any(|c| c.bits != bits) {
                return Err(Error::config("prototype is not uniformly quantized"));
            }
            if weights.insert(bits, m.to_params()?).is_some() {
                return Err(Error::config(format!("two {bits}-bit prototypes")));
            }
        }
        Ok(PrototypeSet { spec: first.spec.clone(), weights })
    }

    pub fn get(&self, bits: u8) -> Result<&ParamVector> {
        self.weights.get(&bits).ok_or_else(|| Error::config(format!("missing {bits}-bit prototype")))
    }

    pub fn check_complete(&self) -> Result<()> {
        for b in BIT_WIDTHS {
            self.get(b)?;
        }
        Ok(())
    }
}

/// `full` with cluster `c` copied from `replacement`.
pub fn hybrid(full: &ParamVector, replacement: &ParamVector, c: &WeightCluster) -> ParamVector {
    let mut h = full.clone();
    c.slice_mut(&mut h).copy_from_slice(c.slice(replacement));
    h
}

/// `Σ_positions Σ_w p (ln p − ln q)` over log distributions, with both floored.
/// Accumulated as `p ln(p/q) − p + q`, whose terms are each non-negative.
pub fn kl_sum(full: &[Vec<f64>], other: &[Vec<f64>]) -> Result<f64> {
    if full.len() != other.len() {
        return Err(Error::config("kl: position count mismatch"));
    }
    let mut total = 0.0;
    for (lp, lq) in full.iter().zip(other) {
        for (&a, &b) in lp.iter().zip(lq) {
            let p = a.exp().max(PROB_FLOOR);
            let q = b.exp().max(PROB_FLOOR);
            let t = p * (p.ln() - q.ln()) - p + q;
            total += t.max(0.0);
        }
    }
    if !total.is_finite() {
        return Err(Error::numeric("kl_sensitivity", format!("value {total}")));
    }
    Ok(total)
}

/// KL divergence between the full model and the hybrid whose cluster `c`
/// comes from `prototype`, summed over every position of `batches`.
pub fn kl_sensitivity(
    spec: &ModelSpec,
    full: &ParamVector,
    prototype: &ParamVector,
    c: &WeightCluster,
    batches: &[TokenBatch],
) -> Result<f64> {
    let h = hybrid(full, prototype, c);
    let mut total = 0.0;
    for b in batches {
        total += kl_sum(&target_log_probs(spec, full, b)?, &target_log_probs(spec, &h, b)?)?;
    }
    Ok(total)
}

/// Trace estimate with its per-probe samples.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceEstimate {
    pub trace: f64,
    pub samples: Vec<f64>,
}

/// `(1/m) Σ zᵀ H z` with probes `z` supported on cluster `c`. Probe `j` uses
/// objective `objectives[j % len]`.
pub fn hutchinson_trace<O: Objective>(
    objectives: &[O],
    params: &ParamVector,
    c: &WeightCluster,
    cfg: &HutchinsonConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TraceEstimate> {
    if objectives.is_empty() {
        return Err(Error::config("hutchinson: no objective"));
    }
    let eps = cfg.eps.unwrap_or_else(|| default_hvp_eps(params));
    let m = match cfg.probe {
        Probe::Basis => c.count(),
        _ => cfg.samples,
    };
    if m == 0 {
        return Err(Error::config("hutchinson needs at least one sample"));
    }
    let mut samples = Vec::with_capacity(m);
    for j in 0..m {
        let mut v = params.zeros_like();
        {
            let z = c.slice_mut(&mut v);
            match cfg.probe {
                Probe::Rademacher => z.iter_mut().for_each(|x| *x = if rng.gen::<bool>() { 1.0 } else { -1.0 }),
                Probe::Gaussian => z.iter_mut().for_each(|x| *x = rng.sample(StandardNormal)),
                Probe::Basis => z[j] = 1.0,
            }
        }
        let hv = hvp(&objectives[j % objectives.len()], params, &v, eps)?;
        let s: f64 = c.slice(&v).iter().zip(c.slice(&hv)).map(|(a, b)| a * b).sum();
        if !s.is_finite() {
            return Err(Error::numeric("hutchinson_trace", format!("probe {j} gave {s}")));
        }
        samples.push(s);
    }
    let trace = match cfg.probe {
        Probe::Basis => samples.iter().sum(),
        _ => samples.iter().sum::<f64>() / m as f64,
    };
    Ok(TraceEstimate { trace, samples })
}

/// `Tr(H_c) · ‖f_n(Θ_c) − Θ_c‖²`.
pub fn hessian_sensitivity(trace: f64, full: &ParamVector, quantized: &ParamVector, c: &WeightCluster) -> f64 {
    let err: f64 = c.slice(full).iter().zip(c.slice(quantized)).map(|(a, b)| (a - b).powi(2)).sum();
    trace * err
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityEntry {
    pub cluster: String,
    pub bits: u8,
    pub omega: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub method: Method,
    pub sample: SampleSpec,
    /// Ordered by layout cluster, then bit-width.
    pub entries: Vec<SensitivityEntry>,
    /// Clusters whose curvature estimate came out negative.
    pub negative_trace: Vec<String>,
}

impl SensitivityReport {
    pub fn omega(&self, cluster: &str, bits: u8) -> Option<f64> {
        self.entries.iter().find(|e| e.cluster == cluster && e.bits == bits).map(|e| e.omega)
    }

    /// `table[i][j]` is Ω of layout cluster `i` at `BIT_WIDTHS[j]`.
    pub fn table(&self, layout: &ClusterLayout) -> Result<Vec<[f64; 4]>> {
        layout
            .clusters
            .iter()
            .map(|c| {
                let mut row = [0.0; 4];
                for (j, &b) in BIT_WIDTHS.iter().enumerate() {
                    row[j] = self
                        .omega(&c.id, b)
                        .ok_or_else(|| Error::config(format!("report lacks {} at {b} bits", c.id)))?;
                }
                Ok(row)
            })
            .collect()
    }

    /// Tab-separated `cluster bits omega method seed` rows after `#` metadata lines.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# method={}", self.method.name());
        let batches = self.sample.num_batches.map_or("all".to_string(), |k| k.to_string());
        let _ = writeln!(s, "# num_batches={batches}");
        let _ = writeln!(s, "# batch_size={}", self.sample.batch_size);
        let _ = writeln!(s, "# seed={}", self.sample.seed);
        if !self.negative_trace.is_empty() {
            let _ = writeln!(s, "# negative_trace={}", self.negative_trace.join(","));
        }
        let _ = writeln!(s, "cluster\tbits\tomega\tmethod\tseed");
        for e in &self.entries {
            let _ = writeln!(s, "{}\t{}\t{:e}\t{}\t{}", e.cluster, e.bits, e.omega, self.method.name(), self.sample.seed);
        }
        s
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let bad = |n: usize, what: &str| Error::config(format!("report line {}: {what}", n + 1));
        let mut method = None;
        let mut sample = SampleSpec::default();
        let mut negative_trace = Vec::new();
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if let Some(meta) = line.strip_prefix("# ") {
                if let Some((k, v)) = meta.split_once('=') {
                    match k {
                        "method" => method = Some(v.parse::<Method>()?),
                        "num_batches" => {
                            sample.num_batches = if v == "all" { None } else { Some(v.parse().map_err(|_| bad(n, "num_batches"))?) }
                        }
                        "batch_size" => sample.batch_size = v.parse().map_err(|_| bad(n, "batch_size"))?,
                        "seed" => sample.seed = v.parse().map_err(|_| bad(n, "seed"))?,
                        "negative_trace" => negative_trace = v.split(',').map(str::to_string).collect(),
                        _ => {}
                    }
                }
                continue;
            }
            if line.trim().is_empty() || line.starts_with("cluster\t") {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(bad(n, "expected 5 tab-separated fields"));
            }
            let omega: f64 = f[2].parse().map_err(|_| bad(n, "omega"))?;
            if !omega.is_finite() {
                return Err(bad(n, "omega is not finite"));
            }
            entries.push(SensitivityEntry {
                cluster: f[0].to_string(),
                bits: f[1].parse().map_err(|_| bad(n, "bits"))?,
                omega,
            });
        }
        let method = method.ok_or_else(|| Error::config("report lacks '# method=' line"))?;
        Ok(SensitivityReport { method, sample, entries, negative_trace })
    }
}

/// Evaluates the chosen metric for every (cluster, bit-width) pair.
pub fn build_report(
    spec: &ModelSpec,
    full: &ParamVector,
    prototypes: &PrototypeSet,
    method: Method,
    corpus: &Corpus,
    sample: &SampleSpec,
    hutchinson: &HutchinsonConfig,
) -> Result<SensitivityReport> {
    if prototypes.spec != *spec {
        return Err(Error::config("prototypes were built for a different architecture"));
    }
    prototypes.check_complete()?;
    spec.check_params(full)?;
    let layout = cluster_layout(spec);
    let batches = sample.batches(corpus, spec.max_context)?;
    let mut entries = Vec::with_capacity(layout.len() * BIT_WIDTHS.len());
    let mut negative_trace = Vec::new();
    match method {
        Method::Kl => {
            let reference: Vec<Vec<Vec<f64>>> =
                batches.iter().map(|b| target_log_probs(spec, full, b)).collect::<Result<_>>()?;
            for c in &layout.clusters {
                for b in BIT_WIDTHS {
                    let h = hybrid(full, prototypes.get(b)?, c);
                    let mut omega = 0.0;
                    for (batch, lp) in batches.iter().zip(&reference) {
                        omega += kl_sum(lp, &target_log_probs(spec, &h, batch)?)?;
                    }
                    entries.push(SensitivityEntry { cluster: c.id.clone(), bits: b, omega });
                }
            }
        }
        Method::Hessian => {
            let objectives: Vec<BatchObjective> = batches.iter().map(|batch| BatchObjective { spec, batch }).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(sample.seed ^ 0x9e37_79b9_7f4a_7c15);
            for c in &layout.clusters {
                let tr = hutchinson_trace(&objectives, full, c, hutchinson, &mut rng)?.trace;
                if tr < 0.0 {
                    log::warn!("negative curvature estimate {tr} for {}", c.id);
                    negative_trace.push(c.id.clone());
                }
                for b in BIT_WIDTHS {
                    let omega = hessian_sensitivity(tr, full, prototypes.get(b)?, c);
                    entries.push(SensitivityEntry { cluster: c.id.clone(), bits: b, omega });
                }
            }
        }
    }
    Ok(SensitivityReport { method, sample: *sample, entries, negative_trace })
}
