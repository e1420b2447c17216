//! LSTM-RNN and Transformer language models: parameter inventory, weight
//! clusters, batched forward/backward and incremental decoding.

mod lstm;
mod transformer;

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, TokenBatch};
use crate::error::{Error, Result};
use crate::grad::{log_softmax, Objective, Tape, Var};
use crate::tensor::{ParamVector, Tensor};

pub use lstm::{lstm_step, LstmState};
pub use transformer::{transformer_step, ContextOverflow, TransformerDecoder};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Lstm,
    Transformer,
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lstm" => Ok(ModelKind::Lstm),
            "transformer" => Ok(ModelKind::Transformer),
            _ => Err(Error::config(format!("unknown model kind {s:?} (lstm|transformer)"))),
        }
    }
}

/// Granularity at which weights share one quantization table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TieGranularity {
    /// One table per named sublayer matrix.
    #[default]
    Layer,
    /// One table per stored row of each matrix.
    Node,
}

impl std::str::FromStr for TieGranularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layer" => Ok(TieGranularity::Layer),
            "node" => Ok(TieGranularity::Node),
            _ => Err(Error::config(format!("unknown tie granularity {s:?} (layer|node)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    /// Attention heads; ignored by the LSTM.
    pub num_heads: usize,
    /// Longest context window (BPTT window for the LSTM).
    pub max_context: usize,
    /// Feed-forward width; ignored by the LSTM.
    pub ff_dim: usize,
    pub tie_granularity: TieGranularity,
}

impl ModelSpec {
    pub fn lstm(vocab_size: usize, dim: usize, num_layers: usize) -> Self {
        ModelSpec {
            kind: ModelKind::Lstm,
            vocab_size,
            embed_dim: dim,
            hidden_dim: dim,
            num_layers,
            num_heads: 1,
            max_context: 64,
            ff_dim: 0,
            tie_granularity: TieGranularity::Layer,
        }
    }

    pub fn transformer(vocab_size: usize, dim: usize, num_layers: usize, num_heads: usize) -> Self {
        ModelSpec {
            kind: ModelKind::Transformer,
            vocab_size,
            embed_dim: dim,
            hidden_dim: dim,
            num_layers,
            num_heads,
            max_context: 64,
            ff_dim: 4 * dim,
            tie_granularity: TieGranularity::Layer,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 || self.embed_dim == 0 || self.hidden_dim == 0 || self.max_context == 0 {
            return Err(Error::config("model dimensions must be positive (vocab >= 2)"));
        }
        if self.num_layers == 0 {
            return Err(Error::config("num_layers must be >= 1"));
        }
        if self.kind == ModelKind::Transformer {
            if self.num_heads == 0 || self.hidden_dim % self.num_heads != 0 {
                return Err(Error::config(format!(
                    "hidden_dim {} not divisible by num_heads {}",
                    self.hidden_dim, self.num_heads
                )));
            }
            if self.embed_dim != self.hidden_dim {
                return Err(Error::config("transformer requires embed_dim == hidden_dim"));
            }
            if self.ff_dim == 0 {
                return Err(Error::config("transformer requires ff_dim > 0"));
            }
        }
        Ok(())
    }

    /// Ordered (name, shape) inventory of every trainable tensor.
    pub fn param_shapes(&self) -> Vec<(String, [usize; 2])> {
        let (n, m, d) = (self.vocab_size, self.embed_dim, self.hidden_dim);
        let mut v = Vec::new();
        match self.kind {
            ModelKind::Lstm => {
                v.push(("embedding".to_string(), [n, m]));
                for l in 0..self.num_layers {
                    let input = if l == 0 { m } else { d };
                    for gate in lstm::GATES {
                        v.push((format!("layer{l}.{gate}"), [d, input + d + 1]));
                    }
                }
            }
            ModelKind::Transformer => {
                // Positional rows follow the token rows in the same table.
                v.push(("embedding".to_string(), [n + self.max_context, d]));
                for l in 0..self.num_layers {
                    for p in ["query", "key", "value", "attn_proj"] {
                        v.push((format!("layer{l}.{p}"), [d, d]));
                    }
                    v.push((format!("layer{l}.ff1"), [self.ff_dim, d + 1]));
                    v.push((format!("layer{l}.ff2"), [d, self.ff_dim + 1]));
                }
            }
        }
        v.push(("output".to_string(), [n, d + 1]));
        v
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(_, s)| s[0] * s[1]).sum()
    }

    /// Seeded uniform initialization scaled by fan-in.
    pub fn init_params(&self, seed: u64) -> Result<ParamVector> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = self
            .param_shapes()
            .into_iter()
            .map(|(name, [r, c])| {
                let s = if name == "embedding" { 0.1 } else { 1.0 / (c as f64).sqrt() };
                let t = Tensor::from_fn(&[r, c], |_| rng.gen_range(-s..s));
                (name, t)
            })
            .collect();
        ParamVector::new(entries)
    }

    pub fn check_params(&self, params: &ParamVector) -> Result<()> {
        let shapes = self.param_shapes();
        if shapes.len() != params.len() {
            return Err(Error::config(format!(
                "model expects {} tensors, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for (i, (name, [r, c])) in shapes.iter().enumerate() {
            if params.name(i) != name || params.tensor(i).shape() != [*r, *c] {
                return Err(Error::config(format!(
                    "tensor {i}: expected {name} {r}x{c}, got {} {:?}",
                    params.name(i),
                    params.tensor(i).shape()
                )));
            }
        }
        Ok(())
    }

    fn check_batch(&self, batch: &TokenBatch) -> Result<()> {
        if batch.sequences.is_empty() {
            return Err(Error::config("empty batch"));
        }
        if batch.max_id() >= self.vocab_size {
            return Err(Error::config(format!(
                "token id {} out of range for vocabulary {}",
                batch.max_id(),
                self.vocab_size
            )));
        }
        if self.kind == ModelKind::Transformer && batch.steps() > self.max_context {
            return Err(Error::config(format!(
                "sequence of {} steps exceeds max_context {}",
                batch.steps(),
                self.max_context
            )));
        }
        Ok(())
    }
}

/// A group of parameters sharing one quantization table: a row range of one tensor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightCluster {
    pub id: String,
    pub tensor: usize,
    pub rows: Range<usize>,
    pub cols: usize,
}

impl WeightCluster {
    pub fn count(&self) -> usize {
        self.rows.len() * self.cols
    }

    pub fn span(&self) -> Range<usize> {
        self.rows.start * self.cols..self.rows.end * self.cols
    }

    pub fn slice<'a>(&self, params: &'a ParamVector) -> &'a [f64] {
        &params.tensor(self.tensor).data()[self.span()]
    }

    pub fn slice_mut<'a>(&self, params: &'a mut ParamVector) -> &'a mut [f64] {
        let span = self.span();
        &mut params.tensor_mut(self.tensor).data_mut()[span]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterLayout {
    pub clusters: Vec<WeightCluster>,
}

impl ClusterLayout {
    pub fn total_count(&self) -> usize {
        self.clusters.iter().map(WeightCluster::count).sum()
    }

    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.clusters.iter().position(|c| c.id == id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.clusters.iter().map(|c| c.id.as_str())
    }
}

/// Partition of all trainable parameters into quantization clusters.
pub fn cluster_layout(spec: &ModelSpec) -> ClusterLayout {
    let mut clusters = Vec::new();
    for (t, (name, [r, c])) in spec.param_shapes().into_iter().enumerate() {
        match spec.tie_granularity {
            TieGranularity::Layer => clusters.push(WeightCluster { id: name, tensor: t, rows: 0..r, cols: c }),
            TieGranularity::Node => {
                for row in 0..r {
                    clusters.push(WeightCluster {
                        id: format!("{name}.row{row}"),
                        tensor: t,
                        rows: row..row + 1,
                        cols: c,
                    });
                }
            }
        }
    }
    ClusterLayout { clusters }
}

/// Records the model on `tape`; returns the logits node and, per logits row,
/// the target id (None for padding).
fn build_graph(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &TokenBatch,
    tape: &mut Tape,
) -> Result<(Var, Vec<Option<usize>>, Vec<(usize, usize)>)> {
    spec.check_params(params)?;
    spec.check_batch(batch)?;
    match spec.kind {
        ModelKind::Lstm => lstm::build(spec, params, batch, tape),
        ModelKind::Transformer => transformer::build(spec, params, batch, tape),
    }
}

/// Mean per-token cross entropy and its gradient.
pub fn forward_backward(spec: &ModelSpec, params: &ParamVector, batch: &TokenBatch) -> Result<(f64, ParamVector)> {
    let mut tape = Tape::new();
    let (logits, targets, _) = build_graph(spec, params, batch, &mut tape)?;
    let n = targets.iter().filter(|t| t.is_some()).count() as f64;
    let weights = targets.iter().map(|t| if t.is_some() { 1.0 / n } else { 0.0 }).collect();
    let ids = targets.iter().map(|t| t.unwrap_or(0)).collect();
    let loss = tape.softmax_cross_entropy(logits, ids, weights)?;
    let value = tape.value(loss)[0];
    let grads = tape.backward(loss, params)?;
    Ok((value, grads))
}

/// Full next-token log distributions at every real target position,
/// ordered by sequence then position.
pub fn target_log_probs(spec: &ModelSpec, params: &ParamVector, batch: &TokenBatch) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let (logits, targets, pos) = build_graph(spec, params, batch, &mut tape)?;
    let v = spec.vocab_size;
    let data = tape.value(logits);
    let mut rows: Vec<((usize, usize), Vec<f64>)> = targets
        .iter()
        .enumerate()
        .filter(|(_, t)| t.is_some())
        .map(|(r, _)| (pos[r], log_softmax(&data[r * v..(r + 1) * v])))
        .collect();
    rows.sort_by_key(|(p, _)| *p);
    Ok(rows.into_iter().map(|(_, lp)| lp).collect())
}

/// Sum of negative log-likelihoods of the batch targets, and the target count.
pub fn batch_nll(spec: &ModelSpec, params: &ParamVector, batch: &TokenBatch) -> Result<(f64, usize)> {
    let mut tape = Tape::new();
    let (logits, targets, _) = build_graph(spec, params, batch, &mut tape)?;
    let v = spec.vocab_size;
    let data = tape.value(logits);
    let mut nll = 0.0;
    let mut n = 0;
    for (r, t) in targets.iter().enumerate() {
        if let Some(t) = t {
            nll -= log_softmax(&data[r * v..(r + 1) * v])[*t];
            n += 1;
        }
    }
    Ok((nll, n))
}

/// `exp` of the mean per-token negative log-likelihood over the whole corpus.
pub fn perplexity(spec: &ModelSpec, params: &ParamVector, corpus: &Corpus) -> Result<f64> {
    let mut nll = 0.0;
    let mut n = 0usize;
    for batch in corpus.batches(64, spec.max_context) {
        let (s, c) = batch_nll(spec, params, &batch)?;
        nll += s;
        n += c;
    }
    if n == 0 {
        return Err(Error::config("perplexity over an empty corpus"));
    }
    let ppl = (nll / n as f64).exp();
    if !ppl.is_finite() {
        return Err(Error::numeric("perplexity", format!("mean nll {}", nll / n as f64)));
    }
    Ok(ppl)
}

/// A model bound to one minibatch, as a differentiable objective.
pub struct BatchObjective<'a> {
    pub spec: &'a ModelSpec,
    pub batch: &'a TokenBatch,
}

impl Objective for BatchObjective<'_> {
    fn loss_and_grad(&self, params: &ParamVector) -> Result<(f64, ParamVector)> {
        forward_backward(self.spec, params, self.batch)
    }

    fn loss(&self, params: &ParamVector) -> Result<f64> {
        let (s, n) = batch_nll(self.spec, params, self.batch)?;
        Ok(s / n as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_cluster_counts() {
        let l = cluster_layout(&ModelSpec::lstm(20, 8, 2));
        assert_eq!(l.len(), 10);
        let t = cluster_layout(&ModelSpec::transformer(20, 8, 1, 2));
        assert_eq!(t.len(), 8);
        let ids: Vec<_> = t.ids().collect();
        assert_eq!(
            ids,
            ["embedding", "layer0.query", "layer0.key", "layer0.value", "layer0.attn_proj", "layer0.ff1", "layer0.ff2", "output"]
        );
    }

    #[test]
    fn node_clusters_are_rows() {
        let mut s = ModelSpec::transformer(20, 8, 1, 2);
        s.tie_granularity = TieGranularity::Node;
        let l = cluster_layout(&s);
        let q: Vec<_> = l.clusters.iter().filter(|c| c.id.starts_with("layer0.query")).collect();
        assert_eq!(q.len(), 8);
        assert!(q.iter().all(|c| c.count() == 8));
    }

    #[test]
    fn layouts_partition_parameters() {
        for mut s in [ModelSpec::lstm(13, 6, 2), ModelSpec::transformer(13, 8, 2, 2)] {
            for g in [TieGranularity::Layer, TieGranularity::Node] {
                s.tie_granularity = g;
                let l = cluster_layout(&s);
                assert_eq!(l.total_count(), s.param_count());
                let mut seen = vec![vec![false; 0]; s.param_shapes().len()];
                for (i, (_, [r, c])) in s.param_shapes().iter().enumerate() {
                    seen[i] = vec![false; r * c];
                }
                for c in &l.clusters {
                    for j in c.span() {
                        assert!(!seen[c.tensor][j]);
                        seen[c.tensor][j] = true;
                    }
                }
                assert!(seen.iter().flatten().all(|&b| b));
            }
        }
    }

    #[test]
    fn transformer_spec_validation() {
        let mut s = ModelSpec::transformer(10, 8, 1, 3);
        assert!(s.validate().is_err());
        s.num_heads = 2;
        assert!(s.validate().is_ok());
        s.num_layers = 0;
        assert!(s.validate().is_err());
    }
}
