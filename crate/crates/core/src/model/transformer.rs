use super::ModelSpec;
use crate::corpus::TokenBatch;
use crate::error::{Error, Result};
use crate::grad::{Tape, Var};
use crate::tensor::ParamVector;

const PER_LAYER: usize = 6;

pub(super) fn build(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &TokenBatch,
    tape: &mut Tape,
) -> Result<(Var, Vec<Option<usize>>, Vec<(usize, usize)>)> {
    let b = batch.batch_size();
    let steps = batch.steps();
    let emb = tape.param(0, params.tensor(0))?;
    let mut tok = Vec::with_capacity(b * steps);
    let mut posr = Vec::with_capacity(b * steps);
    let mut targets = Vec::with_capacity(b * steps);
    let mut pos = Vec::with_capacity(b * steps);
    for (bi, s) in batch.sequences.iter().enumerate() {
        for t in 0..steps {
            tok.push(if t + 1 < s.len() { s[t] } else { s[0] });
            posr.push(spec.vocab_size + t);
            targets.push(s.get(t + 1).copied());
            pos.push((bi, t));
        }
    }
    let te = tape.gather(emb, tok)?;
    let pe = tape.gather(emb, posr)?;
    let mut x = tape.add(te, pe)?;
    for l in 0..spec.num_layers {
        let base = 1 + PER_LAYER * l;
        let w: Vec<Var> = (0..PER_LAYER)
            .map(|j| tape.param(base + j, params.tensor(base + j)))
            .collect::<Result<_>>()?;
        let q = tape.linear(x, w[0], false)?;
        let k = tape.linear(x, w[1], false)?;
        let v = tape.linear(x, w[2], false)?;
        let y = tape.causal_attention(q, k, v, b, steps, spec.num_heads)?;
        let proj = tape.linear(y, w[3], false)?;
        let z = tape.add(proj, x)?;
        let o = tape.layer_norm(z)?;
        let f = tape.linear(o, w[4], true)?;
        let f = tape.gelu(f)?;
        let f = tape.linear(f, w[5], true)?;
        let s = tape.add(f, o)?;
        x = tape.layer_norm(s)?;
    }
    let last = params.len() - 1;
    let out = tape.param(last, params.tensor(last))?;
    let logits = tape.linear(x, out, true)?;
    Ok((logits, targets, pos))
}

/// What to do when the history is longer than `max_context`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ContextOverflow {
    #[default]
    Error,
    /// Keep only the most recent `max_context` tokens (logged).
    Truncate,
}

fn matvec(w: &[f64], cols: usize, x: &[f64], bias: bool) -> Vec<f64> {
    let inner = cols - bias as usize;
    w.chunks(cols)
        .map(|row| {
            let s: f64 = row[..inner].iter().zip(x).map(|(a, b)| a * b).sum();
            if bias {
                s + row[inner]
            } else {
                s
            }
        })
        .collect()
}

fn layer_norm(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let s = 1.0 / (var + 1e-5).sqrt();
    x.iter().map(|v| (v - mean) * s).collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (0.797_884_560_802_865_4 * (x + 0.044_715 * x * x * x)).tanh())
}

/// Incremental decoder holding per-layer key/value caches.
pub struct TransformerDecoder<'a> {
    spec: &'a ModelSpec,
    params: &'a ParamVector,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

impl<'a> TransformerDecoder<'a> {
    pub fn new(spec: &'a ModelSpec, params: &'a ParamVector) -> Result<Self> {
        spec.check_params(params)?;
        Ok(TransformerDecoder {
            spec,
            params,
            keys: vec![Vec::new(); spec.num_layers],
            values: vec![Vec::new(); spec.num_layers],
            len: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Appends `token` at the next position and returns next-token logits.
    pub fn push(&mut self, token: usize) -> Result<Vec<f64>> {
        let spec = self.spec;
        if token >= spec.vocab_size {
            return Err(Error::config(format!("token {token} out of range")));
        }
        if self.len >= spec.max_context {
            return Err(Error::config(format!("context full at {} tokens", spec.max_context)));
        }
        let d = spec.hidden_dim;
        let emb = self.params.tensor(0);
        let mut x: Vec<f64> = emb
            .row(token)
            .iter()
            .zip(emb.row(spec.vocab_size + self.len))
            .map(|(a, b)| a + b)
            .collect();
        let heads = spec.num_heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let t = self.len;
        for l in 0..spec.num_layers {
            let base = 1 + PER_LAYER * l;
            let p = |j: usize| self.params.tensor(base + j).data();
            let q = matvec(p(0), d, &x, false);
            let k = matvec(p(1), d, &x, false);
            let v = matvec(p(2), d, &x, false);
            self.keys[l].extend_from_slice(&k);
            self.values[l].extend_from_slice(&v);
            let (ks, vs) = (&self.keys[l], &self.values[l]);
            let mut y = vec![0.0; d];
            let mut scores = vec![0.0; t + 1];
            for h in 0..heads {
                let off = h * dh;
                let mut max = f64::NEG_INFINITY;
                for (s, sc) in scores.iter_mut().enumerate() {
                    *sc = q[off..off + dh].iter().zip(&ks[s * d + off..s * d + off + dh]).map(|(a, b)| a * b).sum::<f64>()
                        * scale;
                    max = max.max(*sc);
                }
                let mut z = 0.0;
                for sc in scores.iter_mut() {
                    *sc = (*sc - max).exp();
                    z += *sc;
                }
                for (s, sc) in scores.iter().enumerate() {
                    let w = sc / z;
                    for (o, val) in y[off..off + dh].iter_mut().zip(&vs[s * d + off..s * d + off + dh]) {
                        *o += w * val;
                    }
                }
            }
            let proj = matvec(p(3), d, &y, false);
            let z: Vec<f64> = proj.iter().zip(&x).map(|(a, b)| a + b).collect();
            let o = layer_norm(&z);
            let f: Vec<f64> = matvec(p(4), d + 1, &o, true).into_iter().map(gelu).collect();
            let f = matvec(p(5), spec.ff_dim + 1, &f, true);
            let s: Vec<f64> = f.iter().zip(&o).map(|(a, b)| a + b).collect();
            x = layer_norm(&s);
        }
        self.len += 1;
        let last = self.params.len() - 1;
        let logits = matvec(self.params.tensor(last).data(), d + 1, &x, true);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("transformer_step", "non-finite logits"));
        }
        Ok(logits)
    }
}

/// Next-token logits after `history`, decoded through the key/value cache.
pub fn transformer_step(
    spec: &ModelSpec,
    params: &ParamVector,
    history: &[usize],
    overflow: ContextOverflow,
) -> Result<Vec<f64>> {
    if history.is_empty() {
        return Err(Error::config("transformer_step needs a non-empty history"));
    }
    let history = if history.len() > spec.max_context {
        match overflow {
            ContextOverflow::Error => {
                return Err(Error::config(format!(
                    "history of {} tokens exceeds max_context {}",
                    history.len(),
                    spec.max_context
                )))
            }
            ContextOverflow::Truncate => {
                log::warn!(
                    "truncating history from {} to the last {} tokens",
                    history.len(),
                    spec.max_context
                );
                &history[history.len() - spec.max_context..]
            }
        }
    } else {
        history
    };
    let mut dec = TransformerDecoder::new(spec, params)?;
    let mut logits = Vec::new();
    for &tok in history {
        logits = dec.push(tok)?;
    }
    Ok(logits)
}
