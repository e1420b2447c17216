use super::ModelSpec;
use crate::corpus::TokenBatch;
use crate::error::{Error, Result};
use crate::grad::{Tape, Var};
use crate::tensor::ParamVector;

pub(super) const GATES: [&str; 4] = ["forget_gate", "input_gate", "cell_gate", "output_gate"];

/// Per-layer cell and hidden vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub c: Vec<Vec<f64>>,
    pub h: Vec<Vec<f64>>,
}

impl LstmState {
    pub fn zeros(spec: &ModelSpec) -> Self {
        LstmState {
            c: vec![vec![0.0; spec.hidden_dim]; spec.num_layers],
            h: vec![vec![0.0; spec.hidden_dim]; spec.num_layers],
        }
    }
}

struct Weights {
    embedding: Var,
    gates: Vec<[Var; 4]>,
    output: Var,
}

fn record_weights(spec: &ModelSpec, params: &ParamVector, tape: &mut Tape) -> Result<Weights> {
    let embedding = tape.param(0, params.tensor(0))?;
    let mut gates = Vec::with_capacity(spec.num_layers);
    for l in 0..spec.num_layers {
        let base = 1 + 4 * l;
        gates.push([
            tape.param(base, params.tensor(base))?,
            tape.param(base + 1, params.tensor(base + 1))?,
            tape.param(base + 2, params.tensor(base + 2))?,
            tape.param(base + 3, params.tensor(base + 3))?,
        ]);
    }
    let last = params.len() - 1;
    let output = tape.param(last, params.tensor(last))?;
    Ok(Weights { embedding, gates, output })
}

/// One cell update: gates over `[x, h, 1]`, then `c = f*c + i*g`, `h = o*tanh(c)`.
fn cell(tape: &mut Tape, x: Var, h: Var, c: Var, w: &[Var; 4]) -> Result<(Var, Var)> {
    let inp = tape.concat_cols(x, h)?;
    let f = tape.linear(inp, w[0], true)?;
    let f = tape.sigmoid(f)?;
    let i = tape.linear(inp, w[1], true)?;
    let i = tape.sigmoid(i)?;
    let g = tape.linear(inp, w[2], true)?;
    let g = tape.tanh(g)?;
    let o = tape.linear(inp, w[3], true)?;
    let o = tape.sigmoid(o)?;
    let keep = tape.mul(f, c)?;
    let write = tape.mul(i, g)?;
    let c = tape.add(keep, write)?;
    let tc = tape.tanh(c)?;
    let h = tape.mul(o, tc)?;
    Ok((h, c))
}

pub(super) fn build(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &TokenBatch,
    tape: &mut Tape,
) -> Result<(Var, Vec<Option<usize>>, Vec<(usize, usize)>)> {
    let w = record_weights(spec, params, tape)?;
    let b = batch.batch_size();
    let steps = batch.steps();
    let d = spec.hidden_dim;
    let mut h: Vec<Var> = (0..spec.num_layers).map(|_| tape.zeros(b, d)).collect();
    let mut c: Vec<Var> = (0..spec.num_layers).map(|_| tape.zeros(b, d)).collect();
    let mut tops = Vec::with_capacity(steps);
    let mut targets = Vec::with_capacity(steps * b);
    let mut pos = Vec::with_capacity(steps * b);
    for t in 0..steps {
        let ids = batch
            .sequences
            .iter()
            .map(|s| if t + 1 < s.len() { s[t] } else { s[0] })
            .collect();
        let mut x = tape.gather(w.embedding, ids)?;
        for l in 0..spec.num_layers {
            let (hn, cn) = cell(tape, x, h[l], c[l], &w.gates[l])?;
            h[l] = hn;
            c[l] = cn;
            x = hn;
        }
        tops.push(x);
        for (bi, s) in batch.sequences.iter().enumerate() {
            targets.push(s.get(t + 1).copied());
            pos.push((bi, t));
        }
    }
    let stacked = tape.concat_rows(tops)?;
    let logits = tape.linear(stacked, w.output, true)?;
    Ok((logits, targets, pos))
}

/// Advances one position given the input embedding `x`; returns the output
/// logits and the new state.
pub fn lstm_step(spec: &ModelSpec, params: &ParamVector, x: &[f64], state: &LstmState) -> Result<(Vec<f64>, LstmState)> {
    spec.check_params(params)?;
    let d = spec.hidden_dim;
    if x.len() != spec.embed_dim
        || state.c.len() != spec.num_layers
        || state.h.len() != spec.num_layers
        || state.c.iter().chain(&state.h).any(|v| v.len() != d)
    {
        return Err(Error::config("lstm_step: input or state dimension mismatch"));
    }
    let mut tape = Tape::new();
    let w = record_weights(spec, params, &mut tape)?;
    let mut xv = tape.constant(1, spec.embed_dim, x.to_vec())?;
    let mut next = LstmState { c: Vec::new(), h: Vec::new() };
    for l in 0..spec.num_layers {
        let h = tape.constant(1, d, state.h[l].clone())?;
        let c = tape.constant(1, d, state.c[l].clone())?;
        let (hn, cn) = cell(&mut tape, xv, h, c, &w.gates[l])?;
        next.h.push(tape.value(hn).to_vec());
        next.c.push(tape.value(cn).to_vec());
        xv = hn;
    }
    let logits = tape.linear(xv, w.output, true)?;
    Ok((tape.value(logits).to_vec(), next))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn zero_params(spec: &ModelSpec) -> ParamVector {
        ParamVector::new(
            spec.param_shapes()
                .into_iter()
                .map(|(n, [r, c])| (n, Tensor::zeros(&[r, c])))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn pinned_gates_pass_cell_through() {
        let spec = ModelSpec::lstm(5, 3, 1);
        let mut p = spec.init_params(1).unwrap();
        let cols = 3 + 3 + 1;
        // Forget bias +1e3 and input bias -1e3 saturate the gates exactly.
        for r in 0..3 {
            for j in 0..cols - 1 {
                p.tensor_mut(1).data_mut()[r * cols + j] = 0.0;
                p.tensor_mut(2).data_mut()[r * cols + j] = 0.0;
            }
            p.tensor_mut(1).data_mut()[r * cols + cols - 1] = 1e3;
            p.tensor_mut(2).data_mut()[r * cols + cols - 1] = -1e3;
        }
        let state = LstmState { c: vec![vec![0.3, -0.7, 1.9]], h: vec![vec![0.1, 0.2, -0.3]] };
        let (_, next) = lstm_step(&spec, &p, &[0.5, -1.0, 2.0], &state).unwrap();
        assert_eq!(next.c[0], state.c[0]);
    }

    #[test]
    fn zero_weights_halve_the_cell() {
        let spec = ModelSpec::lstm(5, 4, 2);
        let p = zero_params(&spec);
        let state = LstmState { c: vec![vec![1.0, -2.0, 0.5, 4.0]; 2], h: vec![vec![0.3; 4]; 2] };
        let (logits, next) = lstm_step(&spec, &p, &[1.0; 4], &state).unwrap();
        for l in 0..2 {
            for (a, b) in next.c[l].iter().zip(&state.c[l]) {
                assert_eq!(*a, 0.5 * b);
            }
        }
        assert!(logits.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn rejects_bad_state() {
        let spec = ModelSpec::lstm(5, 4, 1);
        let p = spec.init_params(0).unwrap();
        let bad = LstmState { c: vec![vec![0.0; 3]], h: vec![vec![0.0; 4]] };
        assert!(lstm_step(&spec, &p, &[0.0; 4], &bad).is_err());
    }
}
