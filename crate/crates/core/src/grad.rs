//! Reverse-mode gradients over a single-use operation tape, plus
//! finite-difference Hessian-vector products built on top of them.
//!
//! Every value on the tape is a row-major matrix. Only the operations the two
//! language-model architectures need are provided.

use crate::error::{Error, Result};
use crate::tensor::{ParamVector, Tensor};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    Linear { x: Var, w: Var, bias: bool },
    Add(Var, Var),
    Mul(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    ConcatCols(Var, Var),
    ConcatRows(Vec<Var>),
    Gather { table: Var, rows: Vec<usize> },
    LayerNorm { x: Var, inv_std: Vec<f64> },
    CausalAttention { q: Var, k: Var, v: Var, batch: usize, seq: usize, heads: usize, probs: Vec<f64> },
    SoftmaxCe { logits: Var, targets: Vec<usize>, weights: Vec<f64>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn check_finite(name: &str, data: &[f64]) -> Result<()> {
    if let Some(i) = data.iter().position(|x| !x.is_finite()) {
        return Err(Error::numeric(name, format!("element {i} is {}", data[i])));
    }
    Ok(())
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `c (m x n) += a (m x k) * b (k x n)` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: callers pass slices whose extents cover the strided regions.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            1.0,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Numerically stable log-softmax of one row.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, name: &str, rows: usize, cols: usize, data: Vec<f64>, op: Op) -> Result<Var> {
        debug_assert_eq!(rows * cols, data.len());
        check_finite(name, &data)?;
        self.nodes.push(Node { rows, cols, data, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    /// Records trainable parameter `index`; its gradient is reported by [`backward`](Self::backward).
    pub fn param(&mut self, index: usize, t: &Tensor) -> Result<Var> {
        let (r, c) = t.rows_cols();
        self.push("param", r, c, t.data().to_vec(), Op::Param(index))
    }

    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        if rows * cols != data.len() {
            return Err(Error::config("constant shape mismatch"));
        }
        self.push("constant", rows, cols, data, Op::Leaf)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.nodes.push(Node { rows, cols, data: vec![0.0; rows * cols], op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// `x W[:, :in]^T (+ W[:, in])` where `W` is `out x (in + bias)`.
    pub fn linear(&mut self, x: Var, w: Var, bias: bool) -> Result<Var> {
        let (b, i) = self.shape(x);
        let (o, wc) = self.shape(w);
        if wc != i + bias as usize {
            return Err(Error::config(format!(
                "linear: input has {i} columns, weight has {wc} (bias={bias})"
            )));
        }
        let mut y = vec![0.0; b * o];
        {
            let xd = &self.nodes[x.0].data;
            let wd = &self.nodes[w.0].data;
            if bias {
                for row in y.chunks_mut(o) {
                    for (j, yj) in row.iter_mut().enumerate() {
                        *yj = wd[j * wc + i];
                    }
                }
            }
            gemm(b, i, o, xd, i, 1, wd, 1, wc, &mut y, o, 1);
        }
        self.push("linear", b, o, y, Op::Linear { x, w, bias })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (r, c) = self.shape(a);
        let y = self.nodes[a.0].data.iter().zip(&self.nodes[b.0].data).map(|(x, y)| x + y).collect();
        self.push("add", r, c, y, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (r, c) = self.shape(a);
        let y = self.nodes[a.0].data.iter().zip(&self.nodes[b.0].data).map(|(x, y)| x * y).collect();
        self.push("mul", r, c, y, Op::Mul(a, b))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let y = self.nodes[a.0].data.iter().map(|&x| sigmoid(x)).collect();
        self.push("sigmoid", r, c, y, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let y = self.nodes[a.0].data.iter().map(|x| x.tanh()).collect();
        self.push("tanh", r, c, y, Op::Tanh(a))
    }

    /// GELU, tanh form.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let y = self.nodes[a.0]
            .data
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()))
            .collect();
        self.push("gelu", r, c, y, Op::Gelu(a))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if ra != rb {
            return Err(Error::config("concat_cols: row count mismatch"));
        }
        let mut y = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            y.extend_from_slice(&self.nodes[a.0].data[r * ca..(r + 1) * ca]);
            y.extend_from_slice(&self.nodes[b.0].data[r * cb..(r + 1) * cb]);
        }
        self.push("concat_cols", ra, ca + cb, y, Op::ConcatCols(a, b))
    }

    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Result<Var> {
        let cols = parts.first().map(|&p| self.shape(p).1).ok_or_else(|| Error::config("concat_rows: empty"))?;
        let mut y = Vec::new();
        let mut rows = 0;
        for &p in &parts {
            let (r, c) = self.shape(p);
            if c != cols {
                return Err(Error::config("concat_rows: column mismatch"));
            }
            rows += r;
            y.extend_from_slice(&self.nodes[p.0].data);
        }
        self.push("concat_rows", rows, cols, y, Op::ConcatRows(parts))
    }

    /// Selects rows of `table` (embedding lookup).
    pub fn gather(&mut self, table: Var, rows: Vec<usize>) -> Result<Var> {
        let (tr, c) = self.shape(table);
        let mut y = Vec::with_capacity(rows.len() * c);
        for &r in &rows {
            if r >= tr {
                return Err(Error::config(format!("gather: row {r} out of range {tr}")));
            }
            y.extend_from_slice(&self.nodes[table.0].data[r * c..(r + 1) * c]);
        }
        self.push("gather", rows.len(), c, y, Op::Gather { table, rows })
    }

    /// Row-wise layer normalization without affine parameters.
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        let mut y = vec![0.0; r * c];
        let mut inv_std = Vec::with_capacity(r);
        let xd = &self.nodes[x.0].data;
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(s);
            for (o, v) in y[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = (v - mean) * s;
            }
        }
        self.push("layer_norm", r, c, y, Op::LayerNorm { x, inv_std })
    }

    /// Multi-head scaled dot-product attention where position `t` sees `1..=t`.
    ///
    /// `q`, `k`, `v` are `(batch * seq) x dim`, laid out sequence-major per batch item.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let (rows, dim) = self.shape(q);
        if self.shape(k) != (rows, dim) || self.shape(v) != (rows, dim) || rows != batch * seq {
            return Err(Error::config("attention: q/k/v shape mismatch"));
        }
        if heads == 0 || dim % heads != 0 {
            return Err(Error::config("attention: dim not divisible by heads"));
        }
        let dh = dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (&self.nodes[q.0].data, &self.nodes[k.0].data, &self.nodes[v.0].data);
        let mut y = vec![0.0; rows * dim];
        let mut probs = vec![0.0; batch * heads * seq * seq];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for t in 0..seq {
                    let qt = &qd[(b * seq + t) * dim + off..][..dh];
                    let p = &mut probs[((b * heads + h) * seq + t) * seq..][..seq];
                    let mut max = f64::NEG_INFINITY;
                    for s in 0..=t {
                        let ks = &kd[(b * seq + s) * dim + off..][..dh];
                        let sc = qt.iter().zip(ks).map(|(a, b)| a * b).sum::<f64>() * scale;
                        p[s] = sc;
                        max = max.max(sc);
                    }
                    let mut z = 0.0;
                    for ps in p.iter_mut().take(t + 1) {
                        *ps = (*ps - max).exp();
                        z += *ps;
                    }
                    let yt = &mut y[(b * seq + t) * dim + off..][..dh];
                    for s in 0..=t {
                        p[s] /= z;
                        let vs = &vd[(b * seq + s) * dim + off..][..dh];
                        for (o, x) in yt.iter_mut().zip(vs) {
                            *o += p[s] * x;
                        }
                    }
                }
            }
        }
        self.push("causal_attention", rows, dim, y, Op::CausalAttention { q, k, v, batch, seq, heads, probs })
    }

    /// Weighted softmax cross entropy, `sum_r w_r * -ln p_r[target_r]`, as a 1x1 value.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: Vec<usize>, weights: Vec<f64>) -> Result<Var> {
        let (r, c) = self.shape(logits);
        if targets.len() != r || weights.len() != r {
            return Err(Error::config("cross entropy: target count mismatch"));
        }
        let mut probs = vec![0.0; r * c];
        let mut loss = 0.0;
        let ld = &self.nodes[logits.0].data;
        for i in 0..r {
            if targets[i] >= c {
                return Err(Error::config(format!("cross entropy: target {} >= {c}", targets[i])));
            }
            let lp = log_softmax(&ld[i * c..(i + 1) * c]);
            loss -= weights[i] * lp[targets[i]];
            for (p, l) in probs[i * c..(i + 1) * c].iter_mut().zip(&lp) {
                *p = l.exp();
            }
        }
        self.push("cross_entropy", 1, 1, vec![loss], Op::SoftmaxCe { logits, targets, weights, probs })
    }

    fn same_shape(&self, name: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::config(format!("{name}: shape {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    /// Back-propagates from scalar `loss`; returns gradients for `params`' structure.
    /// Parameters never recorded, or unused, get exactly zero gradient.
    pub fn backward(&self, loss: Var, params: &ParamVector) -> Result<ParamVector> {
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0; self.nodes[loss.0].data.len()]);
        let mut out = params.zeros_like();

        fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].data.len()])
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let nodes = &self.nodes;
            match &node.op {
                Op::Leaf => {}
                Op::Param(p) => {
                    let dst = out.tensor_mut(*p).data_mut();
                    if dst.len() != g.len() {
                        return Err(Error::config("param gradient size mismatch"));
                    }
                    dst.iter_mut().zip(&g).for_each(|(d, s)| *d += s);
                }
                Op::Linear { x, w, bias } => {
                    let (b, i) = (nodes[x.0].rows, nodes[x.0].cols);
                    let (o, wc) = (nodes[w.0].rows, nodes[w.0].cols);
                    {
                        let gx = acc(&mut grads, nodes, *x);
                        gemm(b, o, i, &g, o, 1, &nodes[w.0].data, wc, 1, gx, i, 1);
                    }
                    let gw = acc(&mut grads, nodes, *w);
                    gemm(o, b, i, &g, 1, o, &nodes[x.0].data, i, 1, gw, wc, 1);
                    if *bias {
                        for row in g.chunks(o) {
                            for (j, gj) in row.iter().enumerate() {
                                gw[j * wc + i] += gj;
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut grads, nodes, *a).iter_mut().zip(&g).for_each(|(d, s)| *d += s);
                    acc(&mut grads, nodes, *b).iter_mut().zip(&g).for_each(|(d, s)| *d += s);
                }
                Op::Mul(a, b) => {
                    let (ad, bd) = (&nodes[a.0].data, &nodes[b.0].data);
                    let ga = acc(&mut grads, nodes, *a);
                    for ((d, s), y) in ga.iter_mut().zip(&g).zip(bd) {
                        *d += s * y;
                    }
                    let gb = acc(&mut grads, nodes, *b);
                    for ((d, s), x) in gb.iter_mut().zip(&g).zip(ad) {
                        *d += s * x;
                    }
                }
                Op::Sigmoid(a) => {
                    let ga = acc(&mut grads, nodes, *a);
                    for ((d, s), y) in ga.iter_mut().zip(&g).zip(&node.data) {
                        *d += s * y * (1.0 - y);
                    }
                }
                Op::Tanh(a) => {
                    let ga = acc(&mut grads, nodes, *a);
                    for ((d, s), y) in ga.iter_mut().zip(&g).zip(&node.data) {
                        *d += s * (1.0 - y * y);
                    }
                }
                Op::Gelu(a) => {
                    let xd = &nodes[a.0].data;
                    let ga = acc(&mut grads, nodes, *a);
                    for ((d, s), &x) in ga.iter_mut().zip(&g).zip(xd) {
                        let th = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                        let dudx = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        *d += s * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dudx);
                    }
                }
                Op::ConcatCols(a, b) => {
                    let (ca, cb) = (nodes[a.0].cols, nodes[b.0].cols);
                    let c = ca + cb;
                    {
                        let ga = acc(&mut grads, nodes, *a);
                        for (r, row) in g.chunks(c).enumerate() {
                            ga[r * ca..(r + 1) * ca].iter_mut().zip(&row[..ca]).for_each(|(d, s)| *d += s);
                        }
                    }
                    let gb = acc(&mut grads, nodes, *b);
                    for (r, row) in g.chunks(c).enumerate() {
                        gb[r * cb..(r + 1) * cb].iter_mut().zip(&row[ca..]).for_each(|(d, s)| *d += s);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = nodes[p.0].data.len();
                        acc(&mut grads, nodes, *p).iter_mut().zip(&g[off..off + n]).for_each(|(d, s)| *d += s);
                        off += n;
                    }
                }
                Op::Gather { table, rows } => {
                    let c = nodes[table.0].cols;
                    let gt = acc(&mut grads, nodes, *table);
                    for (i, &r) in rows.iter().enumerate() {
                        gt[r * c..(r + 1) * c].iter_mut().zip(&g[i * c..(i + 1) * c]).for_each(|(d, s)| *d += s);
                    }
                }
                Op::LayerNorm { x, inv_std } => {
                    let c = node.cols;
                    let gx = acc(&mut grads, nodes, *x);
                    for (r, s) in inv_std.iter().enumerate() {
                        let gy = &g[r * c..(r + 1) * c];
                        let y = &node.data[r * c..(r + 1) * c];
                        let mean_g = gy.iter().sum::<f64>() / c as f64;
                        let mean_gy = gy.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            gx[r * c + j] += s * (gy[j] - mean_g - y[j] * mean_gy);
                        }
                    }
                }
                Op::CausalAttention { q, k, v, batch, seq, heads, probs } => {
                    let dim = node.cols;
                    let dh = dim / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let rows = node.rows;
                    let mut gq = vec![0.0; rows * dim];
                    let mut gk = vec![0.0; rows * dim];
                    let mut gv = vec![0.0; rows * dim];
                    let (qd, kd, vd) = (&nodes[q.0].data, &nodes[k.0].data, &nodes[v.0].data);
                    let mut dp = vec![0.0; *seq];
                    for b in 0..*batch {
                        for h in 0..*heads {
                            let off = h * dh;
                            for t in 0..*seq {
                                let p = &probs[((b * heads + h) * seq + t) * seq..][..*seq];
                                let gyt = &g[(b * seq + t) * dim + off..][..dh];
                                let mut dot = 0.0;
                                for s in 0..=t {
                                    let vs = &vd[(b * seq + s) * dim + off..][..dh];
                                    dp[s] = gyt.iter().zip(vs).map(|(a, b)| a * b).sum();
                                    dot += p[s] * dp[s];
                                    let gvs = &mut gv[(b * seq + s) * dim + off..][..dh];
                                    for (d, y) in gvs.iter_mut().zip(gyt) {
                                        *d += p[s] * y;
                                    }
                                }
                                let qt = &qd[(b * seq + t) * dim + off..][..dh];
                                for s in 0..=t {
                                    let ds = p[s] * (dp[s] - dot) * scale;
                                    if ds == 0.0 {
                                        continue;
                                    }
                                    let ks = &kd[(b * seq + s) * dim + off..][..dh];
                                    let gqt = &mut gq[(b * seq + t) * dim + off..][..dh];
                                    for (d, x) in gqt.iter_mut().zip(ks) {
                                        *d += ds * x;
                                    }
                                    let gks = &mut gk[(b * seq + s) * dim + off..][..dh];
                                    for (d, x) in gks.iter_mut().zip(qt) {
                                        *d += ds * x;
                                    }
                                }
                            }
                        }
                    }
                    for (var, gl) in [(*q, gq), (*k, gk), (*v, gv)] {
                        acc(&mut grads, nodes, var).iter_mut().zip(&gl).for_each(|(d, s)| *d += s);
                    }
                }
                Op::SoftmaxCe { logits, targets, weights, probs } => {
                    let c = nodes[logits.0].cols;
                    let gl = acc(&mut grads, nodes, *logits);
                    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let scale = g[0] * w;
                        for j in 0..c {
                            gl[r * c + j] += scale * probs[r * c + j];
                        }
                        gl[r * c + t] -= scale;
                    }
                }
            }
        }
        if !out.is_finite() {
            return Err(Error::numeric("backward", "non-finite gradient"));
        }
        Ok(out)
    }
}

/// Anything that yields a scalar loss and its gradient at a parameter point.
pub trait Objective {
    fn loss_and_grad(&self, params: &ParamVector) -> Result<(f64, ParamVector)>;

    fn loss(&self, params: &ParamVector) -> Result<f64> {
        Ok(self.loss_and_grad(params)?.0)
    }
}

/// Default central-difference step for [`hvp`].
pub fn default_hvp_eps(params: &ParamVector) -> f64 {
    1e-4 * (1.0 + params.max_abs())
}

/// Hessian-vector product `H v` from a central difference of two gradients.
pub fn hvp<O: Objective + ?Sized>(obj: &O, params: &ParamVector, v: &ParamVector, eps: f64) -> Result<ParamVector> {
    if !(eps > 0.0) {
        return Err(Error::config("hvp eps must be positive"));
    }
    params.check_structure(v)?;
    if v.max_abs() == 0.0 {
        return Ok(params.zeros_like());
    }
    let (_, gp) = obj.loss_and_grad(&params.axpy(eps, v))?;
    let (_, gm) = obj.loss_and_grad(&params.axpy(-eps, v))?;
    let mut out = gp;
    out.add_scaled(-1.0, &gm);
    out.scale(1.0 / (2.0 * eps));
    if !out.is_finite() {
        return Err(Error::numeric("hvp", "non-finite Hessian-vector product"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Quadratic {
        diag: Vec<f64>,
    }

    impl Objective for Quadratic {
        fn loss_and_grad(&self, p: &ParamVector) -> Result<(f64, ParamVector)> {
            let x = p.tensor(0).data();
            let loss = 0.5 * x.iter().zip(&self.diag).map(|(x, a)| a * x * x).sum::<f64>();
            let g = Tensor::new(vec![x.len()], x.iter().zip(&self.diag).map(|(x, a)| a * x).collect())?;
            Ok((loss, ParamVector::new(vec![("x".into(), g)])?))
        }
    }

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::new(vec![("x".into(), Tensor::new(vec![v.len()], v.to_vec()).unwrap())]).unwrap()
    }

    #[test]
    fn hvp_exact_on_quadratic() {
        let q = Quadratic { diag: vec![1.0, 2.0, 3.0] };
        let p = pv(&[0.3, -1.0, 2.0]);
        let hv = hvp(&q, &p, &pv(&[1.0, 1.0, 1.0]), default_hvp_eps(&p)).unwrap();
        for (a, b) in hv.tensor(0).data().iter().zip([1.0, 2.0, 3.0]) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn hvp_of_zero_vector_is_zero() {
        let q = Quadratic { diag: vec![1.0, 2.0, 3.0] };
        let p = pv(&[0.3, -1.0, 2.0]);
        let hv = hvp(&q, &p, &pv(&[0.0; 3]), 1e-4).unwrap();
        assert!(hv.tensor(0).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn uniform_logits_give_ln_vocab() {
        let mut tape = Tape::new();
        let logits = tape.constant(1, 10, vec![0.25; 10]).unwrap();
        let loss = tape.softmax_cross_entropy(logits, vec![3], vec![1.0]).unwrap();
        assert!((tape.value(loss)[0] - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn non_finite_is_reported_with_op_name() {
        let mut tape = Tape::new();
        let a = tape.constant(1, 1, vec![1e300]).unwrap();
        let err = tape.mul(a, a).unwrap_err();
        assert!(matches!(err, Error::Numeric { ref op, .. } if op == "mul"), "{err}");
    }

    #[test]
    fn unused_params_get_zero_grad() {
        let p = ParamVector::new(vec![
            ("used".into(), Tensor::new(vec![1, 2], vec![0.5, -0.5]).unwrap()),
            ("unused".into(), Tensor::new(vec![2], vec![3.0, 4.0]).unwrap()),
        ])
        .unwrap();
        let mut tape = Tape::new();
        let w = tape.param(0, p.tensor(0)).unwrap();
        let l = tape.softmax_cross_entropy(w, vec![0], vec![1.0]).unwrap();
        let g = tape.backward(l, &p).unwrap();
        assert_eq!(g.tensor(1).data(), &[0.0, 0.0]);
        assert!(g.tensor(0).data()[0] != 0.0);
    }
}
