//! Reverse-mode gradient tape.
//!
//! A [`Tape`] records every operation of one forward pass in execution order.
//! Operands always precede their results, so [`Tape::backward`] is a single
//! reverse sweep. The tape is owned by the caller and reset explicitly; there
//! is no global graph.

use crate::error::{shape_err, Error, Result};
use crate::real::Real;
use crate::tensor::{matmul_dims, matmul_nt, matmul_tn, transpose_raw, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T: Real> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    Silu(Var),
    Softmax(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<u32>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<u32>,
        probs: Vec<T>,
    },
    Rope {
        x: Var,
        seq: usize,
        head_dim: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        geom: AttnGeom,
        probs: Vec<T>,
    },
    Sum(Var),
    Transpose(Var),
    Reshape(Var),
}

#[derive(Clone, Copy, Debug)]
struct AttnGeom {
    batch: usize,
    seq: usize,
    heads: usize,
    head_dim: usize,
}

#[derive(Debug)]
struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    /// Accumulated gradient; only leaves keep one across `backward` calls.
    grad: Option<Vec<T>>,
}

#[derive(Debug, Default)]
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

/// Base of the rotary position frequencies.
pub const ROPE_BASE: f64 = 10_000.0;

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    /// Drops every recorded node. Outstanding [`Var`]s become invalid.
    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf whose gradient will be tracked.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Records a detached leaf; it never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, mut value: Tensor<T>, requires_grad: bool) -> Var {
        value.grad = None;
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated into a leaf by `backward`, if any path reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn checked(&mut self, op_name: &str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op_name.to_string()));
        }
        let rg = self.needs(inputs);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return shape_err("add", format!("{:?} + {:?}", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.checked("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return shape_err("mul", format!("{:?} * {:?}", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.checked("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| x * factor).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.checked("scale", out, Op::Scale(a, factor), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.checked("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| x * sigmoid(x)).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.checked("silu", out, Op::Silu(a), &[a])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let n = va.last_dim();
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.checked("softmax", out, Op::Softmax(a), &[a])
    }

    /// `x · gain / sqrt(mean(x²) + eps)` over the last axis.
    pub fn rmsnorm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (vx, vg) = (self.value(x), self.value(gain));
        let h = vx.last_dim();
        if vg.numel() != h {
            return shape_err("rmsnorm", format!("gain {:?} vs x {:?}", vg.shape(), vx.shape()));
        }
        let g = vg.data();
        let mut inv_rms = Vec::with_capacity(vx.rows());
        let mut data = Vec::with_capacity(vx.numel());
        for row in vx.data().chunks(h) {
            let mut ss = T::zero();
            for &v in row {
                ss = ss + v * v;
            }
            let r = T::one() / (ss / T::of(h as f64) + T::of(eps)).sqrt();
            inv_rms.push(r);
            data.extend(row.iter().zip(g).map(|(&v, &gv)| v * r * gv));
        }
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        if !out.is_finite() {
            return Err(Error::NonFinite("rmsnorm".into()));
        }
        self.checked("rmsnorm", out, Op::RmsNorm { x, gain, inv_rms }, &[x, gain])
    }

    /// Gathers rows of `table` ([V, H]) for each id; output is `[ids.len(), H]`.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let vt = self.value(table);
        if vt.ndim() != 2 {
            return shape_err("embedding", format!("table {:?}", vt.shape()));
        }
        let (vocab, h) = (vt.shape()[0], vt.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * h);
        for &id in ids {
            if id as usize >= vocab {
                return Err(Error::TokenOutOfRange { id, vocab });
            }
            let i = id as usize;
            data.extend_from_slice(&vt.data()[i * h..(i + 1) * h]);
        }
        let out = Tensor::new(vec![ids.len(), h], data)?;
        self.checked(
            "embedding",
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32]) -> Result<Var> {
        let vl = self.value(logits);
        let vocab = vl.last_dim();
        let rows = vl.rows();
        if rows != targets.len() {
            return shape_err(
                "cross_entropy",
                format!("{rows} rows of logits vs {} targets", targets.len()),
            );
        }
        let mut probs = vl.data().to_vec();
        let mut total = T::zero();
        for (row, &t) in probs.chunks_mut(vocab).zip(targets) {
            if t as usize >= vocab {
                return Err(Error::TokenOutOfRange { id: t, vocab });
            }
            let lse = log_sum_exp(row);
            total = total + (lse - row[t as usize]);
            softmax_in_place(row);
        }
        let loss = total / T::of(rows as f64);
        let out = Tensor::scalar(loss);
        self.checked(
            "cross_entropy",
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Rotary position embedding on `x` of shape `[batch·seq, heads·head_dim]`.
    /// Rows are ordered batch-major; the position of row `r` is `r % seq`.
    pub fn rope(&mut self, x: Var, seq: usize, head_dim: usize) -> Result<Var> {
        let vx = self.value(x);
        if head_dim % 2 != 0 || vx.ndim() != 2 || vx.cols() % head_dim != 0 || vx.rows() % seq != 0 {
            return shape_err("rope", format!("{:?} seq={seq} head_dim={head_dim}", vx.shape()));
        }
        let mut data = vx.data().to_vec();
        rotate(&mut data, vx.cols(), seq, head_dim, false);
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        self.checked("rope", out, Op::Rope { x, seq, head_dim }, &[x])
    }

    /// Causal multi-head attention. `q`, `k`, `v` are `[batch·seq, heads·head_dim]`.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        head_dim: usize,
    ) -> Result<Var> {
        let width = heads * head_dim;
        for var in [q, k, v] {
            let s = self.value(var).shape();
            if s != [batch * seq, width] {
                return shape_err("attention", format!("operand {s:?}, expected [{}, {width}]", batch * seq));
            }
        }
        let geom = AttnGeom {
            batch,
            seq,
            heads,
            head_dim,
        };
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let scale = T::one() / T::of(head_dim as f64).sqrt();
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let mut out = vec![T::zero(); batch * seq * width];
        let mut scores = vec![T::zero(); seq];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * head_dim;
                let pbase = (b * heads + h) * seq * seq;
                for i in 0..seq {
                    let qi = &qd[(b * seq + i) * width + off..][..head_dim];
                    for j in 0..=i {
                        let kj = &kd[(b * seq + j) * width + off..][..head_dim];
                        scores[j] = dot(qi, kj) * scale;
                    }
                    softmax_in_place(&mut scores[..=i]);
                    let prow = &mut probs[pbase + i * seq..][..seq];
                    prow[..=i].copy_from_slice(&scores[..=i]);
                    let orow = &mut out[(b * seq + i) * width + off..][..head_dim];
                    for j in 0..=i {
                        let p = prow[j];
                        let vj = &vd[(b * seq + j) * width + off..][..head_dim];
                        for (o, &vv) in orow.iter_mut().zip(vj) {
                            *o = *o + p * vv;
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![batch * seq, width], out)?;
        self.checked(
            "attention",
            out,
            Op::Attention {
                q,
                k,
                v,
                geom,
                probs,
            },
            &[q, k, v],
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let mut acc = T::zero();
        for &x in self.value(a).data() {
            acc = acc + x;
        }
        self.checked("sum", Tensor::scalar(acc), Op::Sum(a), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let mut out = out;
        out.grad = None;
        self.checked("transpose", out, Op::Transpose(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let mut out = self.value(a).reshape(shape)?;
        out.grad = None;
        self.checked("reshape", out, Op::Reshape(a), &[a])
    }

    /// Accumulates d`loss`/d`leaf` into every reachable leaf that requires a gradient.
    /// Repeated calls add up; use [`Tape::zero_grads`] to clear.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                let node = &mut self.nodes[idx];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            for (var, contrib) in self.local_grads(idx, &g) {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, &b)| *a = *a + b),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        for n in &self.nodes {
            if let Some(g) = &n.grad {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite("backward".into()));
                }
            }
        }
        Ok(())
    }

    /// Gradient contributions of node `idx` to its operands, given its output gradient `g`.
    fn local_grads(&self, idx: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[idx];
        let val = |v: Var| self.nodes[v.0].value.data();
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                vec![
                    (*a, g.iter().zip(vb).map(|(&gi, &y)| gi * y).collect()),
                    (*b, g.iter().zip(va).map(|(&gi, &x)| gi * x).collect()),
                ]
            }
            Op::Scale(a, f) => vec![(*a, g.iter().map(|&gi| gi * *f).collect())],
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
                let (m, k, n) = matmul_dims(sa, sb).expect("recorded shapes");
                let mut out = Vec::new();
                if rg(*a) {
                    let mut da = vec![T::zero(); m * k];
                    matmul_nt(g, val(*b), &mut da, m, n, k);
                    out.push((*a, da));
                }
                if rg(*b) {
                    let mut db = vec![T::zero(); k * n];
                    matmul_tn(val(*a), g, &mut db, m, k, n);
                    out.push((*b, db));
                }
                out
            }
            Op::Silu(a) => {
                let d = g
                    .iter()
                    .zip(val(*a))
                    .map(|(&gi, &x)| {
                        let s = sigmoid(x);
                        gi * s * (T::one() + x * (T::one() - s))
                    })
                    .collect();
                vec![(*a, d)]
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let n = node.value.last_dim();
                let mut d = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(n).zip(g.chunks(n)) {
                    let dot_gy = dot(yr, gr);
                    d.extend(yr.iter().zip(gr).map(|(&yi, &gi)| yi * (gi - dot_gy)));
                }
                vec![(*a, d)]
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (vx, vg) = (val(*x), val(*gain));
                let h = vg.len();
                let hf = T::of(h as f64);
                let mut dx = Vec::with_capacity(vx.len());
                let mut dg = vec![T::zero(); h];
                for ((xr, gr), &r) in vx.chunks(h).zip(g.chunks(h)).zip(inv_rms) {
                    let mut s = T::zero();
                    for j in 0..h {
                        s = s + gr[j] * vg[j] * xr[j];
                        dg[j] = dg[j] + gr[j] * xr[j] * r;
                    }
                    let c = r * r * r * s / hf;
                    dx.extend((0..h).map(|j| r * vg[j] * gr[j] - xr[j] * c));
                }
                vec![(*x, dx), (*gain, dg)]
            }
            Op::Embedding { table, ids } => {
                let tv = &self.nodes[table.0].value;
                let h = tv.cols();
                let mut dt = vec![T::zero(); tv.numel()];
                for (row, &id) in g.chunks(h).zip(ids) {
                    let dst = &mut dt[id as usize * h..][..h];
                    dst.iter_mut().zip(row).for_each(|(d, &x)| *d = *d + x);
                }
                vec![(*table, dt)]
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let vocab = self.nodes[logits.0].value.last_dim();
                let scale = g[0] / T::of(targets.len() as f64);
                let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    let i = r * vocab + t as usize;
                    d[i] = d[i] - scale;
                }
                vec![(*logits, d)]
            }
            Op::Rope { x, seq, head_dim } => {
                let mut d = g.to_vec();
                rotate(&mut d, node.value.cols(), *seq, *head_dim, true);
                vec![(*x, d)]
            }
            Op::Attention { q, k, v, geom, probs } => attention_backward(
                g,
                val(*q),
                val(*k),
                val(*v),
                probs,
                *geom,
            )
            .into_iter()
            .zip([*q, *k, *v])
            .map(|(d, var)| (var, d))
            .collect(),
            Op::Sum(a) => vec![(*a, vec![g[0]; self.nodes[a.0].value.numel()])],
            Op::Transpose(a) => {
                let s = self.nodes[a.0].value.shape();
                // g has the transposed shape [c, r]
                vec![(*a, transpose_raw(g, s[1], s[0]))]
            }
            Op::Reshape(a) => vec![(*a, g.to_vec())],
        }
    }
}

fn attention_backward<T: Real>(
    g: &[T],
    qd: &[T],
    kd: &[T],
    vd: &[T],
    probs: &[T],
    geom: AttnGeom,
) -> [Vec<T>; 3] {
    let AttnGeom {
        batch,
        seq,
        heads,
        head_dim,
    } = geom;
    let width = heads * head_dim;
    let scale = T::one() / T::of(head_dim as f64).sqrt();
    let mut dq = vec![T::zero(); qd.len()];
    let mut dk = vec![T::zero(); kd.len()];
    let mut dv = vec![T::zero(); vd.len()];
    let mut dp = vec![T::zero(); seq];
    for b in 0..batch {
        for h in 0..heads {
            let off = h * head_dim;
            let pbase = (b * heads + h) * seq * seq;
            let row = |i: usize| (b * seq + i) * width + off;
            for i in 0..seq {
                let prow = &probs[pbase + i * seq..][..=i];
                let gi = &g[row(i)..][..head_dim];
                // dP = dO · Vᵀ, dV += Pᵀ · dO
                for j in 0..=i {
                    dp[j] = dot(gi, &vd[row(j)..][..head_dim]);
                    let dvj = &mut dv[row(j)..][..head_dim];
                    dvj.iter_mut().zip(gi).for_each(|(d, &x)| *d = *d + prow[j] * x);
                }
                let pd = dot(prow, &dp[..=i]);
                for j in 0..=i {
                    let ds = prow[j] * (dp[j] - pd) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    for c in 0..head_dim {
                        dq[row(i) + c] = dq[row(i) + c] + ds * kd[row(j) + c];
                        dk[row(j) + c] = dk[row(j) + c] + ds * qd[row(i) + c];
                    }
                }
            }
        }
    }
    [dq, dk, dv]
}

/// Rotates consecutive pairs within each head by the position angle (or its inverse).
fn rotate<T: Real>(data: &mut [T], width: usize, seq: usize, head_dim: usize, inverse: bool) {
    let half = head_dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| ROPE_BASE.powf(-(2.0 * i as f64) / head_dim as f64))
        .collect();
    for (r, row) in data.chunks_mut(width).enumerate() {
        let pos = (r % seq) as f64;
        for (i, &f) in freqs.iter().enumerate() {
            let angle = pos * f;
            let (s, c) = angle.sin_cos();
            let (s, c) = (T::of(if inverse { -s } else { s }), T::of(c));
            for head in row.chunks_mut(head_dim) {
                let (a, b) = (head[2 * i], head[2 * i + 1]);
                head[2 * i] = a * c - b * s;
                head[2 * i + 1] = a * s + b * c;
            }
        }
    }
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc = acc + x * y;
    }
    acc
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

pub(crate) fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for &v in row {
        total = total + (v - max).exp();
    }
    max + total.ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        t(shape, &v)
    }

    /// Central finite differences of a scalar function built on a fresh tape,
    /// compared with the tape's analytic gradient for every input.
    fn gradcheck(inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Tape<f64>, &[Var]) -> Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
        let loss = build(&mut tape, &vars);
        tape.backward(loss).unwrap();
        let h = 1e-5;
        for (n, input) in inputs.iter().enumerate() {
            let analytic = tape.grad(vars[n]).unwrap().to_vec();
            let mut numeric = Vec::new();
            for i in 0..input.numel() {
                let eval = |delta: f64| {
                    let mut perturbed = inputs.clone();
                    perturbed[n].data_mut()[i] += delta;
                    let mut tp = Tape::new();
                    let vs: Vec<Var> = perturbed.into_iter().map(|x| tp.param(x)).collect();
                    let l = build(&mut tp, &vs);
                    tp.value(l).data()[0]
                };
                numeric.push((eval(h) - eval(-h)) / (2.0 * h));
            }
            let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(numeric.iter().map(|a| a * a).sum::<f64>().sqrt());
            let rel = diff / scale.max(1e-12);
            assert!(rel < 1e-6, "input {n}: rel err {rel}\n{analytic:?}\n{numeric:?}");
        }
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&[4, 3], &mut rng);
        let b = random(&[3, 2], &mut rng);
        let c = a.matmul(&b).unwrap();
        for i in 0..4 {
            for j in 0..2 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += a.at(i, k) * b.at(k, j);
                }
                assert!((c.at(i, j) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_values_and_stability() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[0., 0., 0.]));
        let y = tape.softmax(x).unwrap();
        for &p in tape.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.constant(t(&[3], &[1000., 0., 0.]));
        let y = tape.softmax(x).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] - 1.0).abs() < 1e-12 && v[1] < 1e-300 && v.iter().all(|p| p.is_finite()));
    }

    #[test]
    fn rmsnorm_unit_and_zero_input() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[4], &[1., 1., 1., 1.]));
        let g = tape.constant(t(&[4], &[1., 1., 1., 1.]));
        let y = tape.rmsnorm(x, g, 0.0).unwrap();
        assert_eq!(tape.value(y).data(), &[1., 1., 1., 1.]);
        let z = tape.constant(Tensor::zeros(&[4]));
        let y = tape.rmsnorm(z, g, 1e-6).unwrap();
        assert_eq!(tape.value(y).data(), &[0., 0., 0., 0.]);
    }

    #[test]
    fn cross_entropy_uniform_and_margin_limit() {
        let mut tape = Tape::<f64>::new();
        let l = tape.constant(Tensor::zeros(&[2, 3, 32]));
        let loss = tape.cross_entropy(l, &[0, 5, 31, 2, 7, 9]).unwrap();
        assert!((tape.value(loss).data()[0] - 32f64.ln()).abs() < 1e-12);

        let mut prev = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 50.0] {
            let mut logits = vec![0.0; 4];
            logits[2] = margin;
            let l = tape.constant(t(&[1, 4], &logits));
            let loss = tape.cross_entropy(l, &[2]).unwrap();
            let v = tape.value(loss).data()[0];
            assert!(v < prev);
            prev = v;
        }
        assert!(prev < 1e-20);
        let l = tape.constant(Tensor::zeros(&[1, 4]));
        assert!(matches!(tape.cross_entropy(l, &[4]), Err(Error::TokenOutOfRange { .. })));
    }

    #[test]
    fn backward_square_sum_and_detached_leaf() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1., 2.]));
        let c = tape.constant(t(&[2], &[3., 4.]));
        let sq = tape.mul(x, x).unwrap();
        let with_c = tape.mul(sq, c).unwrap();
        let _ = with_c;
        let s = tape.sum(sq).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2., 4.]);
        assert!(tape.grad(c).is_none());
        // a second call accumulates
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4., 8.]);
        tape.zero_grads();
        assert!(tape.grad(x).is_none());
        assert!(matches!(tape.backward(sq), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn gradcheck_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random(&[3, 5], &mut rng);
        gradcheck(vec![random(&[3, 5], &mut rng)], |tp, v| {
            let y = tp.softmax(v[0]).unwrap();
            let wv = tp.constant(w.clone());
            let p = tp.mul(y, wv).unwrap();
            tp.sum(p).unwrap()
        });
    }

    #[test]
    fn gradcheck_rmsnorm() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = random(&[4, 6], &mut rng);
        gradcheck(vec![random(&[4, 6], &mut rng), random(&[6], &mut rng)], |tp, v| {
            let y = tp.rmsnorm(v[0], v[1], 1e-5).unwrap();
            let wv = tp.constant(w.clone());
            let p = tp.mul(y, wv).unwrap();
            tp.sum(p).unwrap()
        });
    }

    #[test]
    fn gradcheck_cross_entropy_matmul_silu() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        gradcheck(vec![random(&[5, 4], &mut rng), random(&[4, 7], &mut rng)], |tp, v| {
            let h = tp.matmul(v[0], v[1]).unwrap();
            let a = tp.silu(h).unwrap();
            tp.cross_entropy(a, &[0, 6, 3, 3, 1]).unwrap()
        });
    }

    #[test]
    fn gradcheck_embedding_transpose_reshape_scale_add() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = random(&[3, 4], &mut rng);
        gradcheck(vec![random(&[5, 3], &mut rng), random(&[4, 3], &mut rng)], |tp, v| {
            let e = tp.embedding(v[0], &[4, 0, 4, 2]).unwrap();
            let bt = tp.transpose(v[1]).unwrap();
            let et = tp.transpose(e).unwrap();
            let s = tp.add(bt, et).unwrap();
            let s = tp.scale(s, 0.7).unwrap();
            let r = tp.reshape(s, &[4, 3]).unwrap();
            let r = tp.reshape(r, &[3, 4]).unwrap();
            let wv = tp.constant(w.clone());
            let p = tp.mul(r, wv).unwrap();
            let p = tp.mul(p, r).unwrap();
            tp.sum(p).unwrap()
        });
    }

    #[test]
    fn gradcheck_rope_and_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (batch, seq, heads, hd) = (2, 3, 2, 4);
        let w = random(&[batch * seq, heads * hd], &mut rng);
        let shape = [batch * seq, heads * hd];
        gradcheck(
            vec![random(&shape, &mut rng), random(&shape, &mut rng), random(&shape, &mut rng)],
            |tp, v| {
                let q = tp.rope(v[0], seq, hd).unwrap();
                let k = tp.rope(v[1], seq, hd).unwrap();
                let o = tp.causal_attention(q, k, v[2], batch, seq, heads, hd).unwrap();
                let wv = tp.constant(w.clone());
                let p = tp.mul(o, wv).unwrap();
                tp.sum(p).unwrap()
            },
        );
    }

    #[test]
    fn rope_preserves_norm_and_position_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(&[4, 8], &mut rng);
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let r = tape.rope(v, 4, 4).unwrap();
        let y = tape.value(r);
        assert_eq!(&y.data()[..8], &x.data()[..8]);
        for row in 0..4 {
            let n0: f64 = x.data()[row * 8..][..8].iter().map(|a| a * a).sum();
            let n1: f64 = y.data()[row * 8..][..8].iter().map(|a| a * a).sum();
            assert!((n0 - n1).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_is_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (seq, hd) = (4, 2);
        let q = random(&[seq, hd], &mut rng);
        let k = random(&[seq, hd], &mut rng);
        let v = random(&[seq, hd], &mut rng);
        let run = |v: &Tensor<f64>| {
            let mut tape = Tape::new();
            let (a, b, c) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
            let o = tape.causal_attention(a, b, c, 1, seq, 1, hd).unwrap();
            tape.value(o).clone()
        };
        let base = run(&v);
        let mut v2 = v.clone();
        v2.data_mut()[3 * hd] += 10.0;
        let changed = run(&v2);
        assert_eq!(&base.data()[..3 * hd], &changed.data()[..3 * hd]);
        assert_ne!(&base.data()[3 * hd..], &changed.data()[3 * hd..]);
    }
}
