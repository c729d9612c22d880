//! Reverse-mode tape over dense [`Tensor`]s.
//!
//! Every primitive pushes a node holding its output value and whatever it
//! needs for the local gradient rule. Nodes are appended in evaluation order,
//! so the node vector is already a topological order and `backward` is a
//! single reverse sweep. All reductions run left to right in a fixed order,
//! which makes forward values and gradients bit-reproducible.

use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Probability floor applied before logs in the symmetric KL.
pub const PROB_FLOOR: f64 = 1e-8;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    MatMul(Var, Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    GatherRows {
        src: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Var, Var),
    ScaleRows {
        x: Var,
        factors: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        probs: Vec<f64>,
        key_mask: Vec<bool>,
        batch: usize,
        seq: usize,
        heads: usize,
    },
    SphereProject {
        x: Var,
        eps: f64,
        norms: Vec<f64>,
    },
    SymmetricKl(Var, Var),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive operations.
///
/// A tape is single-owner: build it, call [`Tape::backward`], drop it.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every node that required them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient buffer for `v`, or `None` when `v` does not influence the loss
    /// or does not require gradients.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf that receives a gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim(op, sa, sb));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(va.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|x| x * c).collect();
        let out = Tensor::new(va.shape(), data).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    /// Adds a length-`c` bias to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let c = vx.cols();
        if vb.len() != c {
            return Err(Error::dim("add_bias", vx.shape(), vb.shape()));
        }
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(c) {
            for (o, b) in row.iter_mut().zip(vb.data()) {
                *o += b;
            }
        }
        let out = Tensor::new(vx.shape(), data).expect("same shape");
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, Op::AddBias(x, bias), rg))
    }

    /// Matrix product of two 2-D tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().len() != 2 || vb.shape().len() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(Error::dim("matmul", va.shape(), vb.shape()));
        }
        let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(va.data(), vb.data(), &mut out, m, k, n);
        let out = Tensor::new(&[m, n], out).expect("shape");
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `x · w + b` for `x` of any rank (leading dims flattened).
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().unwrap();
        let rows = self.value(x).rows();
        let x2 = self.reshape(x, &[rows, c])?;
        let y = self.matmul(x2, w)?;
        let y = self.add_bias(y, b)?;
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.value(y).cols();
        self.reshape(y, &out_shape)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| gelu(v)).collect();
        let out = Tensor::new(vx.shape(), data).expect("shape");
        let rg = self.rg(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        vx.check_finite("softmax_rows input")?;
        let c = vx.cols();
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(c) {
            softmax_in_place(row);
        }
        let out = Tensor::new(vx.shape(), data).expect("shape");
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SoftmaxRows(x), rg))
    }

    /// Row standardization with population variance, then `gain * xhat + bias`.
    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
        let n = vx.cols();
        if n < 2 {
            return Err(Error::Contract("layer_norm_rows needs rows of width >= 2".into()));
        }
        if !(eps > 0.0) {
            return Err(Error::Domain(format!("layer norm eps must be > 0, got {eps}")));
        }
        if vg.len() != n || vb.len() != n {
            return Err(Error::dim("layer_norm_rows", vx.shape(), vg.shape()));
        }
        let rows = vx.rows();
        let mut xhat = vec![0.0; vx.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; vx.len()];
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().fold(0.0, |a, v| a + v) / n as f64;
            let var = row.iter().fold(0.0, |a, v| a + (v - mean) * (v - mean)) / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = h * vg.data()[j] + vb.data()[j];
            }
        }
        let out = Tensor::new(vx.shape(), out).expect("shape");
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Mean over all entries of the numerically stable binary cross entropy
    /// between `sigmoid(logits)` and `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let vl = self.value(logits);
        if vl.shape() != targets.shape() {
            return Err(Error::dim("bce_with_logits", vl.shape(), targets.shape()));
        }
        if let Some(t) = targets.data().iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::Domain(format!("BCE target {t} outside [0, 1]")));
        }
        let n = vl.len() as f64;
        let total = vl
            .data()
            .iter()
            .zip(targets.data())
            .fold(0.0, |acc, (&x, &t)| acc + bce_term(x, t));
        let out = Tensor::scalar(total / n);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            out,
            Op::BceWithLogits {
                logits,
                targets: targets.data().to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.sum() / v.len() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Selects rows of a 2-D `src` by index; the backward pass scatter-adds.
    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let vs = self.value(src);
        let (rows, c) = (vs.rows(), vs.cols());
        if idx.is_empty() {
            return Err(Error::Contract("gather_rows with no indices".into()));
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= rows {
                return Err(Error::Domain(format!("row index {i} >= {rows}")));
            }
            data.extend_from_slice(vs.row(i));
        }
        let out = Tensor::new(&[idx.len(), c], data).expect("shape");
        let rg = self.rg(&[src]);
        Ok(self.push(
            out,
            Op::GatherRows {
                src,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Stacks the rows of `b` under the rows of `a`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.cols() {
            return Err(Error::dim("concat_rows", va.shape(), vb.shape()));
        }
        let c = va.cols();
        let mut data = va.data().to_vec();
        data.extend_from_slice(vb.data());
        let out = Tensor::new(&[va.rows() + vb.rows(), c], data).expect("shape");
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::ConcatRows(a, b), rg))
    }

    /// Multiplies row `i` by `factors[i]`. A zero factor writes an exact `+0.0`.
    pub fn scale_rows(&mut self, x: Var, factors: &[f64]) -> Result<Var> {
        let vx = self.value(x);
        if factors.len() != vx.rows() {
            return Err(Error::dim("scale_rows", vx.shape(), &[factors.len()]));
        }
        let c = vx.cols();
        let mut data = vx.data().to_vec();
        for (row, &f) in data.chunks_mut(c).zip(factors) {
            if f == 0.0 {
                row.fill(0.0);
            } else if f != 1.0 {
                row.iter_mut().for_each(|v| *v *= f);
            }
        }
        let out = Tensor::new(vx.shape(), data).expect("shape");
        let rg = self.rg(&[x]);
        Ok(self.push(
            out,
            Op::ScaleRows {
                x,
                factors: factors.to_vec(),
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product attention over `batch` sequences of
    /// length `seq`, with `q`, `k`, `v` shaped `[batch*seq, d]`. Keys whose
    /// `key_mask` entry is false receive zero attention weight.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        key_mask: &[bool],
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<Var> {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        if vq.shape() != vk.shape() || vq.shape() != vv.shape() {
            return Err(Error::dim("attention", vq.shape(), vk.shape()));
        }
        let d = vq.cols();
        if vq.rows() != batch * seq || key_mask.len() != batch * seq {
            return Err(Error::dim("attention", vq.shape(), &[batch, seq]));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Contract(format!("width {d} not divisible by {heads} heads")));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (vq.data(), vk.data(), vv.data());
        let mut out = vec![0.0; batch * seq * d];
        let mut probs = vec![0.0; batch * heads * seq * seq];
        for b in 0..batch {
            let mask = &key_mask[b * seq..(b + 1) * seq];
            for h in 0..heads {
                let off = h * dh;
                for i in 0..seq {
                    let qi = &qd[(b * seq + i) * d + off..][..dh];
                    let p = &mut probs[((b * heads + h) * seq + i) * seq..][..seq];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..seq {
                        if mask[j] {
                            let kj = &kd[(b * seq + j) * d + off..][..dh];
                            let s = dot(qi, kj) * scale;
                            p[j] = s;
                            max = max.max(s);
                        }
                    }
                    if max == f64::NEG_INFINITY {
                        continue;
                    }
                    let mut z = 0.0;
                    for j in 0..seq {
                        if mask[j] {
                            let e = (p[j] - max).exp();
                            p[j] = e;
                            z += e;
                        }
                    }
                    let o = &mut out[(b * seq + i) * d + off..][..dh];
                    for j in 0..seq {
                        if mask[j] {
                            p[j] /= z;
                            let vj = &vd[(b * seq + j) * d + off..][..dh];
                            for t in 0..dh {
                                o[t] += p[j] * vj[t];
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vq.shape(), out).expect("shape");
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                probs,
                key_mask: key_mask.to_vec(),
                batch,
                seq,
                heads,
            },
            rg,
        ))
    }

    /// Rescales every row to L2 norm `eps`. Zero rows pass through unchanged,
    /// and rows already at norm `eps` to within a few ulps are left as is so
    /// that the projection is exactly idempotent.
    pub fn project_rows_to_sphere(&mut self, x: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::Domain(format!("sphere radius must be > 0, got {eps}")));
        }
        let vx = self.value(x);
        let c = vx.cols();
        let mut data = vx.data().to_vec();
        let mut norms = Vec::with_capacity(vx.rows());
        for row in data.chunks_mut(c) {
            let n = row.iter().fold(0.0, |a, v| a + v * v).sqrt();
            norms.push(n);
            if n == 0.0 {
                continue;
            }
            let s = eps / n;
            if (s - 1.0).abs() <= 8.0 * f64::EPSILON {
                continue;
            }
            row.iter_mut().for_each(|v| *v = *v * eps / n);
        }
        let out = Tensor::new(vx.shape(), data).expect("shape");
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SphereProject { x, eps, norms }, rg))
    }

    /// Mean over rows of `KL(p||q) + KL(q||p)` for row-stochastic `p`, `q`,
    /// with entries floored at [`PROB_FLOOR`] before taking logs.
    pub fn symmetric_kl(&mut self, p: Var, q: Var) -> Result<Var> {
        self.same_shape("symmetric_kl", p, q)?;
        let (vp, vq) = (self.value(p), self.value(q));
        for t in [vp, vq] {
            for r in 0..t.rows() {
                let s = t.row(r).iter().fold(0.0, |a, v| a + v);
                if (s - 1.0).abs() > 1e-6 || t.row(r).iter().any(|v| *v < 0.0) {
                    return Err(Error::Contract(format!(
                        "row {r} is not a probability vector (sum {s})"
                    )));
                }
            }
        }
        let c = vp.cols();
        let rows = vp.rows();
        let mut total = 0.0;
        for r in 0..rows {
            let mut acc = 0.0;
            for j in 0..c {
                let a = vp.data()[r * c + j].max(PROB_FLOOR);
                let b = vq.data()[r * c + j].max(PROB_FLOOR);
                acc += (a - b) * (a.ln() - b.ln());
            }
            total += acc;
        }
        let out = Tensor::scalar(total / rows as f64);
        let rg = self.rg(&[p, q]);
        Ok(self.push(out, Op::SymmetricKl(p, q), rg))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Returns fresh gradient buffers; callers accumulate them into parameter
    /// storage (see [`crate::autodiff::ParamStore::accumulate`]).
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |buf| add_into(buf, g));
                self.acc(grads, *b, |buf| add_into(buf, g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |buf| add_into(buf, g));
                self.acc(grads, *b, |buf| {
                    buf.iter_mut().zip(g).for_each(|(o, x)| *o -= x)
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |buf| {
                    for ((o, x), y) in buf.iter_mut().zip(g).zip(vb) {
                        *o += x * y;
                    }
                });
                self.acc(grads, *b, |buf| {
                    for ((o, x), y) in buf.iter_mut().zip(g).zip(va) {
                        *o += x * y;
                    }
                });
            }
            Op::Scale(a, c) => {
                self.acc(grads, *a, |buf| {
                    buf.iter_mut().zip(g).for_each(|(o, x)| *o += x * c)
                });
            }
            Op::AddBias(x, b) => {
                self.acc(grads, *x, |buf| add_into(buf, g));
                let c = self.value(*b).len();
                self.acc(grads, *b, |buf| {
                    for row in g.chunks(c) {
                        add_into(buf, row);
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                // dA = dC · B^T
                self.acc(grads, *a, |buf| {
                    for r in 0..m {
                        let gr = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            buf[r * k + p] += dot(gr, &vb.data()[p * n..(p + 1) * n]);
                        }
                    }
                });
                // dB = A^T · dC
                self.acc(grads, *b, |buf| {
                    for r in 0..m {
                        let gr = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let a = va.data()[r * k + p];
                            if a == 0.0 {
                                continue;
                            }
                            let row = &mut buf[p * n..(p + 1) * n];
                            for (o, x) in row.iter_mut().zip(gr) {
                                *o += a * x;
                            }
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let vx = self.value(*x).data();
                self.acc(grads, *x, |buf| {
                    for ((o, gi), xi) in buf.iter_mut().zip(g).zip(vx) {
                        *o += gi * gelu_grad(*xi);
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let c = node.value.cols();
                self.acc(grads, *x, |buf| {
                    for ((o, gr), y) in buf.chunks_mut(c).zip(g.chunks(c)).zip(out.chunks(c)) {
                        let s = dot(gr, y);
                        for j in 0..c {
                            o[j] += y[j] * (gr[j] - s);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = node.value.cols();
                let gv = self.value(*gain).data();
                self.acc(grads, *x, |buf| {
                    let mut dxh = vec![0.0; n];
                    for (r, is) in inv_std.iter().enumerate() {
                        let gr = &g[r * n..(r + 1) * n];
                        let xh = &xhat[r * n..(r + 1) * n];
                        for j in 0..n {
                            dxh[j] = gr[j] * gv[j];
                        }
                        let s1 = dxh.iter().fold(0.0, |a, v| a + v);
                        let s2 = dot(&dxh, xh);
                        let o = &mut buf[r * n..(r + 1) * n];
                        for j in 0..n {
                            o[j] += is / n as f64 * (n as f64 * dxh[j] - s1 - xh[j] * s2);
                        }
                    }
                });
                self.acc(grads, *gain, |buf| {
                    for (gr, xh) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            buf[j] += gr[j] * xh[j];
                        }
                    }
                });
                self.acc(grads, *bias, |buf| {
                    for gr in g.chunks(n) {
                        add_into(buf, gr);
                    }
                });
            }
            Op::BceWithLogits { logits, targets } => {
                let vl = self.value(*logits).data();
                let scale = g[0] / vl.len() as f64;
                self.acc(grads, *logits, |buf| {
                    for ((o, x), t) in buf.iter_mut().zip(vl).zip(targets) {
                        *o += scale * (sigmoid(*x) - t);
                    }
                });
            }
            Op::Sum(x) => {
                self.acc(grads, *x, |buf| buf.iter_mut().for_each(|o| *o += g[0]));
            }
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                self.acc(grads, *x, |buf| buf.iter_mut().for_each(|o| *o += g[0] / n));
            }
            Op::GatherRows { src, idx } => {
                let c = node.value.cols();
                self.acc(grads, *src, |buf| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut buf[i * c..(i + 1) * c], &g[r * c..(r + 1) * c]);
                    }
                });
            }
            Op::ConcatRows(a, b) => {
                let na = self.value(*a).len();
                self.acc(grads, *a, |buf| add_into(buf, &g[..na]));
                self.acc(grads, *b, |buf| add_into(buf, &g[na..]));
            }
            Op::ScaleRows { x, factors } => {
                let c = node.value.cols();
                self.acc(grads, *x, |buf| {
                    for ((o, gr), f) in buf.chunks_mut(c).zip(g.chunks(c)).zip(factors) {
                        if *f != 0.0 {
                            for (oi, gi) in o.iter_mut().zip(gr) {
                                *oi += gi * f;
                            }
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                probs,
                key_mask,
                batch,
                seq,
                heads,
            } => {
                let (batch, seq, heads) = (*batch, *seq, *heads);
                let d = node.value.cols();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                );
                let mut dq = vec![0.0; qd.len()];
                let mut dk = vec![0.0; kd.len()];
                let mut dv = vec![0.0; vd.len()];
                let mut dp = vec![0.0; seq];
                for b in 0..batch {
                    let mask = &key_mask[b * seq..(b + 1) * seq];
                    for h in 0..heads {
                        let off = h * dh;
                        for i in 0..seq {
                            let p = &probs[((b * heads + h) * seq + i) * seq..][..seq];
                            let gi = &g[(b * seq + i) * d + off..][..dh];
                            let mut s = 0.0;
                            for j in 0..seq {
                                if !mask[j] {
                                    continue;
                                }
                                let vj = &vd[(b * seq + j) * d + off..][..dh];
                                dp[j] = dot(gi, vj);
                                s += p[j] * dp[j];
                                let dvj = &mut dv[(b * seq + j) * d + off..][..dh];
                                for t in 0..dh {
                                    dvj[t] += p[j] * gi[t];
                                }
                            }
                            let qi = &qd[(b * seq + i) * d + off..][..dh];
                            for j in 0..seq {
                                if !mask[j] {
                                    continue;
                                }
                                let ds = p[j] * (dp[j] - s) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let kj = &kd[(b * seq + j) * d + off..][..dh];
                                let dqi = &mut dq[(b * seq + i) * d + off..][..dh];
                                for t in 0..dh {
                                    dqi[t] += ds * kj[t];
                                }
                                let dkj = &mut dk[(b * seq + j) * d + off..][..dh];
                                for t in 0..dh {
                                    dkj[t] += ds * qi[t];
                                }
                            }
                        }
                    }
                }
                self.acc(grads, *q, |buf| add_into(buf, &dq));
                self.acc(grads, *k, |buf| add_into(buf, &dk));
                self.acc(grads, *v, |buf| add_into(buf, &dv));
            }
            Op::SphereProject { x, eps, norms } => {
                let c = node.value.cols();
                let vx = self.value(*x).data();
                self.acc(grads, *x, |buf| {
                    for (r, &n) in norms.iter().enumerate() {
                        let gr = &g[r * c..(r + 1) * c];
                        let o = &mut buf[r * c..(r + 1) * c];
                        if n == 0.0 {
                            add_into(o, gr);
                            continue;
                        }
                        let xr = &vx[r * c..(r + 1) * c];
                        let proj = dot(xr, gr) / (n * n);
                        let s = eps / n;
                        for j in 0..c {
                            o[j] += s * (gr[j] - xr[j] * proj);
                        }
                    }
                });
            }
            Op::SymmetricKl(p, q) => {
                let (vp, vq) = (self.value(*p), self.value(*q));
                let scale = g[0] / vp.rows() as f64;
                let (pd, qd) = (vp.data(), vq.data());
                self.acc(grads, *p, |buf| {
                    for j in 0..buf.len() {
                        if pd[j] > PROB_FLOOR {
                            let (a, b) = (pd[j], qd[j].max(PROB_FLOOR));
                            buf[j] += scale * ((a.ln() - b.ln()) + (a - b) / a);
                        }
                    }
                });
                self.acc(grads, *q, |buf| {
                    for j in 0..buf.len() {
                        if qd[j] > PROB_FLOOR {
                            let (a, b) = (pd[j].max(PROB_FLOOR), qd[j]);
                            buf[j] += scale * ((b.ln() - a.ln()) + (b - a) / b);
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                self.acc(grads, *x, |buf| add_into(buf, g));
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let buf = grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]);
        f(buf);
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (o, x) in dst.iter_mut().zip(src) {
        *o += x;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let o = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let x = a[i * k + p];
            if x == 0.0 {
                continue;
            }
            let br = &b[p * n..(p + 1) * n];
            for (oj, bj) in o.iter_mut().zip(br) {
                *oj += x * bj;
            }
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn bce_term(x: f64, t: f64) -> f64 {
    x.max(0.0) - x * t + (-x.abs()).exp().ln_1p()
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
