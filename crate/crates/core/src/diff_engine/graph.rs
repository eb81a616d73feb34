use std::borrow::Cow;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::kernels::{gemm, softmax_backward_row, softmax_in_place};
use super::{DiffError, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Whether stochastic layers are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Deliberate backward-pass corruption, used to prove that the gradient
/// checker can detect a broken derivative.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Fault {
    /// Multiply the gradient flowing into the right-hand operand of every
    /// matmul by the given factor.
    ScaleMatmulRhsGrad(f64),
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Transpose { x: Var },
    AddBias { x: Var, bias: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    Relu { x: Var },
    SoftmaxRows { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, blocks: usize, heads: usize, probs: Vec<f64> },
    Dropout { x: Var, mask: Vec<f64> },
    MeanPool { x: Var, group: usize },
    ConcatCols { a: Var, b: Var },
    Sum { x: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, weights: Vec<f64>, probs: Vec<f64> },
}

struct Node<'a> {
    shape: Vec<usize>,
    value: Cow<'a, [f64]>,
    op: Op,
    requires_grad: bool,
}

/// Tape of executed primitives.
///
/// Nodes are appended in execution order, so the node vector is already a
/// topological order; [`Graph::backward`] walks it once in reverse.
/// Parameters can be borrowed for the lifetime of the graph so a training
/// step never copies weights.
#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    grads: Vec<Option<Vec<f64>>>,
    fault: Option<Fault>,
}

fn dims(shape: &[usize]) -> (usize, usize) {
    match shape {
        [d] => (1, *d),
        [r, c] => (*r, *c),
        _ => (0, 0),
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    #[doc(hidden)]
    pub fn set_fault(&mut self, fault: Option<Fault>) {
        self.fault = fault;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Cow<'a, [f64]>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { shape, value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(shape, Cow::Owned(value), op, rg)
    }

    /// Trainable leaf borrowing `t`.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.push(t.shape().to_vec(), Cow::Borrowed(t.data()), Op::Leaf, true)
    }

    pub fn param_owned(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, Cow::Owned(t.into_data()), Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: &'a Tensor) -> Var {
        self.push(t.shape().to_vec(), Cow::Borrowed(t.data()), Op::Leaf, false)
    }

    pub fn constant_owned(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, Cow::Owned(t.into_data()), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.to_vec()).expect("node shape is consistent")
    }

    /// Gradient accumulated by the last [`backward`](Self::backward), if the
    /// node took part in it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        self.grad(v)
            .map(|g| Tensor::new(self.nodes[v.0].shape.clone(), g.to_vec()).expect("grad shape"))
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        dims(&self.nodes[v.0].shape)
    }

    fn require_2d(&self, v: Var, what: &str) -> Result<(usize, usize), DiffError> {
        let s = &self.nodes[v.0].shape;
        if s.len() != 2 {
            return Err(DiffError::Shape(format!("{what}: expected a matrix, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (m, k) = self.require_2d(a, "matmul lhs")?;
        let (k2, n) = self.require_2d(b, "matmul rhs")?;
        if k != k2 {
            return Err(DiffError::Shape(format!("matmul inner extents {k} vs {k2}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, false);
        Ok(self.push_op(vec![m, n], out, Op::MatMul { a, b }, &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, DiffError> {
        let (r, c) = self.require_2d(x, "transpose")?;
        let src = self.value(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.push_op(vec![c, r], out, Op::Transpose { x }, &[x]))
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, DiffError> {
        let (r, c) = self.dims(x);
        if self.value(bias).len() != c {
            return Err(DiffError::Shape(format!(
                "bias of {} values for {c} columns",
                self.value(bias).len()
            )));
        }
        let b = self.value(bias);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(c.max(1)).take(r) {
            row.iter_mut().zip(b).for_each(|(o, bi)| *o += bi);
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push_op(shape, out, Op::AddBias { x, bias }, &[x, bias]))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(), DiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(DiffError::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push_op(shape, out, Op::Add { a, b }, &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push_op(shape, out, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        self.push_op(shape, out, Op::Scale { x, factor }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let shape = self.shape(x).to_vec();
        self.push_op(shape, out, Op::Relu { x }, &[x])
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (_, c) = self.dims(x);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(c.max(1)) {
            softmax_in_place(row);
        }
        let shape = self.shape(x).to_vec();
        self.push_op(shape, out, Op::SoftmaxRows { x }, &[x])
    }

    /// Per-row normalisation over the last axis (population variance),
    /// followed by the `gamma`/`beta` affine map.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, DiffError> {
        let (r, d) = self.dims(x);
        if d < 2 {
            return Err(DiffError::Shape("layer_norm needs at least 2 features".into()));
        }
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(DiffError::Shape("layer_norm affine width mismatch".into()));
        }
        if eps <= 0.0 {
            return Err(DiffError::InvalidArgument("layer_norm eps must be positive".into()));
        }
        let xs = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![0.0; r * d];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * d];
        for i in 0..r {
            let row = &xs[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[i * d + j] = h;
                out[i * d + j] = h * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push_op(shape, out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, &[x, gamma, beta]))
    }

    /// Scaled dot-product attention `softmax(Q·Kᵀ/√d_k)·V` on whole
    /// matrices: one block, one head.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var, DiffError> {
        self.attention_blocked(q, k, v, 1, 1)
    }

    /// Attention applied independently to `blocks` equal row-groups (one
    /// per clip in a batch) and `heads` equal column slices. Each head
    /// scales by `1/√(cols/heads)`.
    pub fn attention_blocked(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        blocks: usize,
        heads: usize,
    ) -> Result<Var, DiffError> {
        let (qr, dq) = self.require_2d(q, "attention query")?;
        let (kr, dk) = self.require_2d(k, "attention key")?;
        let (vr, dv) = self.require_2d(v, "attention value")?;
        if dq != dk {
            return Err(DiffError::Shape(format!("query width {dq} vs key width {dk}")));
        }
        if kr != vr {
            return Err(DiffError::Shape(format!("{kr} keys vs {vr} values")));
        }
        if blocks == 0 || heads == 0 || qr % blocks != 0 || kr % blocks != 0 || kr == 0 {
            return Err(DiffError::Shape(format!(
                "{qr} queries / {kr} keys cannot form {blocks} non-empty blocks"
            )));
        }
        if dq % heads != 0 || dv % heads != 0 {
            return Err(DiffError::Shape(format!("widths {dq}/{dv} not divisible by {heads} heads")));
        }
        let (tq, s) = (qr / blocks, kr / blocks);
        let (hk, hv) = (dq / heads, dv / heads);
        let scale = 1.0 / (hk as f64).sqrt();
        let (qs, ks, vs) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0; blocks * heads * tq * s];
        let mut out = vec![0.0; qr * dv];
        for b in 0..blocks {
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * tq * s..][..tq * s];
                for i in 0..tq {
                    let qi = &qs[(b * tq + i) * dq + h * hk..][..hk];
                    let prow = &mut p[i * s..(i + 1) * s];
                    for (j, pj) in prow.iter_mut().enumerate() {
                        let kj = &ks[(b * s + j) * dk + h * hk..][..hk];
                        *pj = qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() * scale;
                    }
                    softmax_in_place(prow);
                    let orow = &mut out[(b * tq + i) * dv + h * hv..][..hv];
                    for (j, &pj) in prow.iter().enumerate() {
                        let vj = &vs[(b * s + j) * dv + h * hv..][..hv];
                        orow.iter_mut().zip(vj).for_each(|(o, x)| *o += pj * x);
                    }
                }
            }
        }
        let op = Op::Attention { q, k, v, blocks, heads, probs };
        Ok(self.push_op(vec![qr, dv], out, op, &[q, k, v]))
    }

    /// Inverted dropout. Identity in eval mode or when `p == 0`; the mask
    /// is a pure function of `seed`.
    pub fn dropout(&mut self, x: Var, p: f64, mode: Mode, seed: u64) -> Result<Var, DiffError> {
        if !(0.0..1.0).contains(&p) {
            return Err(DiffError::InvalidArgument(format!("dropout probability {p} not in [0, 1)")));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let out = self.value(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push_op(shape, out, Op::Dropout { x, mask }, &[x]))
    }

    /// Averages consecutive groups of `group` rows.
    pub fn mean_pool(&mut self, x: Var, group: usize) -> Result<Var, DiffError> {
        let (r, c) = self.require_2d(x, "mean_pool")?;
        if group == 0 || r % group != 0 {
            return Err(DiffError::Shape(format!("{r} rows do not split into groups of {group}")));
        }
        let n = r / group;
        let xs = self.value(x);
        let mut out = vec![0.0; n * c];
        let w = 1.0 / group as f64;
        for i in 0..r {
            let dst = &mut out[(i / group) * c..][..c];
            dst.iter_mut().zip(&xs[i * c..(i + 1) * c]).for_each(|(o, v)| *o += v * w);
        }
        Ok(self.push_op(vec![n, c], out, Op::MeanPool { x, group }, &[x]))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ra, ca) = self.require_2d(a, "concat lhs")?;
        let (rb, cb) = self.require_2d(b, "concat rhs")?;
        if ra != rb {
            return Err(DiffError::Shape(format!("concat of {ra} and {rb} rows")));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            out.extend_from_slice(&av[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&bv[i * cb..(i + 1) * cb]);
        }
        Ok(self.push_op(vec![ra, ca + cb], out, Op::ConcatCols { a, b }, &[a, b]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.push_op(vec![1], vec![s], Op::Sum { x }, &[x])
    }

    /// `x·W + b`, with the bias optional.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, DiffError> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    /// Position-wise feed-forward block `relu(x·W1 + b1)·W2 + b2`.
    pub fn ffn(&mut self, x: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Result<Var, DiffError> {
        let h = self.linear(x, w1, Some(b1))?;
        let h = self.relu(h);
        self.linear(h, w2, Some(b2))
    }

    /// Mean cross-entropy of `logits` against integer labels.
    ///
    /// With `class_weights`, each sample contributes in proportion to the
    /// weight of its label and the result is normalised by the total weight.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
        class_weights: Option<&[f64]>,
    ) -> Result<Var, DiffError> {
        let (b, c) = self.require_2d(logits, "cross_entropy logits")?;
        if b == 0 || labels.len() != b {
            return Err(DiffError::Shape(format!("{} labels for {b} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(DiffError::LabelOutOfRange { label: bad, classes: c });
        }
        if let Some(w) = class_weights {
            if w.len() != c {
                return Err(DiffError::Shape(format!("{} class weights for {c} classes", w.len())));
            }
        }
        let z = self.value(logits);
        if !z.iter().all(|v| v.is_finite()) {
            return Err(DiffError::NonFinite("logits".into()));
        }
        let raw: Vec<f64> = labels.iter().map(|&l| class_weights.map_or(1.0, |w| w[l])).collect();
        let total: f64 = raw.iter().sum();
        if total <= 0.0 {
            return Err(DiffError::InvalidArgument("class weights sum to zero".into()));
        }
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let mut probs = z.to_vec();
        let mut loss = 0.0;
        for (i, row) in probs.chunks_mut(c).enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += weights[i] * (lse - row[labels[i]]);
            softmax_in_place(row);
        }
        let op = Op::CrossEntropy { logits, labels: labels.to_vec(), weights, probs };
        Ok(self.push_op(vec![1], vec![loss], op, &[logits]))
    }

    /// Reverse-mode sweep from a scalar node. Previous gradients are
    /// discarded; within one sweep contributions accumulate by addition.
    pub fn backward(&mut self, loss: Var) -> Result<(), DiffError> {
        let numel = self.nodes[loss.0].value.len();
        if numel != 1 {
            return Err(DiffError::NotScalar { numel });
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = self.grads[idx].take() else { continue };
            propagate(&self.nodes, &mut self.grads, idx, &g, self.fault);
            self.grads[idx] = Some(g);
        }
        Ok(())
    }
}

fn slot<'g>(nodes: &[Node<'_>], grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut [f64]> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
}

fn propagate(nodes: &[Node<'_>], grads: &mut [Option<Vec<f64>>], idx: usize, g: &[f64], fault: Option<Fault>) {
    let val = |v: Var| -> &[f64] { &nodes[v.0].value };
    match &nodes[idx].op {
        Op::Leaf => {}
        Op::MatMul { a, b } => {
            let (m, k) = dims(&nodes[a.0].shape);
            let (_, n) = dims(&nodes[b.0].shape);
            if let Some(da) = slot(nodes, grads, *a) {
                gemm(m, n, k, g, false, val(*b), true, da, true);
            }
            if let Some(db) = slot(nodes, grads, *b) {
                match fault {
                    Some(Fault::ScaleMatmulRhsGrad(f)) => {
                        let mut tmp = vec![0.0; k * n];
                        gemm(k, m, n, val(*a), true, g, false, &mut tmp, false);
                        db.iter_mut().zip(tmp).for_each(|(d, t)| *d += f * t);
                    }
                    None => gemm(k, m, n, val(*a), true, g, false, db, true),
                }
            }
        }
        Op::Transpose { x } => {
            let (r, c) = dims(&nodes[x.0].shape);
            if let Some(dx) = slot(nodes, grads, *x) {
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] += g[j * r + i];
                    }
                }
            }
        }
        Op::AddBias { x, bias } => {
            let (_, c) = dims(&nodes[x.0].shape);
            if let Some(dx) = slot(nodes, grads, *x) {
                dx.iter_mut().zip(g).for_each(|(d, gi)| *d += gi);
            }
            if let Some(db) = slot(nodes, grads, *bias) {
                for row in g.chunks(c) {
                    db.iter_mut().zip(row).for_each(|(d, gi)| *d += gi);
                }
            }
        }
        Op::Add { a, b } => {
            for v in [*a, *b] {
                if let Some(d) = slot(nodes, grads, v) {
                    d.iter_mut().zip(g).for_each(|(d, gi)| *d += gi);
                }
            }
        }
        Op::Mul { a, b } => {
            if let Some(da) = slot(nodes, grads, *a) {
                for ((d, gi), y) in da.iter_mut().zip(g).zip(val(*b)) {
                    *d += gi * y;
                }
            }
            if let Some(db) = slot(nodes, grads, *b) {
                for ((d, gi), x) in db.iter_mut().zip(g).zip(val(*a)) {
                    *d += gi * x;
                }
            }
        }
        Op::Scale { x, factor } => {
            if let Some(dx) = slot(nodes, grads, *x) {
                dx.iter_mut().zip(g).for_each(|(d, gi)| *d += gi * factor);
            }
        }
        Op::Relu { x } => {
            if let Some(dx) = slot(nodes, grads, *x) {
                for ((d, gi), xi) in dx.iter_mut().zip(g).zip(val(*x)) {
                    if *xi > 0.0 {
                        *d += gi;
                    }
                }
            }
        }
        Op::SoftmaxRows { x } => {
            let (_, c) = dims(&nodes[x.0].shape);
            let out = &nodes[idx].value;
            if let Some(dx) = slot(nodes, grads, *x) {
                let mut tmp = vec![0.0; c];
                for ((p, gr), d) in out.chunks(c).zip(g.chunks(c)).zip(dx.chunks_mut(c)) {
                    softmax_backward_row(p, gr, &mut tmp);
                    d.iter_mut().zip(&tmp).for_each(|(d, t)| *d += t);
                }
            }
        }
        Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
            let (r, d) = dims(&nodes[x.0].shape);
            let gam = val(*gamma);
            if let Some(dg) = slot(nodes, grads, *gamma) {
                for i in 0..r {
                    for j in 0..d {
                        dg[j] += g[i * d + j] * xhat[i * d + j];
                    }
                }
            }
            if let Some(db) = slot(nodes, grads, *beta) {
                for row in g.chunks(d) {
                    db.iter_mut().zip(row).for_each(|(b, gi)| *b += gi);
                }
            }
            if let Some(dx) = slot(nodes, grads, *x) {
                let mut dh = vec![0.0; d];
                for i in 0..r {
                    let h = &xhat[i * d..(i + 1) * d];
                    for j in 0..d {
                        dh[j] = g[i * d + j] * gam[j];
                    }
                    let sum_dh: f64 = dh.iter().sum();
                    let sum_dh_h: f64 = dh.iter().zip(h).map(|(a, b)| a * b).sum();
                    let k = inv_std[i] / d as f64;
                    for j in 0..d {
                        dx[i * d + j] += k * (d as f64 * dh[j] - sum_dh - h[j] * sum_dh_h);
                    }
                }
            }
        }
        Op::Attention { q, k, v, blocks, heads, probs } => {
            attention_backward(nodes, grads, g, (*q, *k, *v), *blocks, *heads, probs);
        }
        Op::Dropout { x, mask } => {
            if let Some(dx) = slot(nodes, grads, *x) {
                for ((d, gi), m) in dx.iter_mut().zip(g).zip(mask) {
                    *d += gi * m;
                }
            }
        }
        Op::MeanPool { x, group } => {
            let (r, c) = dims(&nodes[x.0].shape);
            let w = 1.0 / *group as f64;
            if let Some(dx) = slot(nodes, grads, *x) {
                for i in 0..r {
                    let src = &g[(i / group) * c..][..c];
                    dx[i * c..(i + 1) * c].iter_mut().zip(src).for_each(|(d, s)| *d += s * w);
                }
            }
        }
        Op::ConcatCols { a, b } => {
            let (r, ca) = dims(&nodes[a.0].shape);
            let (_, cb) = dims(&nodes[b.0].shape);
            let w = ca + cb;
            if let Some(da) = slot(nodes, grads, *a) {
                for i in 0..r {
                    da[i * ca..(i + 1) * ca].iter_mut().zip(&g[i * w..i * w + ca]).for_each(|(d, s)| *d += s);
                }
            }
            if let Some(db) = slot(nodes, grads, *b) {
                for i in 0..r {
                    db[i * cb..(i + 1) * cb]
                        .iter_mut()
                        .zip(&g[i * w + ca..(i + 1) * w])
                        .for_each(|(d, s)| *d += s);
                }
            }
        }
        Op::Sum { x } => {
            if let Some(dx) = slot(nodes, grads, *x) {
                dx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::CrossEntropy { logits, labels, weights, probs } => {
            let (_, c) = dims(&nodes[logits.0].shape);
            if let Some(dz) = slot(nodes, grads, *logits) {
                for (i, (&l, &w)) in labels.iter().zip(weights).enumerate() {
                    for j in 0..c {
                        let onehot = if j == l { 1.0 } else { 0.0 };
                        dz[i * c + j] += g[0] * w * (probs[i * c + j] - onehot);
                    }
                }
            }
        }
    }
}

fn attention_backward(
    nodes: &[Node<'_>],
    grads: &mut [Option<Vec<f64>>],
    g: &[f64],
    (q, k, v): (Var, Var, Var),
    blocks: usize,
    heads: usize,
    probs: &[f64],
) {
    let (qr, dq) = dims(&nodes[q.0].shape);
    let (kr, dv) = (dims(&nodes[k.0].shape).0, dims(&nodes[v.0].shape).1);
    let (tq, s) = (qr / blocks, kr / blocks);
    let (hk, hv) = (dq / heads, dv / heads);
    let scale = 1.0 / (hk as f64).sqrt();
    let (qs, ks, vs) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);

    // Score gradients first; they feed both dQ and dK.
    let mut dscores = vec![0.0; probs.len()];
    let mut dp = vec![0.0; s];
    for b in 0..blocks {
        for h in 0..heads {
            let base = (b * heads + h) * tq * s;
            for i in 0..tq {
                let gi = &g[(b * tq + i) * dv + h * hv..][..hv];
                for (j, d) in dp.iter_mut().enumerate() {
                    let vj = &vs[(b * s + j) * dv + h * hv..][..hv];
                    *d = gi.iter().zip(vj).map(|(x, y)| x * y).sum();
                }
                let p = &probs[base + i * s..][..s];
                softmax_backward_row(p, &dp, &mut dscores[base + i * s..][..s]);
            }
        }
    }
    if let Some(dvv) = slot(nodes, grads, v) {
        for b in 0..blocks {
            for h in 0..heads {
                let base = (b * heads + h) * tq * s;
                for i in 0..tq {
                    let gi = &g[(b * tq + i) * dv + h * hv..][..hv];
                    for j in 0..s {
                        let p = probs[base + i * s + j];
                        let dst = &mut dvv[(b * s + j) * dv + h * hv..][..hv];
                        dst.iter_mut().zip(gi).for_each(|(d, x)| *d += p * x);
                    }
                }
            }
        }
    }
    if let Some(dqq) = slot(nodes, grads, q) {
        for b in 0..blocks {
            for h in 0..heads {
                let base = (b * heads + h) * tq * s;
                for i in 0..tq {
                    let dst = &mut dqq[(b * tq + i) * dq + h * hk..][..hk];
                    for j in 0..s {
                        let w = dscores[base + i * s + j] * scale;
                        let kj = &ks[(b * s + j) * dq + h * hk..][..hk];
                        dst.iter_mut().zip(kj).for_each(|(d, x)| *d += w * x);
                    }
                }
            }
        }
    }
    if let Some(dkk) = slot(nodes, grads, k) {
        for b in 0..blocks {
            for h in 0..heads {
                let base = (b * heads + h) * tq * s;
                for i in 0..tq {
                    let qi = &qs[(b * tq + i) * dq + h * hk..][..hk];
                    for j in 0..s {
                        let w = dscores[base + i * s + j] * scale;
                        let dst = &mut dkk[(b * s + j) * dq + h * hk..][..hk];
                        dst.iter_mut().zip(qi).for_each(|(d, x)| *d += w * x);
                    }
                }
            }
        }
    }
}
