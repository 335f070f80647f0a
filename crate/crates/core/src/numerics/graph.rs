//! Tape of tensor operations with reverse-mode differentiation.

use rand::{Rng, RngCore};

use super::{Scalar, Tensor, LAYER_NORM_EPS};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One independent attention problem inside a packed batch: `q_len` query
/// rows starting at `q_start` attend to `kv_len` key/value rows starting at
/// `kv_start`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionSegment {
    pub q_start: usize,
    pub q_len: usize,
    pub kv_start: usize,
    pub kv_len: usize,
}

#[derive(Debug, Clone)]
pub struct AttentionSpec {
    pub heads: usize,
    /// Multiplier applied to the query·key logits.
    pub scale: f64,
    /// Query `i` may not see key `j` when `j > i + (kv_len - q_len)`.
    pub causal: bool,
    /// Dropout probability on the attention weights; 0 disables.
    pub dropout: f64,
    pub segments: Vec<AttentionSegment>,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: NodeId,
        b: NodeId,
        trans_a: bool,
        trans_b: bool,
    },
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow {
        a: NodeId,
        row: NodeId,
    },
    Scale(NodeId, f64),
    Softmax(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Relu(NodeId),
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    Concat(Vec<NodeId>),
    MaskedFill {
        a: NodeId,
        mask: Vec<bool>,
    },
    Dropout {
        a: NodeId,
        mask: Vec<T>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        spec: AttentionSpec,
        /// Softmax weights per (segment, head), row-major, concatenated.
        probs: Vec<T>,
        /// Scaled keep mask aligned with `probs`; empty without dropout.
        keep: Vec<T>,
    },
    SmoothedCrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        pad: usize,
        smoothing: f64,
        probs: Vec<T>,
        count: usize,
    },
    Sum(NodeId),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a forward computation so it can be differentiated.
///
/// Nodes are appended in evaluation order, so the node list is a
/// topological order and the backward pass is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar loss with respect to every node of a graph.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `id`; zeros when the node does not influence the loss.
    pub fn get(&self, id: NodeId) -> Tensor<T> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[id.0].clone()),
        }
    }

    pub fn take(&mut self, id: NodeId) -> Tensor<T> {
        match self.grads[id.0].take() {
            Some(g) => g,
            None => Tensor::zeros(self.shapes[id.0].clone()),
        }
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, delta: Tensor<T>) {
    match slot {
        Some(g) => g.add_assign(&delta),
        None => *slot = Some(delta),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[NodeId]) -> NodeId {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A trainable input.
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a)·op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId, trans_a: bool, trans_b: bool) -> NodeId {
        let value = self.value(a).matmul_t(self.value(b), trans_a, trans_b);
        self.push(
            value,
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
            },
            &[a, b],
        )
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(va.shape().to_vec(), data);
        self.push(value, Op::Add(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(va.shape().to_vec(), data);
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    /// Adds a row vector to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (va, vr) = (self.value(a), self.value(row));
        let cols = va.cols();
        assert_eq!(vr.len(), cols, "add_row: bias has {} values for {cols} columns", vr.len());
        let mut value = va.clone();
        for r in 0..value.rows() {
            for (x, &b) in value.row_mut(r).iter_mut().zip(vr.data()) {
                *x = *x + b;
            }
        }
        self.push(value, Op::AddRow { a, row }, &[a, row])
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let st = T::from_f64(s);
        let value = self.value(a).map(|x| x * st);
        self.push(value, Op::Scale(a, s), &[a])
    }

    /// Row-wise softmax; the row max is subtracted before exponentiation.
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let mut value = self.value(a).clone();
        for r in 0..value.rows() {
            softmax_in_place(value.row_mut(r));
        }
        self.push(value, Op::Softmax(a), &[a])
    }

    /// Normalises each row to zero mean and unit variance, then applies
    /// the learned scale `gamma` and shift `beta`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let vx = self.value(x);
        let (rows, cols) = (vx.rows(), vx.cols());
        let vg = self.value(gamma).data();
        let vb = self.value(beta).data();
        assert_eq!(vg.len(), cols, "layer_norm gamma width");
        assert_eq!(vb.len(), cols, "layer_norm beta width");
        let n = T::from_f64(cols as f64);
        let eps = T::from_f64(LAYER_NORM_EPS);
        let mut xhat = vec![T::zero(); rows * cols];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            rstd[r] = inv;
            for c in 0..cols {
                let h = (row[c] - mean) * inv;
                xhat[r * cols + c] = h;
                out[r * cols + c] = vg[c] * h + vb[c];
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), out);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(value, Op::Relu(a), &[a])
    }

    /// Gathers rows of `table`.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let vt = self.value(table);
        let cols = vt.cols();
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            assert!(id < vt.rows(), "embedding id {id} out of range {}", vt.rows());
            out.extend_from_slice(vt.row(id));
        }
        let value = Tensor::matrix(ids.len(), cols, out);
        self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Concatenates matrices with equal row counts along the columns.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![T::zero(); rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let v = self.value(p);
            assert_eq!(v.rows(), rows, "concat row mismatch");
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w].copy_from_slice(v.row(r));
            }
            offset += w;
        }
        let value = Tensor::matrix(rows, total, out);
        self.push(value, Op::Concat(parts.to_vec()), parts)
    }

    /// Replaces masked positions with [`Scalar::mask_value`].
    pub fn masked_fill(&mut self, a: NodeId, mask: &[bool]) -> NodeId {
        let va = self.value(a);
        assert_eq!(va.len(), mask.len(), "mask size mismatch");
        let fill = T::mask_value();
        let data = va
            .data()
            .iter()
            .zip(mask)
            .map(|(&x, &m)| if m { fill } else { x })
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data);
        self.push(
            value,
            Op::MaskedFill {
                a,
                mask: mask.to_vec(),
            },
            &[a],
        )
    }

    /// Inverted dropout: survivors are scaled by `1/(1-p)`.
    pub fn dropout(&mut self, a: NodeId, p: f64, rng: &mut dyn RngCore) -> NodeId {
        if p <= 0.0 {
            return a;
        }
        let keep = T::from_f64(1.0 / (1.0 - p));
        let va = self.value(a);
        let mask: Vec<T> = (0..va.len())
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        let data = va.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let value = Tensor::new(va.shape().to_vec(), data);
        self.push(value, Op::Dropout { a, mask }, &[a])
    }

    /// Packed multi-head scaled dot-product attention.
    ///
    /// `q` is `N×(heads·d_a)`, `k` is `M×(heads·d_a)` and `v` is
    /// `M×(heads·d_o)`; head `h` uses the `h`-th block of columns. Each
    /// segment is an independent sentence so no padding is needed. The
    /// output is `N×(heads·d_o)` with the heads concatenated in order.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        spec: AttentionSpec,
        mut rng: Option<&mut dyn RngCore>,
    ) -> NodeId {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let heads = spec.heads;
        let (qw, kw, vw) = (vq.cols(), vk.cols(), vv.cols());
        assert_eq!(qw, kw, "attention query/key width mismatch");
        assert!(qw % heads == 0 && vw % heads == 0, "attention width not divisible by heads");
        assert_eq!(vk.rows(), vv.rows(), "attention key/value row mismatch");
        let (da, dv) = (qw / heads, vw / heads);
        let scale = T::from_f64(spec.scale);
        let use_dropout = spec.dropout > 0.0 && rng.is_some();
        let keep_scale = T::from_f64(1.0 / (1.0 - spec.dropout));
        let mut out = vec![T::zero(); vq.rows() * vw];
        let mut probs = Vec::new();
        let mut keep = Vec::new();
        let mut scores = Vec::new();
        for seg in &spec.segments {
            assert!(seg.q_start + seg.q_len <= vq.rows(), "query segment out of range");
            assert!(seg.kv_start + seg.kv_len <= vk.rows(), "key segment out of range");
            let shift = seg.kv_len as isize - seg.q_len as isize;
            for h in 0..heads {
                for i in 0..seg.q_len {
                    let qrow = &vq.row(seg.q_start + i)[h * da..(h + 1) * da];
                    scores.clear();
                    for j in 0..seg.kv_len {
                        if spec.causal && j as isize > i as isize + shift {
                            scores.push(T::mask_value());
                        } else {
                            let krow = &vk.row(seg.kv_start + j)[h * da..(h + 1) * da];
                            let dot = qrow.iter().zip(krow).map(|(&a, &b)| a * b).sum::<T>();
                            scores.push(dot * scale);
                        }
                    }
                    softmax_in_place(&mut scores);
                    let orow = seg.q_start + i;
                    for (j, &p) in scores.iter().enumerate() {
                        probs.push(p);
                        let weight = if use_dropout {
                            let r = rng.as_mut().expect("checked").gen::<f64>();
                            let m = if r < spec.dropout { T::zero() } else { keep_scale };
                            keep.push(m);
                            p * m
                        } else {
                            p
                        };
                        if weight == T::zero() {
                            continue;
                        }
                        let vrow = &vv.row(seg.kv_start + j)[h * dv..(h + 1) * dv];
                        let dst = &mut out[orow * vw + h * dv..orow * vw + (h + 1) * dv];
                        for (o, &x) in dst.iter_mut().zip(vrow) {
                            *o = *o + weight * x;
                        }
                    }
                }
            }
        }
        let value = Tensor::matrix(vq.rows(), vw, out);
        self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
                keep,
            },
            &[q, k, v],
        )
    }

    /// Mean label-smoothed cross entropy over rows whose target is not `pad`.
    ///
    /// The smoothed target puts `1 - smoothing` on the gold token and spreads
    /// `smoothing` uniformly over the whole vocabulary.
    pub fn smoothed_cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        pad: usize,
        smoothing: f64,
    ) -> NodeId {
        let vl = self.value(logits);
        let (rows, vocab) = (vl.rows(), vl.cols());
        assert_eq!(rows, targets.len(), "one target per logit row");
        let count = targets.iter().filter(|&&t| t != pad).count();
        assert!(count > 0, "cross entropy over zero non-pad targets");
        let mut probs = vec![T::zero(); rows * vocab];
        let mut total = 0.0f64;
        let uniform = smoothing / vocab as f64;
        for r in 0..rows {
            let row = vl.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max.to_f64()
                + row
                    .iter()
                    .map(|&x| (x - max).to_f64().exp())
                    .sum::<f64>()
                    .ln();
            for (c, &x) in row.iter().enumerate() {
                probs[r * vocab + c] = T::from_f64((x.to_f64() - lse).exp());
            }
            let t = targets[r];
            if t == pad {
                continue;
            }
            assert!(t < vocab, "target {t} outside vocabulary {vocab}");
            let gold = lse - row[t].to_f64();
            let sum_neg_logp: f64 = row.iter().map(|&x| lse - x.to_f64()).sum();
            total += (1.0 - smoothing) * gold + uniform * sum_neg_logp;
        }
        let value = Tensor::scalar(T::from_f64(total / count as f64));
        self.push(
            value,
            Op::SmoothedCrossEntropy {
                logits,
                targets: targets.to_vec(),
                pad,
                smoothing,
                probs,
                count,
            },
            &[logits],
        )
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Panics when `loss` holds more than one value.
    pub fn backward(&self, loss: NodeId) -> Gradients<T> {
        assert_eq!(
            self.value(loss).len(),
            1,
            "backward needs a scalar loss, got shape {:?}",
            self.value(loss).shape()
        );
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape().to_vec(), T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads, shapes }
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
            } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    // C = op(A)·op(B): dA = g·op(B)ᵀ, transposed back when A was.
                    let da = if *trans_a {
                        vb.matmul_t(g, *trans_b, true)
                    } else {
                        g.matmul_t(vb, false, !*trans_b)
                    };
                    accumulate(&mut grads[a.0], reshape_like(da, va));
                }
                if self.wants(*b) {
                    let db = if *trans_b {
                        g.matmul_t(va, true, *trans_a)
                    } else {
                        va.matmul_t(g, !*trans_a, false)
                    };
                    accumulate(&mut grads[b.0], reshape_like(db, vb));
                }
            }
            Op::Transpose(a) => {
                if self.wants(*a) {
                    let da = g.transpose();
                    accumulate(&mut grads[a.0], reshape_like(da, self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], g.clone());
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = g.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
                    accumulate(&mut grads[a.0], Tensor::new(va.shape().to_vec(), d));
                }
                if self.wants(*b) {
                    let d = g.data().iter().zip(va.data()).map(|(&x, &y)| x * y).collect();
                    accumulate(&mut grads[b.0], Tensor::new(vb.shape().to_vec(), d));
                }
            }
            Op::AddRow { a, row } => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if self.wants(*row) {
                    let vr = self.value(*row);
                    let mut d = vec![T::zero(); vr.len()];
                    for r in 0..g.rows() {
                        for (acc, &x) in d.iter_mut().zip(g.row(r)) {
                            *acc = *acc + x;
                        }
                    }
                    accumulate(&mut grads[row.0], Tensor::new(vr.shape().to_vec(), d));
                }
            }
            Op::Scale(a, s) => {
                if self.wants(*a) {
                    let st = T::from_f64(*s);
                    accumulate(&mut grads[a.0], g.map(|x| x * st));
                }
            }
            Op::Softmax(a) => {
                if self.wants(*a) {
                    let y = &node.value;
                    let mut d = g.clone();
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let dot = yr.iter().zip(g.row(r)).map(|(&p, &x)| p * x).sum::<T>();
                        for (dx, &p) in d.row_mut(r).iter_mut().zip(yr) {
                            *dx = p * (*dx - dot);
                        }
                    }
                    accumulate(&mut grads[a.0], d);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let cols = g.cols();
                let rows = g.rows();
                let vg = self.value(*gamma);
                if self.wants(*gamma) || self.wants(*beta) {
                    let mut dg = vec![T::zero(); cols];
                    let mut db = vec![T::zero(); cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            let gi = g.data()[r * cols + c];
                            dg[c] = dg[c] + gi * xhat[r * cols + c];
                            db[c] = db[c] + gi;
                        }
                    }
                    if self.wants(*gamma) {
                        accumulate(&mut grads[gamma.0], Tensor::new(vg.shape().to_vec(), dg));
                    }
                    if self.wants(*beta) {
                        let shape = self.value(*beta).shape().to_vec();
                        accumulate(&mut grads[beta.0], Tensor::new(shape, db));
                    }
                }
                if self.wants(*x) {
                    let n = T::from_f64(cols as f64);
                    let mut dx = vec![T::zero(); rows * cols];
                    let mut dxhat = vec![T::zero(); cols];
                    for r in 0..rows {
                        let g_row = &g.data()[r * cols..(r + 1) * cols];
                        for ((d, &gv), &w) in dxhat.iter_mut().zip(g_row).zip(vg.data()) {
                            *d = gv * w;
                        }
                        let mean_d = dxhat.iter().copied().sum::<T>() / n;
                        let mean_dx = (0..cols)
                            .map(|c| dxhat[c] * xhat[r * cols + c])
                            .sum::<T>()
                            / n;
                        for c in 0..cols {
                            dx[r * cols + c] =
                                rstd[r] * (dxhat[c] - mean_d - xhat[r * cols + c] * mean_dx);
                        }
                    }
                    let shape = self.value(*x).shape().to_vec();
                    accumulate(&mut grads[x.0], Tensor::new(shape, dx));
                }
            }
            Op::Relu(a) => {
                if self.wants(*a) {
                    let va = self.value(*a);
                    let d = g
                        .data()
                        .iter()
                        .zip(va.data())
                        .map(|(&dy, &x)| if x > T::zero() { dy } else { T::zero() })
                        .collect();
                    accumulate(&mut grads[a.0], Tensor::new(va.shape().to_vec(), d));
                }
            }
            Op::Embedding { table, ids } => {
                if self.wants(*table) {
                    let vt = self.value(*table);
                    let mut d = Tensor::zeros(vt.shape().to_vec());
                    for (r, &id) in ids.iter().enumerate() {
                        for (acc, &x) in d.row_mut(id).iter_mut().zip(g.row(r)) {
                            *acc = *acc + x;
                        }
                    }
                    accumulate(&mut grads[table.0], d);
                }
            }
            Op::Concat(parts) => {
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let vp = self.value(p);
                    let w = vp.cols();
                    if self.wants(p) {
                        let mut d = Vec::with_capacity(vp.len());
                        for r in 0..g.rows() {
                            d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                        }
                        accumulate(&mut grads[p.0], Tensor::new(vp.shape().to_vec(), d));
                    }
                    offset += w;
                }
            }
            Op::MaskedFill { a, mask } => {
                if self.wants(*a) {
                    let d = g
                        .data()
                        .iter()
                        .zip(mask)
                        .map(|(&x, &m)| if m { T::zero() } else { x })
                        .collect();
                    accumulate(&mut grads[a.0], Tensor::new(g.shape().to_vec(), d));
                }
            }
            Op::Dropout { a, mask } => {
                if self.wants(*a) {
                    let d = g.data().iter().zip(mask).map(|(&x, &m)| x * m).collect();
                    accumulate(&mut grads[a.0], Tensor::new(g.shape().to_vec(), d));
                }
            }
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
                keep,
            } => self.attention_backward(*q, *k, *v, spec, probs, keep, g, grads),
            Op::SmoothedCrossEntropy {
                logits,
                targets,
                pad,
                smoothing,
                probs,
                count,
            } => {
                if self.wants(*logits) {
                    let vl = self.value(*logits);
                    let vocab = vl.cols();
                    let upstream = g.item() / T::from_f64(*count as f64);
                    let uniform = T::from_f64(smoothing / vocab as f64);
                    let gold = T::from_f64(1.0 - smoothing);
                    let mut d = vec![T::zero(); vl.len()];
                    for (r, &t) in targets.iter().enumerate() {
                        if t == *pad {
                            continue;
                        }
                        for c in 0..vocab {
                            let mut target = uniform;
                            if c == t {
                                target = target + gold;
                            }
                            d[r * vocab + c] = (probs[r * vocab + c] - target) * upstream;
                        }
                    }
                    accumulate(&mut grads[logits.0], Tensor::new(vl.shape().to_vec(), d));
                }
            }
            Op::Sum(a) => {
                if self.wants(*a) {
                    let shape = self.value(*a).shape().to_vec();
                    accumulate(&mut grads[a.0], Tensor::filled(shape, g.item()));
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        spec: &AttentionSpec,
        probs: &[T],
        keep: &[T],
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let heads = spec.heads;
        let (qw, vw) = (vq.cols(), vv.cols());
        let (da, dv) = (qw / heads, vw / heads);
        let scale = T::from_f64(spec.scale);
        let mut dq = vec![T::zero(); vq.len()];
        let mut dk = vec![T::zero(); vk.len()];
        let mut dvv = vec![T::zero(); vv.len()];
        let mut dp = Vec::new();
        let mut cursor = 0;
        for seg in &spec.segments {
            let block = seg.q_len * seg.kv_len;
            for h in 0..heads {
                let p = &probs[cursor..cursor + block];
                let m = if keep.is_empty() {
                    None
                } else {
                    Some(&keep[cursor..cursor + block])
                };
                cursor += block;
                for i in 0..seg.q_len {
                    let orow = seg.q_start + i;
                    let gout = &g.row(orow)[h * dv..(h + 1) * dv];
                    dp.clear();
                    for j in 0..seg.kv_len {
                        let vrow = &vv.row(seg.kv_start + j)[h * dv..(h + 1) * dv];
                        let mut d = gout.iter().zip(vrow).map(|(&a, &b)| a * b).sum::<T>();
                        let mut w = p[i * seg.kv_len + j];
                        if let Some(m) = m {
                            let mk = m[i * seg.kv_len + j];
                            d = d * mk;
                            w = w * mk;
                        }
                        dp.push(d);
                        if w != T::zero() {
                            let base = (seg.kv_start + j) * vw + h * dv;
                            for (acc, &x) in dvv[base..base + dv].iter_mut().zip(gout) {
                                *acc = *acc + w * x;
                            }
                        }
                    }
                    let prow = &p[i * seg.kv_len..(i + 1) * seg.kv_len];
                    let dot = prow.iter().zip(&dp).map(|(&a, &b)| a * b).sum::<T>();
                    let qbase = orow * qw + h * da;
                    for j in 0..seg.kv_len {
                        let ds = prow[j] * (dp[j] - dot) * scale;
                        if ds == T::zero() {
                            continue;
                        }
                        let kbase = (seg.kv_start + j) * qw + h * da;
                        for c in 0..da {
                            dq[qbase + c] = dq[qbase + c] + ds * vk.data()[kbase + c];
                            dk[kbase + c] = dk[kbase + c] + ds * vq.data()[qbase + c];
                        }
                    }
                }
            }
        }
        if self.wants(q) {
            accumulate(&mut grads[q.0], Tensor::new(vq.shape().to_vec(), dq));
        }
        if self.wants(k) {
            accumulate(&mut grads[k.0], Tensor::new(vk.shape().to_vec(), dk));
        }
        if self.wants(v) {
            accumulate(&mut grads[v.0], Tensor::new(vv.shape().to_vec(), dvv));
        }
    }
}

fn reshape_like<T: Scalar>(t: Tensor<T>, like: &Tensor<T>) -> Tensor<T> {
    if t.shape() == like.shape() {
        t
    } else {
        Tensor::new(like.shape().to_vec(), t.into_data())
    }
}

/// Numerically stable in-place softmax of one row.
pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total = total + *x;
    }
    for x in row.iter_mut() {
        *x = *x / total;
    }
}
