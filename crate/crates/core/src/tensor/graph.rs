//! Tape of recorded operations with reverse-mode backward.
//!
//! Nodes are appended in execution order, so the tape order is already a
//! topological order; `backward` walks it once in reverse and accumulates
//! gradient contributions into parent nodes.

use std::collections::BTreeMap;

use super::{Scalar, Tensor, TensorError};

/// Handle to a node inside a [`Graph`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    Add(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, S),
    AddRow {
        x: TensorId,
        row: TensorId,
    },
    Matmul {
        a: TensorId,
        b: TensorId,
        m: usize,
        k: usize,
        n: usize,
    },
    /// c[b] = a[b] @ rhs[b], a: [batch,m,k], rhs: [batch,k,n]
    BmmNn {
        a: TensorId,
        b: TensorId,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    /// c[b] = a[b] @ rhs[b]^T, a: [batch,m,k], rhs: [batch,n,k]
    BmmNt {
        a: TensorId,
        b: TensorId,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    /// [batch, seq, heads*head_dim] -> [batch*heads, seq, head_dim]
    SplitHeads {
        x: TensorId,
        batch: usize,
        seq: usize,
        heads: usize,
        head_dim: usize,
    },
    /// [batch*heads, seq, head_dim] -> [batch, seq, heads*head_dim]
    MergeHeads {
        x: TensorId,
        batch: usize,
        seq: usize,
        heads: usize,
        head_dim: usize,
    },
    Softmax {
        x: TensorId,
        axis: usize,
    },
    LayerNorm {
        x: TensorId,
        gain: TensorId,
        offset: TensorId,
        eps: S,
    },
    Relu(TensorId),
    Gather {
        table: TensorId,
        ids: Vec<u32>,
    },
    ConcatCols(Vec<TensorId>),
    CrossEntropy {
        logits: TensorId,
        targets: Vec<u32>,
        pad: u32,
        counted: usize,
    },
    Sum(TensorId),
    Mean(TensorId),
    Reshape(TensorId),
}

#[derive(Debug)]
struct Node<S> {
    shape: Vec<usize>,
    data: Vec<S>,
    grad: Option<Vec<S>>,
    requires_grad: bool,
    op: Op<S>,
}

/// Recorded computation tape plus a registry of named parameter leaves.
#[derive(Debug)]
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    params: Vec<(String, TensorId)>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<S>, requires_grad: bool, op: Op<S>) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            grad: None,
            requires_grad,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn needs_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> TensorId {
        let shape = value.shape().to_vec();
        self.push(shape, value.into_data(), requires_grad, Op::Leaf)
    }

    /// Leaf that never carries gradient (masks, position tables, inputs).
    pub fn constant(&mut self, value: Tensor<S>) -> TensorId {
        self.leaf(value, false)
    }

    /// Leaf registered under a stable name so its gradient can be collected
    /// after backward.
    pub fn param(&mut self, name: &str, value: &Tensor<S>, trainable: bool) -> TensorId {
        let id = self.leaf(value.clone(), trainable);
        self.params.push((name.to_string(), id));
        id
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn numel(&self, id: TensorId) -> usize {
        self.nodes[id.0].data.len()
    }

    pub fn data(&self, id: TensorId) -> &[S] {
        &self.nodes[id.0].data
    }

    pub fn value(&self, id: TensorId) -> Tensor<S> {
        Tensor::new(self.nodes[id.0].shape.clone(), self.nodes[id.0].data.clone())
            .expect("node shape/data always consistent")
    }

    pub fn grad(&self, id: TensorId) -> Option<&[S]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Registered `(name, id)` parameter leaves, in registration order.
    pub fn params(&self) -> &[(String, TensorId)] {
        &self.params
    }

    /// Gradients of all registered parameters after `backward`.
    pub fn param_grads(&self) -> BTreeMap<String, Vec<S>> {
        self.params
            .iter()
            .filter_map(|(name, id)| self.grad(*id).map(|g| (name.clone(), g.to_vec())))
            .collect()
    }

    // ---- ops ------------------------------------------------------------

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| *x + *y)
            .collect();
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), data, rg, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| *x * *y)
            .collect();
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), data, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: TensorId, factor: S) -> TensorId {
        let data = self.nodes[a.0].data.iter().map(|x| *x * factor).collect();
        let rg = self.needs_grad(&[a]);
        self.push(self.shape(a).to_vec(), data, rg, Op::Scale(a, factor))
    }

    /// Broadcast-add a `[w]` row vector onto every row of a `[..., w]` tensor.
    pub fn add_row(&mut self, x: TensorId, row: TensorId) -> Result<TensorId, TensorError> {
        let w = *self.shape(x).last().ok_or_else(|| TensorError::ShapeMismatch {
            op: "add_row",
            lhs: self.shape(x).to_vec(),
            rhs: self.shape(row).to_vec(),
        })?;
        if self.shape(row) != [w] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(row).to_vec(),
            });
        }
        let rowd = &self.nodes[row.0].data;
        let data = self.nodes[x.0]
            .data
            .chunks_exact(w)
            .flat_map(|chunk| chunk.iter().zip(rowd).map(|(a, b)| *a + *b))
            .collect();
        let rg = self.needs_grad(&[x, row]);
        Ok(self.push(self.shape(x).to_vec(), data, rg, Op::AddRow { x, row }))
    }

    /// `a [..., k] @ b [k, n] -> [..., n]`; leading dims of `a` are flattened
    /// into rows.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (ashape, bshape) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: ashape.clone(),
            rhs: bshape.clone(),
        };
        if bshape.len() != 2 || ashape.is_empty() || bshape[0] == 0 {
            return Err(mismatch());
        }
        let (k, n) = (bshape[0], bshape[1]);
        if *ashape.last().unwrap() != k {
            return Err(mismatch());
        }
        let m = self.numel(a) / k;
        let mut data = vec![S::ZERO; m * n];
        mm_nn(self.data(a), self.data(b), &mut data, m, k, n);
        let mut out_shape = ashape[..ashape.len() - 1].to_vec();
        out_shape.push(n);
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(out_shape, data, rg, Op::Matmul { a, b, m, k, n }))
    }

    pub fn bmm_nn(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (ashape, bshape) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || TensorError::ShapeMismatch {
            op: "bmm_nn",
            lhs: ashape.clone(),
            rhs: bshape.clone(),
        };
        if ashape.len() != 3 || bshape.len() != 3 || ashape[0] != bshape[0] || ashape[2] != bshape[1]
        {
            return Err(mismatch());
        }
        let (batch, m, k, n) = (ashape[0], ashape[1], ashape[2], bshape[2]);
        let mut data = vec![S::ZERO; batch * m * n];
        for i in 0..batch {
            mm_nn(
                &self.data(a)[i * m * k..(i + 1) * m * k],
                &self.data(b)[i * k * n..(i + 1) * k * n],
                &mut data[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(
            vec![batch, m, n],
            data,
            rg,
            Op::BmmNn {
                a,
                b,
                batch,
                m,
                k,
                n,
            },
        ))
    }

    /// Batched `a @ b^T` with `a: [batch, m, k]`, `b: [batch, n, k]`.
    pub fn bmm_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (ashape, bshape) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || TensorError::ShapeMismatch {
            op: "bmm_nt",
            lhs: ashape.clone(),
            rhs: bshape.clone(),
        };
        if ashape.len() != 3 || bshape.len() != 3 || ashape[0] != bshape[0] || ashape[2] != bshape[2]
        {
            return Err(mismatch());
        }
        let (batch, m, k, n) = (ashape[0], ashape[1], ashape[2], bshape[1]);
        let mut data = vec![S::ZERO; batch * m * n];
        for i in 0..batch {
            mm_nt(
                &self.data(a)[i * m * k..(i + 1) * m * k],
                &self.data(b)[i * n * k..(i + 1) * n * k],
                &mut data[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(
            vec![batch, m, n],
            data,
            rg,
            Op::BmmNt {
                a,
                b,
                batch,
                m,
                k,
                n,
            },
        ))
    }

    pub fn split_heads(
        &mut self,
        x: TensorId,
        heads: usize,
    ) -> Result<TensorId, TensorError> {
        let shape = self.shape(x).to_vec();
        if heads == 0 || shape.len() != 3 || shape[2] % heads != 0 {
            return Err(TensorError::BadFactorization {
                op: "split_heads",
                shape,
                detail: format!("[batch, seq, {heads}*head_dim]"),
            });
        }
        let (batch, seq, head_dim) = (shape[0], shape[1], shape[2] / heads);
        let src = self.data(x);
        let mut data = vec![S::ZERO; src.len()];
        for b in 0..batch {
            for h in 0..heads {
                for s in 0..seq {
                    let dst = (((b * heads + h) * seq) + s) * head_dim;
                    let from = (b * seq + s) * (heads * head_dim) + h * head_dim;
                    data[dst..dst + head_dim].copy_from_slice(&src[from..from + head_dim]);
                }
            }
        }
        let rg = self.needs_grad(&[x]);
        Ok(self.push(
            vec![batch * heads, seq, head_dim],
            data,
            rg,
            Op::SplitHeads {
                x,
                batch,
                seq,
                heads,
                head_dim,
            },
        ))
    }

    pub fn merge_heads(
        &mut self,
        x: TensorId,
        heads: usize,
    ) -> Result<TensorId, TensorError> {
        let shape = self.shape(x).to_vec();
        if heads == 0 || shape.len() != 3 || shape[0] % heads != 0 {
            return Err(TensorError::BadFactorization {
                op: "merge_heads",
                shape,
                detail: format!("[batch*{heads}, seq, head_dim]"),
            });
        }
        let (batch, seq, head_dim) = (shape[0] / heads, shape[1], shape[2]);
        let src = self.data(x);
        let mut data = vec![S::ZERO; src.len()];
        for b in 0..batch {
            for h in 0..heads {
                for s in 0..seq {
                    let from = (((b * heads + h) * seq) + s) * head_dim;
                    let dst = (b * seq + s) * (heads * head_dim) + h * head_dim;
                    data[dst..dst + head_dim].copy_from_slice(&src[from..from + head_dim]);
                }
            }
        }
        let rg = self.needs_grad(&[x]);
        Ok(self.push(
            vec![batch, seq, heads * head_dim],
            data,
            rg,
            Op::MergeHeads {
                x,
                batch,
                seq,
                heads,
                head_dim,
            },
        ))
    }

    pub fn softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId, TensorError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfBounds {
                op: "softmax",
                axis,
                shape,
            });
        }
        let axis_len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let src = self.data(x);
        let mut data = src.to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * axis_len * inner + i;
                let mut max = S::from_f64(f64::NEG_INFINITY);
                for a in 0..axis_len {
                    max = max.maximum(src[base + a * inner]);
                }
                let mut sum = S::ZERO;
                for a in 0..axis_len {
                    let e = (src[base + a * inner] - max).exp();
                    data[base + a * inner] = e;
                    sum += e;
                }
                for a in 0..axis_len {
                    data[base + a * inner] /= sum;
                }
            }
        }
        let rg = self.needs_grad(&[x]);
        Ok(self.push(shape, data, rg, Op::Softmax { x, axis }))
    }

    /// Normalize over the last axis to zero mean and unit variance (population
    /// statistics), then apply the per-feature affine `gain`/`offset`.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gain: TensorId,
        offset: TensorId,
        eps: S,
    ) -> Result<TensorId, TensorError> {
        let shape = self.shape(x).to_vec();
        let w = *shape.last().ok_or_else(|| TensorError::ShapeMismatch {
            op: "layer_norm",
            lhs: shape.clone(),
            rhs: self.shape(gain).to_vec(),
        })?;
        if self.shape(gain) != [w] || self.shape(offset) != [w] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: shape,
                rhs: self.shape(gain).to_vec(),
            });
        }
        let (src, g, b) = (
            &self.nodes[x.0].data,
            &self.nodes[gain.0].data,
            &self.nodes[offset.0].data,
        );
        let inv_w = S::ONE / S::from_f64(w as f64);
        let mut data = vec![S::ZERO; src.len()];
        for (row, out) in src.chunks_exact(w).zip(data.chunks_exact_mut(w)) {
            let mut mean = S::ZERO;
            for v in row {
                mean += *v;
            }
            mean *= inv_w;
            let mut var = S::ZERO;
            for v in row {
                let d = *v - mean;
                var += d * d;
            }
            var *= inv_w;
            let inv_std = S::ONE / (var + eps).sqrt();
            for j in 0..w {
                out[j] = (row[j] - mean) * inv_std * g[j] + b[j];
            }
        }
        let rg = self.needs_grad(&[x, gain, offset]);
        Ok(self.push(
            self.shape(x).to_vec(),
            data,
            rg,
            Op::LayerNorm {
                x,
                gain,
                offset,
                eps,
            },
        ))
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let data = self.nodes[a.0]
            .data
            .iter()
            .map(|v| v.maximum(S::ZERO))
            .collect();
        let rg = self.needs_grad(&[a]);
        self.push(self.shape(a).to_vec(), data, rg, Op::Relu(a))
    }

    /// Row lookup into a `[vocab, width]` table; output is `[ids.len(), width]`.
    pub fn gather(&mut self, table: TensorId, ids: &[u32]) -> Result<TensorId, TensorError> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::BadFactorization {
                op: "gather",
                shape,
                detail: "[vocab, width]".to_string(),
            });
        }
        let (vocab, width) = (shape[0], shape[1]);
        let src = self.data(table);
        let mut data = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            let id = id as usize;
            if id >= vocab {
                return Err(TensorError::TargetOutOfRange {
                    target: id as u32,
                    vocab,
                });
            }
            data.extend_from_slice(&src[id * width..(id + 1) * width]);
        }
        let rg = self.needs_grad(&[table]);
        Ok(self.push(
            vec![ids.len(), width],
            data,
            rg,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Concatenate along the last axis; all parts must share leading dims.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId, TensorError> {
        let first = parts.first().ok_or(TensorError::ShapeMismatch {
            op: "concat_cols",
            lhs: vec![],
            rhs: vec![],
        })?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let rows: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = self.shape(*p);
            if s.len() != lead.len() + 1 || s[..s.len() - 1] != lead[..] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(*first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![S::ZERO; rows * total];
        let mut col = 0;
        for (p, w) in parts.iter().zip(&widths) {
            let src = self.data(*p);
            for r in 0..rows {
                data[r * total + col..r * total + col + w]
                    .copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            col += w;
        }
        let mut shape = lead;
        shape.push(total);
        let rg = self.needs_grad(parts);
        Ok(self.push(shape, data, rg, Op::ConcatCols(parts.to_vec())))
    }

    /// Mean negative log-likelihood of `targets` under `logits [..., vocab]`,
    /// skipping positions whose target equals `pad`.
    pub fn cross_entropy(
        &mut self,
        logits: TensorId,
        targets: &[u32],
        pad: u32,
    ) -> Result<TensorId, TensorError> {
        let shape = self.shape(logits).to_vec();
        let vocab = shape.last().copied().filter(|v| *v > 0).ok_or(
            TensorError::BadFactorization {
                op: "cross_entropy",
                shape: shape.clone(),
                detail: "[..., vocab]".to_string(),
            },
        )?;
        let rows = self.numel(logits) / vocab;
        if targets.len() != rows {
            return Err(TensorError::TargetLength {
                op: "cross_entropy",
                expected: rows,
                actual: targets.len(),
            });
        }
        let src = self.data(logits);
        let mut total = S::ZERO;
        let mut counted = 0usize;
        for (r, &t) in targets.iter().enumerate() {
            if t == pad {
                continue;
            }
            if t as usize >= vocab {
                return Err(TensorError::TargetOutOfRange { target: t, vocab });
            }
            let row = &src[r * vocab..(r + 1) * vocab];
            let mut max = S::from_f64(f64::NEG_INFINITY);
            for v in row {
                max = max.maximum(*v);
            }
            let mut sum = S::ZERO;
            for v in row {
                sum += (*v - max).exp();
            }
            total += max + sum.ln() - row[t as usize];
            counted += 1;
        }
        if counted == 0 {
            return Err(TensorError::AllPadBatch);
        }
        let loss = total / S::from_f64(counted as f64);
        let rg = self.needs_grad(&[logits]);
        Ok(self.push(
            vec![],
            vec![loss],
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                pad,
                counted,
            },
        ))
    }

    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let mut total = S::ZERO;
        for v in &self.nodes[a.0].data {
            total += *v;
        }
        let rg = self.needs_grad(&[a]);
        self.push(vec![], vec![total], rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: TensorId) -> TensorId {
        let n = self.numel(a);
        let mut total = S::ZERO;
        for v in &self.nodes[a.0].data {
            total += *v;
        }
        let rg = self.needs_grad(&[a]);
        self.push(
            vec![],
            vec![total / S::from_f64(n as f64)],
            rg,
            Op::Mean(a),
        )
    }

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId, TensorError> {
        if shape.iter().product::<usize>() != self.numel(a) {
            return Err(TensorError::BadReshape {
                from: self.shape(a).to_vec(),
                to: shape,
            });
        }
        let data = self.nodes[a.0].data.clone();
        let rg = self.needs_grad(&[a]);
        Ok(self.push(shape, data, rg, Op::Reshape(a)))
    }

    // ---- backward --------------------------------------------------------

    /// Reverse-mode sweep from a scalar loss. Gradients of all grad-carrying
    /// nodes are reset to zero first, so repeated calls are independent; nodes
    /// not on a path to the loss keep all-zero gradients.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), TensorError> {
        if self.numel(loss) != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.shape(loss).to_vec(),
            });
        }
        for node in &mut self.nodes {
            node.grad = if node.requires_grad {
                Some(vec![S::ZERO; node.data.len()])
            } else {
                None
            };
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad.as_mut().unwrap()[0] = S::ONE;
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let contributions = self.node_contributions(i);
            for (pid, c) in contributions {
                if let Some(g) = self.nodes[pid].grad.as_mut() {
                    for (dst, src) in g.iter_mut().zip(&c) {
                        *dst += *src;
                    }
                }
            }
        }
        Ok(())
    }

    /// Gradient contributions of node `i` to each grad-carrying parent.
    fn node_contributions(&self, i: usize) -> Vec<(usize, Vec<S>)> {
        let node = &self.nodes[i];
        let g = match node.grad.as_deref() {
            Some(g) => g,
            None => return vec![],
        };
        let wants = |id: TensorId| self.nodes[id.0].requires_grad;
        let mut out: Vec<(usize, Vec<S>)> = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if wants(*a) {
                    out.push((a.0, g.to_vec()));
                }
                if wants(*b) {
                    out.push((b.0, g.to_vec()));
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    out.push((
                        a.0,
                        g.iter()
                            .zip(self.data(*b))
                            .map(|(gv, bv)| *gv * *bv)
                            .collect(),
                    ));
                }
                if wants(*b) {
                    out.push((
                        b.0,
                        g.iter()
                            .zip(self.data(*a))
                            .map(|(gv, av)| *gv * *av)
                            .collect(),
                    ));
                }
            }
            Op::Scale(a, factor) => {
                if wants(*a) {
                    out.push((a.0, g.iter().map(|gv| *gv * *factor).collect()));
                }
            }
            Op::AddRow { x, row } => {
                if wants(*x) {
                    out.push((x.0, g.to_vec()));
                }
                if wants(*row) {
                    let w = self.numel(*row);
                    let mut acc = vec![S::ZERO; w];
                    for chunk in g.chunks_exact(w) {
                        for (dst, src) in acc.iter_mut().zip(chunk) {
                            *dst += *src;
                        }
                    }
                    out.push((row.0, acc));
                }
            }
            Op::Matmul { a, b, m, k, n } => {
                if wants(*a) {
                    let mut da = vec![S::ZERO; m * k];
                    mm_nt(g, self.data(*b), &mut da, *m, *n, *k);
                    out.push((a.0, da));
                }
                if wants(*b) {
                    let mut db = vec![S::ZERO; k * n];
                    mm_tn(self.data(*a), g, &mut db, *m, *k, *n);
                    out.push((b.0, db));
                }
            }
            Op::BmmNn {
                a,
                b,
                batch,
                m,
                k,
                n,
            } => {
                if wants(*a) {
                    let mut da = vec![S::ZERO; batch * m * k];
                    for i in 0..*batch {
                        mm_nt(
                            &g[i * m * n..(i + 1) * m * n],
                            &self.data(*b)[i * k * n..(i + 1) * k * n],
                            &mut da[i * m * k..(i + 1) * m * k],
                            *m,
                            *n,
                            *k,
                        );
                    }
                    out.push((a.0, da));
                }
                if wants(*b) {
                    let mut db = vec![S::ZERO; batch * k * n];
                    for i in 0..*batch {
                        mm_tn(
                            &self.data(*a)[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            &mut db[i * k * n..(i + 1) * k * n],
                            *m,
                            *k,
                            *n,
                        );
                    }
                    out.push((b.0, db));
                }
            }
            Op::BmmNt {
                a,
                b,
                batch,
                m,
                k,
                n,
            } => {
                if wants(*a) {
                    let mut da = vec![S::ZERO; batch * m * k];
                    for i in 0..*batch {
                        mm_nn(
                            &g[i * m * n..(i + 1) * m * n],
                            &self.data(*b)[i * n * k..(i + 1) * n * k],
                            &mut da[i * m * k..(i + 1) * m * k],
                            *m,
                            *n,
                            *k,
                        );
                    }
                    out.push((a.0, da));
                }
                if wants(*b) {
                    let mut db = vec![S::ZERO; batch * n * k];
                    for i in 0..*batch {
                        mm_tn(
                            &g[i * m * n..(i + 1) * m * n],
                            &self.data(*a)[i * m * k..(i + 1) * m * k],
                            &mut db[i * n * k..(i + 1) * n * k],
                            *m,
                            *n,
                            *k,
                        );
                    }
                    out.push((b.0, db));
                }
            }
            Op::SplitHeads {
                x,
                batch,
                seq,
                heads,
                head_dim,
            } => {
                if wants(*x) {
                    let mut dx = vec![S::ZERO; g.len()];
                    for b in 0..*batch {
                        for h in 0..*heads {
                            for s in 0..*seq {
                                let from = (((b * heads + h) * seq) + s) * head_dim;
                                let dst = (b * seq + s) * (heads * head_dim) + h * head_dim;
                                for d in 0..*head_dim {
                                    dx[dst + d] += g[from + d];
                                }
                            }
                        }
                    }
                    out.push((x.0, dx));
                }
            }
            Op::MergeHeads {
                x,
                batch,
                seq,
                heads,
                head_dim,
            } => {
                if wants(*x) {
                    let mut dx = vec![S::ZERO; g.len()];
                    for b in 0..*batch {
                        for h in 0..*heads {
                            for s in 0..*seq {
                                let dst = (((b * heads + h) * seq) + s) * head_dim;
                                let from = (b * seq + s) * (heads * head_dim) + h * head_dim;
                                for d in 0..*head_dim {
                                    dx[dst + d] += g[from + d];
                                }
                            }
                        }
                    }
                    out.push((x.0, dx));
                }
            }
            Op::Softmax { x, axis } => {
                if wants(*x) {
                    let shape = &node.shape;
                    let axis_len = shape[*axis];
                    let inner: usize = shape[axis + 1..].iter().product();
                    let outer: usize = shape[..*axis].iter().product();
                    let y = &node.data;
                    let mut dx = vec![S::ZERO; y.len()];
                    for o in 0..outer {
                        for i2 in 0..inner {
                            let base = o * axis_len * inner + i2;
                            let mut dot = S::ZERO;
                            for a in 0..axis_len {
                                let idx = base + a * inner;
                                dot += y[idx] * g[idx];
                            }
                            for a in 0..axis_len {
                                let idx = base + a * inner;
                                dx[idx] = y[idx] * (g[idx] - dot);
                            }
                        }
                    }
                    out.push((x.0, dx));
                }
            }
            Op::LayerNorm {
                x,
                gain,
                offset,
                eps,
            } => {
                let w = *node.shape.last().unwrap();
                let inv_w = S::ONE / S::from_f64(w as f64);
                let src = self.data(*x);
                let gdat = self.data(*gain);
                let mut dx = if wants(*x) {
                    Some(vec![S::ZERO; src.len()])
                } else {
                    None
                };
                let mut dgain = if wants(*gain) {
                    Some(vec![S::ZERO; w])
                } else {
                    None
                };
                let mut doffset = if wants(*offset) {
                    Some(vec![S::ZERO; w])
                } else {
                    None
                };
                for (r, row) in src.chunks_exact(w).enumerate() {
                    let grow = &g[r * w..(r + 1) * w];
                    let mut mean = S::ZERO;
                    for v in row {
                        mean += *v;
                    }
                    mean *= inv_w;
                    let mut var = S::ZERO;
                    for v in row {
                        let d = *v - mean;
                        var += d * d;
                    }
                    var *= inv_w;
                    let inv_std = S::ONE / (var + *eps).sqrt();
                    // normalized activations for this row
                    let xhat: Vec<S> = row.iter().map(|v| (*v - mean) * inv_std).collect();
                    if let Some(dg) = dgain.as_mut() {
                        for j in 0..w {
                            dg[j] += grow[j] * xhat[j];
                        }
                    }
                    if let Some(db) = doffset.as_mut() {
                        for j in 0..w {
                            db[j] += grow[j];
                        }
                    }
                    if let Some(dx) = dx.as_mut() {
                        let mut mean_dy = S::ZERO;
                        let mut mean_dy_xhat = S::ZERO;
                        let dy: Vec<S> = (0..w).map(|j| grow[j] * gdat[j]).collect();
                        for j in 0..w {
                            mean_dy += dy[j];
                            mean_dy_xhat += dy[j] * xhat[j];
                        }
                        mean_dy *= inv_w;
                        mean_dy_xhat *= inv_w;
                        let drow = &mut dx[r * w..(r + 1) * w];
                        for j in 0..w {
                            drow[j] = (dy[j] - mean_dy - xhat[j] * mean_dy_xhat) * inv_std;
                        }
                    }
                }
                if let Some(dx) = dx {
                    out.push((x.0, dx));
                }
                if let Some(dg) = dgain {
                    out.push((gain.0, dg));
                }
                if let Some(db) = doffset {
                    out.push((offset.0, db));
                }
            }
            Op::Relu(a) => {
                if wants(*a) {
                    let src = self.data(*a);
                    out.push((
                        a.0,
                        g.iter()
                            .zip(src)
                            .map(|(gv, xv)| if *xv > S::ZERO { *gv } else { S::ZERO })
                            .collect(),
                    ));
                }
            }
            Op::Gather { table, ids } => {
                if wants(*table) {
                    let width = self.shape(*table)[1];
                    let mut dt = vec![S::ZERO; self.numel(*table)];
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = id as usize * width;
                        for d in 0..width {
                            dt[dst + d] += g[r * width + d];
                        }
                    }
                    out.push((table.0, dt));
                }
            }
            Op::ConcatCols(parts) => {
                let total = *node.shape.last().unwrap();
                let rows = node.data.len() / total;
                let mut col = 0;
                for p in parts {
                    let w = *self.shape(*p).last().unwrap();
                    if wants(*p) {
                        let mut dp = vec![S::ZERO; rows * w];
                        for r in 0..rows {
                            dp[r * w..(r + 1) * w]
                                .copy_from_slice(&g[r * total + col..r * total + col + w]);
                        }
                        out.push((p.0, dp));
                    }
                    col += w;
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                pad,
                counted,
            } => {
                if wants(*logits) {
                    let vocab = *self.shape(*logits).last().unwrap();
                    let src = self.data(*logits);
                    let scale = g[0] / S::from_f64(*counted as f64);
                    let mut dl = vec![S::ZERO; src.len()];
                    for (r, &t) in targets.iter().enumerate() {
                        if t == *pad {
                            continue;
                        }
                        let row = &src[r * vocab..(r + 1) * vocab];
                        let mut max = S::from_f64(f64::NEG_INFINITY);
                        for v in row {
                            max = max.maximum(*v);
                        }
                        let mut sum = S::ZERO;
                        for v in row {
                            sum += (*v - max).exp();
                        }
                        let drow = &mut dl[r * vocab..(r + 1) * vocab];
                        for j in 0..vocab {
                            let p = (row[j] - max).exp() / sum;
                            drow[j] = p * scale;
                        }
                        drow[t as usize] -= scale;
                    }
                    out.push((logits.0, dl));
                }
            }
            Op::Sum(a) => {
                if wants(*a) {
                    out.push((a.0, vec![g[0]; self.numel(*a)]));
                }
            }
            Op::Mean(a) => {
                if wants(*a) {
                    let n = self.numel(*a);
                    out.push((a.0, vec![g[0] / S::from_f64(n as f64); n]));
                }
            }
            Op::Reshape(a) => {
                if wants(*a) {
                    out.push((a.0, g.to_vec()));
                }
            }
        }
        out
    }
}

// Row-major matmul kernels. Inner loops run over contiguous slices so the
// compiler can vectorize them; accumulation order is fixed, which keeps
// results bit-reproducible run to run.

/// `c[m,n] += a[m,k] @ b[k,n]`
fn mm_nn<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * *bv;
            }
        }
    }
}

/// `c[m,q] += a[m,p] @ b[q,p]^T` (row-by-row dot products)
fn mm_nt<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, p: usize, q: usize) {
    for i in 0..m {
        let arow = &a[i * p..(i + 1) * p];
        let crow = &mut c[i * q..(i + 1) * q];
        for (j, cv) in crow.iter_mut().enumerate() {
            let brow = &b[j * p..(j + 1) * p];
            let mut dot = S::ZERO;
            for (av, bv) in arow.iter().zip(brow) {
                dot += *av * *bv;
            }
            *cv += dot;
        }
    }
}

/// `c[k,n] += a[m,k]^T @ b[m,n]`
fn mm_tn<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * *bv;
            }
        }
    }
}
