use std::borrow::Cow;

use indexmap::IndexMap;

use super::kernels;
use super::{Result, Tensor, TensorError};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Param,
    Constant,
    MatMul,
    Add,
    Scale(f64),
    Reshape,
    Transpose(usize, usize),
    GatherRows { idx: Vec<usize>, k: usize },
    ConcatRows,
    LayerNorm,
    Gelu,
    Softmax,
    Mean,
    SumSq,
    CrossEntropy(Vec<usize>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Param => "param",
            Op::Constant => "constant",
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Scale(_) => "scale",
            Op::Reshape => "reshape",
            Op::Transpose(..) => "transpose",
            Op::GatherRows { .. } => "gather_rows",
            Op::ConcatRows => "concat_rows",
            Op::LayerNorm => "layer_norm",
            Op::Gelu => "gelu",
            Op::Softmax => "softmax",
            Op::Mean => "mean",
            Op::SumSq => "sum_sq",
            Op::CrossEntropy(_) => "cross_entropy",
        }
    }

    /// The op restricted to sample `b` of `batch` along a batched leading axis.
    fn sample_slice(&self, b: usize, batch: usize) -> Op {
        match self {
            Op::GatherRows { idx, k } => {
                let per = idx.len() / batch;
                Op::GatherRows {
                    idx: idx[b * per..(b + 1) * per].to_vec(),
                    k: *k,
                }
            }
            Op::CrossEntropy(labels) => {
                let per = labels.len() / batch;
                Op::CrossEntropy(labels[b * per..(b + 1) * per].to_vec())
            }
            other => other.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<Var>,
    value: Tensor,
    /// Leading axis indexes samples.
    batched: bool,
    /// The op combines values from different samples.
    mixes_samples: bool,
    requires_grad: bool,
}

/// Position and shape of one parameter inside a flattened gradient row.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSlot {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl ParamSlot {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Builds the offset table for parameters in the given order.
pub fn layout_of<'a>(params: impl Iterator<Item = (&'a str, &'a [usize])>) -> Vec<ParamSlot> {
    let mut offset = 0;
    params
        .map(|(name, shape)| {
            let slot = ParamSlot {
                name: name.to_string(),
                offset,
                shape: shape.to_vec(),
            };
            offset += slot.len();
            slot
        })
        .collect()
}

/// One flattened gradient row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PerSampleGrads {
    batch_size: usize,
    dim: usize,
    data: Vec<f64>,
    layout: Vec<ParamSlot>,
}

impl PerSampleGrads {
    pub fn new(batch_size: usize, layout: Vec<ParamSlot>, data: Vec<f64>) -> Result<Self> {
        let dim = layout.last().map_or(0, |s| s.offset + s.len());
        let mut expected = 0;
        for slot in &layout {
            if slot.offset != expected {
                return Err(TensorError::InvalidArgument(format!(
                    "offset table does not partition the row at {:?}",
                    slot.name
                )));
            }
            expected += slot.len();
        }
        if data.len() != batch_size * dim {
            return Err(TensorError::DataLength {
                shape: vec![batch_size, dim],
                len: data.len(),
            });
        }
        Ok(Self {
            batch_size,
            dim,
            data,
            layout,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    /// Total parameter count.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn layout(&self) -> &[ParamSlot] {
        &self.layout
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.dim.max(1)).take(self.batch_size)
    }

    /// Sum of all rows, accumulated in sample order.
    pub fn sum_rows(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for row in self.rows() {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Parameter gradients of a scalar loss, keyed by parameter name in
/// registration order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(IndexMap<String, Tensor>);

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// All gradients concatenated in registration order.
    pub fn flatten(&self) -> Vec<f64> {
        self.0.values().flat_map(|t| t.data().iter().copied()).collect()
    }
}

/// A recorded computation. Nodes are appended in evaluation order, so the
/// tape is topologically sorted by construction.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: IndexMap<String, Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn is_batched(&self, v: Var) -> bool {
        self.nodes[v.0].batched
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    pub fn param_layout(&self) -> Vec<ParamSlot> {
        layout_of(
            self.params
                .iter()
                .map(|(n, v)| (n.as_str(), self.nodes[v.0].value.shape())),
        )
    }

    fn push(&mut self, op: Op, inputs: Vec<Var>, value: Tensor, batched: bool, mixes_samples: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite(op.name()));
        }
        let requires_grad = matches!(op, Op::Param) || inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            inputs,
            value,
            batched,
            mixes_samples,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Registers a trainable leaf.
    pub fn param(&mut self, name: &str, value: Tensor) -> Result<Var> {
        if self.params.contains_key(name) {
            return Err(TensorError::DuplicateParam(name.to_string()));
        }
        let v = self.push(Op::Param, vec![], value, false, false)?;
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// A constant shared by all samples.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(Op::Constant, vec![], value, false, false)
    }

    /// Per-sample data whose leading axis is the batch axis.
    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        if value.rank() == 0 {
            return Err(TensorError::InvalidArgument("batched input needs a leading axis".into()));
        }
        self.push(Op::Constant, vec![], value, true, false)
    }

    fn flags(&self, v: Var) -> (bool, usize) {
        let n = &self.nodes[v.0];
        (n.batched, n.value.rank())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = kernels::matmul(self.value(a), self.value(b))?;
        let ((ba, ra), (bb, rb)) = (self.flags(a), self.flags(b));
        let (batched, mixes) = match (ba, bb) {
            (false, false) => (false, false),
            (true, false) => (true, false),
            (true, true) if ra >= 3 && rb >= 3 => (true, false),
            _ => (false, true),
        };
        self.push(Op::MatMul, vec![a, b], value, batched, mixes)
    }

    /// `a + b`, broadcasting `b` over the leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = kernels::add(self.value(a), self.value(b))?;
        let ((ba, ra), (bb, rb)) = (self.flags(a), self.flags(b));
        let (batched, mixes) = match (ba, bb) {
            (_, false) => (ba, false),
            (true, true) if ra == rb => (true, false),
            (true, true) => (true, true),
            (false, true) => (false, true),
        };
        self.push(Op::Add, vec![a, b], value, batched, mixes)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let value = kernels::scale(self.value(a), factor);
        let batched = self.nodes[a.0].batched;
        self.push(Op::Scale(factor), vec![a], value, batched, false)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let src = self.value(a);
        let value = src.clone().reshaped(shape)?;
        let (ba, _) = self.flags(a);
        let keeps_batch = !shape.is_empty() && src.rank() > 0 && shape[0] == src.shape()[0];
        let (batched, mixes) = if ba && !keeps_batch { (false, true) } else { (ba, false) };
        self.push(Op::Reshape, vec![a], value, batched, mixes)
    }

    /// Swaps two axes (materialized copy).
    pub fn transpose(&mut self, a: Var, i: usize, j: usize) -> Result<Var> {
        let value = kernels::swap_axes(self.value(a), i, j)?;
        let (ba, _) = self.flags(a);
        let (batched, mixes) = if ba && i != j && (i == 0 || j == 0) { (false, true) } else { (ba, false) };
        self.push(Op::Transpose(i, j), vec![a], value, batched, mixes)
    }

    /// Selects rows along the second-to-last axis: for every leading position
    /// `p`, output row `r` is input row `indices[p * k + r]`.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize], k: usize) -> Result<Var> {
        let value = kernels::gather_rows(self.value(a), indices, k)?;
        let (ba, ra) = self.flags(a);
        let (batched, mixes) = if ba && ra == 2 { (false, true) } else { (ba, false) };
        self.push(
            Op::GatherRows {
                idx: indices.to_vec(),
                k,
            },
            vec![a],
            value,
            batched,
            mixes,
        )
    }

    /// Concatenates along the second-to-last axis.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = kernels::concat_rows(self.value(a), self.value(b))?;
        let ((ba, ra), (bb, _)) = (self.flags(a), self.flags(b));
        if ba != bb {
            return Err(TensorError::Shape {
                op: "concat_rows",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let mixes = ba && ra == 2;
        self.push(Op::ConcatRows, vec![a, b], value, ba && !mixes, mixes)
    }

    /// Normalizes the last axis, then applies `gamma * x + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        if self.nodes[gamma.0].batched || self.nodes[beta.0].batched {
            return Err(TensorError::InvalidArgument("layer_norm affine parameters must be shared".into()));
        }
        let value = kernels::layer_norm(self.value(x), self.value(gamma), self.value(beta))?;
        let (bx, rx) = self.flags(x);
        self.push(Op::LayerNorm, vec![x, gamma, beta], value, bx, bx && rx == 1)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let value = kernels::gelu(self.value(x));
        let batched = self.nodes[x.0].batched;
        self.push(Op::Gelu, vec![x], value, batched, false)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let value = kernels::softmax(self.value(x))?;
        let (bx, rx) = self.flags(x);
        self.push(Op::Softmax, vec![x], value, bx, bx && rx == 1)
    }

    fn reduction(&mut self, op: Op, x: Var, value: Tensor) -> Result<Var> {
        let (bx, rx) = self.flags(x);
        let (batched, mixes) = if bx && rx == 1 { (false, true) } else { (bx, false) };
        self.push(op, vec![x], value, batched, mixes)
    }

    /// Mean over the last axis.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let value = kernels::mean_last(self.value(x))?;
        self.reduction(Op::Mean, x, value)
    }

    /// Sum of squares over the last axis.
    pub fn sum_sq(&mut self, x: Var) -> Result<Var> {
        let value = kernels::sum_sq_last(self.value(x))?;
        self.reduction(Op::SumSq, x, value)
    }

    /// Row-wise softmax cross-entropy of logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let value = kernels::softmax_cross_entropy(self.value(logits), labels)?;
        self.reduction(Op::CrossEntropy(labels.to_vec()), logits, value)
    }

    /// Gradients of a scalar `loss` with respect to every parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let node = &self.nodes[loss.0];
        if node.value.rank() != 0 {
            return Err(TensorError::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if node.inputs.is_empty() || !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[id].take() else { continue };
            let needs: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let res = backward_rule(&node.op, &inputs, &node.value, &gy, &needs)?;
            for (v, g) in node.inputs.iter().zip(res) {
                if let Some(g) = g {
                    accumulate(&mut grads[v.0], g);
                }
            }
        }
        let map = self
            .params
            .iter()
            .map(|(name, v)| {
                let g = grads
                    .get_mut(v.0)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(self.nodes[v.0].value.shape()));
                (name.clone(), g)
            })
            .collect();
        Ok(Gradients(map))
    }

    /// One gradient row per sample from a batched vector of per-sample
    /// losses, computed in a single reverse pass.
    ///
    /// Gradients of shared (unbatched) nodes are carried per sample with an
    /// extra leading axis. Any op that mixes samples on the gradient path
    /// makes the graph non-separable.
    pub fn per_sample_backward(&self, losses: Var) -> Result<PerSampleGrads> {
        let node = &self.nodes[losses.0];
        if !node.batched || node.value.rank() != 1 || node.value.numel() == 0 {
            return Err(TensorError::InvalidArgument(format!(
                "per-sample backward needs a batched loss vector, got shape {:?}",
                node.value.shape()
            )));
        }
        let batch = node.value.numel();
        let mut grads: Vec<Option<Tensor>> = vec![None; losses.0 + 1];
        grads[losses.0] = Some(Tensor::full(&[batch], 1.0));

        for id in (0..=losses.0).rev() {
            let node = &self.nodes[id];
            if node.inputs.is_empty() || !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[id].take() else { continue };
            let needs: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
            if node.mixes_samples {
                return Err(TensorError::NonSeparable(node.op.name()));
            }
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();

            if node.batched {
                let batched_needs: Vec<bool> = node
                    .inputs
                    .iter()
                    .zip(&needs)
                    .map(|(v, &n)| n && self.nodes[v.0].batched)
                    .collect();
                let shared_needs: Vec<bool> = node
                    .inputs
                    .iter()
                    .zip(&needs)
                    .map(|(v, &n)| n && !self.nodes[v.0].batched)
                    .collect();
                if batched_needs.iter().any(|&n| n) {
                    let res = backward_rule(&node.op, &inputs, &node.value, &gy, &batched_needs)?;
                    for (v, g) in node.inputs.iter().zip(res) {
                        if let Some(g) = g {
                            accumulate(&mut grads[v.0], g);
                        }
                    }
                }
                if shared_needs.iter().any(|&n| n) {
                    let mut expanded: Vec<Option<Vec<f64>>> = node
                        .inputs
                        .iter()
                        .zip(&shared_needs)
                        .map(|(v, &n)| n.then(|| Vec::with_capacity(batch * self.nodes[v.0].value.numel())))
                        .collect();
                    for b in 0..batch {
                        let sliced: Vec<Cow<Tensor>> = node
                            .inputs
                            .iter()
                            .map(|v| {
                                let n = &self.nodes[v.0];
                                if n.batched {
                                    Cow::Owned(n.value.outer_slice(b))
                                } else {
                                    Cow::Borrowed(&n.value)
                                }
                            })
                            .collect();
                        let refs: Vec<&Tensor> = sliced.iter().map(|c| c.as_ref()).collect();
                        let out_b = if matches!(node.op, Op::Softmax) {
                            Cow::Owned(node.value.outer_slice(b))
                        } else {
                            Cow::Borrowed(&node.value)
                        };
                        let op_b = node.op.sample_slice(b, batch);
                        let res = backward_rule(&op_b, &refs, &out_b, &gy.outer_slice(b), &shared_needs)?;
                        for (buf, g) in expanded.iter_mut().zip(res) {
                            if let (Some(buf), Some(g)) = (buf.as_mut(), g) {
                                buf.extend_from_slice(g.data());
                            }
                        }
                    }
                    for (v, buf) in node.inputs.iter().zip(expanded) {
                        if let Some(buf) = buf {
                            let mut shape = vec![batch];
                            shape.extend_from_slice(self.nodes[v.0].value.shape());
                            accumulate(&mut grads[v.0], Tensor::new(shape, buf)?);
                        }
                    }
                }
            } else {
                // Shared node carrying per-sample gradients on an extra leading axis.
                let mut expanded: Vec<Option<Vec<f64>>> = node
                    .inputs
                    .iter()
                    .zip(&needs)
                    .map(|(v, &n)| n.then(|| Vec::with_capacity(batch * self.nodes[v.0].value.numel())))
                    .collect();
                for b in 0..batch {
                    let g_b = gy.index_outer(b);
                    let res = backward_rule(&node.op, &inputs, &node.value, &g_b, &needs)?;
                    for (buf, g) in expanded.iter_mut().zip(res) {
                        if let (Some(buf), Some(g)) = (buf.as_mut(), g) {
                            buf.extend_from_slice(g.data());
                        }
                    }
                }
                for (v, buf) in node.inputs.iter().zip(expanded) {
                    if let Some(buf) = buf {
                        let mut shape = vec![batch];
                        shape.extend_from_slice(self.nodes[v.0].value.shape());
                        accumulate(&mut grads[v.0], Tensor::new(shape, buf)?);
                    }
                }
            }
        }

        let layout = self.param_layout();
        let dim = layout.last().map_or(0, |s| s.offset + s.len());
        let mut data = vec![0.0; batch * dim];
        for slot in &layout {
            let v = self.params[slot.name.as_str()];
            if let Some(Some(g)) = grads.get(v.0) {
                let n = slot.len();
                for b in 0..batch {
                    data[b * dim + slot.offset..b * dim + slot.offset + n].copy_from_slice(&g.data()[b * n..(b + 1) * n]);
                }
            }
        }
        PerSampleGrads::new(batch, layout, data)
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

fn backward_rule(op: &Op, inputs: &[&Tensor], output: &Tensor, gy: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
    Ok(match op {
        Op::Param | Op::Constant => vec![],
        Op::MatMul => kernels::matmul_backward(inputs[0], inputs[1], gy, needs)?,
        Op::Add => kernels::add_backward(inputs[1], gy, needs)?,
        Op::Scale(f) => vec![needs[0].then(|| kernels::scale(gy, *f))],
        Op::Reshape => vec![Some(gy.clone().reshaped(inputs[0].shape())?)],
        Op::Transpose(i, j) => vec![Some(kernels::swap_axes(gy, *i, *j)?)],
        Op::GatherRows { idx, k } => vec![Some(kernels::gather_rows_backward(inputs[0].shape(), idx, *k, gy)?)],
        Op::ConcatRows => kernels::concat_rows_backward(inputs[0], inputs[1], gy, needs)?,
        Op::LayerNorm => kernels::layer_norm_backward(inputs[0], inputs[1], gy, needs)?,
        Op::Gelu => vec![Some(kernels::gelu_backward(inputs[0], gy))],
        Op::Softmax => vec![Some(kernels::softmax_backward(output, gy)?)],
        Op::Mean => vec![Some(kernels::mean_last_backward(inputs[0], gy)?)],
        Op::SumSq => vec![Some(kernels::sum_sq_last_backward(inputs[0], gy)?)],
        Op::CrossEntropy(labels) => vec![Some(kernels::softmax_cross_entropy_backward(inputs[0], labels, gy)?)],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_scalar_case() {
        let mut g = Graph::new();
        let a = g.constant(t(&[1, 1], &[2.0])).unwrap();
        let b = g.constant(t(&[1, 1], &[3.0])).unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[6.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.constant(Tensor::zeros(&[4, 5])).unwrap();
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    }

    #[test]
    fn layer_norm_of_constant_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[2, 5], 3.7)).unwrap();
        let gamma = g.constant(Tensor::full(&[5], 1.0)).unwrap();
        let beta = g.constant(Tensor::zeros(&[5])).unwrap();
        let y = g.layer_norm(x, gamma, beta).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v.abs() < 1e-9));
    }

    #[test]
    fn softmax_symmetric() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2])).unwrap();
        let y = g.softmax(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn sum_sq_gradient_is_twice_w() {
        let mut g = Graph::new();
        let w = g.param("w", Tensor::from_vec(vec![1.0, -2.0])).unwrap();
        let l = g.sum_sq(w).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get("w").unwrap().data(), &[2.0, -4.0]);
        assert_eq!(grads.get("w").unwrap().shape(), &[2]);
    }

    #[test]
    fn constant_loss_gives_zero_grads() {
        let mut g = Graph::new();
        let w = g.param("w", Tensor::from_vec(vec![1.0, 2.0])).unwrap();
        let c = g.constant(Tensor::from_vec(vec![3.0, 4.0])).unwrap();
        let l = g.sum_sq(c).unwrap();
        let _ = w;
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get("w").unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let w = g.param("w", Tensor::from_vec(vec![1.0, 2.0])).unwrap();
        assert!(matches!(g.backward(w), Err(TensorError::InvalidArgument(_))));
    }

    #[test]
    fn duplicate_param_rejected() {
        let mut g = Graph::new();
        g.param("w", Tensor::scalar(1.0)).unwrap();
        assert!(matches!(g.param("w", Tensor::scalar(2.0)), Err(TensorError::DuplicateParam(_))));
    }

    #[test]
    fn batch_statistics_are_non_separable() {
        // x - mean_over_batch(x): a batch-norm style coupling.
        let mut g = Graph::new();
        let w = g.param("w", t(&[2, 1], &[0.5, -1.0])).unwrap();
        let x = g.input(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
        let h = g.matmul(x, w).unwrap(); // [3, 1]
        let ht = g.reshape(h, &[3]).unwrap();
        let m = g.mean(ht).unwrap(); // mixes samples
        let neg = g.scale(m, -1.0).unwrap();
        let hm = g.reshape(h, &[3, 1]).unwrap();
        let centered = g.add(hm, neg).unwrap();
        let sq = g.sum_sq(centered).unwrap();
        assert!(matches!(g.per_sample_backward(sq), Err(TensorError::NonSeparable(_))));
    }

    #[test]
    fn final_aggregation_is_allowed() {
        let mut g = Graph::new();
        let w = g.param("w", t(&[2, 1], &[0.5, -1.0])).unwrap();
        let x = g.input(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
        let h = g.matmul(x, w).unwrap();
        let per = g.sum_sq(h).unwrap(); // [3]
        let _total = g.mean(per).unwrap();
        let psg = g.per_sample_backward(per).unwrap();
        assert_eq!(psg.batch_size(), 3);
        assert_eq!(psg.dim(), 2);
        // d/dw (x.w)^2 = 2 (x.w) x ; sample 0: x=(1,2), x.w=-1.5
        assert_eq!(psg.row(0), &[-3.0, -6.0]);
    }

    #[test]
    fn ops_reject_sample_mixing_layouts() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[4, 3])).unwrap();
        let y = g.transpose(x, 0, 1).unwrap();
        assert!(!g.is_batched(y));
        let r = g.reshape(x, &[12]).unwrap();
        assert!(!g.is_batched(r));
    }
}
