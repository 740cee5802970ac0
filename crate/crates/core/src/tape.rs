//! Recorded forward computation and the reverse-mode gradient pass.
//!
//! A [`Tape`] is an append-only list of [`GraphNode`]s in topological order.
//! Parameters enter the graph as leaf nodes that borrow from a [`Params`]
//! store, so the same graph serves training (parameter gradients), gradient
//! baselines and relevance propagation.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

pub type NodeId = usize;
pub type ParamId = usize;

/// Operation family used for composite rule lookup.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OpKind {
    Embedding,
    Linear,
    /// Non-overlapping patch convolution, computed as a linear map over flattened patches.
    Conv,
    MatMul,
    Softmax,
    Norm,
    ElementwiseNonlin,
    Add,
    Hadamard,
    Scale,
    TopKSelect,
    /// Parameters and exact re-indexing (head split/merge, slicing, broadcast).
    Structural,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Embedding => "Embedding",
            OpKind::Linear => "Linear",
            OpKind::Conv => "Conv",
            OpKind::MatMul => "MatMul",
            OpKind::Softmax => "Softmax",
            OpKind::Norm => "Norm",
            OpKind::ElementwiseNonlin => "ElementwiseNonlin",
            OpKind::Add => "Add",
            OpKind::Hadamard => "Hadamard",
            OpKind::Scale => "Scale",
            OpKind::TopKSelect => "TopKSelect",
            OpKind::Structural => "Structural",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            OpKind::Embedding,
            OpKind::Linear,
            OpKind::Conv,
            OpKind::MatMul,
            OpKind::Softmax,
            OpKind::Norm,
            OpKind::ElementwiseNonlin,
            OpKind::Add,
            OpKind::Hadamard,
            OpKind::Scale,
            OpKind::TopKSelect,
            OpKind::Structural,
        ]
        .into_iter()
        .find(|k| k.name().eq_ignore_ascii_case(s))
    }

    /// Kinds whose relevance handling is fixed rather than chosen by a composite.
    pub fn needs_rule(&self) -> bool {
        !matches!(self, OpKind::Embedding | OpKind::Structural)
    }
}

/// Override applied to selected columns of an activation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode", content = "value")]
pub enum ActivationEdit {
    Zero,
    Set(f64),
    Scale(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    /// Leaf holding the model input (token or patch embeddings).
    Input {
        tokens: Option<Vec<usize>>,
        table: Option<ParamId>,
    },
    Param(ParamId),
    /// `x·Wᵀ (+ b)` with inputs `[x, W]` or `[x, W, b]`.
    Linear,
    /// `x − mean(x)` along the last axis.
    CenterMean,
    /// `x / √(mean(x²) + eps)` along the last axis.
    Normalize { eps: f64 },
    /// `x ⊙ γ (+ β)` with inputs `[x, γ]` or `[x, γ, β]`.
    Affine,
    /// Mean over rows: `[S, d] → [1, d]`.
    MeanPool,
    MatMul { transpose_rhs: bool },
    Scale { factor: f64 },
    /// Softmax over the last axis; masked entries are excluded and output 0.
    Softmax { temperature: f64, mask: Option<Vec<bool>> },
    Gelu,
    Silu,
    Add,
    /// Elementwise product; the first input is the gate.
    Hadamard,
    TopK { k: usize, selected: Vec<bool> },
    Override { edits: Vec<(usize, ActivationEdit)> },
    /// Multiplies the given last-axis columns by `factor`.
    ScaleColumns { columns: Vec<usize>, factor: f64 },
    /// `[S, H·dh] → [H, S, dh]`.
    SplitHeads { heads: usize },
    /// `[H, S, dh] → [S, H·dh]`.
    MergeHeads,
    RowSlice { start: usize, len: usize },
    /// `[S, E] → [S, 1]`.
    Column { index: usize },
    /// `[.., 1] → [.., width]`.
    Broadcast { width: usize },
}

impl Op {
    pub fn kind(&self) -> OpKind {
        match self {
            Op::Input { .. } => OpKind::Embedding,
            Op::Param(_) => OpKind::Structural,
            Op::Linear | Op::CenterMean | Op::Affine | Op::MeanPool => OpKind::Linear,
            Op::Normalize { .. } => OpKind::Norm,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Scale { .. } | Op::Override { .. } | Op::ScaleColumns { .. } => OpKind::Scale,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::Gelu | Op::Silu => OpKind::ElementwiseNonlin,
            Op::Add => OpKind::Add,
            Op::Hadamard => OpKind::Hadamard,
            Op::TopK { .. } => OpKind::TopKSelect,
            Op::SplitHeads { .. } | Op::MergeHeads | Op::RowSlice { .. } | Op::Column { .. } | Op::Broadcast { .. } => {
                OpKind::Structural
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Param(_) => "param",
            Op::Linear => "linear",
            Op::CenterMean => "center_mean",
            Op::Normalize { .. } => "normalize",
            Op::Affine => "affine",
            Op::MeanPool => "mean_pool",
            Op::MatMul { .. } => "matmul",
            Op::Scale { .. } => "scale",
            Op::Softmax { .. } => "softmax",
            Op::Gelu => "gelu",
            Op::Silu => "silu",
            Op::Add => "add",
            Op::Hadamard => "hadamard",
            Op::TopK { .. } => "topk",
            Op::Override { .. } => "override",
            Op::ScaleColumns { .. } => "scale_columns",
            Op::SplitHeads { .. } => "split_heads",
            Op::MergeHeads => "merge_heads",
            Op::RowSlice { .. } => "row_slice",
            Op::Column { .. } => "column",
            Op::Broadcast { .. } => "broadcast",
        }
    }
}

/// Named parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name {name}")));
        }
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(value);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.tensors[self.id(name)?])
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.tensors[id]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

#[derive(Debug, Clone)]
pub struct GraphNode {
    pub id: NodeId,
    pub op: Op,
    pub kind: OpKind,
    pub inputs: Vec<NodeId>,
    pub tag: String,
    output: Option<Tensor>,
}

/// Gradients of a scalar `seed · output` with respect to every node and parameter.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub nodes: Vec<Option<Tensor>>,
    pub params: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn node(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params[id].as_ref()
    }
}

/// Forward computation recorded against a borrowed parameter store.
#[derive(Debug, Clone)]
pub struct Tape<'p> {
    params: &'p Params,
    nodes: Vec<GraphNode>,
    output: Option<NodeId>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p Params) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            output: None,
        }
    }

    pub fn params(&self) -> &'p Params {
        self.params
    }

    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &GraphNode {
        &self.nodes[id]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        let node = &self.nodes[id];
        match (&node.op, &node.output) {
            (Op::Param(p), _) => self.params.tensor(*p),
            (_, Some(t)) => t,
            _ => unreachable!("non-parameter node without output"),
        }
    }

    pub fn set_output(&mut self, id: NodeId) {
        self.output = Some(id);
    }

    /// The designated output node, or the last recorded node.
    pub fn output(&self) -> NodeId {
        self.output.unwrap_or(self.nodes.len().saturating_sub(1))
    }

    pub fn find(&self, tag: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| n.tag == tag)
    }

    /// The first `Input` leaf.
    pub fn input_node(&self) -> Option<NodeId> {
        self.nodes.iter().position(|n| matches!(n.op, Op::Input { .. }))
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, tag: impl Into<String>, output: Option<Tensor>) -> NodeId {
        let id = self.nodes.len();
        debug_assert!(inputs.iter().all(|&i| i < id));
        let kind = op.kind();
        self.nodes.push(GraphNode {
            id,
            op,
            kind,
            inputs,
            tag: tag.into(),
            output,
        });
        id
    }

    pub fn input(&mut self, value: Tensor, tokens: Option<Vec<usize>>, table: Option<ParamId>, tag: &str) -> NodeId {
        self.push(Op::Input { tokens, table }, vec![], tag, Some(value))
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        let tag = self.params.name(id).to_string();
        self.push(Op::Param(id), vec![], tag, None)
    }

    pub fn param_named(&mut self, name: &str) -> Result<NodeId> {
        let id = self.params.id(name)?;
        Ok(self.param(id))
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, tag: &str) -> Result<NodeId> {
        let out = tensor::linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(Op::Linear, inputs, tag, Some(out)))
    }

    /// Patch embedding: a linear map over flattened patches, looked up in composites as `Conv`.
    pub fn patch_conv(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, tag: &str) -> Result<NodeId> {
        let id = self.linear(x, w, b, tag)?;
        self.nodes[id].kind = OpKind::Conv;
        Ok(id)
    }

    pub fn center_mean(&mut self, x: NodeId, tag: &str) -> Result<NodeId> {
        let mut out = self.value(x).clone();
        let d = out.last_dim();
        for r in 0..out.n_rows() {
            let row = out.row_mut(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            row.iter_mut().for_each(|v| *v -= mean);
        }
        Ok(self.push(Op::CenterMean, vec![x], tag, Some(out)))
    }

    pub fn normalize(&mut self, x: NodeId, eps: f64, tag: &str) -> Result<NodeId> {
        if eps <= 0.0 {
            return Err(Error::InvalidArgument("normalization epsilon must be positive".into()));
        }
        let mut out = self.value(x).clone();
        let d = out.last_dim();
        for r in 0..out.n_rows() {
            let row = out.row_mut(r);
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let scale = 1.0 / (ms + eps).sqrt();
            row.iter_mut().for_each(|v| *v *= scale);
        }
        Ok(self.push(Op::Normalize { eps }, vec![x], tag, Some(out)))
    }

    pub fn affine(&mut self, x: NodeId, gamma: NodeId, beta: Option<NodeId>, tag: &str) -> Result<NodeId> {
        let (xv, g) = (self.value(x), self.value(gamma));
        if g.len() != xv.last_dim() {
            return Err(shape_err("affine", xv, g));
        }
        let bv = beta.map(|b| self.value(b));
        if bv.is_some_and(|b| b.len() != g.len()) {
            return Err(shape_err("affine", g, bv.unwrap()));
        }
        let mut out = xv.clone();
        let d = g.len();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = *v * g.data()[i % d] + bv.map_or(0.0, |b| b.data()[i % d]);
        }
        let mut inputs = vec![x, gamma];
        inputs.extend(beta);
        Ok(self.push(Op::Affine, inputs, tag, Some(out)))
    }

    pub fn mean_pool(&mut self, x: NodeId, tag: &str) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rank() != 2 || xv.shape()[0] == 0 {
            return Err(Error::InvalidArgument("mean_pool expects a non-empty [S, d] tensor".into()));
        }
        let (s, d) = (xv.shape()[0], xv.shape()[1]);
        let mut out = vec![0.0; d];
        for r in 0..s {
            for (o, v) in out.iter_mut().zip(xv.row(r)) {
                *o += v / s as f64;
            }
        }
        let out = Tensor::new(vec![1, d], out)?;
        Ok(self.push(Op::MeanPool, vec![x], tag, Some(out)))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId, transpose_rhs: bool, tag: &str) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != bv.rank() || av.rank() < 2 || av.shape()[..av.rank() - 2] != bv.shape()[..bv.rank() - 2] {
            return Err(shape_err("matmul", av, bv));
        }
        let out = if transpose_rhs {
            tensor::matmul(av, &bv.transpose_last())?
        } else {
            tensor::matmul(av, bv)?
        };
        Ok(self.push(Op::MatMul { transpose_rhs }, vec![a, b], tag, Some(out)))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64, tag: &str) -> NodeId {
        let out = self.value(x).scale(factor);
        self.push(Op::Scale { factor }, vec![x], tag, Some(out))
    }

    pub fn softmax(&mut self, x: NodeId, temperature: f64, mask: Option<Vec<bool>>, tag: &str) -> Result<NodeId> {
        let out = tensor::softmax_masked(self.value(x), temperature, mask.as_deref())?;
        Ok(self.push(Op::Softmax { temperature, mask }, vec![x], tag, Some(out)))
    }

    pub fn gelu(&mut self, x: NodeId, tag: &str) -> NodeId {
        let out = tensor::gelu(self.value(x));
        self.push(Op::Gelu, vec![x], tag, Some(out))
    }

    pub fn silu(&mut self, x: NodeId, tag: &str) -> NodeId {
        let out = tensor::silu(self.value(x));
        self.push(Op::Silu, vec![x], tag, Some(out))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId, tag: &str) -> Result<NodeId> {
        let out = tensor::add(self.value(a), self.value(b))?;
        Ok(self.push(Op::Add, vec![a, b], tag, Some(out)))
    }

    pub fn hadamard(&mut self, gate: NodeId, value: NodeId, tag: &str) -> Result<NodeId> {
        let out = tensor::hadamard(self.value(gate), self.value(value))?;
        Ok(self.push(Op::Hadamard, vec![gate, value], tag, Some(out)))
    }

    /// Keeps the `k` largest entries of each last-axis row (ties to the lower index) and zeroes the rest.
    pub fn top_k(&mut self, x: NodeId, k: usize, tag: &str) -> Result<NodeId> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if k == 0 || k > d {
            return Err(Error::InvalidArgument(format!("top_k: k={k} outside 1..={d}")));
        }
        let mut selected = vec![false; xv.len()];
        let mut out = Tensor::zeros(xv.shape());
        for r in 0..xv.n_rows() {
            let row = xv.row(r);
            let mut order: Vec<usize> = (0..d).collect();
            order.sort_by(|&i, &j| row[j].total_cmp(&row[i]).then(i.cmp(&j)));
            for &i in &order[..k] {
                selected[r * d + i] = true;
                out.row_mut(r)[i] = row[i];
            }
        }
        Ok(self.push(Op::TopK { k, selected }, vec![x], tag, Some(out)))
    }

    pub fn override_columns(&mut self, x: NodeId, edits: Vec<(usize, ActivationEdit)>, tag: &str) -> Result<NodeId> {
        let mut out = self.value(x).clone();
        let d = out.last_dim();
        if let Some(&(c, _)) = edits.iter().find(|(c, _)| *c >= d) {
            return Err(Error::InvalidArgument(format!("column {c} out of range for width {d}")));
        }
        for r in 0..out.n_rows() {
            let row = out.row_mut(r);
            for &(c, edit) in &edits {
                row[c] = match edit {
                    ActivationEdit::Zero => 0.0,
                    ActivationEdit::Set(v) => v,
                    ActivationEdit::Scale(f) => row[c] * f,
                };
            }
        }
        Ok(self.push(Op::Override { edits }, vec![x], tag, Some(out)))
    }

    pub fn scale_columns(&mut self, x: NodeId, columns: Vec<usize>, factor: f64, tag: &str) -> Result<NodeId> {
        let mut out = self.value(x).clone();
        let d = out.last_dim();
        if let Some(&c) = columns.iter().find(|&&c| c >= d) {
            return Err(Error::InvalidArgument(format!("column {c} out of range for width {d}")));
        }
        for r in 0..out.n_rows() {
            let row = out.row_mut(r);
            for &c in &columns {
                row[c] *= factor;
            }
        }
        Ok(self.push(Op::ScaleColumns { columns, factor }, vec![x], tag, Some(out)))
    }

    pub fn split_heads(&mut self, x: NodeId, heads: usize, tag: &str) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rank() != 2 || heads == 0 || xv.shape()[1] % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "split_heads: cannot split {:?} into {heads} heads",
                xv.shape()
            )));
        }
        let out = split_heads(xv, heads);
        Ok(self.push(Op::SplitHeads { heads }, vec![x], tag, Some(out)))
    }

    pub fn merge_heads(&mut self, x: NodeId, tag: &str) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rank() != 3 {
            return Err(Error::InvalidArgument(format!("merge_heads expects rank 3, got {:?}", xv.shape())));
        }
        let out = merge_heads(xv);
        Ok(self.push(Op::MergeHeads, vec![x], tag, Some(out)))
    }

    pub fn row_slice(&mut self, x: NodeId, start: usize, len: usize, tag: &str) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rank() != 2 || start + len > xv.shape()[0] {
            return Err(Error::InvalidArgument(format!(
                "row_slice {start}..{} out of range for {:?}",
                start + len,
                xv.shape()
            )));
        }
        let w = xv.shape()[1];
        let out = Tensor::new(vec![len, w], xv.data()[start * w..(start + len) * w].to_vec())?;
        Ok(self.push(Op::RowSlice { start, len }, vec![x], tag, Some(out)))
    }

    pub fn column(&mut self, x: NodeId, index: usize, tag: &str) -> Result<NodeId> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if index >= d {
            return Err(Error::InvalidArgument(format!("column {index} out of range for width {d}")));
        }
        let data: Vec<f64> = (0..xv.n_rows()).map(|r| xv.row(r)[index]).collect();
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().expect("rank ≥ 1") = 1;
        let out = Tensor::new(shape, data)?;
        Ok(self.push(Op::Column { index }, vec![x], tag, Some(out)))
    }

    pub fn broadcast(&mut self, x: NodeId, width: usize, tag: &str) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.last_dim() != 1 {
            return Err(Error::InvalidArgument(format!("broadcast expects last dim 1, got {:?}", xv.shape())));
        }
        let data: Vec<f64> = xv.data().iter().flat_map(|&v| std::iter::repeat_n(v, width)).collect();
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().expect("rank ≥ 1") = width;
        let out = Tensor::new(shape, data)?;
        Ok(self.push(Op::Broadcast { width }, vec![x], tag, Some(out)))
    }

    /// Vector-Jacobian product of one node: one cotangent per input (None for inputs without gradient).
    pub(crate) fn vjp(&self, id: NodeId, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let node = &self.nodes[id];
        let ins: Vec<&Tensor> = node.inputs.iter().map(|&i| self.value(i)).collect();
        let out = self.value(id);
        let grads = match &node.op {
            Op::Input { .. } | Op::Param(_) => vec![],
            Op::Linear => {
                let (x, w) = (ins[0], ins[1]);
                let gx = tensor::matmul_rows(g, w)?;
                let gw = outer_rows(g, x);
                let mut v = vec![Some(gx.reshape(x.shape())?), Some(gw)];
                if ins.len() == 3 {
                    v.push(Some(column_sums(g)));
                }
                v
            }
            Op::CenterMean => {
                let mut gi = g.clone();
                let d = gi.last_dim();
                for r in 0..gi.n_rows() {
                    let row = gi.row_mut(r);
                    let mean = row.iter().sum::<f64>() / d as f64;
                    row.iter_mut().for_each(|v| *v -= mean);
                }
                vec![Some(gi)]
            }
            Op::Normalize { eps } => {
                let x = ins[0];
                let d = x.last_dim();
                let mut gi = Tensor::zeros(x.shape());
                for r in 0..x.n_rows() {
                    let (xr, yr, gr) = (x.row(r), out.row(r), g.row(r));
                    let ms = xr.iter().map(|v| v * v).sum::<f64>() / d as f64;
                    let inv = 1.0 / (ms + eps).sqrt();
                    let dot = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for (o, (gv, yv)) in gi.row_mut(r).iter_mut().zip(gr.iter().zip(yr)) {
                        *o = inv * (gv - yv * dot);
                    }
                }
                vec![Some(gi)]
            }
            Op::Affine => {
                let (x, gamma) = (ins[0], ins[1]);
                let d = gamma.len();
                let gx = Tensor::new(
                    x.shape().to_vec(),
                    g.data().iter().enumerate().map(|(i, v)| v * gamma.data()[i % d]).collect(),
                )?;
                let mut gg = vec![0.0; d];
                for (i, (gv, xv)) in g.data().iter().zip(x.data()).enumerate() {
                    gg[i % d] += gv * xv;
                }
                let mut v = vec![Some(gx), Some(Tensor::new(gamma.shape().to_vec(), gg)?)];
                if ins.len() == 3 {
                    v.push(Some(column_sums(g).reshape(ins[2].shape())?));
                }
                v
            }
            Op::MeanPool => {
                let x = ins[0];
                let s = x.shape()[0];
                let mut gi = Tensor::zeros(x.shape());
                for r in 0..s {
                    for (o, v) in gi.row_mut(r).iter_mut().zip(g.data()) {
                        *o = v / s as f64;
                    }
                }
                vec![Some(gi)]
            }
            Op::MatMul { transpose_rhs } => {
                let (a, b) = (ins[0], ins[1]);
                if *transpose_rhs {
                    // C = A·Bᵀ
                    let ga = tensor::matmul(g, b)?;
                    let gb = tensor::matmul(&g.transpose_last(), a)?;
                    vec![Some(ga), Some(gb)]
                } else {
                    let ga = tensor::matmul(g, &b.transpose_last())?;
                    let gb = tensor::matmul(&a.transpose_last(), g)?;
                    vec![Some(ga), Some(gb)]
                }
            }
            Op::Scale { factor } => vec![Some(g.scale(*factor))],
            Op::Softmax { temperature, mask } => {
                let d = out.last_dim();
                let mut gi = Tensor::zeros(out.shape());
                for r in 0..out.n_rows() {
                    let (sr, gr) = (out.row(r), g.row(r));
                    let dot: f64 = sr.iter().zip(gr).map(|(s, g)| s * g).sum();
                    for (i, o) in gi.row_mut(r).iter_mut().enumerate() {
                        let keep = mask.as_ref().map_or(true, |m| m[r * d + i]);
                        if keep {
                            *o = sr[i] * (gr[i] - dot) / temperature;
                        }
                    }
                }
                vec![Some(gi)]
            }
            Op::Gelu => vec![Some(g.zip_map(ins[0], "gelu", |g, x| g * tensor::gelu_grad_scalar(x))?)],
            Op::Silu => vec![Some(g.zip_map(ins[0], "silu", |g, x| g * tensor::silu_grad_scalar(x))?)],
            Op::Add => vec![Some(g.clone()), Some(g.clone())],
            Op::Hadamard => {
                let ga = tensor::hadamard(g, ins[1])?;
                let gb = tensor::hadamard(g, ins[0])?;
                vec![Some(ga), Some(gb)]
            }
            Op::TopK { selected, .. } => {
                let mut gi = g.clone();
                for (v, &s) in gi.data_mut().iter_mut().zip(selected) {
                    if !s {
                        *v = 0.0;
                    }
                }
                vec![Some(gi)]
            }
            Op::Override { edits } => {
                let mut gi = g.clone();
                let d = gi.last_dim();
                for r in 0..gi.n_rows() {
                    for &(c, edit) in edits {
                        let v = &mut gi.data_mut()[r * d + c];
                        *v = match edit {
                            ActivationEdit::Zero | ActivationEdit::Set(_) => 0.0,
                            ActivationEdit::Scale(f) => *v * f,
                        };
                    }
                }
                vec![Some(gi)]
            }
            Op::ScaleColumns { columns, factor } => {
                let mut gi = g.clone();
                let d = gi.last_dim();
                for r in 0..gi.n_rows() {
                    for &c in columns {
                        gi.data_mut()[r * d + c] *= factor;
                    }
                }
                vec![Some(gi)]
            }
            Op::SplitHeads { .. } => vec![Some(merge_heads(g))],
            Op::MergeHeads => vec![Some(split_heads(g, ins[0].shape()[0]))],
            Op::RowSlice { start, len } => {
                let x = ins[0];
                let w = x.shape()[1];
                let mut gi = Tensor::zeros(x.shape());
                gi.data_mut()[start * w..(start + len) * w].copy_from_slice(g.data());
                vec![Some(gi)]
            }
            Op::Column { index } => {
                let x = ins[0];
                let mut gi = Tensor::zeros(x.shape());
                for r in 0..x.n_rows() {
                    gi.row_mut(r)[*index] = g.data()[r];
                }
                vec![Some(gi)]
            }
            Op::Broadcast { width } => {
                let data: Vec<f64> = g.data().chunks(*width).map(|c| c.iter().sum()).collect();
                vec![Some(Tensor::new(ins[0].shape().to_vec(), data)?)]
            }
        };
        Ok(grads)
    }

    /// Reverse-mode gradient of `Σ seed ⊙ value(output)` with respect to every node and parameter.
    pub fn backprop_gradient_from(&self, output: NodeId, seed: &Tensor) -> Result<Gradients> {
        tensor::same_shape("backprop_gradient", self.value(output), seed)?;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut params: Vec<Option<Tensor>> = vec![None; self.params.len()];
        grads[output] = Some(seed.clone());
        for id in (0..=output).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Param(p) => accumulate(&mut params[*p], g.clone())?,
                Op::Input {
                    tokens: Some(tokens),
                    table: Some(table),
                } => {
                    let tv = self.params.tensor(*table);
                    let d = tv.last_dim();
                    let slot = params[*table].get_or_insert_with(|| Tensor::zeros(tv.shape()));
                    for (r, &tok) in tokens.iter().enumerate() {
                        for (o, v) in slot.row_mut(tok).iter_mut().zip(&g.data()[r * d..(r + 1) * d]) {
                            *o += v;
                        }
                    }
                }
                _ => {
                    for (&input, gi) in node.inputs.iter().zip(self.vjp(id, &g)?) {
                        if let Some(gi) = gi {
                            accumulate(&mut grads[input], gi)?;
                        }
                    }
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { nodes: grads, params })
    }

    pub fn backprop_gradient(&self, seed: &Tensor) -> Result<Gradients> {
        self.backprop_gradient_from(self.output(), seed)
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) -> Result<()> {
    match slot {
        Some(t) => t.add_assign(&g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// `Σ_rows gᵀ x` for `g [.., out]`, `x [.., in]` → `[out, in]`.
fn outer_rows(g: &Tensor, x: &Tensor) -> Tensor {
    let (o, i) = (g.last_dim(), x.last_dim());
    let mut out = vec![0.0; o * i];
    for r in 0..g.n_rows() {
        let (gr, xr) = (g.row(r), x.row(r));
        for (j, &gv) in gr.iter().enumerate() {
            if gv == 0.0 {
                continue;
            }
            for (dst, &xv) in out[j * i..(j + 1) * i].iter_mut().zip(xr) {
                *dst += gv * xv;
            }
        }
    }
    Tensor::new(vec![o, i], out).expect("consistent shape")
}

fn column_sums(g: &Tensor) -> Tensor {
    let d = g.last_dim();
    let mut out = vec![0.0; d];
    for r in 0..g.n_rows() {
        for (o, v) in out.iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    Tensor::from_vec(out)
}

fn split_heads(x: &Tensor, heads: usize) -> Tensor {
    let (s, d) = (x.shape()[0], x.shape()[1]);
    let dh = d / heads;
    let mut out = vec![0.0; s * d];
    for h in 0..heads {
        for t in 0..s {
            out[(h * s + t) * dh..(h * s + t + 1) * dh].copy_from_slice(&x.row(t)[h * dh..(h + 1) * dh]);
        }
    }
    Tensor::new(vec![heads, s, dh], out).expect("consistent shape")
}

fn merge_heads(x: &Tensor) -> Tensor {
    let (heads, s, dh) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = vec![0.0; s * heads * dh];
    for h in 0..heads {
        for t in 0..s {
            out[t * heads * dh + h * dh..t * heads * dh + (h + 1) * dh]
                .copy_from_slice(&x.data()[(h * s + t) * dh..(h * s + t + 1) * dh]);
        }
    }
    Tensor::new(vec![s, heads * dh], out).expect("consistent shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central differences of `Σ seed ⊙ f(x)` against the tape gradient at the input leaf.
    fn check_gradient(params: &Params, x: Tensor, build: impl Fn(&mut Tape, NodeId) -> NodeId) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut tape = Tape::new(params);
        let inp = tape.input(x.clone(), None, None, "x");
        let out = build(&mut tape, inp);
        let seed = random(&mut rng, tape.value(out).shape());
        let grads = tape.backprop_gradient_from(out, &seed).unwrap();
        let g = grads.node(inp).unwrap();
        let eval = |xv: Tensor| {
            let mut t = Tape::new(params);
            let i = t.input(xv, None, None, "x");
            let o = build(&mut t, i);
            t.value(o).data().iter().zip(seed.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let h = 1e-5;
        for k in 0..x.len() {
            let mut plus = x.clone();
            plus.data_mut()[k] += h;
            let mut minus = x.clone();
            minus.data_mut()[k] -= h;
            let fd = (eval(plus) - eval(minus)) / (2.0 * h);
            let an = g.data()[k];
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
            assert!(err < 1e-4, "coord {k}: fd {fd} vs analytic {an}");
        }
    }

    fn params_with(entries: &[(&str, Tensor)]) -> Params {
        let mut p = Params::new();
        for (n, t) in entries {
            p.insert(*n, t.clone()).unwrap();
        }
        p
    }

    #[test]
    fn gradient_of_each_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = params_with(&[
            ("w", random(&mut rng, &[5, 4])),
            ("b", random(&mut rng, &[5])),
            ("g", random(&mut rng, &[4])),
            ("beta", random(&mut rng, &[4])),
            ("other", random(&mut rng, &[3, 4])),
            ("k", random(&mut rng, &[2, 3, 2])),
        ]);
        let x = random(&mut rng, &[3, 4]);
        check_gradient(&p, x.clone(), |t, i| {
            let w = t.param_named("w").unwrap();
            let b = t.param_named("b").unwrap();
            t.linear(i, w, Some(b), "lin").unwrap()
        });
        check_gradient(&p, x.clone(), |t, i| t.center_mean(i, "c").unwrap());
        check_gradient(&p, x.clone(), |t, i| t.normalize(i, 1e-6, "n").unwrap());
        check_gradient(&p, x.clone(), |t, i| {
            let g = t.param_named("g").unwrap();
            let b = t.param_named("beta").unwrap();
            t.affine(i, g, Some(b), "a").unwrap()
        });
        check_gradient(&p, x.clone(), |t, i| t.mean_pool(i, "m").unwrap());
        check_gradient(&p, x.clone(), |t, i| t.scale(i, 0.37, "s"));
        check_gradient(&p, x.clone(), |t, i| t.softmax(i, 1.7, None, "sm").unwrap());
        check_gradient(&p, x.clone(), |t, i| {
            let mask: Vec<bool> = (0..12).map(|k| k % 4 <= k / 4).collect();
            t.softmax(i, 1.0, Some(mask), "sm").unwrap()
        });
        check_gradient(&p, x.clone(), |t, i| t.gelu(i, "g"));
        check_gradient(&p, x.clone(), |t, i| t.silu(i, "s"));
        check_gradient(&p, x.clone(), |t, i| {
            let o = t.param_named("other").unwrap();
            t.add(i, o, "add").unwrap()
        });
        check_gradient(&p, x.clone(), |t, i| {
            let o = t.param_named("other").unwrap();
            let s = t.silu(i, "s");
            t.hadamard(s, o, "h").unwrap()
        });
        check_gradient(&p, x.clone(), |t, i| {
            let o = t.param_named("other").unwrap();
            t.matmul(i, o, true, "qk").unwrap()
        });
        check_gradient(&p, x.clone(), |t, i| {
            let o = t.param_named("other").unwrap();
            let ot = t.matmul(o, i, true, "oi").unwrap();
            t.matmul(ot, i, false, "av").unwrap()
        });
        check_gradient(&p, x.clone(), |t, i| t.top_k(i, 2, "top").unwrap());
        check_gradient(&p, x.clone(), |t, i| {
            t.override_columns(i, vec![(1, ActivationEdit::Zero), (2, ActivationEdit::Scale(3.0))], "o")
                .unwrap()
        });
        check_gradient(&p, x.clone(), |t, i| t.scale_columns(i, vec![0, 3], 0.4, "sc").unwrap());
        check_gradient(&p, x.clone(), |t, i| {
            let h = t.split_heads(i, 2, "split").unwrap();
            let k = t.param_named("k").unwrap();
            let s = t.matmul(h, k, true, "hk").unwrap();
            let m = t.merge_heads(s, "merge").unwrap();
            t.gelu(m, "g")
        });
        check_gradient(&p, x.clone(), |t, i| {
            let c = t.column(i, 2, "col").unwrap();
            let b = t.broadcast(c, 4, "bc").unwrap();
            t.hadamard(b, i, "h").unwrap()
        });
        check_gradient(&p, x, |t, i| {
            let o = t.param_named("other").unwrap();
            let s = t.row_slice(o, 1, 2, "rs").unwrap();
            let xs = t.row_slice(i, 0, 2, "xs").unwrap();
            t.hadamard(s, xs, "h").unwrap()
        });
    }

    #[test]
    fn linear_gradient_is_weight_row() {
        let w = Tensor::from_rows(&[vec![1.0, -2.0, 0.5], vec![3.0, 0.0, 1.0]]);
        let p = params_with(&[("w", w.clone())]);
        let mut t = Tape::new(&p);
        let x = t.input(Tensor::from_vec(vec![0.3, 0.1, -0.2]), None, None, "x");
        let wn = t.param_named("w").unwrap();
        let y = t.linear(x, wn, None, "y").unwrap();
        let g = t.backprop_gradient_from(y, &Tensor::from_vec(vec![0.0, 1.0])).unwrap();
        assert_eq!(g.node(x).unwrap().data(), w.row(1));
        let zero = t.backprop_gradient_from(y, &Tensor::zeros(&[2])).unwrap();
        assert_eq!(zero.node(x).unwrap().max_abs(), 0.0);
        assert_eq!(zero.param(0).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn parameter_gradients_and_embedding_scatter() {
        let table = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, 2.0]]);
        let p = params_with(&[("emb", table.clone()), ("w", Tensor::from_rows(&[vec![1.0, 1.0]]))]);
        let tokens = vec![2, 0, 2];
        let rows: Vec<Vec<f64>> = tokens.iter().map(|&t| table.row(t).to_vec()).collect();
        let mut t = Tape::new(&p);
        let x = t.input(Tensor::from_rows(&rows), Some(tokens), Some(0), "x");
        let w = t.param_named("w").unwrap();
        let y = t.linear(x, w, None, "y").unwrap();
        let g = t.backprop_gradient_from(y, &Tensor::full(&[3, 1], 1.0)).unwrap();
        assert_eq!(g.param(0).unwrap().data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
        assert_eq!(g.param(1).unwrap().data(), &[5.0, 4.0]);
    }

    #[test]
    fn top_k_breaks_ties_by_index() {
        let p = Params::new();
        let mut t = Tape::new(&p);
        let x = t.input(Tensor::from_vec(vec![0.5, 0.5, 0.1]), None, None, "x");
        let k = t.top_k(x, 1, "k").unwrap();
        assert_eq!(t.value(k).data(), &[0.5, 0.0, 0.0]);
    }

    #[test]
    fn head_split_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, &[5, 6]);
        assert_eq!(merge_heads(&split_heads(&x, 3)), x);
        assert_eq!(split_heads(&x, 3).get(&[1, 2, 0]), x.get(&[2, 2]));
    }
}
