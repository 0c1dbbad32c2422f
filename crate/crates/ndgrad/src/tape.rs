//! Reverse-mode automatic differentiation over dense row-major f64 tensors.
//!
//! Operations are recorded on a [`Tape`]; node indices double as reverse
//! topological order, so `backward` is a single reverse sweep. A tape and its
//! tensors are confined to one thread; independent tapes may run in parallel.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{NdError, Result};
use crate::params::ParamStore;

/// Handle to a node in a [`Tape`].
pub type TensorId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Div(TensorId, TensorId),
    MatMul(TensorId, TensorId),
    /// y = mul * x + add, elementwise with scalar constants.
    Affine {
        x: TensorId,
        mul: f64,
        add: f64,
    },
    Relu(TensorId),
    Sigmoid(TensorId),
    /// ln(max(x, min)); gradient is zero in the clamped region.
    LogClamped {
        x: TensorId,
        min: f64,
    },
    Softmax {
        x: TensorId,
        axis: usize,
    },
    LayerNorm {
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f64,
    },
    SumAll(TensorId),
    SumAxis {
        x: TensorId,
        axis: usize,
        keepdim: bool,
    },
    Transpose(TensorId),
    Concat {
        parts: Vec<TensorId>,
        axis: usize,
        offsets: Vec<usize>,
    },
    /// Select rows of a 2-D tensor (embedding lookup, row subsetting).
    GatherRows {
        table: TensorId,
        ids: Vec<usize>,
    },
    /// One column per row of a 2-D tensor; output is [rows, 1].
    PickColumns {
        x: TensorId,
        ids: Vec<usize>,
    },
    /// out[t, col_map[j]] += x[t, j] for mapped columns; unmapped columns drop.
    ScatterColumns {
        x: TensorId,
        col_map: Vec<Option<usize>>,
        out_cols: usize,
    },
    /// Elementwise multiply by a fixed inverted-dropout mask.
    Dropout {
        x: TensorId,
        mask: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Gradient tape: owns all tensors produced during a forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bindings: Vec<(String, TensorId)>,
    binding_index: HashMap<String, usize>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

// ── broadcasting helpers ────────────────────────────────────────────────

fn pad_shape(shape: &[usize], rank: usize) -> Vec<usize> {
    let mut padded = vec![1usize; rank];
    padded[rank - shape.len()..].copy_from_slice(shape);
    padded
}

fn broadcast_shapes(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let pa = pad_shape(a, rank);
    let pb = pad_shape(b, rank);
    let mut out = vec![0usize; rank];
    for d in 0..rank {
        if pa[d] == pb[d] || pa[d] == 1 || pb[d] == 1 {
            out[d] = pa[d].max(pb[d]);
        } else {
            return Err(NdError::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        }
    }
    Ok(out)
}

/// Expand `data` of `shape` to `out_shape` (dims of size 1 repeat).
fn expand_to(data: &[f64], shape: &[usize], out_shape: &[usize]) -> Vec<f64> {
    if shape == out_shape {
        return data.to_vec();
    }
    let rank = out_shape.len();
    let padded = pad_shape(shape, rank);
    let total = numel(out_shape);
    let mut out = vec![0.0; total];
    let mut coords = vec![0usize; rank];
    for (flat, slot) in out.iter_mut().enumerate() {
        let mut rem = flat;
        for d in (0..rank).rev() {
            coords[d] = rem % out_shape[d];
            rem /= out_shape[d];
        }
        let mut src = 0usize;
        let mut stride = 1usize;
        for d in (0..rank).rev() {
            let c = if padded[d] == 1 { 0 } else { coords[d] };
            src += c * stride;
            stride *= padded[d];
        }
        *slot = data[src];
    }
    out
}

/// Sum a gradient of `grad_shape` down to `target_shape` (undo broadcasting).
fn reduce_to_shape(grad: &[f64], grad_shape: &[usize], target_shape: &[usize]) -> Vec<f64> {
    if grad_shape == target_shape {
        return grad.to_vec();
    }
    let rank = grad_shape.len();
    let padded = pad_shape(target_shape, rank);
    let mut out = vec![0.0; numel(target_shape)];
    let mut coords = vec![0usize; rank];
    for (flat, &g) in grad.iter().enumerate() {
        let mut rem = flat;
        for d in (0..rank).rev() {
            coords[d] = rem % grad_shape[d];
            rem /= grad_shape[d];
        }
        let mut dst = 0usize;
        let mut stride = 1usize;
        for d in (0..rank).rev() {
            let c = if padded[d] == 1 { 0 } else { coords[d] };
            dst += c * stride;
            stride *= padded[d];
        }
        out[dst] += g;
    }
    out
}

// ── dense 2-D kernels ───────────────────────────────────────────────────

/// out[m,n] += a[m,k] · b[k,n]
fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
}

/// out[m,k] += g[m,n] · b[k,n]ᵀ
fn matmul_nt_acc(g: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for (gv, bv) in grow.iter().zip(brow.iter()) {
                s += gv * bv;
            }
            orow[p] += s;
        }
    }
}

/// out[k,n] += a[m,k]ᵀ · g[m,n]
fn matmul_tn_acc(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow.iter()) {
                *o += av * gv;
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src.iter()) {
        *d += s;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of nodes (leaves + op applications).
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn num_leaves(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::Leaf))
            .count()
    }

    /// Op applications recorded so far (graph nodes that are not leaves).
    pub fn num_ops(&self) -> usize {
        self.len() - self.num_leaves()
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id].grad.as_deref()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id].requires_grad
    }

    /// Parameter bindings created through [`Tape::bind`], in bind order.
    pub fn bindings(&self) -> &[(String, TensorId)] {
        &self.bindings
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> TensorId {
        debug_assert_eq!(data.len(), numel(&shape));
        let id = self.nodes.len();
        self.nodes.push(Node {
            data,
            shape,
            grad: None,
            requires_grad,
            op,
        });
        id
    }

    fn needs(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub fn leaf(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Result<TensorId> {
        if data.len() != numel(&shape) {
            return Err(NdError::DataLength {
                op: "leaf",
                expected: numel(&shape),
                got: data.len(),
                shape,
            });
        }
        Ok(self.push(data, shape, requires_grad, Op::Leaf))
    }

    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Result<TensorId> {
        self.leaf(data, shape, false)
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.push(vec![v], vec![1], false, Op::Leaf)
    }

    /// Bind a named parameter from `store` as a leaf, caching per name.
    pub fn bind(&mut self, store: &ParamStore, name: &str) -> Result<TensorId> {
        if let Some(&slot) = self.binding_index.get(name) {
            return Ok(self.bindings[slot].1);
        }
        let param = store.get(name)?;
        let id = self.push(
            param.value.clone(),
            param.shape.clone(),
            true,
            Op::Leaf,
        );
        self.binding_index
            .insert(name.to_string(), self.bindings.len());
        self.bindings.push((name.to_string(), id));
        Ok(id)
    }

    // ── elementwise with broadcasting ───────────────────────────────────

    fn ew(&mut self, op_name: &'static str, a: TensorId, b: TensorId) -> Result<(Vec<usize>, Vec<f64>, Vec<f64>)> {
        let out_shape = broadcast_shapes(op_name, &self.nodes[a].shape, &self.nodes[b].shape)?;
        let ae = expand_to(&self.nodes[a].data, &self.nodes[a].shape, &out_shape);
        let be = expand_to(&self.nodes[b].data, &self.nodes[b].shape, &out_shape);
        Ok((out_shape, ae, be))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (shape, ae, be) = self.ew("add", a, b)?;
        let data = ae.iter().zip(be.iter()).map(|(x, y)| x + y).collect();
        let rg = self.needs(&[a, b]);
        Ok(self.push(data, shape, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (shape, ae, be) = self.ew("sub", a, b)?;
        let data = ae.iter().zip(be.iter()).map(|(x, y)| x - y).collect();
        let rg = self.needs(&[a, b]);
        Ok(self.push(data, shape, rg, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (shape, ae, be) = self.ew("mul", a, b)?;
        let data = ae.iter().zip(be.iter()).map(|(x, y)| x * y).collect();
        let rg = self.needs(&[a, b]);
        Ok(self.push(data, shape, rg, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (shape, ae, be) = self.ew("div", a, b)?;
        let data = ae.iter().zip(be.iter()).map(|(x, y)| x / y).collect();
        let rg = self.needs(&[a, b]);
        Ok(self.push(data, shape, rg, Op::Div(a, b)))
    }

    /// Sum several same-shape tensors (folded pairwise adds).
    pub fn add_n(&mut self, ids: &[TensorId]) -> Result<TensorId> {
        let mut acc = *ids.first().expect("add_n needs at least one tensor");
        for &id in &ids[1..] {
            acc = self.add(acc, id)?;
        }
        Ok(acc)
    }

    pub fn affine(&mut self, x: TensorId, mul: f64, add: f64) -> Result<TensorId> {
        let data = self.nodes[x].data.iter().map(|v| mul * v + add).collect();
        let shape = self.nodes[x].shape.clone();
        let rg = self.needs(&[x]);
        Ok(self.push(data, shape, rg, Op::Affine { x, mul, add }))
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId> {
        let data = self.nodes[x].data.iter().map(|v| v.max(0.0)).collect();
        let shape = self.nodes[x].shape.clone();
        let rg = self.needs(&[x]);
        Ok(self.push(data, shape, rg, Op::Relu(x)))
    }

    pub fn sigmoid(&mut self, x: TensorId) -> Result<TensorId> {
        let data = self.nodes[x]
            .data
            .iter()
            .map(|v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        let shape = self.nodes[x].shape.clone();
        let rg = self.needs(&[x]);
        Ok(self.push(data, shape, rg, Op::Sigmoid(x)))
    }

    /// ln(max(x, min)); `min` guards against log of zero.
    pub fn log_clamped(&mut self, x: TensorId, min: f64) -> Result<TensorId> {
        let data = self.nodes[x].data.iter().map(|v| v.max(min).ln()).collect();
        let shape = self.nodes[x].shape.clone();
        let rg = self.needs(&[x]);
        Ok(self.push(data, shape, rg, Op::LogClamped { x, min }))
    }

    // ── matmul ──────────────────────────────────────────────────────────

    /// Matrix product over the trailing two axes; leading axes broadcast.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let a_shape = self.nodes[a].shape.clone();
        let b_shape = self.nodes[b].shape.clone();
        if a_shape.len() < 2 || b_shape.len() < 2 || a_shape[a_shape.len() - 1] != b_shape[b_shape.len() - 2] {
            return Err(NdError::ShapeMismatch {
                op: "matmul",
                lhs: a_shape,
                rhs: b_shape,
            });
        }
        let (m, k) = (a_shape[a_shape.len() - 2], a_shape[a_shape.len() - 1]);
        let n = b_shape[b_shape.len() - 1];
        let batch = broadcast_shapes(
            "matmul",
            &a_shape[..a_shape.len() - 2],
            &b_shape[..b_shape.len() - 2],
        )?;
        let mut out_shape = batch.clone();
        out_shape.extend_from_slice(&[m, n]);
        let mut data = vec![0.0; numel(&out_shape)];
        let nbatch = numel(&batch);
        for idx in 0..nbatch {
            let ao = Self::batch_offset(idx, &batch, &a_shape[..a_shape.len() - 2]) * m * k;
            let bo = Self::batch_offset(idx, &batch, &b_shape[..b_shape.len() - 2]) * k * n;
            matmul_acc(
                &self.nodes[a].data[ao..ao + m * k],
                &self.nodes[b].data[bo..bo + k * n],
                m,
                k,
                n,
                &mut data[idx * m * n..(idx + 1) * m * n],
            );
        }
        let rg = self.needs(&[a, b]);
        Ok(self.push(data, out_shape, rg, Op::MatMul(a, b)))
    }

    /// Flat batch offset of `idx` (an index into `batch`) within `shape`
    /// (a possibly-broadcast batch prefix; size-1 dims map to 0).
    fn batch_offset(idx: usize, batch: &[usize], shape: &[usize]) -> usize {
        if shape.is_empty() {
            return 0;
        }
        let rank = batch.len();
        let padded = pad_shape(shape, rank);
        let mut rem = idx;
        let mut offset = 0usize;
        let mut stride = 1usize;
        // decode batch coords right-to-left while building the target offset
        let mut coords = vec![0usize; rank];
        for d in (0..rank).rev() {
            coords[d] = rem % batch[d];
            rem /= batch[d];
        }
        for d in (0..rank).rev() {
            let c = if padded[d] == 1 { 0 } else { coords[d] };
            offset += c * stride;
            stride *= padded[d];
        }
        offset
    }

    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId> {
        let shape = self.nodes[x].shape.clone();
        if shape.len() != 2 {
            return Err(NdError::InvalidAxis {
                op: "transpose",
                axis: 2,
                rank: shape.len(),
            });
        }
        let (r, c) = (shape[0], shape[1]);
        let src = &self.nodes[x].data;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.needs(&[x]);
        Ok(self.push(data, vec![c, r], rg, Op::Transpose(x)))
    }

    // ── softmax / layer norm ────────────────────────────────────────────

    pub fn softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.nodes[x].shape.clone();
        if axis >= shape.len() {
            return Err(NdError::InvalidAxis {
                op: "softmax",
                axis,
                rank: shape.len(),
            });
        }
        let axis_size = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = &self.nodes[x].data;
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| o * axis_size * inner + a * inner + i;
                let mut max_val = f64::NEG_INFINITY;
                for a in 0..axis_size {
                    max_val = max_val.max(src[at(a)]);
                }
                let mut denom = 0.0;
                for a in 0..axis_size {
                    let e = (src[at(a)] - max_val).exp();
                    data[at(a)] = e;
                    denom += e;
                }
                for a in 0..axis_size {
                    data[at(a)] /= denom;
                }
            }
        }
        let rg = self.needs(&[x]);
        Ok(self.push(data, shape, rg, Op::Softmax { x, axis }))
    }

    /// Layer normalization over the last axis with affine gain/bias.
    pub fn layer_norm(&mut self, x: TensorId, gain: TensorId, bias: TensorId, eps: f64) -> Result<TensorId> {
        let shape = self.nodes[x].shape.clone();
        let d = *shape.last().ok_or(NdError::InvalidAxis {
            op: "layer_norm",
            axis: 0,
            rank: 0,
        })?;
        for &affine in &[gain, bias] {
            if self.nodes[affine].data.len() != d {
                return Err(NdError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: shape.clone(),
                    rhs: self.nodes[affine].shape.clone(),
                });
            }
        }
        let src = &self.nodes[x].data;
        let g = &self.nodes[gain].data;
        let b = &self.nodes[bias].data;
        let rows = src.len() / d;
        let mut data = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                data[r * d + j] = (row[j] - mean) * inv_std * g[j] + b[j];
            }
        }
        let rg = self.needs(&[x, gain, bias]);
        Ok(self.push(data, shape, rg, Op::LayerNorm { x, gain, bias, eps }))
    }

    // ── reductions ──────────────────────────────────────────────────────

    pub fn sum_all(&mut self, x: TensorId) -> Result<TensorId> {
        let s: f64 = self.nodes[x].data.iter().sum();
        let rg = self.needs(&[x]);
        Ok(self.push(vec![s], vec![1], rg, Op::SumAll(x)))
    }

    pub fn mean_all(&mut self, x: TensorId) -> Result<TensorId> {
        let n = self.nodes[x].data.len() as f64;
        let s = self.sum_all(x)?;
        self.affine(s, 1.0 / n, 0.0)
    }

    pub fn sum_axis(&mut self, x: TensorId, axis: usize, keepdim: bool) -> Result<TensorId> {
        let shape = self.nodes[x].shape.clone();
        if axis >= shape.len() {
            return Err(NdError::InvalidAxis {
                op: "sum_axis",
                axis,
                rank: shape.len(),
            });
        }
        let axis_size = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = &self.nodes[x].data;
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..axis_size {
                for i in 0..inner {
                    data[o * inner + i] += src[o * axis_size * inner + a * inner + i];
                }
            }
        }
        let mut out_shape: Vec<usize> = shape.clone();
        if keepdim {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
            if out_shape.is_empty() {
                out_shape.push(1);
            }
        }
        let rg = self.needs(&[x]);
        Ok(self.push(data, out_shape, rg, Op::SumAxis { x, axis, keepdim }))
    }

    // ── structural ops ──────────────────────────────────────────────────

    /// Concatenate 2-D tensors along `axis` (0 or 1).
    pub fn concat2(&mut self, parts: &[TensorId], axis: usize) -> Result<TensorId> {
        assert!(!parts.is_empty(), "concat2 needs at least one tensor");
        if axis > 1 {
            return Err(NdError::InvalidAxis {
                op: "concat2",
                axis,
                rank: 2,
            });
        }
        let first = self.nodes[parts[0]].shape.clone();
        if first.len() != 2 {
            return Err(NdError::InvalidAxis {
                op: "concat2",
                axis,
                rank: first.len(),
            });
        }
        let fixed = 1 - axis;
        let mut offsets = Vec::with_capacity(parts.len());
        let mut extent = 0usize;
        for &p in parts {
            let s = &self.nodes[p].shape;
            if s.len() != 2 || s[fixed] != first[fixed] {
                return Err(NdError::ShapeMismatch {
                    op: "concat2",
                    lhs: first,
                    rhs: s.clone(),
                });
            }
            offsets.push(extent);
            extent += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = extent;
        let mut data = vec![0.0; numel(&out_shape)];
        for (pi, &p) in parts.iter().enumerate() {
            let s = &self.nodes[p].shape;
            let (pr, pc) = (s[0], s[1]);
            let src = &self.nodes[p].data;
            if axis == 0 {
                let base = offsets[pi] * out_shape[1];
                data[base..base + pr * pc].copy_from_slice(src);
            } else {
                for r in 0..pr {
                    let dst = r * out_shape[1] + offsets[pi];
                    data[dst..dst + pc].copy_from_slice(&src[r * pc..(r + 1) * pc]);
                }
            }
        }
        let rg = self.needs(parts);
        Ok(self.push(
            data,
            out_shape,
            rg,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
                offsets,
            },
        ))
    }

    /// Row lookup into a 2-D tensor (embedding gather).
    pub fn gather_rows(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId> {
        let shape = self.nodes[table].shape.clone();
        if shape.len() != 2 {
            return Err(NdError::InvalidAxis {
                op: "gather_rows",
                axis: 0,
                rank: shape.len(),
            });
        }
        let (rows, cols) = (shape[0], shape[1]);
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(NdError::IndexOutOfBounds {
                    op: "gather_rows",
                    index: id,
                    size: rows,
                });
            }
            data.extend_from_slice(&self.nodes[table].data[id * cols..(id + 1) * cols]);
        }
        let rg = self.needs(&[table]);
        Ok(self.push(
            data,
            vec![ids.len(), cols],
            rg,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Per-row column selection from a 2-D tensor; returns [rows, 1].
    pub fn pick_columns(&mut self, x: TensorId, ids: &[usize]) -> Result<TensorId> {
        let shape = self.nodes[x].shape.clone();
        if shape.len() != 2 || ids.len() != shape[0] {
            return Err(NdError::ShapeMismatch {
                op: "pick_columns",
                lhs: shape,
                rhs: vec![ids.len()],
            });
        }
        let cols = shape[1];
        let mut data = Vec::with_capacity(ids.len());
        for (r, &c) in ids.iter().enumerate() {
            if c >= cols {
                return Err(NdError::IndexOutOfBounds {
                    op: "pick_columns",
                    index: c,
                    size: cols,
                });
            }
            data.push(self.nodes[x].data[r * cols + c]);
        }
        let rg = self.needs(&[x]);
        Ok(self.push(
            data,
            vec![ids.len(), 1],
            rg,
            Op::PickColumns {
                x,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Accumulate columns of `x` into an `[rows, out_cols]` tensor according
    /// to `col_map`; columns mapped to `None` are dropped.
    pub fn scatter_columns(
        &mut self,
        x: TensorId,
        col_map: &[Option<usize>],
        out_cols: usize,
    ) -> Result<TensorId> {
        let shape = self.nodes[x].shape.clone();
        if shape.len() != 2 || col_map.len() != shape[1] {
            return Err(NdError::ShapeMismatch {
                op: "scatter_columns",
                lhs: shape,
                rhs: vec![col_map.len()],
            });
        }
        let (rows, cols) = (shape[0], shape[1]);
        for &m in col_map.iter().flatten() {
            if m >= out_cols {
                return Err(NdError::IndexOutOfBounds {
                    op: "scatter_columns",
                    index: m,
                    size: out_cols,
                });
            }
        }
        let mut data = vec![0.0; rows * out_cols];
        for r in 0..rows {
            for (c, m) in col_map.iter().enumerate() {
                if let Some(v) = m {
                    data[r * out_cols + v] += self.nodes[x].data[r * cols + c];
                }
            }
        }
        let rg = self.needs(&[x]);
        Ok(self.push(
            data,
            vec![rows, out_cols],
            rg,
            Op::ScatterColumns {
                x,
                col_map: col_map.to_vec(),
                out_cols,
            },
        ))
    }

    /// Inverted dropout with a caller-supplied RNG; `rate == 0` is identity.
    pub fn dropout<R: Rng>(&mut self, x: TensorId, rate: f64, rng: &mut R) -> Result<TensorId> {
        if rate <= 0.0 {
            return Ok(x);
        }
        assert!(rate < 1.0, "dropout rate must be below 1");
        let keep = 1.0 - rate;
        let mask: Vec<f64> = self.nodes[x]
            .data
            .iter()
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let data = self.nodes[x]
            .data
            .iter()
            .zip(mask.iter())
            .map(|(v, m)| v * m)
            .collect();
        let shape = self.nodes[x].shape.clone();
        let rg = self.needs(&[x]);
        Ok(self.push(data, shape, rg, Op::Dropout { x, mask }))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients accumulate into `grad`
    /// of every `requires_grad` node; repeated calls keep accumulating.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.nodes[loss].data.len() != 1 {
            return Err(NdError::NonScalarLoss {
                shape: self.nodes[loss].shape.clone(),
            });
        }
        let n = self.nodes.len();
        let mut scratch: Vec<Option<Vec<f64>>> = vec![None; n];
        scratch[loss] = Some(vec![1.0]);

        for i in (0..n).rev() {
            let Some(g) = scratch[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut scratch);
            let node = &mut self.nodes[i];
            let grad = node.grad.get_or_insert_with(|| vec![0.0; node.data.len()]);
            add_into(grad, &g);
        }
        Ok(())
    }

    fn scratch_for<'a>(
        &self,
        scratch: &'a mut [Option<Vec<f64>>],
        id: TensorId,
    ) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[id].requires_grad {
            return None;
        }
        let len = self.nodes[id].data.len();
        Some(scratch[id].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, i: TensorId, g: &[f64], scratch: &mut [Option<Vec<f64>>]) {
        let out_shape = self.nodes[i].shape.clone();
        match self.nodes[i].op.clone() {
            Op::Leaf => {}

            Op::Add(a, b) => {
                for &(side, sign) in &[(a, 1.0), (b, 1.0f64)] {
                    let _ = sign;
                    let target_shape = self.nodes[side].shape.clone();
                    let reduced = reduce_to_shape(g, &out_shape, &target_shape);
                    if let Some(dst) = self.scratch_for(scratch, side) {
                        add_into(dst, &reduced);
                    }
                }
            }

            Op::Sub(a, b) => {
                let ra = reduce_to_shape(g, &out_shape, &self.nodes[a].shape);
                if let Some(dst) = self.scratch_for(scratch, a) {
                    add_into(dst, &ra);
                }
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                let rb = reduce_to_shape(&neg, &out_shape, &self.nodes[b].shape);
                if let Some(dst) = self.scratch_for(scratch, b) {
                    add_into(dst, &rb);
                }
            }

            Op::Mul(a, b) => {
                let ae = expand_to(&self.nodes[a].data, &self.nodes[a].shape, &out_shape);
                let be = expand_to(&self.nodes[b].data, &self.nodes[b].shape, &out_shape);
                let da: Vec<f64> = g.iter().zip(be.iter()).map(|(g, b)| g * b).collect();
                let db: Vec<f64> = g.iter().zip(ae.iter()).map(|(g, a)| g * a).collect();
                let ra = reduce_to_shape(&da, &out_shape, &self.nodes[a].shape);
                if let Some(dst) = self.scratch_for(scratch, a) {
                    add_into(dst, &ra);
                }
                let rb = reduce_to_shape(&db, &out_shape, &self.nodes[b].shape);
                if let Some(dst) = self.scratch_for(scratch, b) {
                    add_into(dst, &rb);
                }
            }

            Op::Div(a, b) => {
                let ae = expand_to(&self.nodes[a].data, &self.nodes[a].shape, &out_shape);
                let be = expand_to(&self.nodes[b].data, &self.nodes[b].shape, &out_shape);
                let da: Vec<f64> = g.iter().zip(be.iter()).map(|(g, b)| g / b).collect();
                let db: Vec<f64> = g
                    .iter()
                    .zip(ae.iter().zip(be.iter()))
                    .map(|(g, (a, b))| -g * a / (b * b))
                    .collect();
                let ra = reduce_to_shape(&da, &out_shape, &self.nodes[a].shape);
                if let Some(dst) = self.scratch_for(scratch, a) {
                    add_into(dst, &ra);
                }
                let rb = reduce_to_shape(&db, &out_shape, &self.nodes[b].shape);
                if let Some(dst) = self.scratch_for(scratch, b) {
                    add_into(dst, &rb);
                }
            }

            Op::MatMul(a, b) => {
                let a_shape = self.nodes[a].shape.clone();
                let b_shape = self.nodes[b].shape.clone();
                let (m, k) = (a_shape[a_shape.len() - 2], a_shape[a_shape.len() - 1]);
                let n = b_shape[b_shape.len() - 1];
                let batch = &out_shape[..out_shape.len() - 2];
                let nbatch = numel(batch);
                let mut da = vec![0.0; self.nodes[a].data.len()];
                let mut db = vec![0.0; self.nodes[b].data.len()];
                for idx in 0..nbatch {
                    let ao = Self::batch_offset(idx, batch, &a_shape[..a_shape.len() - 2]) * m * k;
                    let bo = Self::batch_offset(idx, batch, &b_shape[..b_shape.len() - 2]) * k * n;
                    let go = idx * m * n;
                    matmul_nt_acc(
                        &g[go..go + m * n],
                        &self.nodes[b].data[bo..bo + k * n],
                        m,
                        n,
                        k,
                        &mut da[ao..ao + m * k],
                    );
                    matmul_tn_acc(
                        &self.nodes[a].data[ao..ao + m * k],
                        &g[go..go + m * n],
                        m,
                        k,
                        n,
                        &mut db[bo..bo + k * n],
                    );
                }
                if let Some(dst) = self.scratch_for(scratch, a) {
                    add_into(dst, &da);
                }
                if let Some(dst) = self.scratch_for(scratch, b) {
                    add_into(dst, &db);
                }
            }

            Op::Affine { x, mul, .. } => {
                if let Some(dst) = self.scratch_for(scratch, x) {
                    for (d, gv) in dst.iter_mut().zip(g.iter()) {
                        *d += mul * gv;
                    }
                }
            }

            Op::Relu(x) => {
                let src = &self.nodes[x].data;
                if let Some(dst) = self.scratch_for(scratch, x) {
                    for ((d, gv), &v) in dst.iter_mut().zip(g.iter()).zip(src.iter()) {
                        if v > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }

            Op::Sigmoid(x) => {
                let out = &self.nodes[i].data;
                if let Some(dst) = self.scratch_for(scratch, x) {
                    for ((d, gv), &s) in dst.iter_mut().zip(g.iter()).zip(out.iter()) {
                        *d += gv * s * (1.0 - s);
                    }
                }
            }

            Op::LogClamped { x, min } => {
                let src = &self.nodes[x].data;
                if let Some(dst) = self.scratch_for(scratch, x) {
                    for ((d, gv), &v) in dst.iter_mut().zip(g.iter()).zip(src.iter()) {
                        if v > min {
                            *d += gv / v;
                        }
                    }
                }
            }

            Op::Softmax { x, axis } => {
                let out = &self.nodes[i].data;
                let shape = &self.nodes[i].shape;
                let axis_size = shape[axis];
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let mut dx = vec![0.0; out.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let at = |a: usize| o * axis_size * inner + a * inner + ii;
                        let mut dot = 0.0;
                        for a in 0..axis_size {
                            dot += g[at(a)] * out[at(a)];
                        }
                        for a in 0..axis_size {
                            dx[at(a)] = out[at(a)] * (g[at(a)] - dot);
                        }
                    }
                }
                if let Some(dst) = self.scratch_for(scratch, x) {
                    add_into(dst, &dx);
                }
            }

            Op::LayerNorm { x, gain, bias, eps } => {
                let src = &self.nodes[x].data;
                let gn = &self.nodes[gain].data;
                let d = gn.len();
                let rows = src.len() / d;
                let mut dx = vec![0.0; src.len()];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for r in 0..rows {
                    let row = &src[r * d..(r + 1) * d];
                    let grow = &g[r * d..(r + 1) * d];
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv_std = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv_std).collect();
                    let mut dxhat = vec![0.0; d];
                    for j in 0..d {
                        dgain[j] += grow[j] * xhat[j];
                        dbias[j] += grow[j];
                        dxhat[j] = grow[j] * gn[j];
                    }
                    let sum_dxhat: f64 = dxhat.iter().sum();
                    let sum_dxhat_xhat: f64 =
                        dxhat.iter().zip(xhat.iter()).map(|(a, b)| a * b).sum();
                    let df = d as f64;
                    for j in 0..d {
                        dx[r * d + j] =
                            inv_std / df * (df * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                    }
                }
                if let Some(dst) = self.scratch_for(scratch, x) {
                    add_into(dst, &dx);
                }
                if let Some(dst) = self.scratch_for(scratch, gain) {
                    add_into(dst, &dgain);
                }
                if let Some(dst) = self.scratch_for(scratch, bias) {
                    add_into(dst, &dbias);
                }
            }

            Op::SumAll(x) => {
                let gv = g[0];
                if let Some(dst) = self.scratch_for(scratch, x) {
                    for d in dst.iter_mut() {
                        *d += gv;
                    }
                }
            }

            Op::SumAxis { x, axis, .. } => {
                let shape = self.nodes[x].shape.clone();
                let axis_size = shape[axis];
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                if let Some(dst) = self.scratch_for(scratch, x) {
                    for o in 0..outer {
                        for a in 0..axis_size {
                            for ii in 0..inner {
                                dst[o * axis_size * inner + a * inner + ii] += g[o * inner + ii];
                            }
                        }
                    }
                }
            }

            Op::Transpose(x) => {
                let (r, c) = (out_shape[0], out_shape[1]);
                if let Some(dst) = self.scratch_for(scratch, x) {
                    for i2 in 0..r {
                        for j in 0..c {
                            dst[j * r + i2] += g[i2 * c + j];
                        }
                    }
                }
            }

            Op::Concat {
                parts,
                axis,
                offsets,
            } => {
                let out_cols = out_shape[1];
                for (pi, &p) in parts.iter().enumerate() {
                    let s = self.nodes[p].shape.clone();
                    let (pr, pc) = (s[0], s[1]);
                    if let Some(dst) = self.scratch_for(scratch, p) {
                        if axis == 0 {
                            let base = offsets[pi] * out_cols;
                            add_into(dst, &g[base..base + pr * pc]);
                        } else {
                            for r in 0..pr {
                                let src = r * out_cols + offsets[pi];
                                add_into(&mut dst[r * pc..(r + 1) * pc], &g[src..src + pc]);
                            }
                        }
                    }
                }
            }

            Op::GatherRows { table, ids } => {
                let cols = self.nodes[table].shape[1];
                if let Some(dst) = self.scratch_for(scratch, table) {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut dst[id * cols..(id + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    }
                }
            }

            Op::PickColumns { x, ids } => {
                let cols = self.nodes[x].shape[1];
                if let Some(dst) = self.scratch_for(scratch, x) {
                    for (r, &c) in ids.iter().enumerate() {
                        dst[r * cols + c] += g[r];
                    }
                }
            }

            Op::ScatterColumns {
                x,
                col_map,
                out_cols,
            } => {
                let cols = self.nodes[x].shape[1];
                let rows = self.nodes[x].shape[0];
                if let Some(dst) = self.scratch_for(scratch, x) {
                    for r in 0..rows {
                        for (c, m) in col_map.iter().enumerate() {
                            if let Some(v) = m {
                                dst[r * cols + c] += g[r * out_cols + v];
                            }
                        }
                    }
                }
            }

            Op::Dropout { x, mask } => {
                if let Some(dst) = self.scratch_for(scratch, x) {
                    for ((d, gv), m) in dst.iter_mut().zip(g.iter()).zip(mask.iter()) {
                        *d += gv * m;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < tol)
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let i = t.leaf(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2], false).unwrap();
        let b = t.leaf(vec![3.0, 4.0, 5.0, 6.0], vec![2, 2], false).unwrap();
        let c = t.matmul(i, b).unwrap();
        assert_eq!(t.data(c), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_dot() {
        let mut t = Tape::new();
        let a = t.leaf(vec![1.0, 2.0], vec![1, 2], false).unwrap();
        let b = t.leaf(vec![3.0, 4.0], vec![2, 1], false).unwrap();
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.data(c), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.leaf(vec![0.0; 6], vec![2, 3], false).unwrap();
        let b = t.leaf(vec![0.0; 4], vec![2, 2], false).unwrap();
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn matmul_matches_triple_loop_reference() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let a: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut expect = vec![0.0; 3 * 2];
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for p in 0..4 {
                    s += a[i * 4 + p] * b[p * 2 + j];
                }
                expect[i * 2 + j] = s;
            }
        }
        let mut t = Tape::new();
        let ta = t.leaf(a, vec![3, 4], false).unwrap();
        let tb = t.leaf(b, vec![4, 2], false).unwrap();
        let c = t.matmul(ta, tb).unwrap();
        assert!(close(t.data(c), &expect, 1e-12));
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let mut t = Tape::new();
        let x = t.leaf(vec![0.0, 0.0, 0.0], vec![3], false).unwrap();
        let s = t.softmax(x, 0).unwrap();
        assert!(close(t.data(s), &[1.0 / 3.0; 3], 1e-12));

        let y = t.leaf(vec![1000.0, 0.0], vec![2], false).unwrap();
        let sy = t.softmax(y, 0).unwrap();
        let out = t.data(sy);
        assert!(out.iter().all(|v| v.is_finite()));
        assert!((out[0] - 1.0).abs() < 1e-12 && out[1] >= 0.0);
    }

    #[test]
    fn softmax_direct_evaluation() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, 2.0, 3.0], vec![3], false).unwrap();
        let s = t.softmax(x, 0).unwrap();
        assert!(close(t.data(s), &[0.09003, 0.24473, 0.66524], 1e-5));
    }

    #[test]
    fn softmax_invalid_axis() {
        let mut t = Tape::new();
        let x = t.leaf(vec![0.0; 3], vec![3], false).unwrap();
        assert!(t.softmax(x, 1).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let mut t = Tape::new();
        let gain = t.leaf(vec![1.0], vec![1], false).unwrap();
        let _ = gain;

        let x = t.leaf(vec![1.0, 1.0, 1.0], vec![1, 3], false).unwrap();
        let g3 = t.leaf(vec![1.0; 3], vec![3], false).unwrap();
        let b3 = t.leaf(vec![0.0; 3], vec![3], false).unwrap();
        let out = t.layer_norm(x, g3, b3, 1e-5).unwrap();
        assert!(close(t.data(out), &[0.0, 0.0, 0.0], 1e-12));

        let x2 = t.leaf(vec![1.0, 3.0], vec![1, 2], false).unwrap();
        let g2 = t.leaf(vec![1.0; 2], vec![2], false).unwrap();
        let b2 = t.leaf(vec![0.0; 2], vec![2], false).unwrap();
        let out2 = t.layer_norm(x2, g2, b2, 1e-5).unwrap();
        assert!(close(t.data(out2), &[-1.0, 1.0], 1e-4));

        let x3 = t.leaf(vec![0.0, 2.0], vec![1, 2], false).unwrap();
        let g2b = t.leaf(vec![2.0; 2], vec![2], false).unwrap();
        let b2b = t.leaf(vec![1.0; 2], vec![2], false).unwrap();
        let out3 = t.layer_norm(x3, g2b, b2b, 1e-5).unwrap();
        assert!(close(t.data(out3), &[-1.0, 3.0], 1e-3));
    }

    #[test]
    fn layer_norm_affine_mismatch() {
        let mut t = Tape::new();
        let x = t.leaf(vec![0.0; 4], vec![2, 2], false).unwrap();
        let g = t.leaf(vec![1.0; 3], vec![3], false).unwrap();
        let b = t.leaf(vec![0.0; 2], vec![2], false).unwrap();
        assert!(t.layer_norm(x, g, b, 1e-5).is_err());
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut t = Tape::new();
        let w = t.leaf(vec![5.0, -2.0, 0.5], vec![3], true).unwrap();
        let loss = t.sum_all(w).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(w).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_elementwise_square() {
        let mut t = Tape::new();
        let w = t.leaf(vec![1.0, 2.0], vec![2], true).unwrap();
        let sq = t.mul(w, w).unwrap();
        let loss = t.sum_all(sq).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(w).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_cross_entropy_of_symmetric_logits() {
        // loss = -log softmax(logits)[0] with logits [0,0]
        let mut t = Tape::new();
        let logits = t.leaf(vec![0.0, 0.0], vec![1, 2], true).unwrap();
        let p = t.softmax(logits, 1).unwrap();
        let picked = t.pick_columns(p, &[0]).unwrap();
        let lp = t.log_clamped(picked, 1e-12).unwrap();
        let s = t.sum_all(lp).unwrap();
        let loss = t.affine(s, -1.0, 0.0).unwrap();
        t.backward(loss).unwrap();
        assert!(close(t.grad(logits).unwrap(), &[-0.5, 0.5], 1e-12));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t = Tape::new();
        let w = t.leaf(vec![1.0, 2.0], vec![2], true).unwrap();
        assert!(matches!(
            t.backward(w),
            Err(NdError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn backward_accumulates_across_calls() {
        let mut t = Tape::new();
        let w = t.leaf(vec![1.0, 2.0], vec![2], true).unwrap();
        let loss = t.sum_all(w).unwrap();
        t.backward(loss).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(w).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_is_deterministic() {
        let build = || {
            let mut t = Tape::new();
            let w = t.leaf(vec![0.3, -0.7, 1.1, 0.2], vec![2, 2], true).unwrap();
            let x = t.leaf(vec![1.0, 2.0], vec![1, 2], false).unwrap();
            let h = t.matmul(x, w).unwrap();
            let s = t.softmax(h, 1).unwrap();
            let l = t.sum_all(s).unwrap();
            t.backward(l).unwrap();
            t.grad(w).unwrap().to_vec()
        };
        let g1 = build();
        let g2 = build();
        assert!(g1.iter().zip(g2.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn node_count_tracks_op_applications() {
        let mut t = Tape::new();
        let a = t.leaf(vec![1.0], vec![1], true).unwrap();
        let b = t.leaf(vec![2.0], vec![1], true).unwrap();
        assert_eq!(t.num_ops(), 0);
        let c = t.add(a, b).unwrap();
        let _d = t.mul(c, c).unwrap();
        assert_eq!(t.num_ops(), 2);
        assert_eq!(t.num_leaves(), 2);
    }

    #[test]
    fn gather_scatter_pick_roundtrip() {
        let mut t = Tape::new();
        let table = t
            .leaf(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], vec![3, 2], true)
            .unwrap();
        let rows = t.gather_rows(table, &[2, 0]).unwrap();
        assert_eq!(t.data(rows), &[5.0, 6.0, 1.0, 2.0]);
        let picked = t.pick_columns(rows, &[1, 0]).unwrap();
        assert_eq!(t.data(picked), &[6.0, 1.0]);
        let loss = t.sum_all(picked).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(table).unwrap(), &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn scatter_columns_aggregates_duplicates() {
        let mut t = Tape::new();
        let x = t.leaf(vec![0.4, 0.6], vec![1, 2], false).unwrap();
        let p = t.scatter_columns(x, &[Some(3), Some(3)], 5).unwrap();
        assert_eq!(t.data(p), &[0.0, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn bind_caches_per_name() {
        let mut store = ParamStore::new();
        store.insert("w", vec![1.0, 2.0], vec![2]).unwrap();
        let mut t = Tape::new();
        let a = t.bind(&store, "w").unwrap();
        let b = t.bind(&store, "w").unwrap();
        assert_eq!(a, b);
        assert_eq!(t.bindings().len(), 1);
    }
}
