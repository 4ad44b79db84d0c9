//! Dense float64 tensors with reverse-mode differentiation on a recorded
//! tape. Node ids are issued in construction order, so the tape itself is a
//! topological order and backward is a single reverse sweep.
//!
//! This module is deliberately f64-only: it backs the trainable image
//! networks, where finite-difference gradient verification is the main
//! correctness tool and f32 noise would drown the comparisons.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read as _, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::ShapeMismatch(format!(
                "data length {} != shape product {}",
                data.len(),
                numel
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite tensor value".into()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }
}

/// Channel/height/width dims of a rank-3 tensor.
fn chw(t: &Tensor) -> Result<(usize, usize, usize)> {
    if t.shape.len() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "expected rank-3 tensor, got shape {:?}",
            t.shape
        )));
    }
    Ok((t.shape[0], t.shape[1], t.shape[2]))
}

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    // Constant kept for tape debugging; backward is pass-through.
    AddScalar(NodeId, #[allow(dead_code)] f64),
    MulScalar(NodeId, f64),
    Relu(NodeId),
    LeakyRelu(NodeId, f64),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Sqrt(NodeId),
    Matmul(NodeId, NodeId),
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
    },
    Upsample2x(NodeId),
    MeanSpatial(NodeId),
    VarSpatial(NodeId),
    SubChannel(NodeId, NodeId),
    MulChannel(NodeId, NodeId),
    AddChannel(NodeId, NodeId),
    Concat(Vec<NodeId>),
    Crop {
        input: NodeId,
        y0: usize,
        x0: usize,
        h: usize,
        w: usize,
    },
    Reshape(NodeId),
    SliceDim0 {
        input: NodeId,
        start: usize,
        len: usize,
    },
    ResizeNearest(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    L1Loss(NodeId, NodeId),
    MseLoss(NodeId, NodeId),
}

#[derive(Debug, Default)]
pub struct Graph {
    values: Vec<Tensor>,
    ops: Vec<Op>,
    param_names: Vec<Option<String>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id]
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.values.push(value);
        self.ops.push(op);
        self.param_names.push(None);
        self.values.len() - 1
    }

    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf)
    }

    /// Leaf whose gradient is reported under the parameter's name.
    pub fn param(&mut self, name: &str, store: &ParamStore) -> Result<NodeId> {
        let t = store
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name:?}")))?
            .clone();
        let id = self.push(t, Op::Leaf);
        self.param_names[id] = Some(name.to_string());
        Ok(id)
    }

    fn binary_same_shape(&mut self, a: NodeId, b: NodeId, op: Op) -> Result<NodeId> {
        if self.values[a].shape != self.values[b].shape {
            return Err(Error::ShapeMismatch(format!(
                "elementwise op on shapes {:?} and {:?}",
                self.values[a].shape, self.values[b].shape
            )));
        }
        let f = |x: f64, y: f64| match op {
            Op::Add(..) => x + y,
            Op::Sub(..) => x - y,
            Op::Mul(..) => x * y,
            Op::Div(..) => x / y,
            _ => unreachable!(),
        };
        let data = self.values[a]
            .data
            .iter()
            .zip(&self.values[b].data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.values[a].shape.clone();
        Ok(self.push(Tensor { shape, data }, op))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, Op::Div(a, b))
    }

    fn unary(&mut self, a: NodeId, op: Op, f: impl Fn(f64) -> f64) -> NodeId {
        let data = self.values[a].data.iter().map(|&x| f(x)).collect();
        let shape = self.values[a].shape.clone();
        self.push(Tensor { shape, data }, op)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(a, Op::AddScalar(a, c), |x| x + c)
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(a, Op::MulScalar(a, c), |x| x * c)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn leaky_relu(&mut self, a: NodeId, alpha: f64) -> NodeId {
        self.unary(
            a,
            Op::LeakyRelu(a, alpha),
            |x| if x > 0.0 { x } else { alpha * x },
        )
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Sigmoid(a), |x| 1.0 / (1.0 + (-x).exp()))
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (&self.values[a].shape, &self.values[b].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch(format!(
                "matmul on shapes {sa:?} and {sb:?}"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        let (da, db) = (&self.values[a].data, &self.values[b].data);
        for i in 0..m {
            for p in 0..k {
                let av = da[i * k + p];
                for j in 0..n {
                    out[i * n + j] += av * db[p * n + j];
                }
            }
        }
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::Matmul(a, b),
        ))
    }

    /// 3x3 convolution, zero padding 1, stride 1 ("same") or 2.
    /// input `[C_in,H,W]`, weight `[C_out,C_in,3,3]`, bias `[C_out]`.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
    ) -> Result<NodeId> {
        let (ci, h, w) = chw(&self.values[input])?;
        let ws = &self.values[weight].shape;
        if ws.len() != 4 || ws[1] != ci || ws[2] != 3 || ws[3] != 3 {
            return Err(Error::ShapeMismatch(format!(
                "conv2d weight shape {ws:?} for {ci} input channels"
            )));
        }
        let co = ws[0];
        if self.values[bias].shape != [co] {
            return Err(Error::ShapeMismatch("conv2d bias shape".into()));
        }
        if stride != 1 && stride != 2 {
            return Err(Error::InvalidArgument("conv2d stride must be 1 or 2".into()));
        }
        let oh = (h + 2 - 3) / stride + 1;
        let ow = (w + 2 - 3) / stride + 1;
        let (din, dw, db) = (
            &self.values[input].data,
            &self.values[weight].data,
            &self.values[bias].data,
        );
        let mut out = vec![0.0; co * oh * ow];
        for oc in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = db[oc];
                    for ic in 0..ci {
                        for ky in 0..3 {
                            let iy = (oy * stride + ky) as isize - 1;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..3 {
                                let ix = (ox * stride + kx) as isize - 1;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += din[(ic * h + iy as usize) * w + ix as usize]
                                    * dw[((oc * ci + ic) * 3 + ky) * 3 + kx];
                            }
                        }
                    }
                    out[(oc * oh + oy) * ow + ox] = acc;
                }
            }
        }
        Ok(self.push(
            Tensor {
                shape: vec![co, oh, ow],
                data: out,
            },
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
            },
        ))
    }

    /// Nearest-neighbour 2x upsampling of a `[C,H,W]` map.
    pub fn upsample2x(&mut self, a: NodeId) -> Result<NodeId> {
        let (c, h, w) = chw(&self.values[a])?;
        let din = &self.values[a].data;
        let mut out = vec![0.0; c * 4 * h * w];
        for ch in 0..c {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    out[(ch * 2 * h + y) * 2 * w + x] = din[(ch * h + y / 2) * w + x / 2];
                }
            }
        }
        Ok(self.push(
            Tensor {
                shape: vec![c, 2 * h, 2 * w],
                data: out,
            },
            Op::Upsample2x(a),
        ))
    }

    /// Per-channel mean over spatial dims: `[C,H,W]` -> `[C]`.
    pub fn mean_spatial(&mut self, a: NodeId) -> Result<NodeId> {
        let (c, h, w) = chw(&self.values[a])?;
        let n = (h * w) as f64;
        let din = &self.values[a].data;
        let data = (0..c)
            .map(|ch| din[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>() / n)
            .collect();
        Ok(self.push(
            Tensor {
                shape: vec![c],
                data,
            },
            Op::MeanSpatial(a),
        ))
    }

    /// Per-channel population variance over spatial dims: `[C,H,W]` -> `[C]`.
    pub fn var_spatial(&mut self, a: NodeId) -> Result<NodeId> {
        let (c, h, w) = chw(&self.values[a])?;
        let n = (h * w) as f64;
        let din = &self.values[a].data;
        let data = (0..c)
            .map(|ch| {
                let sl = &din[ch * h * w..(ch + 1) * h * w];
                let mu = sl.iter().sum::<f64>() / n;
                sl.iter().map(|&x| (x - mu) * (x - mu)).sum::<f64>() / n
            })
            .collect();
        Ok(self.push(
            Tensor {
                shape: vec![c],
                data,
            },
            Op::VarSpatial(a),
        ))
    }

    fn channel_broadcast(&mut self, x: NodeId, c: NodeId, op: Op) -> Result<NodeId> {
        let (ch, h, w) = chw(&self.values[x])?;
        if self.values[c].shape != [ch] {
            return Err(Error::ShapeMismatch(format!(
                "channel vector shape {:?} against {ch} channels",
                self.values[c].shape
            )));
        }
        let f = |x: f64, y: f64| match op {
            Op::SubChannel(..) => x - y,
            Op::MulChannel(..) => x * y,
            Op::AddChannel(..) => x + y,
            _ => unreachable!(),
        };
        let (dx, dc) = (&self.values[x].data, &self.values[c].data);
        let mut out = vec![0.0; ch * h * w];
        for i in 0..ch {
            for s in 0..h * w {
                out[i * h * w + s] = f(dx[i * h * w + s], dc[i]);
            }
        }
        Ok(self.push(
            Tensor {
                shape: vec![ch, h, w],
                data: out,
            },
            op,
        ))
    }

    pub fn sub_channel(&mut self, x: NodeId, c: NodeId) -> Result<NodeId> {
        self.channel_broadcast(x, c, Op::SubChannel(x, c))
    }

    pub fn mul_channel(&mut self, x: NodeId, c: NodeId) -> Result<NodeId> {
        self.channel_broadcast(x, c, Op::MulChannel(x, c))
    }

    pub fn add_channel(&mut self, x: NodeId, c: NodeId) -> Result<NodeId> {
        self.channel_broadcast(x, c, Op::AddChannel(x, c))
    }

    /// Concatenation along the first dimension; trailing dims must agree.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        }
        let tail = self.values[parts[0]].shape[1..].to_vec();
        let mut dim0 = 0;
        for &p in parts {
            let s = &self.values[p].shape;
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::ShapeMismatch("concat trailing dims differ".into()));
            }
            dim0 += s[0];
        }
        let mut shape = vec![dim0];
        shape.extend_from_slice(&tail);
        let mut data = Vec::with_capacity(shape.iter().product());
        for &p in parts {
            data.extend_from_slice(&self.values[p].data);
        }
        Ok(self.push(Tensor { shape, data }, Op::Concat(parts.to_vec())))
    }

    /// Spatial crop of a `[C,H,W]` map.
    pub fn crop(&mut self, a: NodeId, y0: usize, x0: usize, h: usize, w: usize) -> Result<NodeId> {
        let (c, ih, iw) = chw(&self.values[a])?;
        if y0 + h > ih || x0 + w > iw || h == 0 || w == 0 {
            return Err(Error::InvalidArgument(format!(
                "crop {h}x{w}@({y0},{x0}) outside {ih}x{iw}"
            )));
        }
        let din = &self.values[a].data;
        let mut out = vec![0.0; c * h * w];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out[(ch * h + y) * w + x] = din[(ch * ih + y0 + y) * iw + x0 + x];
                }
            }
        }
        Ok(self.push(
            Tensor {
                shape: vec![c, h, w],
                data: out,
            },
            Op::Crop {
                input: a,
                y0,
                x0,
                h,
                w,
            },
        ))
    }

    /// Same data, new shape; element count must be preserved.
    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.values[a].numel() {
            return Err(Error::ShapeMismatch(format!(
                "reshape {:?} -> {shape:?}",
                self.values[a].shape
            )));
        }
        let data = self.values[a].data.clone();
        Ok(self.push(Tensor { shape, data }, Op::Reshape(a)))
    }

    /// Contiguous slice along the first dimension (channel split).
    pub fn slice_dim0(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let s = &self.values[a].shape;
        if s.is_empty() || start + len > s[0] || len == 0 {
            return Err(Error::InvalidArgument(format!(
                "slice [{start}..{}) of dim0 {:?}",
                start + len,
                s
            )));
        }
        let inner: usize = s[1..].iter().product();
        let mut shape = s.clone();
        shape[0] = len;
        let data = self.values[a].data[start * inner..(start + len) * inner].to_vec();
        Ok(self.push(
            Tensor { shape, data },
            Op::SliceDim0 {
                input: a,
                start,
                len,
            },
        ))
    }

    /// Nearest-neighbour resampling of a `[C,H,W]` map to `oh`x`ow`.
    pub fn resize_nearest(&mut self, a: NodeId, oh: usize, ow: usize) -> Result<NodeId> {
        let (c, h, w) = chw(&self.values[a])?;
        if oh == 0 || ow == 0 {
            return Err(Error::InvalidArgument("resize to empty image".into()));
        }
        let din = &self.values[a].data;
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                let sy = (y * h) / oh;
                for x in 0..ow {
                    let sx = (x * w) / ow;
                    out[(ch * oh + y) * ow + x] = din[(ch * h + sy) * w + sx];
                }
            }
        }
        Ok(self.push(
            Tensor {
                shape: vec![c, oh, ow],
                data: out,
            },
            Op::ResizeNearest(a),
        ))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.values[a].data.iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.values[a].numel() as f64;
        let s = self.values[a].data.iter().sum::<f64>() / n;
        self.push(Tensor::scalar(s), Op::MeanAll(a))
    }

    /// Mean absolute difference over all elements.
    pub fn l1_loss(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.values[a].shape != self.values[b].shape {
            return Err(Error::ShapeMismatch("l1_loss shapes differ".into()));
        }
        let n = self.values[a].numel() as f64;
        let s = self.values[a]
            .data
            .iter()
            .zip(&self.values[b].data)
            .map(|(&x, &y)| (x - y).abs())
            .sum::<f64>()
            / n;
        Ok(self.push(Tensor::scalar(s), Op::L1Loss(a, b)))
    }

    /// Mean squared difference over all elements.
    pub fn mse_loss(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.values[a].shape != self.values[b].shape {
            return Err(Error::ShapeMismatch("mse_loss shapes differ".into()));
        }
        let n = self.values[a].numel() as f64;
        let s = self.values[a]
            .data
            .iter()
            .zip(&self.values[b].data)
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<f64>()
            / n;
        Ok(self.push(Tensor::scalar(s), Op::MseLoss(a, b)))
    }

    /// Reverse sweep from a scalar loss; gradients for every node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.values[loss].numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward from non-scalar shape {:?}",
                self.values[loss].shape
            )));
        }
        let mut grads: Vec<Tensor> = self
            .values
            .iter()
            .map(|v| Tensor::zeros(v.shape.clone()))
            .collect();
        grads[loss].data[0] = 1.0;
        for id in (0..=loss).rev() {
            if grads[id].data.iter().all(|&g| g == 0.0) {
                continue;
            }
            self.backward_node(id, &mut grads);
        }
        Ok(Gradients(grads))
    }

    fn backward_node(&self, id: NodeId, grads: &mut [Tensor]) {
        // `g` is the upstream gradient of node `id`; each arm accumulates
        // into the parents. Cloned to release the borrow on `grads`.
        let g = grads[id].clone();
        match &self.ops[id] {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for (ga, &gi) in grads[*a].data.iter_mut().zip(&g.data) {
                    *ga += gi;
                }
                for (gb, &gi) in grads[*b].data.iter_mut().zip(&g.data) {
                    *gb += gi;
                }
            }
            Op::Sub(a, b) => {
                for (ga, &gi) in grads[*a].data.iter_mut().zip(&g.data) {
                    *ga += gi;
                }
                for (gb, &gi) in grads[*b].data.iter_mut().zip(&g.data) {
                    *gb -= gi;
                }
            }
            Op::Mul(a, b) => {
                let (da, db) = (&self.values[*a].data, &self.values[*b].data);
                for i in 0..g.data.len() {
                    grads[*a].data[i] += g.data[i] * db[i];
                }
                for i in 0..g.data.len() {
                    grads[*b].data[i] += g.data[i] * da[i];
                }
            }
            Op::Div(a, b) => {
                let (da, db) = (&self.values[*a].data, &self.values[*b].data);
                for i in 0..g.data.len() {
                    grads[*a].data[i] += g.data[i] / db[i];
                }
                for i in 0..g.data.len() {
                    grads[*b].data[i] -= g.data[i] * da[i] / (db[i] * db[i]);
                }
            }
            Op::AddScalar(a, _) => {
                for (ga, &gi) in grads[*a].data.iter_mut().zip(&g.data) {
                    *ga += gi;
                }
            }
            Op::MulScalar(a, c) => {
                for (ga, &gi) in grads[*a].data.iter_mut().zip(&g.data) {
                    *ga += gi * c;
                }
            }
            Op::Relu(a) => {
                let da = &self.values[*a].data;
                for i in 0..g.data.len() {
                    if da[i] > 0.0 {
                        grads[*a].data[i] += g.data[i];
                    }
                }
            }
            Op::LeakyRelu(a, alpha) => {
                let da = &self.values[*a].data;
                for i in 0..g.data.len() {
                    grads[*a].data[i] += g.data[i] * if da[i] > 0.0 { 1.0 } else { *alpha };
                }
            }
            Op::Tanh(a) => {
                let y = &self.values[id].data;
                for i in 0..g.data.len() {
                    grads[*a].data[i] += g.data[i] * (1.0 - y[i] * y[i]);
                }
            }
            Op::Sigmoid(a) => {
                let y = &self.values[id].data;
                for i in 0..g.data.len() {
                    grads[*a].data[i] += g.data[i] * y[i] * (1.0 - y[i]);
                }
            }
            Op::Sqrt(a) => {
                let y = &self.values[id].data;
                for i in 0..g.data.len() {
                    grads[*a].data[i] += g.data[i] * 0.5 / y[i];
                }
            }
            Op::Matmul(a, b) => {
                let (m, k) = (self.values[*a].shape[0], self.values[*a].shape[1]);
                let n = self.values[*b].shape[1];
                let (da, db) = (&self.values[*a].data, &self.values[*b].data);
                // gA = g · Bᵀ
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += g.data[i * n + j] * db[p * n + j];
                        }
                        grads[*a].data[i * k + p] += acc;
                    }
                }
                // gB = Aᵀ · g
                for p in 0..k {
                    for j in 0..n {
                        let mut acc = 0.0;
                        for i in 0..m {
                            acc += da[i * k + p] * g.data[i * n + j];
                        }
                        grads[*b].data[p * n + j] += acc;
                    }
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
            } => {
                let (ci, h, w) = chw(&self.values[*input]).unwrap();
                let co = self.values[*weight].shape[0];
                let (oh, ow) = (self.values[id].shape[1], self.values[id].shape[2]);
                let (din, dw) = (&self.values[*input].data, &self.values[*weight].data);
                for oc in 0..co {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let go = g.data[(oc * oh + oy) * ow + ox];
                            if go == 0.0 {
                                continue;
                            }
                            grads[*bias].data[oc] += go;
                            for ic in 0..ci {
                                for ky in 0..3 {
                                    let iy = (oy * stride + ky) as isize - 1;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..3 {
                                        let ix = (ox * stride + kx) as isize - 1;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        let ii = (ic * h + iy as usize) * w + ix as usize;
                                        let wi = ((oc * ci + ic) * 3 + ky) * 3 + kx;
                                        grads[*weight].data[wi] += go * din[ii];
                                        grads[*input].data[ii] += go * dw[wi];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Upsample2x(a) => {
                let (c, h, w) = chw(&self.values[*a]).unwrap();
                for ch in 0..c {
                    for y in 0..2 * h {
                        for x in 0..2 * w {
                            grads[*a].data[(ch * h + y / 2) * w + x / 2] +=
                                g.data[(ch * 2 * h + y) * 2 * w + x];
                        }
                    }
                }
            }
            Op::MeanSpatial(a) => {
                let (c, h, w) = chw(&self.values[*a]).unwrap();
                let n = (h * w) as f64;
                for ch in 0..c {
                    let gc = g.data[ch] / n;
                    for s in 0..h * w {
                        grads[*a].data[ch * h * w + s] += gc;
                    }
                }
            }
            Op::VarSpatial(a) => {
                let (c, h, w) = chw(&self.values[*a]).unwrap();
                let n = (h * w) as f64;
                let da = &self.values[*a].data;
                for ch in 0..c {
                    let sl = &da[ch * h * w..(ch + 1) * h * w];
                    let mu = sl.iter().sum::<f64>() / n;
                    let gc = g.data[ch] * 2.0 / n;
                    for s in 0..h * w {
                        grads[*a].data[ch * h * w + s] += gc * (sl[s] - mu);
                    }
                }
            }
            Op::SubChannel(x, c) | Op::MulChannel(x, c) | Op::AddChannel(x, c) => {
                let (ch, h, w) = chw(&self.values[*x]).unwrap();
                match &self.ops[id] {
                    Op::SubChannel(..) => {
                        for i in 0..ch {
                            for s in 0..h * w {
                                grads[*x].data[i * h * w + s] += g.data[i * h * w + s];
                                grads[*c].data[i] -= g.data[i * h * w + s];
                            }
                        }
                    }
                    Op::AddChannel(..) => {
                        for i in 0..ch {
                            for s in 0..h * w {
                                grads[*x].data[i * h * w + s] += g.data[i * h * w + s];
                                grads[*c].data[i] += g.data[i * h * w + s];
                            }
                        }
                    }
                    Op::MulChannel(..) => {
                        let (dx, dc) = (&self.values[*x].data, &self.values[*c].data);
                        for i in 0..ch {
                            for s in 0..h * w {
                                grads[*x].data[i * h * w + s] += g.data[i * h * w + s] * dc[i];
                                grads[*c].data[i] += g.data[i * h * w + s] * dx[i * h * w + s];
                            }
                        }
                    }
                    _ => unreachable!(),
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.values[p].numel();
                    for i in 0..len {
                        grads[p].data[i] += g.data[off + i];
                    }
                    off += len;
                }
            }
            Op::Crop { input, y0, x0, h, w } => {
                let (c, ih, iw) = chw(&self.values[*input]).unwrap();
                for ch in 0..c {
                    for y in 0..*h {
                        for x in 0..*w {
                            grads[*input].data[(ch * ih + y0 + y) * iw + x0 + x] +=
                                g.data[(ch * h + y) * w + x];
                        }
                    }
                }
                debug_assert!(c * ih * iw == self.values[*input].numel());
            }
            Op::Reshape(a) => {
                for (ga, &gi) in grads[*a].data.iter_mut().zip(&g.data) {
                    *ga += gi;
                }
            }
            Op::SliceDim0 { input, start, len } => {
                let inner: usize = self.values[*input].shape[1..].iter().product();
                for i in 0..len * inner {
                    grads[*input].data[start * inner + i] += g.data[i];
                }
            }
            Op::ResizeNearest(a) => {
                let (c, h, w) = chw(&self.values[*a]).unwrap();
                let (oh, ow) = (self.values[id].shape[1], self.values[id].shape[2]);
                for ch in 0..c {
                    for y in 0..oh {
                        let sy = (y * h) / oh;
                        for x in 0..ow {
                            let sx = (x * w) / ow;
                            grads[*a].data[(ch * h + sy) * w + sx] +=
                                g.data[(ch * oh + y) * ow + x];
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                let gi = g.data[0];
                for ga in grads[*a].data.iter_mut() {
                    *ga += gi;
                }
            }
            Op::MeanAll(a) => {
                let gi = g.data[0] / self.values[*a].numel() as f64;
                for ga in grads[*a].data.iter_mut() {
                    *ga += gi;
                }
            }
            Op::L1Loss(a, b) => {
                let gi = g.data[0] / self.values[*a].numel() as f64;
                let (da, db) = (&self.values[*a].data, &self.values[*b].data);
                for i in 0..da.len() {
                    // Subgradient 0 at exact equality.
                    let s = (da[i] - db[i]).signum() * ((da[i] != db[i]) as u8 as f64);
                    grads[*a].data[i] += gi * s;
                    grads[*b].data[i] -= gi * s;
                }
            }
            Op::MseLoss(a, b) => {
                let gi = g.data[0] * 2.0 / self.values[*a].numel() as f64;
                let (da, db) = (&self.values[*a].data, &self.values[*b].data);
                for i in 0..da.len() {
                    grads[*a].data[i] += gi * (da[i] - db[i]);
                    grads[*b].data[i] -= gi * (da[i] - db[i]);
                }
            }
        }
    }

    /// Gradients of named-parameter leaves, keyed by name.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (id, name) in self.param_names.iter().enumerate() {
            if let Some(name) = name {
                out.entry(name.clone())
                    .and_modify(|t: &mut Tensor| {
                        for (a, b) in t.data.iter_mut().zip(&grads.0[id].data) {
                            *a += b;
                        }
                    })
                    .or_insert_with(|| grads.0[id].clone());
            }
        }
        out
    }
}

#[derive(Debug)]
pub struct Gradients(Vec<Tensor>);

impl Gradients {
    pub fn wrt(&self, id: NodeId) -> &Tensor {
        &self.0[id]
    }
}

/// Named parameter values; BTreeMap gives a deterministic iteration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        self.entries.insert(name.to_string(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.entries.remove(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct AdamState {
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One bias-corrected Adam update over every entry of `grads`.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, grad) in grads {
        let value = params
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name:?}")))?;
        if value.shape != grad.shape {
            return Err(Error::ShapeMismatch(format!(
                "adam grad shape {:?} != param shape {:?} for {name:?}",
                grad.shape, value.shape
            )));
        }
        let n = value.numel();
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        for i in 0..n {
            let g = grad.data[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            value.data[i] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct CheckpointEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    params: Vec<CheckpointEntry>,
}

const CKPT_MAGIC: &[u8; 4] = b"TCK1";

/// Checkpoint layout: magic, u32 LE JSON manifest length, manifest, then the
/// f64 LE data of every parameter in manifest order.
pub fn save_checkpoint_bytes(store: &ParamStore) -> Vec<u8> {
    let manifest = CheckpointManifest {
        params: store
            .iter()
            .map(|(name, t)| CheckpointEntry {
                name: name.clone(),
                shape: t.shape.clone(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&manifest).expect("manifest serialization");
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in store.iter() {
        for &v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn load_checkpoint_bytes(bytes: &[u8]) -> Result<ParamStore> {
    let corrupt = |msg: &str| Error::CorruptContainer(msg.to_string());
    if bytes.len() < 8 || &bytes[0..4] != CKPT_MAGIC {
        return Err(corrupt("bad checkpoint magic"));
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() < 8 + hlen {
        return Err(corrupt("truncated checkpoint header"));
    }
    let manifest: CheckpointManifest =
        serde_json::from_slice(&bytes[8..8 + hlen]).map_err(|_| corrupt("bad manifest json"))?;
    let mut off = 8 + hlen;
    let mut store = ParamStore::new();
    for entry in manifest.params {
        let numel: usize = entry.shape.iter().product();
        let end = off + 8 * numel;
        if bytes.len() < end {
            return Err(corrupt("truncated checkpoint data"));
        }
        let data = bytes[off..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.insert(&entry.name, Tensor::new(entry.shape, data)?);
        off = end;
    }
    if off != bytes.len() {
        return Err(corrupt("trailing bytes in checkpoint"));
    }
    Ok(store)
}

pub fn save_checkpoint(path: &Path, store: &ParamStore) -> Result<()> {
    let bytes = save_checkpoint_bytes(store);
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    let mut bytes = Vec::new();
    File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    load_checkpoint_bytes(&bytes)
}

/// Deterministic Gaussian fill used for weight init.
pub fn randn_tensor(shape: Vec<usize>, std: f64, rng: &mut impl rand::Rng) -> Tensor {
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| {
            // Box-Muller from two uniforms.
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect();
    Tensor { shape, data }
}
