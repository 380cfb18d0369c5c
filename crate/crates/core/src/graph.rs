//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is a tape: every operation appends one node holding the
//! eagerly computed forward value. `backward` walks the tape in reverse and
//! accumulates gradients into `requires_grad` leaves. Gradients of leaves
//! persist across `backward` calls (the caller zeroes them); gradients of
//! interior nodes are scratch storage local to one `backward` pass.
//!
//! Every op checks its output for non-finite values and fails rather than
//! letting a NaN propagate silently.

use crate::kernels as k;
use crate::par::for_each_row;
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError, TensorResult};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d { x: usize, w: usize, b: usize, stride: usize, pad: usize },
    Conv3d { x: usize, w: usize, b: usize },
    BilinearUp2x { x: usize },
    MatMul { a: usize, b: usize },
    MatMulBt { a: usize, b: usize },
    SoftmaxRows { x: usize },
    LeakyRelu { x: usize, alpha: f64 },
    Tanh { x: usize },
    LayerNormCh { x: usize, gain: usize, bias: usize, eps: f64 },
    Add { a: usize, b: usize },
    Affine { x: usize, mul: f64, add: f64 },
    PatchesToRows { x: usize, p: usize },
    RowsToMap { x: usize, p: usize, c: usize, h: usize, w: usize },
    MapToPatchBatch { x: usize, p: usize },
    PatchBatchToMap { x: usize, p: usize },
    ConcatCh { a: usize, b: usize },
    StackTemporal { xs: Vec<usize> },
    Gram { x: usize },
    MeanAbsDiff { a: usize, b: usize },
    Mean { x: usize },
    Sum { x: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Conv3d { .. } => "conv3d",
            Op::BilinearUp2x { .. } => "bilinear_upsample_2x",
            Op::MatMul { .. } => "matmul",
            Op::MatMulBt { .. } => "matmul_bt",
            Op::SoftmaxRows { .. } => "softmax_rows",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::Tanh { .. } => "tanh",
            Op::LayerNormCh { .. } => "layer_norm_channels",
            Op::Add { .. } => "add",
            Op::Affine { .. } => "affine",
            Op::PatchesToRows { .. } => "patches_to_rows",
            Op::RowsToMap { .. } => "rows_to_map",
            Op::MapToPatchBatch { .. } => "map_to_patch_batch",
            Op::PatchBatchToMap { .. } => "patch_batch_to_map",
            Op::ConcatCh { .. } => "concat_channels",
            Op::StackTemporal { .. } => "stack_temporal",
            Op::Gram { .. } => "gram",
            Op::MeanAbsDiff { .. } => "mean_abs_diff",
            Op::Mean { .. } => "mean",
            Op::Sum { .. } => "sum",
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b, .. } | Op::Conv3d { x, w, b } => vec![*x, *w, *b],
            Op::BilinearUp2x { x }
            | Op::SoftmaxRows { x }
            | Op::LeakyRelu { x, .. }
            | Op::Tanh { x }
            | Op::Affine { x, .. }
            | Op::PatchesToRows { x, .. }
            | Op::RowsToMap { x, .. }
            | Op::MapToPatchBatch { x, .. }
            | Op::PatchBatchToMap { x, .. }
            | Op::Gram { x }
            | Op::Mean { x }
            | Op::Sum { x } => vec![*x],
            Op::MatMul { a, b } | Op::MatMulBt { a, b } | Op::Add { a, b } | Op::ConcatCh { a, b } | Op::MeanAbsDiff { a, b } => {
                vec![*a, *b]
            }
            Op::LayerNormCh { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::StackTemporal { xs } => xs.clone(),
        }
    }
}

/// Autodiff tape.
#[derive(Clone)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Tensor<T>>,
    ops: Vec<Op>,
    labels: Vec<Option<String>>,
}

fn dims4(op: &'static str, shape: &[usize]) -> TensorResult<(usize, usize, usize, usize)> {
    if shape.len() != 4 {
        return Err(TensorError::BadRank { op, expected: 4, shape: shape.to_vec() });
    }
    Ok((shape[0], shape[1], shape[2], shape[3]))
}

/// Accepts `[C,H,W]` or `[1,C,H,W]`.
fn dims_chw(op: &'static str, shape: &[usize]) -> TensorResult<(usize, usize, usize)> {
    match shape {
        [c, h, w] => Ok((*c, *h, *w)),
        [1, c, h, w] => Ok((*c, *h, *w)),
        _ => Err(TensorError::BadRank { op, expected: 3, shape: shape.to_vec() }),
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), ops: Vec::new(), labels: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, mut t: Tensor<T>, requires_grad: bool) -> TensorId {
        t.requires_grad = requires_grad;
        let id = self.nodes.len();
        self.nodes.push(t);
        self.ops.push(Op::Leaf);
        self.labels.push(None);
        TensorId(id)
    }

    pub fn leaf_labeled(&mut self, t: Tensor<T>, requires_grad: bool, label: &str) -> TensorId {
        let id = self.leaf(t, requires_grad);
        self.labels[id.0] = Some(label.to_string());
        id
    }

    pub fn set_label(&mut self, id: TensorId, label: &str) {
        self.labels[id.0] = Some(label.to_string());
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor<T> {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: TensorId) -> &[T] {
        self.nodes[id.0].data()
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].shape()
    }

    pub fn item(&self, id: TensorId) -> T {
        self.nodes[id.0].item()
    }

    pub fn grad(&self, id: TensorId) -> Option<&[T]> {
        self.nodes[id.0].grad()
    }

    /// Detached copy of a node's value.
    pub fn detach(&self, id: TensorId) -> Tensor<T> {
        Tensor::new(self.shape(id).to_vec(), self.value(id).to_vec()).expect("node is consistent")
    }

    /// Zero (drop) accumulated gradients on all nodes.
    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Drop every node after the first `len` (used to re-run a forward over
    /// the same leaves without re-copying them).
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        self.ops.truncate(len);
        self.labels.truncate(len);
    }

    /// Overwrite one element of a leaf's value, returning the old value.
    pub fn set_leaf_element(&mut self, id: TensorId, index: usize, v: T) -> T {
        debug_assert!(matches!(self.ops[id.0], Op::Leaf));
        let slot = &mut self.nodes[id.0].data_mut()[index];
        std::mem::replace(slot, v)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op) -> TensorResult<TensorId> {
        let id = self.nodes.len();
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: op.name(), node: id, label: String::new() });
        }
        let requires_grad = op.inputs().iter().any(|&i| self.nodes[i].requires_grad);
        let mut t = Tensor::new(shape, data)?;
        t.requires_grad = requires_grad;
        self.nodes.push(t);
        self.ops.push(op);
        self.labels.push(None);
        Ok(TensorId(id))
    }

    // ---- ops -----------------------------------------------------------

    pub fn conv2d(&mut self, x: TensorId, w: TensorId, b: TensorId, stride: usize, pad: usize) -> TensorResult<TensorId> {
        let (n, c, h, wd) = dims4("conv2d", self.shape(x))?;
        let (co, cw, kh, kw) = dims4("conv2d", self.shape(w))?;
        if cw != c {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(w).to_vec(),
            });
        }
        if self.shape(b) != [co] {
            return Err(TensorError::ShapeMismatch { op: "conv2d", lhs: vec![co], rhs: self.shape(b).to_vec() });
        }
        if kh == 0 || kw == 0 || stride == 0 {
            return Err(TensorError::InvalidArg { op: "conv2d", msg: "kernel and stride must be positive".into() });
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(TensorError::InvalidArg {
                op: "conv2d",
                msg: format!("zero-size output: input {h}x{wd}, kernel {kh}x{kw}, pad {pad}"),
            });
        }
        let oh = k::conv_out_extent(h, kh, stride, pad);
        let ow = k::conv_out_extent(wd, kw, stride, pad);
        let pointwise = kh == 1 && kw == 1 && stride == 1 && pad == 0;
        let ohow = oh * ow;
        let ncols = n * ohow;
        let ckk = c * kh * kw;
        let mut out = vec![T::zero(); n * co * ohow];
        let xs = self.value(x);
        let ws = self.value(w);
        let bs = self.value(b);
        if pointwise && n == 1 {
            // A 1x1 stride-1 convolution is a plain channel matmul.
            for (ci, chunk) in out.chunks_mut(ohow).enumerate() {
                chunk.fill(bs[ci]);
            }
            k::matmul_acc(ws, xs, &mut out, co, c, ohow);
        } else {
            // One wide matmul over the whole batch.
            let mut col = vec![T::zero(); ckk * ncols];
            k::im2col_all(xs, n, (c, h, wd), (kh, kw), stride, pad, (oh, ow), &mut col);
            if n == 1 {
                for (ci, chunk) in out.chunks_mut(ohow).enumerate() {
                    chunk.fill(bs[ci]);
                }
                k::matmul_acc(ws, &col, &mut out, co, ckk, ncols);
            } else {
                let mut out_all = vec![T::zero(); co * ncols];
                for (ci, chunk) in out_all.chunks_mut(ncols).enumerate() {
                    chunk.fill(bs[ci]);
                }
                k::matmul_acc(ws, &col, &mut out_all, co, ckk, ncols);
                for_each_row(&mut out, ohow, |plane, dst| {
                    let ni = plane / co;
                    let ci = plane % co;
                    dst.copy_from_slice(&out_all[ci * ncols + ni * ohow..ci * ncols + (ni + 1) * ohow]);
                });
            }
        }
        self.push(vec![n, co, oh, ow], out, Op::Conv2d { x: x.0, w: w.0, b: b.0, stride, pad })
    }

    /// 3x3x3 convolution, stride 1, pad 1 on every axis (extent-preserving).
    pub fn conv3d(&mut self, x: TensorId, w: TensorId, b: TensorId) -> TensorResult<TensorId> {
        let xs_shape = self.shape(x).to_vec();
        if xs_shape.len() != 5 {
            return Err(TensorError::BadRank { op: "conv3d", expected: 5, shape: xs_shape });
        }
        let (n, c, t, h, wd) = (xs_shape[0], xs_shape[1], xs_shape[2], xs_shape[3], xs_shape[4]);
        let w_shape = self.shape(w).to_vec();
        if w_shape.len() != 5 || w_shape[2] != 3 || w_shape[3] != 3 || w_shape[4] != 3 {
            return Err(TensorError::BadRank { op: "conv3d", expected: 5, shape: w_shape });
        }
        let co = w_shape[0];
        if w_shape[1] != c {
            return Err(TensorError::ShapeMismatch { op: "conv3d", lhs: xs_shape, rhs: w_shape });
        }
        if self.shape(b) != [co] {
            return Err(TensorError::ShapeMismatch { op: "conv3d", lhs: vec![co], rhs: self.shape(b).to_vec() });
        }
        let hw = h * wd;
        let mut out = vec![T::zero(); n * co * t * hw];
        let mut col = vec![T::zero(); c * 27 * hw];
        let mut tmp = vec![T::zero(); co * hw];
        let xs = self.value(x);
        let ws = self.value(w);
        let bs = self.value(b);
        for ni in 0..n {
            let x_n = &xs[ni * c * t * hw..(ni + 1) * c * t * hw];
            for tz in 0..t {
                k::im2col_3d_slice(x_n, (c, t, h, wd), tz, &mut col);
                for (ci, chunk) in tmp.chunks_mut(hw).enumerate() {
                    chunk.fill(bs[ci]);
                }
                k::matmul_acc(ws, &col, &mut tmp, co, c * 27, hw);
                for ci in 0..co {
                    let dst = ((ni * co + ci) * t + tz) * hw;
                    out[dst..dst + hw].copy_from_slice(&tmp[ci * hw..(ci + 1) * hw]);
                }
            }
        }
        self.push(vec![n, co, t, h, wd], out, Op::Conv3d { x: x.0, w: w.0, b: b.0 })
    }

    pub fn bilinear_up2x(&mut self, x: TensorId) -> TensorResult<TensorId> {
        let (n, c, h, w) = dims4("bilinear_upsample_2x", self.shape(x))?;
        if h < 2 || w < 2 {
            return Err(TensorError::InvalidArg {
                op: "bilinear_upsample_2x",
                msg: format!("spatial extents must be >= 2, got {h}x{w}"),
            });
        }
        let ty: Vec<(usize, usize, T)> = k::up2x_axis_taps(h).into_iter().map(|(a, b, f)| (a, b, T::of_f64(f))).collect();
        let tx: Vec<(usize, usize, T)> = k::up2x_axis_taps(w).into_iter().map(|(a, b, f)| (a, b, T::of_f64(f))).collect();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); n * c * oh * ow];
        let xs = self.value(x);
        for_each_row(&mut out, oh * ow, |plane, dst| {
            let src = &xs[plane * h * w..(plane + 1) * h * w];
            for oy in 0..oh {
                let (y0, y1, fy) = ty[oy];
                for ox in 0..ow {
                    let (x0, x1, fx) = tx[ox];
                    let a = src[y0 * w + x0];
                    let b = src[y0 * w + x1];
                    let cc = src[y1 * w + x0];
                    let d = src[y1 * w + x1];
                    let top = a + fx * (b - a);
                    let bot = cc + fx * (d - cc);
                    dst[oy * ow + ox] = top + fy * (bot - top);
                }
            }
        });
        self.push(vec![n, c, oh, ow], out, Op::BilinearUp2x { x: x.0 })
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorResult<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let (m, kk, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        k::matmul_acc(self.value(a), self.value(b), &mut out, m, kk, n);
        self.push(vec![m, n], out, Op::MatMul { a: a.0, b: b.0 })
    }

    /// `a · bᵀ` for `a [m,k]`, `b [n,k]`.
    pub fn matmul_bt(&mut self, a: TensorId, b: TensorId) -> TensorResult<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(TensorError::ShapeMismatch { op: "matmul_bt", lhs: sa, rhs: sb });
        }
        let (m, kk, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![T::zero(); m * n];
        k::matmul_bt_acc(self.value(a), self.value(b), &mut out, m, kk, n);
        self.push(vec![m, n], out, Op::MatMulBt { a: a.0, b: b.0 })
    }

    pub fn softmax_rows(&mut self, x: TensorId) -> TensorResult<TensorId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(TensorError::BadRank { op: "softmax_rows", expected: 2, shape: s });
        }
        if !self.nodes[x.0].all_finite() {
            return Err(TensorError::NonFinite { op: "softmax_rows", node: x.0, label: String::new() });
        }
        let mut out = vec![T::zero(); s[0] * s[1]];
        k::softmax_rows_forward(self.value(x), s[0], s[1], &mut out);
        self.push(s, out, Op::SoftmaxRows { x: x.0 })
    }

    pub fn leaky_relu(&mut self, x: TensorId, alpha: f64) -> TensorResult<TensorId> {
        let al = T::of_f64(alpha);
        let out: Vec<T> = self.value(x).iter().map(|&v| if v >= T::zero() { v } else { al * v }).collect();
        self.push(self.shape(x).to_vec(), out, Op::LeakyRelu { x: x.0, alpha })
    }

    pub fn tanh(&mut self, x: TensorId) -> TensorResult<TensorId> {
        let out: Vec<T> = self.value(x).iter().map(|v| v.tanh()).collect();
        self.push(self.shape(x).to_vec(), out, Op::Tanh { x: x.0 })
    }

    /// Per spatial location, normalize the channel vector to zero mean and
    /// unit variance, then apply the learned per-channel affine.
    pub fn layer_norm_channels(&mut self, x: TensorId, gain: TensorId, bias: TensorId, eps: f64) -> TensorResult<TensorId> {
        let (n, c, h, w) = dims4("layer_norm_channels", self.shape(x))?;
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm_channels",
                lhs: vec![c],
                rhs: self.shape(gain).to_vec(),
            });
        }
        if eps <= 0.0 {
            return Err(TensorError::InvalidArg { op: "layer_norm_channels", msg: "eps must be positive".into() });
        }
        let xs = self.value(x);
        let (mu, inv) = ln_stats(xs, n, c, h * w, T::of_f64(eps));
        let gs = self.value(gain);
        let bs = self.value(bias);
        let mut out = vec![T::zero(); xs.len()];
        let hw = h * w;
        for_each_row(&mut out, hw, |plane, dst| {
            let ci = plane % c;
            let ni = plane / c;
            let src = &xs[plane * hw..(plane + 1) * hw];
            let mu_n = &mu[ni * hw..(ni + 1) * hw];
            let inv_n = &inv[ni * hw..(ni + 1) * hw];
            let (g, bb) = (gs[ci], bs[ci]);
            for l in 0..hw {
                dst[l] = g * ((src[l] - mu_n[l]) * inv_n[l]) + bb;
            }
        });
        self.push(vec![n, c, h, w], out, Op::LayerNormCh { x: x.0, gain: gain.0, bias: bias.0, eps })
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorResult<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out: Vec<T> = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        self.push(self.shape(a).to_vec(), out, Op::Add { a: a.0, b: b.0 })
    }

    /// Elementwise `mul * x + add`.
    pub fn affine(&mut self, x: TensorId, mul: f64, add: f64) -> TensorResult<TensorId> {
        let (m, ad) = (T::of_f64(mul), T::of_f64(add));
        let out: Vec<T> = self.value(x).iter().map(|&v| m * v + ad).collect();
        self.push(self.shape(x).to_vec(), out, Op::Affine { x: x.0, mul, add })
    }

    pub fn scale(&mut self, x: TensorId, mul: f64) -> TensorResult<TensorId> {
        self.affine(x, mul, 0.0)
    }

    /// Partition a `[1,C,H,W]` (or `[C,H,W]`) map into `p*p` row-major
    /// patches, each flattened to one row: output `[p*p, (H/p)*(W/p)*C]`.
    pub fn patches_to_rows(&mut self, x: TensorId, p: usize) -> TensorResult<TensorId> {
        let (c, h, w) = dims_chw("patches_to_rows", self.shape(x))?;
        check_partition("patches_to_rows", h, w, p)?;
        let d = (h / p) * (w / p) * c;
        let mut out = vec![T::zero(); p * p * d];
        copy_map_to_patches(self.value(x), (c, h, w), p, &mut out);
        self.push(vec![p * p, d], out, Op::PatchesToRows { x: x.0, p })
    }

    /// Inverse of [`Graph::patches_to_rows`]; emits `[1,C,H,W]`.
    pub fn rows_to_map(&mut self, x: TensorId, p: usize, (c, h, w): (usize, usize, usize)) -> TensorResult<TensorId> {
        let s = self.shape(x).to_vec();
        check_partition("rows_to_map", h, w, p)?;
        let d = (h / p) * (w / p) * c;
        if s != [p * p, d] {
            return Err(TensorError::ShapeMismatch { op: "rows_to_map", lhs: s, rhs: vec![p * p, d] });
        }
        let mut out = vec![T::zero(); c * h * w];
        copy_patches_to_map(self.value(x), (c, h, w), p, &mut out);
        self.push(vec![1, c, h, w], out, Op::RowsToMap { x: x.0, p, c, h, w })
    }

    /// Same data movement as `patches_to_rows` but shaped `[p*p, C, H/p, W/p]`
    /// so each patch can be convolved independently.
    pub fn map_to_patch_batch(&mut self, x: TensorId, p: usize) -> TensorResult<TensorId> {
        let (c, h, w) = dims_chw("map_to_patch_batch", self.shape(x))?;
        check_partition("map_to_patch_batch", h, w, p)?;
        let d = (h / p) * (w / p) * c;
        let mut out = vec![T::zero(); p * p * d];
        copy_map_to_patches(self.value(x), (c, h, w), p, &mut out);
        self.push(vec![p * p, c, h / p, w / p], out, Op::MapToPatchBatch { x: x.0, p })
    }

    pub fn patch_batch_to_map(&mut self, x: TensorId, p: usize) -> TensorResult<TensorId> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[0] != p * p {
            return Err(TensorError::BadRank { op: "patch_batch_to_map", expected: 4, shape: s });
        }
        let (c, h, w) = (s[1], s[2] * p, s[3] * p);
        let mut out = vec![T::zero(); c * h * w];
        copy_patches_to_map(self.value(x), (c, h, w), p, &mut out);
        self.push(vec![1, c, h, w], out, Op::PatchBatchToMap { x: x.0, p })
    }

    pub fn concat_channels(&mut self, a: TensorId, b: TensorId) -> TensorResult<TensorId> {
        let (na, ca, ha, wa) = dims4("concat_channels", self.shape(a))?;
        let (nb, cb, hb, wb) = dims4("concat_channels", self.shape(b))?;
        if na != 1 || nb != 1 || ha != hb || wa != wb {
            return Err(TensorError::ShapeMismatch {
                op: "concat_channels",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = Vec::with_capacity((ca + cb) * ha * wa);
        out.extend_from_slice(self.value(a));
        out.extend_from_slice(self.value(b));
        self.push(vec![1, ca + cb, ha, wa], out, Op::ConcatCh { a: a.0, b: b.0 })
    }

    /// Stack `B` same-shape `[1,C,H,W]` maps along a new temporal axis:
    /// output `[1,C,B,H,W]`.
    pub fn stack_temporal(&mut self, xs: &[TensorId]) -> TensorResult<TensorId> {
        if xs.is_empty() {
            return Err(TensorError::InvalidArg { op: "stack_temporal", msg: "empty input list".into() });
        }
        let (n, c, h, w) = dims4("stack_temporal", self.shape(xs[0]))?;
        if n != 1 {
            return Err(TensorError::InvalidArg { op: "stack_temporal", msg: "inputs must be [1,C,H,W]".into() });
        }
        for &x in xs {
            if self.shape(x) != self.shape(xs[0]) {
                return Err(TensorError::ShapeMismatch {
                    op: "stack_temporal",
                    lhs: self.shape(xs[0]).to_vec(),
                    rhs: self.shape(x).to_vec(),
                });
            }
        }
        let bsz = xs.len();
        let hw = h * w;
        let mut out = vec![T::zero(); c * bsz * hw];
        for (bi, &x) in xs.iter().enumerate() {
            let src = self.value(x);
            for ci in 0..c {
                out[(ci * bsz + bi) * hw..(ci * bsz + bi + 1) * hw].copy_from_slice(&src[ci * hw..(ci + 1) * hw]);
            }
        }
        self.push(vec![1, c, bsz, h, w], out, Op::StackTemporal { xs: xs.iter().map(|i| i.0).collect() })
    }

    /// Normalized Gram matrix `G = F Fᵀ / (C·H·W)` of a `[C,H,W]` (or
    /// `[1,C,H,W]`) feature map.
    pub fn gram(&mut self, x: TensorId) -> TensorResult<TensorId> {
        let (c, h, w) = dims_chw("gram", self.shape(x))?;
        let hw = h * w;
        let mut out = vec![T::zero(); c * c];
        k::matmul_bt_acc(self.value(x), self.value(x), &mut out, c, hw, c);
        let s = T::of_f64(1.0 / (c * hw) as f64);
        for v in out.iter_mut() {
            *v = *v * s;
        }
        self.push(vec![c, c], out, Op::Gram { x: x.0 })
    }

    /// Mean absolute difference, reduced to a scalar.
    pub fn mean_abs_diff(&mut self, a: TensorId, b: TensorId) -> TensorResult<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: "mean_abs_diff",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let n = self.nodes[a.0].len();
        let mut s = T::zero();
        for (&x, &y) in self.value(a).iter().zip(self.value(b)) {
            s = s + (x - y).abs();
        }
        s = s / T::of_usize(n);
        self.push(vec![1], vec![s], Op::MeanAbsDiff { a: a.0, b: b.0 })
    }

    pub fn mean(&mut self, x: TensorId) -> TensorResult<TensorId> {
        let n = self.nodes[x.0].len();
        let mut s = T::zero();
        for &v in self.value(x) {
            s = s + v;
        }
        s = s / T::of_usize(n);
        self.push(vec![1], vec![s], Op::Mean { x: x.0 })
    }

    pub fn sum(&mut self, x: TensorId) -> TensorResult<TensorId> {
        let mut s = T::zero();
        for &v in self.value(x) {
            s = s + v;
        }
        self.push(vec![1], vec![s], Op::Sum { x: x.0 })
    }

    // ---- backward ------------------------------------------------------

    /// Populate gradients of `requires_grad` leaves with d`out`/d`leaf`.
    /// Accumulates on repeated calls; the caller resets with
    /// [`Graph::zero_grads`] when fresh gradients are wanted.
    pub fn backward(&mut self, out: TensorId) -> TensorResult<()> {
        if self.nodes[out.0].len() != 1 {
            return Err(TensorError::NonScalarBackward { shape: self.shape(out).to_vec() });
        }
        let n_nodes = self.nodes.len();
        let mut tg: Vec<Option<Vec<T>>> = vec![None; n_nodes];
        tg[out.0] = Some(vec![T::one()]);

        for i in (0..n_nodes).rev() {
            if !self.nodes[i].requires_grad {
                tg[i] = None;
                continue;
            }
            let g = match tg[i].take() {
                Some(g) => g,
                None => continue,
            };
            if matches!(self.ops[i], Op::Leaf) {
                let node = &mut self.nodes[i];
                match node.grad.as_mut() {
                    Some(acc) => k::axpy(T::one(), &g, acc),
                    None => node.grad = Some(g),
                }
                continue;
            }
            let op = self.ops[i].clone();
            // Allocate scratch gradients for inputs that need them.
            for inp in op.inputs() {
                if self.nodes[inp].requires_grad && tg[inp].is_none() {
                    tg[inp] = Some(vec![T::zero(); self.nodes[inp].len()]);
                }
            }
            self.backprop_op(i, &op, &g, &mut tg);
        }

        // Disconnected requires_grad leaves still get a zero gradient.
        for i in 0..n_nodes {
            if matches!(self.ops[i], Op::Leaf) && self.nodes[i].requires_grad && self.nodes[i].grad.is_none() {
                self.nodes[i].grad = Some(vec![T::zero(); self.nodes[i].len()]);
            }
        }
        Ok(())
    }

    fn backprop_op(&self, node: usize, op: &Op, g: &[T], tg: &mut [Option<Vec<T>>]) {
        let needs = |tg: &[Option<Vec<T>>], i: usize| tg[i].is_some();
        match *op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let (n, c, h, wd) = dims4("conv2d", self.nodes[x].shape()).unwrap();
                let (co, _, kh, kw) = dims4("conv2d", self.nodes[w].shape()).unwrap();
                let oh = k::conv_out_extent(h, kh, stride, pad);
                let ow = k::conv_out_extent(wd, kw, stride, pad);
                let ckk = c * kh * kw;
                if needs(tg, b) {
                    let db = tg[b].as_mut().unwrap();
                    for ni in 0..n {
                        for ci in 0..co {
                            let base = (ni * co + ci) * oh * ow;
                            let mut s = T::zero();
                            for &gv in &g[base..base + oh * ow] {
                                s = s + gv;
                            }
                            db[ci] = db[ci] + s;
                        }
                    }
                }
                if !needs(tg, w) && !needs(tg, x) {
                    return;
                }
                let pointwise = kh == 1 && kw == 1 && stride == 1 && pad == 0;
                let ohow = oh * ow;
                let ncols = n * ohow;
                let xs = self.nodes[x].data();
                let ws = self.nodes[w].data();
                let wt = if needs(tg, x) { Some(k::transpose(ws, co, ckk)) } else { None };
                if pointwise && n == 1 {
                    if needs(tg, w) {
                        k::matmul_bt_acc(g, xs, tg[w].as_mut().unwrap(), co, ohow, ckk);
                    }
                    if let Some(wt) = &wt {
                        k::matmul_acc(wt, g, tg[x].as_mut().unwrap(), ckk, co, ohow);
                    }
                } else {
                    // Gather the output gradient into [Co, N*OHOW] column blocks.
                    let mut g_all = vec![T::zero(); co * ncols];
                    for_each_row(&mut g_all, ohow, |chunk, dst| {
                        let ci = chunk / n;
                        let ni = chunk % n;
                        dst.copy_from_slice(&g[(ni * co + ci) * ohow..(ni * co + ci + 1) * ohow]);
                    });
                    if needs(tg, w) {
                        let mut col = vec![T::zero(); ckk * ncols];
                        k::im2col_all(xs, n, (c, h, wd), (kh, kw), stride, pad, (oh, ow), &mut col);
                        k::matmul_bt_acc(&g_all, &col, tg[w].as_mut().unwrap(), co, ncols, ckk);
                    }
                    if let Some(wt) = &wt {
                        let mut dcol = vec![T::zero(); ckk * ncols];
                        k::matmul_acc(wt, &g_all, &mut dcol, ckk, co, ncols);
                        k::col2im_gather_all(&dcol, n, (c, h, wd), (kh, kw), stride, pad, (oh, ow), tg[x].as_mut().unwrap());
                    }
                }
            }
            Op::Conv3d { x, w, b } => {
                let xsh = self.nodes[x].shape();
                let (n, c, t, h, wd) = (xsh[0], xsh[1], xsh[2], xsh[3], xsh[4]);
                let co = self.nodes[w].shape()[0];
                let hw = h * wd;
                if needs(tg, b) {
                    let db = tg[b].as_mut().unwrap();
                    for ni in 0..n {
                        for ci in 0..co {
                            let base = (ni * co + ci) * t * hw;
                            let mut s = T::zero();
                            for &gv in &g[base..base + t * hw] {
                                s = s + gv;
                            }
                            db[ci] = db[ci] + s;
                        }
                    }
                }
                if !needs(tg, w) && !needs(tg, x) {
                    return;
                }
                let xs = self.nodes[x].data();
                let ws = self.nodes[w].data();
                let ckk = c * 27;
                let wt = if needs(tg, x) { Some(k::transpose(ws, co, ckk)) } else { None };
                let mut col = vec![T::zero(); ckk * hw];
                let mut dcol = vec![T::zero(); ckk * hw];
                let mut g_t = vec![T::zero(); co * hw];
                for ni in 0..n {
                    let x_n = &xs[ni * c * t * hw..(ni + 1) * c * t * hw];
                    for tz in 0..t {
                        for ci in 0..co {
                            let src = ((ni * co + ci) * t + tz) * hw;
                            g_t[ci * hw..(ci + 1) * hw].copy_from_slice(&g[src..src + hw]);
                        }
                        if needs(tg, w) {
                            k::im2col_3d_slice(x_n, (c, t, h, wd), tz, &mut col);
                            k::matmul_bt_acc(&g_t, &col, tg[w].as_mut().unwrap(), co, hw, ckk);
                        }
                        if let Some(wt) = &wt {
                            dcol.fill(T::zero());
                            k::matmul_acc(wt, &g_t, &mut dcol, ckk, co, hw);
                            let dx = tg[x].as_mut().unwrap();
                            k::col2im_scatter_3d_slice(&dcol, (c, t, h, wd), tz, &mut dx[ni * c * t * hw..(ni + 1) * c * t * hw]);
                        }
                    }
                }
            }
            Op::BilinearUp2x { x } => {
                if !needs(tg, x) {
                    return;
                }
                let (n, c, h, w) = dims4("bilinear_upsample_2x", self.nodes[x].shape()).unwrap();
                let ty: Vec<(usize, usize, T)> = k::up2x_axis_taps(h).into_iter().map(|(a, b, f)| (a, b, T::of_f64(f))).collect();
                let tx: Vec<(usize, usize, T)> = k::up2x_axis_taps(w).into_iter().map(|(a, b, f)| (a, b, T::of_f64(f))).collect();
                let (oh, ow) = (2 * h, 2 * w);
                let dx = tg[x].as_mut().unwrap();
                for_each_row(dx, h * w, |plane, d_plane| {
                    let g_plane = &g[plane * oh * ow..(plane + 1) * oh * ow];
                    for oy in 0..oh {
                        let (y0, y1, fy) = ty[oy];
                        for ox in 0..ow {
                            let (x0, x1, fx) = tx[ox];
                            let gv = g_plane[oy * ow + ox];
                            let one = T::one();
                            d_plane[y0 * w + x0] = d_plane[y0 * w + x0] + gv * (one - fy) * (one - fx);
                            d_plane[y0 * w + x1] = d_plane[y0 * w + x1] + gv * (one - fy) * fx;
                            d_plane[y1 * w + x0] = d_plane[y1 * w + x0] + gv * fy * (one - fx);
                            d_plane[y1 * w + x1] = d_plane[y1 * w + x1] + gv * fy * fx;
                        }
                    }
                });
                let _ = (n, c);
            }
            Op::MatMul { a, b } => {
                let (m, kk) = (self.nodes[a].shape()[0], self.nodes[a].shape()[1]);
                let n = self.nodes[b].shape()[1];
                if needs(tg, a) {
                    k::matmul_bt_acc(g, self.nodes[b].data(), tg[a].as_mut().unwrap(), m, n, kk);
                }
                if needs(tg, b) {
                    let at = k::transpose(self.nodes[a].data(), m, kk);
                    k::matmul_acc(&at, g, tg[b].as_mut().unwrap(), kk, m, n);
                }
            }
            Op::MatMulBt { a, b } => {
                let (m, kk) = (self.nodes[a].shape()[0], self.nodes[a].shape()[1]);
                let n = self.nodes[b].shape()[0];
                if needs(tg, a) {
                    k::matmul_acc(g, self.nodes[b].data(), tg[a].as_mut().unwrap(), m, n, kk);
                }
                if needs(tg, b) {
                    let gt = k::transpose(g, m, n);
                    k::matmul_acc(&gt, self.nodes[a].data(), tg[b].as_mut().unwrap(), n, m, kk);
                }
            }
            Op::SoftmaxRows { x } => {
                if needs(tg, x) {
                    let s = self.nodes[node].data();
                    let sh = self.nodes[node].shape();
                    k::softmax_rows_backward(s, g, sh[0], sh[1], tg[x].as_mut().unwrap());
                }
            }
            Op::LeakyRelu { x, alpha } => {
                if needs(tg, x) {
                    let al = T::of_f64(alpha);
                    let xs = self.nodes[x].data();
                    let dx = tg[x].as_mut().unwrap();
                    for ((d, &xv), &gv) in dx.iter_mut().zip(xs).zip(g) {
                        // Subgradient at exactly 0 takes the positive branch.
                        *d = *d + if xv >= T::zero() { gv } else { al * gv };
                    }
                }
            }
            Op::Tanh { x } => {
                if needs(tg, x) {
                    let ys = self.nodes[node].data();
                    let dx = tg[x].as_mut().unwrap();
                    for ((d, &yv), &gv) in dx.iter_mut().zip(ys).zip(g) {
                        *d = *d + gv * (T::one() - yv * yv);
                    }
                }
            }
            Op::LayerNormCh { x, gain, bias, eps } => {
                let (n, c, h, w) = dims4("layer_norm_channels", self.nodes[x].shape()).unwrap();
                let hw = h * w;
                let xs = self.nodes[x].data();
                let gs = self.nodes[gain].data();
                let (mu, inv) = ln_stats(xs, n, c, hw, T::of_f64(eps));
                if needs(tg, bias) {
                    let db = tg[bias].as_mut().unwrap();
                    for plane in 0..n * c {
                        let ci = plane % c;
                        let mut s = T::zero();
                        for &gv in &g[plane * hw..(plane + 1) * hw] {
                            s = s + gv;
                        }
                        db[ci] = db[ci] + s;
                    }
                }
                if needs(tg, gain) {
                    let dg = tg[gain].as_mut().unwrap();
                    for plane in 0..n * c {
                        let ci = plane % c;
                        let ni = plane / c;
                        let src = &xs[plane * hw..(plane + 1) * hw];
                        let g_pl = &g[plane * hw..(plane + 1) * hw];
                        let mu_n = &mu[ni * hw..(ni + 1) * hw];
                        let inv_n = &inv[ni * hw..(ni + 1) * hw];
                        let mut s = T::zero();
                        for l in 0..hw {
                            s = s + g_pl[l] * ((src[l] - mu_n[l]) * inv_n[l]);
                        }
                        dg[ci] = dg[ci] + s;
                    }
                }
                if needs(tg, x) {
                    // Per-location sums of dxhat and dxhat*xhat.
                    let mut sum1 = vec![T::zero(); n * hw];
                    let mut sum2 = vec![T::zero(); n * hw];
                    for plane in 0..n * c {
                        let ci = plane % c;
                        let ni = plane / c;
                        let src = &xs[plane * hw..(plane + 1) * hw];
                        let g_pl = &g[plane * hw..(plane + 1) * hw];
                        let mu_n = &mu[ni * hw..(ni + 1) * hw];
                        let inv_n = &inv[ni * hw..(ni + 1) * hw];
                        let s1 = &mut sum1[ni * hw..(ni + 1) * hw];
                        let s2 = &mut sum2[ni * hw..(ni + 1) * hw];
                        for l in 0..hw {
                            let dxh = g_pl[l] * gs[ci];
                            s1[l] = s1[l] + dxh;
                            s2[l] = s2[l] + dxh * ((src[l] - mu_n[l]) * inv_n[l]);
                        }
                    }
                    let cf = T::of_usize(c);
                    let dx = tg[x].as_mut().unwrap();
                    for_each_row(dx, hw, |plane, d_pl| {
                        let ci = plane % c;
                        let ni = plane / c;
                        let src = &xs[plane * hw..(plane + 1) * hw];
                        let g_pl = &g[plane * hw..(plane + 1) * hw];
                        let mu_n = &mu[ni * hw..(ni + 1) * hw];
                        let inv_n = &inv[ni * hw..(ni + 1) * hw];
                        let s1 = &sum1[ni * hw..(ni + 1) * hw];
                        let s2 = &sum2[ni * hw..(ni + 1) * hw];
                        for l in 0..hw {
                            let xhat = (src[l] - mu_n[l]) * inv_n[l];
                            let dxh = g_pl[l] * gs[ci];
                            d_pl[l] = d_pl[l] + inv_n[l] / cf * (cf * dxh - s1[l] - xhat * s2[l]);
                        }
                    });
                }
            }
            Op::Add { a, b } => {
                if needs(tg, a) {
                    k::axpy(T::one(), g, tg[a].as_mut().unwrap());
                }
                if needs(tg, b) {
                    k::axpy(T::one(), g, tg[b].as_mut().unwrap());
                }
            }
            Op::Affine { x, mul, .. } => {
                if needs(tg, x) {
                    k::axpy(T::of_f64(mul), g, tg[x].as_mut().unwrap());
                }
            }
            Op::PatchesToRows { x, p } | Op::MapToPatchBatch { x, p } => {
                if needs(tg, x) {
                    let (c, h, w) = dims_chw("patches", self.nodes[x].shape()).unwrap();
                    add_patches_to_map(g, (c, h, w), p, tg[x].as_mut().unwrap());
                }
            }
            Op::RowsToMap { x, p, c, h, w } => {
                if needs(tg, x) {
                    add_map_to_patches(g, (c, h, w), p, tg[x].as_mut().unwrap());
                }
            }
            Op::PatchBatchToMap { x, p } => {
                if needs(tg, x) {
                    let (c, h, w) = dims_chw("patch_batch_to_map", self.nodes[node].shape()).unwrap();
                    add_map_to_patches(g, (c, h, w), p, tg[x].as_mut().unwrap());
                }
            }
            Op::ConcatCh { a, b } => {
                let la = self.nodes[a].len();
                if needs(tg, a) {
                    k::axpy(T::one(), &g[..la], tg[a].as_mut().unwrap());
                }
                if needs(tg, b) {
                    k::axpy(T::one(), &g[la..], tg[b].as_mut().unwrap());
                }
            }
            Op::StackTemporal { ref xs } => {
                let (_, c, h, w) = dims4("stack_temporal", self.nodes[xs[0]].shape()).unwrap();
                let bsz = xs.len();
                let hw = h * w;
                for (bi, &x) in xs.iter().enumerate() {
                    if !needs(tg, x) {
                        continue;
                    }
                    let dx = tg[x].as_mut().unwrap();
                    for ci in 0..c {
                        k::axpy(T::one(), &g[(ci * bsz + bi) * hw..(ci * bsz + bi + 1) * hw], &mut dx[ci * hw..(ci + 1) * hw]);
                    }
                }
            }
            Op::Gram { x } => {
                if needs(tg, x) {
                    let (c, h, w) = dims_chw("gram", self.nodes[x].shape()).unwrap();
                    let hw = h * w;
                    let s = T::of_f64(1.0 / (c * hw) as f64);
                    // dF = (dG + dGᵀ)·F / (C·H·W)
                    let mut m = vec![T::zero(); c * c];
                    for i in 0..c {
                        for j in 0..c {
                            m[i * c + j] = (g[i * c + j] + g[j * c + i]) * s;
                        }
                    }
                    k::matmul_acc(&m, self.nodes[x].data(), tg[x].as_mut().unwrap(), c, c, hw);
                }
            }
            Op::MeanAbsDiff { a, b } => {
                let n = self.nodes[a].len();
                let gv = g[0] / T::of_usize(n);
                let (xa, xb) = (self.nodes[a].data(), self.nodes[b].data());
                if needs(tg, a) {
                    let da = tg[a].as_mut().unwrap();
                    for i in 0..n {
                        da[i] = da[i] + gv * sign(xa[i] - xb[i]);
                    }
                }
                if needs(tg, b) {
                    let db = tg[b].as_mut().unwrap();
                    for i in 0..n {
                        db[i] = db[i] - gv * sign(xa[i] - xb[i]);
                    }
                }
            }
            Op::Mean { x } => {
                if needs(tg, x) {
                    let n = self.nodes[x].len();
                    let gv = g[0] / T::of_usize(n);
                    for d in tg[x].as_mut().unwrap().iter_mut() {
                        *d = *d + gv;
                    }
                }
            }
            Op::Sum { x } => {
                if needs(tg, x) {
                    let gv = g[0];
                    for d in tg[x].as_mut().unwrap().iter_mut() {
                        *d = *d + gv;
                    }
                }
            }
        }
    }
}

fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn check_partition(op: &'static str, h: usize, w: usize, p: usize) -> TensorResult<()> {
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(TensorError::InvalidArg { op, msg: format!("partition {p} does not divide extents {h}x{w}") });
    }
    Ok(())
}

/// Per-location channel mean and 1/sqrt(var+eps) over `[N,C,HW]`.
fn ln_stats<T: Scalar>(xs: &[T], n: usize, c: usize, hw: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let mut mu = vec![T::zero(); n * hw];
    let mut inv = vec![T::zero(); n * hw];
    let cf = T::of_usize(c);
    for ni in 0..n {
        let x_n = &xs[ni * c * hw..(ni + 1) * c * hw];
        let mu_n = &mut mu[ni * hw..(ni + 1) * hw];
        for ci in 0..c {
            for (m, &v) in mu_n.iter_mut().zip(&x_n[ci * hw..(ci + 1) * hw]) {
                *m = *m + v;
            }
        }
        for m in mu_n.iter_mut() {
            *m = *m / cf;
        }
        let mu_n = &mu[ni * hw..(ni + 1) * hw];
        let inv_n = &mut inv[ni * hw..(ni + 1) * hw];
        for ci in 0..c {
            for (l, &v) in x_n[ci * hw..(ci + 1) * hw].iter().enumerate() {
                let d = v - mu_n[l];
                inv_n[l] = inv_n[l] + d * d;
            }
        }
        for iv in inv_n.iter_mut() {
            *iv = T::one() / (*iv / cf + eps).sqrt();
        }
    }
    (mu, inv)
}

/// Copy `[C,H,W]` map data into `p*p` flattened row-major patches. Patch k
/// covers rows `[ (k/p)·H/p .. )` and cols `[ (k%p)·W/p .. )`; within a patch
/// elements are laid out (c, y, x) row-major.
fn copy_map_to_patches<T: Scalar>(map: &[T], (c, h, w): (usize, usize, usize), p: usize, out: &mut [T]) {
    let (ph, pw) = (h / p, w / p);
    let d = c * ph * pw;
    for_each_row(out, d, |kk, row| {
        let (pr, pc) = (kk / p, kk % p);
        for ci in 0..c {
            for y in 0..ph {
                let src = ci * h * w + (pr * ph + y) * w + pc * pw;
                let dst = (ci * ph + y) * pw;
                row[dst..dst + pw].copy_from_slice(&map[src..src + pw]);
            }
        }
    });
}

/// Inverse copy of [`copy_map_to_patches`].
fn copy_patches_to_map<T: Scalar>(rows: &[T], (c, h, w): (usize, usize, usize), p: usize, map: &mut [T]) {
    let (ph, pw) = (h / p, w / p);
    let d = c * ph * pw;
    for kk in 0..p * p {
        let (pr, pc) = (kk / p, kk % p);
        let row = &rows[kk * d..(kk + 1) * d];
        for ci in 0..c {
            for y in 0..ph {
                let dst = ci * h * w + (pr * ph + y) * w + pc * pw;
                let src = (ci * ph + y) * pw;
                map[dst..dst + pw].copy_from_slice(&row[src..src + pw]);
            }
        }
    }
}

/// `map += patches` (backward of map→patches).
fn add_patches_to_map<T: Scalar>(rows: &[T], (c, h, w): (usize, usize, usize), p: usize, map: &mut [T]) {
    let (ph, pw) = (h / p, w / p);
    let d = c * ph * pw;
    for kk in 0..p * p {
        let (pr, pc) = (kk / p, kk % p);
        let row = &rows[kk * d..(kk + 1) * d];
        for ci in 0..c {
            for y in 0..ph {
                let dst = ci * h * w + (pr * ph + y) * w + pc * pw;
                let src = (ci * ph + y) * pw;
                k::axpy(T::one(), &row[src..src + pw], &mut map[dst..dst + pw]);
            }
        }
    }
}

/// `patches += map` (backward of patches→map).
fn add_map_to_patches<T: Scalar>(map: &[T], (c, h, w): (usize, usize, usize), p: usize, rows: &mut [T]) {
    let (ph, pw) = (h / p, w / p);
    let d = c * ph * pw;
    for kk in 0..p * p {
        let (pr, pc) = (kk / p, kk % p);
        let row = &mut rows[kk * d..(kk + 1) * d];
        for ci in 0..c {
            for y in 0..ph {
                let src = ci * h * w + (pr * ph + y) * w + pc * pw;
                let dst = (ci * ph + y) * pw;
                k::axpy(T::one(), &map[src..src + pw], &mut row[dst..dst + pw]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::fd_check;
    use crate::rng::SplitMix64;

    fn rand64(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = SplitMix64::new(seed);
        Tensor::uniform(shape, -1.0, 1.0, &mut rng)
    }

    #[test]
    fn conv2d_identity_kernel_passes_input_through() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(rand64(&[1, 3, 5, 5], 1), false);
        // 1x1 identity: w[o][i] = delta(o, i)
        let mut wdat = vec![0.0; 9];
        for i in 0..3 {
            wdat[i * 3 + i] = 1.0;
        }
        let w = g.leaf(Tensor::new(vec![3, 3, 1, 1], wdat).unwrap(), false);
        let b = g.leaf(Tensor::zeros(&[3]), false);
        let y = g.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.shape(y), g.shape(x));
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn conv2d_strided_shape_matches_table() {
        let mut g: Graph<f32> = Graph::new();
        let x = g.leaf(Tensor::zeros(&[1, 16, 128, 128]), false);
        let w = g.leaf(Tensor::zeros(&[64, 16, 4, 4]), false);
        let b = g.leaf(Tensor::zeros(&[64]), false);
        let y = g.conv2d(x, w, b, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 64, 64, 64]);
    }

    #[test]
    fn conv2d_rejects_channel_mismatch_and_zero_output() {
        let mut g: Graph<f32> = Graph::new();
        let x = g.leaf(Tensor::zeros(&[1, 3, 5, 5]), false);
        let w = g.leaf(Tensor::zeros(&[2, 4, 3, 3]), false);
        let b = g.leaf(Tensor::zeros(&[2]), false);
        assert!(matches!(g.conv2d(x, w, b, 1, 1), Err(TensorError::ShapeMismatch { .. })));
        let wbig = g.leaf(Tensor::zeros(&[2, 3, 7, 7]), false);
        let b2 = g.leaf(Tensor::zeros(&[2]), false);
        assert!(matches!(g.conv2d(x, wbig, b2, 1, 0), Err(TensorError::InvalidArg { .. })));
    }

    #[test]
    fn conv2d_gradient_matches_finite_differences() {
        let worst = fd_check(
            &|g: &mut Graph<f64>, ids| {
                let y = g.conv2d(ids[0], ids[1], ids[2], 1, 1).unwrap();
                g.sum(y).unwrap()
            },
            &[rand64(&[1, 2, 6, 6], 11), rand64(&[2, 2, 3, 3], 12), rand64(&[2], 13)],
        );
        assert!(worst < 1e-5, "worst rel err {worst}");
    }

    #[test]
    fn conv3d_averaging_kernel_on_constant_field() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(Tensor::full(&[1, 1, 4, 6, 6], 1.0), false);
        let w = g.leaf(Tensor::full(&[1, 1, 3, 3, 3], 1.0 / 27.0), false);
        let b = g.leaf(Tensor::zeros(&[1]), false);
        let y = g.conv3d(x, w, b).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 4, 6, 6]);
        // Interior voxel (t=1..3, y=1..5, x=1..5) sees the full kernel.
        let v = g.value(y)[(1 * 6 + 2) * 6 + 2];
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn conv3d_gradient_matches_finite_differences() {
        let worst = fd_check(
            &|g: &mut Graph<f64>, ids| {
                let y = g.conv3d(ids[0], ids[1], ids[2]).unwrap();
                g.sum(y).unwrap()
            },
            &[rand64(&[1, 1, 3, 4, 4], 21), rand64(&[1, 1, 3, 3, 3], 22), rand64(&[1], 23)],
        );
        assert!(worst < 1e-5, "worst rel err {worst}");
    }

    #[test]
    fn bilinear_preserves_constant_and_doubles_extent() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(Tensor::full(&[1, 1, 32, 32], 0.7), false);
        let y = g.bilinear_up2x(x).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 64, 64]);
        assert!(g.value(y).iter().all(|v| (v - 0.7).abs() < 1e-12));
        let small = g.leaf(Tensor::zeros(&[1, 1, 1, 4]), false);
        assert!(g.bilinear_up2x(small).is_err());
    }

    #[test]
    fn bilinear_ramp_matches_scalar_interpolation_oracle() {
        // Independent oracle: interpolate [0,1,2,3] at positions i/2 - 0.25,
        // clamped at the borders.
        let ramp = [0.0, 1.0, 2.0, 3.0];
        let oracle: Vec<f64> = (0..8)
            .map(|i| {
                let s = (i as f64 / 2.0 - 0.25).clamp(0.0, 3.0);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(3);
                ramp[i0] * (1.0 - (s - i0 as f64)) + ramp[i1] * (s - i0 as f64)
            })
            .collect();
        let mut g: Graph<f64> = Graph::new();
        let mut data = Vec::new();
        for _ in 0..2 {
            data.extend_from_slice(&ramp);
        }
        let x = g.leaf(Tensor::new(vec![1, 1, 2, 4], data).unwrap(), false);
        let y = g.bilinear_up2x(x).unwrap();
        // Middle output rows interpolate the two identical input rows, so
        // every output row equals the 1D oracle.
        for row in 0..4 {
            for col in 0..8 {
                let got = g.value(y)[row * 8 + col];
                assert!((got - oracle[col]).abs() < 1e-12, "row {row} col {col}: {got} vs {}", oracle[col]);
            }
        }
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), false);
        let eye = g.leaf(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(), false);
        let ai = g.matmul(a, eye).unwrap();
        assert_eq!(g.value(ai), g.value(a));
        let b = g.leaf(Tensor::new(vec![2, 1], vec![5.0, 6.0]).unwrap(), false);
        let ab = g.matmul(a, b).unwrap();
        assert_eq!(g.value(ab), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_grad_is_ones_bt() {
        // d sum(a·b) / da = ones · bᵀ
        let mut g: Graph<f64> = Graph::new();
        let a = g.leaf(rand64(&[3, 4], 31), true);
        let b = g.leaf(rand64(&[4, 2], 32), true);
        let c = g.matmul(a, b).unwrap();
        let s = g.sum(c).unwrap();
        g.backward(s).unwrap();
        let bv = g.value(b).to_vec();
        let ga = g.grad(a).unwrap();
        for i in 0..3 {
            for p in 0..4 {
                let expect: f64 = (0..2).map(|j| bv[p * 2 + j]).sum();
                assert!((ga[i * 4 + p] - expect).abs() < 1e-12);
            }
        }
        let worst = fd_check(
            &|g: &mut Graph<f64>, ids| {
                let c = g.matmul(ids[0], ids[1]).unwrap();
                g.sum(c).unwrap()
            },
            &[rand64(&[3, 4], 31), rand64(&[4, 2], 32)],
        );
        assert!(worst < 1e-5);
    }

    #[test]
    fn softmax_uniform_and_closed_form() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(Tensor::full(&[2, 5], 3.25), false);
        let s = g.softmax_rows(x).unwrap();
        assert!(g.value(s).iter().all(|v| (v - 0.2).abs() < 1e-12));
        let y = g.leaf(Tensor::new(vec![1, 2], vec![0.0, 3.0f64.ln()]).unwrap(), false);
        let sy = g.softmax_rows(y).unwrap();
        assert!((g.value(sy)[0] - 0.25).abs() < 1e-12);
        assert!((g.value(sy)[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one_for_bounded_inputs() {
        let mut rng = SplitMix64::new(77);
        for _ in 0..50 {
            let mut g: Graph<f64> = Graph::new();
            let x = g.leaf(Tensor::uniform(&[8, 16], -50.0, 50.0, &mut rng), false);
            let s = g.softmax_rows(x).unwrap();
            for row in g.value(s).chunks(16) {
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-6);
                assert!(row.iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(Tensor::new(vec![1, 2], vec![f64::NAN, 0.0]).unwrap(), false);
        assert!(matches!(g.softmax_rows(x), Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn pointwise_values_and_gradients() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap(), false);
        let lr = g.leaky_relu(x, 0.2).unwrap();
        assert_eq!(g.value(lr), &[-0.2, 0.0, 2.0]);
        let th = g.tanh(x).unwrap();
        assert_eq!(g.value(th)[1], 0.0);
        let worst = fd_check(
            &|g: &mut Graph<f64>, ids| {
                let y = g.leaky_relu(ids[0], 0.2).unwrap();
                let z = g.tanh(y).unwrap();
                g.sum(z).unwrap()
            },
            &[Tensor::new(vec![4], vec![-1.4, -0.6, 0.8, 1.7]).unwrap()],
        );
        assert!(worst < 1e-6, "worst {worst}");
    }

    #[test]
    fn layer_norm_constant_vector_and_closed_form() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(Tensor::full(&[1, 4, 2, 2], 0.37), false);
        let gain = g.leaf(Tensor::full(&[4], 1.0), false);
        let bias = g.leaf(Tensor::zeros(&[4]), false);
        let y = g.layer_norm_channels(x, gain, bias, 1e-5).unwrap();
        assert!(g.value(y).iter().all(|v| v.abs() < 1e-9));

        // Channel vector [1,3] at each location -> [-1, 1] as eps -> 0.
        let mut g2: Graph<f64> = Graph::new();
        let x2 = g2.leaf(Tensor::new(vec![1, 2, 1, 1], vec![1.0, 3.0]).unwrap(), false);
        let gain2 = g2.leaf(Tensor::full(&[2], 1.0), false);
        let bias2 = g2.leaf(Tensor::zeros(&[2]), false);
        let y2 = g2.layer_norm_channels(x2, gain2, bias2, 1e-12).unwrap();
        assert!((g2.value(y2)[0] + 1.0).abs() < 1e-6);
        assert!((g2.value(y2)[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_gradient_matches_finite_differences() {
        let worst = fd_check(
            &|g: &mut Graph<f64>, ids| {
                let y = g.layer_norm_channels(ids[0], ids[1], ids[2], 1e-5).unwrap();
                let z = g.tanh(y).unwrap();
                g.sum(z).unwrap()
            },
            &[rand64(&[1, 4, 3, 3], 41), rand64(&[4], 42), rand64(&[4], 43)],
        );
        assert!(worst < 1e-5, "worst {worst}");
    }

    #[test]
    fn backward_square_and_disconnected_leaf() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(Tensor::new(vec![1, 1], vec![3.0]).unwrap(), true);
        let unused = g.leaf(Tensor::scalar(5.0), true);
        // x^2 via x * x = matmul of 1x1
        let x2 = g.matmul(x, x).unwrap();
        let s = g.sum(x2).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
        assert_eq!(g.grad(unused).unwrap(), &[0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(rand64(&[2, 2], 51), true);
        let y = g.tanh(x).unwrap();
        assert!(matches!(g.backward(y), Err(TensorError::NonScalarBackward { .. })));
    }

    #[test]
    fn backward_composite_conv_relu_sum() {
        let worst = fd_check(
            &|g: &mut Graph<f64>, ids| {
                let y = g.conv2d(ids[0], ids[1], ids[2], 1, 1).unwrap();
                let z = g.leaky_relu(y, 0.2).unwrap();
                g.sum(z).unwrap()
            },
            &[rand64(&[1, 1, 4, 4], 61), rand64(&[2, 1, 3, 3], 62), rand64(&[2], 63)],
        );
        assert!(worst < 1e-5, "worst {worst}");
    }

    #[test]
    fn backward_accumulates_and_is_linear_over_paths() {
        // Accumulation: two backward calls double the gradient.
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0), true);
        let y = g.affine(x, 3.0, 0.0).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);

        // Linearity: grad of (f + h) equals grad f + grad h.
        let build_both = |g: &mut Graph<f64>, x: TensorId| {
            let f = g.affine(x, 2.0, 0.0).unwrap();
            let h = g.tanh(x).unwrap();
            (g.sum(f).unwrap(), g.sum(h).unwrap())
        };
        let x0 = Tensor::new(vec![3], vec![0.3, -0.8, 1.2]).unwrap();

        let mut ga: Graph<f64> = Graph::new();
        let xa = ga.leaf(x0.clone(), true);
        let (fa, ha) = build_both(&mut ga, xa);
        let total = ga.add(fa, ha).unwrap();
        ga.backward(total).unwrap();
        let grad_sum = ga.grad(xa).unwrap().to_vec();

        let mut gb: Graph<f64> = Graph::new();
        let xb = gb.leaf(x0.clone(), true);
        let (fb, hb) = build_both(&mut gb, xb);
        gb.backward(fb).unwrap();
        let g1 = gb.grad(xb).unwrap().to_vec();
        gb.zero_grads();
        let xb2 = gb.leaf(x0, true);
        let (_, hb2) = build_both(&mut gb, xb2);
        let _ = hb;
        gb.backward(hb2).unwrap();
        let g2 = gb.grad(xb2).unwrap().to_vec();

        for i in 0..3 {
            assert!((grad_sum[i] - (g1[i] + g2[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn patches_round_trip_is_bit_exact() {
        let mut rng = SplitMix64::new(71);
        for &p in &[2usize, 4, 8] {
            let t = Tensor::<f64>::uniform(&[1, 3, 16, 16], -1.0, 1.0, &mut rng);
            let mut g: Graph<f64> = Graph::new();
            let x = g.leaf(t.clone(), false);
            let rows = g.patches_to_rows(x, p).unwrap();
            let back = g.rows_to_map(rows, p, (3, 16, 16)).unwrap();
            assert_eq!(g.value(back), t.data());
        }
    }

    #[test]
    fn gram_normalization_single_channel() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(Tensor::full(&[1, 4, 4], 1.0), false);
        let gm = g.gram(x).unwrap();
        assert_eq!(g.shape(gm), &[1, 1]);
        assert!((g.value(gm)[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(Tensor::scalar(1e308), false);
        let y = g.affine(x, 1e308, 0.0); // overflows to inf
        assert!(matches!(y, Err(TensorError::NonFinite { .. })));
    }
}
