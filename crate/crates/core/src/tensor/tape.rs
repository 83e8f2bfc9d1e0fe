//! Reverse-mode autodiff tape.
//!
//! Operations append nodes to the tape; each node owns its forward value and
//! an optional gradient buffer. The tape is topological by construction:
//! every operation's inputs precede it. One backward pass per tape.
//!
//! All kernels are pure: identical inputs yield bit-identical outputs.

use super::{Scalar, Tensor, TensorError, NEG_LARGE};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

impl TensorId {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<S: Scalar> {
    Leaf,
    Matmul {
        a: TensorId,
        b: TensorId,
    },
    Transpose {
        a: TensorId,
    },
    Reshape {
        a: TensorId,
    },
    Add {
        a: TensorId,
        b: TensorId,
    },
    AddRowBias {
        a: TensorId,
        bias: TensorId,
    },
    Sub {
        a: TensorId,
        b: TensorId,
    },
    Mul {
        a: TensorId,
        b: TensorId,
    },
    Scale {
        a: TensorId,
        factor: f64,
    },
    Gelu {
        a: TensorId,
    },
    SoftmaxLastDim {
        a: TensorId,
        mask: Option<TensorId>,
    },
    LayerNorm {
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
    ChannelNorm {
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
    Conv1x1 {
        x: TensorId,
        w: TensorId,
        b: TensorId,
    },
    Deconv {
        x: TensorId,
        w: TensorId,
        b: TensorId,
    },
    MaxPool {
        x: TensorId,
        argmax: Vec<usize>,
    },
    ExtractPatches {
        image: TensorId,
        patch: usize,
    },
    ConcatRows {
        parts: Vec<TensorId>,
    },
    ConcatCols {
        parts: Vec<TensorId>,
    },
    SliceRows {
        a: TensorId,
        start: usize,
    },
    SliceCols {
        a: TensorId,
        start: usize,
    },
    Sum {
        a: TensorId,
    },
}

impl<S: Scalar> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul { .. } => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::Reshape { .. } => "reshape",
            Op::Add { .. } => "add",
            Op::AddRowBias { .. } => "add_row_bias",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Gelu { .. } => "gelu",
            Op::SoftmaxLastDim { .. } => "softmax_lastdim",
            Op::LayerNorm { .. } => "layer_norm",
            Op::ChannelNorm { .. } => "channel_norm",
            Op::Conv1x1 { .. } => "conv2d_1x1",
            Op::Deconv { .. } => "deconv2d",
            Op::MaxPool { .. } => "max_pool2d",
            Op::ExtractPatches { .. } => "extract_patches",
            Op::ConcatRows { .. } => "concat_rows",
            Op::ConcatCols { .. } => "concat_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::Sum { .. } => "sum",
        }
    }
}

struct Node<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
    grad: Option<Vec<S>>,
    requires_grad: bool,
    op: Op<S>,
    label: Option<String>,
}

/// Recording tape. Single-owner: record and run backward from one logical
/// thread of control; distinct tapes are independent.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    consumed: bool,
    macs: u128,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
            macs: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulate operations executed by matmul/conv/deconv kernels
    /// so far. Used as the instrumented oracle for the analytic FLOP model.
    pub fn mac_count(&self) -> u128 {
        self.macs
    }

    /// Register a leaf tensor. Data is copied onto the tape.
    pub fn input(&mut self, t: &Tensor<S>, requires_grad: bool) -> TensorId {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            requires_grad,
            Op::Leaf,
        )
    }

    /// Register a non-differentiable constant leaf.
    pub fn constant(&mut self, t: &Tensor<S>) -> TensorId {
        self.input(t, false)
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: TensorId) -> &[S] {
        &self.nodes[id.0].data
    }

    pub fn to_tensor(&self, id: TensorId) -> Tensor<S> {
        Tensor::new(self.nodes[id.0].shape.clone(), self.nodes[id.0].data.clone())
            .expect("tape node is internally consistent")
    }

    /// Gradient of a node, populated by [`Tape::backward`].
    pub fn grad(&self, id: TensorId) -> Option<&[S]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Attach a diagnostic label used in non-finite reports.
    pub fn label(&mut self, id: TensorId, label: impl Into<String>) {
        self.nodes[id.0].label = Some(label.into());
    }

    /// First node holding a NaN/Inf value, if any, with a human-readable name.
    pub fn first_nonfinite(&self) -> Option<(TensorId, String)> {
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.data.iter().all(|v| v.is_finite()) {
                let name = match &node.label {
                    Some(l) => format!("{l} (node {i}, op {})", node.op.name()),
                    None => format!("node {i} (op {})", node.op.name()),
                };
                return Some((TensorId(i), name));
            }
        }
        None
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<S>, requires_grad: bool, op: Op<S>) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node {
            shape,
            data,
            grad: None,
            requires_grad,
            op,
            label: None,
        });
        id
    }

    fn any_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    // ── Forward kernels ──────────────────────────────────────────────

    /// C[i,j] = sum_p A[i,p] * B[p,j]. 2D only.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (m, k) = dims2(self, a, "matmul")?;
        let (k2, n) = dims2(self, b, "matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out = matmul_raw(self.data(a), self.data(b), m, k, n);
        self.macs += (m * k * n) as u128;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(vec![m, n], out, rg, Op::Matmul { a, b }))
    }

    /// 2D transpose.
    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let (m, n) = dims2(self, a, "transpose")?;
        let out = transpose_raw(self.data(a), m, n);
        let rg = self.any_grad(&[a]);
        Ok(self.push(vec![n, m], out, rg, Op::Transpose { a }))
    }

    /// Reinterpret the buffer under a new shape with equal element count.
    pub fn reshape(&mut self, a: TensorId, shape: &[usize]) -> Result<TensorId, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != self.data(a).len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = self.data(a).to_vec();
        let rg = self.any_grad(&[a]);
        Ok(self.push(shape.to_vec(), out, rg, Op::Reshape { a }))
    }

    /// Elementwise sum; shapes must match exactly.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.zip_op(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    /// Elementwise difference; shapes must match exactly.
    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.zip_op(a, b, "sub", |x, y| x - y, Op::Sub { a, b })
    }

    /// Hadamard product; shapes must match exactly.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.zip_op(a, b, "mul", |x, y| x * y, Op::Mul { a, b })
    }

    fn zip_op(
        &mut self,
        a: TensorId,
        b: TensorId,
        name: &'static str,
        f: impl Fn(S, S) -> S,
        op: Op<S>,
    ) -> Result<TensorId, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: name,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out: Vec<S> = self
            .data(a)
            .iter()
            .zip(self.data(b).iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(shape, out, rg, op))
    }

    /// Add a bias vector over the last dimension: X[..., C] + bias[C].
    pub fn add_row_bias(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId, TensorError> {
        let ashape = self.shape(a).to_vec();
        let c = *ashape.last().ok_or(TensorError::BadRank {
            op: "add_row_bias",
            expected: "rank >= 1",
            got: ashape.clone(),
        })?;
        if self.shape(bias) != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row_bias",
                lhs: ashape,
                rhs: self.shape(bias).to_vec(),
            });
        }
        let bvals = self.data(bias).to_vec();
        let out: Vec<S> = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bvals[i % c])
            .collect();
        let rg = self.any_grad(&[a, bias]);
        Ok(self.push(ashape, out, rg, Op::AddRowBias { a, bias }))
    }

    /// Multiply by a compile-time constant factor.
    pub fn scale(&mut self, a: TensorId, factor: f64) -> TensorId {
        let f = S::from_f64(factor);
        let out: Vec<S> = self.data(a).iter().map(|&x| x * f).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a]);
        self.push(shape, out, rg, Op::Scale { a, factor })
    }

    /// GELU with the tanh approximation:
    /// 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        let out: Vec<S> = self.data(a).iter().map(|&x| gelu_scalar(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a]);
        self.push(shape, out, rg, Op::Gelu { a })
    }

    /// Row-wise softmax over the last dimension, with an optional additive
    /// mask of identical shape. Mask entries at [`NEG_LARGE`] suppress their
    /// position entirely; a row whose mask suppresses every entry is a
    /// contract violation reported as [`TensorError::FullyMaskedRow`].
    pub fn softmax_lastdim(
        &mut self,
        a: TensorId,
        mask: Option<TensorId>,
    ) -> Result<TensorId, TensorError> {
        let shape = self.shape(a).to_vec();
        let n = *shape.last().ok_or(TensorError::BadRank {
            op: "softmax_lastdim",
            expected: "rank >= 1",
            got: shape.clone(),
        })?;
        if let Some(m) = mask {
            if self.shape(m) != shape.as_slice() {
                return Err(TensorError::ShapeMismatch {
                    op: "softmax_lastdim",
                    lhs: shape,
                    rhs: self.shape(m).to_vec(),
                });
            }
            let cutoff = S::from_f64(NEG_LARGE * 0.5);
            for (r, row) in self.data(m).chunks_exact(n).enumerate() {
                if row.iter().all(|&v| v <= cutoff) {
                    return Err(TensorError::FullyMaskedRow { row: r });
                }
            }
        }
        let rows = self.data(a).len() / n;
        let mut out = vec![S::zero(); rows * n];
        for r in 0..rows {
            let x = &self.data(a)[r * n..(r + 1) * n];
            let mrow = mask.map(|m| &self.data(m)[r * n..(r + 1) * n]);
            let mut shifted = vec![S::zero(); n];
            for j in 0..n {
                shifted[j] = x[j] + mrow.map_or(S::zero(), |mr| mr[j]);
            }
            let mut maxv = shifted[0];
            for &v in &shifted[1..] {
                if v > maxv {
                    maxv = v;
                }
            }
            let mut denom = S::zero();
            for v in shifted.iter_mut() {
                *v = (*v - maxv).exp();
                denom += *v;
            }
            for j in 0..n {
                out[r * n + j] = shifted[j] / denom;
            }
        }
        let rg = self.any_grad(&[a]) || mask.is_some_and(|m| self.nodes[m.0].requires_grad);
        Ok(self.push(shape, out, rg, Op::SoftmaxLastDim { a, mask }))
    }

    /// Layer normalization over the last dimension with per-feature affine:
    /// y = (x - mean) / sqrt(var + eps) * gain + bias.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f64,
    ) -> Result<TensorId, TensorError> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().ok_or(TensorError::BadRank {
            op: "layer_norm",
            expected: "rank >= 1",
            got: shape.clone(),
        })?;
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: shape,
                rhs: self.shape(gain).to_vec(),
            });
        }
        let rows = self.data(x).len() / c;
        let mut out = vec![S::zero(); rows * c];
        let mut xhat = vec![S::zero(); rows * c];
        let mut inv_std = vec![S::zero(); rows];
        for r in 0..rows {
            let xr = &self.data(x)[r * c..(r + 1) * c];
            let (istd, xh) = normalize_row(xr, eps);
            inv_std[r] = istd;
            for j in 0..c {
                xhat[r * c + j] = xh[j];
                out[r * c + j] = xh[j] * self.data(gain)[j] + self.data(bias)[j];
            }
        }
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(shape, out, rg, Op::LayerNorm { x, gain, bias, xhat, inv_std }))
    }

    /// Per-channel normalization of a C×h×w map over its spatial extent,
    /// with per-channel affine. Batch-free stand-in for decoder norms.
    pub fn channel_norm(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f64,
    ) -> Result<TensorId, TensorError> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 {
            return Err(TensorError::BadRank {
                op: "channel_norm",
                expected: "C x h x w",
                got: shape,
            });
        }
        let (c, hw) = (shape[0], shape[1] * shape[2]);
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "channel_norm",
                lhs: shape,
                rhs: self.shape(gain).to_vec(),
            });
        }
        let mut out = vec![S::zero(); c * hw];
        let mut xhat = vec![S::zero(); c * hw];
        let mut inv_std = vec![S::zero(); c];
        for ch in 0..c {
            let xr = &self.data(x)[ch * hw..(ch + 1) * hw];
            let (istd, xh) = normalize_row(xr, eps);
            inv_std[ch] = istd;
            let g = self.data(gain)[ch];
            let b = self.data(bias)[ch];
            for p in 0..hw {
                xhat[ch * hw + p] = xh[p];
                out[ch * hw + p] = xh[p] * g + b;
            }
        }
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(shape, out, rg, Op::ChannelNorm { x, gain, bias, xhat, inv_std }))
    }

    /// Per-pixel linear map: X[C_in,h,w] with W[C_out,C_in], b[C_out].
    pub fn conv2d_1x1(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: TensorId,
    ) -> Result<TensorId, TensorError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(TensorError::BadRank {
                op: "conv2d_1x1",
                expected: "C_in x h x w",
                got: xs,
            });
        }
        let (cin, h, wd) = (xs[0], xs[1], xs[2]);
        let (cout, cin2) = dims2(self, w, "conv2d_1x1")?;
        if cin != cin2 || self.shape(b) != [cout] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d_1x1",
                lhs: xs,
                rhs: self.shape(w).to_vec(),
            });
        }
        let hw = h * wd;
        let mut out = vec![S::zero(); cout * hw];
        for o in 0..cout {
            let bval = self.data(b)[o];
            for p in 0..hw {
                let mut acc = bval;
                for i in 0..cin {
                    acc += self.data(w)[o * cin + i] * self.data(x)[i * hw + p];
                }
                out[o * hw + p] = acc;
            }
        }
        self.macs += (cout * cin * hw) as u128;
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(vec![cout, h, wd], out, rg, Op::Conv1x1 { x, w, b }))
    }

    /// Transposed convolution with kernel 4, stride 2, padding 1, the
    /// standard exact-2x upsampling geometry. W is laid out
    /// [C_in, C_out, 4, 4]; output is [C_out, 2h, 2w].
    pub fn deconv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: TensorId,
    ) -> Result<TensorId, TensorError> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 {
            return Err(TensorError::BadRank {
                op: "deconv2d",
                expected: "C_in x h x w",
                got: xs,
            });
        }
        if ws.len() != 4 || ws[2] != DECONV_K || ws[3] != DECONV_K {
            return Err(TensorError::Geometry {
                op: "deconv2d",
                msg: format!("weight must be [C_in, C_out, 4, 4], got {ws:?}"),
            });
        }
        let (cin, h, wd) = (xs[0], xs[1], xs[2]);
        let cout = ws[1];
        if ws[0] != cin || self.shape(b) != [cout] {
            return Err(TensorError::ShapeMismatch {
                op: "deconv2d",
                lhs: xs,
                rhs: ws,
            });
        }
        let (oh, ow) = (2 * h, 2 * wd);
        let mut out = vec![S::zero(); cout * oh * ow];
        for (o, chunk) in out.chunks_exact_mut(oh * ow).enumerate() {
            let bval = self.data(b)[o];
            chunk.fill(bval);
        }
        for ci in 0..cin {
            for iy in 0..h {
                for ix in 0..wd {
                    let xv = self.data(x)[(ci * h + iy) * wd + ix];
                    for ky in 0..DECONV_K {
                        let oy = 2 * iy + ky;
                        if oy < 1 || oy > oh {
                            continue;
                        }
                        let oy = oy - 1;
                        for kx in 0..DECONV_K {
                            let ox = 2 * ix + kx;
                            if ox < 1 || ox > ow {
                                continue;
                            }
                            let ox = ox - 1;
                            for co in 0..cout {
                                let wv =
                                    self.data(w)[((ci * cout + co) * DECONV_K + ky) * DECONV_K + kx];
                                out[(co * oh + oy) * ow + ox] += xv * wv;
                            }
                        }
                    }
                }
            }
        }
        self.macs += deconv_macs(cin, cout, h, wd);
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(vec![cout, oh, ow], out, rg, Op::Deconv { x, w, b }))
    }

    /// Per-window maximum over non-overlapping factor×factor windows of an
    /// N×H×W stack. Ties resolve to the lowest flat index.
    pub fn max_pool2d(&mut self, x: TensorId, factor: usize) -> Result<TensorId, TensorError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(TensorError::BadRank {
                op: "max_pool2d",
                expected: "N x H x W",
                got: xs,
            });
        }
        let (n, h, w) = (xs[0], xs[1], xs[2]);
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(TensorError::Geometry {
                op: "max_pool2d",
                msg: format!("spatial dims {h}x{w} not divisible by factor {factor}"),
            });
        }
        let (oh, ow) = (h / factor, w / factor);
        let mut out = vec![S::zero(); n * oh * ow];
        let mut argmax = vec![0usize; n * oh * ow];
        for m in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = S::neg_infinity();
                    let mut best_idx = 0usize;
                    for dy in 0..factor {
                        for dx in 0..factor {
                            let idx = (m * h + oy * factor + dy) * w + ox * factor + dx;
                            let v = self.data(x)[idx];
                            if v > best {
                                best = v;
                                best_idx = idx;
                            }
                        }
                    }
                    out[(m * oh + oy) * ow + ox] = best;
                    argmax[(m * oh + oy) * ow + ox] = best_idx;
                }
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(vec![n, oh, ow], out, rg, Op::MaxPool { x, argmax }))
    }

    /// Cut a 3×H×W image into non-overlapping d×d patches and flatten each
    /// to a 3d² row, token index = y*(W/d) + x. A pure permutation.
    pub fn extract_patches(&mut self, image: TensorId, d: usize) -> Result<TensorId, TensorError> {
        let xs = self.shape(image).to_vec();
        if xs.len() != 3 || xs[0] != 3 {
            return Err(TensorError::BadRank {
                op: "extract_patches",
                expected: "3 x H x W",
                got: xs,
            });
        }
        let (hh, ww) = (xs[1], xs[2]);
        if d == 0 || hh % d != 0 || ww % d != 0 {
            return Err(TensorError::Geometry {
                op: "extract_patches",
                msg: format!("image {hh}x{ww} not divisible by patch {d}"),
            });
        }
        let (gh, gw) = (hh / d, ww / d);
        let dim = 3 * d * d;
        let mut out = vec![S::zero(); gh * gw * dim];
        for ty in 0..gh {
            for tx in 0..gw {
                let token = ty * gw + tx;
                for c in 0..3 {
                    for py in 0..d {
                        for px in 0..d {
                            let src = (c * hh + ty * d + py) * ww + tx * d + px;
                            out[token * dim + (c * d + py) * d + px] = self.data(image)[src];
                        }
                    }
                }
            }
        }
        let rg = self.any_grad(&[image]);
        Ok(self.push(
            vec![gh * gw, dim],
            out,
            rg,
            Op::ExtractPatches { image, patch: d },
        ))
    }

    /// Stack 2D blocks along axis 0. Column counts must agree.
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::Geometry {
                op: "concat_rows",
                msg: "empty part list".into(),
            });
        }
        let (_, cols) = dims2(self, parts[0], "concat_rows")?;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = dims2(self, p, "concat_rows")?;
            if c != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * cols);
        for &p in parts {
            out.extend_from_slice(self.data(p));
        }
        let rg = self.any_grad(parts);
        Ok(self.push(
            vec![rows, cols],
            out,
            rg,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Stack 2D blocks along axis 1. Row counts must agree.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::Geometry {
                op: "concat_cols",
                msg: "empty part list".into(),
            });
        }
        let (rows, _) = dims2(self, parts[0], "concat_cols")?;
        let mut cols = 0;
        for &p in parts {
            let (r, c) = dims2(self, p, "concat_cols")?;
            if r != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            cols += c;
        }
        let mut out = vec![S::zero(); rows * cols];
        let mut offset = 0;
        for &p in parts {
            let (_, c) = dims2(self, p, "concat_cols")?;
            for r in 0..rows {
                out[r * cols + offset..r * cols + offset + c]
                    .copy_from_slice(&self.data(p)[r * c..(r + 1) * c]);
            }
            offset += c;
        }
        let rg = self.any_grad(parts);
        Ok(self.push(
            vec![rows, cols],
            out,
            rg,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Contiguous row range of a 2D tensor.
    pub fn slice_rows(
        &mut self,
        a: TensorId,
        start: usize,
        len: usize,
    ) -> Result<TensorId, TensorError> {
        let (rows, cols) = dims2(self, a, "slice_rows")?;
        if start + len > rows || len == 0 {
            return Err(TensorError::Geometry {
                op: "slice_rows",
                msg: format!("range {start}..{} out of {rows} rows", start + len),
            });
        }
        let out = self.data(a)[start * cols..(start + len) * cols].to_vec();
        let rg = self.any_grad(&[a]);
        Ok(self.push(vec![len, cols], out, rg, Op::SliceRows { a, start }))
    }

    /// Contiguous column range of a 2D tensor.
    pub fn slice_cols(
        &mut self,
        a: TensorId,
        start: usize,
        len: usize,
    ) -> Result<TensorId, TensorError> {
        let (rows, cols) = dims2(self, a, "slice_cols")?;
        if start + len > cols || len == 0 {
            return Err(TensorError::Geometry {
                op: "slice_cols",
                msg: format!("range {start}..{} out of {cols} cols", start + len),
            });
        }
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&self.data(a)[r * cols + start..r * cols + start + len]);
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(vec![rows, len], out, rg, Op::SliceCols { a, start }))
    }

    /// Full reduction to a scalar node of shape [1].
    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let mut acc = S::zero();
        for &v in self.data(a) {
            acc += v;
        }
        let rg = self.any_grad(&[a]);
        self.push(vec![1], vec![acc], rg, Op::Sum { a })
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Accumulates gradients into every
    /// `requires_grad` node reachable from the loss. One pass per tape.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), TensorError> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        if self.nodes[loss.0].data.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.nodes[loss.0].shape.clone(),
            });
        }
        self.consumed = true;
        self.nodes[loss.0].grad = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            self.propagate(i, &g);
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, target: TensorId, contrib: Vec<S>) {
        let node = &mut self.nodes[target.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contrib) {
                    *gi += ci;
                }
            }
            None => node.grad = Some(contrib),
        }
    }

    fn wants_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    #[allow(clippy::too_many_lines)]
    fn propagate(&mut self, i: usize, g: &[S]) {
        // Read-then-write: contributions are computed into fresh buffers
        // before accumulation so an op may consume the same input twice.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.wants_grad(*a) {
                    let bt = transpose_raw(self.data(*b), k, n);
                    let da = matmul_raw(g, &bt, m, n, k);
                    self.accumulate(*a, da);
                }
                if self.wants_grad(*b) {
                    let at = transpose_raw(self.data(*a), m, k);
                    let db = matmul_raw(&at, g, k, m, n);
                    self.accumulate(*b, db);
                }
            }
            Op::Transpose { a } => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                self.accumulate(*a, transpose_raw(g, n, m));
            }
            Op::Reshape { a } => {
                self.accumulate(*a, g.to_vec());
            }
            Op::Add { a, b } => {
                if self.wants_grad(*a) {
                    self.accumulate(*a, g.to_vec());
                }
                if self.wants_grad(*b) {
                    self.accumulate(*b, g.to_vec());
                }
            }
            Op::AddRowBias { a, bias } => {
                if self.wants_grad(*a) {
                    self.accumulate(*a, g.to_vec());
                }
                if self.wants_grad(*bias) {
                    let c = self.shape(*bias)[0];
                    let mut db = vec![S::zero(); c];
                    for (j, &gv) in g.iter().enumerate() {
                        db[j % c] += gv;
                    }
                    self.accumulate(*bias, db);
                }
            }
            Op::Sub { a, b } => {
                if self.wants_grad(*a) {
                    self.accumulate(*a, g.to_vec());
                }
                if self.wants_grad(*b) {
                    self.accumulate(*b, g.iter().map(|&v| -v).collect());
                }
            }
            Op::Mul { a, b } => {
                if self.wants_grad(*a) {
                    let da: Vec<S> = g
                        .iter()
                        .zip(self.data(*b).iter())
                        .map(|(&gv, &bv)| gv * bv)
                        .collect();
                    self.accumulate(*a, da);
                }
                if self.wants_grad(*b) {
                    let db: Vec<S> = g
                        .iter()
                        .zip(self.data(*a).iter())
                        .map(|(&gv, &av)| gv * av)
                        .collect();
                    self.accumulate(*b, db);
                }
            }
            Op::Scale { a, factor } => {
                let f = S::from_f64(*factor);
                self.accumulate(*a, g.iter().map(|&v| v * f).collect());
            }
            Op::Gelu { a } => {
                let da: Vec<S> = g
                    .iter()
                    .zip(self.data(*a).iter())
                    .map(|(&gv, &x)| gv * gelu_grad_scalar(x))
                    .collect();
                self.accumulate(*a, da);
            }
            Op::SoftmaxLastDim { a, mask } => {
                let y = &self.nodes[i].data;
                let n = *self.nodes[i].shape.last().unwrap();
                let rows = y.len() / n;
                let mut dpre = vec![S::zero(); y.len()];
                for r in 0..rows {
                    let ys = &y[r * n..(r + 1) * n];
                    let gs = &g[r * n..(r + 1) * n];
                    let mut dot = S::zero();
                    for j in 0..n {
                        dot += gs[j] * ys[j];
                    }
                    for j in 0..n {
                        dpre[r * n + j] = (gs[j] - dot) * ys[j];
                    }
                }
                if let Some(m) = mask {
                    if self.wants_grad(*m) {
                        self.accumulate(*m, dpre.clone());
                    }
                }
                self.accumulate(*a, dpre);
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let c = *self.nodes[i].shape.last().unwrap();
                let rows = xhat.len() / c;
                let gains = self.data(*gain).to_vec();
                if self.wants_grad(*x) {
                    let mut dx = vec![S::zero(); xhat.len()];
                    norm_input_grad(g, xhat, inv_std, rows, c, |j| gains[j % c], &mut dx);
                    self.accumulate(*x, dx);
                }
                if self.wants_grad(*gain) {
                    let mut dg = vec![S::zero(); c];
                    for (j, (&gv, &xh)) in g.iter().zip(xhat.iter()).enumerate() {
                        dg[j % c] += gv * xh;
                    }
                    self.accumulate(*gain, dg);
                }
                if self.wants_grad(*bias) {
                    let mut db = vec![S::zero(); c];
                    for (j, &gv) in g.iter().enumerate() {
                        db[j % c] += gv;
                    }
                    self.accumulate(*bias, db);
                }
            }
            Op::ChannelNorm { x, gain, bias, xhat, inv_std } => {
                let shape = &self.nodes[i].shape;
                let (c, hw) = (shape[0], shape[1] * shape[2]);
                let gains = self.data(*gain).to_vec();
                if self.wants_grad(*x) {
                    let mut dx = vec![S::zero(); xhat.len()];
                    norm_input_grad(g, xhat, inv_std, c, hw, |j| gains[j / hw], &mut dx);
                    self.accumulate(*x, dx);
                }
                if self.wants_grad(*gain) {
                    let mut dg = vec![S::zero(); c];
                    for ch in 0..c {
                        let mut acc = S::zero();
                        for p in 0..hw {
                            acc += g[ch * hw + p] * xhat[ch * hw + p];
                        }
                        dg[ch] = acc;
                    }
                    self.accumulate(*gain, dg);
                }
                if self.wants_grad(*bias) {
                    let mut db = vec![S::zero(); c];
                    for ch in 0..c {
                        let mut acc = S::zero();
                        for p in 0..hw {
                            acc += g[ch * hw + p];
                        }
                        db[ch] = acc;
                    }
                    self.accumulate(*bias, db);
                }
            }
            Op::Conv1x1 { x, w, b } => {
                let xs = self.shape(*x).to_vec();
                let (cin, hw) = (xs[0], xs[1] * xs[2]);
                let cout = self.shape(*w)[0];
                if self.wants_grad(*x) {
                    let mut dx = vec![S::zero(); cin * hw];
                    for ii in 0..cin {
                        for p in 0..hw {
                            let mut acc = S::zero();
                            for o in 0..cout {
                                acc += self.data(*w)[o * cin + ii] * g[o * hw + p];
                            }
                            dx[ii * hw + p] = acc;
                        }
                    }
                    self.accumulate(*x, dx);
                }
                if self.wants_grad(*w) {
                    let mut dw = vec![S::zero(); cout * cin];
                    for o in 0..cout {
                        for ii in 0..cin {
                            let mut acc = S::zero();
                            for p in 0..hw {
                                acc += g[o * hw + p] * self.data(*x)[ii * hw + p];
                            }
                            dw[o * cin + ii] = acc;
                        }
                    }
                    self.accumulate(*w, dw);
                }
                if self.wants_grad(*b) {
                    let mut db = vec![S::zero(); cout];
                    for o in 0..cout {
                        let mut acc = S::zero();
                        for p in 0..hw {
                            acc += g[o * hw + p];
                        }
                        db[o] = acc;
                    }
                    self.accumulate(*b, db);
                }
            }
            Op::Deconv { x, w, b } => {
                let xs = self.shape(*x).to_vec();
                let (cin, h, wd) = (xs[0], xs[1], xs[2]);
                let cout = self.shape(*w)[1];
                let (oh, ow) = (2 * h, 2 * wd);
                if self.wants_grad(*x) {
                    let mut dx = vec![S::zero(); cin * h * wd];
                    for ci in 0..cin {
                        for iy in 0..h {
                            for ix in 0..wd {
                                let mut acc = S::zero();
                                for ky in 0..DECONV_K {
                                    let oy = 2 * iy + ky;
                                    if oy < 1 || oy > oh {
                                        continue;
                                    }
                                    let oy = oy - 1;
                                    for kx in 0..DECONV_K {
                                        let ox = 2 * ix + kx;
                                        if ox < 1 || ox > ow {
                                            continue;
                                        }
                                        let ox = ox - 1;
                                        for co in 0..cout {
                                            acc += g[(co * oh + oy) * ow + ox]
                                                * self.data(*w)
                                                    [((ci * cout + co) * DECONV_K + ky) * DECONV_K
                                                        + kx];
                                        }
                                    }
                                }
                                dx[(ci * h + iy) * wd + ix] = acc;
                            }
                        }
                    }
                    self.accumulate(*x, dx);
                }
                if self.wants_grad(*w) {
                    let mut dw = vec![S::zero(); cin * cout * DECONV_K * DECONV_K];
                    for ci in 0..cin {
                        for iy in 0..h {
                            for ix in 0..wd {
                                let xv = self.data(*x)[(ci * h + iy) * wd + ix];
                                for ky in 0..DECONV_K {
                                    let oy = 2 * iy + ky;
                                    if oy < 1 || oy > oh {
                                        continue;
                                    }
                                    let oy = oy - 1;
                                    for kx in 0..DECONV_K {
                                        let ox = 2 * ix + kx;
                                        if ox < 1 || ox > ow {
                                            continue;
                                        }
                                        let ox = ox - 1;
                                        for co in 0..cout {
                                            dw[((ci * cout + co) * DECONV_K + ky) * DECONV_K + kx] +=
                                                xv * g[(co * oh + oy) * ow + ox];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    self.accumulate(*w, dw);
                }
                if self.wants_grad(*b) {
                    let mut db = vec![S::zero(); cout];
                    for co in 0..cout {
                        let mut acc = S::zero();
                        for p in 0..oh * ow {
                            acc += g[co * oh * ow + p];
                        }
                        db[co] = acc;
                    }
                    self.accumulate(*b, db);
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![S::zero(); self.data(*x).len()];
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src] += g[o];
                }
                self.accumulate(*x, dx);
            }
            Op::ExtractPatches { image, patch } => {
                let xs = self.shape(*image).to_vec();
                let (hh, ww) = (xs[1], xs[2]);
                let d = *patch;
                let gw = ww / d;
                let dim = 3 * d * d;
                let mut dx = vec![S::zero(); 3 * hh * ww];
                for (flat, &gv) in g.iter().enumerate() {
                    let token = flat / dim;
                    let inner = flat % dim;
                    let c = inner / (d * d);
                    let py = (inner / d) % d;
                    let px = inner % d;
                    let ty = token / gw;
                    let tx = token % gw;
                    dx[(c * hh + ty * d + py) * ww + tx * d + px] = gv;
                }
                self.accumulate(*image, dx);
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.data(p).len();
                    if self.wants_grad(p) {
                        self.accumulate(p, g[offset..offset + len].to_vec());
                    }
                    offset += len;
                }
            }
            Op::ConcatCols { parts } => {
                let rows = self.nodes[i].shape[0];
                let cols = self.nodes[i].shape[1];
                let mut offset = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    if self.wants_grad(p) {
                        let mut dp = vec![S::zero(); rows * c];
                        for r in 0..rows {
                            dp[r * c..(r + 1) * c]
                                .copy_from_slice(&g[r * cols + offset..r * cols + offset + c]);
                        }
                        self.accumulate(p, dp);
                    }
                    offset += c;
                }
            }
            Op::SliceRows { a, start } => {
                let (rows, cols) = (self.shape(*a)[0], self.shape(*a)[1]);
                let mut da = vec![S::zero(); rows * cols];
                da[start * cols..start * cols + g.len()].copy_from_slice(g);
                self.accumulate(*a, da);
            }
            Op::SliceCols { a, start } => {
                let (rows, cols) = (self.shape(*a)[0], self.shape(*a)[1]);
                let len = self.nodes[i].shape[1];
                let mut da = vec![S::zero(); rows * cols];
                for r in 0..rows {
                    da[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                self.accumulate(*a, da);
            }
            Op::Sum { a } => {
                let gv = g[0];
                let da = vec![gv; self.data(*a).len()];
                self.accumulate(*a, da);
            }
        }
        self.nodes[i].op = op;
    }
}

const DECONV_K: usize = 4;

fn deconv_macs(cin: usize, cout: usize, h: usize, w: usize) -> u128 {
    let valid = |len: usize, i: usize| -> usize {
        let hi = 2 * len; // output extent
        (0..DECONV_K)
            .filter(|&k| {
                let o = 2 * i + k;
                (1..=hi).contains(&o)
            })
            .count()
    };
    let mut total: u128 = 0;
    for iy in 0..h {
        for ix in 0..w {
            total += (valid(h, iy) * valid(w, ix)) as u128;
        }
    }
    total * (cin as u128) * (cout as u128)
}

fn dims2<S: Scalar>(
    tape: &Tape<S>,
    id: TensorId,
    op: &'static str,
) -> Result<(usize, usize), TensorError> {
    let s = tape.shape(id);
    if s.len() != 2 {
        return Err(TensorError::BadRank {
            op,
            expected: "2D",
            got: s.to_vec(),
        });
    }
    Ok((s[0], s[1]))
}

fn matmul_raw<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

fn transpose_raw<S: Scalar>(a: &[S], m: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Zero-mean unit-variance normalization of one row; returns (1/std, xhat).
fn normalize_row<S: Scalar>(x: &[S], eps: f64) -> (S, Vec<S>) {
    let n = S::from_f64(x.len() as f64);
    let mut mean = S::zero();
    for &v in x {
        mean += v;
    }
    mean = mean / n;
    let mut var = S::zero();
    for &v in x {
        let d = v - mean;
        var += d * d;
    }
    var = var / n;
    let inv_std = S::one() / (var + S::from_f64(eps)).sqrt();
    let xhat = x.iter().map(|&v| (v - mean) * inv_std).collect();
    (inv_std, xhat)
}

/// Shared input-gradient rule for layer_norm and channel_norm:
/// dx = inv_std * (dxh - mean(dxh) - xhat * mean(dxh * xhat)),
/// where dxh_j = dy_j * gain(j).
fn norm_input_grad<S: Scalar>(
    g: &[S],
    xhat: &[S],
    inv_std: &[S],
    rows: usize,
    cols: usize,
    gain_at: impl Fn(usize) -> S,
    dx: &mut [S],
) {
    let nc = S::from_f64(cols as f64);
    for r in 0..rows {
        let base = r * cols;
        let mut sum_dxh = S::zero();
        let mut sum_dxh_xhat = S::zero();
        for j in 0..cols {
            let dxh = g[base + j] * gain_at(base + j);
            sum_dxh += dxh;
            sum_dxh_xhat += dxh * xhat[base + j];
        }
        let mean_dxh = sum_dxh / nc;
        let mean_dxh_xhat = sum_dxh_xhat / nc;
        for j in 0..cols {
            let dxh = g[base + j] * gain_at(base + j);
            dx[base + j] = inv_std[r] * (dxh - mean_dxh - xhat[base + j] * mean_dxh_xhat);
        }
    }
}

const GELU_C0: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C1: f64 = 0.044715;

fn gelu_scalar<S: Scalar>(x: S) -> S {
    let half = S::from_f64(0.5);
    let c0 = S::from_f64(GELU_C0);
    let c1 = S::from_f64(GELU_C1);
    let u = c0 * (x + c1 * x * x * x);
    half * x * (S::one() + u.tanh())
}

fn gelu_grad_scalar<S: Scalar>(x: S) -> S {
    let half = S::from_f64(0.5);
    let c0 = S::from_f64(GELU_C0);
    let c1 = S::from_f64(GELU_C1);
    let three = S::from_f64(3.0);
    let u = c0 * (x + c1 * x * x * x);
    let t = u.tanh();
    let du = c0 * (S::one() + three * c1 * x * x);
    half * (S::one() + t) + half * x * (S::one() - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_grad, max_rel_error, NEG_LARGE};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = (0..numel).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::<f64>::new();
        let eye = tape.constant(&Tensor::from_f64_slice(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = tape.constant(&Tensor::from_f64_slice(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let c = tape.matmul(eye, b).unwrap();
        assert_eq!(tape.data(c), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_case() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(&Tensor::from_f64_slice(&[1, 2], &[1.0, 2.0]).unwrap());
        let b = tape.constant(&Tensor::from_f64_slice(&[2, 1], &[3.0, 4.0]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.data(c), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = rand_tensor(&mut rng, &[7, 5]);
        let b = rand_tensor(&mut rng, &[5, 3]);
        // independent naive oracle
        let mut expected = vec![0.0f64; 7 * 3];
        for i in 0..7 {
            for j in 0..3 {
                let mut acc = 0.0;
                for p in 0..5 {
                    acc += a.data()[i * 5 + p] * b.data()[p * 3 + j];
                }
                expected[i * 3 + j] = acc;
            }
        }
        let mut tape = Tape::<f64>::new();
        let ai = tape.constant(&a);
        let bi = tape.constant(&b);
        let c = tape.matmul(ai, bi).unwrap();
        for (got, want) in tape.data(c).iter().zip(expected.iter()) {
            assert!((got - want).abs() <= 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(&Tensor::zeros(&[2, 3]));
        let b = tape.constant(&Tensor::zeros(&[4, 2]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn softmax_symmetric_row() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(&Tensor::from_f64_slice(&[1, 2], &[0.0, 0.0]).unwrap());
        let y = tape.softmax_lastdim(x, None).unwrap();
        assert_eq!(tape.data(y), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_single_survivor() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(&Tensor::from_f64_slice(&[1, 2], &[5.0, 5.0]).unwrap());
        let m = tape.constant(&Tensor::from_f64_slice(&[1, 2], &[0.0, NEG_LARGE]).unwrap());
        let y = tape.softmax_lastdim(x, Some(m)).unwrap();
        assert_eq!(tape.data(y), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_matches_direct_formula_oracle_and_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[4, 9]);
        let mut tape = Tape::<f64>::new();
        let xi = tape.constant(&x);
        let y = tape.softmax_lastdim(xi, None).unwrap();
        for r in 0..4 {
            let row = &x.data()[r * 9..(r + 1) * 9];
            let denom: f64 = row.iter().map(|v| v.exp()).sum();
            let mut sum = 0.0;
            for j in 0..9 {
                let want = row[j].exp() / denom;
                let got = tape.data(y)[r * 9 + j];
                assert!((got - want).abs() < 1e-12);
                sum += got;
            }
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_fully_masked_row_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(&Tensor::zeros(&[2, 3]));
        let mut mask = Tensor::<f64>::zeros(&[2, 3]);
        for j in 0..3 {
            mask.set(&[1, j], NEG_LARGE);
        }
        let mi = tape.constant(&mask);
        let err = tape.softmax_lastdim(x, Some(mi)).unwrap_err();
        assert!(matches!(err, TensorError::FullyMaskedRow { row: 1 }));
    }

    #[test]
    fn layer_norm_zero_variance_token() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(&Tensor::from_f64_slice(&[1, 3], &[3.0, 3.0, 3.0]).unwrap());
        let g = tape.constant(&Tensor::full(&[3], 1.0));
        let b = tape.constant(&Tensor::zeros(&[3]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        for &v in tape.data(y) {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn layer_norm_already_normalized() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(&Tensor::from_f64_slice(&[1, 2], &[1.0, -1.0]).unwrap());
        let g = tape.constant(&Tensor::full(&[2], 1.0));
        let b = tape.constant(&Tensor::zeros(&[2]));
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        assert!((tape.data(y)[0] - 1.0).abs() < 1e-6);
        assert!((tape.data(y)[1] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_matches_formula_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_tensor(&mut rng, &[3, 5]);
        let g = rand_tensor(&mut rng, &[5]);
        let b = rand_tensor(&mut rng, &[5]);
        let eps = 1e-5;
        let mut tape = Tape::<f64>::new();
        let (xi, gi, bi) = (tape.constant(&x), tape.constant(&g), tape.constant(&b));
        let y = tape.layer_norm(xi, gi, bi, eps).unwrap();
        for r in 0..3 {
            let row = &x.data()[r * 5..(r + 1) * 5];
            let mean: f64 = row.iter().sum::<f64>() / 5.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
            for j in 0..5 {
                let want = (row[j] - mean) / (var + eps).sqrt() * g.data()[j] + b.data()[j];
                let got = tape.data(y)[r * 5 + j];
                assert!((got - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn gelu_zero_center_and_odd_tail_behavior() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(&Tensor::from_f64_slice(&[3], &[0.0, 5.0, -5.0]).unwrap());
        let y = tape.gelu(x);
        assert_eq!(tape.data(y)[0], 0.0);
        assert!((tape.data(y)[1] - 5.0).abs() < 1e-4); // ~identity for large x
        assert!(tape.data(y)[2].abs() < 1e-4); // ~zero for large negative x
    }

    #[test]
    fn add_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, &[2, 3]);
        let mut tape = Tape::<f64>::new();
        let xi = tape.constant(&x);
        let z = tape.constant(&Tensor::zeros(&[2, 3]));
        let y = tape.add(xi, z).unwrap();
        assert_eq!(tape.data(y), x.data());
    }

    #[test]
    fn concat_rows_matches_index_oracle() {
        let a = Tensor::<f64>::from_f64_slice(&[2, 3], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let b =
            Tensor::<f64>::from_f64_slice(&[2, 3], &[10.0, 11.0, 12.0, 13.0, 14.0, 15.0]).unwrap();
        let mut tape = Tape::<f64>::new();
        let (ai, bi) = (tape.constant(&a), tape.constant(&b));
        let c = tape.concat_rows(&[ai, bi]).unwrap();
        assert_eq!(tape.shape(c), &[4, 3]);
        // index-mapping oracle: row r < 2 comes from a, else from b
        for r in 0..4 {
            for j in 0..3 {
                let want = if r < 2 {
                    a.at(&[r, j])
                } else {
                    b.at(&[r - 2, j])
                };
                assert_eq!(tape.data(c)[r * 3 + j], want);
            }
        }
    }

    #[test]
    fn conv1x1_identity_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, &[2, 3, 4]);
        let mut tape = Tape::<f64>::new();
        let xi = tape.constant(&x);
        let w = tape.constant(&Tensor::from_f64_slice(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = tape.constant(&Tensor::zeros(&[2]));
        let y = tape.conv2d_1x1(xi, w, b).unwrap();
        assert_eq!(tape.data(y), x.data());
    }

    #[test]
    fn conv1x1_scalar_affine() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(&Tensor::from_f64_slice(&[1, 1, 1], &[3.0]).unwrap());
        let w = tape.constant(&Tensor::from_f64_slice(&[1, 1], &[2.0]).unwrap());
        let b = tape.constant(&Tensor::from_f64_slice(&[1], &[1.0]).unwrap());
        let y = tape.conv2d_1x1(x, w, b).unwrap();
        assert_eq!(tape.data(y), &[7.0]);
    }

    #[test]
    fn conv1x1_matches_matmul_reshape_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = rand_tensor(&mut rng, &[3, 2, 5]);
        let w = rand_tensor(&mut rng, &[4, 3]);
        let b = rand_tensor(&mut rng, &[4]);
        let mut tape = Tape::<f64>::new();
        let (xi, wi, bi) = (tape.constant(&x), tape.constant(&w), tape.constant(&b));
        let y = tape.conv2d_1x1(xi, wi, bi).unwrap();
        // oracle: W[4x3] x X_flat[3x10] + b
        for o in 0..4 {
            for p in 0..10 {
                let mut want = b.data()[o];
                for i in 0..3 {
                    want += w.data()[o * 3 + i] * x.data()[i * 10 + p];
                }
                assert!((tape.data(y)[o * 10 + p] - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn deconv_single_pixel_all_ones_kernel() {
        let mut tape = Tape::<f64>::new();
        let v = 2.5;
        let x = tape.constant(&Tensor::from_f64_slice(&[1, 1, 1], &[v]).unwrap());
        let w = tape.constant(&Tensor::full(&[1, 1, 4, 4], 1.0));
        let b = tape.constant(&Tensor::zeros(&[1]));
        let y = tape.deconv2d(x, w, b).unwrap();
        assert_eq!(tape.shape(y), &[1, 2, 2]);
        for &o in tape.data(y) {
            assert_eq!(o, v);
        }
    }

    #[test]
    fn deconv_zero_input_broadcasts_bias() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(&Tensor::zeros(&[2, 3, 3]));
        let w = tape.constant(&Tensor::full(&[2, 2, 4, 4], 0.7));
        let b = tape.constant(&Tensor::from_f64_slice(&[2], &[1.5, -2.0]).unwrap());
        let y = tape.deconv2d(x, w, b).unwrap();
        for p in 0..36 {
            assert_eq!(tape.data(y)[p], 1.5);
            assert_eq!(tape.data(y)[36 + p], -2.0);
        }
    }

    /// Zero-insertion oracle: upsample input by inserting a zero between
    /// every pair of pixels (stride-1 zeros), pad by kernel-1-pad = 2, then
    /// run a plain correlation with the kernel flipped in both axes.
    fn deconv_zero_insertion_oracle(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        b: &Tensor<f64>,
    ) -> Vec<f64> {
        let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let cout = w.shape()[1];
        let (oh, ow) = (2 * h, 2 * wd);
        // dilated canvas with pad 2 on each side
        let (dh, dw) = (2 * h - 1 + 4, 2 * wd - 1 + 4);
        let mut canvas = vec![0.0f64; cin * dh * dw];
        for ci in 0..cin {
            for iy in 0..h {
                for ix in 0..wd {
                    canvas[(ci * dh + 2 * iy + 2) * dw + 2 * ix + 2] = x.at(&[ci, iy, ix]);
                }
            }
        }
        let mut out = vec![0.0f64; cout * oh * ow];
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.data()[co];
                    for ci in 0..cin {
                        for ky in 0..4 {
                            for kx in 0..4 {
                                // flipped kernel
                                let wv = w.at(&[ci, co, 3 - ky, 3 - kx]);
                                acc += wv * canvas[(ci * dh + oy + ky) * dw + ox + kx];
                            }
                        }
                    }
                    out[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn deconv_matches_zero_insertion_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = rand_tensor(&mut rng, &[2, 3, 4]);
        let w = rand_tensor(&mut rng, &[2, 3, 4, 4]);
        let b = rand_tensor(&mut rng, &[3]);
        let want = deconv_zero_insertion_oracle(&x, &w, &b);
        let mut tape = Tape::<f64>::new();
        let (xi, wi, bi) = (tape.constant(&x), tape.constant(&w), tape.constant(&b));
        let y = tape.deconv2d(xi, wi, bi).unwrap();
        for (got, want) in tape.data(y).iter().zip(want.iter()) {
            assert!((got - want).abs() < 1e-5, "{got} vs {want}");
        }
    }

    #[test]
    fn max_pool_constant_and_spike() {
        let mut tape = Tape::<f64>::new();
        let c = tape.constant(&Tensor::full(&[1, 4, 4], 0.3));
        let y = tape.max_pool2d(c, 2).unwrap();
        assert!(tape.data(y).iter().all(|&v| v == 0.3));

        let mut spike = Tensor::<f64>::zeros(&[1, 4, 4]);
        spike.set(&[0, 1, 1], 1.0);
        let mut tape = Tape::<f64>::new();
        let s = tape.constant(&spike);
        let y = tape.max_pool2d(s, 2).unwrap();
        assert_eq!(tape.data(y), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn max_pool_matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x = rand_tensor(&mut rng, &[2, 8, 4]);
        let mut tape = Tape::<f64>::new();
        let xi = tape.constant(&x);
        let y = tape.max_pool2d(xi, 4).unwrap();
        for m in 0..2 {
            for oy in 0..2 {
                let mut want = f64::NEG_INFINITY;
                for dy in 0..4 {
                    for dx in 0..4 {
                        want = want.max(x.at(&[m, oy * 4 + dy, dx]));
                    }
                }
                assert_eq!(tape.data(y)[m * 2 + oy], want);
            }
        }
    }

    #[test]
    fn pool_divisibility_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(&Tensor::zeros(&[1, 5, 4]));
        assert!(matches!(
            tape.max_pool2d(x, 2),
            Err(TensorError::Geometry { .. })
        ));
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let x = rand_tensor(&mut rng, &[3, 4]);
        let mut tape = Tape::<f64>::new();
        let xi = tape.input(&x, true);
        let loss = tape.sum(xi);
        tape.backward(loss).unwrap();
        assert!(tape.grad(xi).unwrap().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn backward_sum_of_squares_gives_2x() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let x = rand_tensor(&mut rng, &[5]);
        let mut tape = Tape::<f64>::new();
        let xi = tape.input(&x, true);
        let sq = tape.mul(xi, xi).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        for (g, v) in tape.grad(xi).unwrap().iter().zip(x.data()) {
            assert!((g - 2.0 * v).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_loss_and_double_backward() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(&Tensor::zeros(&[2, 2]), true);
        assert!(matches!(
            tape.backward(x),
            Err(TensorError::NonScalarLoss { .. })
        ));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(TensorError::TapeConsumed)));
    }

    #[test]
    fn composite_matmul_softmax_mse_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[4, 3]);
        let target = rand_tensor(&mut rng, &[3, 3]);

        let run = |a: &Tensor<f64>, b: &Tensor<f64>| -> (Tape<f64>, TensorId, TensorId, TensorId) {
            let mut tape = Tape::<f64>::new();
            let ai = tape.input(a, true);
            let bi = tape.input(b, true);
            let ti = tape.constant(&target);
            let mm = tape.matmul(ai, bi).unwrap();
            let sm = tape.softmax_lastdim(mm, None).unwrap();
            let d = tape.sub(sm, ti).unwrap();
            let sq = tape.mul(d, d).unwrap();
            let loss = tape.sum(sq);
            (tape, loss, ai, bi)
        };

        let (mut tape, loss, ai, bi) = run(&a, &b);
        tape.backward(loss).unwrap();
        let ga = tape.grad(ai).unwrap().to_vec();
        let gb = tape.grad(bi).unwrap().to_vec();

        let fd_a = finite_diff_grad(
            |t| {
                let (tape, loss, ..) = run(t, &b);
                tape.data(loss)[0]
            },
            &a,
            1e-5,
        );
        let fd_b = finite_diff_grad(
            |t| {
                let (tape, loss, ..) = run(&a, t);
                tape.data(loss)[0]
            },
            &b,
            1e-5,
        );
        assert!(max_rel_error(&ga, fd_a.data()) < 1e-4);
        assert!(max_rel_error(&gb, fd_b.data()) < 1e-4);
    }

    #[test]
    fn detached_subgraph_receives_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let x = rand_tensor(&mut rng, &[2, 2]);
        let mut tape = Tape::<f64>::new();
        let xi = tape.input(&x, true);
        let detached = tape.constant(&x); // same values, no grad participation
        let y = tape.mul(xi, xi).unwrap();
        let z = tape.add(y, detached).unwrap();
        let loss = tape.sum(z);
        tape.backward(loss).unwrap();
        assert!(tape.grad(detached).is_none());
        assert!(tape.grad(xi).is_some());
    }

    #[test]
    fn forward_kernels_are_pure() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let x = rand_tensor(&mut rng, &[4, 6]);
        let g = rand_tensor(&mut rng, &[6]);
        let b = rand_tensor(&mut rng, &[6]);
        let run = || {
            let mut tape = Tape::<f64>::new();
            let xi = tape.constant(&x);
            let gi = tape.constant(&g);
            let bi = tape.constant(&b);
            let ln = tape.layer_norm(xi, gi, bi, 1e-5).unwrap();
            let ge = tape.gelu(ln);
            let sm = tape.softmax_lastdim(ge, None).unwrap();
            tape.data(sm).to_vec()
        };
        let first = run();
        let second = run();
        // bit-identical, not merely close
        assert!(first
            .iter()
            .zip(second.iter())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn extract_patches_shape_and_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let img = rand_tensor(&mut rng, &[3, 8, 4]);
        let mut tape = Tape::<f64>::new();
        let ii = tape.input(&img, true);
        let p = tape.extract_patches(ii, 4).unwrap();
        assert_eq!(tape.shape(p), &[2, 48]);
        // token 0 covers rows 0..4, cols 0..4; channel-major layout
        assert_eq!(tape.data(p)[0], img.at(&[0, 0, 0]));
        assert_eq!(tape.data(p)[16], img.at(&[1, 0, 0]));
        // backward is the inverse permutation: sum loss gives all-ones grads
        let loss = tape.sum(p);
        tape.backward(loss).unwrap();
        assert!(tape.grad(ii).unwrap().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn slice_and_concat_cols_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(59);
        let x = rand_tensor(&mut rng, &[3, 8]);
        let mut tape = Tape::<f64>::new();
        let xi = tape.constant(&x);
        let left = tape.slice_cols(xi, 0, 5).unwrap();
        let right = tape.slice_cols(xi, 5, 3).unwrap();
        let back = tape.concat_cols(&[left, right]).unwrap();
        assert_eq!(tape.data(back), x.data());
    }

    #[test]
    fn mac_counter_tracks_matmul() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(&Tensor::zeros(&[2, 3]));
        let b = tape.constant(&Tensor::zeros(&[3, 5]));
        tape.matmul(a, b).unwrap();
        assert_eq!(tape.mac_count(), 2 * 3 * 5);
    }
}
