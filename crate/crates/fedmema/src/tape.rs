//! Reverse-mode automatic differentiation on an arena tape.
//!
//! A [`Tape`] records every operation as a node holding its result tensor and
//! enough bookkeeping to run the chain rule backwards. [`Var`] is a `Copy`
//! index into the arena. One tape lives for one training step: build the
//! graph, call [`Tape::backward`], pull gradients, drop the tape.
//!
//! Design constraints that shaped this module:
//!
//! * **Determinism.** Accumulation order inside every kernel is fixed by the
//!   source, never by thread schedule or hash iteration. Inner loops either
//!   run over the *output* index (independent lanes, safe to vectorize) or use
//!   [`dot`], whose four-accumulator order is part of the contract.
//! * **Fail loudly.** Every op scans its forward output — and `backward` scans
//!   every accumulated gradient — for NaN/Inf and returns
//!   [`Error::NonFinite`] naming the op. Training never limps through a
//!   poisoned tensor.
//! * **f64 only.** Desk scale means we buy precision instead of throughput.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a tape node. Cheap to copy, meaningless across tapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(u32);

impl Var {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

/// Dot product with a fixed 4-lane accumulation order.
///
/// The order is part of the crate's determinism contract: independent lanes
/// let the compiler vectorize without reassociating anything beyond what the
/// source already spells out.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (xa, xb) in ca.zip(cb) {
        acc[0] += xa[0] * xb[0];
        acc[1] += xa[1] * xb[1];
        acc[2] += xa[2] * xb[2];
        acc[3] += xa[3] * xb[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 0..ra.len() {
        s += ra[i] * rb[i];
    }
    s
}

/// `dst += k * src`, the other deterministic workhorse.
fn axpy(dst: &mut [f64], k: f64, src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += k * s;
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    MatMul(Var, Var),
    Transpose2(Var),
    SoftmaxRows(Var),
    SoftmaxChannels(Var),
    /// Mean cross-entropy over pixels; labels are data, not a differentiable
    /// input, so they live inside the node.
    CeChannels {
        logits: Var,
        labels: Vec<u8>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        pad: usize,
    },
    AvgPool2(Var),
    Upsample2(Var),
    ConcatChannels(Vec<Var>),
    SliceChannels {
        x: Var,
        from: usize,
        to: usize,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        from: usize,
        to: usize,
    },
    Reshape(Var),
    SumAll(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Relu(..) => "relu",
            Op::MatMul(..) => "matmul",
            Op::Transpose2(..) => "transpose2",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::SoftmaxChannels(..) => "softmax_channels",
            Op::CeChannels { .. } => "ce_channels",
            Op::Conv2d { .. } => "conv2d",
            Op::AvgPool2(..) => "avgpool2",
            Op::Upsample2(..) => "upsample2",
            Op::ConcatChannels(..) => "concat_channels",
            Op::SliceChannels { .. } => "slice_channels",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::Reshape(..) => "reshape",
            Op::SumAll(..) => "sum_all",
        }
    }
}

struct Node {
    value: Tensor,
    requires: bool,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.idx()).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.idx()).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.idx()].value
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.idx()].requires
    }

    fn push(&mut self, value: Tensor, requires: bool, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::non_finite(format!("{} (node {})", op.name(), self.nodes.len())));
        }
        let id = self.nodes.len();
        assert!(id <= u32::MAX as usize, "tape overflow");
        self.nodes.push(Node { value, requires, op });
        Ok(Var(id as u32))
    }

    /// Differentiable leaf (a parameter).
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, true, Op::Leaf)
    }

    /// Non-differentiable leaf (an input, label mask, frozen anchor...).
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, false, Op::Leaf)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{:?} vs {:?}", sa, sb)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::from_vec(self.value(a).shape(), data)?;
        self.push(t, self.requires(a) || self.requires(b), Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let t = Tensor::from_vec(self.value(a).shape(), data)?;
        self.push(t, self.requires(a) || self.requires(b), Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::from_vec(self.value(a).shape(), data)?;
        self.push(t, self.requires(a) || self.requires(b), Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x / y)
            .collect();
        let t = Tensor::from_vec(self.value(a).shape(), data)?;
        self.push(t, self.requires(a) || self.requires(b), Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let data = self.value(a).data().iter().map(|x| x * k).collect();
        let t = Tensor::from_vec(self.value(a).shape(), data)?;
        self.push(t, self.requires(a), Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Result<Var> {
        let data = self.value(a).data().iter().map(|x| x + k).collect();
        let t = Tensor::from_vec(self.value(a).shape(), data)?;
        self.push(t, self.requires(a), Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data().iter().map(|x| x.max(0.0)).collect();
        let t = Tensor::from_vec(self.value(a).shape(), data)?;
        self.push(t, self.requires(a), Op::Relu(a))
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 2 || vb.rank() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", va.shape(), vb.shape())));
        }
        let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                axpy(row, va.data()[i * k + p], &vb.data()[p * n..(p + 1) * n]);
            }
        }
        let t = Tensor::from_vec(&[m, n], out)?;
        self.push(t, self.requires(a) || self.requires(b), Op::MatMul(a, b))
    }

    pub fn transpose2(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.rank() != 2 {
            return Err(Error::shape("transpose2", format!("rank {} input", va.rank())));
        }
        let (m, n) = (va.shape()[0], va.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = va.data()[i * n + j];
            }
        }
        let t = Tensor::from_vec(&[n, m], out)?;
        self.push(t, self.requires(a), Op::Transpose2(a))
    }

    /// Row-wise softmax on a `[m,n]` matrix, numerically stabilized.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.rank() != 2 {
            return Err(Error::shape("softmax_rows", format!("rank {} input", va.rank())));
        }
        let (m, n) = (va.shape()[0], va.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &va.data()[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..n {
                let e = (row[j] - mx).exp();
                out[i * n + j] = e;
                z += e;
            }
            for j in 0..n {
                out[i * n + j] /= z;
            }
        }
        let t = Tensor::from_vec(&[m, n], out)?;
        self.push(t, self.requires(a), Op::SoftmaxRows(a))
    }

    /// Softmax across the channel axis of a `[c,h,w]` tensor, per pixel.
    pub fn softmax_channels(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.rank() != 3 {
            return Err(Error::shape("softmax_channels", format!("rank {} input", va.rank())));
        }
        let (c, h, w) = (va.shape()[0], va.shape()[1], va.shape()[2]);
        let hw = h * w;
        let mut out = vec![0.0; c * hw];
        for p in 0..hw {
            let mut mx = f64::NEG_INFINITY;
            for ch in 0..c {
                mx = mx.max(va.data()[ch * hw + p]);
            }
            let mut z = 0.0;
            for ch in 0..c {
                let e = (va.data()[ch * hw + p] - mx).exp();
                out[ch * hw + p] = e;
                z += e;
            }
            for ch in 0..c {
                out[ch * hw + p] /= z;
            }
        }
        let t = Tensor::from_vec(&[c, h, w], out)?;
        self.push(t, self.requires(a), Op::SoftmaxChannels(a))
    }

    /// Mean pixel-wise cross-entropy of `[c,h,w]` logits against `h*w` labels.
    pub fn ce_channels(&mut self, logits: Var, labels: &[u8]) -> Result<Var> {
        let v = self.value(logits);
        if v.rank() != 3 {
            return Err(Error::shape("ce_channels", format!("rank {} input", v.rank())));
        }
        let (c, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2]);
        let hw = h * w;
        if labels.len() != hw {
            return Err(Error::shape("ce_channels", format!("{} labels for {} pixels", labels.len(), hw)));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= c) {
            return Err(Error::shape("ce_channels", format!("label {} out of range (c={})", bad, c)));
        }
        let mut total = 0.0;
        for (p, &lab) in labels.iter().enumerate() {
            let mut mx = f64::NEG_INFINITY;
            for ch in 0..c {
                mx = mx.max(v.data()[ch * hw + p]);
            }
            let mut z = 0.0;
            for ch in 0..c {
                z += (v.data()[ch * hw + p] - mx).exp();
            }
            let lse = mx + z.ln();
            total += lse - v.data()[lab as usize * hw + p];
        }
        let t = Tensor::scalar(total / hw as f64);
        let req = self.requires(logits);
        self.push(t, req, Op::CeChannels { logits, labels: labels.to_vec() })
    }

    /// 2-D convolution, stride 1: `[ci,h,w] * [co,ci,k,k] + [co] -> [co,h',w']`
    /// with `h' = h + 2*pad - k + 1`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Result<Var> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        if vx.rank() != 3 || vw.rank() != 4 || vb.rank() != 1 {
            return Err(Error::shape(
                "conv2d",
                format!("x{:?} w{:?} b{:?}", vx.shape(), vw.shape(), vb.shape()),
            ));
        }
        let (ci, h, wd) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let (co, wci, kh, kw) = (vw.shape()[0], vw.shape()[1], vw.shape()[2], vw.shape()[3]);
        if wci != ci || vb.shape()[0] != co || kh != kw {
            return Err(Error::shape(
                "conv2d",
                format!("x{:?} w{:?} b{:?}", vx.shape(), vw.shape(), vb.shape()),
            ));
        }
        let k = kh;
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::shape("conv2d", format!("kernel {} too large for {}x{} pad {}", k, h, wd, pad)));
        }
        let oh = h + 2 * pad - k + 1;
        let ow = wd + 2 * pad - k + 1;
        let mut out = vec![0.0; co * oh * ow];
        let xd = vx.data();
        let wdat = vw.data();
        for o in 0..co {
            let oc = &mut out[o * oh * ow..(o + 1) * oh * ow];
            let bias = vb.data()[o];
            for v in oc.iter_mut() {
                *v = bias;
            }
            for c in 0..ci {
                let xc = &xd[c * h * wd..(c + 1) * h * wd];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = wdat[((o * ci + c) * k + ky) * k + kx];
                        // Output (y,x) reads input (y+ky-pad, x+kx-pad); clamp
                        // the ranges so out-of-image taps contribute zero.
                        let dy = ky as isize - pad as isize;
                        let dx = kx as isize - pad as isize;
                        let y0 = (-dy).max(0) as usize;
                        let y1 = ((h as isize - dy).min(oh as isize)).max(0) as usize;
                        let x0 = (-dx).max(0) as usize;
                        let x1 = ((wd as isize - dx).min(ow as isize)).max(0) as usize;
                        if x0 >= x1 {
                            continue;
                        }
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let sx = (x0 as isize + dx) as usize;
                            let src = &xc[sy * wd + sx..sy * wd + sx + (x1 - x0)];
                            let dst = &mut oc[y * ow + x0..y * ow + x1];
                            axpy(dst, wv, src);
                        }
                    }
                }
            }
        }
        let t = Tensor::from_vec(&[co, oh, ow], out)?;
        let req = self.requires(x) || self.requires(w) || self.requires(b);
        self.push(t, req, Op::Conv2d { x, w, b, pad })
    }

    /// 2x2 average pooling, stride 2. Requires even spatial extents.
    pub fn avgpool2(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.rank() != 3 || !va.shape()[1].is_multiple_of(2) || !va.shape()[2].is_multiple_of(2) {
            return Err(Error::shape("avgpool2", format!("{:?}", va.shape())));
        }
        let (c, h, w) = (va.shape()[0], va.shape()[1], va.shape()[2]);
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    let base = (ch * h + 2 * y) * w + 2 * x;
                    out[(ch * oh + y) * ow + x] =
                        0.25 * (va.data()[base] + va.data()[base + 1] + va.data()[base + w] + va.data()[base + w + 1]);
                }
            }
        }
        let t = Tensor::from_vec(&[c, oh, ow], out)?;
        self.push(t, self.requires(a), Op::AvgPool2(a))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.rank() != 3 {
            return Err(Error::shape("upsample2", format!("{:?}", va.shape())));
        }
        let (c, h, w) = (va.shape()[0], va.shape()[1], va.shape()[2]);
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let v = va.data()[(ch * h + y) * w + x];
                    let base = (ch * oh + 2 * y) * ow + 2 * x;
                    out[base] = v;
                    out[base + 1] = v;
                    out[base + ow] = v;
                    out[base + ow + 1] = v;
                }
            }
        }
        let t = Tensor::from_vec(&[c, oh, ow], out)?;
        self.push(t, self.requires(a), Op::Upsample2(a))
    }

    /// Concatenate `[c_i,h,w]` tensors along channels.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::shape("concat_channels", "empty input list"));
        }
        let (h, w) = {
            let v0 = self.value(xs[0]);
            if v0.rank() != 3 {
                return Err(Error::shape("concat_channels", format!("{:?}", v0.shape())));
            }
            (v0.shape()[1], v0.shape()[2])
        };
        let mut ctot = 0;
        for &x in xs {
            let v = self.value(x);
            if v.rank() != 3 || v.shape()[1] != h || v.shape()[2] != w {
                return Err(Error::shape("concat_channels", format!("{:?}", v.shape())));
            }
            ctot += v.shape()[0];
        }
        let mut out = Vec::with_capacity(ctot * h * w);
        for &x in xs {
            out.extend_from_slice(self.value(x).data());
        }
        let req = xs.iter().any(|&x| self.requires(x));
        let t = Tensor::from_vec(&[ctot, h, w], out)?;
        self.push(t, req, Op::ConcatChannels(xs.to_vec()))
    }

    /// Channel slice `[from, to)` of a `[c,h,w]` tensor.
    pub fn slice_channels(&mut self, x: Var, from: usize, to: usize) -> Result<Var> {
        let v = self.value(x);
        if v.rank() != 3 || from >= to || to > v.shape()[0] {
            return Err(Error::shape("slice_channels", format!("[{}, {}) of {:?}", from, to, v.shape())));
        }
        let (h, w) = (v.shape()[1], v.shape()[2]);
        let out = v.data()[from * h * w..to * h * w].to_vec();
        let t = Tensor::from_vec(&[to - from, h, w], out)?;
        let req = self.requires(x);
        self.push(t, req, Op::SliceChannels { x, from, to })
    }

    /// Concatenate `[m,n_i]` matrices along columns.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::shape("concat_cols", "empty input list"));
        }
        let m = {
            let v0 = self.value(xs[0]);
            if v0.rank() != 2 {
                return Err(Error::shape("concat_cols", format!("{:?}", v0.shape())));
            }
            v0.shape()[0]
        };
        let mut ntot = 0;
        for &x in xs {
            let v = self.value(x);
            if v.rank() != 2 || v.shape()[0] != m {
                return Err(Error::shape("concat_cols", format!("{:?}", v.shape())));
            }
            ntot += v.shape()[1];
        }
        let mut out = vec![0.0; m * ntot];
        let mut col = 0;
        for &x in xs {
            let v = self.value(x);
            let n = v.shape()[1];
            for i in 0..m {
                out[i * ntot + col..i * ntot + col + n].copy_from_slice(&v.data()[i * n..(i + 1) * n]);
            }
            col += n;
        }
        let req = xs.iter().any(|&x| self.requires(x));
        let t = Tensor::from_vec(&[m, ntot], out)?;
        self.push(t, req, Op::ConcatCols(xs.to_vec()))
    }

    /// Column slice `[from, to)` of a `[m,n]` matrix.
    pub fn slice_cols(&mut self, x: Var, from: usize, to: usize) -> Result<Var> {
        let v = self.value(x);
        if v.rank() != 2 || from >= to || to > v.shape()[1] {
            return Err(Error::shape("slice_cols", format!("[{}, {}) of {:?}", from, to, v.shape())));
        }
        let (m, n) = (v.shape()[0], v.shape()[1]);
        let mut out = Vec::with_capacity(m * (to - from));
        for i in 0..m {
            out.extend_from_slice(&v.data()[i * n + from..i * n + to]);
        }
        let t = Tensor::from_vec(&[m, to - from], out)?;
        let req = self.requires(x);
        self.push(t, req, Op::SliceCols { x, from, to })
    }

    /// Same data, new shape (element counts must agree).
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let n: usize = shape.iter().product();
        if n != v.numel() {
            return Err(Error::shape("reshape", format!("{:?} -> {:?}", v.shape(), shape)));
        }
        let t = Tensor::from_vec(shape, v.data().to_vec())?;
        let req = self.requires(x);
        self.push(t, req, Op::Reshape(x))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let mut acc = [0.0f64; 4];
        let data = self.value(x).data();
        let ch = data.chunks_exact(4);
        let rem = ch.remainder();
        for c in ch {
            acc[0] += c[0];
            acc[1] += c[1];
            acc[2] += c[2];
            acc[3] += c[3];
        }
        let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
        for &v in rem {
            s += v;
        }
        let req = self.requires(x);
        self.push(Tensor::scalar(s), req, Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let s = self.sum_all(x)?;
        // Rewrite the sum node into a mean by scaling; keeps backward simple.
        self.scale(s, 1.0 / n as f64)
    }

    /// Run the chain rule from scalar `root` back to every leaf that
    /// requires gradients.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        if self.value(root).numel() != 1 {
            return Err(Error::shape("backward", format!("root has shape {:?}", self.value(root).shape())));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[root.idx()] = Some(Tensor::from_vec(self.value(root).shape(), vec![1.0])?);

        for i in (0..n).rev() {
            if !self.nodes[i].requires {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if !g.is_finite() {
                return Err(Error::non_finite(format!("{} backward (node {})", self.nodes[i].op.name(), i)));
            }
            self.accumulate_inputs(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Distribute node `i`'s output gradient `g` onto its inputs.
    fn accumulate_inputs(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        // Local helper: add `delta` into the gradient slot of `v` if it
        // participates in differentiation.
        let mut bump = |tape: &Tape, v: Var, delta: Tensor| {
            if !tape.requires(v) {
                return;
            }
            let slot = &mut grads[v.idx()];
            match slot {
                Some(t) => {
                    let d = t.data_mut();
                    for (x, y) in d.iter_mut().zip(delta.data()) {
                        *x += y;
                    }
                }
                None => *slot = Some(delta),
            }
        };

        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                bump(self, *a, g.clone());
                bump(self, *b, g.clone());
            }
            Op::Sub(a, b) => {
                bump(self, *a, g.clone());
                let neg = Tensor::from_vec(g.shape(), g.data().iter().map(|v| -v).collect())?;
                bump(self, *b, neg);
            }
            Op::Mul(a, b) => {
                if self.requires(*a) {
                    let d = g.data().iter().zip(self.value(*b).data()).map(|(x, y)| x * y).collect();
                    bump(self, *a, Tensor::from_vec(g.shape(), d)?);
                }
                if self.requires(*b) {
                    let d = g.data().iter().zip(self.value(*a).data()).map(|(x, y)| x * y).collect();
                    bump(self, *b, Tensor::from_vec(g.shape(), d)?);
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b).data();
                if self.requires(*a) {
                    let d = g.data().iter().zip(bv).map(|(x, y)| x / y).collect();
                    bump(self, *a, Tensor::from_vec(g.shape(), d)?);
                }
                if self.requires(*b) {
                    let av = self.value(*a).data();
                    let d = g
                        .data()
                        .iter()
                        .zip(av.iter().zip(bv))
                        .map(|(gx, (x, y))| -gx * x / (y * y))
                        .collect();
                    bump(self, *b, Tensor::from_vec(g.shape(), d)?);
                }
            }
            Op::Scale(a, k) => {
                let d = g.data().iter().map(|x| x * k).collect();
                bump(self, *a, Tensor::from_vec(g.shape(), d)?);
            }
            Op::AddScalar(a) => {
                bump(self, *a, g.clone());
            }
            Op::Relu(a) => {
                let d = g
                    .data()
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(gx, x)| if *x > 0.0 { *gx } else { 0.0 })
                    .collect();
                bump(self, *a, Tensor::from_vec(g.shape(), d)?);
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, nn) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.requires(*a) {
                    // dA[i,p] = dot(g row i, B row p)
                    let mut da = vec![0.0; m * k];
                    for i2 in 0..m {
                        let grow = &g.data()[i2 * nn..(i2 + 1) * nn];
                        for p in 0..k {
                            da[i2 * k + p] = dot(grow, &vb.data()[p * nn..(p + 1) * nn]);
                        }
                    }
                    bump(self, *a, Tensor::from_vec(&[m, k], da)?);
                }
                if self.requires(*b) {
                    // dB[p,:] += A[i,p] * g[i,:]
                    let mut db = vec![0.0; k * nn];
                    for i2 in 0..m {
                        let grow = &g.data()[i2 * nn..(i2 + 1) * nn];
                        for p in 0..k {
                            axpy(&mut db[p * nn..(p + 1) * nn], va.data()[i2 * k + p], grow);
                        }
                    }
                    bump(self, *b, Tensor::from_vec(&[k, nn], db)?);
                }
            }
            Op::Transpose2(a) => {
                let (n2, m2) = (g.shape()[0], g.shape()[1]);
                let mut d = vec![0.0; n2 * m2];
                for i2 in 0..n2 {
                    for j in 0..m2 {
                        d[j * n2 + i2] = g.data()[i2 * m2 + j];
                    }
                }
                bump(self, *a, Tensor::from_vec(&[m2, n2], d)?);
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[i].value;
                let (m, n2) = (y.shape()[0], y.shape()[1]);
                let mut d = vec![0.0; m * n2];
                for r in 0..m {
                    let yr = &y.data()[r * n2..(r + 1) * n2];
                    let gr = &g.data()[r * n2..(r + 1) * n2];
                    let s = dot(gr, yr);
                    for c in 0..n2 {
                        d[r * n2 + c] = yr[c] * (gr[c] - s);
                    }
                }
                bump(self, *a, Tensor::from_vec(&[m, n2], d)?);
            }
            Op::SoftmaxChannels(a) => {
                let y = &self.nodes[i].value;
                let (c, h, w) = (y.shape()[0], y.shape()[1], y.shape()[2]);
                let hw = h * w;
                let mut d = vec![0.0; c * hw];
                for p in 0..hw {
                    let mut s = 0.0;
                    for ch in 0..c {
                        s += g.data()[ch * hw + p] * y.data()[ch * hw + p];
                    }
                    for ch in 0..c {
                        d[ch * hw + p] = y.data()[ch * hw + p] * (g.data()[ch * hw + p] - s);
                    }
                }
                bump(self, *a, Tensor::from_vec(y.shape(), d)?);
            }
            Op::CeChannels { logits, labels } => {
                let v = self.value(*logits);
                let (c, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2]);
                let hw = h * w;
                let gs = g.item() / hw as f64;
                let mut d = vec![0.0; c * hw];
                for p in 0..hw {
                    let mut mx = f64::NEG_INFINITY;
                    for ch in 0..c {
                        mx = mx.max(v.data()[ch * hw + p]);
                    }
                    let mut z = 0.0;
                    for ch in 0..c {
                        z += (v.data()[ch * hw + p] - mx).exp();
                    }
                    for ch in 0..c {
                        let soft = (v.data()[ch * hw + p] - mx).exp() / z;
                        let onehot = if labels[p] as usize == ch { 1.0 } else { 0.0 };
                        d[ch * hw + p] = gs * (soft - onehot);
                    }
                }
                bump(self, *logits, Tensor::from_vec(v.shape(), d)?);
            }
            Op::Conv2d { x, w, b, pad } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (ci, h, wd) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
                let (co, k) = (vw.shape()[0], vw.shape()[2]);
                let (oh, ow) = (g.shape()[1], g.shape()[2]);
                let pad = *pad as isize;
                if self.requires(*b) {
                    let mut db = vec![0.0; co];
                    for (o, dbo) in db.iter_mut().enumerate() {
                        let gc = &g.data()[o * oh * ow..(o + 1) * oh * ow];
                        let mut acc = [0.0f64; 4];
                        let chs = gc.chunks_exact(4);
                        let rem = chs.remainder();
                        for cch in chs {
                            acc[0] += cch[0];
                            acc[1] += cch[1];
                            acc[2] += cch[2];
                            acc[3] += cch[3];
                        }
                        let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
                        for &v in rem {
                            s += v;
                        }
                        *dbo = s;
                    }
                    bump(self, *b, Tensor::from_vec(&[co], db)?);
                }
                if self.requires(*w) {
                    let mut dw = vec![0.0; vw.numel()];
                    for o in 0..co {
                        let gc = &g.data()[o * oh * ow..(o + 1) * oh * ow];
                        for c in 0..ci {
                            let xc = &vx.data()[c * h * wd..(c + 1) * h * wd];
                            for ky in 0..k {
                                for kx in 0..k {
                                    let dy = ky as isize - pad;
                                    let dx = kx as isize - pad;
                                    let y0 = (-dy).max(0) as usize;
                                    let y1 = ((h as isize - dy).min(oh as isize)).max(0) as usize;
                                    let x0 = (-dx).max(0) as usize;
                                    let x1 = ((wd as isize - dx).min(ow as isize)).max(0) as usize;
                                    if x0 >= x1 {
                                        continue;
                                    }
                                    let mut s = 0.0;
                                    for y in y0..y1 {
                                        let sy = (y as isize + dy) as usize;
                                        let sx = (x0 as isize + dx) as usize;
                                        s += dot(
                                            &gc[y * ow + x0..y * ow + x1],
                                            &xc[sy * wd + sx..sy * wd + sx + (x1 - x0)],
                                        );
                                    }
                                    dw[((o * ci + c) * k + ky) * k + kx] = s;
                                }
                            }
                        }
                    }
                    bump(self, *w, Tensor::from_vec(vw.shape(), dw)?);
                }
                if self.requires(*x) {
                    let wdat = vw.data();
                    let mut dx = vec![0.0; vx.numel()];
                    for o in 0..co {
                        let gc = &g.data()[o * oh * ow..(o + 1) * oh * ow];
                        for c in 0..ci {
                            let dxc = &mut dx[c * h * wd..(c + 1) * h * wd];
                            for ky in 0..k {
                                for kx in 0..k {
                                    let wv = wdat[((o * ci + c) * k + ky) * k + kx];
                                    let dy = ky as isize - pad;
                                    let dx2 = kx as isize - pad;
                                    let y0 = (-dy).max(0) as usize;
                                    let y1 = ((h as isize - dy).min(oh as isize)).max(0) as usize;
                                    let x0 = (-dx2).max(0) as usize;
                                    let x1 = ((wd as isize - dx2).min(ow as isize)).max(0) as usize;
                                    if x0 >= x1 {
                                        continue;
                                    }
                                    for y in y0..y1 {
                                        let sy = (y as isize + dy) as usize;
                                        let sx = (x0 as isize + dx2) as usize;
                                        let dst = &mut dxc[sy * wd + sx..sy * wd + sx + (x1 - x0)];
                                        axpy(dst, wv, &gc[y * ow + x0..y * ow + x1]);
                                    }
                                }
                            }
                        }
                    }
                    bump(self, *x, Tensor::from_vec(vx.shape(), dx)?);
                }
            }
            Op::AvgPool2(a) => {
                let va = self.value(*a);
                let (c, h, w) = (va.shape()[0], va.shape()[1], va.shape()[2]);
                let (oh, ow) = (h / 2, w / 2);
                let mut d = vec![0.0; va.numel()];
                for ch in 0..c {
                    for y in 0..oh {
                        for x in 0..ow {
                            let gv = 0.25 * g.data()[(ch * oh + y) * ow + x];
                            let base = (ch * h + 2 * y) * w + 2 * x;
                            d[base] += gv;
                            d[base + 1] += gv;
                            d[base + w] += gv;
                            d[base + w + 1] += gv;
                        }
                    }
                }
                bump(self, *a, Tensor::from_vec(va.shape(), d)?);
            }
            Op::Upsample2(a) => {
                let va = self.value(*a);
                let (c, h, w) = (va.shape()[0], va.shape()[1], va.shape()[2]);
                let (oh, ow) = (2 * h, 2 * w);
                let mut d = vec![0.0; va.numel()];
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            let base = (ch * oh + 2 * y) * ow + 2 * x;
                            d[(ch * h + y) * w + x] = g.data()[base]
                                + g.data()[base + 1]
                                + g.data()[base + ow]
                                + g.data()[base + ow + 1];
                        }
                    }
                }
                bump(self, *a, Tensor::from_vec(va.shape(), d)?);
            }
            Op::ConcatChannels(xs) => {
                let (h, w) = (g.shape()[1], g.shape()[2]);
                let mut offset = 0;
                for &xv in xs {
                    let cx = self.value(xv).shape()[0];
                    if self.requires(xv) {
                        let d = g.data()[offset * h * w..(offset + cx) * h * w].to_vec();
                        bump(self, xv, Tensor::from_vec(&[cx, h, w], d)?);
                    }
                    offset += cx;
                }
            }
            Op::SliceChannels { x, from, to } => {
                let vx = self.value(*x);
                let (h, w) = (vx.shape()[1], vx.shape()[2]);
                let mut d = vec![0.0; vx.numel()];
                d[from * h * w..to * h * w].copy_from_slice(g.data());
                bump(self, *x, Tensor::from_vec(vx.shape(), d)?);
            }
            Op::ConcatCols(xs) => {
                let (m, ntot) = (g.shape()[0], g.shape()[1]);
                let mut col = 0;
                for &xv in xs {
                    let n = self.value(xv).shape()[1];
                    if self.requires(xv) {
                        let mut d = vec![0.0; m * n];
                        for r in 0..m {
                            d[r * n..(r + 1) * n].copy_from_slice(&g.data()[r * ntot + col..r * ntot + col + n]);
                        }
                        bump(self, xv, Tensor::from_vec(&[m, n], d)?);
                    }
                    col += n;
                }
            }
            Op::SliceCols { x, from, to } => {
                let vx = self.value(*x);
                let (m, n) = (vx.shape()[0], vx.shape()[1]);
                let k = to - from;
                let mut d = vec![0.0; m * n];
                for r in 0..m {
                    d[r * n + from..r * n + to].copy_from_slice(&g.data()[r * k..(r + 1) * k]);
                }
                bump(self, *x, Tensor::from_vec(vx.shape(), d)?);
            }
            Op::Reshape(x) => {
                let vx = self.value(*x);
                bump(self, *x, Tensor::from_vec(vx.shape(), g.data().to_vec())?);
            }
            Op::SumAll(x) => {
                let vx = self.value(*x);
                let gv = g.item();
                bump(self, *x, Tensor::from_vec(vx.shape(), vec![gv; vx.numel()])?);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// Independent oracle: triple-loop matmul, no shortcuts.
    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    /// Independent oracle: direct convolution with explicit zero padding.
    #[allow(clippy::too_many_arguments)]
    fn naive_conv(x: &[f64], w: &[f64], b: &[f64], ci: usize, h: usize, wd: usize, co: usize, k: usize, pad: usize) -> Vec<f64> {
        let oh = h + 2 * pad - k + 1;
        let ow = wd + 2 * pad - k + 1;
        let mut out = vec![0.0; co * oh * ow];
        for o in 0..co {
            for y in 0..oh {
                for x2 in 0..ow {
                    let mut s = b[o];
                    for c in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let sy = y as isize + ky as isize - pad as isize;
                                let sx = x2 as isize + kx as isize - pad as isize;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                    continue;
                                }
                                s += x[(c * h + sy as usize) * wd + sx as usize]
                                    * w[((o * ci + c) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[(o * oh + y) * ow + x2] = s;
                }
            }
        }
        out
    }

    #[test]
    fn matmul_matches_triple_loop() {
        use rand::Rng;
        let mut rng = crate::rng::stream(11, "test.matmul");
        let (m, k, n) = (5, 7, 6);
        let a: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut t = Tape::new();
        let va = t.leaf(Tensor::from_vec(&[m, k], a.clone()).unwrap()).unwrap();
        let vb = t.leaf(Tensor::from_vec(&[k, n], b.clone()).unwrap()).unwrap();
        let c = t.matmul(va, vb).unwrap();
        let want = naive_matmul(&a, &b, m, k, n);
        for (got, want) in t.value(c).data().iter().zip(&want) {
            assert_abs_diff_eq!(got, want, epsilon = 1e-12);
        }
    }

    #[test]
    fn matmul_frozen_value() {
        // [[1,2],[3,4]] x [[5,6],[7,8]] = [[19,22],[43,50]]; worked by hand.
        let mut t = Tape::new();
        let a = t.leaf(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let b = t.leaf(Tensor::from_vec(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap()).unwrap();
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn conv2d_matches_direct_convolution() {
        use rand::Rng;
        let mut rng = crate::rng::stream(12, "test.conv");
        for &(ci, co, k, pad, h, wd) in &[(1usize, 1usize, 3usize, 1usize, 4usize, 5usize), (2, 3, 3, 1, 6, 6), (3, 2, 1, 0, 5, 4)] {
            let x: Vec<f64> = (0..ci * h * wd).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let w: Vec<f64> = (0..co * ci * k * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..co).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut t = Tape::new();
            let vx = t.leaf(Tensor::from_vec(&[ci, h, wd], x.clone()).unwrap()).unwrap();
            let vw = t.leaf(Tensor::from_vec(&[co, ci, k, k], w.clone()).unwrap()).unwrap();
            let vb = t.leaf(Tensor::from_vec(&[co], b.clone()).unwrap()).unwrap();
            let out = t.conv2d(vx, vw, vb, pad).unwrap();
            let want = naive_conv(&x, &w, &b, ci, h, wd, co, k, pad);
            assert_eq!(t.value(out).numel(), want.len());
            for (got, want) in t.value(out).data().iter().zip(&want) {
                assert_abs_diff_eq!(got, want, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn conv2d_frozen_value() {
        // 1x3x3 input 1..9, identity-ish kernel picking center+right, pad 1.
        // out(y,x) = x(y,x) + x(y,x+1), computed by hand.
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(&[1, 3, 3], (1..=9).map(f64::from).collect()).unwrap()).unwrap();
        let mut k = vec![0.0; 9];
        k[4] = 1.0; // center
        k[5] = 1.0; // right
        let w = t.leaf(Tensor::from_vec(&[1, 1, 3, 3], k).unwrap()).unwrap();
        let b = t.leaf(Tensor::from_vec(&[1], vec![0.0]).unwrap()).unwrap();
        let out = t.conv2d(x, w, b, 1).unwrap();
        assert_eq!(t.value(out).data(), &[3.0, 5.0, 3.0, 9.0, 11.0, 6.0, 15.0, 17.0, 9.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::from_vec(&[2, 3], vec![0.5, -1.0, 2.0, 100.0, 100.0, 100.0]).unwrap()).unwrap();
        let s = t.softmax_rows(a).unwrap();
        let d = t.value(s).data();
        assert_abs_diff_eq!(d[0] + d[1] + d[2], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(d[3], 1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn ce_matches_negative_log_prob() {
        // Single pixel, 3 classes, label 2: loss = -log softmax(logits)[2].
        let logits = vec![0.2, -0.4, 1.1];
        let mut t = Tape::new();
        let a = t.leaf(Tensor::from_vec(&[3, 1, 1], logits.clone()).unwrap()).unwrap();
        let l = t.ce_channels(a, &[2]).unwrap();
        let z: f64 = logits.iter().map(|v| v.exp()).sum();
        let want = -(logits[2].exp() / z).ln();
        assert_abs_diff_eq!(t.value(l).item(), want, epsilon = 1e-12);
    }

    #[test]
    fn pool_then_upsample_shapes_roundtrip() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::from_vec(&[2, 4, 4], (0..32).map(|i| i as f64).collect()).unwrap()).unwrap();
        let p = t.avgpool2(a).unwrap();
        assert_eq!(t.value(p).shape(), &[2, 2, 2]);
        let u = t.upsample2(p).unwrap();
        assert_eq!(t.value(u).shape(), &[2, 4, 4]);
        // Pool of the first 2x2 block of channel 0 is mean(0,1,4,5) = 2.5.
        assert_eq!(t.value(p).at3(0, 0, 0), 2.5);
    }

    #[test]
    fn concat_slice_roundtrip_cols_and_channels() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let b = t.leaf(Tensor::from_vec(&[2, 1], vec![9.0, 8.0]).unwrap()).unwrap();
        let c = t.concat_cols(&[a, b]).unwrap();
        assert_eq!(t.value(c).data(), &[1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);
        let s = t.slice_cols(c, 2, 3).unwrap();
        assert_eq!(t.value(s).data(), &[9.0, 8.0]);

        let x = t.leaf(Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let y = t.leaf(Tensor::from_vec(&[2, 2, 2], (10..18).map(f64::from).collect()).unwrap()).unwrap();
        let cc = t.concat_channels(&[x, y]).unwrap();
        assert_eq!(t.value(cc).shape(), &[3, 2, 2]);
        let sl = t.slice_channels(cc, 1, 3).unwrap();
        assert_eq!(t.value(sl).data(), t.value(y).data());
    }

    #[test]
    fn non_finite_forward_is_reported() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::from_vec(&[1], vec![1.0]).unwrap()).unwrap();
        let z = t.leaf(Tensor::from_vec(&[1], vec![0.0]).unwrap()).unwrap();
        let err = t.div(a, z).unwrap_err();
        match err {
            Error::NonFinite { op } => assert!(op.contains("div"), "op was {op}"),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn backward_simple_product_rule() {
        // f = sum(a*b) => df/da = b, df/db = a.
        let mut t = Tape::new();
        let a = t.leaf(Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        let b = t.leaf(Tensor::from_vec(&[3], vec![4.0, 5.0, 6.0]).unwrap()).unwrap();
        let m = t.mul(a, b).unwrap();
        let s = t.sum_all(m).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[4.0, 5.0, 6.0]);
        assert_eq!(g.get(b).unwrap().data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap()).unwrap();
        let c = t.constant(Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap()).unwrap();
        let m = t.mul(a, c).unwrap();
        let s = t.sum_all(m).unwrap();
        let g = t.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(a).unwrap().data(), &[3.0, 4.0]);
    }

    /// Manual throughput probe: `cargo test -p fedmema conv_throughput -- --ignored --nocapture`.
    #[test]
    #[ignore]
    fn conv_throughput_probe() {
        use rand::Rng;
        let mut rng = crate::rng::stream(1, "probe");
        let (ci, co, h, w) = (16usize, 16usize, 16usize, 16usize);
        let x: Vec<f64> = (0..ci * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wts: Vec<f64> = (0..co * ci * 9).map(|_| rng.gen_range(-0.2..0.2)).collect();
        let b: Vec<f64> = (0..co).map(|_| rng.gen_range(-0.1..0.1)).collect();
        let iters = 200;
        let t0 = std::time::Instant::now();
        let mut sink = 0.0;
        for _ in 0..iters {
            let mut t = Tape::new();
            let vx = t.leaf(Tensor::from_vec(&[ci, h, w], x.clone()).unwrap()).unwrap();
            let vw = t.leaf(Tensor::from_vec(&[co, ci, 3, 3], wts.clone()).unwrap()).unwrap();
            let vb = t.leaf(Tensor::from_vec(&[co], b.clone()).unwrap()).unwrap();
            let out = t.conv2d(vx, vw, vb, 1).unwrap();
            let s = t.sum_all(out).unwrap();
            let g = t.backward(s).unwrap();
            sink += g.get(vw).unwrap().data()[0];
        }
        let dt = t0.elapsed().as_secs_f64();
        // fwd MACs + ~2x for backward(dX, dW).
        let macs = (h * w * ci * co * 9 * 3) as f64 * iters as f64;
        println!("conv fwd+bwd: {:.2} GMAC/s (sink {sink:.3})", macs / dt / 1e9);
    }

    #[test]
    fn dot_is_order_stable() {
        // The 4-lane accumulation must give identical results on every call
        // and regardless of slice alignment games.
        let a: Vec<f64> = (0..23).map(|i| (i as f64 * 0.7).sin()).collect();
        let b: Vec<f64> = (0..23).map(|i| (i as f64 * 1.3).cos()).collect();
        let d1 = dot(&a, &b);
        let d2 = dot(&a, &b);
        assert_eq!(d1.to_bits(), d2.to_bits());
    }
}
