//! Forward kernels and their input-gradient counterparts.
//!
//! Every kernel is a pure function of its arguments. The `*_backward`
//! functions return the gradient with respect to the tensor input only;
//! parameters are treated as constants (nothing here trains).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_divisible, invalid, Error, Result};
use crate::tensor::{ensure_same_shape, Shape, Tensor};

/// Convolution weights plus geometry.
///
/// `weight` has shape `(out_channels, in_channels_per_group, k_h, k_w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub weight: Tensor,
    pub bias: Option<Vec<f64>>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvParams {
    pub fn new(weight: Tensor, bias: Option<Vec<f64>>, stride: usize, padding: usize, groups: usize) -> Result<Self> {
        if stride == 0 {
            return Err(invalid("conv2d: stride must be positive"));
        }
        if groups == 0 {
            return Err(invalid("conv2d: groups must be positive"));
        }
        let oc = weight.shape().b;
        check_divisible("conv2d", "out_channels", oc, groups)?;
        if let Some(bias) = &bias {
            if bias.len() != oc {
                return Err(Error::Shape {
                    op: "conv2d",
                    dim: "bias length",
                    expected: oc,
                    actual: bias.len(),
                });
            }
        }
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
            groups,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape().b
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape().c * self.groups
    }

    pub fn kernel(&self) -> (usize, usize) {
        let s = self.weight.shape();
        (s.h, s.w)
    }

    fn geometry(&self) -> ConvGeometry {
        let s = self.weight.shape();
        ConvGeometry {
            out_channels: s.b,
            in_per_group: s.c,
            kh: s.h,
            kw: s.w,
            stride: self.stride,
            padding: self.padding,
            groups: self.groups,
            shared: false,
        }
    }
}

/// Inference-form batch normalisation statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BNParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
}

impl BNParams {
    pub fn new(gamma: Vec<f64>, beta: Vec<f64>, running_mean: Vec<f64>, running_var: Vec<f64>, eps: f64) -> Result<Self> {
        let c = gamma.len();
        for (name, v) in [("beta", &beta), ("running_mean", &running_mean), ("running_var", &running_var)] {
            if v.len() != c {
                return Err(invalid(format!("batch_norm: {name} has {} entries, gamma has {c}", v.len())));
            }
        }
        let p = Self {
            gamma,
            beta,
            running_mean,
            running_var,
            eps,
        };
        p.validate()?;
        Ok(p)
    }

    /// gamma = 1, beta = 0, mean = 0, var = 1.
    pub fn identity(channels: usize, eps: f64) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn validate(&self) -> Result<()> {
        if !(self.eps >= 0.0) {
            return Err(invalid(format!("batch_norm: eps must be non-negative, got {}", self.eps)));
        }
        for (c, &v) in self.running_var.iter().enumerate() {
            if !(v >= 0.0) {
                return Err(invalid(format!("batch_norm: running_var[{c}] = {v} is negative")));
            }
            if v + self.eps <= 0.0 {
                return Err(invalid(format!("batch_norm: var + eps is zero for channel {c}")));
            }
        }
        Ok(())
    }

    fn inv_std(&self) -> Vec<f64> {
        self.running_var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect()
    }
}

/// Convolution followed by batch norm and SiLU.
#[derive(Clone, Debug, PartialEq)]
pub struct Cbs {
    pub conv: ConvParams,
    pub bn: BNParams,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Silu,
    Sigmoid,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

// ---------------------------------------------------------------------------
// convolution

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub out_channels: usize,
    pub in_per_group: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    /// When set, `out_channels` is the per-group width of one kernel tensor
    /// reused by every group.
    pub shared: bool,
}

impl ConvGeometry {
    pub(crate) fn shared(weight: Shape, groups: usize, stride: usize, padding: usize) -> Self {
        Self {
            out_channels: weight.b,
            in_per_group: weight.c,
            kh: weight.h,
            kw: weight.w,
            stride,
            padding,
            groups,
            shared: true,
        }
    }

    fn out_per_group(&self) -> usize {
        if self.shared {
            self.out_channels
        } else {
            self.out_channels / self.groups
        }
    }

    fn total_out(&self) -> usize {
        if self.shared {
            self.out_channels * self.groups
        } else {
            self.out_channels
        }
    }

    /// Row of the weight tensor used by output channel `oc`.
    #[inline]
    fn weight_row(&self, oc: usize) -> usize {
        if self.shared {
            oc % self.out_channels
        } else {
            oc
        }
    }

    pub(crate) fn output_shape(&self, op: &'static str, input: Shape) -> Result<Shape> {
        let expected_c = self.in_per_group * self.groups;
        if input.c != expected_c {
            return Err(Error::Shape {
                op,
                dim: "input channels",
                expected: expected_c,
                actual: input.c,
            });
        }
        let ph = input.h + 2 * self.padding;
        let pw = input.w + 2 * self.padding;
        if ph < self.kh {
            return Err(Error::Shape {
                op,
                dim: "padded height",
                expected: self.kh,
                actual: ph,
            });
        }
        if pw < self.kw {
            return Err(Error::Shape {
                op,
                dim: "padded width",
                expected: self.kw,
                actual: pw,
            });
        }
        Ok(Shape::new(
            input.b,
            self.total_out(),
            (ph - self.kh) / self.stride + 1,
            (pw - self.kw) / self.stride + 1,
        ))
    }
}

pub(crate) fn conv_forward(
    op: &'static str,
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&[f64]>,
    geo: ConvGeometry,
) -> Result<Tensor> {
    let is = input.shape();
    let os = geo.output_shape(op, is)?;
    let ws = weight.shape();
    let wdata = weight.data();
    let idata = input.data();
    let opg = geo.out_per_group();
    let out_plane = os.plane();
    let in_plane = is.plane();
    let mut out = vec![0.0; os.numel()];

    out.par_chunks_mut(out_plane.max(1))
        .enumerate()
        .for_each(|(plane_idx, dst)| {
            if out_plane == 0 {
                return;
            }
            let b = plane_idx / os.c;
            let oc = plane_idx % os.c;
            let g = oc / opg;
            let row = geo.weight_row(oc);
            let b0 = bias.map_or(0.0, |bs| bs[oc]);
            dst.iter_mut().for_each(|v| *v = b0);
            for icg in 0..geo.in_per_group {
                let ic = g * geo.in_per_group + icg;
                let src = &idata[(b * is.c + ic) * in_plane..][..in_plane];
                for ky in 0..geo.kh {
                    for kx in 0..geo.kw {
                        let wv = wdata[((row * ws.c + icg) * ws.h + ky) * ws.w + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for oy in 0..os.h {
                            let iy = (oy * geo.stride + ky) as isize - geo.padding as isize;
                            if iy < 0 || iy >= is.h as isize {
                                continue;
                            }
                            let srow = &src[iy as usize * is.w..][..is.w];
                            let drow = &mut dst[oy * os.w..][..os.w];
                            for (ox, d) in drow.iter_mut().enumerate() {
                                let ix = (ox * geo.stride + kx) as isize - geo.padding as isize;
                                if ix >= 0 && ix < is.w as isize {
                                    *d += wv * srow[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        });
    Tensor::from_vec(os, out)
}

/// Gradient of a convolution with respect to its input.
pub(crate) fn conv_backward_input(
    grad_out: &Tensor,
    input_shape: Shape,
    weight: &Tensor,
    geo: ConvGeometry,
) -> Tensor {
    let os = grad_out.shape();
    let is = input_shape;
    let ws = weight.shape();
    let wdata = weight.data();
    let gdata = grad_out.data();
    let opg = geo.out_per_group();
    let in_plane = is.plane();
    let out_plane = os.plane();
    let mut grad_in = vec![0.0; is.numel()];

    grad_in
        .par_chunks_mut(in_plane.max(1))
        .enumerate()
        .for_each(|(plane_idx, dst)| {
            if in_plane == 0 {
                return;
            }
            let b = plane_idx / is.c;
            let ic = plane_idx % is.c;
            let g = ic / geo.in_per_group;
            let icg = ic % geo.in_per_group;
            for ocg in 0..opg {
                let oc = g * opg + ocg;
                let row = geo.weight_row(oc);
                let src = &gdata[(b * os.c + oc) * out_plane..][..out_plane];
                for ky in 0..geo.kh {
                    for kx in 0..geo.kw {
                        let wv = wdata[((row * ws.c + icg) * ws.h + ky) * ws.w + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for oy in 0..os.h {
                            let iy = (oy * geo.stride + ky) as isize - geo.padding as isize;
                            if iy < 0 || iy >= is.h as isize {
                                continue;
                            }
                            let iy = iy as usize;
                            for ox in 0..os.w {
                                let ix = (ox * geo.stride + kx) as isize - geo.padding as isize;
                                if ix >= 0 && ix < is.w as isize {
                                    dst[iy * is.w + ix as usize] += wv * src[oy * os.w + ox];
                                }
                            }
                        }
                    }
                }
            }
        });
    Tensor::from_vec(is, grad_in).expect("gradient has input shape")
}

/// 2-D cross-correlation with zero padding and channel groups.
pub fn conv2d(input: &Tensor, params: &ConvParams) -> Result<Tensor> {
    conv_forward("conv2d", input, &params.weight, params.bias.as_deref(), params.geometry())
}

// ---------------------------------------------------------------------------
// normalisation and activations

fn check_bn(input: Shape, p: &BNParams) -> Result<()> {
    if p.channels() != input.c {
        return Err(Error::Shape {
            op: "batch_norm",
            dim: "channels",
            expected: p.channels(),
            actual: input.c,
        });
    }
    p.validate()
}

pub fn batch_norm(input: &Tensor, p: &BNParams) -> Result<Tensor> {
    let s = input.shape();
    check_bn(s, p)?;
    let inv = p.inv_std();
    let plane = s.plane().max(1);
    let data = input
        .data()
        .chunks(plane)
        .enumerate()
        .flat_map(|(i, ch)| {
            let c = i % s.c;
            let (g, b, m, is) = (p.gamma[c], p.beta[c], p.running_mean[c], inv[c]);
            ch.iter().map(move |&x| g * (x - m) * is + b)
        })
        .collect();
    Tensor::from_vec(s, data)
}

pub(crate) fn batch_norm_backward(grad_out: &Tensor, p: &BNParams) -> Tensor {
    let s = grad_out.shape();
    let inv = p.inv_std();
    let plane = s.plane().max(1);
    let data = grad_out
        .data()
        .chunks(plane)
        .enumerate()
        .flat_map(|(i, ch)| {
            let scale = p.gamma[i % s.c] * inv[i % s.c];
            ch.iter().map(move |&g| g * scale)
        })
        .collect();
    Tensor::from_vec(s, data).expect("same shape")
}

pub fn activation(input: &Tensor, kind: Activation) -> Tensor {
    match kind {
        Activation::Silu => input.map(silu),
        Activation::Sigmoid => input.map(sigmoid),
    }
}

pub(crate) fn activation_backward(grad_out: &Tensor, input: &Tensor, kind: Activation) -> Tensor {
    let d = |x: f64| {
        let s = sigmoid(x);
        match kind {
            Activation::Silu => s * (1.0 + x * (1.0 - s)),
            Activation::Sigmoid => s * (1.0 - s),
        }
    };
    grad_out
        .zip_map(input, "activation_backward", |g, x| g * d(x))
        .expect("same shape")
}

pub fn cbs(input: &Tensor, conv: &ConvParams, bn: &BNParams) -> Result<Tensor> {
    let y = conv2d(input, conv)?;
    let y = batch_norm(&y, bn)?;
    Ok(activation(&y, Activation::Silu))
}

// ---------------------------------------------------------------------------
// channel plumbing

pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| invalid("concat_channels: no parts"))?
        .shape();
    let mut c = 0;
    for p in parts {
        let s = p.shape();
        for (dim, e, a) in [("batch", first.b, s.b), ("height", first.h, s.h), ("width", first.w, s.w)] {
            if e != a {
                return Err(Error::Shape {
                    op: "concat_channels",
                    dim,
                    expected: e,
                    actual: a,
                });
            }
        }
        c += s.c;
    }
    let out_shape = first.with_channels(c);
    let mut data = Vec::with_capacity(out_shape.numel());
    for b in 0..first.b {
        for p in parts {
            let s = p.shape();
            let n = s.c * s.plane();
            data.extend_from_slice(&p.data()[b * n..(b + 1) * n]);
        }
    }
    Tensor::from_vec(out_shape, data)
}

pub fn split_channels(input: &Tensor, sizes: &[usize]) -> Result<Vec<Tensor>> {
    let s = input.shape();
    let total: usize = sizes.iter().sum();
    if total != s.c {
        return Err(Error::Shape {
            op: "split_channels",
            dim: "channel sizes sum",
            expected: s.c,
            actual: total,
        });
    }
    let mut start = 0;
    Ok(sizes
        .iter()
        .map(|&n| {
            let t = slice_channels(input, start, n);
            start += n;
            t
        })
        .collect())
}

pub(crate) fn slice_channels(input: &Tensor, start: usize, len: usize) -> Tensor {
    let s = input.shape();
    let plane = s.plane();
    let mut data = Vec::with_capacity(s.b * len * plane);
    for b in 0..s.b {
        let off = (b * s.c + start) * plane;
        data.extend_from_slice(&input.data()[off..off + len * plane]);
    }
    Tensor::from_vec(s.with_channels(len), data).expect("slice shape")
}

/// Output channel `j` takes input channel `source[j]`.
pub fn gather_channels(input: &Tensor, source: &[usize]) -> Result<Tensor> {
    let s = input.shape();
    if source.len() != s.c {
        return Err(Error::Shape {
            op: "gather_channels",
            dim: "channels",
            expected: source.len(),
            actual: s.c,
        });
    }
    if let Some(&bad) = source.iter().find(|&&i| i >= s.c) {
        return Err(invalid(format!("gather_channels: source channel {bad} out of range")));
    }
    let mut data = Vec::with_capacity(s.numel());
    for b in 0..s.b {
        for &src in source {
            data.extend_from_slice(input.plane(b, src));
        }
    }
    Tensor::from_vec(s, data)
}

/// Adjoint of [`gather_channels`]: scatter-add back to source channels.
pub(crate) fn gather_channels_backward(grad_out: &Tensor, source: &[usize]) -> Tensor {
    let s = grad_out.shape();
    let plane = s.plane();
    let mut data = vec![0.0; s.numel()];
    for b in 0..s.b {
        for (j, &src) in source.iter().enumerate() {
            let dst = &mut data[(b * s.c + src) * plane..][..plane];
            for (d, g) in dst.iter_mut().zip(grad_out.plane(b, j)) {
                *d += g;
            }
        }
    }
    Tensor::from_vec(s, data).expect("same shape")
}

// ---------------------------------------------------------------------------
// strip pooling and spatial reshaping

/// Row summaries `(b, c, h, 1)` and column summaries `(b, c, 1, w)`, each the
/// sum of the average and the maximum along the pooled axis.
pub fn strip_pools(input: &Tensor) -> Result<(Tensor, Tensor)> {
    let s = input.shape();
    if s.h == 0 || s.w == 0 {
        return Err(invalid(format!("strip_pools: empty spatial extent {s}")));
    }
    let mut vh = Vec::with_capacity(s.b * s.c * s.h);
    let mut vw = Vec::with_capacity(s.b * s.c * s.w);
    for b in 0..s.b {
        for c in 0..s.c {
            let p = input.plane(b, c);
            for row in p.chunks(s.w) {
                let mean = row.iter().sum::<f64>() / s.w as f64;
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                vh.push(mean + max);
            }
            for x in 0..s.w {
                let col = (0..s.h).map(|y| p[y * s.w + x]);
                let mean = col.clone().sum::<f64>() / s.h as f64;
                let max = col.fold(f64::NEG_INFINITY, f64::max);
                vw.push(mean + max);
            }
        }
    }
    Ok((
        Tensor::from_vec(Shape::new(s.b, s.c, s.h, 1), vh)?,
        Tensor::from_vec(Shape::new(s.b, s.c, 1, s.w), vw)?,
    ))
}

fn argmax(it: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in it.enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

pub(crate) fn strip_pools_backward(input: &Tensor, grad_h: Option<&Tensor>, grad_w: Option<&Tensor>) -> Tensor {
    let s = input.shape();
    let mut data = vec![0.0; s.numel()];
    for b in 0..s.b {
        for c in 0..s.c {
            let p = input.plane(b, c);
            let dst = &mut data[(b * s.c + c) * s.plane()..][..s.plane()];
            if let Some(gh) = grad_h {
                for y in 0..s.h {
                    let g = gh.at(b, c, y, 0);
                    let row = &p[y * s.w..][..s.w];
                    for x in 0..s.w {
                        dst[y * s.w + x] += g / s.w as f64;
                    }
                    dst[y * s.w + argmax(row.iter().copied())] += g;
                }
            }
            if let Some(gw) = grad_w {
                for x in 0..s.w {
                    let g = gw.at(b, c, 0, x);
                    for y in 0..s.h {
                        dst[y * s.w + x] += g / s.h as f64;
                    }
                    let am = argmax((0..s.h).map(|y| p[y * s.w + x]));
                    dst[am * s.w + x] += g;
                }
            }
        }
    }
    Tensor::from_vec(s, data).expect("input shape")
}

/// Swap the two spatial axes.
pub fn transpose_hw(input: &Tensor) -> Tensor {
    let s = input.shape();
    Tensor::from_fn(Shape::new(s.b, s.c, s.w, s.h), |b, c, y, x| input.at(b, c, x, y))
}

/// Concatenate along the height axis; all parts share `(b, c, w)`.
pub fn concat_height(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| invalid("concat_height: no parts"))?
        .shape();
    let mut h = 0;
    for p in parts {
        let s = p.shape();
        for (dim, e, a) in [("batch", first.b, s.b), ("channels", first.c, s.c), ("width", first.w, s.w)] {
            if e != a {
                return Err(Error::Shape {
                    op: "concat_height",
                    dim,
                    expected: e,
                    actual: a,
                });
            }
        }
        h += s.h;
    }
    let out = Shape::new(first.b, first.c, h, first.w);
    let mut data = Vec::with_capacity(out.numel());
    for b in 0..first.b {
        for c in 0..first.c {
            for p in parts {
                data.extend_from_slice(p.plane(b, c));
            }
        }
    }
    Tensor::from_vec(out, data)
}

pub fn split_height(input: &Tensor, sizes: &[usize]) -> Result<Vec<Tensor>> {
    let s = input.shape();
    let total: usize = sizes.iter().sum();
    if total != s.h {
        return Err(Error::Shape {
            op: "split_height",
            dim: "height sizes sum",
            expected: s.h,
            actual: total,
        });
    }
    let mut start = 0;
    Ok(sizes
        .iter()
        .map(|&n| {
            let t = Tensor::from_fn(Shape::new(s.b, s.c, n, s.w), |b, c, y, x| input.at(b, c, start + y, x));
            start += n;
            t
        })
        .collect())
}

/// Per-channel outer product of a column `(b, c, h, 1)` and a column
/// `(b, c, w, 1)`, giving `(b, c, h, w)`.
pub fn outer_hw(col_h: &Tensor, col_w: &Tensor) -> Result<Tensor> {
    let sh = col_h.shape();
    let sw = col_w.shape();
    for (dim, e, a) in [("batch", sh.b, sw.b), ("channels", sh.c, sw.c), ("width", 1, sh.w), ("width", 1, sw.w)] {
        if e != a {
            return Err(Error::Shape {
                op: "outer_hw",
                dim,
                expected: e,
                actual: a,
            });
        }
    }
    Ok(Tensor::from_fn(Shape::new(sh.b, sh.c, sh.h, sw.h), |b, c, y, x| {
        col_h.at(b, c, y, 0) * col_w.at(b, c, x, 0)
    }))
}

pub(crate) fn outer_hw_backward(grad_out: &Tensor, col_h: &Tensor, col_w: &Tensor) -> (Tensor, Tensor) {
    let s = grad_out.shape();
    let gh = Tensor::from_fn(col_h.shape(), |b, c, y, _| {
        (0..s.w).map(|x| grad_out.at(b, c, y, x) * col_w.at(b, c, x, 0)).sum()
    });
    let gw = Tensor::from_fn(col_w.shape(), |b, c, x, _| {
        (0..s.h).map(|y| grad_out.at(b, c, y, x) * col_h.at(b, c, y, 0)).sum()
    });
    (gh, gw)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_map(b, "add", |x, y| x + y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_map(b, "mul", |x, y| x * y)
}

pub(crate) fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    ensure_same_shape(op, a.shape(), b.shape())
}
