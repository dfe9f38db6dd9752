//! Forward and backward kernels. All kernels take image tensors in channel
//! major layout, `[C, H, W]`, with an optional leading batch axis.

use rayon::prelude::*;

use super::{numel, DType, Tensor};
use crate::error::{shape_err, Error, Result};

pub const LAYERNORM_EPS: f64 = 1e-6;

/// Splits an image tensor into (batch, channels, height, width).
fn image_dims(t: &Tensor, what: &str) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((1, c, h, w)),
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => shape_err(format!("{what} expects [C,H,W] or [N,C,H,W], got {:?}", t.shape())),
    }
}

fn image_shape(batched: bool, n: usize, c: usize, h: usize, w: usize) -> Vec<usize> {
    if batched {
        vec![n, c, h, w]
    } else {
        vec![c, h, w]
    }
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    groups: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }
}

/// Output indices `o` in `[lo, hi)` such that `o * stride + offset` lands
/// inside `0..len_in`.
fn valid_range(offset: isize, stride: usize, len_in: usize, len_out: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { ((-offset) + s - 1) / s };
    let last = len_in as isize - 1 - offset;
    let hi = if last < 0 { 0 } else { last / s + 1 };
    let hi = hi.min(len_out as isize);
    if hi <= lo {
        (0, 0)
    } else {
        (lo as usize, hi as usize)
    }
}

fn conv_geom(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<(usize, ConvGeom)> {
    let (n, cin, h, w) = image_dims(input, "conv2d")?;
    let [cout, cin_g, kh, kw] = *weight.shape() else {
        return shape_err(format!("conv2d weight must be rank 4, got {:?}", weight.shape()));
    };
    if kh != kw || kh % 2 == 0 {
        return Err(Error::InvalidArgument(format!("kernel must be square and odd, got {kh}x{kw}")));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be positive".into()));
    }
    if groups == 0 || cin % groups != 0 || cout % groups != 0 {
        return Err(Error::InvalidArgument(format!(
            "groups={groups} must divide in={cin} and out={cout} channels"
        )));
    }
    if cin / groups != cin_g {
        return shape_err(format!(
            "weight expects {cin_g} input channels per group, input has {} ({cin}/{groups})",
            cin / groups
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return shape_err(format!("bias shape {:?} for {cout} output channels", b.shape()));
        }
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return shape_err(format!("kernel {kh} larger than padded input {h}x{w}"));
    }
    let ho = (h + 2 * padding - kh) / stride + 1;
    let wo = (w + 2 * padding - kw) / stride + 1;
    Ok((n, ConvGeom { cin, h, w, cout, k: kh, stride, pad: padding, groups, ho, wo }))
}

fn conv_forward_single(g: &ConvGeom, input: &[f64], weight: &[f64], bias: Option<&[f64]>, out: &mut [f64]) {
    let (cin_g, cout_g, k, s) = (g.cin_g(), g.cout_g(), g.k, g.stride);
    let plane_in = g.h * g.w;
    let plane_out = g.ho * g.wo;
    out.par_chunks_mut(plane_out).enumerate().for_each(|(o, out_o)| {
        out_o.fill(bias.map_or(0.0, |b| b[o]));
        let grp = o / cout_g;
        for ci in 0..cin_g {
            let ic = grp * cin_g + ci;
            let inp = &input[ic * plane_in..(ic + 1) * plane_in];
            for kh in 0..k {
                let offy = kh as isize - g.pad as isize;
                let (ylo, yhi) = valid_range(offy, s, g.h, g.ho);
                for kw in 0..k {
                    let wv = weight[((o * cin_g + ci) * k + kh) * k + kw];
                    let offx = kw as isize - g.pad as isize;
                    let (xlo, xhi) = valid_range(offx, s, g.w, g.wo);
                    if xlo >= xhi {
                        continue;
                    }
                    for oy in ylo..yhi {
                        let iy = (oy * s) as isize + offy;
                        let row = &inp[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let orow = &mut out_o[oy * g.wo..(oy + 1) * g.wo];
                        if s == 1 {
                            let ix0 = (xlo as isize + offx) as usize;
                            for (dst, &src) in orow[xlo..xhi].iter_mut().zip(&row[ix0..ix0 + (xhi - xlo)]) {
                                *dst += wv * src;
                            }
                        } else {
                            for ox in xlo..xhi {
                                orow[ox] += wv * row[((ox * s) as isize + offx) as usize];
                            }
                        }
                    }
                }
            }
        }
    });
}

/// 2-D cross-correlation with zero padding.
///
/// `weight` is `[C_out, C_in / groups, k, k]`. A depth-wise convolution is
/// `groups == C_in == C_out`.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<Tensor> {
    let (n, g) = conv_geom(input, weight, bias, stride, padding, groups)?;
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * g.ho * g.wo;
    let mut out = vec![0.0; n * out_len];
    for b in 0..n {
        conv_forward_single(
            &g,
            &input.data()[b * in_len..(b + 1) * in_len],
            weight.data(),
            bias.map(|b| b.data()),
            &mut out[b * out_len..(b + 1) * out_len],
        );
    }
    let dtype = input.dtype().promote(weight.dtype());
    Ok(Tensor::from_parts(image_shape(input.rank() == 4, n, g.cout, g.ho, g.wo), out, dtype))
}

pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Gradients of [`conv2d`] with respect to its input (when `need_input`),
/// weight and bias, given the upstream gradient `grad_out`.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: usize,
    groups: usize,
    need_input: bool,
) -> Result<ConvGrads> {
    let (n, g) = conv_geom(input, weight, None, stride, padding, groups)?;
    let (gn, gc, gh, gw) = image_dims(grad_out, "conv2d_backward")?;
    if (gn, gc, gh, gw) != (n, g.cout, g.ho, g.wo) {
        return shape_err(format!("grad_out {:?} does not match conv output", grad_out.shape()));
    }
    let (cin_g, cout_g, k, s) = (g.cin_g(), g.cout_g(), g.k, g.stride);
    let plane_in = g.h * g.w;
    let plane_out = g.ho * g.wo;
    let in_len = g.cin * plane_in;
    let out_len = g.cout * plane_out;
    let x = input.data();
    let wt = weight.data();
    let go = grad_out.data();

    let mut gw_buf = vec![0.0; weight.len()];
    gw_buf.par_chunks_mut(cin_g * k * k).enumerate().for_each(|(o, gw_o)| {
        let grp = o / cout_g;
        for b in 0..n {
            let gout = &go[b * out_len + o * plane_out..b * out_len + (o + 1) * plane_out];
            for ci in 0..cin_g {
                let ic = grp * cin_g + ci;
                let inp = &x[b * in_len + ic * plane_in..b * in_len + (ic + 1) * plane_in];
                for kh in 0..k {
                    let offy = kh as isize - g.pad as isize;
                    let (ylo, yhi) = valid_range(offy, s, g.h, g.ho);
                    for kw in 0..k {
                        let offx = kw as isize - g.pad as isize;
                        let (xlo, xhi) = valid_range(offx, s, g.w, g.wo);
                        let mut acc = 0.0;
                        for oy in ylo..yhi {
                            let iy = ((oy * s) as isize + offy) as usize;
                            let row = &inp[iy * g.w..(iy + 1) * g.w];
                            let grow = &gout[oy * g.wo..(oy + 1) * g.wo];
                            for ox in xlo..xhi {
                                acc += grow[ox] * row[((ox * s) as isize + offx) as usize];
                            }
                        }
                        gw_o[(ci * k + kh) * k + kw] += acc;
                    }
                }
            }
        }
    });

    let mut gb_buf = vec![0.0; g.cout];
    for b in 0..n {
        for (o, gb) in gb_buf.iter_mut().enumerate() {
            *gb += go[b * out_len + o * plane_out..b * out_len + (o + 1) * plane_out].iter().sum::<f64>();
        }
    }

    let gin = if need_input {
        let mut gi = vec![0.0; n * in_len];
        for b in 0..n {
            let gout_b = &go[b * out_len..(b + 1) * out_len];
            gi[b * in_len..(b + 1) * in_len].par_chunks_mut(plane_in).enumerate().for_each(|(ic, gi_c)| {
                let grp = ic / cin_g;
                let ci = ic % cin_g;
                for o in grp * cout_g..(grp + 1) * cout_g {
                    let gout = &gout_b[o * plane_out..(o + 1) * plane_out];
                    for kh in 0..k {
                        let offy = kh as isize - g.pad as isize;
                        let (ylo, yhi) = valid_range(offy, s, g.h, g.ho);
                        for kw in 0..k {
                            let wv = wt[((o * cin_g + ci) * k + kh) * k + kw];
                            let offx = kw as isize - g.pad as isize;
                            let (xlo, xhi) = valid_range(offx, s, g.w, g.wo);
                            for oy in ylo..yhi {
                                let iy = ((oy * s) as isize + offy) as usize;
                                let grow = &gout[oy * g.wo..(oy + 1) * g.wo];
                                let irow = &mut gi_c[iy * g.w..(iy + 1) * g.w];
                                for ox in xlo..xhi {
                                    irow[((ox * s) as isize + offx) as usize] += wv * grow[ox];
                                }
                            }
                        }
                    }
                }
            });
        }
        Some(Tensor::from_parts(input.shape().to_vec(), gi, DType::F64))
    } else {
        None
    };

    Ok(ConvGrads {
        input: gin,
        weight: Tensor::from_parts(weight.shape().to_vec(), gw_buf, DType::F64),
        bias: Tensor::from_parts(vec![g.cout], gb_buf, DType::F64),
    })
}

// ---------------------------------------------------------------------------
// Pixel (un)shuffle
// ---------------------------------------------------------------------------

/// `[C, H, W] -> [C·r², H/r, W/r]`; output channel `c·r² + dy·r + dx` holds
/// the pixels at offset `(dy, dx)` inside each `r×r` block.
pub fn pixel_unshuffle(input: &Tensor, r: usize) -> Result<Tensor> {
    let (n, c, h, w) = image_dims(input, "pixel_unshuffle")?;
    if r == 0 || h % r != 0 || w % r != 0 {
        return shape_err(format!("pixel_unshuffle: {h}x{w} not divisible by r={r}"));
    }
    let (ho, wo) = (h / r, w / r);
    let x = input.data();
    let mut out = vec![0.0; x.len()];
    let plane = c * h * w;
    for b in 0..n {
        for ch in 0..c {
            for dy in 0..r {
                for dx in 0..r {
                    let oc = ch * r * r + dy * r + dx;
                    for y in 0..ho {
                        for xx in 0..wo {
                            out[b * plane + (oc * ho + y) * wo + xx] =
                                x[b * plane + (ch * h + y * r + dy) * w + xx * r + dx];
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(image_shape(input.rank() == 4, n, c * r * r, ho, wo), out, input.dtype()))
}

/// `[C, H, W] -> [C/r², H·r, W·r]`, the exact inverse of [`pixel_unshuffle`].
pub fn pixel_shuffle(input: &Tensor, r: usize) -> Result<Tensor> {
    let (n, c, h, w) = image_dims(input, "pixel_shuffle")?;
    if r == 0 || c % (r * r) != 0 {
        return shape_err(format!("pixel_shuffle: {c} channels not divisible by r²={}", r * r));
    }
    let co = c / (r * r);
    let (ho, wo) = (h * r, w * r);
    let x = input.data();
    let mut out = vec![0.0; x.len()];
    let plane = c * h * w;
    for b in 0..n {
        for ch in 0..co {
            for dy in 0..r {
                for dx in 0..r {
                    let ic = ch * r * r + dy * r + dx;
                    for y in 0..h {
                        for xx in 0..w {
                            out[b * plane + (ch * ho + y * r + dy) * wo + xx * r + dx] =
                                x[b * plane + (ic * h + y) * w + xx];
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(image_shape(input.rank() == 4, n, co, ho, wo), out, input.dtype()))
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal CDF via `erf`.
#[inline]
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

#[inline]
pub fn gelu_scalar(x: f64) -> f64 {
    x * normal_cdf(x)
}

#[inline]
pub fn gelu_derivative(x: f64) -> f64 {
    normal_cdf(x) + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Exact-erf GELU.
pub fn gelu(input: &Tensor) -> Tensor {
    input.map(gelu_scalar)
}

fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::InvalidArgument(format!("axis {axis} out of range for {shape:?}")));
    }
    Ok((numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..])))
}

/// Softmax along `axis`, stabilised by subtracting each slice's maximum.
pub fn softmax(input: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, n, inner) = axis_split(input.shape(), axis)?;
    let x = input.data();
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * n + j) * inner + i;
            let max = (0..n).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for j in 0..n {
                let e = (x[at(j)] - max).exp();
                out[at(j)] = e;
                denom += e;
            }
            for j in 0..n {
                out[at(j)] /= denom;
            }
        }
    }
    Ok(Tensor::from_parts(input.shape().to_vec(), out, input.dtype()))
}

/// Given softmax output `y` and upstream `dy`: `dx = y ⊙ (dy − Σ dy⊙y)`.
pub fn softmax_backward(y: &Tensor, dy: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, n, inner) = axis_split(y.shape(), axis)?;
    let (yv, gv) = (y.data(), dy.data());
    let mut out = vec![0.0; yv.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * n + j) * inner + i;
            let dot: f64 = (0..n).map(|j| yv[at(j)] * gv[at(j)]).sum();
            for j in 0..n {
                out[at(j)] = yv[at(j)] * (gv[at(j)] - dot);
            }
        }
    }
    Ok(Tensor::from_parts(y.shape().to_vec(), out, DType::F64))
}

// ---------------------------------------------------------------------------
// Channel layer norm
// ---------------------------------------------------------------------------

/// Standardises the channel vector at every pixel, then applies
/// `gamma · x̂ + beta`.
pub fn layernorm_channels(input: &Tensor, gamma: &Tensor, beta: Option<&Tensor>, eps: f64) -> Result<Tensor> {
    let (n, c, h, w) = image_dims(input, "layernorm_channels")?;
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    if gamma.shape() != [c] || beta.is_some_and(|b| b.shape() != [c]) {
        return shape_err(format!("affine parameters must be [{c}]"));
    }
    let hw = h * w;
    let x = input.data();
    let gm = gamma.data();
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        let base = b * c * hw;
        for p in 0..hw {
            let mean = (0..c).map(|ch| x[base + ch * hw + p]).sum::<f64>() / c as f64;
            let var = (0..c).map(|ch| (x[base + ch * hw + p] - mean).powi(2)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for ch in 0..c {
                let xhat = (x[base + ch * hw + p] - mean) * inv;
                out[base + ch * hw + p] = gm[ch] * xhat + beta.map_or(0.0, |bt| bt.data()[ch]);
            }
        }
    }
    let dtype = input.dtype().promote(gamma.dtype());
    Ok(Tensor::from_parts(input.shape().to_vec(), out, dtype))
}

pub struct LayerNormGrads {
    pub input: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
}

pub fn layernorm_channels_backward(input: &Tensor, gamma: &Tensor, grad_out: &Tensor, eps: f64) -> Result<LayerNormGrads> {
    let (n, c, h, w) = image_dims(input, "layernorm_channels_backward")?;
    if grad_out.shape() != input.shape() {
        return shape_err("grad_out must match the normalised input");
    }
    let hw = h * w;
    let x = input.data();
    let gm = gamma.data();
    let go = grad_out.data();
    let mut gx = vec![0.0; x.len()];
    let mut gg = vec![0.0; c];
    let mut gbeta = vec![0.0; c];
    let mut xhat = vec![0.0; c];
    let mut dxhat = vec![0.0; c];
    for b in 0..n {
        let base = b * c * hw;
        for p in 0..hw {
            let mean = (0..c).map(|ch| x[base + ch * hw + p]).sum::<f64>() / c as f64;
            let var = (0..c).map(|ch| (x[base + ch * hw + p] - mean).powi(2)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            let (mut mean_d, mut mean_dx) = (0.0, 0.0);
            for ch in 0..c {
                let i = base + ch * hw + p;
                xhat[ch] = (x[i] - mean) * inv;
                dxhat[ch] = go[i] * gm[ch];
                gg[ch] += go[i] * xhat[ch];
                gbeta[ch] += go[i];
                mean_d += dxhat[ch];
                mean_dx += dxhat[ch] * xhat[ch];
            }
            mean_d /= c as f64;
            mean_dx /= c as f64;
            for ch in 0..c {
                gx[base + ch * hw + p] = inv * (dxhat[ch] - mean_d - xhat[ch] * mean_dx);
            }
        }
    }
    Ok(LayerNormGrads {
        input: Tensor::from_parts(input.shape().to_vec(), gx, DType::F64),
        gamma: Tensor::from_parts(vec![c], gg, DType::F64),
        beta: Tensor::from_parts(vec![c], gbeta, DType::F64),
    })
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

/// Batched matrix product `[..., M, K] × [..., K, N] -> [..., M, N]`.
/// Leading batch extents must be equal.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ra, rb) = (a.rank(), b.rank());
    if ra < 2 || rb < 2 || ra != rb {
        return shape_err(format!("matmul needs equal ranks >= 2, got {:?} x {:?}", a.shape(), b.shape()));
    }
    let (m, ka) = (a.shape()[ra - 2], a.shape()[ra - 1]);
    let (kb, n) = (b.shape()[rb - 2], b.shape()[rb - 1]);
    if ka != kb || a.shape()[..ra - 2] != b.shape()[..rb - 2] {
        return shape_err(format!("matmul {:?} x {:?}", a.shape(), b.shape()));
    }
    let batch = numel(&a.shape()[..ra - 2]);
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; batch * m * n];
    out.par_chunks_mut(n).enumerate().for_each(|(row, orow)| {
        let bi = row / m;
        let arow = &ad[row * ka..(row + 1) * ka];
        let bmat = &bd[bi * ka * n..(bi + 1) * ka * n];
        for (kk, &av) in arow.iter().enumerate() {
            for (o, &bv) in orow.iter_mut().zip(&bmat[kk * n..(kk + 1) * n]) {
                *o += av * bv;
            }
        }
    });
    let mut shape = a.shape()[..ra - 2].to_vec();
    shape.extend([m, n]);
    Ok(Tensor::from_parts(shape, out, a.dtype().promote(b.dtype())))
}

/// Swaps the last two axes.
pub fn transpose_last2(t: &Tensor) -> Result<Tensor> {
    let r = t.rank();
    if r < 2 {
        return shape_err(format!("transpose needs rank >= 2, got {:?}", t.shape()));
    }
    let (m, n) = (t.shape()[r - 2], t.shape()[r - 1]);
    let batch = numel(&t.shape()[..r - 2]);
    let x = t.data();
    let mut out = vec![0.0; x.len()];
    for b in 0..batch {
        for i in 0..m {
            for j in 0..n {
                out[b * m * n + j * m + i] = x[b * m * n + i * n + j];
            }
        }
    }
    let mut shape = t.shape()[..r - 2].to_vec();
    shape.extend([n, m]);
    Ok(Tensor::from_parts(shape, out, t.dtype()))
}
