//! Graph builders for the attention, feed-forward and transformer block.
//!
//! Parameter bundles are generic so the same layout can hold tensor indices
//! inside a [`Model`](super::Model), recorded [`Var`]s while a graph is being
//! built, or plain tensors for standalone evaluation.

use crate::error::{shape_err, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Dimension-reduced self-attention parameters.
///
/// Query and key branches apply the strided 3×3 depth-wise convolution first
/// and the 1×1 channel projection second, so the projection already runs at
/// the reduced resolution. The value branch keeps full resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct DrsaParams<T> {
    /// `[C, 1, 3, 3]`, stride = spatial ratio.
    pub q_dw: T,
    /// `[C, C, 1, 1]`.
    pub q_pw: T,
    /// `[C, 1, 3, 3]`, stride = spatial ratio.
    pub k_dw: T,
    /// `[C', C, 1, 1]`.
    pub k_pw: T,
    /// `[C', C, 1, 1]`.
    pub v_pw: T,
    /// `[C', 1, 3, 3]`.
    pub v_dw: T,
    /// `[C, C, 1, 1]` output projection after the heads are concatenated.
    pub proj: T,
    /// `[heads]` log-temperatures.
    pub temperature: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FfnParams<T> {
    /// `[γC, C, 1, 1]`.
    pub expand: T,
    /// `[γC, 1, p, p]`.
    pub dw: T,
    /// `[C, γC, 1, 1]`.
    pub shrink: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T> {
    pub norm1: T,
    pub drsa: DrsaParams<T>,
    pub norm2: T,
    pub ffn: FfnParams<T>,
}

impl<T> DrsaParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> DrsaParams<U> {
        DrsaParams {
            q_dw: f(&self.q_dw),
            q_pw: f(&self.q_pw),
            k_dw: f(&self.k_dw),
            k_pw: f(&self.k_pw),
            v_pw: f(&self.v_pw),
            v_dw: f(&self.v_dw),
            proj: f(&self.proj),
            temperature: f(&self.temperature),
        }
    }
}

impl<T> FfnParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> FfnParams<U> {
        FfnParams { expand: f(&self.expand), dw: f(&self.dw), shrink: f(&self.shrink) }
    }
}

impl<T> BlockParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> BlockParams<U> {
        BlockParams {
            norm1: f(&self.norm1),
            drsa: self.drsa.map(&mut f),
            norm2: f(&self.norm2),
            ffn: self.ffn.map(&mut f),
        }
    }
}

fn chw(g: &Graph, x: Var, what: &str) -> Result<(usize, usize, usize)> {
    match *g.shape(x) {
        [c, h, w] => Ok((c, h, w)),
        ref s => shape_err(format!("{what} expects [C,H,W], got {s:?}")),
    }
}

/// Records channel attention on `x: [C, H, W]` and returns `[C, H, W]`.
///
/// Per head of width `d = C/heads`: `Q ∈ d×H'W'`, `K ∈ d'×H'W'`,
/// `V ∈ d'×HW`, `A = softmax_rows(QKᵀ/α) ∈ d×d'`, output `A·V`. The
/// effective `1/α` is `exp(−t)/√(H'W')` for the stored log-temperature `t`.
pub fn drsa(g: &mut Graph, x: Var, p: &DrsaParams<Var>, heads: usize, spatial_ratio: usize) -> Result<Var> {
    let (c, h, w) = chw(g, x, "drsa")?;
    let c_red = g.shape(p.k_pw)[0];
    if heads == 0 || c % heads != 0 || c_red % heads != 0 {
        return shape_err(format!("drsa: {c} / {c_red} channels not divisible by {heads} heads"));
    }
    if spatial_ratio == 0 || h % spatial_ratio != 0 || w % spatial_ratio != 0 {
        return shape_err(format!("drsa: {h}x{w} not divisible by spatial ratio {spatial_ratio}"));
    }
    if g.shape(p.temperature) != [heads] {
        return shape_err(format!("drsa: temperature {:?} for {heads} heads", g.shape(p.temperature)));
    }

    let q = g.conv2d(x, p.q_dw, None, spatial_ratio, 1, c)?;
    let q = g.conv2d(q, p.q_pw, None, 1, 0, 1)?;
    let k = g.conv2d(x, p.k_dw, None, spatial_ratio, 1, c)?;
    let k = g.conv2d(k, p.k_pw, None, 1, 0, 1)?;
    let v = g.conv2d(x, p.v_pw, None, 1, 0, 1)?;
    let v = g.conv2d(v, p.v_dw, None, 1, 1, c_red)?;

    let (hr, wr) = (g.shape(q)[1], g.shape(q)[2]);
    let d = c / heads;
    let d_red = c_red / heads;
    let neg_t = g.scale(p.temperature, -1.0);
    let inv_alpha = g.exp(neg_t);

    let mut outs = Vec::with_capacity(heads);
    for head in 0..heads {
        let qh = g.narrow(q, head * d, d)?;
        let qh = g.reshape(qh, &[d, hr * wr])?;
        let kh = g.narrow(k, head * d_red, d_red)?;
        let kh = g.reshape(kh, &[d_red, hr * wr])?;
        let vh = g.narrow(v, head * d_red, d_red)?;
        let vh = g.reshape(vh, &[d_red, h * w])?;

        let kt = g.transpose(kh)?;
        let logits = g.matmul(qh, kt)?;
        let logits = g.scale(logits, 1.0 / ((hr * wr) as f64).sqrt());
        let s = g.narrow(inv_alpha, head, 1)?;
        let logits = g.mul_scalar(logits, s)?;
        let attn = g.softmax(logits, 1)?;
        outs.push(g.matmul(attn, vh)?);
    }
    let merged = if heads == 1 { outs[0] } else { g.concat(&outs)? };
    let merged = g.reshape(merged, &[c, h, w])?;
    g.conv2d(merged, p.proj, None, 1, 0, 1)
}

/// Records the patch-wise feed-forward network, including its skip path.
pub fn p2ffn(g: &mut Graph, x: Var, p: &FfnParams<Var>) -> Result<Var> {
    chw(g, x, "p2ffn")?;
    let hidden = g.shape(p.expand)[0];
    let k = g.shape(p.dw)[2];
    let y = g.conv2d(x, p.expand, None, 1, 0, 1)?;
    let y = g.gelu(y);
    let y = g.conv2d(y, p.dw, None, 1, k / 2, hidden)?;
    let y = g.gelu(y);
    let y = g.conv2d(y, p.shrink, None, 1, 0, 1)?;
    g.add(y, x)
}

/// Pre-norm transformer block:
/// `x₁ = x + DRSA(LN(x))`, `out = x₁ + P2FFN(LN(x₁))`.
pub fn block(g: &mut Graph, x: Var, p: &BlockParams<Var>, heads: usize, spatial_ratio: usize) -> Result<Var> {
    let n1 = g.layernorm_channels(x, p.norm1, None)?;
    let a = drsa(g, n1, &p.drsa, heads, spatial_ratio)?;
    let x1 = g.add(x, a)?;
    let n2 = g.layernorm_channels(x1, p.norm2, None)?;
    let f = p2ffn(g, n2, &p.ffn)?;
    g.add(x1, f)
}

/// Pixel-unshuffle by 2 followed by a 1×1 projection `[C_next, 4C, 1, 1]`.
pub fn downsample(g: &mut Graph, x: Var, weight: Var) -> Result<Var> {
    let y = g.pixel_unshuffle(x, 2)?;
    g.conv2d(y, weight, None, 1, 0, 1)
}

/// 1×1 projection `[4·C_prev, C, 1, 1]` followed by pixel-shuffle by 2.
pub fn upsample(g: &mut Graph, x: Var, weight: Var) -> Result<Var> {
    let y = g.conv2d(x, weight, None, 1, 0, 1)?;
    g.pixel_shuffle(y, 2)
}

/// Evaluates DRSA once on a standalone tensor.
pub fn drsa_forward(x: &Tensor, p: &DrsaParams<Tensor>, heads: usize, spatial_ratio: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let pv = p.map(|t| g.constant(t.clone()));
    let y = drsa(&mut g, xv, &pv, heads, spatial_ratio)?;
    Ok(g.value(y).clone())
}

/// Evaluates the P2FFN once on a standalone tensor.
pub fn p2ffn_forward(x: &Tensor, p: &FfnParams<Tensor>) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let pv = p.map(|t| g.constant(t.clone()));
    let y = p2ffn(&mut g, xv, &pv)?;
    Ok(g.value(y).clone())
}

/// Evaluates one transformer block on a standalone tensor.
pub fn block_forward(x: &Tensor, p: &BlockParams<Tensor>, heads: usize, spatial_ratio: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let pv = p.map(|t| g.constant(t.clone()));
    let y = block(&mut g, xv, &pv, heads, spatial_ratio)?;
    Ok(g.value(y).clone())
}
