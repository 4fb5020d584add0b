//! Composite layers built from graph primitives.

use crate::Scalar;

use super::{Graph, TensorError, Var};

/// `x * w + b` with `w: [in, out]`.
pub fn dense<T: Scalar>(g: &mut Graph<T>, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
    let xw = g.matmul(x, w)?;
    g.add_bias(xw, b)
}

/// Convolution over the sequence axis with a filter spanning the full
/// hidden width: `x: [n, h]`, `w: [height * h, maps]` -> `[n - height + 1, maps]`.
pub fn seq_conv<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    w: Var,
    b: Var,
    height: usize,
) -> Result<Var, TensorError> {
    let windows = g.unfold(x, height)?;
    dense(g, windows, w, b)
}

/// Projection weights for one self-attention block.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// Scaled dot-product self-attention over `x: [n, hidden]` with `heads`
/// equal-width heads, followed by the output projection.
pub fn multi_head_attention<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    p: &AttentionVars,
    heads: usize,
) -> Result<Var, TensorError> {
    let hidden = g.value(x).rows_cols().1;
    if heads == 0 || !hidden.is_multiple_of(heads) {
        return Err(TensorError::ShapeMismatch {
            op: "multi_head_attention",
            detail: format!("hidden {hidden} not divisible by {heads} heads"),
        });
    }
    let dh = hidden / heads;
    let q = dense(g, x, p.wq, p.bq)?;
    let k = dense(g, x, p.wk, p.bk)?;
    let v = dense(g, x, p.wv, p.bv)?;
    let scale = T::one() / T::from_usize_lossy(dh).sqrt();
    let mut ctx = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let scores = g.matmul_nt(qh, kh)?;
        let scores = g.scale(scores, scale);
        let attn = g.softmax_rows(scores)?;
        ctx.push(g.matmul(attn, vh)?);
    }
    let merged = if heads == 1 {
        ctx[0]
    } else {
        g.concat_cols(&ctx)?
    };
    dense(g, merged, p.wo, p.bo)
}
