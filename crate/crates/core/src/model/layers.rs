//! Differentiable building blocks composed from primitive tensor ops.

use candle_core::{Result, Tensor, D};

pub(crate) fn linear(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    x.broadcast_matmul(weight)?.broadcast_add(bias)
}

pub(crate) fn layer_norm(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
    normed.broadcast_mul(weight)?.broadcast_add(bias)
}

pub(crate) fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    e.broadcast_div(&e.sum_keepdim(D::Minus1)?)
}

/// Multi-head scaled dot-product attention over `(len, dim)` inputs that are already projected.
pub(crate) fn multi_head(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor> {
    let (lq, dim) = q.dims2()?;
    let lk = k.dim(0)?;
    let dh = dim / heads;
    let split = |t: &Tensor, len: usize| -> Result<Tensor> {
        t.reshape((len, heads, dh))?.transpose(0, 1)?.contiguous()
    };
    let q = split(q, lq)?;
    let k = split(k, lk)?;
    let v = split(v, lk)?;
    let scores = (q.matmul(&k.t()?)? / (dh as f64).sqrt())?;
    let out = softmax_last(&scores)?.matmul(&v)?;
    out.transpose(0, 1)?.contiguous()?.reshape((lq, dim))
}
