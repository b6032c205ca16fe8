//! Post-norm transformer building blocks shared by the encoder halves and
//! the decoder. Heads are realized as column slices of fused projections,
//! which keeps every step inside the rank-2 tensor algebra.

use super::params::{
    AttentionParams, DecLayerParams, EncLayerParams, FeedForwardParams, LayerNormParams, LN_EPS,
};
use super::ReaderError;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub(crate) fn layer_norm_affine<T: Scalar>(
    x: &Tensor<T>,
    p: &LayerNormParams<T>,
) -> Result<Tensor<T>, ReaderError> {
    Ok(x.layer_norm(1, T::of(LN_EPS))?
        .mul_row(&p.gamma)?
        .add_row(&p.beta)?)
}

/// Scaled dot-product attention of `q_in` over `kv_in`, `heads` ways, with
/// an optional additive mask on the score matrix.
pub(crate) fn attention<T: Scalar>(
    q_in: &Tensor<T>,
    kv_in: &Tensor<T>,
    p: &AttentionParams<T>,
    heads: usize,
    mask: Option<&Tensor<T>>,
) -> Result<Tensor<T>, ReaderError> {
    let d = q_in.shape()[1];
    let dh = d / heads;
    let q = q_in.matmul(&p.wq)?;
    let k = kv_in.matmul(&p.wk)?;
    let v = kv_in.matmul(&p.wv)?;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut contexts = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = q.slice_cols(h * dh, (h + 1) * dh)?;
        let kh = k.slice_cols(h * dh, (h + 1) * dh)?;
        let vh = v.slice_cols(h * dh, (h + 1) * dh)?;
        let mut scores = qh.matmul_nt(&kh)?.scale(scale)?;
        if let Some(m) = mask {
            scores = scores.add(m)?;
        }
        let probs = scores.softmax(1)?;
        contexts.push(probs.matmul(&vh)?);
    }
    let refs: Vec<&Tensor<T>> = contexts.iter().collect();
    Ok(Tensor::concat(&refs, 1)?.matmul(&p.wo)?)
}

fn feed_forward<T: Scalar>(
    x: &Tensor<T>,
    p: &FeedForwardParams<T>,
) -> Result<Tensor<T>, ReaderError> {
    Ok(x.matmul(&p.w1)?
        .add_row(&p.b1)?
        .relu()?
        .matmul(&p.w2)?
        .add_row(&p.b2)?)
}

pub(crate) fn encoder_layer<T: Scalar>(
    x: &Tensor<T>,
    p: &EncLayerParams<T>,
    heads: usize,
) -> Result<Tensor<T>, ReaderError> {
    let a = attention(x, x, &p.attn, heads, None)?;
    let x = layer_norm_affine(&x.add(&a)?, &p.ln1)?;
    let f = feed_forward(&x, &p.ff)?;
    layer_norm_affine(&x.add(&f)?, &p.ln2)
}

/// Run a contiguous range of encoder layers.
pub(crate) fn encode_range<T: Scalar>(
    x: &Tensor<T>,
    layers: &[EncLayerParams<T>],
    heads: usize,
) -> Result<Tensor<T>, ReaderError> {
    let mut h = x.clone();
    for layer in layers {
        h = encoder_layer(&h, layer, heads)?;
    }
    Ok(h)
}

pub(crate) fn decoder_layer<T: Scalar>(
    x: &Tensor<T>,
    memory: &Tensor<T>,
    p: &DecLayerParams<T>,
    heads: usize,
    causal: &Tensor<T>,
) -> Result<Tensor<T>, ReaderError> {
    let sa = attention(x, x, &p.self_attn, heads, Some(causal))?;
    let x = layer_norm_affine(&x.add(&sa)?, &p.ln1)?;
    let ca = attention(&x, memory, &p.cross_attn, heads, None)?;
    let x = layer_norm_affine(&x.add(&ca)?, &p.ln2)?;
    let f = feed_forward(&x, &p.ff)?;
    layer_norm_affine(&x.add(&f)?, &p.ln3)
}

/// Additive mask hiding positions after the query's own: zero on and below
/// the diagonal, a large negative constant above it.
pub(crate) fn causal_mask<T: Scalar>(len: usize) -> Tensor<T> {
    let neg = T::of(-1e9);
    let mut data = vec![T::zero(); len * len];
    for i in 0..len {
        for j in (i + 1)..len {
            data[i * len + j] = neg;
        }
    }
    Tensor::from_vec(vec![len, len], data).expect("mask dims consistent")
}
