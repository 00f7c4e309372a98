//! Standard layers built on [`Graph`] ops. Parameters are looked up by
//! name under a prefix: `{prefix}.weight`, `{prefix}.bias`, and so on.

use rand::Rng;

use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::tensor::Tensor;
use super::NnError;
use crate::scalar::Scalar;

pub fn init_linear<T: Scalar, R: Rng>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    prefix: &str,
    in_dim: usize,
    out_dim: usize,
) -> Result<(), NnError> {
    store.init_uniform(&format!("{prefix}.weight"), in_dim, out_dim, in_dim, out_dim, rng)?;
    store.insert(&format!("{prefix}.bias"), Tensor::zeros(1, out_dim))
}

/// `x · W + b` with `W: in x out`.
pub fn linear<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var, NnError> {
    let w = g.param(store, &format!("{prefix}.weight"))?;
    let b = g.param(store, &format!("{prefix}.bias"))?;
    let xw = g.matmul(x, w)?;
    g.add_row(xw, b)
}

pub fn init_layer_norm<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, dim: usize) -> Result<(), NnError> {
    store.insert(&format!("{prefix}.gamma"), Tensor::filled(1, dim, T::one()))?;
    store.insert(&format!("{prefix}.beta"), Tensor::zeros(1, dim))
}

pub fn layer_norm<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var, NnError> {
    let gamma = g.param(store, &format!("{prefix}.gamma"))?;
    let beta = g.param(store, &format!("{prefix}.beta"))?;
    let n = g.layer_norm_rows(x);
    let s = g.mul_row(n, gamma)?;
    g.add_row(s, beta)
}

/// Linear layers `{prefix}.{i}` with widths `dims[i] -> dims[i + 1]`.
pub fn init_mlp<T: Scalar, R: Rng>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    prefix: &str,
    dims: &[usize],
) -> Result<(), NnError> {
    for (i, w) in dims.windows(2).enumerate() {
        init_linear(store, rng, &format!("{prefix}.{i}"), w[0], w[1])?;
    }
    Ok(())
}

/// GELU between layers, no activation after the last one.
pub fn mlp<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    n_layers: usize,
    x: Var,
) -> Result<Var, NnError> {
    let mut h = x;
    for i in 0..n_layers {
        h = linear(g, store, &format!("{prefix}.{i}"), h)?;
        if i + 1 < n_layers {
            h = g.gelu(h);
        }
    }
    Ok(h)
}

pub fn init_attention<T: Scalar, R: Rng>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    prefix: &str,
    dim: usize,
) -> Result<(), NnError> {
    for part in ["q", "k", "v", "out"] {
        init_linear(store, rng, &format!("{prefix}.{part}"), dim, dim)?;
    }
    Ok(())
}

/// Multi-head scaled dot-product attention. Output has the shape of `queries`.
pub fn multi_head_attention<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    queries: Var,
    keys: Var,
    values: Var,
    n_heads: usize,
) -> Result<Var, NnError> {
    multi_head_attention_with_weights(g, store, prefix, queries, keys, values, n_heads).map(|(out, _)| out)
}

/// Like [`multi_head_attention`], also returning each head's
/// `n_queries x n_keys` attention weights.
pub fn multi_head_attention_with_weights<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    queries: Var,
    keys: Var,
    values: Var,
    n_heads: usize,
) -> Result<(Var, Vec<Var>), NnError> {
    let dim = g.shape(queries).1;
    if n_heads == 0 || dim % n_heads != 0 {
        return Err(NnError::Shape(format!("embed dim {dim} not divisible by {n_heads} heads")));
    }
    if g.shape(keys) != g.shape(values) || g.shape(keys).1 != dim {
        return Err(NnError::Shape(format!(
            "attention keys {:?} / values {:?} / queries {:?}",
            g.shape(keys),
            g.shape(values),
            g.shape(queries)
        )));
    }
    let d_head = dim / n_heads;
    let q = linear(g, store, &format!("{prefix}.q"), queries)?;
    let k = linear(g, store, &format!("{prefix}.k"), keys)?;
    let v = linear(g, store, &format!("{prefix}.v"), values)?;
    let inv_sqrt = T::one() / T::of(d_head as f64).sqrt();

    let mut heads = Vec::with_capacity(n_heads);
    let mut weights = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = g.slice_cols(q, h * d_head, d_head)?;
        let kh = g.slice_cols(k, h * d_head, d_head)?;
        let vh = g.slice_cols(v, h * d_head, d_head)?;
        let logits = g.matmul_bt(qh, kh)?;
        let logits = g.scale(logits, inv_sqrt);
        let w = g.softmax_rows(logits);
        heads.push(g.matmul(w, vh)?);
        weights.push(w);
    }
    let cat = if n_heads == 1 { heads[0] } else { g.concat_cols(&heads)? };
    let out = linear(g, store, &format!("{prefix}.out"), cat)?;
    Ok((out, weights))
}
