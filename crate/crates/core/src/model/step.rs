use super::embed::embed_step;
use super::{KVCache, LayerParams, ModelParams, LN_EPS};
use crate::data::TokenPyramid;
use crate::depth::{active_layers, DepthPolicy, LayerSet};
use crate::error::{Error, Result};
use crate::tensor::{ops, Tensor};

/// Multi-head attention of `q [t, W]` over `k`, `v` `[L, W]` without a mask.
fn attend(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor> {
    let (t, w) = (q.shape()[0], q.shape()[1]);
    let l = k.shape()[0];
    let dh = w / heads;
    let qh = ops::permute(&ops::reshape(q, &[t, heads, dh])?, &[1, 0, 2])?;
    let kt = ops::permute(&ops::reshape(k, &[l, heads, dh])?, &[1, 2, 0])?;
    let vh = ops::permute(&ops::reshape(v, &[l, heads, dh])?, &[1, 0, 2])?;
    let scores = ops::scale(&ops::matmul(&qh, &kt)?, 1.0 / (dh as f64).sqrt());
    let probs = ops::softmax_rows(&scores)?;
    let ctx = ops::permute(&ops::matmul(&probs, &vh)?, &[1, 0, 2])?;
    ops::reshape(&ctx, &[t, w])
}

fn block(
    layer: &LayerParams,
    layer_idx: usize,
    x: &Tensor,
    heads: usize,
    cache: &mut KVCache,
) -> Result<Tensor> {
    let h = ops::layer_norm(x, &layer.ln1_gain, &layer.ln1_bias, LN_EPS)?;
    let q = ops::matmul(&h, &layer.wq)?;
    let k = ops::matmul(&h, &layer.wk)?;
    let v = ops::matmul(&h, &layer.wv)?;
    let (k_all, v_all) = cache.extended(layer_idx, &k, &v);
    let ctx = attend(&q, &k_all, &v_all, heads)?;
    cache.append(layer_idx, &k, &v);
    let r1 = ops::add(x, &ops::matmul(&ctx, &layer.wo)?)?;
    let h2 = ops::layer_norm(&r1, &layer.ln2_gain, &layer.ln2_bias, LN_EPS)?;
    let m = ops::matmul(&ops::gelu(&ops::matmul(&h2, &layer.w1)?), &layer.w2)?;
    ops::add(&r1, &m)
}

/// Runs one scale: every layer of `active` in ascending order attends
/// over its cached keys/values plus the current tokens and appends the
/// current tokens' keys/values; other layers pass the residual stream
/// through untouched. Returns logits `[t, V]`.
pub fn forward_step(
    params: &ModelParams,
    embeddings: &Tensor,
    active: &LayerSet,
    cache: &mut KVCache,
) -> Result<Tensor> {
    let cfg = &params.config;
    if embeddings.rank() != 2 || embeddings.shape()[1] != cfg.width {
        return Err(Error::Shape(format!(
            "embeddings {:?} for width {}",
            embeddings.shape(),
            cfg.width
        )));
    }
    if cache.depth() != params.layers.len() {
        return Err(Error::State(format!(
            "cache of depth {} for a {}-layer model",
            cache.depth(),
            params.layers.len()
        )));
    }
    if let Some(max) = active.max() {
        if max >= params.layers.len() {
            return Err(Error::Contract(format!(
                "active layer {max} outside depth {}",
                params.layers.len()
            )));
        }
    }
    for l in active.iter() {
        cache.check_active(l)?;
    }
    let mut x = embeddings.clone();
    for l in active.iter() {
        x = block(&params.layers[l], l, &x, cfg.heads, cache)?;
    }
    cache.finish_scale(embeddings.shape()[0]);
    let y = ops::layer_norm(&x, &params.out_gain, &params.out_bias, LN_EPS)?;
    ops::matmul(&y, &params.head)
}

/// Teacher-forced logits of every scale computed one scale at a time
/// through a fresh cache. Also returns the cache for inspection.
pub fn forward_pyramid_stepwise(
    params: &ModelParams,
    pyramid: &TokenPyramid,
    policy: &DepthPolicy,
) -> Result<(Vec<Tensor>, KVCache)> {
    let cfg = &params.config;
    pyramid.validate(&cfg.schedule, cfg.classes as u32)?;
    super::sequence::check_policy(params, policy)?;
    let mut cache = KVCache::new(params.layers.len(), cfg.width);
    let mut out = Vec::with_capacity(cfg.scales());
    for k in 1..=cfg.scales() {
        let prev = if k == 1 { None } else { Some(&pyramid.maps[k - 2]) };
        let x = embed_step(params, k, prev, pyramid.class_label)?;
        out.push(forward_step(params, &x, &active_layers(k, policy)?, &mut cache)?);
    }
    Ok((out, cache))
}
