//! All scales of a batch in one pass under the block-causal mask.
//!
//! Each layer processes the longest prefix of scales at which it is
//! active; the remaining rows bypass it on the residual stream. Because
//! a layer's active scales always form a prefix, the masked pass computes
//! exactly what the cached stepwise path does.

use std::collections::HashMap;

use super::embed::input_ids;
use super::{ModelParams, LN_EPS};
use crate::data::TokenPyramid;
use crate::depth::{active_plan, DepthPolicy, LayerSet};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

const MASKED: f64 = -1e30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MaskKind {
    /// Full attention within a scale, causal across scales.
    #[default]
    BlockCausal,
    /// No masking at all. Only useful to show that the causality checks
    /// catch a broken mask.
    Unmasked,
}

/// Graph handles of every parameter tensor, in declaration order.
pub struct BoundParams {
    pub vars: Vec<Var>,
    /// Per layer, a second copy used only for flexible-zone rows, so the
    /// backward pass attributes their gradient separately.
    pub flexible: Option<Vec<Vec<Var>>>,
    pub(crate) pos_count: usize,
}

impl BoundParams {
    pub fn layer(&self, l: usize) -> &[Var] {
        let start = 2 + self.pos_count + l * super::LayerParams::TENSORS;
        &self.vars[start..start + super::LayerParams::TENSORS]
    }
}

/// Adds the parameters to `g` as trainable leaves (or constants), with
/// an optional separate copy of every layer for flexible-zone rows.
pub fn bind(g: &mut Graph, params: &ModelParams, trainable: bool, split_layers: bool) -> BoundParams {
    let leaf = |g: &mut Graph, t: &Tensor| {
        if trainable {
            g.param(t.clone())
        } else {
            g.constant(t.clone())
        }
    };
    let vars = params.tensors().into_iter().map(|t| leaf(g, t)).collect();
    let flexible = split_layers.then(|| {
        params
            .layers
            .iter()
            .map(|layer| layer.tensors().into_iter().map(|t| leaf(g, t)).collect())
            .collect()
    });
    BoundParams {
        vars,
        flexible,
        pos_count: params.pos_emb.len(),
    }
}

pub(crate) fn check_policy(params: &ModelParams, policy: &DepthPolicy) -> Result<()> {
    let cfg = &params.config;
    if policy.depth != params.layers.len() || policy.scales != cfg.scales() {
        return Err(Error::Contract(format!(
            "policy for D={}, K={} applied to D={}, K={}",
            policy.depth,
            policy.scales,
            params.layers.len(),
            cfg.scales()
        )));
    }
    Ok(())
}

/// Number of leading scales at which each layer runs. Errors when a layer
/// skips a scale and runs again later.
pub fn layer_prefixes(depth: usize, plan: &[LayerSet]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(depth);
    for l in 0..depth {
        let p = plan.iter().take_while(|s| s.contains(l)).count();
        if let Some(k) = plan[p..].iter().position(|s| s.contains(l)) {
            return Err(Error::Contract(format!(
                "layer {l} skips scale {} but runs at scale {}",
                p + 1,
                p + k + 1
            )));
        }
        out.push(p);
    }
    if let Some(bad) = plan.iter().filter_map(|s| s.max()).find(|&m| m >= depth) {
        return Err(Error::Contract(format!("active layer {bad} outside depth {depth}")));
    }
    Ok(out)
}

/// Additive mask `[batch·heads, t, t]` over the first `t` sequence rows.
fn mask_tensor(offsets: &[usize], t: usize, copies: usize, kind: MaskKind) -> Tensor {
    let mut scale_of = Vec::with_capacity(t);
    for (k, w) in offsets.windows(2).enumerate() {
        scale_of.extend(std::iter::repeat_n(k, w[1] - w[0]));
    }
    let mut one = vec![0.0; t * t];
    if kind == MaskKind::BlockCausal {
        for i in 0..t {
            for j in 0..t {
                if scale_of[j] > scale_of[i] {
                    one[i * t + j] = MASKED;
                }
            }
        }
    }
    let mut data = Vec::with_capacity(copies * t * t);
    for _ in 0..copies {
        data.extend_from_slice(&one);
    }
    Tensor::from_parts(vec![copies, t, t], data)
}

struct Pass<'a> {
    params: &'a ModelParams,
    batch: usize,
    offsets: Vec<usize>,
    mask: MaskKind,
    masks: HashMap<usize, Var>,
}

impl Pass<'_> {
    fn mask(&mut self, g: &mut Graph, t: usize) -> Var {
        let copies = self.batch * self.params.config.heads;
        let (offsets, kind) = (&self.offsets, self.mask);
        *self
            .masks
            .entry(t)
            .or_insert_with(|| g.constant(mask_tensor(offsets, t, copies, kind)))
    }

    /// `[B, len, W]` to `[B·H, len, dh]`, or `[B·H, dh, len]` when `keys`.
    fn split_heads(&self, g: &mut Graph, x: Var, len: usize, keys: bool) -> Result<Var> {
        let cfg = &self.params.config;
        let (b, h, dh) = (self.batch, cfg.heads, cfg.head_dim());
        let x = g.reshape(x, &[b, len, h, dh])?;
        if keys {
            let x = g.permute(x, &[0, 2, 3, 1])?;
            g.reshape(x, &[b * h, dh, len])
        } else {
            let x = g.permute(x, &[0, 2, 1, 3])?;
            g.reshape(x, &[b * h, len, dh])
        }
    }

    /// One transformer block over `x [B, t, W]`; `segments` assigns row
    /// ranges to parameter copies.
    fn block(&mut self, g: &mut Graph, x: Var, t: usize, segments: &[(usize, usize, &[Var])]) -> Result<Var> {
        let cfg = &self.params.config;
        let (b, w, heads, dh) = (self.batch, cfg.width, cfg.heads, cfg.head_dim());
        let single = segments.len() == 1;

        let mut rows = Vec::with_capacity(segments.len());
        let (mut qs, mut ks, mut vs) = (Vec::new(), Vec::new(), Vec::new());
        for &(start, len, p) in segments {
            let xs = if single { x } else { g.slice(x, 1, start, len)? };
            let flat = g.reshape(xs, &[b * len, w])?;
            let h = g.layer_norm(flat, p[0], p[1], LN_EPS)?;
            for (out, wv) in [(&mut qs, p[2]), (&mut ks, p[3]), (&mut vs, p[4])] {
                let y = g.matmul(h, wv)?;
                out.push(g.reshape(y, &[b, len, w])?);
            }
            rows.push(flat);
        }
        let join = |g: &mut Graph, parts: Vec<Var>| if single { Ok(parts[0]) } else { g.concat(&parts, 1) };
        let q = join(g, qs)?;
        let k = join(g, ks)?;
        let v = join(g, vs)?;

        let qh = self.split_heads(g, q, t, false)?;
        let kt = self.split_heads(g, k, t, true)?;
        let vh = self.split_heads(g, v, t, false)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let mask = self.mask(g, t);
        let scores = g.add(scores, mask)?;
        let probs = g.softmax_rows(scores)?;
        let ctx = g.matmul(probs, vh)?;
        let ctx = g.reshape(ctx, &[b, heads, t, dh])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, t, w])?;

        let mut outs = Vec::with_capacity(segments.len());
        for (&(start, len, p), &flat) in segments.iter().zip(&rows) {
            let cs = if single { ctx } else { g.slice(ctx, 1, start, len)? };
            let cs = g.reshape(cs, &[b * len, w])?;
            let proj = g.matmul(cs, p[5])?;
            let r1 = g.add(flat, proj)?;
            let h2 = g.layer_norm(r1, p[6], p[7], LN_EPS)?;
            let up = g.matmul(h2, p[8])?;
            let act = g.gelu(up);
            let down = g.matmul(act, p[9])?;
            let r2 = g.add(r1, down)?;
            outs.push(g.reshape(r2, &[b, len, w])?);
        }
        join(g, outs)
    }
}

/// Logits `[B·T, V]` for a teacher-forced batch. `plan[k]` is the active
/// set at scale `k+1`. With split layers bound, rows from `split_at`
/// onwards use the flexible copies.
pub fn sequence_logits(
    g: &mut Graph,
    bound: &BoundParams,
    params: &ModelParams,
    batch: &[&TokenPyramid],
    plan: &[LayerSet],
    mask: MaskKind,
    split_at: usize,
) -> Result<Var> {
    let cfg = &params.config;
    let depth = params.layers.len();
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    if plan.len() != cfg.scales() {
        return Err(Error::Contract(format!(
            "plan covers {} scales, schedule has {}",
            plan.len(),
            cfg.scales()
        )));
    }
    let prefixes = layer_prefixes(depth, plan)?;
    let offsets = cfg.schedule.offsets();
    let total = cfg.schedule.total_tokens();
    let (b, w) = (batch.len(), cfg.width);

    let mut ids = Vec::with_capacity(b * total);
    for p in batch {
        p.validate(&cfg.schedule, cfg.classes as u32)?;
        ids.extend(input_ids(&cfg.schedule, p)?);
    }
    let pos_count = params.pos_emb.len();
    let table = g.concat(&bound.vars[0..2], 0)?;
    let tok = g.gather_rows(table, &ids)?;
    let pos_table = g.concat(&bound.vars[2..2 + pos_count], 0)?;
    let pos_ids: Vec<usize> = (0..b).flat_map(|_| 0..total).collect();
    let pos = g.gather_rows(pos_table, &pos_ids)?;
    let x = g.add(tok, pos)?;
    let mut x = g.reshape(x, &[b, total, w])?;

    let mut pass = Pass {
        params,
        batch: b,
        offsets: offsets.clone(),
        mask,
        masks: HashMap::new(),
    };
    for (l, &prefix) in prefixes.iter().enumerate() {
        let t = offsets[prefix];
        if t == 0 {
            continue;
        }
        let main = bound.layer(l);
        let segments: Vec<(usize, usize, &[Var])> = match &bound.flexible {
            Some(flex) => {
                let cut = split_at.min(t);
                [(0, cut, main), (cut, t - cut, flex[l].as_slice())]
                    .into_iter()
                    .filter(|s| s.1 > 0)
                    .collect()
            }
            None => vec![(0, t, main)],
        };
        let processed = if t == total { x } else { g.slice(x, 1, 0, t)? };
        let out = pass.block(g, processed, t, &segments)?;
        x = if t == total {
            out
        } else {
            let rest = g.slice(x, 1, t, total - t)?;
            g.concat(&[out, rest], 1)?
        };
    }

    let n = bound.vars.len();
    let flat = g.reshape(x, &[b * total, w])?;
    let y = g.layer_norm(flat, bound.vars[n - 3], bound.vars[n - 2], LN_EPS)?;
    g.matmul(y, bound.vars[n - 1])
}

/// Teacher-forced logits `[B·T, V]` without gradient bookkeeping.
pub fn forward_sequence(
    params: &ModelParams,
    batch: &[&TokenPyramid],
    plan: &[LayerSet],
    mask: MaskKind,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let bound = bind(&mut g, params, false, false);
    let logits = sequence_logits(&mut g, &bound, params, batch, plan, mask, 0)?;
    Ok(g.value(logits).clone())
}

/// Teacher-forced per-scale logits of one pyramid under `policy`.
pub fn forward_pyramid(
    params: &ModelParams,
    pyramid: &TokenPyramid,
    policy: &DepthPolicy,
) -> Result<Vec<Tensor>> {
    check_policy(params, policy)?;
    let logits = forward_sequence(params, &[pyramid], &active_plan(policy), MaskKind::BlockCausal)?;
    split_scales(params, &logits)
}

/// Cuts `[T, V]` logits into one tensor per scale.
pub fn split_scales(params: &ModelParams, logits: &Tensor) -> Result<Vec<Tensor>> {
    let offsets = params.config.schedule.offsets();
    offsets
        .windows(2)
        .map(|o| crate::tensor::ops::slice(logits, 0, o[0], o[1] - o[0]))
        .collect()
}
