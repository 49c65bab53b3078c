//! Scale-by-scale generation with runtime depth switching.
//!
//! Each position of each scale draws from its own counter-addressed
//! ChaCha stream, so any path that computes the same logits consumes
//! randomness identically regardless of caching or evaluation order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{splitmix64, TokenMap, TokenPyramid};
use crate::depth::{active_layers, active_plan, DepthPolicy, LayerSet};
use crate::error::{Error, Result};
use crate::model::sequence::{check_policy, forward_sequence, split_scales};
use crate::model::{embed_step, forward_step, KVCache, MaskKind, ModelParams};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SampleConfig {
    pub top_k: usize,
    pub top_p: f64,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for SampleConfig {
    /// top-k 900, top-p 0.96, temperature 1.
    fn default() -> Self {
        Self {
            top_k: 900,
            top_p: 0.96,
            temperature: 1.0,
            seed: 0,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config(format!("top_p {} outside (0, 1]", self.top_p)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        Ok(())
    }

    /// The same settings with the seed of the `index`-th sample of a run.
    pub fn for_sample(&self, index: usize) -> Self {
        Self {
            seed: splitmix64(self.seed ^ splitmix64(index as u64 ^ 0x5A17)),
            ..*self
        }
    }
}

/// Temperature, then top-k (ties keep the lower index), then the
/// smallest top-p prefix by descending probability (at least one entry),
/// renormalised. Returns a full-length probability row.
pub fn filter_logits(logits: &[f64], cfg: &SampleConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if logits.is_empty() {
        return Err(Error::Shape("empty logit row".into()));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("non-finite logit".into()));
    }
    let scaled: Vec<f64> = logits.iter().map(|x| x / cfg.temperature).collect();
    let mut order: Vec<usize> = (0..scaled.len()).collect();
    order.sort_by(|&a, &b| scaled[b].total_cmp(&scaled[a]).then(a.cmp(&b)));
    order.truncate(cfg.top_k.min(scaled.len()));

    let max = scaled[order[0]];
    let weights: Vec<f64> = order.iter().map(|&i| (scaled[i] - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut kept = 0;
    let mut mass = 0.0;
    for w in &weights {
        mass += w / total;
        kept += 1;
        if mass >= cfg.top_p {
            break;
        }
    }
    let norm: f64 = weights[..kept].iter().sum();
    let mut out = vec![0.0; scaled.len()];
    for (&i, w) in order[..kept].iter().zip(&weights) {
        out[i] = w / norm;
    }
    Ok(out)
}

/// Uniform draw of position `pos` at scale `k`.
fn position_uniform(seed: u64, k: usize, pos: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((k as u64) << 32) | pos as u64);
    rng.random::<f64>()
}

/// Inverse-CDF draw from `probs`.
fn categorical(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Draws every position of scale `k` from `[t_k, V]` logits.
fn draw_map(logits: &Tensor, grid: (usize, usize), k: usize, cfg: &SampleConfig) -> Result<TokenMap> {
    let v = logits.last_dim();
    let tokens = logits
        .data()
        .chunks(v)
        .enumerate()
        .map(|(pos, row)| {
            let probs = filter_logits(row, cfg)?;
            Ok(categorical(&probs, position_uniform(cfg.seed, k, pos)) as u16)
        })
        .collect::<Result<Vec<u16>>>()?;
    TokenMap::new(grid.0, grid.1, tokens)
}

/// Samples scale `k` (1-based) with the given active set, extending `cache`.
pub fn sample_scale(
    params: &ModelParams,
    k: usize,
    prev: Option<&TokenMap>,
    class_label: u32,
    active: &LayerSet,
    cache: &mut KVCache,
    cfg: &SampleConfig,
) -> Result<TokenMap> {
    if cache.completed_scales() != k - 1 {
        return Err(Error::State(format!(
            "cache holds {} scales before scale {k}",
            cache.completed_scales()
        )));
    }
    let x = embed_step(params, k, prev, class_label)?;
    let logits = forward_step(params, &x, active, cache)?;
    draw_map(&logits, params.config.schedule.grid(k), k, cfg)
}

fn generate_with(
    params: &ModelParams,
    class_label: u32,
    cfg: &SampleConfig,
    mut active: impl FnMut(usize) -> Result<LayerSet>,
) -> Result<(TokenPyramid, KVCache)> {
    cfg.validate()?;
    let model = &params.config;
    let mut cache = KVCache::new(params.layers.len(), model.width);
    let mut maps: Vec<TokenMap> = Vec::with_capacity(model.scales());
    for k in 1..=model.scales() {
        let map = sample_scale(params, k, maps.last(), class_label, &active(k)?, &mut cache, cfg)?;
        maps.push(map);
    }
    Ok((TokenPyramid { class_label, maps }, cache))
}

/// Generates a pyramid and returns the cache it filled.
pub fn generate_instrumented(
    params: &ModelParams,
    class_label: u32,
    policy: &DepthPolicy,
    cfg: &SampleConfig,
) -> Result<(TokenPyramid, KVCache)> {
    check_policy(params, policy)?;
    generate_with(params, class_label, cfg, |k| active_layers(k, policy))
}

/// Generates one pyramid, running the policy's active set at each scale.
pub fn generate(
    params: &ModelParams,
    class_label: u32,
    policy: &DepthPolicy,
    cfg: &SampleConfig,
) -> Result<TokenPyramid> {
    generate_instrumented(params, class_label, policy, cfg).map(|(p, _)| p)
}

/// Plain full-depth generation with no depth policy involved.
pub fn generate_full_depth(
    params: &ModelParams,
    class_label: u32,
    cfg: &SampleConfig,
) -> Result<TokenPyramid> {
    let all = LayerSet::full(params.layers.len());
    generate_with(params, class_label, cfg, |_| Ok(all.clone())).map(|(p, _)| p)
}

/// Generation that recomputes the whole masked sequence for every scale
/// instead of using a cache. Not-yet-generated scales are zero-filled;
/// the mask keeps them from influencing the current scale.
pub fn generate_uncached(
    params: &ModelParams,
    class_label: u32,
    policy: &DepthPolicy,
    cfg: &SampleConfig,
) -> Result<TokenPyramid> {
    cfg.validate()?;
    check_policy(params, policy)?;
    let schedule = &params.config.schedule;
    let plan = active_plan(policy);
    let mut pyramid = TokenPyramid {
        class_label,
        maps: schedule
            .grids()
            .iter()
            .map(|&(h, w)| TokenMap::new(h, w, vec![0; h * w]))
            .collect::<Result<_>>()?,
    };
    for k in 1..=schedule.scales() {
        let logits = forward_sequence(params, &[&pyramid], &plan, MaskKind::BlockCausal)?;
        let scale = split_scales(params, &logits)?.swap_remove(k - 1);
        pyramid.maps[k - 1] = draw_map(&scale, schedule.grid(k), k, cfg)?;
    }
    Ok(pyramid)
}

/// Binary graymap (P5) of a token map, tokens linearly mapped to 0..=255.
pub fn render_pgm(map: &TokenMap, vocab: usize) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", map.w, map.h).into_bytes();
    let top = (vocab.max(2) - 1) as f64;
    out.extend(
        map.tokens
            .iter()
            .map(|&t| (t as f64 * 255.0 / top).round() as u8),
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};
    use crate::perf::kv_entries;

    fn cfg(top_k: usize, top_p: f64) -> SampleConfig {
        SampleConfig {
            top_k,
            top_p,
            temperature: 1.0,
            seed: 7,
        }
    }

    #[test]
    fn hand_example() {
        let p = filter_logits(&[2.0, 1.0, 0.0, -1.0], &cfg(3, 0.9)).unwrap();
        let e = [1.0, (-1f64).exp()];
        let want = [e[0] / (e[0] + e[1]), e[1] / (e[0] + e[1])];
        assert!((p[0] - want[0]).abs() < 1e-12 && (p[1] - want[1]).abs() < 1e-12);
        assert_eq!(&p[2..], &[0.0, 0.0]);
        assert!((p[0] - 0.731).abs() < 1e-3);
    }

    #[test]
    fn greedy_and_plain_softmax() {
        let row = [0.3, 2.5, -1.0, 2.5, 0.0];
        let g = filter_logits(&row, &cfg(1, 1.0)).unwrap();
        assert_eq!(g, vec![0.0, 1.0, 0.0, 0.0, 0.0]);
        let s = filter_logits(&row, &cfg(5, 1.0)).unwrap();
        let z: f64 = row.iter().map(|x| x.exp()).sum();
        for (a, x) in s.iter().zip(row) {
            assert!((a - x.exp() / z).abs() < 1e-12);
        }
        // top_k beyond V is clamped.
        assert_eq!(filter_logits(&row, &cfg(900, 1.0)).unwrap().len(), 5);
    }

    #[test]
    fn filtered_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let row: Vec<f64> = (0..32).map(|_| rng.random_range(-4.0..4.0)).collect();
            let k = rng.random_range(1..=32);
            let p = rng.random_range(0.05..=1.0);
            let out = filter_logits(&row, &cfg(k, p)).unwrap();
            assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(out.iter().filter(|&&x| x > 0.0).count() <= k);
        }
    }

    #[test]
    fn bad_configs() {
        assert!(filter_logits(&[0.0], &cfg(0, 1.0)).is_err());
        assert!(filter_logits(&[0.0], &cfg(1, 0.0)).is_err());
        assert!(filter_logits(&[f64::NAN], &cfg(1, 1.0)).is_err());
        let mut c = cfg(1, 1.0);
        c.temperature = 0.0;
        assert!(filter_logits(&[0.0], &c).is_err());
    }

    #[test]
    fn generation_properties() {
        let model = ModelConfig::toy();
        let params = init_params(&model, 3).unwrap();
        let sub = DepthPolicy::new(6, 3, 2, 5).unwrap();
        let full = DepthPolicy::full(6, 5);
        let c = SampleConfig { seed: 11, ..SampleConfig::default() };

        let a = generate(&params, 1, &sub, &c).unwrap();
        assert_eq!(a, generate(&params, 1, &sub, &c).unwrap());
        a.validate(&model.schedule, 8).unwrap();

        let f = generate(&params, 1, &full, &c).unwrap();
        assert_eq!(f, generate_full_depth(&params, 1, &c).unwrap());
        assert_eq!(&f.maps[..2], &a.maps[..2]);

        assert_eq!(a, generate_uncached(&params, 1, &sub, &c).unwrap());

        let (_, cache) = generate_instrumented(&params, 1, &sub, &c).unwrap();
        assert_eq!(cache.total_entries(), kv_entries(&sub, &model.schedule).unwrap());

        let greedy = SampleConfig { top_k: 1, ..c };
        let g1 = generate(&params, 1, &sub, &greedy).unwrap();
        let g2 = generate(&params, 1, &sub, &SampleConfig { seed: 99, ..greedy }).unwrap();
        assert_eq!(g1, g2);
    }

    #[test]
    fn stale_cache_is_state_error() {
        let params = init_params(&ModelConfig::toy(), 3).unwrap();
        let mut cache = KVCache::new(6, 64);
        let err = sample_scale(&params, 2, None, 0, &LayerSet::full(6), &mut cache, &cfg(1, 1.0));
        assert!(matches!(err, Err(Error::State(_))));
    }

    #[test]
    fn graymap_layout() {
        let map = TokenMap::new(1, 3, vec![0, 32, 63]).unwrap();
        let pgm = render_pgm(&map, 64);
        assert!(pgm.starts_with(b"P5\n3 1\n255\n"));
        assert_eq!(&pgm[pgm.len() - 3..], &[0, 130, 255]);
    }
}
