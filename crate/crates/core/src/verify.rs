//! Self-checks of the engine's core properties, each reported with the
//! measured quantity and the tolerance it was held to.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{Dataset, ScaleSchedule, TokenPyramid};
use crate::depth::{active_plan, enumerate_configs, DepthPolicy, LayerSet};
use crate::error::Result;
use crate::model::sequence::{forward_sequence, split_scales};
use crate::model::{
    extract_subnet, forward_pyramid_stepwise, init_params, MaskKind, ModelConfig, ModelParams,
};
use crate::perf::kv_entries;
use crate::sampler::{generate, generate_instrumented, generate_uncached, SampleConfig};
use crate::train::{gradient_sources, loss_and_grads, pyramid_loss, Branch, GradientMode};

/// Step of the central differences.
pub const FD_STEP: f64 = 1e-5;
/// Gradients below this magnitude are compared absolutely: the
/// finite-difference noise floor of an O(1) loss at this step is ~1e-11.
pub const FD_FLOOR: f64 = 1e-6;
pub const FD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl CheckResult {
    fn at_most(name: &str, measured: f64, tolerance: f64, detail: String) -> Self {
        Self {
            name: name.into(),
            passed: measured <= tolerance,
            measured,
            tolerance,
            detail,
        }
    }

    fn below(name: &str, measured: f64, tolerance: f64, detail: String) -> Self {
        Self {
            passed: measured < tolerance,
            ..Self::at_most(name, measured, tolerance, detail)
        }
    }
}

#[derive(Clone, Debug)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Mask used by the causality check; [`MaskKind::Unmasked`] makes it fail.
    pub mask: MaskKind,
    pub pyramids: usize,
    pub fd_coordinates: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            mask: MaskKind::BlockCausal,
            pyramids: 20,
            fd_coordinates: 100,
        }
    }
}

pub struct Fixture {
    pub params: ModelParams,
    pub data: Dataset,
    pub policy: DepthPolicy,
}

/// The toy model (D = 6, width 64, K = 5) with a few pyramids and the
/// policy d = 3, N = 2.
pub fn toy_fixture(seed: u64, samples: usize) -> Result<Fixture> {
    let config = ModelConfig::toy();
    let mut params = init_params(&config, seed)?;
    // A larger head makes gradients of the deep layers well above the
    // finite-difference noise floor.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4EAD);
    for x in params.head.data_mut() {
        *x = rng.random_range(-0.5..0.5);
    }
    let data = Dataset::synthesize(&config.schedule, config.classes as u32, samples, seed)?;
    Ok(Fixture {
        params,
        data,
        policy: DepthPolicy::new(6, 3, 2, 5)?,
    })
}

fn refs(ds: &Dataset) -> Vec<&TokenPyramid> {
    ds.samples.iter().collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Autodiff against central differences at random coordinates of both
/// branch losses.
pub fn check_gradients(fx: &Fixture, coordinates: usize, seed: u64) -> Result<CheckResult> {
    let batch: Vec<&TokenPyramid> = fx.data.samples.iter().take(2).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xFD);
    let sizes: Vec<usize> = fx.params.tensors().iter().map(|t| t.numel()).collect();
    let total: usize = sizes.iter().sum();
    let mut worst = 0.0f64;
    let mut where_ = String::new();
    for (b, branch) in [Branch::Subnet, Branch::Full].into_iter().enumerate() {
        let (_, grads) = loss_and_grads(&fx.params, &batch, &fx.policy, branch)?;
        let count = coordinates / 2 + (b == 0) as usize * (coordinates % 2);
        for _ in 0..count {
            let mut flat = rng.random_range(0..total);
            let mut t = 0;
            while flat >= sizes[t] {
                flat -= sizes[t];
                t += 1;
            }
            let mut p = fx.params.clone();
            let orig = p.tensors()[t].data()[flat];
            p.tensors_mut()[t].data_mut()[flat] = orig + FD_STEP;
            let up = pyramid_loss(&p, &batch, &fx.policy, branch)?;
            p.tensors_mut()[t].data_mut()[flat] = orig - FD_STEP;
            let down = pyramid_loss(&p, &batch, &fx.policy, branch)?;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let analytic = grads[t].data()[flat];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR);
            if rel > worst {
                worst = rel;
                where_ = format!("{branch:?} tensor {t} entry {flat}: {analytic:.3e} vs {numeric:.3e}");
            }
        }
    }
    Ok(CheckResult::below(
        "gradient_finite_difference",
        worst,
        FD_TOLERANCE,
        format!("{coordinates} coordinates, worst at {where_}"),
    ))
}

/// Bridge and flexible gradient parts sum to the total gradient; in the
/// subnet branch full-only layers have zero flexible and positive bridge
/// gradient.
pub fn check_gradient_sources(fx: &Fixture) -> Result<Vec<CheckResult>> {
    let batch: Vec<&TokenPyramid> = fx.data.samples.iter().take(4).collect();
    let mut worst = 0.0f64;
    for branch in [Branch::Subnet, Branch::Full] {
        let (_, total) = loss_and_grads(&fx.params, &batch, &fx.policy, branch)?;
        let src = gradient_sources(&fx.params, &batch, &fx.policy, branch, GradientMode::TokenRows)?;
        for l in 0..fx.params.layers.len() {
            for (i, want) in total[fx.params.layer_tensor_range(l)].iter().enumerate() {
                let sum: Vec<f64> = src.bridge[l][i]
                    .data()
                    .iter()
                    .zip(src.flexible[l][i].data())
                    .map(|(a, b)| a + b)
                    .collect();
                worst = worst.max(max_abs_diff(&sum, want.data()));
            }
        }
    }
    let src = gradient_sources(&fx.params, &batch, &fx.policy, Branch::Subnet, GradientMode::TokenRows)?;
    let norm = |ts: &[crate::tensor::Tensor]| ts.iter().map(|t| t.l2_norm_sq()).sum::<f64>().sqrt();
    let only = fx.policy.full_only_layers();
    let flex_max = only.iter().map(|&l| norm(&src.flexible[l])).fold(0.0, f64::max);
    let bridge_min = only.iter().map(|&l| norm(&src.bridge[l])).fold(f64::INFINITY, f64::min);
    Ok(vec![
        CheckResult::at_most(
            "gradient_source_additivity",
            worst,
            1e-10,
            "max |bridge + flexible - total| over all layer gradients".into(),
        ),
        CheckResult::at_most(
            "full_only_flexible_gradient",
            flex_max,
            0.0,
            format!("max flexible norm over full-only layers {only:?}"),
        ),
        CheckResult {
            name: "full_only_bridge_gradient".into(),
            passed: bridge_min > 0.0,
            measured: bridge_min,
            tolerance: 0.0,
            detail: "min bridge norm over full-only layers, must be > 0".into(),
        },
    ])
}

/// Stepwise cached logits against the single masked pass, and cached
/// against uncached generation.
pub fn check_cache_equivalence(fx: &Fixture, seed: u64) -> Result<Vec<CheckResult>> {
    let mut worst = 0.0f64;
    let policies = [
        fx.policy.clone(),
        DepthPolicy::full(6, 5),
        DepthPolicy::new(6, 2, 0, 5)?,
        DepthPolicy::new(6, 4, 4, 5)?,
    ];
    for policy in &policies {
        for p in fx.data.samples.iter().take(4) {
            let (steps, _) = forward_pyramid_stepwise(&fx.params, p, policy)?;
            let seq = forward_sequence(&fx.params, &[p], &active_plan(policy), MaskKind::BlockCausal)?;
            for (a, b) in steps.iter().zip(split_scales(&fx.params, &seq)?) {
                worst = worst.max(max_abs_diff(a.data(), b.data()));
            }
        }
    }
    let cfg = SampleConfig { top_k: 16, top_p: 0.95, temperature: 1.0, seed };
    let mut mismatched = 0;
    for class in 0..4 {
        let c = cfg.for_sample(class as usize);
        if generate(&fx.params, class, &fx.policy, &c)? != generate_uncached(&fx.params, class, &fx.policy, &c)? {
            mismatched += 1;
        }
    }
    Ok(vec![
        CheckResult::below(
            "cache_equivalence",
            worst,
            1e-9,
            format!("max |logit delta|, {} policies x 4 pyramids", policies.len()),
        ),
        CheckResult::at_most(
            "cached_vs_uncached_generation",
            mismatched as f64,
            0.0,
            "pyramids differing out of 4".into(),
        ),
    ])
}

/// Extracted subnets reproduce the supernet bit-for-bit.
pub fn check_subnet_extraction(fx: &Fixture) -> Result<CheckResult> {
    let batch = refs(&fx.data);
    let depth = fx.params.layers.len();
    let mut differing = 0usize;
    let sets = [
        fx.policy.selected.clone(),
        LayerSet::from_indices(vec![0, depth - 1]),
        LayerSet::full(depth),
    ];
    for set in &sets {
        let sub = extract_subnet(&fx.params, set)?;
        let k = fx.params.config.scales();
        let a = forward_sequence(&fx.params, &batch, &vec![set.clone(); k], MaskKind::BlockCausal)?;
        let b = forward_sequence(&sub, &batch, &vec![LayerSet::full(set.len()); k], MaskKind::BlockCausal)?;
        differing += a.data().iter().zip(b.data()).filter(|(x, y)| x.to_bits() != y.to_bits()).count();
    }
    Ok(CheckResult::at_most(
        "subnet_extraction",
        differing as f64,
        0.0,
        format!("logits not bit-identical, {} layer sets", sets.len()),
    ))
}

/// Scale-k logits do not change when any later scale is perturbed.
pub fn check_block_causality(fx: &Fixture, count: usize, mask: MaskKind, seed: u64) -> Result<CheckResult> {
    let model = &fx.params.config;
    let pyramids = Dataset::synthesize(&model.schedule, model.classes as u32, count, seed ^ 0xCA5)?;
    let plan = active_plan(&fx.policy);
    let v = model.vocab();
    let offsets = model.schedule.offsets();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0);
    let mut changed = 0usize;
    for p in &pyramids.samples {
        let base = forward_sequence(&fx.params, &[p], &plan, mask)?;
        for (k, &prefix) in offsets.iter().enumerate().take(model.scales()).skip(1) {
            // Inputs of scales > k come from maps k.. (0-based k-1..).
            let mut q = p.clone();
            for map in &mut q.maps[k - 1..] {
                for t in &mut map.tokens {
                    *t = rng.random_range(0..v) as u16;
                }
            }
            let got = forward_sequence(&fx.params, &[&q], &plan, mask)?;
            let end = prefix * v;
            changed += base.data()[..end]
                .iter()
                .zip(&got.data()[..end])
                .filter(|(a, b)| a.to_bits() != b.to_bits())
                .count();
        }
    }
    Ok(CheckResult::at_most(
        "block_causality",
        changed as f64,
        0.0,
        format!("logits of scales <= k changed by perturbing later scales, {count} pyramids"),
    ))
}

/// Closed-form KV counts against instrumented caches for the 5×5 policy
/// grid on a 30-layer, 10-scale model.
pub fn check_perf_oracle(seed: u64) -> Result<CheckResult> {
    let schedule = ScaleSchedule::large().with_vocab(16)?;
    let config = ModelConfig::new(30, 8, 2, 2, schedule.clone())?;
    let params = init_params(&config, seed)?;
    let grid = enumerate_configs(30, 10, &[2, 4, 8, 16, 30], &[6, 7, 8, 9, 10])?;
    let cfg = SampleConfig { top_k: 4, top_p: 1.0, temperature: 1.0, seed };
    let mut mismatched = 0;
    for policy in &grid {
        let (_, cache) = generate_instrumented(&params, 0, policy, &cfg)?;
        if cache.total_entries() != kv_entries(policy, &schedule)? {
            mismatched += 1;
        }
    }
    Ok(CheckResult::at_most(
        "perf_model_oracle",
        mismatched as f64,
        0.0,
        format!("policies whose cache count differs from the closed form, of {}", grid.len()),
    ))
}

/// Every check in order.
pub fn run_all(opts: &VerifyOptions) -> Result<Vec<CheckResult>> {
    let fx = toy_fixture(opts.seed, 4)?;
    let mut out = vec![check_gradients(&fx, opts.fd_coordinates, opts.seed)?];
    out.extend(check_gradient_sources(&fx)?);
    out.extend(check_cache_equivalence(&fx, opts.seed)?);
    out.push(check_subnet_extraction(&fx)?);
    out.push(check_block_causality(&fx, opts.pyramids, opts.mask, opts.seed)?);
    out.push(check_perf_oracle(opts.seed)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unmasked_attention_breaks_causality() {
        let fx = toy_fixture(1, 2).unwrap();
        assert!(check_block_causality(&fx, 2, MaskKind::BlockCausal, 0).unwrap().passed);
        assert!(!check_block_causality(&fx, 2, MaskKind::Unmasked, 0).unwrap().passed);
    }

    #[test]
    fn gradient_check_passes_on_a_few_coordinates() {
        let fx = toy_fixture(2, 2).unwrap();
        let r = check_gradients(&fx, 10, 2).unwrap();
        assert!(r.passed, "{r:?}");
    }
}
