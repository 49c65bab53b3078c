//! Closed-form KV-cache and FLOPs accounting for a depth policy.
//!
//! Memory is counted in token·layer entries: every layer active at a
//! scale stores one key/value pair per token of that scale. Layers
//! skipped in the flexible zone store nothing for those scales, so
//!
//! `kv = d·T_total + (D − d)·T_bridge`.

use serde::Serialize;

use crate::data::ScaleSchedule;
use crate::depth::DepthPolicy;
use crate::error::{Error, Result};

pub const CSV_HEADER: &str =
    "d,N,kv_entries,kv_reduction_pct,flops_total,flexible_flops_share,layer_flops_reduction_pct";

fn check(policy: &DepthPolicy, schedule: &ScaleSchedule) -> Result<()> {
    if policy.scales != schedule.scales() {
        return Err(Error::Contract(format!(
            "policy covers {} scales, schedule has {}",
            policy.scales,
            schedule.scales()
        )));
    }
    Ok(())
}

/// Cached key/value entries after a full generation under `policy`.
pub fn kv_entries(policy: &DepthPolicy, schedule: &ScaleSchedule) -> Result<u64> {
    check(policy, schedule)?;
    let total = schedule.total_tokens() as u64;
    let bridge = schedule.prefix_tokens(policy.bridge) as u64;
    let d = policy.selected.len() as u64;
    Ok(d * total + (policy.depth as u64 - d) * bridge)
}

/// Bytes for `entries` cached tokens: keys and values of `width` reals.
pub fn kv_bytes(entries: u64, width: usize, bytes_per_real: usize, batch: usize) -> u64 {
    entries * 2 * width as u64 * bytes_per_real as u64 * batch as u64
}

/// Per-layer FLOPs of one scale with `tokens` queries attending over
/// `context` cached-plus-current tokens: projections and MLP
/// (`12·W²` multiply-adds per token) plus scores and weighted values.
fn layer_flops(tokens: u64, context: u64, width: u64) -> u64 {
    tokens * 12 * width * width * 2 + 2 * 2 * tokens * context * width
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlopsEstimate {
    pub per_scale: Vec<u64>,
    pub total: u64,
    /// FLOPs of the same schedule at full depth everywhere.
    pub full_depth_total: u64,
    /// Share of the full-depth FLOPs spent in the flexible zone.
    pub flexible_share: f64,
    /// `1 − d/D`.
    pub layer_reduction: f64,
}

pub fn flops_estimate(
    policy: &DepthPolicy,
    schedule: &ScaleSchedule,
    width: usize,
) -> Result<FlopsEstimate> {
    check(policy, schedule)?;
    if width == 0 {
        return Err(Error::Contract("width must be positive".into()));
    }
    let w = width as u64;
    let depth = policy.depth as u64;
    let d = policy.selected.len() as u64;
    let mut per_scale = Vec::with_capacity(schedule.scales());
    let mut full = Vec::with_capacity(schedule.scales());
    let mut context = 0u64;
    for (i, t) in schedule.tokens_per_scale().into_iter().enumerate() {
        let t = t as u64;
        context += t;
        let per_layer = layer_flops(t, context, w);
        let layers = if policy.is_bridge(i + 1) { depth } else { d };
        per_scale.push(layers * per_layer);
        full.push(depth * per_layer);
    }
    let full_depth_total: u64 = full.iter().sum();
    let flexible: u64 = full[policy.bridge..].iter().sum();
    Ok(FlopsEstimate {
        total: per_scale.iter().sum(),
        per_scale,
        full_depth_total,
        flexible_share: flexible as f64 / full_depth_total as f64,
        layer_reduction: 1.0 - d as f64 / depth as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PerfReport {
    pub d: usize,
    pub bridge: usize,
    pub tokens_per_scale: Vec<usize>,
    pub total_tokens: usize,
    pub bridge_tokens: usize,
    pub kv_entries: u64,
    pub full_kv_entries: u64,
    pub kv_reduction_fraction: f64,
    pub flops_per_scale: Vec<u64>,
    pub flops_total: u64,
    pub flexible_flops_share: f64,
    /// Flexible-zone tokens over all tokens.
    pub flexible_token_share: f64,
    pub layer_flops_reduction: f64,
}

pub fn report(policy: &DepthPolicy, schedule: &ScaleSchedule, width: usize) -> Result<PerfReport> {
    let kv = kv_entries(policy, schedule)?;
    let full_kv = policy.depth as u64 * schedule.total_tokens() as u64;
    let flops = flops_estimate(policy, schedule, width)?;
    let total_tokens = schedule.total_tokens();
    let bridge_tokens = schedule.prefix_tokens(policy.bridge);
    Ok(PerfReport {
        d: policy.d,
        bridge: policy.bridge,
        tokens_per_scale: schedule.tokens_per_scale(),
        total_tokens,
        bridge_tokens,
        kv_entries: kv,
        full_kv_entries: full_kv,
        kv_reduction_fraction: 1.0 - kv as f64 / full_kv as f64,
        flops_per_scale: flops.per_scale,
        flops_total: flops.total,
        flexible_flops_share: flops.flexible_share,
        flexible_token_share: (total_tokens - bridge_tokens) as f64 / total_tokens as f64,
        layer_flops_reduction: flops.layer_reduction,
    })
}

/// One report per policy, in the given order.
pub fn sweep(
    policies: &[DepthPolicy],
    schedule: &ScaleSchedule,
    width: usize,
) -> Result<Vec<PerfReport>> {
    policies.iter().map(|p| report(p, schedule, width)).collect()
}

pub fn csv_row(r: &PerfReport) -> String {
    format!(
        "{},{},{},{:.1},{},{:.4},{:.1}",
        r.d,
        r.bridge,
        r.kv_entries,
        100.0 * r.kv_reduction_fraction,
        r.flops_total,
        r.flexible_flops_share,
        100.0 * r.layer_flops_reduction
    )
}

/// Header plus one line per row, newline-terminated.
pub fn to_csv(rows: &[PerfReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&csv_row(r));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::depth::enumerate_configs;

    fn policy30(d: usize, n: usize) -> DepthPolicy {
        DepthPolicy::new(30, d, n, 10).unwrap()
    }

    #[test]
    fn kv_counts_for_depth_30() {
        let s = ScaleSchedule::large();
        assert_eq!(kv_entries(&policy30(30, 6), &s).unwrap(), 20400);
        assert_eq!(kv_entries(&policy30(16, 6), &s).unwrap(), 12154);
        assert_eq!(kv_entries(&policy30(8, 6), &s).unwrap(), 7442);
        assert_eq!(kv_entries(&policy30(2, 6), &s).unwrap(), 3908);
        assert_eq!(kv_entries(&policy30(2, 10), &s).unwrap(), 20400);
    }

    #[test]
    fn reduction_percentages() {
        let s = ScaleSchedule::large();
        let pct = |d| (1000.0 * report(&policy30(d, 6), &s, 1920).unwrap().kv_reduction_fraction).round() / 10.0;
        assert_eq!(pct(16), 40.4);
        assert_eq!(pct(8), 63.5);
        assert_eq!(pct(2), 80.8);
    }

    #[test]
    fn cost_shares() {
        let s = ScaleSchedule::large();
        let r = report(&policy30(16, 6), &s, 1920).unwrap();
        assert!((r.layer_flops_reduction - 14.0 / 30.0).abs() < 1e-15);
        assert!((r.flexible_token_share - 589.0 / 680.0).abs() < 1e-15);
        assert!(r.flexible_flops_share > r.flexible_token_share);
        let full = report(&policy30(30, 6), &s, 1920).unwrap();
        assert_eq!(full.layer_flops_reduction, 0.0);
        assert_eq!(full.kv_reduction_fraction, 0.0);
        assert_eq!(full.flops_total, flops_estimate(&policy30(30, 6), &s, 1920).unwrap().full_depth_total);
    }

    #[test]
    fn sweep_monotonicity() {
        let s = ScaleSchedule::large();
        let grid = enumerate_configs(30, 10, &[2, 4, 8, 16, 30], &[6, 7, 8, 9, 10]).unwrap();
        let rows = sweep(&grid, &s, 1920).unwrap();
        assert_eq!(rows.len(), 25);
        let at = |d, n| rows.iter().find(|r| r.d == d && r.bridge == n).unwrap().kv_reduction_fraction;
        for n in 6..=10 {
            for w in [2, 4, 8, 16, 30].windows(2) {
                assert!(at(w[0], n) >= at(w[1], n));
            }
        }
        for d in [2, 4, 8, 16] {
            for n in 6..10 {
                assert!(at(d, n) > at(d, n + 1));
            }
        }
        let csv = to_csv(&rows);
        assert!(csv.starts_with(CSV_HEADER));
        assert!(csv.contains("\n16,6,12154,40.4,"));
        assert_eq!(csv.lines().count(), 26);
    }

    #[test]
    fn mismatched_schedule_rejected() {
        assert!(kv_entries(&policy30(16, 6), &ScaleSchedule::toy()).is_err());
    }

    #[test]
    fn byte_conversion() {
        assert_eq!(kv_bytes(10, 4, 2, 3), 10 * 2 * 4 * 2 * 3);
    }
}
