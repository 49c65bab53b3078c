//! Acceptance criteria 1-9. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any criterion fails. Runs without the libtest harness.

use std::path::{Path, PathBuf};
use std::time::Instant;

use scalevar::data::{Dataset, ScaleSchedule};
use scalevar::depth::{nesting_report, select_layers, DepthPolicy};
use scalevar::model::{init_params, ModelConfig, MaskKind};
use scalevar::perf::{kv_entries, report};
use scalevar::sampler::{generate, SampleConfig};
use scalevar::train::{run_training, TrainConfig, TrainPhasePlan};
use scalevar::verify;
use scalevar_cli::commands::{self, GenerateRequest};
use scalevar_cli::config::RunConfig;

/// Percentage points allowed after rounding to one decimal.
const PCT_TOL: f64 = 0.05;
const CACHE_TOL: f64 = 1e-9;
const FD_TOL: f64 = 1e-4;
const ADDITIVITY_TOL: f64 = 1e-10;

struct Outcome {
    failed: Vec<usize>,
}

impl Outcome {
    fn record(&mut self, n: usize, ok: bool, start: Instant, detail: String) {
        println!(
            "criterion {n}: {} ({detail}) [{:.1}s]",
            if ok { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
        if !ok {
            self.failed.push(n);
        }
    }
}

fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

/// Independent count: every scale contributes its tokens once per layer
/// that processes it.
fn kv_oracle(sides: &[usize], depth: usize, d: usize, bridge: usize) -> u64 {
    sides
        .iter()
        .enumerate()
        .map(|(i, s)| (s * s * if i < bridge { depth } else { d }) as u64)
        .sum()
}

const LARGE_SIDES: [usize; 10] = [1, 2, 3, 4, 5, 6, 8, 10, 13, 16];

fn criterion_1(out: &mut Outcome) {
    let t = Instant::now();
    let schedule = ScaleSchedule::large();
    let mut ok = true;
    let mut parts = Vec::new();
    for (d, want) in [(16, 40.4), (8, 63.5), (2, 80.8)] {
        let policy = DepthPolicy::new(30, d, 6, 10).unwrap();
        let kv = kv_entries(&policy, &schedule).unwrap();
        let full = kv_oracle(&LARGE_SIDES, 30, 30, 10);
        let pct = 100.0 * (1.0 - kv as f64 / full as f64);
        ok &= kv == kv_oracle(&LARGE_SIDES, 30, d, 6) && (round1(pct) - want).abs() <= PCT_TOL;
        parts.push(format!("d={d}: {pct:.3}% vs {want}%"));
    }
    out.record(1, ok, t, parts.join(", "));
}

fn criterion_2(out: &mut Outcome) {
    let t = Instant::now();
    let policy = DepthPolicy::new(30, 16, 6, 10).unwrap();
    let r = report(&policy, &ScaleSchedule::large(), 1920).unwrap();
    let layer = 100.0 * r.layer_flops_reduction;
    let share = 100.0 * r.flexible_token_share;
    // 1 - 16/30 and 1 - 91/680.
    let layer_oracle = 100.0 * (1.0 - 16.0 / 30.0);
    let share_oracle = 100.0 * (1.0 - 91.0 / 680.0);
    let ok = (round1(layer) - 46.7).abs() <= PCT_TOL
        && (round1(share) - 86.6).abs() <= PCT_TOL
        && (layer - layer_oracle).abs() < 1e-9
        && (share - share_oracle).abs() < 1e-9;
    out.record(
        2,
        ok,
        t,
        format!("layer FLOPs reduction {layer:.3}% vs 46.7%, flexible token share {share:.3}% vs 86.6% (reported as 87%)"),
    );
}

fn criterion_3(out: &mut Outcome) {
    let t = Instant::now();
    let golden: [(usize, Vec<usize>); 5] = [
        (2, vec![0, 29]),
        (4, vec![0, 9, 19, 29]),
        (8, vec![0, 4, 8, 12, 16, 20, 24, 29]),
        (16, vec![0, 1, 3, 5, 7, 9, 11, 13, 15, 17, 19, 21, 23, 25, 27, 29]),
        (30, (0..30).collect()),
    ];
    let sets_ok = golden
        .iter()
        .all(|(d, want)| select_layers(30, *d).unwrap().as_slice() == want.as_slice());
    let report = nesting_report(30, &[2, 4, 8, 16, 30]).unwrap();
    let non_nested: Vec<(usize, usize, Option<usize>)> = report
        .iter()
        .filter(|v| !v.nested)
        .map(|v| (v.smaller, v.larger, v.witness))
        .collect();
    let ok = sets_ok && non_nested == vec![(4, 8, Some(9)), (8, 16, Some(4))];
    out.record(3, ok, t, format!("golden sets match: {sets_ok}, non-nested pairs {non_nested:?}"));
}

fn criterion_4(out: &mut Outcome, fx: &verify::Fixture) {
    let t = Instant::now();
    let cache = verify::check_cache_equivalence(fx, 0).unwrap();
    let extraction = verify::check_subnet_extraction(fx).unwrap();
    let perf = verify::check_perf_oracle(0).unwrap();
    let ok = cache[0].measured < CACHE_TOL
        && cache.iter().all(|c| c.passed)
        && extraction.measured == 0.0
        && perf.measured == 0.0;
    out.record(
        4,
        ok,
        t,
        format!(
            "max |dlogit| {:e} < {CACHE_TOL:e}, non-identical extracted logits {}, cache-count mismatches {} of 25",
            cache[0].measured, extraction.measured, perf.measured
        ),
    );
}

fn criterion_5(out: &mut Outcome, fx: &verify::Fixture) {
    let t = Instant::now();
    let fd = verify::check_gradients(fx, 100, 0).unwrap();
    let src = verify::check_gradient_sources(fx).unwrap();
    let ok = fd.measured < FD_TOL
        && src[0].measured <= ADDITIVITY_TOL
        && src[1].measured == 0.0
        && src[2].measured > 0.0;
    out.record(
        5,
        ok,
        t,
        format!(
            "FD max rel err {:.2e} over 100 coords, additivity {:.1e}, full-only flexible {} / bridge min {:.3e}",
            fd.measured, src[0].measured, src[1].measured, src[2].measured
        ),
    );
}

fn criterion_6(out: &mut Outcome, fx: &verify::Fixture) {
    let t = Instant::now();
    let c = verify::check_block_causality(fx, 20, MaskKind::BlockCausal, 0).unwrap();
    out.record(6, c.measured == 0.0, t, format!("{} changed logits over 20 pyramids", c.measured));
}

/// Final (subnet, full) validation losses of one toy run.
fn toy_run(
    params0: &scalevar::model::ModelParams,
    policy: &DepthPolicy,
    fixed_p: Option<f64>,
    train: &Dataset,
    val: &Dataset,
) -> (f64, f64) {
    let plan = TrainPhasePlan::new(2, 6, 8, 0.2).unwrap();
    let mut cfg = TrainConfig::new(plan, policy.clone());
    cfg.seed = 7;
    cfg.fixed_p = fixed_p;
    let mut params = params0.clone();
    let h = run_training(&mut params, &cfg, train, val, |_| Ok(())).unwrap();
    let last = h.epochs.last().unwrap();
    (last.loss_subnet, last.loss_full)
}

fn criterion_7(out: &mut Outcome) {
    let t = Instant::now();
    // Width 32 and a 1024/256 sample split of the toy data keep the three
    // runs inside the single-core budget.
    let config = ModelConfig::new(6, 32, 4, 8, ScaleSchedule::toy()).unwrap();
    let params0 = init_params(&config, 11).unwrap();
    let train = Dataset::synthesize(&config.schedule, 8, 1024, 1).unwrap();
    let val = Dataset::synthesize(&config.schedule, 8, 256, 2).unwrap();
    let policy = DepthPolicy::new(6, 3, 2, 5).unwrap();
    let (prog_sub, prog_full) = toy_run(&params0, &policy, None, &train, &val);
    let (low_sub, _) = toy_run(&params0, &policy, Some(0.1), &train, &val);
    let (_, high_full) = toy_run(&params0, &policy, Some(1.0), &train, &val);
    let ok = prog_sub < low_sub && prog_full < high_full;
    out.record(
        7,
        ok,
        t,
        format!(
            "subnet {prog_sub:.4} vs fixed p=0.1 {low_sub:.4}; full {prog_full:.4} vs fixed p=1.0 {high_full:.4}"
        ),
    );
}

fn criterion_8(out: &mut Outcome) {
    let t = Instant::now();
    let params = init_params(&ModelConfig::toy(), 5).unwrap();
    let full = DepthPolicy::new(6, 6, 2, 5).unwrap();
    let cfg = SampleConfig {
        top_k: 32,
        ..SampleConfig::default()
    };
    let mut ok = true;
    let mut differs_later = 0;
    for d in [2, 3, 4] {
        let sub = DepthPolicy::new(6, d, 2, 5).unwrap();
        for i in 0..8 {
            let c = cfg.for_sample(i);
            let a = generate(&params, (i % 8) as u32, &full, &c).unwrap();
            let b = generate(&params, (i % 8) as u32, &sub, &c).unwrap();
            ok &= a.maps[..2] == b.maps[..2];
            differs_later += (a.maps[2..] != b.maps[2..]) as usize;
        }
    }
    out.record(
        8,
        ok,
        t,
        format!("scales 1..2 identical for d in {{2,3,4}} vs d=6 over 8 seeds; {differs_later}/24 differ afterwards"),
    );
}

fn smoke_config(dir: &Path, run: &str) -> RunConfig {
    let cfg = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.cfg");
    let d = |s: &str| format!("{}", dir.join(s).display());
    RunConfig::load(
        Some(&cfg),
        &[
            format!("io.train_shard={}", d("train.svpy")),
            format!("io.val_shard={}", d("val.svpy")),
            format!("io.run_dir={}", d(run)),
            format!("io.output_dir={}", d(&format!("{run}/gen"))),
        ],
    )
    .unwrap()
}

fn criterion_9(out: &mut Outcome) {
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let read = |p: PathBuf| std::fs::read(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    let mut artifacts = Vec::new();
    for run in ["a", "b"] {
        let cfg = smoke_config(dir.path(), run);
        commands::gen_data(&cfg).unwrap();
        commands::train(&cfg).unwrap();
        let req = GenerateRequest {
            depths: vec![2, 4],
            seed: Some(3),
            ..GenerateRequest::default()
        };
        let shards = commands::generate(&cfg, &req).unwrap();
        let mut files = vec![read(cfg.metrics_path()), read(cfg.checkpoint_path())];
        files.extend(shards.into_iter().map(read));
        artifacts.push(files);
    }
    let ok = artifacts[0] == artifacts[1] && !artifacts[0][0].is_empty();
    out.record(
        9,
        ok,
        t,
        format!("metrics, final checkpoint and 2 output shards byte-identical across reruns: {ok}"),
    );
}

fn main() {
    let mut out = Outcome {
        failed: Vec::new(),
    };
    let fx = verify::toy_fixture(0, 20).unwrap();
    criterion_1(&mut out);
    criterion_2(&mut out);
    criterion_3(&mut out);
    criterion_4(&mut out, &fx);
    criterion_5(&mut out, &fx);
    criterion_6(&mut out, &fx);
    criterion_7(&mut out);
    criterion_8(&mut out);
    criterion_9(&mut out);
    if out.failed.is_empty() {
        println!("acceptance: all 9 criteria PASS");
    } else {
        println!("acceptance: failed criteria {:?}", out.failed);
        std::process::exit(1);
    }
}
