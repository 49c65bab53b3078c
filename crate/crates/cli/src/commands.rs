//! The five commands, as library functions returning their results.
//! Machine-readable outputs go to files or the returned values; progress
//! with timings goes to stderr.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use scalevar::data::{read_shard, write_shard, Dataset, ScaleSchedule};
use scalevar::depth::{enumerate_configs, nesting_report, NestingVerdict};
use scalevar::model::{init_params, load_checkpoint, save_checkpoint};
use scalevar::perf::{sweep, to_csv};
use scalevar::sampler::{generate as generate_one, render_pgm};
use scalevar::train::{run_training, BranchCounts, EpochRecord, TrainHistory};
use scalevar::verify::{run_all, CheckResult, VerifyOptions};
use scalevar::{depth::DepthPolicy, Error, Result};

use crate::config::RunConfig;

/// Validation shards use a seed stream disjoint from the training one.
const VAL_SALT: u64 = 0x5641_4C5F_5345_4544;

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GenDataSummary {
    pub train: (PathBuf, usize),
    pub val: (PathBuf, usize),
}

pub fn gen_data(cfg: &RunConfig) -> Result<GenDataSummary> {
    let schedule = cfg.schedule()?;
    let classes = cfg.classes as u32;
    let mut out = Vec::new();
    for (path, count, seed) in [
        (&cfg.train_shard, cfg.train_samples, cfg.data_seed),
        (&cfg.val_shard, cfg.val_samples, cfg.data_seed ^ VAL_SALT),
    ] {
        let ds = Dataset::synthesize(&schedule, classes, count, seed)?;
        create_parent(path)?;
        write_shard(path, &ds)?;
        out.push((path.clone(), count));
    }
    let val = out.pop().expect("two shards");
    let train = out.pop().expect("two shards");
    Ok(GenDataSummary { train, val })
}

/// One line of the metrics stream.
#[derive(Serialize)]
struct MetricsRecord<'a> {
    epoch: usize,
    phase: u8,
    p: f64,
    loss_subnet: f64,
    loss_full: f64,
    branch_counts: BranchCounts,
    per_layer_bridge_norms: &'a [f64],
    per_layer_flexible_norms: &'a [f64],
}

pub fn metrics_line(r: &EpochRecord) -> String {
    serde_json::to_string(&MetricsRecord {
        epoch: r.epoch,
        phase: r.phase,
        p: r.p,
        loss_subnet: r.loss_subnet,
        loss_full: r.loss_full,
        branch_counts: r.branch_counts,
        per_layer_bridge_norms: &r.per_layer_bridge_norms,
        per_layer_flexible_norms: &r.per_layer_flexible_norms,
    })
    .expect("finite metrics serialise")
}

/// Trains from the configured shards, streaming metrics to
/// `<run_dir>/metrics.jsonl` and writing `phase{k}.svck` plus the final
/// checkpoint.
pub fn train(cfg: &RunConfig) -> Result<TrainHistory> {
    let train = read_shard(&cfg.train_shard)?;
    let val = read_shard(&cfg.val_shard)?;
    let tcfg = cfg.train_config()?;
    let mut params = init_params(&cfg.model_config()?, cfg.model_seed)?;
    create_dir(&cfg.run_dir)?;
    let metrics_path = cfg.metrics_path();
    let mut metrics = fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let start = Instant::now();
    let history = run_training(&mut params, &tcfg, &train, &val, |r| {
        writeln!(metrics, "{}", metrics_line(r)).map_err(|e| Error::io(&metrics_path, e))?;
        eprintln!(
            "[{:8.1}s] epoch {} phase {} p={:.3} val subnet {:.4} full {:.4}",
            start.elapsed().as_secs_f64(),
            r.epoch,
            r.phase,
            r.p,
            r.loss_subnet,
            r.loss_full
        );
        Ok(())
    })?;
    let final_path = cfg.checkpoint_path();
    create_parent(&final_path)?;
    save_checkpoint(&final_path, &params)?;
    Ok(history)
}

#[derive(Clone, Debug, Default)]
pub struct GenerateRequest {
    pub depths: Vec<usize>,
    pub bridge: Option<usize>,
    pub count: Option<usize>,
    pub seed: Option<u64>,
    pub pgm: bool,
    pub checkpoint: Option<PathBuf>,
}

/// Shard path of the pyramids generated at depth `d` with bridge `n`.
pub fn output_shard(cfg: &RunConfig, d: usize, n: usize) -> PathBuf {
    cfg.output_dir.join(format!("samples_d{d}_N{n}.svpy"))
}

/// Loads the checkpoint once and generates at every requested depth.
pub fn generate(cfg: &RunConfig, req: &GenerateRequest) -> Result<Vec<PathBuf>> {
    let ckpt = req.checkpoint.clone().unwrap_or_else(|| cfg.checkpoint_path());
    let params = load_checkpoint(&ckpt)?;
    let model = &params.config;
    let schedule = cfg.schedule()?;
    if model.schedule != schedule {
        return Err(Error::Config(format!(
            "checkpoint {} was trained on grids {:?} (V={}), the config has {:?} (V={})",
            ckpt.display(),
            model.schedule.grids(),
            model.vocab(),
            schedule.grids(),
            schedule.vocab()
        )));
    }
    let supported = cfg.supported_depths(model.depth);
    let depths = if req.depths.is_empty() { vec![cfg.d] } else { req.depths.clone() };
    if let Some(bad) = depths.iter().find(|d| !supported.contains(d)) {
        return Err(Error::Config(format!(
            "depth {bad} is not supported; valid depths: {supported:?}"
        )));
    }
    let bridge = req.bridge.unwrap_or(cfg.bridge);
    let mut scfg = cfg.sample_config();
    if let Some(s) = req.seed {
        scfg.seed = s;
    }
    let count = req.count.unwrap_or(cfg.count);
    create_dir(&cfg.output_dir)?;
    let mut written = Vec::new();
    for &d in &depths {
        let policy = DepthPolicy::new(model.depth, d, bridge, model.scales())
            .map_err(|e| Error::Config(e.to_string()))?;
        let samples = (0..count)
            .map(|i| generate_one(&params, (i % model.classes) as u32, &policy, &scfg.for_sample(i)))
            .collect::<Result<Vec<_>>>()?;
        if req.pgm {
            let dir = cfg.output_dir.join(format!("pgm_d{d}_N{bridge}"));
            create_dir(&dir)?;
            for (i, p) in samples.iter().enumerate() {
                for (k, map) in p.maps.iter().enumerate() {
                    let path = dir.join(format!("sample{i:04}_scale{}.pgm", k + 1));
                    fs::write(&path, render_pgm(map, model.vocab())).map_err(|e| Error::io(&path, e))?;
                }
            }
        }
        let ds = Dataset {
            schedule: schedule.clone(),
            classes: model.classes as u32,
            base_seed: scfg.seed,
            samples,
        };
        let path = output_shard(cfg, d, bridge);
        write_shard(&path, &ds)?;
        written.push(path);
    }
    Ok(written)
}

#[derive(Clone, Debug)]
pub struct AnalyzeRequest {
    pub depth: usize,
    pub depths: Vec<usize>,
    pub bridges: Vec<usize>,
    pub schedule: ScaleSchedule,
    pub width: usize,
}

impl Default for AnalyzeRequest {
    fn default() -> Self {
        Self {
            depth: 30,
            depths: vec![2, 4, 8, 16, 30],
            bridges: vec![6, 7, 8, 9, 10],
            schedule: ScaleSchedule::large(),
            width: 1920,
        }
    }
}

/// `large`, `toy`, or comma-separated square side lengths.
pub fn parse_schedule(s: &str) -> Result<ScaleSchedule> {
    match s {
        "large" => Ok(ScaleSchedule::large()),
        "toy" => Ok(ScaleSchedule::toy()),
        _ => {
            let sides = s
                .split(',')
                .map(|x| x.trim().parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::Config(format!("invalid schedule {s:?}")))?;
            ScaleSchedule::square(&sides, 2).map_err(|e| Error::Config(e.to_string()))
        }
    }
}

pub fn nesting_csv(verdicts: &[NestingVerdict]) -> String {
    let mut out = String::from("smaller,larger,nested,witness\n");
    for v in verdicts {
        let w = v.witness.map(|w| w.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{w}\n", v.smaller, v.larger, v.nested));
    }
    out
}

/// The sweep CSV, a blank line, then the nesting section.
pub fn analyze(req: &AnalyzeRequest) -> Result<String> {
    let to_config = |e: Error| Error::Config(e.to_string());
    let policies = enumerate_configs(req.depth, req.schedule.scales(), &req.depths, &req.bridges)
        .map_err(to_config)?;
    let rows = sweep(&policies, &req.schedule, req.width)?;
    let nesting = nesting_report(req.depth, &req.depths).map_err(to_config)?;
    Ok(format!("{}\n# nesting\n{}", to_csv(&rows), nesting_csv(&nesting)))
}

pub fn verify(opts: &VerifyOptions) -> Result<Vec<CheckResult>> {
    run_all(opts)
}

pub fn format_check(c: &CheckResult) -> String {
    format!(
        "{} {} measured={:e} tolerance={:e} ({})",
        if c.passed { "PASS" } else { "FAIL" },
        c.name,
        c.measured,
        c.tolerance,
        c.detail
    )
}
