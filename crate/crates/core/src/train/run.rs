use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::step::{gradient_source_report, pyramid_loss, train_step, GradientMode, Optimizer};
use super::{branch_probability, sample_branch, Branch, Phase, Ramp, TrainPhasePlan};
use crate::data::{BatchIter, Dataset, TokenPyramid};
use crate::depth::DepthPolicy;
use crate::error::{Error, Result};
use crate::model::{save_checkpoint, ModelParams};
use crate::tensor::AdamConfig;

const BRANCH_SALT: u64 = 0xB4A2_C0DE_5EED_0001;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub plan: TrainPhasePlan,
    pub policy: DepthPolicy,
    pub batch_size: usize,
    /// Drives the batch order and the branch draws.
    pub seed: u64,
    pub adam: AdamConfig,
    pub ramp: Ramp,
    /// Constant subnet probability for every epoch instead of the phase
    /// schedule; used for fixed-ratio baselines.
    pub fixed_p: Option<f64>,
    /// Leading validation samples used for the gradient-source norms.
    pub probe_size: usize,
    pub gradient_mode: GradientMode,
    /// Where `phase{1,2,3}.svck` are written at each phase end.
    pub checkpoint_dir: Option<PathBuf>,
}

impl TrainConfig {
    pub fn new(plan: TrainPhasePlan, policy: DepthPolicy) -> Self {
        Self {
            plan,
            policy,
            batch_size: 16,
            seed: 0,
            adam: AdamConfig::default(),
            ramp: Ramp::PerStep,
            fixed_p: None,
            probe_size: 16,
            gradient_mode: GradientMode::TokenRows,
            checkpoint_dir: None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct BranchCounts {
    pub subnet: usize,
    pub full: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub phase: u8,
    /// Mean subnet probability over the epoch's steps.
    pub p: f64,
    /// Validation loss of the subnet branch.
    pub loss_subnet: f64,
    /// Validation loss of the full network.
    pub loss_full: f64,
    /// Mean training loss of the steps that drew each branch.
    pub train_loss_subnet: Option<f64>,
    pub train_loss_full: Option<f64>,
    pub branch_counts: BranchCounts,
    /// Per-layer gradient norms on the probe batch, mixed over branches
    /// by the epoch's subnet probability.
    pub per_layer_bridge_norms: Vec<f64>,
    pub per_layer_flexible_norms: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub checkpoints: Vec<PathBuf>,
}

fn check_data(params: &ModelParams, ds: &Dataset, what: &str) -> Result<()> {
    let cfg = &params.config;
    if ds.schedule != cfg.schedule {
        return Err(Error::Config(format!(
            "{what} shard schedule {:?} (V={}) differs from the model's {:?} (V={})",
            ds.schedule.grids(),
            ds.schedule.vocab(),
            cfg.schedule.grids(),
            cfg.vocab()
        )));
    }
    if ds.classes as usize > cfg.classes {
        return Err(Error::Config(format!(
            "{what} shard has {} classes, the model {}",
            ds.classes, cfg.classes
        )));
    }
    if ds.is_empty() {
        return Err(Error::Config(format!("{what} shard is empty")));
    }
    Ok(())
}

/// Mean validation loss over `ds` in batches of `batch_size`.
fn dataset_loss(
    params: &ModelParams,
    ds: &Dataset,
    policy: &DepthPolicy,
    branch: Branch,
    batch_size: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for chunk in ds.samples.chunks(batch_size) {
        let refs: Vec<&TokenPyramid> = chunk.iter().collect();
        total += pyramid_loss(params, &refs, policy, branch)? * chunk.len() as f64;
    }
    Ok(total / ds.len() as f64)
}

/// Runs every epoch of `cfg.plan` on `train`, evaluating on `val` after
/// each epoch; `observer` sees each record as soon as it is complete.
pub fn run_training(
    params: &mut ModelParams,
    cfg: &TrainConfig,
    train: &Dataset,
    val: &Dataset,
    mut observer: impl FnMut(&EpochRecord) -> Result<()>,
) -> Result<TrainHistory> {
    check_data(params, train, "training")?;
    check_data(params, val, "validation")?;
    if cfg.policy.depth != params.config.depth || cfg.policy.scales != params.config.scales() {
        return Err(Error::Config(format!(
            "policy for D={}, K={} does not fit the model",
            cfg.policy.depth, cfg.policy.scales
        )));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    if let Some(p) = cfg.fixed_p {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Config(format!("fixed ratio {p} outside [0, 1]")));
        }
    }
    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let plan = &cfg.plan;
    let mut opt = Optimizer::new(params, cfg.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ BRANCH_SALT);
    let steps = BatchIter::batches_per_epoch(train.len(), cfg.batch_size);
    let probe: Vec<&TokenPyramid> = val.samples.iter().take(cfg.probe_size.max(1)).collect();
    let mut history = TrainHistory::default();

    for epoch in 0..plan.e {
        let phase = plan.phase(epoch);
        let mut counts = BranchCounts::default();
        let mut sums = [(0.0, 0usize); 2];
        let mut p_sum = 0.0;
        for (s, idx) in BatchIter::new(train.len(), cfg.batch_size, cfg.seed, epoch as u64)?.enumerate() {
            let p = match (cfg.fixed_p, phase) {
                (Some(p), _) => p,
                (None, Phase::Subnet) => 1.0,
                (None, _) => {
                    let at = match cfg.ramp {
                        Ramp::PerStep => epoch as f64 + s as f64 / steps as f64,
                        Ramp::PerEpoch => epoch as f64,
                    };
                    branch_probability(at, plan)?
                }
            };
            p_sum += p;
            let branch = sample_branch(&mut rng, p);
            let batch: Vec<&TokenPyramid> = idx.iter().map(|&i| &train.samples[i]).collect();
            let loss = train_step(params, &batch, branch, &cfg.policy, &mut opt)?;
            let slot = match branch {
                Branch::Subnet => {
                    counts.subnet += 1;
                    0
                }
                Branch::Full => {
                    counts.full += 1;
                    1
                }
            };
            sums[slot].0 += loss;
            sums[slot].1 += 1;
        }
        let p = p_sum / steps as f64;

        let mut bridge = vec![0.0; params.config.depth];
        let mut flexible = vec![0.0; params.config.depth];
        for (branch, weight) in [(Branch::Subnet, p), (Branch::Full, 1.0 - p)] {
            if weight == 0.0 {
                continue;
            }
            let r = gradient_source_report(params, &probe, &cfg.policy, branch, cfg.gradient_mode)?;
            for l in 0..bridge.len() {
                bridge[l] += weight * r.bridge_norms[l];
                flexible[l] += weight * r.flexible_norms[l];
            }
        }

        let mean = |(sum, n): (f64, usize)| (n > 0).then(|| sum / n as f64);
        let record = EpochRecord {
            epoch: epoch + 1,
            phase: phase as u8,
            p,
            loss_subnet: dataset_loss(params, val, &cfg.policy, Branch::Subnet, cfg.batch_size)?,
            loss_full: dataset_loss(params, val, &cfg.policy, Branch::Full, cfg.batch_size)?,
            train_loss_subnet: mean(sums[0]),
            train_loss_full: mean(sums[1]),
            branch_counts: counts,
            per_layer_bridge_norms: bridge,
            per_layer_flexible_norms: flexible,
        };
        observer(&record)?;
        history.epochs.push(record);

        let boundary = [(plan.e1, 1), (plan.e2, 2), (plan.e, 3)]
            .into_iter()
            .find(|&(b, k)| b == epoch + 1 && !(k == 3 && plan.e2 == plan.e));
        if let (Some((_, k)), Some(dir)) = (boundary, &cfg.checkpoint_dir) {
            let path = dir.join(format!("phase{k}.svck"));
            save_checkpoint(&path, params)?;
            history.checkpoints.push(path);
        }
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ScaleSchedule;
    use crate::model::{init_params, load_checkpoint, ModelConfig};

    fn tiny() -> (ModelConfig, Dataset, Dataset) {
        let schedule = ScaleSchedule::square(&[1, 2, 3], 16).unwrap();
        let cfg = ModelConfig::new(4, 16, 2, 4, schedule.clone()).unwrap();
        let train = Dataset::synthesize(&schedule, 4, 32, 1).unwrap();
        let val = Dataset::synthesize(&schedule, 4, 8, 2).unwrap();
        (cfg, train, val)
    }

    fn config() -> TrainConfig {
        let mut c = TrainConfig::new(
            TrainPhasePlan::new(1, 2, 3, 0.2).unwrap(),
            DepthPolicy::new(4, 2, 1, 3).unwrap(),
        );
        c.batch_size = 8;
        c.seed = 5;
        c.probe_size = 4;
        c.adam.lr = 3e-3;
        c
    }

    #[test]
    fn smoke_run_and_checkpoints() {
        let (mcfg, train, val) = tiny();
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = config();
        cfg.checkpoint_dir = Some(dir.path().to_path_buf());
        let mut params = init_params(&mcfg, 0).unwrap();
        let mut seen = 0;
        let h = run_training(&mut params, &cfg, &train, &val, |_| {
            seen += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, 3);
        assert_eq!(h.epochs.len(), 3);
        let phases: Vec<u8> = h.epochs.iter().map(|r| r.phase).collect();
        assert_eq!(phases, vec![1, 2, 3]);
        for r in &h.epochs {
            assert_eq!(r.branch_counts.subnet + r.branch_counts.full, 4);
        }
        let last = &h.epochs[2];
        assert_eq!(last.p, 1.0);
        assert_eq!(last.branch_counts.full, 0);
        for l in cfg.policy.full_only_layers() {
            assert_eq!(last.per_layer_flexible_norms[l], 0.0);
            assert!(last.per_layer_bridge_norms[l] > 0.0);
        }
        assert_eq!(h.checkpoints.len(), 3);
        assert_eq!(load_checkpoint(&h.checkpoints[2]).unwrap(), params);
    }

    #[test]
    fn reruns_are_bit_identical() {
        let (mcfg, train, val) = tiny();
        let run = || {
            let mut params = init_params(&mcfg, 0).unwrap();
            let h = run_training(&mut params, &config(), &train, &val, |_| Ok(())).unwrap();
            (h, params)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn fixed_ratio_overrides_schedule() {
        let (mcfg, train, val) = tiny();
        let mut cfg = config();
        cfg.fixed_p = Some(0.0);
        let mut params = init_params(&mcfg, 0).unwrap();
        let h = run_training(&mut params, &cfg, &train, &val, |_| Ok(())).unwrap();
        assert!(h.epochs.iter().all(|r| r.branch_counts.subnet == 0 && r.p == 0.0));
    }

    #[test]
    fn mismatched_shard_is_config_error() {
        let (mcfg, _, val) = tiny();
        let other = Dataset::synthesize(&ScaleSchedule::toy(), 4, 4, 0).unwrap();
        let mut params = init_params(&mcfg, 0).unwrap();
        let err = run_training(&mut params, &config(), &other, &val, |_| Ok(()));
        assert!(matches!(err, Err(Error::Config(_))));
    }
}
