//! Progressive supernet training.
//!
//! Three phases over integer epoch boundaries `0 < E1 < E2 ≤ E`:
//! joint training with a fixed subnet probability, a linear ramp of that
//! probability to 1, and subnet-only training. Each optimisation step
//! draws one branch: the subnet branch runs the zone rule of the policy,
//! the full branch runs every layer at every scale.

mod run;
mod step;

pub use run::{run_training, BranchCounts, EpochRecord, TrainConfig, TrainHistory};
pub use step::{
    branch_plan, gradient_source_report, gradient_sources, loss_and_grads, pyramid_loss,
    train_step, GradientMode, GradientSources, Optimizer, SourceReport,
};

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Subnet,
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Phase {
    Joint = 1,
    Ramp = 2,
    Subnet = 3,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Ramp {
    /// `p` follows `epoch + step/steps_per_epoch`.
    #[default]
    PerStep,
    /// `p` is held for the whole epoch at its value at the epoch start.
    PerEpoch,
}

/// Epoch boundaries and the starting subnet probability.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TrainPhasePlan {
    pub e1: usize,
    pub e2: usize,
    pub e: usize,
    pub p_initial: f64,
}

impl TrainPhasePlan {
    pub fn new(e1: usize, e2: usize, e: usize, p_initial: f64) -> Result<Self> {
        if !(0 < e1 && e1 < e2 && e2 <= e) {
            return Err(Error::Config(format!(
                "epoch boundaries must satisfy 0 < E1 < E2 <= E, got ({e1}, {e2}, {e})"
            )));
        }
        if !(0.0..=1.0).contains(&p_initial) {
            return Err(Error::Config(format!("p_initial {p_initial} outside [0, 1]")));
        }
        Ok(Self { e1, e2, e, p_initial })
    }

    /// Phase durations `(ρ1, ρ2, ρ3)` in epochs.
    pub fn from_durations(joint: usize, ramp: usize, subnet: usize) -> Result<Self> {
        Self::new(joint, joint + ramp, joint + ramp + subnet, 0.2)
    }

    /// Phase durations used per subnet depth on the 30-layer model:
    /// 5 joint and 15 ramp epochs, then longer subnet-only training the
    /// shallower the subnet.
    pub fn preset(d: usize) -> Option<Self> {
        let subnet = match d {
            16 => 5,
            8 => 8,
            4 => 12,
            2 => 15,
            _ => return None,
        };
        Some(Self::from_durations(5, 15, subnet).expect("valid preset"))
    }

    pub fn durations(&self) -> (usize, usize, usize) {
        (self.e1, self.e2 - self.e1, self.e - self.e2)
    }

    /// Phase of the 0-based epoch index `epoch`.
    pub fn phase(&self, epoch: usize) -> Phase {
        if epoch < self.e1 {
            Phase::Joint
        } else if epoch < self.e2 {
            Phase::Ramp
        } else {
            Phase::Subnet
        }
    }
}

/// Subnet probability at fractional epoch `epoch ∈ [0, E]`.
pub fn branch_probability(epoch: f64, plan: &TrainPhasePlan) -> Result<f64> {
    if !(0.0..=plan.e as f64).contains(&epoch) {
        return Err(Error::Contract(format!(
            "epoch {epoch} outside [0, {}]",
            plan.e
        )));
    }
    let (e1, e2) = (plan.e1 as f64, plan.e2 as f64);
    Ok(if epoch <= e1 {
        plan.p_initial
    } else if epoch <= e2 {
        plan.p_initial + (1.0 - plan.p_initial) * (epoch - e1) / (e2 - e1)
    } else {
        1.0
    })
}

/// Subnet with probability `p`.
pub fn sample_branch<R: Rng + ?Sized>(rng: &mut R, p: f64) -> Branch {
    if rng.random::<f64>() < p {
        Branch::Subnet
    } else {
        Branch::Full
    }
}
