//! The weight-shared next-scale transformer.
//!
//! A pre-norm decoder whose sequence is the concatenation of all scales.
//! Attention is full within a scale and causal across scales. Layers not
//! active at a scale are skipped on the residual stream and store no
//! keys/values for that scale's tokens.
//!
//! Two execution paths share the kernels:
//! - [`forward_step`] runs one scale against a [`KVCache`] (inference);
//! - [`sequence`] runs all scales of a batch at once under the
//!   block-causal mask on an autodiff [`Graph`](crate::tensor::Graph)
//!   (training, teacher forcing).

mod cache;
mod checkpoint;
mod embed;
mod params;
pub mod sequence;
mod step;

pub use cache::KVCache;
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use embed::{embed_step, input_ids, upsample_indices};
pub use params::{extract_subnet, init_params, LayerParams, ModelParams};
pub use sequence::{forward_pyramid, MaskKind};
pub use step::{forward_pyramid_stepwise, forward_step};

use serde::Serialize;

use crate::data::ScaleSchedule;
use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub classes: usize,
    pub schedule: ScaleSchedule,
}

impl ModelConfig {
    pub fn new(
        depth: usize,
        width: usize,
        heads: usize,
        classes: usize,
        schedule: ScaleSchedule,
    ) -> Result<Self> {
        let cfg = Self {
            depth,
            width,
            heads,
            classes,
            schedule,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// D = 6, width 64, 4 heads, the toy schedule, 8 classes.
    pub fn toy() -> Self {
        Self::new(6, 64, 4, 8, ScaleSchedule::toy()).expect("valid preset")
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::Config(format!("depth must be >= 2, got {}", self.depth)));
        }
        self.validate_shape()
    }

    /// Everything but the depth bound, which extracted subnets may undercut.
    pub(crate) fn validate_shape(&self) -> Result<()> {
        if self.heads == 0 || self.width < 2 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "width {} must be >= 2 and divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.classes == 0 {
            return Err(Error::Config("at least one class is required".into()));
        }
        Ok(())
    }

    pub fn vocab(&self) -> usize {
        self.schedule.vocab()
    }

    pub fn scales(&self) -> usize {
        self.schedule.scales()
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}
