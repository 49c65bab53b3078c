//! Procedural multi-scale token pyramids.
//!
//! A smooth random field stands in for image features: its low-frequency
//! layout is fixed per class and its fine detail per seed. Each scale is
//! the field average-pooled to that grid and quantised into `V` bins, so
//! coarse maps carry class layout and fine maps carry texture.

mod batch;
mod field;
mod shard;

pub use batch::{epoch_order, BatchIter};
pub use field::{adaptive_pool, build_pyramid, generate_field, quantize, Field};
pub use shard::{read_shard, write_shard, SHARD_MAGIC, SHARD_VERSION};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Grid sizes of the `K` scales, coarse to fine, plus the vocabulary size.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleSchedule {
    grids: Vec<(usize, usize)>,
    vocab: usize,
}

impl ScaleSchedule {
    pub fn new(grids: Vec<(usize, usize)>, vocab: usize) -> Result<Self> {
        if grids.len() < 2 {
            return Err(Error::Contract(format!(
                "a schedule needs at least 2 scales, got {}",
                grids.len()
            )));
        }
        if grids.iter().any(|&(h, w)| h == 0 || w == 0) {
            return Err(Error::Contract("empty grid in schedule".into()));
        }
        if grids.windows(2).any(|p| p[0].0 * p[0].1 >= p[1].0 * p[1].1) {
            return Err(Error::Contract(format!(
                "grid areas must strictly increase: {grids:?}"
            )));
        }
        if !(2..=1 << 16).contains(&vocab) {
            return Err(Error::Contract(format!(
                "vocabulary size {vocab} outside [2, 65536]"
            )));
        }
        Ok(Self { grids, vocab })
    }

    /// Square grids with the given side lengths.
    pub fn square(sides: &[usize], vocab: usize) -> Result<Self> {
        Self::new(sides.iter().map(|&s| (s, s)).collect(), vocab)
    }

    /// Five scales (1, 2, 3, 4, 6 per side), `V = 64`.
    pub fn toy() -> Self {
        Self::square(&[1, 2, 3, 4, 6], 64).expect("valid preset")
    }

    /// The ten-scale 256px layout (1…16 per side), `V = 4096`.
    pub fn large() -> Self {
        Self::square(&[1, 2, 3, 4, 5, 6, 8, 10, 13, 16], 4096).expect("valid preset")
    }

    /// Same grids with a different vocabulary.
    pub fn with_vocab(&self, vocab: usize) -> Result<Self> {
        Self::new(self.grids.clone(), vocab)
    }

    pub fn scales(&self) -> usize {
        self.grids.len()
    }

    pub fn grids(&self) -> &[(usize, usize)] {
        &self.grids
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    /// Grid of scale `k` (1-based).
    pub fn grid(&self, k: usize) -> (usize, usize) {
        self.grids[k - 1]
    }

    pub fn finest(&self) -> (usize, usize) {
        *self.grids.last().expect("non-empty")
    }

    pub fn tokens_per_scale(&self) -> Vec<usize> {
        self.grids.iter().map(|&(h, w)| h * w).collect()
    }

    pub fn total_tokens(&self) -> usize {
        self.grids.iter().map(|&(h, w)| h * w).sum()
    }

    /// Tokens of scales `1..=n`.
    pub fn prefix_tokens(&self, n: usize) -> usize {
        self.grids.iter().take(n).map(|&(h, w)| h * w).sum()
    }

    /// Sequence offset of the first token of each scale, plus the total.
    pub fn offsets(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.grids.len() + 1);
        let mut acc = 0;
        out.push(0);
        for &(h, w) in &self.grids {
            acc += h * w;
            out.push(acc);
        }
        out
    }
}

/// One `h × w` grid of token ids, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenMap {
    pub h: usize,
    pub w: usize,
    pub tokens: Vec<u16>,
}

impl TokenMap {
    pub fn new(h: usize, w: usize, tokens: Vec<u16>) -> Result<Self> {
        if tokens.len() != h * w {
            return Err(Error::Shape(format!(
                "{} tokens for a {h}x{w} map",
                tokens.len()
            )));
        }
        Ok(Self { h, w, tokens })
    }

    pub fn get(&self, row: usize, col: usize) -> u16 {
        self.tokens[row * self.w + col]
    }
}

/// The `K` token maps of one sample together with its class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenPyramid {
    pub class_label: u32,
    pub maps: Vec<TokenMap>,
}

impl TokenPyramid {
    /// Checks map shapes and token ranges against `schedule`.
    pub fn validate(&self, schedule: &ScaleSchedule, classes: u32) -> Result<()> {
        if self.class_label >= classes {
            return Err(Error::Index(format!(
                "class {} outside {classes} classes",
                self.class_label
            )));
        }
        if self.maps.len() != schedule.scales() {
            return Err(Error::Shape(format!(
                "pyramid has {} maps, schedule has {} scales",
                self.maps.len(),
                schedule.scales()
            )));
        }
        for (k, (map, &(h, w))) in self.maps.iter().zip(schedule.grids()).enumerate() {
            if map.h != h || map.w != w || map.tokens.len() != h * w {
                return Err(Error::Shape(format!(
                    "scale {} map is {}x{}, schedule says {h}x{w}",
                    k + 1,
                    map.h,
                    map.w
                )));
            }
            if let Some(&t) = map.tokens.iter().find(|&&t| t as usize >= schedule.vocab()) {
                return Err(Error::Index(format!("token {t} at scale {}", k + 1)));
            }
        }
        Ok(())
    }

    /// All tokens, scale by scale, as model targets.
    pub fn flat_tokens(&self) -> Vec<usize> {
        self.maps
            .iter()
            .flat_map(|m| m.tokens.iter().map(|&t| t as usize))
            .collect()
    }
}

/// A collection of pyramids sharing one schedule; the contents of a shard.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub schedule: ScaleSchedule,
    pub classes: u32,
    pub base_seed: u64,
    pub samples: Vec<TokenPyramid>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Deterministically synthesises `count` pyramids; sample `i` uses
    /// [`sample_spec`]`(base_seed, i, classes)`.
    pub fn synthesize(
        schedule: &ScaleSchedule,
        classes: u32,
        count: usize,
        base_seed: u64,
    ) -> Result<Self> {
        if classes == 0 {
            return Err(Error::Contract("at least one class is required".into()));
        }
        let samples = (0..count)
            .map(|i| regenerate(schedule, classes, base_seed, i))
            .collect::<Result<_>>()?;
        Ok(Self {
            schedule: schedule.clone(),
            classes,
            base_seed,
            samples,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.samples
            .iter()
            .try_for_each(|s| s.validate(&self.schedule, self.classes))
    }
}

/// Rebuilds sample `index` of a synthesised dataset from its seeds.
pub fn regenerate(
    schedule: &ScaleSchedule,
    classes: u32,
    base_seed: u64,
    index: usize,
) -> Result<TokenPyramid> {
    let (seed, class) = sample_spec(base_seed, index, classes);
    let field = generate_field(seed, class, schedule.finest());
    build_pyramid(&field, class, schedule)
}

/// Field seed and class label of sample `index`.
pub fn sample_spec(base_seed: u64, index: usize, classes: u32) -> (u64, u32) {
    let seed = splitmix64(base_seed ^ splitmix64(index as u64));
    (seed, (index % classes as usize) as u32)
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_validation() {
        assert!(ScaleSchedule::square(&[1], 8).is_err());
        assert!(ScaleSchedule::square(&[2, 2], 8).is_err());
        assert!(ScaleSchedule::square(&[1, 2], 1).is_err());
        let s = ScaleSchedule::large();
        assert_eq!(s.total_tokens(), 680);
        assert_eq!(s.prefix_tokens(6), 91);
        assert_eq!(ScaleSchedule::toy().total_tokens(), 66);
        assert_eq!(ScaleSchedule::toy().offsets(), vec![0, 1, 5, 14, 30, 66]);
    }

    #[test]
    fn finest_scale_is_not_degenerate() {
        let schedule = ScaleSchedule::toy().with_vocab(16).unwrap();
        let ds = Dataset::synthesize(&schedule, 8, 1000, 7).unwrap();
        let mut seen = [false; 16];
        for s in &ds.samples {
            for &t in &s.maps.last().unwrap().tokens {
                seen[t as usize] = true;
            }
        }
        assert!(seen.iter().filter(|&&b| b).count() >= 8);
    }

    #[test]
    fn regenerate_matches_synthesis() {
        let schedule = ScaleSchedule::toy();
        let ds = Dataset::synthesize(&schedule, 8, 12, 3).unwrap();
        for (i, s) in ds.samples.iter().enumerate() {
            assert_eq!(&regenerate(&schedule, 8, 3, i).unwrap(), s);
        }
        ds.validate().unwrap();
    }
}
