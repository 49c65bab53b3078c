//! Equidistant subnet selection and the two-zone per-scale depth rule.
//!
//! Scales `1..=N` (the bridge zone) always run every layer; scales
//! `N+1..=K` (the flexible zone) run only the selected subnet layers.

use serde::Serialize;

use crate::error::{Error, Result};

/// Sorted, duplicate-free set of layer indices.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct LayerSet(Vec<usize>);

impl LayerSet {
    pub fn full(depth: usize) -> Self {
        Self((0..depth).collect())
    }

    pub fn empty() -> Self {
        Self(Vec::new())
    }

    /// Sorts and deduplicates `layers`.
    pub fn from_indices(mut layers: Vec<usize>) -> Self {
        layers.sort_unstable();
        layers.dedup();
        Self(layers)
    }

    pub fn contains(&self, layer: usize) -> bool {
        self.0.binary_search(&layer).is_ok()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    pub fn is_subset(&self, other: &LayerSet) -> bool {
        self.0.iter().all(|&l| other.contains(l))
    }

    /// Smallest element of `self` missing from `other`.
    pub fn first_missing(&self, other: &LayerSet) -> Option<usize> {
        self.0.iter().copied().find(|&l| !other.contains(l))
    }

    pub fn max(&self) -> Option<usize> {
        self.0.last().copied()
    }
}

/// `{ ⌊i·(D−1)/(d−1)⌋ : i = 0..d−1 }`; `d = 1` yields `{0}`.
pub fn select_layers(depth: usize, d: usize) -> Result<LayerSet> {
    if d == 0 || d > depth {
        return Err(Error::Contract(format!(
            "subnet depth {d} must lie in 1..={depth}"
        )));
    }
    if d == 1 {
        return Ok(LayerSet(vec![0]));
    }
    Ok(LayerSet(
        (0..d).map(|i| i * (depth - 1) / (d - 1)).collect(),
    ))
}

/// Full depth `D`, subnet depth `d`, bridge size `N` over `K` scales.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct DepthPolicy {
    pub depth: usize,
    pub d: usize,
    pub bridge: usize,
    pub scales: usize,
    pub selected: LayerSet,
}

impl DepthPolicy {
    pub fn new(depth: usize, d: usize, bridge: usize, scales: usize) -> Result<Self> {
        if bridge > scales {
            return Err(Error::Contract(format!(
                "bridge size {bridge} exceeds {scales} scales"
            )));
        }
        Ok(Self {
            depth,
            d,
            bridge,
            scales,
            selected: select_layers(depth, d)?,
        })
    }

    /// Every scale at full depth.
    pub fn full(depth: usize, scales: usize) -> Self {
        Self::new(depth, depth, scales, scales).expect("valid full policy")
    }

    /// Layers outside the subnet selection.
    pub fn full_only_layers(&self) -> Vec<usize> {
        (0..self.depth).filter(|&l| !self.selected.contains(l)).collect()
    }

    pub fn is_bridge(&self, k: usize) -> bool {
        k <= self.bridge
    }
}

/// Active layers at scale `k` (1-based): every layer in the bridge
/// zone, the subnet selection in the flexible zone.
pub fn active_layers(k: usize, policy: &DepthPolicy) -> Result<LayerSet> {
    if k == 0 || k > policy.scales {
        return Err(Error::Contract(format!(
            "scale {k} outside 1..={}",
            policy.scales
        )));
    }
    Ok(if k <= policy.bridge {
        LayerSet::full(policy.depth)
    } else {
        policy.selected.clone()
    })
}

/// Per-scale active sets for all `K` scales.
pub fn active_plan(policy: &DepthPolicy) -> Vec<LayerSet> {
    (1..=policy.scales)
        .map(|k| active_layers(k, policy).expect("k in range"))
        .collect()
}

/// Cartesian product of `depths × bridges`, `d` ascending then `N`.
pub fn enumerate_configs(
    depth: usize,
    scales: usize,
    depths: &[usize],
    bridges: &[usize],
) -> Result<Vec<DepthPolicy>> {
    let mut ds = depths.to_vec();
    ds.sort_unstable();
    ds.dedup();
    let mut ns = bridges.to_vec();
    ns.sort_unstable();
    ns.dedup();
    let mut out = Vec::with_capacity(ds.len() * ns.len());
    for &d in &ds {
        for &n in &ns {
            out.push(DepthPolicy::new(depth, d, n, scales)?);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct NestingVerdict {
    pub smaller: usize,
    pub larger: usize,
    pub nested: bool,
    /// Smallest layer of the smaller subnet absent from the larger one.
    pub witness: Option<usize>,
}

/// Checks `select_layers(D, d) ⊆ select_layers(D, d′)` for every pair
/// `d < d′` of `depths`.
pub fn nesting_report(depth: usize, depths: &[usize]) -> Result<Vec<NestingVerdict>> {
    let mut ds = depths.to_vec();
    ds.sort_unstable();
    ds.dedup();
    let sets = ds
        .iter()
        .map(|&d| select_layers(depth, d))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::new();
    for i in 0..ds.len() {
        for j in i + 1..ds.len() {
            let witness = sets[i].first_missing(&sets[j]);
            out.push(NestingVerdict {
                smaller: ds[i],
                larger: ds[j],
                nested: witness.is_none(),
                witness,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn golden_sets_for_depth_30() {
        assert_eq!(select_layers(30, 30).unwrap(), LayerSet::full(30));
        assert_eq!(select_layers(30, 2).unwrap().as_slice(), &[0, 29]);
        assert_eq!(
            select_layers(30, 16).unwrap().as_slice(),
            &[0, 1, 3, 5, 7, 9, 11, 13, 15, 17, 19, 21, 23, 25, 27, 29]
        );
        assert_eq!(
            select_layers(30, 8).unwrap().as_slice(),
            &[0, 4, 8, 12, 16, 20, 24, 29]
        );
        assert_eq!(select_layers(30, 4).unwrap().as_slice(), &[0, 9, 19, 29]);
        assert_eq!(select_layers(30, 1).unwrap().as_slice(), &[0]);
        assert!(select_layers(30, 31).is_err());
        assert!(select_layers(30, 0).is_err());
    }

    #[test]
    fn exhaustive_size_and_endpoints() {
        for depth in 2..=64 {
            for d in 2..=depth {
                let s = select_layers(depth, d).unwrap();
                assert_eq!(s.len(), d, "D={depth} d={d}");
                assert!(s.contains(0) && s.contains(depth - 1));
                let gaps: Vec<usize> = s.as_slice().windows(2).map(|w| w[1] - w[0]).collect();
                assert!(gaps.iter().all(|&g| g >= 1));
                let (lo, hi) = (gaps.iter().min().unwrap(), gaps.iter().max().unwrap());
                assert!(hi - lo <= 1, "D={depth} d={d} gaps {gaps:?}");
            }
        }
    }

    #[test]
    fn zone_rule() {
        let p = DepthPolicy::new(30, 16, 6, 10).unwrap();
        assert_eq!(active_layers(3, &p).unwrap(), LayerSet::full(30));
        assert_eq!(active_layers(7, &p).unwrap(), select_layers(30, 16).unwrap());
        assert!(active_layers(0, &p).is_err());
        assert!(active_layers(11, &p).is_err());

        let none = DepthPolicy::new(30, 16, 0, 10).unwrap();
        for k in 1..=10 {
            assert_eq!(active_layers(k, &none).unwrap(), none.selected);
        }
        assert!(DepthPolicy::new(30, 16, 11, 10).is_err());
    }

    #[test]
    fn enumeration_order_and_size() {
        let grid = enumerate_configs(30, 10, &[16, 2, 4, 8, 30], &[10, 6, 7, 8, 9]).unwrap();
        assert_eq!(grid.len(), 25);
        let keys: Vec<(usize, usize)> = grid.iter().map(|p| (p.d, p.bridge)).collect();
        let mut sorted = keys.clone();
        sorted.sort_unstable();
        assert_eq!(keys, sorted);
        for p in enumerate_configs(30, 10, &[30], &[0, 3, 10]).unwrap() {
            assert_eq!(p.selected, LayerSet::full(30));
        }
        assert!(enumerate_configs(30, 10, &[], &[6]).unwrap().is_empty());
    }

    #[test]
    fn nesting_audit_for_depth_30() {
        let report = nesting_report(30, &[2, 4, 8, 16]).unwrap();
        let get = |a, b| report.iter().find(|v| v.smaller == a && v.larger == b).unwrap();
        assert!(get(2, 4).nested && get(2, 8).nested && get(2, 16).nested);
        assert!(get(4, 16).nested);
        assert_eq!(get(4, 8).witness, Some(9));
        assert_eq!(get(8, 16).witness, Some(4));
        assert_eq!(report.iter().filter(|v| !v.nested).count(), 2);
    }

    proptest! {
        #[test]
        fn bridge_scales_are_depth_independent(depth in 2usize..40, d_frac in 0.0f64..1.0, n in 0usize..10) {
            let d = 1 + ((depth - 1) as f64 * d_frac) as usize;
            let p = DepthPolicy::new(depth, d, n, 10).unwrap();
            for k in 1..=n {
                prop_assert_eq!(active_layers(k, &p).unwrap(), LayerSet::full(depth));
            }
        }
    }
}
