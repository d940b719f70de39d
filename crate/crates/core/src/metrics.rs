//! Strength and extent of excitation maps, and per-unit peak scores.

use serde::{Deserialize, Serialize};

use crate::excitation::ExcitationMaps;
use crate::model::BrandId;

/// How the extent threshold is chosen; reported alongside results.
pub const EXTENT_THRESHOLD_RULE: &str = "mean over locations of the unit-summed map";

/// Unit-summed excitation at each location, row-major `height × width`.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl AggregateMap {
    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Strength: the largest aggregate value.
    pub fn strength(&self) -> f64 {
        self.max()
    }

    /// Extent and its threshold: the fraction of locations strictly above
    /// the mean aggregate value.
    pub fn extent(&self) -> (f64, f64) {
        let n = self.values.len() as f64;
        let mean = self.values.iter().sum::<f64>() / n;
        // summation rounding must not push the mean outside the value range
        let threshold = mean.clamp(self.min(), self.max());
        let above = self.values.iter().filter(|&&v| v > threshold).count();
        (above as f64 / n, threshold)
    }
}

pub fn aggregate_map(maps: &ExcitationMaps) -> AggregateMap {
    let mut values = vec![0.0f64; maps.locations()];
    for unit in maps.units() {
        for (acc, &v) in values.iter_mut().zip(unit) {
            *acc += v as f64;
        }
    }
    AggregateMap {
        height: maps.height,
        width: maps.width,
        values,
    }
}

pub fn strength(maps: &ExcitationMaps) -> f64 {
    aggregate_map(maps).strength()
}

/// Returns `(extent, threshold)`.
pub fn extent(maps: &ExcitationMaps) -> (f64, f64) {
    aggregate_map(maps).extent()
}

/// Peak value of each unit's map.
pub fn unit_max_scores(maps: &ExcitationMaps) -> Vec<f64> {
    maps.units()
        .map(|u| u.iter().copied().fold(0.0f32, f32::max) as f64)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapStatistics {
    pub image_id: String,
    pub brand_predicted: BrandId,
    pub strength: f64,
    pub extent: f64,
    pub threshold: f64,
    pub discarded_mass: f64,
}

pub fn map_statistics(maps: &ExcitationMaps, brand_predicted: BrandId) -> MapStatistics {
    let agg = aggregate_map(maps);
    let (extent, threshold) = agg.extent();
    MapStatistics {
        image_id: maps.image_id.clone(),
        brand_predicted,
        strength: agg.strength(),
        extent,
        threshold,
        discarded_mass: maps.discarded_mass,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn maps(k: usize, h: usize, w: usize, data: Vec<f32>) -> ExcitationMaps {
        ExcitationMaps {
            image_id: "x".into(),
            class_index: 0,
            target_layer: "t".into(),
            num_units: k,
            height: h,
            width: w,
            data,
            discarded_mass: 0.0,
        }
    }

    fn example() -> ExcitationMaps {
        maps(2, 2, 2, vec![0.1, 0.0, 0.0, 0.0, 0.2, 0.1, 0.0, 0.0])
    }

    #[test]
    fn aggregate_example() {
        let agg = aggregate_map(&example());
        let expect = [0.1f32 as f64 + 0.2f32 as f64, 0.1f32 as f64, 0.0, 0.0];
        assert_eq!(agg.values, expect);
        assert!((agg.values[0] - 0.3).abs() < 1e-7);
        let zero = aggregate_map(&maps(3, 2, 2, vec![0.0; 12]));
        assert!(zero.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn strength_examples() {
        assert!((strength(&example()) - 0.3).abs() < 1e-7);
        assert_eq!(strength(&maps(1, 3, 3, vec![0.25; 9])), 0.25);
        assert_eq!(strength(&maps(2, 2, 2, vec![0.0; 8])), 0.0);
    }

    #[test]
    fn extent_examples() {
        let (e, t) = extent(&example());
        assert_eq!(e, 0.25);
        assert!((t - 0.1).abs() < 1e-7);

        for c in [0.0f32, 0.1, 1.0 / 3.0, 7.0] {
            let (e, t) = extent(&maps(1, 8, 8, vec![c; 64]));
            assert_eq!(e, 0.0);
            assert_eq!(t, c as f64);
        }

        let mut one_hot = vec![0.0f32; 16];
        one_hot[5] = 1.0;
        let (e, _) = extent(&maps(1, 4, 4, one_hot));
        assert_eq!(e, 0.0625);
    }

    #[test]
    fn unit_max_examples() {
        let s = unit_max_scores(&example());
        assert_eq!(s, vec![0.1f32 as f64, 0.2f32 as f64]);
        assert_eq!(unit_max_scores(&maps(2, 1, 2, vec![0.0, 0.0, 0.5, 0.1])), vec![0.0, 0.5]);
    }

    fn arb_maps() -> impl Strategy<Value = ExcitationMaps> {
        (1usize..4, 1usize..5, 1usize..5).prop_flat_map(|(k, h, w)| {
            prop::collection::vec(0.0f32..1.0, k * h * w).prop_map(move |d| maps(k, h, w, d))
        })
    }

    proptest! {
        #[test]
        fn unit_max_matches_scan(m in arb_maps()) {
            let s = unit_max_scores(&m);
            for k in 0..m.num_units {
                let mut best = 0.0f32;
                for &v in m.unit(k) {
                    if v > best { best = v; }
                }
                prop_assert_eq!(s[k], best as f64);
            }
        }

        #[test]
        fn strength_is_max_of_aggregate(m in arb_maps()) {
            let agg = aggregate_map(&m);
            let (e, t) = agg.extent();
            prop_assert_eq!(strength(&m), agg.values.iter().copied().fold(f64::MIN, f64::max));
            prop_assert!(strength(&m) >= t);
            prop_assert!((0.0..=1.0).contains(&e));
            let constant = agg.values.iter().all(|&v| v == agg.values[0]);
            if constant {
                prop_assert_eq!(e, 0.0);
            } else {
                prop_assert!(e > 0.0 && e < 1.0);
            }
        }

        #[test]
        fn location_permutation_invariance(m in arb_maps(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let n = m.locations();
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let mut shuffled = m.clone();
            for k in 0..m.num_units {
                for (dst, &src) in perm.iter().enumerate() {
                    shuffled.data[k * n + dst] = m.data[k * n + src];
                }
            }
            prop_assert_eq!(strength(&m), strength(&shuffled));
            let (e1, t1) = extent(&m);
            let (e2, t2) = extent(&shuffled);
            prop_assert_eq!(e1, e2);
            prop_assert!((t1 - t2).abs() <= 1e-12);
        }

        #[test]
        fn positive_scaling(m in arb_maps(), p in -4i32..5) {
            let c = 2f32.powi(p);
            let mut scaled = m.clone();
            scaled.data.iter_mut().for_each(|v| *v *= c);
            let (e1, t1) = extent(&m);
            let (e2, t2) = extent(&scaled);
            prop_assert_eq!(e1, e2);
            prop_assert!((t2 - c as f64 * t1).abs() <= 1e-12 * (1.0 + t2.abs()));
            prop_assert_eq!(strength(&scaled), c as f64 * strength(&m));
        }
    }
}
