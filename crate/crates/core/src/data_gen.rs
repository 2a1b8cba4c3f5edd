//! Synthetic excitability fields: random region growing for training data and
//! angular-sector lesions for test cases.

use std::f64::consts::PI;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward_model::{ExcitabilityField, GridGeometry};
use crate::rng::Rng;

pub const HEALTHY_THETA: f64 = 0.15;
pub const TRAINING_LESION_THETA: f64 = 0.5;
pub const NOISE_BAND: f64 = 0.001;
pub const N_SECTORS: usize = 8;
pub const TEST_SEVERITIES: [f64; 3] = [0.40, 0.45, 0.50];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionMask {
    pub mask: Vec<bool>,
}

impl RegionMask {
    pub fn size(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Flood-fill check that the masked nodes form one 4-connected component.
    pub fn is_connected(&self, geom: &GridGeometry) -> bool {
        let Some(start) = self.mask.iter().position(|&m| m) else {
            return true;
        };
        let mut seen = vec![false; self.mask.len()];
        let mut stack = vec![start];
        seen[start] = true;
        let mut count = 0;
        while let Some(n) = stack.pop() {
            count += 1;
            for m in geom.neighbors(n) {
                if self.mask[m] && !seen[m] {
                    seen[m] = true;
                    stack.push(m);
                }
            }
        }
        count == self.size()
    }
}

/// Grows a connected region from `seed_node`, each step adding one node drawn
/// uniformly from the unmasked lattice neighbours of the current region.
pub fn grow_region(geom: &GridGeometry, seed_node: usize, target_size: usize, rng: &mut Rng) -> Result<RegionMask> {
    let n = geom.n_nodes();
    if target_size == 0 || target_size > n {
        return Err(Error::invalid(format!("target_size {target_size} outside [1, {n}]")));
    }
    if seed_node >= n {
        return Err(Error::invalid(format!("seed node {seed_node} out of range")));
    }
    let mut mask = vec![false; n];
    let mut frontier: Vec<usize> = Vec::new();
    let mut slot: Vec<Option<usize>> = vec![None; n];
    let mut size = 0;

    let add = |node: usize, mask: &mut Vec<bool>, frontier: &mut Vec<usize>, slot: &mut Vec<Option<usize>>| {
        mask[node] = true;
        if let Some(pos) = slot[node].take() {
            frontier.swap_remove(pos);
            if pos < frontier.len() {
                slot[frontier[pos]] = Some(pos);
            }
        }
        for m in geom.neighbors(node) {
            if !mask[m] && slot[m].is_none() {
                slot[m] = Some(frontier.len());
                frontier.push(m);
            }
        }
    };

    add(seed_node, &mut mask, &mut frontier, &mut slot);
    size += 1;
    while size < target_size {
        if frontier.is_empty() {
            return Err(Error::RegionTrapped { reached: size, target: target_size });
        }
        let pick = frontier[rng.random_range(0..frontier.len())];
        add(pick, &mut mask, &mut frontier, &mut slot);
        size += 1;
    }
    Ok(RegionMask { mask })
}

fn noisy(base: f64, rng: &mut Rng) -> f64 {
    base + rng.random::<f64>() * NOISE_BAND
}

/// Binary lesion field: 0.5 inside the mask, 0.15 outside, plus U[0, 0.001] noise.
pub fn make_training_field(mask: &RegionMask, rng: &mut Rng) -> ExcitabilityField {
    let theta = mask.mask.iter().map(|&m| noisy(if m { TRAINING_LESION_THETA } else { HEALTHY_THETA }, rng)).collect();
    ExcitabilityField { theta }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectorSpec {
    pub sector_ids: Vec<usize>,
    pub severity: f64,
}

impl SectorSpec {
    pub fn new(mut sector_ids: Vec<usize>, severity: f64) -> Result<Self> {
        sector_ids.sort_unstable();
        sector_ids.dedup();
        if sector_ids.is_empty() || sector_ids.iter().any(|&s| s >= N_SECTORS) {
            return Err(Error::invalid(format!("sector ids must be a non-empty subset of 0..{N_SECTORS}")));
        }
        if !TEST_SEVERITIES.iter().any(|&s| (s - severity).abs() < 1e-12) {
            return Err(Error::invalid(format!("severity {severity} not one of {TEST_SEVERITIES:?}")));
        }
        Ok(SectorSpec { sector_ids, severity })
    }
}

/// Angular sector (0..8) of every node about the lattice centre.
pub fn sector_of_nodes(geom: &GridGeometry) -> Vec<usize> {
    let (cx, cy) = geom.center();
    (0..geom.n_nodes())
        .map(|i| {
            let (ix, iy) = geom.coords(i);
            let angle = (iy as f64 * geom.h - cy).atan2(ix as f64 * geom.h - cx);
            let s = ((angle + PI) / (2.0 * PI / N_SECTORS as f64)).floor() as usize;
            s % N_SECTORS
        })
        .collect()
}

/// Sector lesion field: `severity` on the selected sectors, 0.15 elsewhere, plus noise.
pub fn make_test_field(geom: &GridGeometry, spec: &SectorSpec, rng: &mut Rng) -> ExcitabilityField {
    let theta = sector_of_nodes(geom)
        .into_iter()
        .map(|s| noisy(if spec.sector_ids.contains(&s) { spec.severity } else { HEALTHY_THETA }, rng))
        .collect();
    ExcitabilityField { theta }
}

/// One generated training field with the region that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub field: ExcitabilityField,
    pub seed_node: usize,
    pub lesion_size: usize,
}

/// `count` region-growing fields; seed node and size drawn uniformly, sizes
/// inclusive of both ends of `size_range`.
pub fn generate_training_set(geom: &GridGeometry, count: usize, size_range: (usize, usize), rng: &mut Rng) -> Result<Vec<TrainingExample>> {
    if count == 0 {
        return Err(Error::invalid("count must be >= 1"));
    }
    let (lo, hi) = size_range;
    if lo == 0 || lo > hi || hi > geom.n_nodes() {
        return Err(Error::invalid(format!("bad size range {size_range:?}")));
    }
    (0..count)
        .map(|_| {
            let seed_node = rng.random_range(0..geom.n_nodes());
            let size = rng.random_range(lo..=hi);
            let mask = grow_region(geom, seed_node, size, rng)?;
            Ok(TrainingExample { field: make_training_field(&mask, rng), seed_node, lesion_size: size })
        })
        .collect()
}

/// Default lesion-size range: 5% to 40% of the nodes.
pub fn default_size_range(geom: &GridGeometry) -> (usize, usize) {
    let n = geom.n_nodes() as f64;
    (((0.05 * n).round() as usize).max(1), ((0.40 * n).round() as usize).max(1))
}

/// Number of nodes above `threshold`, a proxy for lesion size.
pub fn abnormal_count(field: &ExcitabilityField, threshold: f64) -> usize {
    field.theta.iter().filter(|&&t| t > threshold).count()
}

/// One field per line, comma separated.
pub fn fields_to_csv(fields: &[ExcitabilityField]) -> String {
    let mut out = String::new();
    for f in fields {
        let row: Vec<String> = f.theta.iter().map(|t| t.to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn fields_from_csv(text: &str) -> Result<Vec<ExcitabilityField>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let theta = l.split(',').map(|t| t.parse::<f64>().map_err(|e| Error::Parse(e.to_string()))).collect::<Result<Vec<_>>>()?;
            Ok(ExcitabilityField { theta })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;

    fn geom() -> GridGeometry {
        GridGeometry::new(10, 9, 1.0).unwrap()
    }

    #[test]
    fn region_extremes() {
        let g = geom();
        let mut r = seeded(1);
        let one = grow_region(&g, 17, 1, &mut r).unwrap();
        assert_eq!(one.size(), 1);
        assert!(one.mask[17]);
        let all = grow_region(&g, 3, g.n_nodes(), &mut r).unwrap();
        assert!(all.mask.iter().all(|&m| m));
        assert!(grow_region(&g, 3, 0, &mut r).is_err());
        assert!(grow_region(&g, 3, g.n_nodes() + 1, &mut r).is_err());
    }

    proptest! {
        #[test]
        fn grown_regions_are_connected(seed in 0u64..500, node in 0usize..90, size in 1usize..=90) {
            let g = geom();
            let mut r = seeded(seed);
            let m = grow_region(&g, node, size, &mut r).unwrap();
            prop_assert_eq!(m.size(), size);
            prop_assert!(m.mask[node]);
            prop_assert!(m.is_connected(&g));
        }
    }

    #[test]
    fn flood_fill_detects_disconnection() {
        let g = geom();
        let mut mask = vec![false; g.n_nodes()];
        mask[0] = true;
        mask[55] = true;
        assert!(!RegionMask { mask }.is_connected(&g));
    }

    #[test]
    fn training_field_values() {
        let g = geom();
        let mut r = seeded(2);
        let full = grow_region(&g, 0, g.n_nodes(), &mut r).unwrap();
        let f = make_training_field(&full, &mut r);
        assert!(f.theta.iter().all(|t| (0.5..=0.501).contains(t)));
        let m = grow_region(&g, 40, 10, &mut r).unwrap();
        let a = make_training_field(&m, &mut r);
        let b = make_training_field(&m, &mut r);
        assert_ne!(a, b);
        for i in 0..g.n_nodes() {
            let base = if m.mask[i] { 0.5 } else { 0.15 };
            assert!((base..=base + 0.001).contains(&a.theta[i]));
            assert!((a.theta[i] - b.theta[i]).abs() <= 0.001);
        }
    }

    #[test]
    fn sectors_partition_lattice() {
        let g = GridGeometry::new(24, 24, 1.0).unwrap();
        let sectors = sector_of_nodes(&g);
        let mut counts = [0usize; N_SECTORS];
        for s in sectors {
            counts[s] += 1;
        }
        assert_eq!(counts.iter().sum::<usize>(), g.n_nodes());
        assert!(counts.iter().all(|&c| c > 0));
    }

    #[test]
    fn test_field_values() {
        let g = GridGeometry::new(24, 24, 1.0).unwrap();
        let mut r = seeded(3);
        let spec = SectorSpec::new(vec![2], 0.45).unwrap();
        let f = make_test_field(&g, &spec, &mut r);
        let sectors = sector_of_nodes(&g);
        for (t, s) in f.theta.iter().zip(&sectors) {
            if *s == 2 {
                assert!((0.45..=0.451).contains(t));
            } else {
                assert!((0.15..=0.151).contains(t));
            }
        }
        let all = SectorSpec::new((0..8).collect(), 0.4).unwrap();
        let f = make_test_field(&g, &all, &mut r);
        assert!(f.theta.iter().all(|t| (0.4..=0.401).contains(t)));
    }

    #[test]
    fn sector_spec_validation() {
        assert!(SectorSpec::new(vec![], 0.4).is_err());
        assert!(SectorSpec::new(vec![8], 0.4).is_err());
        assert!(SectorSpec::new(vec![1], 0.3).is_err());
    }

    #[test]
    fn training_set_contract() {
        let g = geom();
        let a = generate_training_set(&g, 3, (5, 5), &mut seeded(9)).unwrap();
        let b = generate_training_set(&g, 3, (5, 5), &mut seeded(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        assert_ne!(a[0].field, a[1].field);
        assert_ne!(a[1].field, a[2].field);
        for ex in &a {
            assert_eq!(abnormal_count(&ex.field, 0.275), 5);
            assert!(ex.field.theta.iter().all(|t| (0.0..=0.501).contains(t)));
        }
        assert!(generate_training_set(&g, 0, (5, 5), &mut seeded(9)).is_err());
    }

    #[test]
    fn test_severities_absent_from_training() {
        let g = geom();
        let set = generate_training_set(&g, 20, default_size_range(&g), &mut seeded(4)).unwrap();
        for ex in set {
            assert!(ex.field.theta.iter().all(|t| !(0.39..0.46).contains(t)));
        }
    }

    #[test]
    fn csv_round_trip() {
        let g = geom();
        let set: Vec<_> = generate_training_set(&g, 4, (3, 9), &mut seeded(5)).unwrap().into_iter().map(|e| e.field).collect();
        assert_eq!(fields_from_csv(&fields_to_csv(&set)).unwrap(), set);
    }
}
