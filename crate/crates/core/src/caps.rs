//! Class-aware pyramid scaling: every class subset is voxelized on its own
//! at a size that grows with the subset's population, so large classes are
//! grouped on far fewer elements while small ones keep full resolution.
//!
//! Elements here are whatever the pipeline groups (points or input voxels)
//! and live in offset-shifted space. Per-element weights count the original
//! points behind each element and are summed when elements are pooled.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grouping::{class_subset, mean_score, InstanceProposal, ProposalSet};
use crate::voxel::{voxelize, VoxelGrid};

pub const DEFAULT_THRESHOLDS: [f64; 3] = [1e5, 1e6, f64::INFINITY];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapsConfig {
    /// Base voxel size `V`; level `l` uses `l * V`.
    pub base_voxel: f64,
    /// Strictly increasing population thresholds, the last one infinite.
    pub thresholds: Vec<f64>,
    pub tau: f64,
}

impl CapsConfig {
    pub fn new(base_voxel: f64) -> Self {
        CapsConfig {
            base_voxel,
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
            tau: crate::grouping::DEFAULT_TAU,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_voxel > 0.0 && self.base_voxel.is_finite()) {
            return Err(Error::invalid_arg(format!(
                "base voxel size must be positive, got {}",
                self.base_voxel
            )));
        }
        validate_thresholds(&self.thresholds)
    }
}

pub fn validate_thresholds(t: &[f64]) -> Result<()> {
    match t.last() {
        None => return Err(Error::invalid_arg("no pyramid thresholds")),
        Some(last) if *last != f64::INFINITY => {
            return Err(Error::invalid_arg("last pyramid threshold must be infinite"))
        }
        _ => {}
    }
    if t.iter().any(|x| x.is_nan() || *x < 0.0) {
        return Err(Error::invalid_arg("pyramid thresholds must be non-negative"));
    }
    if t.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid_arg("pyramid thresholds must be strictly increasing"));
    }
    Ok(())
}

/// 1-based index of the first threshold strictly above `count`.
pub fn pyramid_level(count: usize, thresholds: &[f64]) -> Result<u32> {
    validate_thresholds(thresholds)?;
    let level = thresholds
        .iter()
        .position(|&t| t > count as f64)
        .expect("last threshold is infinite");
    Ok(level as u32 + 1)
}

/// Elements pooled at one voxel size, with the map back to their sources.
#[derive(Debug, Clone, PartialEq)]
pub struct Pooled {
    pub grid: VoxelGrid,
    /// Input element index of every grid point; `grid` indexes into this.
    pub source: Vec<u32>,
    pub positions: Vec<[f64; 3]>,
    /// Row-major pooled scores, `num_classes` per element.
    pub scores: Vec<f64>,
    pub offsets: Vec<[f64; 3]>,
    /// Summed weights of the pooled elements.
    pub weights: Vec<u32>,
}

impl Pooled {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Input elements merged into pooled element `e`, ascending.
    pub fn sources(&self, e: usize) -> impl Iterator<Item = u32> + '_ {
        self.grid.members(e).iter().map(|&l| self.source[l as usize])
    }
}

/// Elements to be pooled: shifted positions, row-major scores, offsets and
/// point-count weights.
#[derive(Debug, Clone, Copy)]
pub struct Elements<'a> {
    pub positions: &'a [[f64; 3]],
    pub scores: &'a [f64],
    pub offsets: &'a [[f64; 3]],
    pub weights: &'a [u32],
    pub num_classes: usize,
}

impl Elements<'_> {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    fn check(&self) -> Result<()> {
        let n = self.len();
        if self.scores.len() != n * self.num_classes
            || self.offsets.len() != n
            || self.weights.len() != n
        {
            return Err(Error::invalid_arg("element arrays have mismatched lengths"));
        }
        Ok(())
    }
}

fn pool(elements: &Elements, subset: Vec<u32>, voxel_size: f64) -> Result<Pooled> {
    let c = elements.num_classes;
    let dim = c + 3;
    let mut features = Vec::with_capacity(subset.len() * dim);
    let mut positions = Vec::with_capacity(subset.len());
    for &e in &subset {
        let e = e as usize;
        positions.push(elements.positions[e]);
        features.extend_from_slice(&elements.scores[e * c..(e + 1) * c]);
        features.extend_from_slice(&elements.offsets[e]);
    }
    let (grid, pooled) = voxelize(&positions, &features, dim, voxel_size)?;
    let m = grid.num_voxels();
    let mut out = Pooled {
        positions: grid.voxel_centroids.clone(),
        scores: Vec::with_capacity(m * c),
        offsets: Vec::with_capacity(m),
        weights: Vec::with_capacity(m),
        source: subset,
        grid,
    };
    for (v, row) in pooled.chunks_exact(dim).enumerate() {
        out.scores.extend_from_slice(&row[..c]);
        out.offsets.push([row[c], row[c + 1], row[c + 2]]);
        let w = out
            .grid
            .members(v)
            .iter()
            .map(|&l| elements.weights[out.source[l as usize] as usize])
            .sum();
        out.weights.push(w);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CapsClass {
    pub class_id: u32,
    /// Number of input elements in the class subset.
    pub count: usize,
    pub level: u32,
    pub voxel_size: f64,
    pub pooled: Pooled,
}

impl CapsClass {
    /// Grouping radius used on this class: lattice-adjacent centroids must
    /// remain linkable once the voxel pitch exceeds `radius`.
    pub fn effective_radius(&self, radius: f64) -> f64 {
        radius.max(self.voxel_size)
    }
}

/// Per-class downscaled elements. Aggregated element ids number the
/// classes' pooled elements consecutively in class order.
#[derive(Debug, Clone, PartialEq)]
pub struct CapsOutput {
    pub num_classes: usize,
    pub classes: Vec<CapsClass>,
    /// First aggregated id of every class, plus the total at the end.
    pub class_start: Vec<u32>,
}

impl CapsOutput {
    pub fn len(&self) -> usize {
        *self.class_start.last().unwrap() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn class_range(&self, class: u32) -> std::ops::Range<u32> {
        self.class_start[class as usize]..self.class_start[class as usize + 1]
    }

    /// Aggregated positions across classes.
    pub fn positions(&self) -> Vec<[f64; 3]> {
        self.classes
            .iter()
            .flat_map(|c| c.pooled.positions.iter().copied())
            .collect()
    }

    /// Aggregated scores across classes, row-major.
    pub fn scores(&self) -> Vec<f64> {
        self.classes
            .iter()
            .flat_map(|c| c.pooled.scores.iter().copied())
            .collect()
    }

    /// Aggregated offsets across classes.
    pub fn offsets(&self) -> Vec<[f64; 3]> {
        self.classes
            .iter()
            .flat_map(|c| c.pooled.offsets.iter().copied())
            .collect()
    }

    pub fn weights(&self) -> Vec<u32> {
        self.classes
            .iter()
            .flat_map(|c| c.pooled.weights.iter().copied())
            .collect()
    }
}

/// Slices every class subset with the grouping threshold and voxelizes it
/// at `level * V`.
pub fn caps_downscale(elements: &Elements, config: &CapsConfig) -> Result<CapsOutput> {
    config.validate()?;
    elements.check()?;
    let c = elements.num_classes;
    let mut out = CapsOutput {
        num_classes: c,
        classes: Vec::with_capacity(c),
        class_start: vec![0],
    };
    for class in 0..c {
        let subset = class_subset(elements.scores, c, class, config.tau)?;
        let count = subset.len();
        let level = pyramid_level(count, &config.thresholds)?;
        let voxel_size = level as f64 * config.base_voxel;
        let pooled = pool(elements, subset, voxel_size)?;
        let next = out.class_start.last().unwrap() + pooled.len() as u32;
        out.class_start.push(next);
        out.classes.push(CapsClass {
            class_id: class as u32,
            count,
            level,
            voxel_size,
            pooled,
        });
    }
    Ok(out)
}

/// Replaces aggregated element ids by the input elements they pooled and
/// recomputes confidences as mean class scores over those elements.
pub fn inverse_caps(
    proposals: &ProposalSet,
    caps: &CapsOutput,
    input_scores: &[f64],
) -> Result<ProposalSet> {
    let mut out = Vec::with_capacity(proposals.len());
    for p in proposals {
        if p.class_id as usize >= caps.num_classes {
            return Err(Error::invalid_arg(format!("unknown class {}", p.class_id)));
        }
        let range = caps.class_range(p.class_id);
        let class = &caps.classes[p.class_id as usize];
        let mut members = Vec::new();
        for &e in &p.members {
            if !range.contains(&e) {
                return Err(Error::invalid_arg(format!(
                    "element {e} does not belong to class {}",
                    p.class_id
                )));
            }
            members.extend(class.pooled.sources((e - range.start) as usize));
        }
        members.sort_unstable();
        out.push(InstanceProposal {
            confidence: mean_score(input_scores, caps.num_classes, p.class_id, &members),
            class_id: p.class_id,
            members,
        });
    }
    Ok(ProposalSet::new(out))
}

/// Baseline: the whole element set voxelized at one size, pooling full
/// score rows so neighboring classes blend.
pub fn naive_downscale(elements: &Elements, voxel_size: f64) -> Result<Pooled> {
    elements.check()?;
    pool(elements, (0..elements.len() as u32).collect(), voxel_size)
}

/// Maps proposals over pooled elements back to the input elements.
pub fn inverse_naive(
    proposals: &ProposalSet,
    pooled: &Pooled,
    input_scores: &[f64],
    num_classes: usize,
) -> Result<ProposalSet> {
    let mut out = Vec::with_capacity(proposals.len());
    for p in proposals {
        let mut members = Vec::new();
        for &e in &p.members {
            if e as usize >= pooled.len() {
                return Err(Error::invalid_arg(format!("element {e} out of range")));
            }
            members.extend(pooled.sources(e as usize));
        }
        members.sort_unstable();
        out.push(InstanceProposal {
            confidence: mean_score(input_scores, num_classes, p.class_id, &members),
            class_id: p.class_id,
            members,
        });
    }
    Ok(ProposalSet::new(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[derive(Debug)]
    struct Owned {
        positions: Vec<[f64; 3]>,
        scores: Vec<f64>,
        offsets: Vec<[f64; 3]>,
        weights: Vec<u32>,
        num_classes: usize,
    }

    impl Owned {
        fn new(positions: Vec<[f64; 3]>, scores: Vec<f64>, num_classes: usize) -> Self {
            let n = positions.len();
            Owned {
                offsets: (0..n).map(|i| [i as f64 * 0.5, 0.0, -1.0]).collect(),
                weights: vec![1; n],
                positions,
                scores,
                num_classes,
            }
        }

        fn view(&self) -> Elements<'_> {
            Elements {
                positions: &self.positions,
                scores: &self.scores,
                offsets: &self.offsets,
                weights: &self.weights,
                num_classes: self.num_classes,
            }
        }
    }

    #[test]
    fn pyramid_level_examples() {
        let t = DEFAULT_THRESHOLDS;
        assert_eq!(pyramid_level(50_000, &t).unwrap(), 1);
        assert_eq!(pyramid_level(500_000, &t).unwrap(), 2);
        assert_eq!(pyramid_level(2_000_000, &t).unwrap(), 3);
        assert_eq!(pyramid_level(0, &t).unwrap(), 1);
        assert_eq!(pyramid_level(100_000, &t).unwrap(), 2);
        assert_eq!(pyramid_level(99_999, &t).unwrap(), 1);
    }

    #[test]
    fn malformed_thresholds_rejected() {
        for t in [
            vec![],
            vec![1e5, 1e6],
            vec![1e6, 1e5, f64::INFINITY],
            vec![1e5, 1e5, f64::INFINITY],
            vec![f64::NAN, f64::INFINITY],
        ] {
            assert!(matches!(pyramid_level(3, &t), Err(Error::InvalidArgument(_))), "{t:?}");
        }
        assert_eq!(pyramid_level(3, &[f64::INFINITY]).unwrap(), 1);
    }

    #[test]
    fn ten_points_in_one_cell_pool_to_their_mean() {
        let positions: Vec<[f64; 3]> = (0..10).map(|i| [0.001 * i as f64, 0.002, 0.003]).collect();
        let scores: Vec<f64> = (0..10).flat_map(|i| [0.5 + 0.01 * i as f64, 0.0]).collect();
        let el = Owned::new(positions, scores, 2);
        let out = caps_downscale(&el.view(), &CapsConfig::new(0.02)).unwrap();
        let a = &out.classes[0];
        assert_eq!((a.level, a.count, a.pooled.len()), (1, 10, 1));
        assert!((a.pooled.scores[0] - 0.545).abs() < 1e-12);
        assert!((a.pooled.offsets[0][0] - 2.25).abs() < 1e-12);
        assert!((a.pooled.positions[0][0] - 0.0045).abs() < 1e-12);
        assert_eq!(a.pooled.weights, vec![10]);
        assert!(out.classes[1].pooled.is_empty());
        assert_eq!(out.class_start, vec![0, 1, 1]);

        let single = ProposalSet::new(vec![InstanceProposal {
            class_id: 0,
            members: vec![0],
            confidence: 0.0,
        }]);
        let back = inverse_caps(&single, &out, &el.scores).unwrap();
        assert_eq!(back.proposals[0].members, (0..10).collect::<Vec<u32>>());
        assert!((back.proposals[0].confidence - 0.545).abs() < 1e-12);
    }

    #[test]
    fn sparse_small_class_is_identity() {
        let positions: Vec<[f64; 3]> = (0..6).map(|i| [0.1 * i as f64 + 0.05, 0.05, 0.05]).collect();
        let el = Owned::new(positions.clone(), vec![0.7; 6], 1);
        let out = caps_downscale(&el.view(), &CapsConfig::new(0.02)).unwrap();
        let pooled = &out.classes[0].pooled;
        assert_eq!(pooled.positions, positions);
        assert_eq!(pooled.scores, el.scores);
        assert_eq!(pooled.offsets, el.offsets);

        let props = ProposalSet::new(vec![
            InstanceProposal { class_id: 0, members: vec![0, 1, 2], confidence: 0.7 },
            InstanceProposal { class_id: 0, members: vec![4], confidence: 0.7 },
        ]);
        assert_eq!(inverse_caps(&props, &out, &el.scores).unwrap(), props);
    }

    /// Two points of each class share one voxel.
    fn boundary_fixture() -> Owned {
        let positions = vec![
            [0.001, 0.001, 0.001],
            [0.003, 0.001, 0.001],
            [0.011, 0.001, 0.001],
            [0.013, 0.001, 0.001],
        ];
        let scores = vec![1.0, 0.0, 0.9, 0.1, 0.1, 0.9, 0.0, 1.0];
        Owned::new(positions, scores, 2)
    }

    #[test]
    fn naive_pooling_mixes_classes_and_caps_does_not() {
        let el = boundary_fixture();
        let naive = naive_downscale(&el.view(), 0.02).unwrap();
        assert_eq!(naive.len(), 1);
        assert_eq!(naive.scores, vec![0.5, 0.5]);

        let caps = caps_downscale(&el.view(), &CapsConfig::new(0.02)).unwrap();
        let (a, b) = (&caps.classes[0].pooled, &caps.classes[1].pooled);
        assert_eq!(a.source, vec![0, 1]);
        assert_eq!(b.source, vec![2, 3]);
        assert_eq!(a.scores, vec![0.95, 0.05]);
        assert_eq!(b.scores, vec![0.05, 0.95]);
    }

    #[test]
    fn single_class_matches_naive_at_same_size() {
        let positions: Vec<[f64; 3]> = (0..40).map(|i| [0.013 * i as f64, 0.0, 0.0]).collect();
        let el = Owned::new(positions, vec![0.8; 40], 1);
        let caps = caps_downscale(&el.view(), &CapsConfig::new(0.04)).unwrap();
        let naive = naive_downscale(&el.view(), 0.04).unwrap();
        assert_eq!(caps.classes[0].pooled, naive);
    }

    #[test]
    fn cross_class_reference_is_rejected() {
        let el = boundary_fixture();
        let caps = caps_downscale(&el.view(), &CapsConfig::new(0.02)).unwrap();
        let bad = ProposalSet::new(vec![InstanceProposal {
            class_id: 0,
            members: vec![1],
            confidence: 0.5,
        }]);
        assert!(matches!(
            inverse_caps(&bad, &caps, &el.scores),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn effective_radius_covers_voxel_pitch() {
        let el = Owned::new(vec![[0.0; 3]], vec![0.9], 1);
        let mut config = CapsConfig::new(0.02);
        config.thresholds = vec![0.5, 2.0, f64::INFINITY];
        let caps = caps_downscale(&el.view(), &config).unwrap();
        let class = &caps.classes[0];
        assert_eq!(class.level, 2);
        assert_eq!(class.voxel_size, 0.04);
        assert_eq!(class.effective_radius(0.03), 0.04);
        assert_eq!(class.effective_radius(0.05), 0.05);
    }

    #[test]
    fn weights_accumulate() {
        let mut el = boundary_fixture();
        el.weights = vec![3, 4, 5, 6];
        let naive = naive_downscale(&el.view(), 0.02).unwrap();
        assert_eq!(naive.weights, vec![18]);
    }

    fn elements() -> impl Strategy<Value = Owned> {
        (1usize..80).prop_flat_map(|n| {
            (
                prop::collection::vec(prop::array::uniform3(-0.2f64..0.2), n),
                prop::collection::vec(prop::sample::select(vec![0.0, 0.1, 0.2, 0.3, 0.6, 0.9]), n * 3),
            )
                .prop_map(|(p, s)| Owned::new(p, s, 3))
        })
    }

    proptest! {
        #[test]
        fn level_is_monotone(a in 0usize..3_000_000, b in 0usize..3_000_000) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(pyramid_level(lo, &DEFAULT_THRESHOLDS).unwrap() <= pyramid_level(hi, &DEFAULT_THRESHOLDS).unwrap());
        }

        #[test]
        fn classes_are_isolated(el in elements(), class in 0usize..3) {
            let config = CapsConfig::new(0.05);
            let full = caps_downscale(&el.view(), &config).unwrap();
            // drop every element outside the class subset and pool again
            let keep = class_subset(&el.scores, 3, class, config.tau).unwrap();
            let sub = Owned {
                positions: keep.iter().map(|&i| el.positions[i as usize]).collect(),
                scores: keep.iter().flat_map(|&i| el.scores[i as usize * 3..i as usize * 3 + 3].to_vec()).collect(),
                offsets: keep.iter().map(|&i| el.offsets[i as usize]).collect(),
                weights: keep.iter().map(|&i| el.weights[i as usize]).collect(),
                num_classes: 3,
            };
            let alone = caps_downscale(&sub.view(), &config).unwrap();
            let (f, a) = (&full.classes[class].pooled, &alone.classes[class].pooled);
            prop_assert_eq!(&f.positions, &a.positions);
            prop_assert_eq!(&f.scores, &a.scores);
            prop_assert_eq!(&f.offsets, &a.offsets);
        }

        #[test]
        fn inverse_covers_each_subset_index_once(el in elements()) {
            let config = CapsConfig::new(0.08);
            let caps = caps_downscale(&el.view(), &config).unwrap();
            let mut props = Vec::new();
            for class in 0..3u32 {
                // split each class block into two proposals
                let range = caps.class_range(class);
                let ids: Vec<u32> = range.collect();
                let (x, y) = ids.split_at(ids.len() / 2);
                for part in [x, y] {
                    props.push(InstanceProposal { class_id: class, members: part.to_vec(), confidence: 0.5 });
                }
            }
            let back = inverse_caps(&ProposalSet::new(props), &caps, &el.scores).unwrap();
            for class in 0..3u32 {
                let mut all: Vec<u32> = back.iter().filter(|p| p.class_id == class).flat_map(|p| p.members.clone()).collect();
                all.sort_unstable();
                let subset = class_subset(&el.scores, 3, class as usize, config.tau).unwrap();
                prop_assert_eq!(all, subset);
            }
        }
    }
}
