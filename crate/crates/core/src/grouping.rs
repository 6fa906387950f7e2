//! Soft grouping: shift points by their offsets, slice one subset per class
//! by score threshold, link points closer than the grouping radius and keep
//! the connected components as instance proposals.
//!
//! A point may belong to several class subsets, so proposals of different
//! classes can overlap. The hard baseline instead partitions points by
//! their argmax class.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knn::{build_adjacency, Adjacency, Backend, DEFAULT_K};
use crate::scene::{Point3, Scene};

pub const DEFAULT_TAU: f64 = 0.2;
pub const DEFAULT_MIN_POINTS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupingConfig {
    pub tau: f64,
    pub radius: f64,
    pub k: usize,
    pub min_points: usize,
}

impl Default for GroupingConfig {
    fn default() -> Self {
        GroupingConfig {
            tau: DEFAULT_TAU,
            radius: 0.04,
            k: DEFAULT_K,
            min_points: DEFAULT_MIN_POINTS,
        }
    }
}

impl GroupingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::invalid_arg(format!("tau {} outside (0, 1)", self.tau)));
        }
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::invalid_arg(format!(
                "grouping radius {} must be positive",
                self.radius
            )));
        }
        if self.k == 0 {
            return Err(Error::invalid_arg("k must be at least 1"));
        }
        if self.min_points == 0 {
            return Err(Error::invalid_arg("min_points must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceProposal {
    pub class_id: u32,
    /// Strictly increasing point indices.
    pub members: Vec<u32>,
    pub confidence: f64,
}

/// Proposals in canonical order: by class, then by smallest member.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ProposalSet {
    pub proposals: Vec<InstanceProposal>,
}

impl ProposalSet {
    pub fn new(mut proposals: Vec<InstanceProposal>) -> Self {
        for p in &mut proposals {
            p.members.sort_unstable();
            p.members.dedup();
        }
        proposals.retain(|p| !p.members.is_empty());
        proposals.sort_by(|a, b| {
            (a.class_id, a.members[0], a.members.len())
                .cmp(&(b.class_id, b.members[0], b.members.len()))
        });
        ProposalSet { proposals }
    }

    pub fn len(&self) -> usize {
        self.proposals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proposals.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, InstanceProposal> {
        self.proposals.iter()
    }

    /// Member sets as (class, members) pairs, dropping confidences.
    pub fn partition(&self) -> Vec<(u32, Vec<u32>)> {
        self.proposals
            .iter()
            .map(|p| (p.class_id, p.members.clone()))
            .collect()
    }

    /// Checks canonical order, strictly increasing members and index bounds.
    pub fn validate(&self, num_points: usize, num_classes: usize) -> Result<()> {
        for (n, p) in self.proposals.iter().enumerate() {
            if p.members.is_empty() {
                return Err(Error::invalid_data(format!("proposal {n} is empty")));
            }
            if p.class_id as usize >= num_classes {
                return Err(Error::invalid_data(format!(
                    "proposal {n} has class {} but the scene has {num_classes}",
                    p.class_id
                )));
            }
            if p.members.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::invalid_data(format!(
                    "proposal {n} members are not strictly increasing"
                )));
            }
            if *p.members.last().unwrap() as usize >= num_points {
                return Err(Error::invalid_data(format!(
                    "proposal {n} references a point beyond {num_points}"
                )));
            }
            if !(0.0..=1.0).contains(&p.confidence) {
                return Err(Error::invalid_data(format!(
                    "proposal {n} confidence {} outside [0, 1]",
                    p.confidence
                )));
            }
        }
        Ok(())
    }
}

impl<'a> IntoIterator for &'a ProposalSet {
    type Item = &'a InstanceProposal;
    type IntoIter = std::slice::Iter<'a, InstanceProposal>;

    fn into_iter(self) -> Self::IntoIter {
        self.proposals.iter()
    }
}

/// Disjoint sets with path halving. Roots are always the smallest member,
/// which makes component order fall out of a single scan.
#[derive(Debug, Clone)]
pub struct UnionFind {
    parent: Vec<u32>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n as u32).collect(),
        }
    }

    pub fn find(&mut self, mut i: u32) -> u32 {
        while self.parent[i as usize] != i {
            let grand = self.parent[self.parent[i as usize] as usize];
            self.parent[i as usize] = grand;
            i = grand;
        }
        i
    }

    pub fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra < rb {
            self.parent[rb as usize] = ra;
        } else if rb < ra {
            self.parent[ra as usize] = rb;
        }
    }

    /// Components with sorted members, ordered by smallest member.
    pub fn components(&mut self) -> Vec<Vec<u32>> {
        let n = self.parent.len();
        let mut slot = vec![u32::MAX; n];
        let mut out: Vec<Vec<u32>> = Vec::new();
        for i in 0..n as u32 {
            let root = self.find(i) as usize;
            if slot[root] == u32::MAX {
                slot[root] = out.len() as u32;
                out.push(Vec::new());
            }
            out[slot[root] as usize].push(i);
        }
        out
    }
}

/// Elementwise `positions + offsets`.
pub fn shift_points(positions: &[Point3], offsets: &[Point3]) -> Result<Vec<[f64; 3]>> {
    if positions.len() != offsets.len() {
        return Err(Error::invalid_arg(format!(
            "{} positions but {} offsets",
            positions.len(),
            offsets.len()
        )));
    }
    Ok(positions
        .iter()
        .zip(offsets)
        .map(|(p, o)| std::array::from_fn(|a| p[a] as f64 + o[a] as f64))
        .collect())
}

/// The threshold actually compared against. Scores are stored as `f32`, so
/// `tau` is rounded to that precision first; a stored score equal to `tau`
/// is then never above it.
pub fn score_threshold(tau: f64) -> f64 {
    tau as f32 as f64
}

/// Sorted indices of rows whose score for `class` is strictly above `tau`.
/// `scores` is row-major with `num_classes` columns.
pub fn class_subset<T: Copy + Into<f64>>(
    scores: &[T],
    num_classes: usize,
    class: usize,
    tau: f64,
) -> Result<Vec<u32>> {
    if class >= num_classes {
        return Err(Error::invalid_arg(format!(
            "class {class} outside 0..{num_classes}"
        )));
    }
    let t = score_threshold(tau);
    Ok(scores
        .chunks_exact(num_classes)
        .enumerate()
        .filter(|(_, row)| row[class].into() > t)
        .map(|(i, _)| i as u32)
        .collect())
}

/// Argmax partition of the rows, ties to the lowest class.
pub fn argmax_partition<T: Copy + Into<f64>>(scores: &[T], num_classes: usize) -> Vec<Vec<u32>> {
    let mut parts = vec![Vec::new(); num_classes];
    if num_classes == 0 {
        return parts;
    }
    for (i, row) in scores.chunks_exact(num_classes).enumerate() {
        let mut best = 0;
        for c in 1..num_classes {
            if row[c].into() > row[best].into() {
                best = c;
            }
        }
        parts[best].push(i as u32);
    }
    parts
}

/// Connected components of the graph linking pairs closer than `radius`,
/// restricted to the `k` nearest neighbors of each point.
pub fn radius_components(
    positions: &[[f64; 3]],
    radius: f64,
    k: usize,
    backend: Backend,
) -> Result<Vec<Vec<u32>>> {
    let adj = build_adjacency(positions, k, radius, backend)?;
    Ok(adjacency_components(&adj))
}

/// Connected components of an adjacency, canonical order.
pub fn adjacency_components(adj: &Adjacency) -> Vec<Vec<u32>> {
    let mut uf = UnionFind::new(adj.num_queries());
    for q in 0..adj.num_queries() {
        for &j in adj.indices(q) {
            uf.union(q as u32, j);
        }
    }
    uf.components()
}

/// One class's elements to be clustered at a given radius.
#[derive(Debug, Clone)]
pub(crate) struct ClassSubset {
    pub class_id: u32,
    pub elements: Vec<u32>,
    pub radius: f64,
}

/// Wall time split between neighbor search and everything else.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct GroupTimes {
    pub knn: Duration,
    pub grouping: Duration,
}

/// Clusters every subset and keeps components whose total weight reaches
/// `min_points`. Weights default to one per element. Returned member lists
/// are sorted global element indices.
pub(crate) fn cluster_subsets(
    positions: &[[f64; 3]],
    subsets: &[ClassSubset],
    k: usize,
    backend: Backend,
    weights: Option<&[u32]>,
    min_points: usize,
    times: &mut GroupTimes,
) -> Result<Vec<(u32, Vec<u32>)>> {
    let mut out = Vec::new();
    for subset in subsets {
        if subset.elements.is_empty() {
            continue;
        }
        let start = Instant::now();
        let (unique, groups) = coincident_groups(positions, &subset.elements);
        times.grouping += start.elapsed();

        let start = Instant::now();
        let adj = build_adjacency(&unique, k, subset.radius, backend)?;
        times.knn += start.elapsed();

        let start = Instant::now();
        for comp in adjacency_components(&adj) {
            let mut members: Vec<u32> = comp
                .iter()
                .flat_map(|&u| groups[u as usize].iter().copied())
                .collect();
            members.sort_unstable();
            let weight: usize = match weights {
                Some(w) => members.iter().map(|&e| w[e as usize] as usize).sum(),
                None => members.len(),
            };
            if weight >= min_points {
                out.push((subset.class_id, members));
            }
        }
        times.grouping += start.elapsed();
    }
    Ok(out)
}

/// Collapses elements with bit-identical positions into one representative.
/// They are at distance 0 from each other, so they always share a component,
/// but with k-truncation a large pile of duplicates would otherwise only link
/// to its own lowest indices and split off from nearby points.
fn coincident_groups(positions: &[[f64; 3]], elements: &[u32]) -> (Vec<[f64; 3]>, Vec<Vec<u32>>) {
    let key = |e: u32| positions[e as usize].map(f64::to_bits);
    let mut order = elements.to_vec();
    order.sort_by_key(|&e| (key(e), e));
    let mut groups: Vec<Vec<u32>> = Vec::new();
    for (i, &e) in order.iter().enumerate() {
        if i > 0 && key(order[i - 1]) == key(e) {
            groups.last_mut().unwrap().push(e);
        } else {
            groups.push(vec![e]);
        }
    }
    // representatives in ascending element order keeps tie-breaking canonical
    groups.sort_unstable_by_key(|g| g[0]);
    let unique = groups.iter().map(|g| positions[g[0] as usize]).collect();
    (unique, groups)
}

/// Mean score of `class` over `members`, accumulated as deviations from
/// the first member so equal scores average to exactly that score.
pub(crate) fn mean_score<T: Copy + Into<f64>>(
    scores: &[T],
    num_classes: usize,
    class: u32,
    members: &[u32],
) -> f64 {
    let value = |i: u32| scores[i as usize * num_classes + class as usize].into();
    let Some(&first) = members.first() else {
        return 0.0;
    };
    let base = value(first);
    let dev: f64 = members.iter().map(|&i| value(i) - base).sum();
    (base + dev / members.len() as f64).clamp(0.0, 1.0)
}

pub(crate) fn scene_scores(scene: &Scene) -> Result<&[f32]> {
    scene
        .scores
        .as_deref()
        .ok_or_else(|| Error::invalid_data("scene has no semantic scores"))
}

fn group_with(
    scene: &Scene,
    shifted: &[[f64; 3]],
    config: &GroupingConfig,
    backend: Backend,
    parts: Vec<Vec<u32>>,
) -> Result<ProposalSet> {
    let scores = scene_scores(scene)?;
    let subsets: Vec<ClassSubset> = parts
        .into_iter()
        .enumerate()
        .map(|(c, elements)| ClassSubset {
            class_id: c as u32,
            elements,
            radius: config.radius,
        })
        .collect();
    let clusters = cluster_subsets(
        shifted,
        &subsets,
        config.k,
        backend,
        None,
        config.min_points,
        &mut GroupTimes::default(),
    )?;
    let proposals = clusters
        .into_iter()
        .map(|(class_id, members)| InstanceProposal {
            confidence: mean_score(scores, scene.num_classes, class_id, &members),
            class_id,
            members,
        })
        .collect();
    Ok(ProposalSet::new(proposals))
}

fn check_inputs(scene: &Scene, shifted: &[[f64; 3]], config: &GroupingConfig) -> Result<()> {
    config.validate()?;
    scene_scores(scene)?;
    if shifted.len() != scene.len() {
        return Err(Error::invalid_arg(format!(
            "{} shifted positions for a scene of {} points",
            shifted.len(),
            scene.len()
        )));
    }
    Ok(())
}

/// Soft grouping over per-class score-threshold subsets.
pub fn soft_group(
    scene: &Scene,
    shifted: &[[f64; 3]],
    config: &GroupingConfig,
    backend: Backend,
) -> Result<ProposalSet> {
    check_inputs(scene, shifted, config)?;
    let scores = scene_scores(scene)?;
    let parts = (0..scene.num_classes)
        .map(|c| class_subset(scores, scene.num_classes, c, config.tau))
        .collect::<Result<Vec<_>>>()?;
    group_with(scene, shifted, config, backend, parts)
}

/// Grouping over the argmax partition; `tau` is not used.
pub fn hard_group(
    scene: &Scene,
    shifted: &[[f64; 3]],
    config: &GroupingConfig,
    backend: Backend,
) -> Result<ProposalSet> {
    check_inputs(scene, shifted, config)?;
    let scores = scene_scores(scene)?;
    let parts = argmax_partition(scores, scene.num_classes);
    group_with(scene, shifted, config, backend, parts)
}
