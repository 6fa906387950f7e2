//! End-to-end grouping stage with the three speed toggles: octree neighbor
//! search, class-aware pyramid scaling and late devoxelization.
//!
//! With every toggle off the pipeline groups raw points with the exhaustive
//! neighbor search. Late devoxelization first pools the scene at the input
//! voxel size and keeps working on voxels until the final proposals are
//! expanded back to points.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::caps::{
    caps_downscale, inverse_caps, inverse_naive, naive_downscale, CapsConfig, Elements,
    DEFAULT_THRESHOLDS,
};
use crate::error::{Error, Result};
use crate::grouping::{
    class_subset, cluster_subsets, mean_score, ClassSubset, GroupTimes, GroupingConfig,
    InstanceProposal, ProposalSet,
};
use crate::knn::{Backend, OctreeLevels};
use crate::scene::{tight_bbox, to_f64, Aabb, Point3, Scene};
use crate::voxel::{voxelize, VoxelGrid};

/// Dataset presets: (name, voxel size, grouping bandwidth), meters.
pub const PRESETS: [(&str, f64, f64); 4] = [
    ("scannet", 0.02, 0.04),
    ("s3dis", 0.02, 0.04),
    ("stpls3d", 0.33, 0.90),
    ("semantickitti", 0.05, 0.10),
];

pub fn preset(name: &str) -> Result<(f64, f64)> {
    PRESETS
        .iter()
        .find(|p| p.0.eq_ignore_ascii_case(name))
        .map(|p| (p.1, p.2))
        .ok_or_else(|| {
            let names: Vec<_> = PRESETS.iter().map(|p| p.0).collect();
            Error::invalid_arg(format!("unknown preset {name:?}, expected one of {names:?}"))
        })
}

/// How grouping elements are downscaled before clustering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Scaling {
    Off,
    /// Per-class pyramid levels.
    Caps,
    /// Whole scene at one voxel size, `level * V`.
    Naive { level: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub preset: Option<String>,
    pub grouping: GroupingConfig,
    /// Input voxel size, also the base size of the scaling pyramid.
    pub voxel_size: f64,
    pub use_octree: bool,
    pub octree_levels: OctreeLevels,
    pub scaling: Scaling,
    /// The open last bound is written as `null` in JSON.
    #[serde(with = "open_bounds")]
    pub caps_thresholds: Vec<f64>,
    pub late_devox: bool,
}

mod open_bounds {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let v: Vec<Option<f64>> = v.iter().map(|&t| t.is_finite().then_some(t)).collect();
        v.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let v = Vec::<Option<f64>>::deserialize(d)?;
        Ok(v.into_iter().map(|t| t.unwrap_or(f64::INFINITY)).collect())
    }
}

impl PipelineConfig {
    /// Every toggle on.
    pub fn from_preset(name: &str) -> Result<Self> {
        let (voxel_size, radius) = preset(name)?;
        Ok(PipelineConfig {
            preset: Some(name.to_ascii_lowercase()),
            grouping: GroupingConfig {
                radius,
                ..Default::default()
            },
            voxel_size,
            use_octree: true,
            octree_levels: OctreeLevels::Auto,
            scaling: Scaling::Caps,
            caps_thresholds: DEFAULT_THRESHOLDS.to_vec(),
            late_devox: true,
        })
    }

    /// Sets the three toggles; CAPS off means no scaling at all.
    pub fn with_toggles(mut self, octree: bool, caps: bool, late_devox: bool) -> Self {
        self.use_octree = octree;
        self.scaling = if caps { Scaling::Caps } else { Scaling::Off };
        self.late_devox = late_devox;
        self
    }

    pub fn backend(&self) -> Backend {
        if self.use_octree {
            Backend::Octree(self.octree_levels)
        } else {
            Backend::Vanilla
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grouping.validate()?;
        if !(self.voxel_size > 0.0 && self.voxel_size.is_finite()) {
            return Err(Error::invalid_arg(format!(
                "voxel size must be positive, got {}",
                self.voxel_size
            )));
        }
        if let OctreeLevels::Fixed(m) = self.octree_levels {
            if !(1..=crate::octree::MAX_LEVELS).contains(&m) {
                return Err(Error::invalid_arg(format!("octree levels {m} out of range")));
            }
        }
        if let Scaling::Naive { level: 0 } = self.scaling {
            return Err(Error::invalid_arg("naive scaling level must be at least 1"));
        }
        crate::caps::validate_thresholds(&self.caps_thresholds)
    }
}

/// Wall-clock seconds per stage.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StageTimings {
    /// Input preparation and voxelization.
    pub point_wise: f64,
    pub knn: f64,
    /// Shifting, subset slicing, downscaling and union-find.
    pub grouping: f64,
    /// Inverse scaling, devoxelization, confidences and ordering.
    pub top_down: f64,
    pub total: f64,
}

impl StageTimings {
    pub fn stage_sum(&self) -> f64 {
        self.point_wise + self.knn + self.grouping + self.top_down
    }

    /// Per-field median over repeated runs.
    pub fn median(runs: &[StageTimings]) -> StageTimings {
        let med = |f: fn(&StageTimings) -> f64| median(runs.iter().map(f).collect());
        StageTimings {
            point_wise: med(|t| t.point_wise),
            knn: med(|t| t.knn),
            grouping: med(|t| t.grouping),
            top_down: med(|t| t.top_down),
            total: med(|t| t.total),
        }
    }
}

/// Median of a sample (mean of the middle pair for even sizes, 0 if empty).
pub fn median(mut xs: Vec<f64>) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

/// Pyramid decision for one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScale {
    pub class_id: u32,
    pub count: usize,
    pub level: u32,
    pub voxel_size: f64,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub proposals: ProposalSet,
    pub timings: StageTimings,
    /// Elements grouped after input voxelization (points when early).
    pub num_elements: usize,
    /// Elements actually clustered after scaling.
    pub num_grouped: usize,
    pub scales: Vec<ClassScale>,
}

struct Clock {
    start: Instant,
}

impl Clock {
    fn start() -> Self {
        Clock {
            start: Instant::now(),
        }
    }

    fn lap(&mut self) -> Duration {
        let now = Instant::now();
        let d = now - self.start;
        self.start = now;
        d
    }
}

pub fn run(scene: &Scene, config: &PipelineConfig) -> Result<(ProposalSet, StageTimings)> {
    let out = run_detailed(scene, config)?;
    Ok((out.proposals, out.timings))
}

pub fn run_detailed(scene: &Scene, config: &PipelineConfig) -> Result<PipelineOutput> {
    let total = Instant::now();
    let mut clock = Clock::start();
    config.validate()?;
    scene.validate()?;
    let c = scene.num_classes;
    let (scores, offsets) = match (&scene.scores, &scene.offsets) {
        (Some(s), Some(o)) => (s, o),
        _ => return Err(Error::invalid_data("scene needs semantic scores and offsets")),
    };
    let point_scores: Vec<f64> = scores.iter().map(|&s| s as f64).collect();

    // Elements: shifted positions, scores, offsets, weights.
    let (grid, el_pos, el_scores, el_offsets, el_weights) = if config.late_devox {
        let positions: Vec<[f64; 3]> = scene.positions.iter().map(to_f64).collect();
        let dim = c + 3;
        let mut features = Vec::with_capacity(scene.len() * dim);
        for (i, o) in offsets.iter().enumerate() {
            features.extend_from_slice(&point_scores[i * c..(i + 1) * c]);
            features.extend(o.iter().map(|&v| v as f64));
        }
        let (grid, pooled) = voxelize(&positions, &features, dim, config.voxel_size)?;
        let m = grid.num_voxels();
        let mut s = Vec::with_capacity(m * c);
        let mut o = Vec::with_capacity(m);
        for row in pooled.chunks_exact(dim) {
            s.extend_from_slice(&row[..c]);
            o.push([row[c], row[c + 1], row[c + 2]]);
        }
        let w = (0..m).map(|v| grid.member_count(v) as u32).collect();
        let centroids = grid.voxel_centroids.clone();
        (Some(grid), centroids, s, o, w)
    } else {
        let o: Vec<[f64; 3]> = offsets.iter().map(to_f64).collect();
        (
            None,
            scene.positions.iter().map(to_f64).collect(),
            point_scores.clone(),
            o,
            vec![1u32; scene.len()],
        )
    };
    let mut timings = StageTimings {
        point_wise: clock.lap().as_secs_f64(),
        ..Default::default()
    };

    let shifted: Vec<[f64; 3]> = el_pos
        .iter()
        .zip(&el_offsets)
        .map(|(p, o)| std::array::from_fn(|a| p[a] + o[a]))
        .collect();
    let elements = Elements {
        positions: &shifted,
        scores: &el_scores,
        offsets: &el_offsets,
        weights: &el_weights,
        num_classes: c,
    };
    let g = &config.grouping;
    let backend = config.backend();
    let mut times = GroupTimes::default();
    let mut scales = Vec::new();
    let num_grouped;
    let mut pre = clock.lap();

    let element_proposals = match config.scaling {
        Scaling::Off => {
            let subsets = (0..c)
                .map(|class| {
                    Ok(ClassSubset {
                        class_id: class as u32,
                        elements: class_subset(&el_scores, c, class, g.tau)?,
                        radius: g.radius,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            num_grouped = elements.len();
            pre += clock.lap();
            let clusters = cluster_subsets(
                &shifted, &subsets, g.k, backend, Some(&el_weights), g.min_points, &mut times,
            )?;
            clock.lap();
            to_proposals(clusters)
        }
        Scaling::Caps => {
            let caps_config = CapsConfig {
                base_voxel: config.voxel_size,
                thresholds: config.caps_thresholds.clone(),
                tau: g.tau,
            };
            let caps = caps_downscale(&elements, &caps_config)?;
            let positions = caps.positions();
            let weights = caps.weights();
            let subsets: Vec<ClassSubset> = caps
                .classes
                .iter()
                .map(|cl| {
                    scales.push(ClassScale {
                        class_id: cl.class_id,
                        count: cl.count,
                        level: cl.level,
                        voxel_size: cl.voxel_size,
                        radius: cl.effective_radius(g.radius),
                    });
                    ClassSubset {
                        class_id: cl.class_id,
                        elements: caps.class_range(cl.class_id).collect(),
                        radius: cl.effective_radius(g.radius),
                    }
                })
                .collect();
            num_grouped = caps.len();
            pre += clock.lap();
            let clusters = cluster_subsets(
                &positions, &subsets, g.k, backend, Some(&weights), g.min_points, &mut times,
            )?;
            clock.lap();
            let grouped = to_proposals(clusters);
            let out = inverse_caps(&grouped, &caps, &el_scores)?;
            timings.top_down += clock.lap().as_secs_f64();
            out
        }
        Scaling::Naive { level } => {
            let size = level as f64 * config.voxel_size;
            let pooled = naive_downscale(&elements, size)?;
            let radius = g.radius.max(size);
            let subsets = (0..c)
                .map(|class| {
                    scales.push(ClassScale {
                        class_id: class as u32,
                        count: 0,
                        level,
                        voxel_size: size,
                        radius,
                    });
                    Ok(ClassSubset {
                        class_id: class as u32,
                        elements: class_subset(&pooled.scores, c, class, g.tau)?,
                        radius,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            for (s, sub) in scales.iter_mut().zip(&subsets) {
                s.count = sub.elements.len();
            }
            num_grouped = pooled.len();
            pre += clock.lap();
            let clusters = cluster_subsets(
                &pooled.positions, &subsets, g.k, backend, Some(&pooled.weights), g.min_points,
                &mut times,
            )?;
            clock.lap();
            let grouped = to_proposals(clusters);
            let out = inverse_naive(&grouped, &pooled, &el_scores, c)?;
            timings.top_down += clock.lap().as_secs_f64();
            out
        }
    };
    timings.knn = times.knn.as_secs_f64();
    timings.grouping = (times.grouping + pre).as_secs_f64();

    let proposals = expand_to_points(element_proposals, grid.as_ref(), &point_scores, c);
    timings.top_down += clock.lap().as_secs_f64();
    timings.total = total.elapsed().as_secs_f64();
    Ok(PipelineOutput {
        proposals,
        timings,
        num_elements: elements.len(),
        num_grouped,
        scales,
    })
}

fn to_proposals(clusters: Vec<(u32, Vec<u32>)>) -> ProposalSet {
    ProposalSet::new(
        clusters
            .into_iter()
            .map(|(class_id, members)| InstanceProposal {
                class_id,
                members,
                confidence: 0.0,
            })
            .collect(),
    )
}

/// Devoxelizes element proposals and recomputes confidences over points.
fn expand_to_points(
    proposals: ProposalSet,
    grid: Option<&VoxelGrid>,
    point_scores: &[f64],
    num_classes: usize,
) -> ProposalSet {
    let expanded = proposals
        .proposals
        .into_iter()
        .map(|p| {
            let members = match grid {
                Some(g) => {
                    let mut m: Vec<u32> = p
                        .members
                        .iter()
                        .flat_map(|&v| g.members(v as usize).iter().copied())
                        .collect();
                    m.sort_unstable();
                    m
                }
                None => p.members,
            };
            InstanceProposal {
                confidence: mean_score(point_scores, num_classes, p.class_id, &members),
                class_id: p.class_id,
                members,
            }
        })
        .collect();
    ProposalSet::new(expanded)
}

/// Runs the pipeline `reps` times and reports per-stage medians. Proposals
/// must agree across runs.
pub fn run_repeated(
    scene: &Scene,
    config: &PipelineConfig,
    reps: usize,
) -> Result<(ProposalSet, StageTimings)> {
    let mut runs = Vec::with_capacity(reps);
    let mut first: Option<ProposalSet> = None;
    for _ in 0..reps.max(1) {
        let (p, t) = run(scene, config)?;
        runs.push(t);
        match &first {
            None => first = Some(p),
            Some(f) if *f != p => {
                return Err(Error::invalid_data("pipeline output differs between runs"))
            }
            Some(_) => {}
        }
    }
    Ok((first.unwrap(), StageTimings::median(&runs)))
}

/// Pastes proposal classes onto semantic labels in ascending confidence,
/// so the most confident proposal wins an overlap. Equal confidences keep
/// canonical order.
pub fn back_fuse(labels: &[i32], proposals: &ProposalSet) -> Result<Vec<i32>> {
    let mut fused = labels.to_vec();
    let mut order: Vec<&InstanceProposal> = proposals.iter().collect();
    order.sort_by(|a, b| a.confidence.total_cmp(&b.confidence));
    for p in order {
        for &i in &p.members {
            let slot = fused.get_mut(i as usize).ok_or_else(|| {
                Error::invalid_data(format!("proposal member {i} beyond {} labels", labels.len()))
            })?;
            *slot = p.class_id as i32;
        }
    }
    Ok(fused)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionBox {
    pub class_id: u32,
    pub bbox: Aabb<3>,
    pub confidence: f64,
}

/// Tight axis-aligned box around every proposal.
pub fn proposals_to_boxes(proposals: &ProposalSet, positions: &[Point3]) -> Result<Vec<DetectionBox>> {
    proposals
        .iter()
        .map(|p| {
            if let Some(&bad) = p.members.iter().find(|&&i| i as usize >= positions.len()) {
                return Err(Error::invalid_data(format!("proposal member {bad} out of range")));
            }
            let bbox = tight_bbox(p.members.iter().map(|&i| to_f64(&positions[i as usize])))?;
            Ok(DetectionBox {
                class_id: p.class_id,
                bbox,
                confidence: p.confidence,
            })
        })
        .collect()
}

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalSummary {
    pub class_id: u32,
    pub num_points: usize,
    pub confidence: f64,
    pub bbox: Aabb<3>,
}

/// Run report. Everything except `timings` is deterministic for a given
/// scene and configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub version: u32,
    pub config: PipelineConfig,
    pub backend: String,
    pub num_points: usize,
    pub num_elements: usize,
    pub num_grouped: usize,
    pub scales: Vec<ClassScale>,
    pub proposal_count: usize,
    pub proposals: Vec<ProposalSummary>,
    pub timings: StageTimings,
}

impl RunReport {
    pub fn new(scene: &Scene, config: &PipelineConfig, out: &PipelineOutput) -> Result<Self> {
        let boxes = proposals_to_boxes(&out.proposals, &scene.positions)?;
        Ok(RunReport {
            version: REPORT_VERSION,
            config: config.clone(),
            backend: config.backend().to_string(),
            num_points: scene.len(),
            num_elements: out.num_elements,
            num_grouped: out.num_grouped,
            scales: out.scales.clone(),
            proposal_count: out.proposals.len(),
            proposals: out
                .proposals
                .iter()
                .zip(boxes)
                .map(|(p, b)| ProposalSummary {
                    class_id: p.class_id,
                    num_points: p.members.len(),
                    confidence: p.confidence,
                    bbox: b.bbox,
                })
                .collect(),
            timings: out.timings,
        })
    }
}
