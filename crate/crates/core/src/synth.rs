//! Deterministic synthetic scenes with ground truth, standing in for the
//! outputs of a segmentation network.
//!
//! Randomness comes from ChaCha8 seeded with the spec seed. Stream 0 drives
//! the layout; instance `i` draws its points from stream `i + 1`, its score
//! corruption from `SCORE_STREAM + i` and its offset noise from
//! `OFFSET_STREAM + i`. Background points use the stream right after the
//! last instance in each family. Instances can therefore be generated in
//! parallel without changing the output.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{Point3, Scene, IGNORE_LABEL, NO_INSTANCE};

const SCORE_STREAM: u64 = 1 << 40;
const OFFSET_STREAM: u64 = 2 << 40;
const PLACEMENT_TRIES: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlobShape {
    /// Solid isotropic Gaussian with standard deviation `size / 4`,
    /// truncated to a ball of diameter `size`.
    Gaussian,
    /// Points on the faces of a box whose sides lie in `[size / 2, size]`,
    /// like a scanned surface. The interior is empty.
    Cuboid,
}

/// Per-class override of instance size and shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassProfile {
    pub points: [usize; 2],
    pub shape: BlobShape,
    pub size: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub num_instances: usize,
    /// Classes of the free instances, cycled; empty draws them uniformly.
    pub instance_classes: Vec<u32>,
    /// Inclusive range of points per instance.
    pub points_per_instance: [usize; 2],
    pub shape: BlobShape,
    /// Instance diameter range, meters.
    pub size_range: [f64; 2],
    /// Scene box `[0, x] x [0, y] x [0, z]`, meters.
    pub extent: [f64; 3],
    /// Minimum gap between the bounding spheres of free instances.
    pub min_separation: f64,
    /// Mean fraction of an instance's points whose argmax is moved to a
    /// wrong class. Each instance draws its own fraction uniformly from
    /// `[0, 2 * confusion_rate]` (capped at 1).
    pub confusion_rate: f64,
    /// True-class score of confused points.
    pub true_score_range: [f64; 2],
    /// Wrong-class score of confused points; must lie above the true range.
    pub wrong_score_range: [f64; 2],
    /// True-class score of clean points.
    pub clean_score_range: [f64; 2],
    /// Other classes score uniformly in `[0, other_score_max]`.
    pub other_score_max: f64,
    pub offset_sigma: f64,
    pub background_points: usize,
    /// Background points score uniformly in `[0, background_score_floor]`
    /// for every class.
    pub background_score_floor: f64,
    /// Optional per-class overrides; classes without one use the globals.
    pub class_profiles: Vec<ClassProfile>,
    /// Extra instances placed around the center of a cuboid instance of
    /// another class, inside its empty interior.
    pub nested_instances: usize,
    /// Classes eligible for nested instances (empty means any).
    pub nested_classes: Vec<u32>,
    /// Maximum distance between a nested instance's center and its host's.
    pub nest_jitter: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_classes: 8,
            num_instances: 12,
            instance_classes: Vec::new(),
            points_per_instance: [1000, 3000],
            shape: BlobShape::Gaussian,
            size_range: [0.4, 1.0],
            extent: [10.0, 10.0, 3.0],
            min_separation: 0.08,
            confusion_rate: 0.3,
            true_score_range: [0.25, 0.45],
            wrong_score_range: [0.46, 0.56],
            clean_score_range: [0.6, 0.95],
            other_score_max: 0.1,
            offset_sigma: 0.01,
            background_points: 2000,
            background_score_floor: 0.15,
            class_profiles: Vec::new(),
            nested_instances: 0,
            nested_classes: Vec::new(),
            nest_jitter: 0.02,
            seed: 0,
        }
    }
}

fn check_range(name: &str, r: [f64; 2], lo: f64, hi: f64) -> Result<()> {
    if !(r[0] <= r[1] && r[0] >= lo && r[1] <= hi) {
        return Err(Error::invalid_arg(format!(
            "{name} {r:?} must be ordered within [{lo}, {hi}]"
        )));
    }
    Ok(())
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::invalid_arg("num_classes must be at least 1"));
        }
        let pts = self.points_per_instance;
        if pts[0] == 0 || pts[0] > pts[1] {
            return Err(Error::invalid_arg("points_per_instance must be ordered and positive"));
        }
        check_range("size_range", self.size_range, 1e-9, f64::MAX)?;
        if self.extent.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
            return Err(Error::invalid_arg("extent must be positive"));
        }
        if !(self.min_separation >= 0.0) {
            return Err(Error::invalid_arg("min_separation must be non-negative"));
        }
        check_range("confusion_rate", [self.confusion_rate; 2], 0.0, 1.0)?;
        check_range("true_score_range", self.true_score_range, 0.0, 1.0)?;
        check_range("wrong_score_range", self.wrong_score_range, 0.0, 1.0)?;
        check_range("clean_score_range", self.clean_score_range, 0.0, 1.0)?;
        check_range("other_score_max", [self.other_score_max; 2], 0.0, 1.0)?;
        check_range("background_score_floor", [self.background_score_floor; 2], 0.0, 1.0)?;
        if self.wrong_score_range[0] <= self.true_score_range[1] {
            return Err(Error::invalid_arg(
                "wrong_score_range must lie above true_score_range",
            ));
        }
        if self.clean_score_range[0] <= self.other_score_max {
            return Err(Error::invalid_arg(
                "clean_score_range must lie above other_score_max",
            ));
        }
        if !(self.offset_sigma >= 0.0 && self.offset_sigma.is_finite()) {
            return Err(Error::invalid_arg("offset_sigma must be non-negative"));
        }
        if !(self.nest_jitter >= 0.0) {
            return Err(Error::invalid_arg("nest_jitter must be non-negative"));
        }
        for p in &self.class_profiles {
            if p.points[0] == 0 || p.points[0] > p.points[1] {
                return Err(Error::invalid_arg("class profile points must be ordered and positive"));
            }
            check_range("class profile size", p.size, 1e-9, f64::MAX)?;
        }
        if self.class_profiles.len() > self.num_classes {
            return Err(Error::invalid_arg("more class profiles than classes"));
        }
        if self.nested_classes.iter().any(|&c| c as usize >= self.num_classes) {
            return Err(Error::invalid_arg("nested class out of range"));
        }
        if self.instance_classes.iter().any(|&c| c as usize >= self.num_classes) {
            return Err(Error::invalid_arg("instance class out of range"));
        }
        if self.num_classes < 2 && self.confusion_rate > 0.0 {
            return Err(Error::invalid_arg("confusion needs at least two classes"));
        }
        Ok(())
    }

    fn profile(&self, class: u32) -> ClassProfile {
        self.class_profiles
            .get(class as usize)
            .cloned()
            .unwrap_or(ClassProfile {
                points: self.points_per_instance,
                shape: self.shape,
                size: self.size_range,
            })
    }
}

/// Placement of one instance.
#[derive(Debug, Clone, PartialEq)]
struct Placed {
    class_id: u32,
    center: [f64; 3],
    size: f64,
    /// Box half-extents for cuboids.
    half: [f64; 3],
    shape: BlobShape,
    points: usize,
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..=r[1])
    }
}

fn layout(spec: &SynthSpec) -> Result<Vec<Placed>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut placed: Vec<Placed> = Vec::new();
    for i in 0..spec.num_instances {
        let class_id = match spec.instance_classes.len() {
            0 => rng.random_range(0..spec.num_classes as u32),
            n => spec.instance_classes[i % n],
        };
        let profile = spec.profile(class_id);
        let size = uniform(&mut rng, profile.size);
        let half: [f64; 3] = match profile.shape {
            BlobShape::Gaussian => [size / 2.0; 3],
            BlobShape::Cuboid => std::array::from_fn(|_| size * rng.random_range(0.5..=1.0) / 2.0),
        };
        let points = rng.random_range(profile.points[0]..=profile.points[1]);
        let bound = half.iter().map(|h| h * h).sum::<f64>().sqrt();
        let mut center = None;
        for _ in 0..PLACEMENT_TRIES {
            let c: [f64; 3] = std::array::from_fn(|a| {
                let lo = half[a];
                let hi = spec.extent[a] - half[a];
                if hi <= lo {
                    spec.extent[a] / 2.0
                } else {
                    rng.random_range(lo..hi)
                }
            });
            let clear = placed.iter().all(|p| {
                let other = p.half.iter().map(|h| h * h).sum::<f64>().sqrt();
                dist(&c, &p.center) > bound + other + spec.min_separation
            });
            if clear {
                center = Some(c);
                break;
            }
        }
        let center = center.ok_or_else(|| {
            Error::Generation(format!(
                "could not place instance {} after {PLACEMENT_TRIES} tries",
                placed.len()
            ))
        })?;
        placed.push(Placed {
            class_id,
            center,
            size,
            half,
            shape: profile.shape,
            points,
        });
    }

    let mut hosts: Vec<usize> = (0..placed.len())
        .filter(|&i| placed[i].shape == BlobShape::Cuboid)
        .collect();
    // every host gets one nested instance before any gets a second
    hosts.shuffle(&mut rng);
    for n in 0..spec.nested_instances {
        if hosts.is_empty() {
            return Err(Error::Generation("nested instances need a cuboid host".into()));
        }
        let host = placed[hosts[n % hosts.len()]].clone();
        let eligible: Vec<u32> = (0..spec.num_classes as u32)
            .filter(|&c| c != host.class_id)
            .filter(|c| spec.nested_classes.is_empty() || spec.nested_classes.contains(c))
            .collect();
        if eligible.is_empty() {
            return Err(Error::Generation(format!("no class available for nested instance {n}")));
        }
        let class_id = eligible[rng.random_range(0..eligible.len())];
        let profile = spec.profile(class_id);
        let inner = host.half.iter().cloned().fold(f64::INFINITY, f64::min);
        // keep the nested blob well inside the host's hollow interior
        let size = uniform(&mut rng, profile.size).min(inner * 0.5);
        let dir: [f64; 3] = UnitSphere.sample(&mut rng);
        let reach = spec.nest_jitter * rng.random::<f64>().cbrt();
        let center = std::array::from_fn(|a| host.center[a] + dir[a] * reach);
        let points = rng.random_range(profile.points[0]..=profile.points[1]);
        placed.push(Placed {
            class_id,
            center,
            size,
            half: [size / 2.0; 3],
            shape: BlobShape::Gaussian,
            points,
        });
    }
    Ok(placed)
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt()
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn sample_blob(p: &Placed, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let mut out = Vec::with_capacity(p.points);
    match p.shape {
        BlobShape::Gaussian => {
            let normal = Normal::new(0.0, p.size / 4.0).expect("positive deviation");
            let r2 = (p.size / 2.0).powi(2);
            while out.len() < p.points {
                let d: [f64; 3] = std::array::from_fn(|_| normal.sample(rng));
                if d.iter().map(|v| v * v).sum::<f64>() <= r2 {
                    out.push(std::array::from_fn(|a| p.center[a] + d[a]));
                }
            }
        }
        BlobShape::Cuboid => {
            let h = p.half;
            // face areas for axis a: the two faces orthogonal to a
            let areas: [f64; 3] = std::array::from_fn(|a| 4.0 * h[(a + 1) % 3] * h[(a + 2) % 3]);
            let total: f64 = areas.iter().sum();
            for _ in 0..p.points {
                let mut pick = rng.random::<f64>() * total;
                let mut axis = 2;
                for (a, area) in areas.iter().enumerate() {
                    if pick < *area {
                        axis = a;
                        break;
                    }
                    pick -= area;
                }
                let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
                let d: [f64; 3] = std::array::from_fn(|a| {
                    if a == axis {
                        side * h[a]
                    } else {
                        rng.random_range(-h[a]..=h[a])
                    }
                });
                out.push(std::array::from_fn(|a| p.center[a] + d[a]));
            }
        }
    }
    out
}

/// Clean scene: true class scores in the clean range, other classes low,
/// ideal offsets towards each instance's centroid.
pub fn generate_scene(spec: &SynthSpec) -> Result<Scene> {
    spec.validate()?;
    let placed = layout(spec)?;
    let c = spec.num_classes;
    let blobs: Vec<(Vec<[f64; 3]>, Vec<f32>)> = placed
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut rng = stream(spec.seed, i as u64 + 1);
            let pts = sample_blob(p, &mut rng);
            let mut scores = Vec::with_capacity(pts.len() * c);
            for _ in 0..pts.len() {
                for k in 0..c {
                    let s = if k == p.class_id as usize {
                        uniform(&mut rng, spec.clean_score_range)
                    } else {
                        uniform(&mut rng, [0.0, spec.other_score_max])
                    };
                    scores.push(s as f32);
                }
            }
            (pts, scores)
        })
        .collect();

    let total: usize = blobs.iter().map(|b| b.0.len()).sum::<usize>() + spec.background_points;
    let mut scene = Scene::new(Vec::with_capacity(total), c);
    let mut scores = Vec::with_capacity(total * c);
    let mut offsets = Vec::with_capacity(total);
    let mut sem = Vec::with_capacity(total);
    let mut inst = Vec::with_capacity(total);
    for (i, ((pts, s), p)) in blobs.into_iter().zip(&placed).enumerate() {
        let stored: Vec<Point3> = pts.iter().map(|q| q.map(|v| v as f32)).collect();
        let centroid = centroid_f32(&stored);
        for q in &stored {
            offsets.push(std::array::from_fn(|a| (centroid[a] - q[a] as f64) as f32));
        }
        scene.positions.extend(stored);
        scores.extend(s);
        sem.extend(std::iter::repeat_n(p.class_id as i32, pts.len()));
        inst.extend(std::iter::repeat_n(i as i32, pts.len()));
    }
    let mut rng = stream(spec.seed, placed.len() as u64 + 1);
    for _ in 0..spec.background_points {
        let q: Point3 = std::array::from_fn(|a| rng.random_range(0.0..spec.extent[a]) as f32);
        scene.positions.push(q);
        for _ in 0..c {
            scores.push(uniform(&mut rng, [0.0, spec.background_score_floor]) as f32);
        }
        offsets.push([0.0; 3]);
        sem.push(IGNORE_LABEL);
        inst.push(NO_INSTANCE);
    }
    scene.scores = Some(scores);
    scene.offsets = Some(offsets);
    scene.gt_semantic = Some(sem);
    scene.gt_instance = Some(inst);
    scene.validate()?;
    Ok(scene)
}

fn centroid_f32(points: &[Point3]) -> [f64; 3] {
    let mut acc = [0.0; 3];
    for p in points {
        for a in 0..3 {
            acc[a] += p[a] as f64;
        }
    }
    acc.map(|v| v / points.len().max(1) as f64)
}

fn instance_members(scene: &Scene) -> Result<Vec<(i32, u32, Vec<u32>)>> {
    Ok(scene
        .gt_instances()?
        .into_iter()
        .map(|g| (g.id, g.class_id, g.members))
        .collect())
}

/// Moves the argmax of a contiguous region of every instance to a wrong
/// class while the true class keeps a score in `true_score_range`.
///
/// The region is the set of points nearest a random pole on the instance's
/// bounding sphere, covering a fraction drawn uniformly from
/// `[0, 2 * confusion_rate]`. The wrong class is fixed per instance.
pub fn corrupt_scores(scene: &Scene, spec: &SynthSpec) -> Result<Scene> {
    spec.validate()?;
    let mut out = scene.clone();
    if spec.confusion_rate == 0.0 {
        return Ok(out);
    }
    let c = scene.num_classes;
    if c < 2 {
        return Err(Error::invalid_arg("confusion needs at least two classes"));
    }
    let instances = instance_members(scene)?;
    let updates: Vec<Vec<(u32, Vec<f32>)>> = instances
        .par_iter()
        .map(|(id, class, members)| {
            let mut rng = stream(spec.seed, SCORE_STREAM + *id as u64);
            let fraction = rng.random_range(0.0..=(2.0 * spec.confusion_rate).min(1.0));
            let mut wrong = rng.random_range(0..c as u32 - 1);
            if wrong >= *class {
                wrong += 1;
            }
            let pts: Vec<Point3> = members.iter().map(|&i| scene.positions[i as usize]).collect();
            let center = centroid_f32(&pts);
            let reach = pts
                .iter()
                .map(|p| dist(&p.map(|v| v as f64), &center))
                .fold(0.0, f64::max);
            let dir: [f64; 3] = UnitSphere.sample(&mut rng);
            let pole: [f64; 3] = std::array::from_fn(|a| center[a] + dir[a] * reach);
            let mut order: Vec<(f64, u32)> = members
                .iter()
                .zip(&pts)
                .map(|(&i, p)| (dist(&p.map(|v| v as f64), &pole), i))
                .collect();
            order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let count = (fraction * members.len() as f64).round() as usize;
            let mut chosen: Vec<u32> = order[..count].iter().map(|o| o.1).collect();
            chosen.sort_unstable();
            chosen
                .into_iter()
                .map(|i| {
                    let mut row = scene.score_row(i as usize).to_vec();
                    row[*class as usize] = uniform(&mut rng, spec.true_score_range) as f32;
                    row[wrong as usize] = uniform(&mut rng, spec.wrong_score_range) as f32;
                    (i, row)
                })
                .collect()
        })
        .collect();
    let scores = out.scores.as_mut().ok_or_else(|| Error::invalid_data("scene has no scores"))?;
    for (i, row) in updates.into_iter().flatten() {
        let i = i as usize;
        scores[i * c..(i + 1) * c].copy_from_slice(&row);
    }
    Ok(out)
}

/// Adds isotropic Gaussian noise with deviation `sigma` to every offset.
pub fn corrupt_offsets(scene: &Scene, sigma: f64, seed: u64) -> Result<Scene> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::invalid_arg(format!("offset sigma {sigma} must be non-negative")));
    }
    let mut out = scene.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(0.0, sigma).expect("valid deviation");
    let n = scene.len();
    let offsets = out
        .offsets
        .as_mut()
        .ok_or_else(|| Error::invalid_data("scene has no offsets"))?;
    // points grouped by instance, background last
    let mut groups: std::collections::BTreeMap<i64, Vec<usize>> = Default::default();
    let ids = scene.gt_instance.clone().unwrap_or_else(|| vec![NO_INSTANCE; n]);
    let bg_stream = ids.iter().copied().max().unwrap_or(-1) as i64 + 1;
    for (i, &id) in ids.iter().enumerate() {
        let key = if id == NO_INSTANCE { bg_stream } else { id as i64 };
        groups.entry(key).or_default().push(i);
    }
    let noise: Vec<(usize, [f32; 3])> = groups
        .into_par_iter()
        .flat_map_iter(|(key, members)| {
            let mut rng = stream(seed, OFFSET_STREAM + key as u64);
            members
                .into_iter()
                .map(|i| (i, std::array::from_fn(|_| normal.sample(&mut rng) as f32)))
                .collect::<Vec<_>>()
        })
        .collect();
    for (i, d) in noise {
        for a in 0..3 {
            offsets[i][a] += d[a];
        }
    }
    Ok(out)
}

/// Generated scene with both corruptions applied.
pub fn synthesize(spec: &SynthSpec) -> Result<Scene> {
    let clean = generate_scene(spec)?;
    let noisy = corrupt_scores(&clean, spec)?;
    corrupt_offsets(&noisy, spec.offset_sigma, spec.seed)
}

/// Replaces scores and offsets by their means over each voxel of size
/// `voxel_size`, as if predicted per voxel and broadcast to points.
pub fn make_voxel_constant(scene: &Scene, voxel_size: f64) -> Result<Scene> {
    let c = scene.num_classes;
    let (scores, offsets) = match (&scene.scores, &scene.offsets) {
        (Some(s), Some(o)) => (s, o),
        _ => return Err(Error::invalid_data("scene needs scores and offsets")),
    };
    let positions: Vec<[f64; 3]> = scene.positions.iter().map(|p| p.map(|v| v as f64)).collect();
    let dim = c + 3;
    let mut features = Vec::with_capacity(scene.len() * dim);
    for (i, o) in offsets.iter().enumerate() {
        features.extend(scores[i * c..(i + 1) * c].iter().map(|&s| s as f64));
        features.extend(o.iter().map(|&v| v as f64));
    }
    let (grid, pooled) = crate::voxel::voxelize(&positions, &features, dim, voxel_size)?;
    let per_point = crate::voxel::devoxelize(&grid, &pooled, dim)?;
    let mut out = scene.clone();
    let mut new_scores = Vec::with_capacity(scores.len());
    let mut new_offsets = Vec::with_capacity(offsets.len());
    for row in per_point.chunks_exact(dim) {
        new_scores.extend(row[..c].iter().map(|&s| s as f32));
        new_offsets.push([row[c] as f32, row[c + 1] as f32, row[c + 2] as f32]);
    }
    out.scores = Some(new_scores);
    out.offsets = Some(new_offsets);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grouping::{class_subset, score_threshold};

    fn small(seed: u64) -> SynthSpec {
        SynthSpec {
            num_instances: 6,
            points_per_instance: [200, 400],
            background_points: 100,
            seed,
            ..Default::default()
        }
    }

    fn instance_points(scene: &Scene) -> impl Iterator<Item = usize> + '_ {
        let inst = scene.gt_instance.as_ref().unwrap();
        (0..scene.len()).filter(move |&i| inst[i] != NO_INSTANCE)
    }

    #[test]
    fn clean_scene_argmax_is_ground_truth() {
        let scene = generate_scene(&small(3)).unwrap();
        let labels = scene.argmax_labels().unwrap();
        let sem = scene.gt_semantic.as_ref().unwrap();
        for i in instance_points(&scene) {
            assert_eq!(labels[i], sem[i]);
        }
        assert_eq!(scene.gt_instances().unwrap().len(), 6);
    }

    #[test]
    fn same_seed_same_scene() {
        let a = synthesize(&small(11)).unwrap();
        let b = synthesize(&small(11)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, synthesize(&small(12)).unwrap());
    }

    #[test]
    fn generation_is_thread_independent() {
        let spec = small(5);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let threaded = pool.install(|| synthesize(&spec)).unwrap();
        let single = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| synthesize(&spec))
            .unwrap();
        assert_eq!(threaded, single);
    }

    #[test]
    fn ideal_offsets_point_to_centroids() {
        let scene = generate_scene(&small(1)).unwrap();
        let offsets = scene.offsets.as_ref().unwrap();
        for g in scene.gt_instances().unwrap() {
            let pts: Vec<Point3> = g.members.iter().map(|&i| scene.positions[i as usize]).collect();
            let c = centroid_f32(&pts);
            for &i in &g.members {
                let p = scene.positions[i as usize];
                let o = offsets[i as usize];
                for a in 0..3 {
                    assert!((p[a] as f64 + o[a] as f64 - c[a]).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn instances_keep_their_separation() {
        let spec = small(8);
        let placed = layout(&spec).unwrap();
        for (i, a) in placed.iter().enumerate() {
            for b in &placed[i + 1..] {
                let ra = a.half.iter().map(|h| h * h).sum::<f64>().sqrt();
                let rb = b.half.iter().map(|h| h * h).sum::<f64>().sqrt();
                assert!(dist(&a.center, &b.center) > ra + rb + spec.min_separation);
            }
        }
    }

    #[test]
    fn confusion_keeps_true_class_above_tau() {
        let spec = SynthSpec {
            confusion_rate: 0.3,
            ..small(21)
        };
        let clean = generate_scene(&spec).unwrap();
        let noisy = corrupt_scores(&clean, &spec).unwrap();
        let scores = noisy.scores.as_ref().unwrap();
        let sem = noisy.gt_semantic.as_ref().unwrap();
        let t = score_threshold(0.2);
        for i in instance_points(&noisy) {
            assert!(noisy.score(i, sem[i] as usize) as f64 > t);
        }
        for g in noisy.gt_instances().unwrap() {
            let subset = class_subset(scores, noisy.num_classes, g.class_id as usize, 0.2).unwrap();
            assert!(g.members.iter().all(|m| subset.binary_search(m).is_ok()));
        }
    }

    #[test]
    fn argmax_under_coverage_tracks_the_rate() {
        let spec = SynthSpec {
            num_instances: 40,
            points_per_instance: [300, 300],
            size_range: [0.3, 0.5],
            background_points: 0,
            confusion_rate: 0.3,
            ..Default::default()
        };
        let noisy = corrupt_scores(&generate_scene(&spec).unwrap(), &spec).unwrap();
        let labels = noisy.argmax_labels().unwrap();
        let sem = noisy.gt_semantic.as_ref().unwrap();
        let missed = (0..noisy.len()).filter(|&i| labels[i] != sem[i]).count();
        let rate = missed as f64 / noisy.len() as f64;
        assert!((rate - 0.3).abs() < 0.08, "{rate}");
        for g in noisy.gt_instances().unwrap() {
            let flipped = g.members.iter().filter(|&&i| labels[i as usize] != sem[i as usize]).count();
            assert!(flipped as f64 <= 0.6 * g.members.len() as f64 + 1.0);
        }
    }

    #[test]
    fn confused_region_is_one_wrong_class() {
        let spec = SynthSpec { confusion_rate: 0.4, ..small(4) };
        let noisy = corrupt_scores(&generate_scene(&spec).unwrap(), &spec).unwrap();
        let labels = noisy.argmax_labels().unwrap();
        for g in noisy.gt_instances().unwrap() {
            let mut wrong: Vec<i32> = g
                .members
                .iter()
                .map(|&i| labels[i as usize])
                .filter(|&l| l != g.class_id as i32)
                .collect();
            wrong.dedup();
            assert!(wrong.len() <= 1);
        }
    }

    #[test]
    fn zero_corruption_is_identity() {
        let spec = SynthSpec { confusion_rate: 0.0, ..small(2) };
        let clean = generate_scene(&spec).unwrap();
        assert_eq!(corrupt_scores(&clean, &spec).unwrap(), clean);
        assert_eq!(corrupt_offsets(&clean, 0.0, 9).unwrap(), clean);
    }

    #[test]
    fn offset_noise_has_requested_spread() {
        let spec = SynthSpec { background_points: 0, ..small(6) };
        let clean = generate_scene(&spec).unwrap();
        let noisy = corrupt_offsets(&clean, 0.05, 1).unwrap();
        let (a, b) = (clean.offsets.unwrap(), noisy.offsets.unwrap());
        let d: Vec<f64> = a.iter().zip(&b).flat_map(|(x, y)| (0..3).map(move |k| (y[k] - x[k]) as f64)).collect();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let sd = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d.len() as f64).sqrt();
        assert!(mean.abs() < 0.005 && (sd - 0.05).abs() < 0.005, "{mean} {sd}");
    }

    #[test]
    fn background_scores_stay_below_floor() {
        let scene = generate_scene(&small(9)).unwrap();
        let inst = scene.gt_instance.as_ref().unwrap();
        for i in (0..scene.len()).filter(|&i| inst[i] == NO_INSTANCE) {
            assert!(scene.score_row(i).iter().all(|&s| s as f64 <= 0.15 + 1e-7));
        }
    }

    #[test]
    fn nested_instances_sit_inside_hosts() {
        let spec = SynthSpec {
            num_classes: 4,
            num_instances: 3,
            shape: BlobShape::Cuboid,
            size_range: [2.0, 3.0],
            class_profiles: vec![],
            nested_instances: 2,
            nested_classes: vec![3],
            seed: 2,
            ..Default::default()
        };
        let placed = layout(&spec).unwrap();
        assert_eq!(placed.len(), 5);
        for nested in &placed[3..] {
            assert_eq!(nested.class_id, 3);
            let host = placed[..3]
                .iter()
                .find(|h| dist(&h.center, &nested.center) <= spec.nest_jitter + 1e-12)
                .expect("nested instance has a host");
            assert_ne!(host.class_id, 3);
            let inner = host.half.iter().cloned().fold(f64::INFINITY, f64::min);
            assert!(nested.size <= inner * 0.5);
        }
        let scene = generate_scene(&spec).unwrap();
        assert_eq!(scene.gt_instances().unwrap().len(), 5);
    }

    #[test]
    fn infeasible_packing_fails() {
        let spec = SynthSpec {
            num_instances: 50,
            extent: [1.0, 1.0, 1.0],
            size_range: [0.5, 0.5],
            ..Default::default()
        };
        assert!(matches!(generate_scene(&spec), Err(Error::Generation(_))));
    }

    #[test]
    fn voxel_constant_scenes_share_rows_per_voxel() {
        let scene = synthesize(&small(13)).unwrap();
        let flat = make_voxel_constant(&scene, 0.05).unwrap();
        let positions: Vec<[f64; 3]> = scene.positions.iter().map(|p| p.map(|v| v as f64)).collect();
        let (grid, _) = crate::voxel::voxelize(&positions, &vec![0.0; scene.len()], 1, 0.05).unwrap();
        for v in 0..grid.num_voxels() {
            let m = grid.members(v);
            for &i in &m[1..] {
                assert_eq!(flat.score_row(i as usize), flat.score_row(m[0] as usize));
                assert_eq!(flat.offsets.as_ref().unwrap()[i as usize], flat.offsets.as_ref().unwrap()[m[0] as usize]);
            }
        }
        flat.validate().unwrap();
    }

    #[test]
    fn invalid_specs_rejected() {
        let bad = [
            SynthSpec { num_classes: 0, ..Default::default() },
            SynthSpec { points_per_instance: [5, 2], ..Default::default() },
            SynthSpec { confusion_rate: 1.5, ..Default::default() },
            SynthSpec { wrong_score_range: [0.3, 0.4], ..Default::default() },
            SynthSpec { offset_sigma: -1.0, ..Default::default() },
        ];
        for spec in bad {
            assert!(matches!(spec.validate(), Err(Error::InvalidArgument(_))), "{spec:?}");
        }
    }
}
