//! Scene data: point positions plus the per-point predictions that the
//! grouping stage consumes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Label value for points without a semantic class.
pub const IGNORE_LABEL: i32 = -1;
/// Instance id for points that belong to no instance.
pub const NO_INSTANCE: i32 = -1;

pub type Point3 = [f32; 3];

/// A point cloud with an `N x C` score matrix and per-point offsets towards
/// instance centers.
///
/// Scores are stored row-major (`scores[i * C + c]`). Rows are not required
/// to sum to one; only the `[0, 1]` bound on each entry is enforced.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Scene {
    pub positions: Vec<Point3>,
    pub colors: Option<Vec<[f32; 3]>>,
    pub num_classes: usize,
    pub scores: Option<Vec<f32>>,
    pub offsets: Option<Vec<Point3>>,
    pub gt_semantic: Option<Vec<i32>>,
    pub gt_instance: Option<Vec<i32>>,
}

impl Scene {
    pub fn new(positions: Vec<Point3>, num_classes: usize) -> Self {
        Scene {
            positions,
            num_classes,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Score row of point `i`. Panics if the scene has no scores.
    pub fn score_row(&self, i: usize) -> &[f32] {
        let c = self.num_classes;
        &self.scores.as_ref().expect("scene has no scores")[i * c..(i + 1) * c]
    }

    pub fn score(&self, i: usize, class: usize) -> f32 {
        self.score_row(i)[class]
    }

    /// Index of the highest-scoring class per point, ties to the lowest id.
    pub fn argmax_labels(&self) -> Result<Vec<i32>> {
        let scores = self
            .scores
            .as_ref()
            .ok_or_else(|| Error::invalid_data("scene has no semantic scores"))?;
        if self.num_classes == 0 {
            return Ok(vec![IGNORE_LABEL; self.len()]);
        }
        Ok(scores
            .chunks_exact(self.num_classes)
            .map(|row| argmax(row) as i32)
            .collect())
    }

    /// Checks every invariant of the scene: array lengths, finiteness and the
    /// score range.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.positions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid_data("non-finite position"));
        }
        if let Some(colors) = &self.colors {
            if colors.len() != n {
                return Err(Error::invalid_data(format!(
                    "colors has {} rows, expected {n}",
                    colors.len()
                )));
            }
        }
        if let Some(scores) = &self.scores {
            if scores.len() != n * self.num_classes {
                return Err(Error::invalid_data(format!(
                    "scores has {} entries, expected {n} x {}",
                    scores.len(),
                    self.num_classes
                )));
            }
            if let Some(bad) = scores.iter().position(|s| !(0.0..=1.0).contains(s)) {
                return Err(Error::invalid_data(format!(
                    "score entry {bad} = {} outside [0, 1]",
                    scores[bad]
                )));
            }
        }
        if let Some(offsets) = &self.offsets {
            if offsets.len() != n {
                return Err(Error::invalid_data(format!(
                    "offsets has {} rows, expected {n}",
                    offsets.len()
                )));
            }
            if offsets.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::invalid_data("non-finite offset"));
            }
        }
        for (name, labels) in [
            ("gt_semantic", &self.gt_semantic),
            ("gt_instance", &self.gt_instance),
        ] {
            if let Some(labels) = labels {
                if labels.len() != n {
                    return Err(Error::invalid_data(format!(
                        "{name} has {} entries, expected {n}",
                        labels.len()
                    )));
                }
                if labels.iter().any(|&l| l < -1) {
                    return Err(Error::invalid_data(format!("{name} contains ids below -1")));
                }
            }
        }
        if let Some(sem) = &self.gt_semantic {
            if sem.iter().any(|&l| l >= self.num_classes as i32) {
                return Err(Error::invalid_data("gt_semantic class id out of range"));
            }
        }
        Ok(())
    }

    /// Ground-truth instances as (class, sorted member indices), ordered by
    /// instance id. Points whose semantic label is ignored are skipped.
    pub fn gt_instances(&self) -> Result<Vec<GtInstance>> {
        let (sem, inst) = match (&self.gt_semantic, &self.gt_instance) {
            (Some(s), Some(i)) => (s, i),
            _ => return Err(Error::invalid_data("scene has no ground truth")),
        };
        let mut by_id: std::collections::BTreeMap<i32, GtInstance> = Default::default();
        for (i, (&s, &id)) in sem.iter().zip(inst).enumerate() {
            if id == NO_INSTANCE || s == IGNORE_LABEL {
                continue;
            }
            let entry = by_id.entry(id).or_insert_with(|| GtInstance {
                id,
                class_id: s as u32,
                members: Vec::new(),
            });
            entry.members.push(i as u32);
        }
        Ok(by_id.into_values().collect())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GtInstance {
    pub id: i32,
    pub class_id: u32,
    pub members: Vec<u32>,
}

pub(crate) fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (c, &s) in row.iter().enumerate().skip(1) {
        if s > row[best] {
            best = c;
        }
    }
    best
}

/// Axis-aligned box, `min <= max` componentwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb<const D: usize> {
    #[serde(with = "serde_arrays")]
    pub min: [f64; D],
    #[serde(with = "serde_arrays")]
    pub max: [f64; D],
}

impl<const D: usize> Aabb<D> {
    pub fn new(min: [f64; D], max: [f64; D]) -> Self {
        debug_assert!((0..D).all(|a| min[a] <= max[a]));
        Aabb { min, max }
    }

    pub fn center(&self) -> [f64; D] {
        std::array::from_fn(|a| 0.5 * (self.min[a] + self.max[a]))
    }

    pub fn extent(&self) -> [f64; D] {
        std::array::from_fn(|a| self.max[a] - self.min[a])
    }

    pub fn contains(&self, p: &[f64; D]) -> bool {
        (0..D).all(|a| self.min[a] <= p[a] && p[a] <= self.max[a])
    }

    pub fn volume(&self) -> f64 {
        self.extent().iter().product()
    }

    /// Squared distance from `p` to the closest point of the box; zero inside.
    pub fn sq_distance_to(&self, p: &[f64; D]) -> f64 {
        let mut d2 = 0.0;
        for a in 0..D {
            let c = p[a].clamp(self.min[a], self.max[a]);
            let d = p[a] - c;
            d2 += d * d;
        }
        d2
    }

    pub fn intersection(&self, other: &Self) -> Option<Self> {
        let min: [f64; D] = std::array::from_fn(|a| self.min[a].max(other.min[a]));
        let max: [f64; D] = std::array::from_fn(|a| self.max[a].min(other.max[a]));
        (0..D).all(|a| min[a] <= max[a]).then_some(Aabb { min, max })
    }

    /// Volume-based IoU; two degenerate boxes have IoU 0.
    pub fn iou(&self, other: &Self) -> f64 {
        let inter = self.intersection(other).map_or(0.0, |b| b.volume());
        let union = self.volume() + other.volume() - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }
}

mod serde_arrays {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer, const D: usize>(v: &[f64; D], s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, De: Deserializer<'de>, const D: usize>(
        d: De,
    ) -> Result<[f64; D], De::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        v.try_into()
            .map_err(|v: Vec<f64>| serde::de::Error::invalid_length(v.len(), &"fixed-size array"))
    }
}

/// Componentwise min/max of a point subset.
pub fn tight_bbox<const D: usize>(points: impl IntoIterator<Item = [f64; D]>) -> Result<Aabb<D>> {
    let mut it = points.into_iter();
    let first = it.next().ok_or(Error::EmptyInput("bounding box of an empty point set"))?;
    let (mut min, mut max) = (first, first);
    for p in it {
        for a in 0..D {
            min[a] = min[a].min(p[a]);
            max[a] = max[a].max(p[a]);
        }
    }
    Ok(Aabb { min, max })
}

pub(crate) fn to_f64(p: &Point3) -> [f64; 3] {
    [p[0] as f64, p[1] as f64, p[2] as f64]
}
