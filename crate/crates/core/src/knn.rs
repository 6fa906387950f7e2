//! Radius-constrained k-NN: the exhaustive pairwise baseline, the batched
//! octree search, and adjacency construction over either backend.
//!
//! Both backends return, per query, the `k` nearest points strictly closer
//! than `r`, ordered by (distance, index). Distances are computed by the
//! same expression on the same `f64` inputs, so the two outputs are
//! identical, not merely equal up to ties.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::octree::{
    auto_levels, finish_candidates, validate_query, Neighbor, Octree, QueryScratch,
    DEFAULT_LEVELS,
};
use crate::packed::{sq_dist, PackedPoints};

/// Default neighbor cap used for grouping.
pub const DEFAULT_K: usize = 32;

/// Queries processed together against one cache tile of points.
const QUERY_BLOCK: usize = 64;
/// Points per cache tile.
const TILE: usize = 2048;

/// Flattened per-query neighbor lists.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Adjacency {
    offsets: Vec<u32>,
    indices: Vec<u32>,
    distances: Vec<f64>,
}

impl Adjacency {
    fn from_lists(lists: impl IntoIterator<Item = Vec<(f64, u32)>>) -> Self {
        let mut adj = Adjacency {
            offsets: vec![0],
            ..Default::default()
        };
        for list in lists {
            adj.push(&list);
        }
        adj
    }

    fn push(&mut self, list: &[(f64, u32)]) {
        for &(d2, j) in list {
            self.indices.push(j);
            self.distances.push(d2.sqrt());
        }
        self.offsets.push(self.indices.len() as u32);
    }

    pub fn num_queries(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }

    pub fn num_edges(&self) -> usize {
        self.indices.len()
    }

    pub fn indices(&self, q: usize) -> &[u32] {
        &self.indices[self.range(q)]
    }

    pub fn distances(&self, q: usize) -> &[f64] {
        &self.distances[self.range(q)]
    }

    pub fn neighbors(&self, q: usize) -> impl Iterator<Item = Neighbor> + '_ {
        let r = self.range(q);
        self.indices[r.clone()]
            .iter()
            .zip(&self.distances[r])
            .map(|(&index, &distance)| Neighbor { index, distance })
    }

    fn range(&self, q: usize) -> std::ops::Range<usize> {
        self.offsets[q] as usize..self.offsets[q + 1] as usize
    }
}

/// How many octree levels to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OctreeLevels {
    Fixed(u32),
    /// Pick levels from the point count and search radius.
    Auto,
}

impl Default for OctreeLevels {
    fn default() -> Self {
        OctreeLevels::Fixed(DEFAULT_LEVELS)
    }
}

impl OctreeLevels {
    pub fn resolve<const D: usize>(self, points: &[[f64; D]], radius: f64) -> u32 {
        match self {
            OctreeLevels::Fixed(m) => m,
            OctreeLevels::Auto => {
                let extent = crate::scene::tight_bbox(points.iter().copied())
                    .map(|b| b.extent().iter().fold(0.0f64, |m, &e| m.max(e)))
                    .unwrap_or(0.0);
                auto_levels(points.len(), extent, radius, D as u32)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Vanilla,
    Octree(OctreeLevels),
}

impl Backend {
    pub fn octree() -> Self {
        Backend::Octree(OctreeLevels::default())
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Backend::Vanilla => f.write_str("vanilla"),
            Backend::Octree(OctreeLevels::Fixed(m)) => write!(f, "octree:{m}"),
            Backend::Octree(OctreeLevels::Auto) => f.write_str("octree:auto"),
        }
    }
}

impl FromStr for Backend {
    type Err = Error;

    /// Accepts `vanilla`, `octree`, `octree:auto` and `octree:<levels>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Backend::Vanilla),
            "octree" => Ok(Backend::octree()),
            "octree:auto" => Ok(Backend::Octree(OctreeLevels::Auto)),
            other => other
                .strip_prefix("octree:")
                .and_then(|m| m.parse().ok())
                .map(|m| Backend::Octree(OctreeLevels::Fixed(m)))
                .ok_or_else(|| Error::invalid_arg(format!("unknown k-NN backend '{s}'"))),
        }
    }
}

/// Keeps `list` bounded while candidates stream in.
#[inline]
fn push_bounded(list: &mut Vec<(f64, u32)>, item: (f64, u32), k: usize) {
    list.push(item);
    if list.len() >= 4 * k + 64 {
        finish_candidates(list, k);
    }
}

/// Exhaustive search: every query is compared against every point.
pub fn vanilla_radius_knn<const D: usize>(
    points: &[[f64; D]],
    queries: &[[f64; D]],
    k: usize,
    radius: f64,
) -> Result<Adjacency> {
    validate_query(k, radius)?;
    check_finite(points)?;
    check_finite(queries)?;
    Ok(vanilla_lists(points, queries, k, radius, false).into())
}

struct Lists(Vec<Vec<(f64, u32)>>);

impl From<Lists> for Adjacency {
    fn from(l: Lists) -> Self {
        Adjacency::from_lists(l.0)
    }
}

fn vanilla_lists<const D: usize>(
    points: &[[f64; D]],
    queries: &[[f64; D]],
    k: usize,
    radius: f64,
    exclude_self: bool,
) -> Lists {
    let packed = PackedPoints::new(points);
    let r2 = radius * radius;
    let lists = queries
        .par_chunks(QUERY_BLOCK)
        .enumerate()
        .flat_map_iter(|(qb, chunk)| {
            let q0 = qb * QUERY_BLOCK;
            let pqs: Vec<_> = chunk.iter().map(|q| packed.query(q, radius)).collect();
            let mut lists = vec![Vec::new(); chunk.len()];
            for tile in (0..points.len()).step_by(TILE) {
                let range = tile..(tile + TILE).min(points.len());
                for (qi, q) in chunk.iter().enumerate() {
                    let qidx = (q0 + qi) as u32;
                    let list = &mut lists[qi];
                    packed.scan(range.clone(), &pqs[qi], |j| {
                        let d2 = sq_dist(&points[j], q);
                        if d2 < r2 && !(exclude_self && j as u32 == qidx) {
                            push_bounded(list, (d2, j as u32), k);
                        }
                    });
                }
            }
            for l in &mut lists {
                finish_candidates(l, k);
            }
            lists
        })
        .collect();
    Lists(lists)
}

/// Exhaustive self-join that evaluates each unordered pair once and credits
/// both endpoints.
fn vanilla_self_join<const D: usize>(points: &[[f64; D]], k: usize, radius: f64) -> Lists {
    let n = points.len();
    let packed = PackedPoints::new(points);
    let r2 = radius * radius;
    let mut lists: Vec<Vec<(f64, u32)>> = vec![Vec::new(); n];
    for r0 in (0..n).step_by(QUERY_BLOCK) {
        let r1 = (r0 + QUERY_BLOCK).min(n);
        let pqs: Vec<_> = points[r0..r1].iter().map(|q| packed.query(q, radius)).collect();
        for tile in (r0..n).step_by(TILE) {
            let tile_end = (tile + TILE).min(n);
            for i in r0..r1 {
                let pq = &pqs[i - r0];
                let range = tile.max(i + 1)..tile_end;
                let mut hits = std::mem::take(&mut lists[i]);
                packed.scan(range, pq, |j| {
                    let d2 = sq_dist(&points[j], &points[i]);
                    if d2 < r2 {
                        push_bounded(&mut hits, (d2, j as u32), k);
                        push_bounded(&mut lists[j], (d2, i as u32), k);
                    }
                });
                lists[i] = hits;
            }
        }
    }
    lists.par_iter_mut().for_each(|l| finish_candidates(l, k));
    Lists(lists)
}

/// One octree search per query; queries run in parallel and results are
/// written in query order.
pub fn batch_octree_knn<const D: usize>(
    tree: &Octree<D>,
    queries: &[[f64; D]],
    k: usize,
    radius: f64,
) -> Result<Adjacency> {
    validate_query(k, radius)?;
    check_finite(queries)?;
    Ok(octree_lists(tree, queries, k, radius, false).into())
}

fn octree_lists<const D: usize>(
    tree: &Octree<D>,
    queries: &[[f64; D]],
    k: usize,
    radius: f64,
    exclude_self: bool,
) -> Lists {
    let order = tree.locality_order(queries);
    let computed: Vec<Vec<(f64, u32)>> = order
        .par_iter()
        .map_init(QueryScratch::default, |scratch, &qi| {
            let exclude = exclude_self.then_some(qi);
            tree.radius_knn_with(&queries[qi as usize], k, radius, exclude, scratch);
            Octree::candidates(scratch).to_vec()
        })
        .collect();
    let mut lists = vec![Vec::new(); queries.len()];
    for (&qi, list) in order.iter().zip(computed) {
        lists[qi as usize] = list;
    }
    Lists(lists)
}

/// Neighbor lists of every point against the rest of the set (self
/// excluded).
pub fn build_adjacency<const D: usize>(
    points: &[[f64; D]],
    k: usize,
    radius: f64,
    backend: Backend,
) -> Result<Adjacency> {
    validate_query(k, radius)?;
    check_finite(points)?;
    let lists = match backend {
        Backend::Vanilla if rayon::current_num_threads() > 1 => {
            vanilla_lists(points, points, k, radius, true)
        }
        Backend::Vanilla => vanilla_self_join(points, k, radius),
        Backend::Octree(levels) => {
            let tree = Octree::build(points, levels.resolve(points, radius))?;
            octree_lists(&tree, points, k, radius, true)
        }
    };
    Ok(lists.into())
}

fn check_finite<const D: usize>(points: &[[f64; D]]) -> Result<()> {
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid_data("non-finite coordinate"));
    }
    if u32::try_from(points.len()).is_err() {
        return Err(Error::invalid_arg("more than u32::MAX points"));
    }
    Ok(())
}
