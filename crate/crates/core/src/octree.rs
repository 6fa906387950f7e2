//! Full 2^d-ary tree with breadth-first node numbering.
//!
//! Nodes are numbered level by level starting at the root (index 0), so the
//! `j`-th child of node `i` is `i * 2^d + j` and the leaves occupy the last
//! `2^(dM)` indices. Nothing about the tree shape is stored: every node box
//! is recovered by halving the root box along the path encoded in its index.
//!
//! Child ordinal `j` (1-based) maps to an orthant through the bits of
//! `j - 1`: bit `a` set means the upper half along axis `a`. Points lying
//! exactly on a splitting plane go to the upper half.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::packed::{sq_dist, PackedPoints};
use crate::scene::Aabb;

pub const DEFAULT_LEVELS: u32 = 3;
pub const MAX_LEVELS: u32 = 10;
/// Upper bound on `2^(dM)`; deeper full trees do not fit in memory.
pub const MAX_LEAVES: usize = 1 << 24;

/// Relative padding applied to the tight box so boundary points sit inside.
const ROOT_PAD: f64 = 1e-9;

/// Number of nodes in a full tree with `levels` levels below the root.
pub fn node_count(dim: u32, levels: u32) -> usize {
    (0..=levels).map(|m| 1usize << (m * dim)).sum()
}

/// Index of the first leaf, i.e. the number of internal nodes.
pub fn first_leaf(dim: u32, levels: u32) -> usize {
    (0..levels).map(|m| 1usize << (m * dim)).sum()
}

/// Index of the `j`-th child (`1 <= j <= 2^d`) of node `i`.
pub fn child_index(i: usize, j: usize, dim: u32) -> Result<usize> {
    let fanout = 1usize << dim;
    if j == 0 || j > fanout {
        return Err(Error::invalid_arg(format!(
            "child ordinal {j} outside 1..={fanout}"
        )));
    }
    Ok(i * fanout + j)
}

/// Position of leaf node `i` within the leaf storage.
pub fn data_index(i: usize, levels: u32, dim: u32) -> Result<usize> {
    let lo = first_leaf(dim, levels);
    let hi = node_count(dim, levels);
    if i < lo || i >= hi {
        return Err(Error::invalid_arg(format!(
            "node {i} is not a leaf (leaves are {lo}..{hi})"
        )));
    }
    Ok(i - lo)
}

/// Closed sphere/box test: true iff the box point closest to `center` is
/// within `radius`. Touching counts as intersecting.
pub fn sphere_box_intersects<const D: usize>(bx: &Aabb<D>, center: &[f64; D], radius: f64) -> bool {
    bx.sq_distance_to(center) <= radius * radius
}

fn child_box<const D: usize>(parent: &Aabb<D>, ordinal: usize) -> Aabb<D> {
    let mut b = *parent;
    for a in 0..D {
        let mid = 0.5 * (parent.min[a] + parent.max[a]);
        if ordinal >> a & 1 == 1 {
            b.min[a] = mid;
        } else {
            b.max[a] = mid;
        }
    }
    b
}

/// Node reached by descending `levels` times from `root` towards `p`.
/// Points outside the root end in the nearest boundary leaf.
fn descend<const D: usize>(root: &Aabb<D>, levels: u32, p: &[f64; D]) -> usize {
    let mut node = 0usize;
    let mut b = *root;
    for _ in 0..levels {
        let mut ordinal = 0;
        for a in 0..D {
            if p[a] >= 0.5 * (b.min[a] + b.max[a]) {
                ordinal |= 1 << a;
            }
        }
        b = child_box(&b, ordinal);
        node = node * (1 << D) + ordinal + 1;
    }
    node
}

/// Level count that makes leaves roughly `radius` wide, capped so leaves hold
/// a couple of points on average and the full tree stays within
/// [`MAX_LEAVES`].
pub fn auto_levels(num_points: usize, max_extent: f64, radius: f64, dim: u32) -> u32 {
    let depth_cap = (MAX_LEAVES.trailing_zeros() / dim).min(MAX_LEVELS);
    let by_size = if radius > 0.0 && max_extent > radius {
        (max_extent / radius).log2().ceil() as u32
    } else {
        1
    };
    let by_count = ((num_points / 2).max(1) as f64).log2() / dim as f64;
    by_size.min(by_count.floor() as u32).clamp(1, depth_cap)
}

/// A neighbor returned by a radius k-NN query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: u32,
    pub distance: f64,
}

/// Orders `(squared distance, index)` candidates and keeps the first `k`.
pub(crate) fn finish_candidates(cands: &mut Vec<(f64, u32)>, k: usize) {
    let cmp = |a: &(f64, u32), b: &(f64, u32)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if cands.len() > k {
        cands.select_nth_unstable_by(k - 1, cmp);
        cands.truncate(k);
    }
    cands.sort_unstable_by(cmp);
}

/// Reusable per-query buffers.
#[derive(Debug)]
pub struct QueryScratch<const D: usize> {
    queue: VecDeque<(usize, Aabb<D>)>,
    candidates: Vec<(f64, u32)>,
}

impl<const D: usize> Default for QueryScratch<D> {
    fn default() -> Self {
        QueryScratch {
            queue: VecDeque::new(),
            candidates: Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Octree<const D: usize> {
    levels: u32,
    root: Aabb<D>,
    /// CSR offsets per leaf (by data index), length `leaves + 1`.
    leaf_start: Vec<u32>,
    /// Original point indices in leaf order, ascending within a leaf.
    leaf_points: Vec<u32>,
    positions: Vec<[f64; D]>,
    packed: PackedPoints<D>,
    /// Point count of every internal node's subtree.
    subtree_count: Vec<u32>,
}

impl<const D: usize> Octree<D> {
    const DIM: u32 = D as u32;
    const FANOUT: usize = 1 << D;

    pub fn build(points: &[[f64; D]], levels: u32) -> Result<Self> {
        if !(D == 2 || D == 3) {
            return Err(Error::invalid_arg(format!("dimension {D} not in {{2, 3}}")));
        }
        if !(1..=MAX_LEVELS).contains(&levels) {
            return Err(Error::invalid_arg(format!(
                "tree levels {levels} outside 1..={MAX_LEVELS}"
            )));
        }
        let leaves = 1usize.checked_shl(Self::DIM * levels).unwrap_or(usize::MAX);
        if leaves > MAX_LEAVES {
            return Err(Error::invalid_arg(format!(
                "{levels} levels in {D}D needs {leaves} leaves, limit is {MAX_LEAVES}"
            )));
        }
        if u32::try_from(points.len()).is_err() {
            return Err(Error::invalid_arg("more than u32::MAX points"));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid_data("non-finite point coordinate"));
        }

        let root = match crate::scene::tight_bbox(points.iter().copied()) {
            Ok(tight) => {
                let scale = (0..D)
                    .map(|a| tight.max[a] - tight.min[a])
                    .chain(tight.min.iter().chain(&tight.max).map(|v| v.abs()))
                    .fold(f64::MIN_POSITIVE, f64::max);
                let pad = ROOT_PAD * scale;
                Aabb::new(tight.min.map(|v| v - pad), tight.max.map(|v| v + pad))
            }
            Err(_) => Aabb::new([0.0; D], [0.0; D]),
        };

        let first = first_leaf(Self::DIM, levels);
        let leaf_of: Vec<u32> = points
            .iter()
            .map(|p| (descend(&root, levels, p) - first) as u32)
            .collect();

        let mut leaf_start = vec![0u32; leaves + 1];
        for &l in &leaf_of {
            leaf_start[l as usize + 1] += 1;
        }
        for l in 0..leaves {
            leaf_start[l + 1] += leaf_start[l];
        }
        let mut cursor = leaf_start.clone();
        let mut leaf_points = vec![0u32; points.len()];
        for (i, &l) in leaf_of.iter().enumerate() {
            let slot = &mut cursor[l as usize];
            leaf_points[*slot as usize] = i as u32;
            *slot += 1;
        }
        let positions: Vec<[f64; D]> = leaf_points.iter().map(|&i| points[i as usize]).collect();
        let packed = PackedPoints::new(&positions);

        let mut tree = Octree {
            levels,
            root,
            leaf_start,
            leaf_points,
            positions,
            packed,
            subtree_count: vec![0; first],
        };
        for i in (0..first).rev() {
            let total: u32 = (1..=Self::FANOUT)
                .map(|j| tree.points_below(i * Self::FANOUT + j))
                .sum();
            tree.subtree_count[i] = total;
        }
        Ok(tree)
    }

    pub fn dim(&self) -> u32 {
        Self::DIM
    }

    pub fn levels(&self) -> u32 {
        self.levels
    }

    pub fn root_box(&self) -> &Aabb<D> {
        &self.root
    }

    pub fn num_points(&self) -> usize {
        self.leaf_points.len()
    }

    pub fn node_count(&self) -> usize {
        node_count(Self::DIM, self.levels)
    }

    pub fn leaf_count(&self) -> usize {
        self.leaf_start.len() - 1
    }

    pub fn first_leaf(&self) -> usize {
        self.subtree_count.len()
    }

    pub fn is_leaf(&self, node: usize) -> bool {
        node >= self.first_leaf()
    }

    /// Original indices of the points stored in the leaf with data index `slot`.
    pub fn leaf_bucket(&self, slot: usize) -> &[u32] {
        &self.leaf_points[self.leaf_range(slot)]
    }

    fn leaf_range(&self, slot: usize) -> std::ops::Range<usize> {
        self.leaf_start[slot] as usize..self.leaf_start[slot + 1] as usize
    }

    fn points_below(&self, node: usize) -> u32 {
        if self.is_leaf(node) {
            let slot = node - self.first_leaf();
            self.leaf_start[slot + 1] - self.leaf_start[slot]
        } else {
            self.subtree_count[node]
        }
    }

    /// Box of node `i`, recovered from the child ordinals encoded in `i`.
    pub fn node_box(&self, node: usize) -> Result<Aabb<D>> {
        if node >= self.node_count() {
            return Err(Error::invalid_arg(format!(
                "node {node} out of range 0..{}",
                self.node_count()
            )));
        }
        let mut path = Vec::with_capacity(self.levels as usize);
        let mut i = node;
        while i > 0 {
            path.push((i - 1) % Self::FANOUT);
            i = (i - 1) / Self::FANOUT;
        }
        Ok(path.iter().rev().fold(self.root, |b, &o| child_box(&b, o)))
    }

    /// Breadth-first traversal: dequeues a node, and if its box meets the
    /// query sphere either enqueues all of its children or reports the leaf.
    /// Subtrees without points are skipped; they cannot contribute
    /// candidates. Returns the number of dequeued nodes.
    pub fn for_each_candidate_leaf(
        &self,
        q: &[f64; D],
        radius: f64,
        queue: &mut VecDeque<(usize, Aabb<D>)>,
        mut visit: impl FnMut(usize),
    ) -> usize {
        queue.clear();
        queue.push_back((0, self.root));
        let first = self.first_leaf();
        let mut dequeued = 0;
        while let Some((node, bx)) = queue.pop_front() {
            dequeued += 1;
            if self.points_below(node) == 0 || !sphere_box_intersects(&bx, q, radius) {
                continue;
            }
            if node < first {
                for ordinal in 0..Self::FANOUT {
                    queue.push_back((node * Self::FANOUT + ordinal + 1, child_box(&bx, ordinal)));
                }
            } else {
                visit(node - first);
            }
        }
        dequeued
    }

    /// Query indices sorted by the leaf each query falls into, so that
    /// consecutive queries touch the same stored points.
    pub fn locality_order(&self, queries: &[[f64; D]]) -> Vec<u32> {
        let mut keyed: Vec<(u32, u32)> = queries
            .iter()
            .enumerate()
            .map(|(i, q)| (descend(&self.root, self.levels, q) as u32, i as u32))
            .collect();
        keyed.sort_unstable();
        keyed.into_iter().map(|(_, i)| i).collect()
    }

    /// Node indices of the non-empty leaves whose boxes meet the sphere.
    pub fn candidate_leaves(&self, q: &[f64; D], radius: f64) -> Vec<usize> {
        let mut out = Vec::new();
        let first = self.first_leaf();
        self.for_each_candidate_leaf(q, radius, &mut VecDeque::new(), |slot| out.push(first + slot));
        out
    }

    /// Up to `k` points strictly closer than `radius` to `q`, ordered by
    /// (distance, index).
    pub fn radius_knn(&self, q: &[f64; D], k: usize, radius: f64) -> Result<Vec<Neighbor>> {
        validate_query(k, radius)?;
        let mut scratch = QueryScratch::default();
        self.radius_knn_with(q, k, radius, None, &mut scratch);
        Ok(to_neighbors(&scratch.candidates))
    }

    /// Allocation-free core of [`Octree::radius_knn`]; the result is left in
    /// `scratch.candidates` as `(squared distance, index)` pairs.
    pub(crate) fn radius_knn_with(
        &self,
        q: &[f64; D],
        k: usize,
        radius: f64,
        exclude: Option<u32>,
        scratch: &mut QueryScratch<D>,
    ) {
        let QueryScratch { queue, candidates } = scratch;
        candidates.clear();
        let r2 = radius * radius;
        let pq = self.packed.query(q, radius);
        self.for_each_candidate_leaf(q, radius, queue, |slot| {
            self.packed.scan(self.leaf_range(slot), &pq, |pos| {
                let d2 = sq_dist(&self.positions[pos], q);
                let idx = self.leaf_points[pos];
                if d2 < r2 && Some(idx) != exclude {
                    candidates.push((d2, idx));
                }
            });
        });
        finish_candidates(candidates, k);
    }

    pub(crate) fn candidates(scratch: &QueryScratch<D>) -> &[(f64, u32)] {
        &scratch.candidates
    }
}

pub(crate) fn validate_query(k: usize, radius: f64) -> Result<()> {
    if k == 0 {
        return Err(Error::invalid_arg("k must be at least 1"));
    }
    if !(radius > 0.0) {
        return Err(Error::invalid_arg(format!("radius must be positive, got {radius}")));
    }
    Ok(())
}

pub(crate) fn to_neighbors(cands: &[(f64, u32)]) -> Vec<Neighbor> {
    cands
        .iter()
        .map(|&(d2, index)| Neighbor {
            index,
            distance: d2.sqrt(),
        })
        .collect()
}
