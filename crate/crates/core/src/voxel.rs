//! Voxelization with a stored inverse map, and broadcasting back to points.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Lattice quantization of a point set.
///
/// Voxels are ordered lexicographically by their integer key and the
/// members of every voxel are sorted ascending, so the grid is a pure
/// function of its input.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub voxel_size: f64,
    pub voxel_keys: Vec<[i64; 3]>,
    pub point_to_voxel: Vec<u32>,
    /// CSR offsets into `voxel_points`, length `M + 1`.
    pub voxel_start: Vec<u32>,
    pub voxel_points: Vec<u32>,
    pub voxel_centroids: Vec<[f64; 3]>,
}

impl VoxelGrid {
    pub fn num_voxels(&self) -> usize {
        self.voxel_keys.len()
    }

    pub fn num_points(&self) -> usize {
        self.point_to_voxel.len()
    }

    pub fn members(&self, v: usize) -> &[u32] {
        &self.voxel_points[self.voxel_start[v] as usize..self.voxel_start[v + 1] as usize]
    }

    pub fn member_count(&self, v: usize) -> usize {
        (self.voxel_start[v + 1] - self.voxel_start[v]) as usize
    }

    /// Ratio between voxel count and point count (0 for an empty grid).
    pub fn occupancy_ratio(&self) -> f64 {
        if self.num_points() == 0 {
            0.0
        } else {
            self.num_voxels() as f64 / self.num_points() as f64
        }
    }
}

/// Lattice key of a position: `floor(p / size)` per axis.
pub fn voxel_key(p: &[f64; 3], voxel_size: f64) -> [i64; 3] {
    std::array::from_fn(|a| (p[a] / voxel_size).floor() as i64)
}

/// Quantizes `positions` onto a cubic lattice and mean-pools `features`
/// (row-major, `dim` values per point) into each voxel.
pub fn voxelize(
    positions: &[[f64; 3]],
    features: &[f64],
    dim: usize,
    voxel_size: f64,
) -> Result<(VoxelGrid, Vec<f64>)> {
    if !(voxel_size > 0.0 && voxel_size.is_finite()) {
        return Err(Error::invalid_arg(format!(
            "voxel size must be positive, got {voxel_size}"
        )));
    }
    let n = positions.len();
    if features.len() != n * dim {
        return Err(Error::invalid_arg(format!(
            "feature matrix has {} entries, expected {n} x {dim}",
            features.len()
        )));
    }
    if u32::try_from(n).is_err() {
        return Err(Error::invalid_arg("more than u32::MAX points"));
    }
    if features.iter().any(|f| !f.is_finite()) {
        return Err(Error::invalid_data("non-finite feature value"));
    }
    const KEY_LIMIT: f64 = (1u64 << 52) as f64;
    let mut keyed: Vec<([i64; 3], u32)> = positions
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let scaled: [f64; 3] = std::array::from_fn(|a| (p[a] / voxel_size).floor());
            if scaled.iter().any(|s| !s.is_finite() || s.abs() > KEY_LIMIT) {
                return Err(Error::invalid_data(format!(
                    "position {i} is non-finite or outside the lattice range"
                )));
            }
            Ok((scaled.map(|s| s as i64), i as u32))
        })
        .collect::<Result<_>>()?;
    keyed.par_sort_unstable();

    let mut grid = VoxelGrid {
        voxel_size,
        voxel_keys: Vec::new(),
        point_to_voxel: vec![0; n],
        voxel_start: Vec::with_capacity(n / 2 + 1),
        voxel_points: Vec::with_capacity(n),
        voxel_centroids: Vec::new(),
    };
    let mut pooled = Vec::new();
    let mut start = 0;
    while start < keyed.len() {
        let key = keyed[start].0;
        let mut end = start + 1;
        while end < keyed.len() && keyed[end].0 == key {
            end += 1;
        }
        let v = grid.voxel_keys.len() as u32;
        grid.voxel_keys.push(key);
        grid.voxel_start.push(grid.voxel_points.len() as u32);
        // Means are accumulated as deviations from the first member so that a
        // voxel of identical values pools to exactly that value.
        let first = keyed[start].1 as usize;
        let base_pos = positions[first];
        let base_feat = &features[first * dim..(first + 1) * dim];
        let mut centroid = [0.0; 3];
        let row = pooled.len();
        pooled.resize(row + dim, 0.0);
        for &(_, i) in &keyed[start..end] {
            let i = i as usize;
            grid.voxel_points.push(i as u32);
            grid.point_to_voxel[i] = v;
            for a in 0..3 {
                centroid[a] += positions[i][a] - base_pos[a];
            }
            let f = &features[i * dim..(i + 1) * dim];
            for ((acc, x), b) in pooled[row..].iter_mut().zip(f).zip(base_feat) {
                *acc += x - b;
            }
        }
        let count = (end - start) as f64;
        grid.voxel_centroids
            .push(std::array::from_fn(|a| base_pos[a] + centroid[a] / count));
        for (acc, b) in pooled[row..].iter_mut().zip(base_feat) {
            *acc = b + *acc / count;
        }
        start = end;
    }
    grid.voxel_start.push(grid.voxel_points.len() as u32);
    Ok((grid, pooled))
}

/// Broadcasts per-voxel values (`dim` per voxel) back to every member point.
pub fn devoxelize<T: Copy>(grid: &VoxelGrid, voxel_values: &[T], dim: usize) -> Result<Vec<T>> {
    if voxel_values.len() != grid.num_voxels() * dim {
        return Err(Error::invalid_arg(format!(
            "{} voxel values for {} voxels of width {dim}",
            voxel_values.len(),
            grid.num_voxels()
        )));
    }
    let mut out = Vec::with_capacity(grid.num_points() * dim);
    for &v in &grid.point_to_voxel {
        let v = v as usize;
        out.extend_from_slice(&voxel_values[v * dim..(v + 1) * dim]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn three_points() -> (Vec<[f64; 3]>, Vec<f64>) {
        (
            vec![[0.01, 0.01, 0.01], [0.015, 0.012, 0.0], [0.05, 0.0, 0.0]],
            vec![1.0, 3.0, 5.0],
        )
    }

    #[test]
    fn hand_example() {
        let (p, f) = three_points();
        let (g, vf) = voxelize(&p, &f, 1, 0.02).unwrap();
        assert_eq!(g.voxel_keys, vec![[0, 0, 0], [2, 0, 0]]);
        assert_eq!(vf, vec![2.0, 5.0]);
        assert_eq!(g.point_to_voxel, vec![0, 0, 1]);
        assert_eq!(g.members(0), &[0, 1]);
        let back = devoxelize(&g, &vf, 1).unwrap();
        assert_eq!(back, vec![2.0, 2.0, 5.0]);
    }

    #[test]
    fn empty_input() {
        let (g, vf) = voxelize(&[], &[], 4, 0.1).unwrap();
        assert_eq!(g.num_voxels(), 0);
        assert!(vf.is_empty());
        assert_eq!(g.voxel_start, vec![0]);
    }

    #[test]
    fn single_cell() {
        let p: Vec<[f64; 3]> = (0..10).map(|i| [0.001 * i as f64, 0.0, 0.0]).collect();
        let f: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let (g, vf) = voxelize(&p, &f, 1, 1.0).unwrap();
        assert_eq!(g.num_voxels(), 1);
        assert_eq!(vf, vec![4.5]);
    }

    #[test]
    fn negative_coordinates_floor() {
        let p = vec![[-0.001, 0.0, 0.0], [0.001, 0.0, 0.0]];
        let (g, _) = voxelize(&p, &[0.0, 0.0], 1, 0.02).unwrap();
        assert_eq!(g.voxel_keys, vec![[-1, 0, 0], [0, 0, 0]]);
    }

    #[test]
    fn fine_grid_is_identity() {
        let p: Vec<[f64; 3]> = (0..8).map(|i| [i as f64, 0.0, 0.0]).collect();
        let f: Vec<f64> = (0..8).map(|i| (i * i) as f64).collect();
        let (g, vf) = voxelize(&p, &f, 1, 0.5).unwrap();
        assert_eq!(g.num_voxels(), 8);
        assert_eq!(devoxelize(&g, &vf, 1).unwrap(), f);
    }

    #[test]
    fn rejects_bad_arguments() {
        let (p, f) = three_points();
        assert!(matches!(voxelize(&p, &f, 1, 0.0), Err(Error::InvalidArgument(_))));
        assert!(matches!(voxelize(&p, &f, 1, -1.0), Err(Error::InvalidArgument(_))));
        assert!(matches!(
            voxelize(&[[f64::NAN, 0.0, 0.0]], &[0.0], 1, 0.1),
            Err(Error::InvalidData(_))
        ));
        assert!(matches!(
            voxelize(&p, &[0.0, f64::INFINITY, 0.0], 1, 0.1),
            Err(Error::InvalidData(_))
        ));
        let (g, _) = voxelize(&p, &f, 1, 0.02).unwrap();
        assert!(matches!(devoxelize(&g, &[1.0], 1), Err(Error::InvalidArgument(_))));
    }

    fn cloud() -> impl Strategy<Value = Vec<[f64; 3]>> {
        prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 0..200)
    }

    proptest! {
        #[test]
        fn partition_and_mean_pool(points in cloud(), size in 0.05f64..0.8) {
            let feats: Vec<f64> = points.iter().map(|p| p[0] * 3.0 + p[2]).collect();
            let (g, vf) = voxelize(&points, &feats, 1, size).unwrap();
            prop_assert!(g.num_voxels() <= points.len());
            let mut seen = vec![false; points.len()];
            for v in 0..g.num_voxels() {
                let members = g.members(v);
                prop_assert!(!members.is_empty());
                prop_assert!(members.windows(2).all(|w| w[0] < w[1]));
                let mut sum = 0.0;
                for &i in members {
                    prop_assert!(!seen[i as usize]);
                    seen[i as usize] = true;
                    prop_assert_eq!(voxel_key(&points[i as usize], size), g.voxel_keys[v]);
                    prop_assert_eq!(g.point_to_voxel[i as usize] as usize, v);
                    sum += feats[i as usize];
                }
                let n = members.len() as f64;
                prop_assert!((vf[v] * n - sum).abs() <= 1e-6 * sum.abs().max(1.0));
            }
            prop_assert!(seen.iter().all(|&s| s));
            prop_assert!(g.voxel_keys.windows(2).all(|w| w[0] < w[1]));
        }

        #[test]
        fn roundtrip_on_per_voxel_constant_values(points in cloud(), size in 0.05f64..0.8) {
            let keyed: Vec<f64> = points
                .iter()
                .map(|p| {
                    let k = voxel_key(p, size);
                    (k[0] * 7 + k[1] * 131 + k[2] * 1031) as f64 * 0.1 + 1.0 / 3.0
                })
                .collect();
            let (g, vf) = voxelize(&points, &keyed, 1, size).unwrap();
            prop_assert_eq!(devoxelize(&g, &vf, 1).unwrap(), keyed);
        }

        #[test]
        fn deterministic(points in cloud()) {
            let f: Vec<f64> = points.iter().flat_map(|p| [p[0], p[1]]).collect();
            let a = voxelize(&points, &f, 2, 0.1).unwrap();
            let b = voxelize(&points, &f, 2, 0.1).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
