//! Built-in consistency checks: octree index arithmetic against an explicit
//! breadth-first numbering, and octree search against exhaustive search on
//! randomized point sets.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::knn::{batch_octree_knn, vanilla_radius_knn, Adjacency};
use crate::octree::{child_index, data_index, first_leaf, node_count, Octree, MAX_LEAVES, MAX_LEVELS};

/// Outcome of one check.
#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

/// Deepest tree the library builds for `dim`.
pub fn max_levels(dim: u32) -> u32 {
    (1..=MAX_LEVELS)
        .take_while(|&m| 1usize.checked_shl(m * dim).is_some_and(|l| l <= MAX_LEAVES))
        .last()
        .unwrap_or(1)
}

/// Compares `child_index` and `data_index` with a numbering that hands out
/// ids to children in queue order, for every depth the library builds.
pub fn check_index_arithmetic(dims: &[u32]) -> Result<usize, String> {
    let mut checked = 0usize;
    for &dim in dims {
        let fan = 1usize << dim;
        for levels in 1..=max_levels(dim) {
            let internal = first_leaf(dim, levels);
            let total = node_count(dim, levels);
            // queue order equals id order, so the next id handed out is a counter
            let mut next = 1usize;
            for i in 0..internal {
                for j in 1..=fan {
                    let got = child_index(i, j, dim).map_err(|e| e.to_string())?;
                    if got != next {
                        return Err(format!(
                            "d={dim} M={levels}: child {j} of node {i} is {got}, enumeration gives {next}"
                        ));
                    }
                    next += 1;
                }
            }
            if next != total {
                return Err(format!("d={dim} M={levels}: enumerated {next} nodes, expected {total}"));
            }
            for (slot, i) in (internal..total).enumerate() {
                let got = data_index(i, levels, dim).map_err(|e| e.to_string())?;
                if got != slot {
                    return Err(format!("d={dim} M={levels}: leaf {i} maps to {got}, expected {slot}"));
                }
            }
            if data_index(internal.wrapping_sub(1), levels, dim).is_ok() || data_index(total, levels, dim).is_ok() {
                return Err(format!("d={dim} M={levels}: non-leaf accepted by data_index"));
            }
            checked += total;
        }
    }
    Ok(checked)
}

/// The two-level quadtree example: node 1 has children 5..=8 and the leaves
/// 5..=20 map to data slots 0..=15.
pub fn check_quadtree_example() -> Result<(), String> {
    let children: Vec<usize> = (1..=4).map(|j| child_index(1, j, 2).unwrap()).collect();
    if children != [5, 6, 7, 8] {
        return Err(format!("children of node 1 are {children:?}"));
    }
    let slots: Vec<usize> = (5..=20).map(|i| data_index(i, 2, 2).unwrap()).collect();
    if slots != (0..16).collect::<Vec<_>>() || first_leaf(2, 2) != 5 {
        return Err(format!("leaf slots are {slots:?}"));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    Uniform,
    Clustered,
    Collinear,
}

pub const LAYOUTS: [Layout; 3] = [Layout::Uniform, Layout::Clustered, Layout::Collinear];

/// One randomized equivalence case.
#[derive(Debug, Clone, Serialize)]
pub struct OracleCase {
    pub layout: Layout,
    pub dim: u32,
    pub levels: u32,
    pub num_points: usize,
    pub k: usize,
    pub radius: f64,
}

fn sample_points<const D: usize>(rng: &mut ChaCha8Rng, layout: Layout, n: usize) -> Vec<[f64; D]> {
    match layout {
        Layout::Uniform => (0..n)
            .map(|_| std::array::from_fn(|_| rng.random_range(0.0..1.0)))
            .collect(),
        Layout::Clustered => {
            let centers: Vec<[f64; D]> = (0..rng.random_range(1..6))
                .map(|_| std::array::from_fn(|_| rng.random_range(0.0..1.0)))
                .collect();
            (0..n)
                .map(|_| {
                    let c = centers[rng.random_range(0..centers.len())];
                    std::array::from_fn(|a| c[a] + rng.random_range(-0.03..0.03))
                })
                .collect()
        }
        Layout::Collinear => {
            let dir: [f64; D] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let origin: [f64; D] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
            // snapped parameters give exact duplicates and equal distances
            (0..n)
                .map(|_| {
                    let t = (rng.random_range(0.0..1.0f64) * 512.0).floor() / 512.0;
                    std::array::from_fn(|a| origin[a] + t * dir[a])
                })
                .collect()
        }
    }
}

fn compare(a: &Adjacency, b: &Adjacency) -> Result<(), String> {
    if a.num_queries() != b.num_queries() {
        return Err("query counts differ".into());
    }
    for q in 0..a.num_queries() {
        if a.indices(q) != b.indices(q) {
            return Err(format!("query {q}: {:?} vs {:?}", a.indices(q), b.indices(q)));
        }
        let worst = a
            .distances(q)
            .iter()
            .zip(b.distances(q))
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        if worst > 1e-9 {
            return Err(format!("query {q}: distance difference {worst:e}"));
        }
    }
    Ok(())
}

fn run_case<const D: usize>(rng: &mut ChaCha8Rng, case: &OracleCase) -> Result<(), String> {
    let points: Vec<[f64; D]> = sample_points(rng, case.layout, case.num_points);
    let mut queries = points.clone();
    queries.extend(sample_points::<D>(rng, Layout::Uniform, 20));
    let tree = Octree::build(&points, case.levels).map_err(|e| e.to_string())?;
    let fast = batch_octree_knn(&tree, &queries, case.k, case.radius).map_err(|e| e.to_string())?;
    let slow = vanilla_radius_knn(&points, &queries, case.k, case.radius).map_err(|e| e.to_string())?;
    compare(&fast, &slow)
}

/// Summary of an equivalence sweep.
#[derive(Debug, Clone, Serialize)]
pub struct OracleSweep {
    pub cases: usize,
    pub failures: Vec<String>,
}

/// Runs `cases` randomized scenes cycling through every layout, dimension
/// in {2, 3} and depth in {1, 2, 3}.
pub fn oracle_sweep(cases: usize, max_points: usize, seed: u64) -> OracleSweep {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = Vec::new();
    for i in 0..cases {
        let case = OracleCase {
            layout: LAYOUTS[i % 3],
            dim: 2 + (i / 3 % 2) as u32,
            levels: 1 + (i / 6 % 3) as u32,
            num_points: rng.random_range(1..=max_points.max(1)),
            k: rng.random_range(1..=64),
            radius: rng.random_range(0.005..0.2),
        };
        let result = match case.dim {
            2 => run_case::<2>(&mut rng, &case),
            _ => run_case::<3>(&mut rng, &case),
        };
        if let Err(e) = result {
            failures.push(format!("{case:?}: {e}"));
        }
    }
    OracleSweep {
        cases,
        failures,
    }
}

fn timed(name: &str, f: impl FnOnce() -> Result<String, String>) -> Check {
    let start = Instant::now();
    let (passed, detail) = match f() {
        Ok(d) => (true, d),
        Err(e) => (false, e),
    };
    Check {
        name: name.to_string(),
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Every built-in check; `cases` sets the size of the randomized sweep.
pub fn run_all(cases: usize, seed: u64) -> Vec<Check> {
    vec![
        timed("index_arithmetic", || {
            check_index_arithmetic(&[2, 3]).map(|n| format!("{n} nodes checked for d in {{2, 3}}"))
        }),
        timed("quadtree_example", || check_quadtree_example().map(|_| "ok".into())),
        timed("octree_vs_exhaustive", || {
            let sweep = oracle_sweep(cases, 2000, seed);
            match sweep.failures.first() {
                None => Ok(format!("{} randomized scenes identical", sweep.cases)),
                Some(f) => Err(format!("{} of {} scenes differ; first: {f}", sweep.failures.len(), sweep.cases)),
            }
        }),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deepest_levels() {
        assert_eq!(max_levels(2), 10);
        assert_eq!(max_levels(3), 8);
    }

    #[test]
    fn arithmetic_checks_pass() {
        assert!(check_index_arithmetic(&[2]).unwrap() > 1 << 20);
        check_quadtree_example().unwrap();
    }

    #[test]
    fn small_sweep_is_clean() {
        let sweep = oracle_sweep(18, 300, 5);
        assert!(sweep.failures.is_empty(), "{:?}", sweep.failures);
        assert!(run_all(6, 1).iter().all(|c| c.passed));
    }
}
