//! Benchmark workloads shared by the CLI and the acceptance suite.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::knn::{build_adjacency, Backend, DEFAULT_K};
use crate::scene::Scene;
use crate::synth::{synthesize, SynthSpec};

/// Expected neighbor count of the uniform k-NN workload.
pub const EXPECTED_NEIGHBORS: f64 = 16.0;

/// Uniform points in a cube at unit density, with the radius whose ball
/// holds `expected` points on average.
#[derive(Debug, Clone)]
pub struct UniformWorkload {
    pub points: Vec<[f64; 3]>,
    pub radius: f64,
    pub k: usize,
}

impl UniformWorkload {
    pub fn new(n: usize, expected: f64, seed: u64) -> Self {
        let side = (n as f64).cbrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points = (0..n)
            .map(|_| std::array::from_fn(|_| rng.random_range(0.0..side)))
            .collect();
        let radius = (3.0 * expected / (4.0 * std::f64::consts::PI)).cbrt();
        UniformWorkload {
            points,
            radius,
            k: DEFAULT_K,
        }
    }

    /// Wall time of one self-join and the number of edges it found.
    pub fn time(&self, backend: Backend) -> Result<(f64, usize)> {
        let start = Instant::now();
        let adj = build_adjacency(&self.points, self.k, self.radius, backend)?;
        Ok((start.elapsed().as_secs_f64(), adj.num_edges()))
    }
}

/// Synthetic scene of roughly `n` points at fixed instance density: 4000 to
/// 6000 points per instance, offsets blurred with sigma 0.1.
pub fn dense_scene_spec(n: usize, seed: u64) -> SynthSpec {
    let instances = (n / 5000).max(1);
    let side = 30.0 * (instances as f64 / 200.0).sqrt();
    SynthSpec {
        num_instances: instances,
        points_per_instance: [4000, 6000],
        extent: [side.max(4.0), side.max(4.0), 4.0],
        background_points: 0,
        offset_sigma: 0.1,
        seed,
        ..Default::default()
    }
}

pub fn dense_scene(n: usize, seed: u64) -> Result<Scene> {
    synthesize(&dense_scene_spec(n, seed))
}

/// Which scene a benchmark row was measured on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Workload {
    /// Self-join on uniform points only.
    Knn,
    /// Full pipeline on a dense synthetic scene.
    Pipeline,
}
