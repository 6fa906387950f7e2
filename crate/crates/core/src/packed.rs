//! Single-precision, structure-of-arrays copy of a point set used to
//! prefilter distance tests. Every prefilter hit is re-checked in double
//! precision by the caller, so only exact `f64` distances are ever observed.

use std::ops::Range;

/// Points tested in one vectorized pass before any per-point work.
const CHUNK: usize = 256;

#[derive(Debug, Clone)]
pub(crate) struct PackedPoints<const D: usize> {
    /// Centered coordinates per axis; axes beyond `D` stay zero.
    coords: [Vec<f32>; 3],
    origin: [f64; D],
    /// Largest centered coordinate magnitude; bounds the f32 rounding error.
    max_abs: f64,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct PackedQuery {
    coords: [f32; 3],
    r2: f32,
}

impl<const D: usize> PackedPoints<D> {
    pub fn new(points: &[[f64; D]]) -> Self {
        assert!(D <= 3, "packed points support at most three dimensions");
        let origin = match points.first() {
            Some(first) => {
                let mut lo = *first;
                let mut hi = *first;
                for p in points {
                    for a in 0..D {
                        lo[a] = lo[a].min(p[a]);
                        hi[a] = hi[a].max(p[a]);
                    }
                }
                std::array::from_fn(|a| 0.5 * (lo[a] + hi[a]))
            }
            None => [0.0; D],
        };
        let mut max_abs = 0.0f64;
        let mut coords = [
            vec![0.0f32; points.len()],
            vec![0.0f32; points.len()],
            vec![0.0f32; points.len()],
        ];
        for (i, p) in points.iter().enumerate() {
            for a in 0..D {
                let c = p[a] - origin[a];
                max_abs = max_abs.max(c.abs());
                coords[a][i] = c as f32;
            }
        }
        PackedPoints {
            coords,
            origin,
            max_abs,
        }
    }

    /// Prepares a query: its centered single-precision coordinates and a
    /// squared radius that cannot reject a point whose exact distance is
    /// below `radius`.
    pub fn query(&self, q: &[f64; D], radius: f64) -> PackedQuery {
        let centered: [f64; D] = std::array::from_fn(|a| q[a] - self.origin[a]);
        let q_abs = centered.iter().fold(0.0f64, |m, c| m.max(c.abs()));
        let slack = 4.0 * (self.max_abs + q_abs) * f32::EPSILON as f64;
        let widened = (radius + slack) * (1.0 + 1e-6);
        let r2 = widened * widened * (1.0 + 1e-6);
        // Beyond this magnitude squared f32 differences could overflow; the
        // prefilter is then disabled by an infinite radius.
        let representable = self.max_abs + q_abs < 1e18;
        let mut coords = [0.0f32; 3];
        for a in 0..D {
            coords[a] = centered[a] as f32;
        }
        PackedQuery {
            coords,
            r2: if representable && r2 < f32::MAX as f64 {
                r2 as f32
            } else {
                f32::INFINITY
            },
        }
    }

    #[inline(always)]
    fn any(&self, range: Range<usize>, q: &PackedQuery) -> bool {
        let [xs, ys, zs] = &self.coords;
        let (xs, ys, zs) = (&xs[range.clone()], &ys[range.clone()], &zs[range]);
        let [qx, qy, qz] = q.coords;
        // bitwise or keeps the loop free of overflow checks in test builds
        let mut hit = 0u32;
        for ((&x, &y), &z) in xs.iter().zip(ys).zip(zs) {
            let (dx, dy, dz) = (x - qx, y - qy, z - qz);
            hit |= (dx * dx + dy * dy + dz * dz < q.r2) as u32;
        }
        hit != 0
    }

    #[inline(always)]
    fn passes(&self, i: usize, q: &PackedQuery) -> bool {
        let mut s = 0.0f32;
        for a in 0..3 {
            let d = self.coords[a][i] - q.coords[a];
            s += d * d;
        }
        s < q.r2
    }

    /// Calls `hit(i)` for every index in `range` that passes the prefilter,
    /// in ascending order.
    #[inline]
    pub fn scan(&self, range: Range<usize>, q: &PackedQuery, mut hit: impl FnMut(usize)) {
        if q.r2 == f32::INFINITY {
            range.for_each(hit);
            return;
        }
        let mut start = range.start;
        while start < range.end {
            let end = (start + CHUNK).min(range.end);
            if self.any(start..end, q) {
                for i in start..end {
                    if self.passes(i, q) {
                        hit(i);
                    }
                }
            }
            start = end;
        }
    }
}

/// Squared Euclidean distance, summed in axis order. Both k-NN backends use
/// this exact expression so their distances agree bit for bit.
#[inline(always)]
pub(crate) fn sq_dist<const D: usize>(a: &[f64; D], b: &[f64; D]) -> f64 {
    let mut s = 0.0;
    for k in 0..D {
        let d = a[k] - b[k];
        s += d * d;
    }
    s
}
