//! Uniform-grid spatial hash over a fixed set of points.
//!
//! Points are bucketed by cell in CSR layout. Queries outside the gridded
//! region are clamped to the boundary cells, which hold every point lying
//! beyond the region.

use crate::domain::{Aabb, Point};

/// Upper bound on the number of cells; the cell side grows past this.
const MAX_CELLS: usize = 1 << 22;

#[derive(Debug, Clone)]
pub struct PointGrid {
    origin: Point,
    cell: f64,
    dims: [usize; 3],
    starts: Vec<u32>,
    items: Vec<u32>,
    points: Vec<Point>,
}

impl PointGrid {
    pub fn new(points: Vec<Point>, region: Aabb, cell: f64) -> Self {
        assert!(cell > 0.0 && cell.is_finite(), "cell side must be positive");
        assert!(points.len() < u32::MAX as usize);
        let extent = region.extent();
        let mut cell = cell;
        let dims = loop {
            let d = [0, 1, 2].map(|i| ((extent[i] / cell).ceil() as usize).max(1));
            if d[0].saturating_mul(d[1]).saturating_mul(d[2]) <= MAX_CELLS {
                break d;
            }
            cell *= 1.25;
        };
        let mut grid = PointGrid { origin: region.min, cell, dims, starts: Vec::new(), items: Vec::new(), points };
        let ncell = dims[0] * dims[1] * dims[2];
        let keys: Vec<usize> = grid.points.iter().map(|p| grid.flat(grid.clamped(p))).collect();
        let mut counts = vec![0u32; ncell + 1];
        for &k in &keys {
            counts[k + 1] += 1;
        }
        for i in 0..ncell {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut items = vec![0u32; keys.len()];
        for (i, &k) in keys.iter().enumerate() {
            items[fill[k] as usize] = i as u32;
            fill[k] += 1;
        }
        grid.starts = counts;
        grid.items = items;
        grid
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn cell_side(&self) -> f64 {
        self.cell
    }

    pub fn point(&self, i: usize) -> &Point {
        &self.points[i]
    }

    fn coord(&self, p: &Point, axis: usize) -> i64 {
        ((p[axis] - self.origin[axis]) / self.cell).floor() as i64
    }

    fn clamp_axis(&self, c: i64, axis: usize) -> usize {
        c.clamp(0, self.dims[axis] as i64 - 1) as usize
    }

    fn clamped(&self, p: &Point) -> [usize; 3] {
        [0, 1, 2].map(|a| self.clamp_axis(self.coord(p, a), a))
    }

    fn flat(&self, c: [usize; 3]) -> usize {
        (c[2] * self.dims[1] + c[1]) * self.dims[0] + c[0]
    }

    fn bucket(&self, c: [usize; 3]) -> &[u32] {
        let k = self.flat(c);
        &self.items[self.starts[k] as usize..self.starts[k + 1] as usize]
    }

    /// Visit every point whose cell meets `b`. A superset of the points in
    /// `b`; callers filter.
    pub fn for_each_candidate(&self, b: &Aabb, mut f: impl FnMut(usize)) {
        if self.points.is_empty() {
            return;
        }
        let lo = self.clamped(&b.min);
        let hi = self.clamped(&b.max);
        for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                for x in lo[0]..=hi[0] {
                    for &i in self.bucket([x, y, z]) {
                        f(i as usize);
                    }
                }
            }
        }
    }

    /// Visit every point within distance `r` of `p` (closed ball).
    pub fn for_each_within(&self, p: &Point, r: f64, mut f: impl FnMut(usize, f64)) {
        let r2 = r * r;
        self.for_each_candidate(&Aabb::cube(*p, r), |i| {
            let d2 = (self.points[i] - p).norm_squared();
            if d2 <= r2 {
                f(i, d2.sqrt());
            }
        });
    }

    /// Nearest point to `p` other than index `skip`, searched ring by ring
    /// of cells around the cell of `p`.
    pub fn nearest(&self, p: &Point, skip: Option<usize>) -> Option<(usize, f64)> {
        let c = [0, 1, 2].map(|a| self.coord(p, a));
        let max_ring = (0..3)
            .map(|a| c[a].abs().max((c[a] - self.dims[a] as i64 + 1).abs()) + self.dims[a] as i64)
            .max()
            .unwrap_or(0);
        let mut best: Option<(usize, f64)> = None;
        for s in 0..=max_ring {
            self.for_each_ring_cell(c, s, |i| {
                if Some(i) == skip {
                    return;
                }
                let d = (self.points[i] - p).norm();
                if best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((i, d));
                }
            });
            // every point in ring s+1 or beyond lies at least s cells away
            if let Some((_, bd)) = best {
                if bd <= s as f64 * self.cell {
                    break;
                }
            }
        }
        best
    }

    /// Points in cells at Chebyshev cell distance exactly `s` from `c`
    /// (unclamped cell coordinates; cells outside the grid are skipped).
    fn for_each_ring_cell(&self, c: [i64; 3], s: i64, mut f: impl FnMut(usize)) {
        let inside = |v: i64, a: usize| v >= 0 && v < self.dims[a] as i64;
        let lo = |a: usize| (c[a] - s).max(0);
        let hi = |a: usize| (c[a] + s).min(self.dims[a] as i64 - 1);
        for z in lo(2)..=hi(2) {
            for y in lo(1)..=hi(1) {
                let on_face = (z - c[2]).abs() == s || (y - c[1]).abs() == s;
                if on_face {
                    for x in lo(0)..=hi(0) {
                        for &i in self.bucket([x as usize, y as usize, z as usize]) {
                            f(i as usize);
                        }
                    }
                } else {
                    for x in [c[0] - s, c[0] + s] {
                        if inside(x, 0) {
                            for &i in self.bucket([x as usize, y as usize, z as usize]) {
                                f(i as usize);
                            }
                        }
                        if s == 0 {
                            break;
                        }
                    }
                }
            }
        }
    }
}
