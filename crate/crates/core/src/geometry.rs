//! Physical hole sets, neighbor distances, coverage and the Voronoi-based
//! Poincare constants.

use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::domain::{Aabb, DomainSpec, Point};
use crate::pointprocess::Realization;
use crate::rng;
use crate::spatial::PointGrid;

pub const DEFAULT_DIRECTIONS: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("Poincare exponent p={0} outside [1,2]")]
    DegenerateExponent(f64),
}

/// `B_{eps^alpha rho}(eps z)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ball {
    pub center: Point,
    pub radius: f64,
    pub rho: f64,
}

impl Ball {
    pub fn contains(&self, p: &Point) -> bool {
        (p - self.center).norm_squared() <= self.radius * self.radius
    }

    pub fn intersects(&self, other: &Ball) -> bool {
        (self.center - other.center).norm() <= self.radius + other.radius
    }

    pub fn bounding_box(&self) -> Aabb {
        Aabb::cube(self.center, self.radius)
    }
}

#[derive(Debug, Clone)]
pub struct HoleSet {
    pub eps: f64,
    pub alpha: f64,
    pub domain: DomainSpec,
    pub balls: Vec<Ball>,
    /// Centers bucketed with cell side about `eps`.
    index: PointGrid,
    /// Balls wider than a cell, scanned linearly by ball queries.
    big: Vec<usize>,
}

pub fn build_holes(real: &Realization) -> HoleSet {
    let p = &real.params;
    let scale = p.eps.powf(p.alpha);
    let balls: Vec<Ball> = real
        .points
        .iter()
        .map(|m| Ball { center: m.center() * p.eps, radius: scale * m.rho, rho: m.rho })
        .collect();
    HoleSet::from_balls(p.eps, p.alpha, p.domain, balls)
}

impl HoleSet {
    pub fn from_balls(eps: f64, alpha: f64, domain: DomainSpec, balls: Vec<Ball>) -> Self {
        let index = PointGrid::new(balls.iter().map(|b| b.center).collect(), domain.bounding_box(), eps);
        let cell = index.cell_side();
        let big = (0..balls.len()).filter(|&i| balls[i].radius > cell).collect();
        HoleSet { eps, alpha, domain, balls, index, big }
    }

    pub fn len(&self) -> usize {
        self.balls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.balls.is_empty()
    }

    pub fn grid(&self) -> &PointGrid {
        &self.index
    }

    /// Blown-up center `z`.
    pub fn z(&self, i: usize) -> Point {
        self.balls[i].center / self.eps
    }

    /// Every ball meeting the closed box `b`, in increasing index order.
    pub fn query_box(&self, b: &Aabb) -> Vec<usize> {
        let reach = self.index.cell_side();
        let grown = Aabb::new(b.min - Point::repeat(reach), b.max + Point::repeat(reach));
        let mut hits = Vec::new();
        self.index.for_each_candidate(&grown, |i| {
            let ball = &self.balls[i];
            if ball.radius <= reach && b.intersects_ball(&ball.center, ball.radius) {
                hits.push(i);
            }
        });
        hits.extend(self.big.iter().copied().filter(|&i| b.intersects_ball(&self.balls[i].center, self.balls[i].radius)));
        hits.sort_unstable();
        hits
    }

    /// Whether `p` lies in some closed hole.
    pub fn contains_point(&self, p: &Point) -> bool {
        if self.big.iter().any(|&i| self.balls[i].contains(p)) {
            return true;
        }
        let reach = self.index.cell_side();
        let mut hit = false;
        self.index.for_each_candidate(&Aabb::cube(*p, reach), |i| {
            hit = hit || (self.balls[i].radius <= reach && self.balls[i].contains(p));
        });
        hit
    }
}

/// Half nearest-neighbor distances in blown-up units.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborStats {
    pub eps: f64,
    /// `d_z`, `+inf` without another center.
    pub d: Vec<f64>,
    /// `R_z = min(d_z, 1/2)`.
    pub r: Vec<f64>,
    /// `R_{eps,z} = eps R_z`.
    pub r_eps: Vec<f64>,
}

pub fn neighbor_stats(holes: &HoleSet) -> NeighborStats {
    let eps = holes.eps;
    let d: Vec<f64> = (0..holes.len())
        .into_par_iter()
        .map(|i| match holes.index.nearest(&holes.balls[i].center, Some(i)) {
            Some((_, dist)) => dist / (2.0 * eps),
            None => f64::INFINITY,
        })
        .collect();
    let r: Vec<f64> = d.iter().map(|&v| v.min(0.5)).collect();
    let r_eps = r.iter().map(|&v| v * eps).collect();
    NeighborStats { eps, d, r, r_eps }
}

/// Monte Carlo estimate of `|H cap D| / |D|` with its standard error.
pub fn volume_fraction(holes: &HoleSet, n_samples: usize, seed: u64) -> (f64, f64) {
    assert!(n_samples > 0);
    let mut r = rng::stream(seed, 0x766f_6c);
    let bbox = holes.domain.bounding_box();
    let ext = bbox.extent();
    let mut hits = 0usize;
    let mut drawn = 0usize;
    while drawn < n_samples {
        let p = Point::new(
            bbox.min.x + ext.x * r.random::<f64>(),
            bbox.min.y + ext.y * r.random::<f64>(),
            bbox.min.z + ext.z * r.random::<f64>(),
        );
        if !holes.domain.contains(&p) {
            continue;
        }
        drawn += 1;
        if holes.contains_point(&p) {
            hits += 1;
        }
    }
    let n = n_samples as f64;
    let p = hits as f64 / n;
    (p, (p * (1.0 - p) / n).sqrt())
}

/// Farthest point of the closed domain from `c`.
fn farthest_distance(domain: &DomainSpec, c: &Point) -> f64 {
    match domain {
        DomainSpec::Box { min, max } => {
            let far = Point::from_fn(|i, _| (c[i] - min[i]).abs().max((c[i] - max[i]).abs()));
            far.norm()
        }
        DomainSpec::Ball { center, radius } => (c - Point::from(*center)).norm() + radius,
    }
}

/// Whether a single hole contains the whole domain.
pub fn is_covered(holes: &HoleSet) -> bool {
    holes.balls.iter().any(|b| farthest_distance(&holes.domain, &b.center) <= b.radius)
}

/// Unit directions on the cube-sphere lattice with `m` subdivisions per
/// half-edge: the `24 m^2 + 2` boundary points of `{-m..m}^3`, normalized,
/// for the least `m` giving at least `n_directions`.
/// Contains the axes and body diagonals and is symmetric under `u -> -u`.
pub fn direction_set(n_directions: usize) -> Vec<Point> {
    let mut m = 1i64;
    while ((24 * m * m + 2) as usize) < n_directions {
        m += 1;
    }
    let mut dirs = Vec::with_capacity((24 * m * m + 2) as usize);
    for x in -m..=m {
        for y in -m..=m {
            for z in -m..=m {
                if x.abs() == m || y.abs() == m || z.abs() == m {
                    dirs.push(Point::new(x as f64, y as f64, z as f64).normalize());
                }
            }
        }
    }
    dirs
}

/// Worst-case angular gap of [`direction_set`]: every unit vector lies
/// within this angle (radians) of some lattice direction.
pub fn direction_slack(n_directions: usize) -> f64 {
    let mut m = 1.0f64;
    while 24.0 * m * m + 2.0 < n_directions as f64 {
        m += 1.0;
    }
    // the widest lattice cell sits at a face center, where half its
    // diagonal subtends atan(sqrt(2) / (2m)) on the face at distance m
    (2f64.sqrt() / (2.0 * m)).atan()
}

/// Voronoi cell chord proxy `r_hat_z` in blown-up units.
///
/// For a direction `u`, `t(u)` is the distance from `z` to the bisector
/// plane that first cuts the ray, clipped at the blown-up domain boundary;
/// `r_hat_z = max_u t(u) + t(-u)` is a chord of the cell through `z`, so it
/// never exceeds the true cell diameter.
pub fn voronoi_diameter_proxy(holes: &HoleSet, stats: &NeighborStats, n_directions: usize) -> Vec<f64> {
    let dirs = direction_set(n_directions);
    let eps = holes.eps;
    let blown = holes.domain.scaled(1.0 / eps);
    (0..holes.len())
        .into_par_iter()
        .map(|i| {
            let z = holes.z(i);
            let exits: Vec<f64> = dirs.iter().map(|u| blown.exit_distance(&z, u)).collect();
            // neighbors beyond 2 max_u t(u) cannot lower any t(u)
            let mut radius = if stats.d[i].is_finite() { 6.0 * stats.d[i] } else { f64::INFINITY };
            loop {
                let mut t = exits.clone();
                if radius.is_finite() {
                    holes.index.for_each_within(&holes.balls[i].center, radius * eps, |j, _| {
                        if j == i {
                            return;
                        }
                        let w = holes.z(j) - z;
                        let w2 = w.norm_squared();
                        for (k, u) in dirs.iter().enumerate() {
                            let proj = u.dot(&w);
                            if proj > 0.0 {
                                t[k] = t[k].min(w2 / (2.0 * proj));
                            }
                        }
                    });
                }
                let reach = t.iter().copied().fold(0.0, f64::max);
                if !radius.is_finite() || 2.0 * reach <= radius {
                    return chord_max(&dirs, &t);
                }
                radius = 2.0 * reach * 1.0001;
            }
        })
        .collect()
}

fn chord_max(dirs: &[Point], t: &[f64]) -> f64 {
    let mut best = 0.0f64;
    for (k, u) in dirs.iter().enumerate() {
        let opp = dirs.iter().position(|v| (v + u).norm_squared() < 1e-20).expect("direction set is symmetric");
        best = best.max(t[k] + t[opp]);
    }
    best
}

/// `C_eps(p)` from the chord proxies: for `p < 2`,
/// `C^p = (eps^3 sum r^(6/(2-p)))^((2-p)/2)`; for `p = 2`,
/// `C^2 = min(eps^3 sum exp(r^2), 1)`.
pub fn poincare_constants(eps: f64, r_hat: &[f64], p: f64) -> Result<f64, GeometryError> {
    if !(1.0..=2.0).contains(&p) {
        return Err(GeometryError::DegenerateExponent(p));
    }
    let e3 = eps.powi(3);
    if p == 2.0 {
        let s: f64 = r_hat.iter().map(|r| (r * r).exp()).sum();
        return Ok((e3 * s).min(1.0).sqrt());
    }
    let q = 6.0 / (2.0 - p);
    let s: f64 = r_hat.iter().map(|r| r.powf(q)).sum();
    Ok((e3 * s).powf((2.0 - p) / 2.0).powf(1.0 / p))
}
