//! Closed-form cell problems and capacities: the harmonic annulus corrector,
//! the Stokes flow past a sphere, and a lattice estimate of the harmonic
//! capacity of a union of balls.

use std::f64::consts::PI;

use nalgebra::Matrix3;
use thiserror::Error;

use crate::domain::{DomainSpec, Point};
use crate::geometry::Ball;
use crate::lattice::{prolong, ConstrainedSystem, Lattice, SolverError};
use crate::quadrature::SphereRule;

/// Annuli thinner than this, relative to the outer radius, are rejected.
pub const DEGENERATE_GAP: f64 = 1e-12;
/// Relative agreement required between two quadrature orders.
pub const QUADRATURE_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CorrectorError {
    #[error("degenerate annulus a={a}, R={r}")]
    DegenerateAnnulus { a: f64, r: f64 },
    #[error("surface quadrature not converged: orders disagree by {rel_diff:.3e}")]
    QuadratureUnderResolved { rel_diff: f64 },
    #[error("ball {index} of radius {radius} spans fewer than 3 cells at h={h}")]
    UnderResolvedBall { index: usize, radius: f64, h: f64 },
    #[error("ball {index} is not inside the outer domain")]
    BallOutside { index: usize },
    #[error(transparent)]
    Solver(#[from] SolverError),
}

fn check_annulus(a: f64, r: f64) -> Result<(), CorrectorError> {
    if !(a > 0.0 && r > a && (r - a) > DEGENERATE_GAP * r) || !r.is_finite() {
        return Err(CorrectorError::DegenerateAnnulus { a, r });
    }
    Ok(())
}

/// Harmonic in `a < |x - c| < R`, zero on the inner sphere and one on the
/// outer; extended by 0 inside and 1 outside.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarCorrector {
    pub center: Point,
    pub a: f64,
    pub r_out: f64,
}

impl ScalarCorrector {
    pub fn new(center: Point, a: f64, r_out: f64) -> Result<Self, CorrectorError> {
        check_annulus(a, r_out)?;
        Ok(ScalarCorrector { center, a, r_out })
    }

    pub fn radial(&self, r: f64) -> f64 {
        if r <= self.a {
            0.0
        } else if r >= self.r_out {
            1.0
        } else {
            (1.0 / self.a - 1.0 / r) / (1.0 / self.a - 1.0 / self.r_out)
        }
    }

    pub fn eval(&self, x: &Point) -> f64 {
        self.radial((x - self.center).norm())
    }

    /// `d w / d r` inside the annulus.
    pub fn radial_derivative(&self, r: f64) -> f64 {
        if r <= self.a || r >= self.r_out {
            return 0.0;
        }
        1.0 / (r * r * (1.0 / self.a - 1.0 / self.r_out))
    }
}

/// Total outward flux of the corrector through `dB_R`, which is the
/// condenser capacity `cap(B_a; B_R) = 4 pi a R / (R - a)`.
pub fn scalar_flux(a: f64, r: f64) -> Result<f64, CorrectorError> {
    check_annulus(a, r)?;
    Ok(4.0 * PI * a * r / (r - a))
}

/// `Y = eps^3 rho R / (R - eps^alpha rho)`.
pub fn y_value(eps: f64, alpha: f64, rho: f64, r_eps: f64) -> Result<f64, CorrectorError> {
    let a = eps.powf(alpha) * rho;
    check_annulus(a, r_eps)?;
    Ok(eps.powi(3) * rho * r_eps / (r_eps - a))
}

/// `sigma_eps = eps^(-(3 - alpha)/2)`.
pub fn sigma(eps: f64, alpha: f64) -> f64 {
    eps.powf(-(3.0 - alpha) / 2.0)
}

pub fn ball_capacity(r: f64) -> f64 {
    4.0 * PI * r
}

pub fn stokes_ball_capacity(r: f64) -> f64 {
    6.0 * PI * r
}

/// Scalar Darcy constant `k = 1 / (4 pi lambda E[rho])`.
pub fn darcy_k(lambda: f64, mean_rho: f64) -> f64 {
    1.0 / (4.0 * PI * lambda * mean_rho)
}

/// Stokes permeability `K = 1 / (6 pi lambda E[rho])`.
pub fn darcy_big_k(lambda: f64, mean_rho: f64) -> f64 {
    1.0 / (6.0 * PI * lambda * mean_rho)
}

/// Stokes flow past the sphere `|x| = r0` with velocity `e_i` on the sphere
/// and rest at infinity: a Stokeslet of strength `6 pi r0` plus a potential
/// doublet.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StokesCellSolution {
    pub direction: usize,
    pub r0: f64,
}

impl StokesCellSolution {
    pub fn new(direction: usize, r0: f64) -> Self {
        assert!(direction < 3 && r0 > 0.0);
        StokesCellSolution { direction, r0 }
    }

    fn e(&self) -> Point {
        let mut e = Point::zeros();
        e[self.direction] = 1.0;
        e
    }

    pub fn velocity(&self, x: &Point) -> Point {
        let e = self.e();
        let r = x.norm();
        let ex = e.dot(x);
        let (a, b) = (0.75 * self.r0, 0.25 * self.r0.powi(3));
        (e / r + x * (ex / r.powi(3))) * a + (e / r.powi(3) - x * (3.0 * ex / r.powi(5))) * b
    }

    pub fn pressure(&self, x: &Point) -> f64 {
        1.5 * self.r0 * self.e().dot(x) / x.norm().powi(3)
    }

    /// `G[(i, j)] = d w_i / d x_j`.
    pub fn gradient(&self, x: &Point) -> Matrix3<f64> {
        let e = self.e();
        let r = x.norm();
        let ex = e.dot(x);
        let (a, b) = (0.75 * self.r0, 0.25 * self.r0.powi(3));
        let (r3, r5, r7) = (r.powi(3), r.powi(5), r.powi(7));
        Matrix3::from_fn(|i, j| {
            let d = if i == j { 1.0 } else { 0.0 };
            let t1 = -e[i] * x[j] / r3;
            let t2 = (e[j] * x[i] + ex * d) / r3 - 3.0 * ex * x[i] * x[j] / r5;
            let t3 = -3.0 * e[i] * x[j] / r5;
            let t4 = -3.0 * (e[j] * x[i] + ex * d) / r5 + 15.0 * ex * x[i] * x[j] / r7;
            a * (t1 + t2) + b * (t3 + t4)
        })
    }
}

/// `int_{dB_r} (d_nu v - p nu) dS` for the cell corrector `v = e_i - w`,
/// `p = -q`, with the outward normal. Momentum balance makes it `6 pi r0 e_i`
/// for every `r >= r0`. Evaluated at `order` and `2 order` and compared.
pub fn stokes_flux(sol: &StokesCellSolution, r: f64, order: usize) -> Result<Point, CorrectorError> {
    assert!(r >= sol.r0, "flux sphere must enclose the obstacle");
    checked_sphere_integral(order, |rule| {
        rule.integrate(&Point::zeros(), r, |x, nu| nu * sol.pressure(x) - sol.gradient(x) * nu)
    })
}

/// Vector surface integral at `order` and `2 order`; the finer value is
/// returned when both agree to [`QUADRATURE_TOL`].
pub fn checked_sphere_integral(order: usize, integral: impl Fn(&SphereRule) -> Point) -> Result<Point, CorrectorError> {
    let lo = integral(&SphereRule::new(order));
    let hi = integral(&SphereRule::new(2 * order));
    let scale = hi.norm().max(f64::MIN_POSITIVE);
    let rel_diff = (hi - lo).norm() / scale;
    if rel_diff > QUADRATURE_TOL {
        return Err(CorrectorError::QuadratureUnderResolved { rel_diff });
    }
    Ok(hi)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CapacityEstimate {
    /// Discrete Dirichlet energy of the lattice minimizer.
    pub capacity: f64,
    pub iterations: usize,
    pub residual: f64,
    pub unknowns: usize,
}

/// Constraint pattern of the capacity problem on `lattice`: 1 on nodes in
/// some ball, 0 outside the open outer domain and on the lattice faces.
fn capacity_system(balls: &[Ball], outer: &DomainSpec, lattice: Lattice) -> ConstrainedSystem {
    let n = lattice.len();
    let mut free = vec![1u8; n];
    let mut u = vec![0.0; n];
    for idx in 0..n {
        if lattice.on_face(idx) || !outer.contains_strictly(&lattice.position(idx)) {
            free[idx] = 0;
        }
    }
    for b in balls {
        let (rx, ry, rz) = (
            lattice.node_range(0, b.center.x - b.radius, b.center.x + b.radius),
            lattice.node_range(1, b.center.y - b.radius, b.center.y + b.radius),
            lattice.node_range(2, b.center.z - b.radius, b.center.z + b.radius),
        );
        for k in rz {
            for j in ry.clone() {
                for i in rx.clone() {
                    let idx = lattice.index(i, j, k);
                    if b.contains(&lattice.position(idx)) {
                        free[idx] = 0;
                        u[idx] = 1.0;
                    }
                }
            }
        }
    }
    ConstrainedSystem::new(lattice, free, u, vec![0.0; n])
}

/// Lattice estimate of `cap(union of balls; outer)`: the minimal discrete
/// Dirichlet energy with `u = 1` on nodes inside a ball and `u = 0` outside
/// `outer`. Solved by conjugate gradients, warm-started from successively
/// coarser lattices while they still resolve every ball.
pub fn numerical_capacity(balls: &[Ball], outer: &DomainSpec, h: f64, tol: f64) -> Result<CapacityEstimate, CorrectorError> {
    for (index, b) in balls.iter().enumerate() {
        if b.radius < 3.0 * h {
            return Err(CorrectorError::UnderResolvedBall { index, radius: b.radius, h });
        }
        if outer.distance_to_boundary(&b.center) < b.radius {
            return Err(CorrectorError::BallOutside { index });
        }
    }
    let r_min = balls.iter().map(|b| b.radius).fold(f64::INFINITY, f64::min);
    let fine = Lattice::covering(&outer.bounding_box(), h);
    let mut chain = vec![fine];
    while let Some(c) = chain.last().unwrap().coarsened() {
        if r_min < 3.0 * c.h || chain.len() >= 4 {
            break;
        }
        chain.push(c);
    }

    let mut guess: Option<(Lattice, Vec<f64>)> = None;
    let mut last = None;
    for (level, lat) in chain.iter().rev().enumerate() {
        let mut sys = capacity_system(balls, outer, *lat);
        if let Some((coarse, u)) = &guess {
            let init = prolong(coarse, u, lat);
            for i in 0..sys.u.len() {
                if sys.free[i] == 1 {
                    sys.u[i] = init[i];
                }
            }
        }
        let is_fine = level + 1 == chain.len();
        let level_tol = if is_fine { tol } else { tol.max(1e-4) };
        let max_iter = sys.default_max_iter();
        let stats = sys.solve(level_tol, max_iter)?;
        if is_fine {
            last = Some(CapacityEstimate {
                capacity: sys.energy(),
                iterations: stats.iterations,
                residual: stats.residual,
                unknowns: sys.unknowns(),
            });
        }
        guess = Some((*lat, std::mem::take(&mut sys.u)));
    }
    Ok(last.expect("finest level solved"))
}
