//! The flux measure of the oscillating test function, its cube covering,
//! the cell-averaged step function and the discrepancies between them.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::clusters::Partition;
use crate::correctors::{checked_sphere_integral, y_value, CorrectorError};
use crate::domain::{Aabb, Point};
use crate::geometry::{HoleSet, NeighborStats};
use crate::lattice::{ConstrainedSystem, Lattice, SolverError};
use crate::quadrature::{gauss_legendre, SphereRule};
use crate::spatial::PointGrid;

/// Sphere averages use this order, checked against twice it.
pub const PAIRING_ORDER: usize = 16;
/// Interior cells must satisfy `diam(K) <= DIAMETER_CONSTANT * k eps`.
pub const DIAMETER_CONSTANT: f64 = 3.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeasureError {
    #[error("unit cells of holes {first} and {second} overlap")]
    CellOverlap { first: usize, second: usize },
    #[error("cube multiplier k={0} must be at least 2")]
    InvalidMultiplier(usize),
    #[error("sphere of radius {radius} spans fewer than 3 cells at h={h}")]
    UnderResolved { radius: f64, h: f64 },
    #[error("step function and measure use different modes")]
    ModeMismatch,
    #[error(transparent)]
    Corrector(#[from] CorrectorError),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Scalar,
    Stokes,
}

impl Mode {
    /// Capacity prefactor: `4 pi` for the scalar problem, `6 pi` per
    /// component for Stokes.
    pub fn prefactor(self) -> f64 {
        match self {
            Mode::Scalar => 4.0 * PI,
            Mode::Stokes => 6.0 * PI,
        }
    }
}

/// How the unit cell `Q_{eps,z}` of a good center is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CellPolicy {
    /// The cube of side `eps`; overlapping cells are an error.
    Strict,
    /// The cube inscribed in `B_{R_{eps,z}}(eps z)`, disjoint by construction.
    Shrink,
}

/// `gamma = (20/21)(alpha - 1)`.
pub fn default_gamma(alpha: f64) -> f64 {
    20.0 / 21.0 * (alpha - 1.0)
}

/// `k = max(2, ceil(eps^(-9(alpha-1)/20)))`.
pub fn default_multiplier(eps: f64, alpha: f64) -> usize {
    (eps.powf(-9.0 * (alpha - 1.0) / 20.0).ceil() as usize).max(2)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    /// Base cube `Q_{eps,k,x}`, not clipped.
    pub base: Aabb,
    /// `|K cap box(D)|`.
    pub volume: f64,
    /// Diameter of the bounding box of `K`.
    pub diameter: f64,
    /// Base cube not contained in `D`.
    pub boundary: bool,
    /// Good holes whose unit cell belongs to this cell.
    pub members: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Covering {
    pub eps: f64,
    pub k: usize,
    pub policy: CellPolicy,
    /// Bounding box of `D`; base cubes tile it from its lower corner.
    pub region: Aabb,
    pub dims: [usize; 3],
    pub cells: Vec<Cell>,
    /// `(hole, Q_{eps,z} clipped to region, owning cell)` per good center.
    pub unit_cells: Vec<(usize, Aabb, usize)>,
    unit_index: PointGrid,
    unit_half: f64,
}

impl Covering {
    pub fn side(&self) -> f64 {
        self.k as f64 * self.eps
    }

    /// Base cube holding `p` (half-open, clamped to the tiling).
    pub fn base_of(&self, p: &Point) -> usize {
        let s = self.side();
        let c = [0, 1, 2].map(|a| (((p[a] - self.region.min[a]) / s).floor().max(0.0) as usize).min(self.dims[a] - 1));
        (c[2] * self.dims[1] + c[1]) * self.dims[0] + c[0]
    }

    /// Cell `K` containing `p`: the owner of a unit cell holding `p`, else
    /// the base cube.
    pub fn cell_of(&self, p: &Point) -> usize {
        let mut hit = None;
        self.unit_index.for_each_candidate(&Aabb::cube(*p, self.unit_half), |u| {
            if hit.is_none() && self.unit_cells[u].1.contains(p) {
                hit = Some(self.unit_cells[u].2);
            }
        });
        hit.unwrap_or_else(|| self.base_of(p))
    }

    pub fn interior_cells(&self) -> impl Iterator<Item = &Cell> {
        self.cells.iter().filter(|c| !c.boundary)
    }
}

/// Cube covering `K_{eps,k,x}` of the bounding box of `D`: base cubes of
/// side `k eps`, with the unit cell of every good center moved wholly into
/// the base cube containing the center.
pub fn build_covering(
    holes: &HoleSet,
    partition: &Partition,
    stats: &NeighborStats,
    k: usize,
    policy: CellPolicy,
) -> Result<Covering, MeasureError> {
    if k < 2 {
        return Err(MeasureError::InvalidMultiplier(k));
    }
    let eps = holes.eps;
    let region = holes.domain.bounding_box();
    let side = k as f64 * eps;
    let ext = region.extent();
    let dims = [0, 1, 2].map(|a| ((ext[a] / side - 1e-9).ceil() as usize).max(1));
    let mut cells = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let min = region.min + Point::new(x as f64, y as f64, z as f64) * side;
                let base = Aabb::new(min, min + Point::repeat(side));
                cells.push(Cell {
                    volume: base.overlap_volume(&region),
                    diameter: base.intersection(&region).diameter(),
                    boundary: !holes.domain.contains_box(&base),
                    base,
                    members: Vec::new(),
                });
            }
        }
    }

    let good: Vec<usize> = partition.good_indices().collect();
    let half = |g: usize| match policy {
        CellPolicy::Strict => eps / 2.0,
        CellPolicy::Shrink => stats.r_eps[g] / 3f64.sqrt(),
    };
    let unit_half = good.iter().map(|&g| half(g)).fold(0.0, f64::max);
    let centers: Vec<Point> = good.iter().map(|&g| holes.balls[g].center).collect();
    let unit_index = PointGrid::new(centers, region, eps);

    if policy == CellPolicy::Strict {
        // open cubes of side eps overlap iff the sup-distance is below eps
        for (a, &g) in good.iter().enumerate() {
            let c = holes.balls[g].center;
            let mut clash = None;
            unit_index.for_each_candidate(&Aabb::cube(c, eps), |b| {
                if b > a && (unit_index.point(b) - c).amax() < eps {
                    clash.get_or_insert(good[b]);
                }
            });
            if let Some(other) = clash {
                return Err(MeasureError::CellOverlap { first: g, second: other });
            }
        }
    }

    let mut covering = Covering { eps, k, policy, region, dims, cells, unit_cells: Vec::new(), unit_index, unit_half };
    let mut unit_cells = Vec::with_capacity(good.len());
    for &g in &good {
        let c = holes.balls[g].center;
        let q = Aabb::cube(c, half(g)).intersection(&region);
        let owner = covering.base_of(&c);
        // the unit cell is smaller than a base cube, so it meets at most 8
        let lo = covering.base_of(&q.min);
        let hi = covering.base_of(&q.max);
        let (lc, hc) = (unflat(lo, dims), unflat(hi, dims));
        for z in lc[2]..=hc[2] {
            for y in lc[1]..=hc[1] {
                for x in lc[0]..=hc[0] {
                    let b = (z * dims[1] + y) * dims[0] + x;
                    if b != owner {
                        let ov = q.overlap_volume(&covering.cells[b].base);
                        covering.cells[b].volume -= ov;
                        covering.cells[owner].volume += ov;
                    }
                }
            }
        }
        let grown = covering.cells[owner].base.intersection(&region).union(&q);
        let cell = &mut covering.cells[owner];
        cell.diameter = cell.diameter.max(grown.diameter());
        cell.members.push(g);
        unit_cells.push((g, q, owner));
    }
    covering.unit_cells = unit_cells;
    Ok(covering)
}

fn unflat(i: usize, dims: [usize; 3]) -> [usize; 3] {
    [i % dims[0], (i / dims[0]) % dims[1], i / (dims[0] * dims[1])]
}

/// One sphere `dB_{R_{eps,z}}(eps z)` carrying constant density.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Atom {
    pub hole: usize,
    pub center: [f64; 3],
    pub radius: f64,
    /// `Y_{eps,z}`.
    pub y: f64,
    /// Total flux per component: `4 pi Y` (scalar) or `6 pi Y` (Stokes).
    pub total: f64,
}

impl Atom {
    pub fn center(&self) -> Point {
        Point::from(self.center)
    }

    /// Surface density `g_z`, constant on the sphere.
    pub fn density(&self) -> f64 {
        self.total / (4.0 * PI * self.radius * self.radius)
    }
}

/// `sigma_eps^-2 mu_eps` restricted to the good centers.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FluxMeasure {
    pub eps: f64,
    pub mode: Mode,
    pub atoms: Vec<Atom>,
}

impl FluxMeasure {
    pub fn new(holes: &HoleSet, partition: &Partition, stats: &NeighborStats, mode: Mode) -> Result<Self, MeasureError> {
        let atoms = partition
            .good_indices()
            .map(|g| {
                let b = &holes.balls[g];
                let y = y_value(holes.eps, holes.alpha, b.rho, stats.r_eps[g])?;
                Ok(Atom { hole: g, center: b.center.into(), radius: stats.r_eps[g], y, total: mode.prefactor() * y })
            })
            .collect::<Result<Vec<_>, CorrectorError>>()?;
        Ok(FluxMeasure { eps: holes.eps, mode, atoms })
    }

    pub fn total_mass(&self) -> f64 {
        self.atoms.iter().map(|a| a.total).sum()
    }
}

/// Cell values of `m_eps(k)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepFunction {
    pub mode: Mode,
    pub values: Vec<f64>,
}

/// `prefactor / |K| * sum_{z in K} Y_{eps,z}` on every cell, 0 on empty
/// ones. The capacity prefactor enters once.
pub fn step_function(covering: &Covering, measure: &FluxMeasure) -> StepFunction {
    let mut sums = vec![0.0; covering.cells.len()];
    let owner_of: std::collections::HashMap<usize, usize> = covering.unit_cells.iter().map(|&(h, _, o)| (h, o)).collect();
    for a in &measure.atoms {
        sums[owner_of[&a.hole]] += a.y;
    }
    let pf = measure.mode.prefactor();
    let values = covering
        .cells
        .iter()
        .zip(&sums)
        .map(|(c, s)| if *s == 0.0 || c.volume <= 0.0 { 0.0 } else { pf * s / c.volume })
        .collect();
    StepFunction { mode: measure.mode, values }
}

impl StepFunction {
    /// `sum_K |K| m_K`.
    pub fn total_mass(&self, covering: &Covering) -> f64 {
        covering.cells.iter().zip(&self.values).map(|(c, v)| c.volume * v).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KvBound {
    pub value: f64,
    /// Atoms whose ball `B_{2R}` leaves the base cube of their cell.
    pub containment_violations: usize,
}

/// `max_K diam(K) * (sum_i |g_i|^2_{L^2(dB_{R_i})} / R_i)^(1/2)`, the
/// discrepancy bound without its constant.
pub fn kv_bound(measure: &FluxMeasure, covering: &Covering) -> KvBound {
    if measure.atoms.is_empty() {
        return KvBound { value: 0.0, containment_violations: 0 };
    }
    let diam = covering.cells.iter().map(|c| c.diameter).fold(0.0, f64::max);
    let s: f64 = measure
        .atoms
        .iter()
        .map(|a| {
            let g = a.density();
            4.0 * PI * a.radius * a.radius * g * g / a.radius
        })
        .sum();
    let violations = measure
        .atoms
        .iter()
        .filter(|a| !covering.cells[covering.base_of(&a.center())].base.contains_ball(&a.center(), 2.0 * a.radius))
        .count();
    KvBound { value: diam * s.sqrt(), containment_violations: violations }
}

/// `sum_z total_z * avg_{dB_{R_z}} phi`, per component in Stokes mode.
pub fn pairing(measure: &FluxMeasure, phi: &(dyn Fn(&Point) -> f64 + Sync), order: usize) -> Result<f64, MeasureError> {
    let sum_at = |rule: &SphereRule| -> f64 {
        let parts: Vec<f64> =
            measure.atoms.par_iter().map(|a| a.total * rule.average(&a.center(), a.radius, phi)).collect();
        parts.iter().sum()
    };
    let v = checked_sphere_integral(order, |rule| Point::new(sum_at(rule), 0.0, 0.0))?;
    Ok(v.x)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct L2Discrepancy {
    /// Over every cell, clipped to `box(D)`.
    pub all: f64,
    /// Over interior cells only.
    pub interior: f64,
}

/// `(sum_K |K| (m_K - target)^2)^(1/2)`, exact cell-wise.
pub fn l2_step_discrepancy(covering: &Covering, step: &StepFunction, target: f64) -> L2Discrepancy {
    let (mut all, mut interior) = (0.0, 0.0);
    for (c, v) in covering.cells.iter().zip(&step.values) {
        let t = c.volume * (v - target).powi(2);
        all += t;
        if !c.boundary {
            interior += t;
        }
    }
    L2Discrepancy { all: all.sqrt(), interior: interior.sqrt() }
}

/// `(dim, R, h)` check and lattice over `box(D)`.
fn discrepancy_lattice(measure: &FluxMeasure, covering: &Covering, h: f64) -> Result<Lattice, MeasureError> {
    if let Some(a) = measure.atoms.iter().find(|a| a.radius < 3.0 * h) {
        return Err(MeasureError::UnderResolved { radius: a.radius, h });
    }
    Ok(Lattice::covering(&covering.region, h))
}

/// Nodal density of `sigma^-2 mu_eps - m_eps(k)`: each sphere deposits its
/// quadrature masses at the nearest node, the step function contributes
/// its value at every node.
pub fn signed_density(measure: &FluxMeasure, covering: &Covering, step: &StepFunction, lattice: &Lattice) -> Vec<f64> {
    let h3 = lattice.h.powi(3);
    let mut rho = vec![0.0; lattice.len()];
    for idx in 0..lattice.len() {
        rho[idx] = -step.values[covering.cell_of(&lattice.position(idx))];
    }
    for a in &measure.atoms {
        let order = ((PI * a.radius / lattice.h).ceil() as usize).max(8);
        let rule = SphereRule::new(order);
        for (nu, w) in rule.nodes.iter().zip(&rule.weights) {
            let x = a.center() + nu * a.radius;
            let c = [0, 1, 2].map(|ax| {
                (((x[ax] - lattice.origin[ax]) / lattice.h).round().max(0.0) as usize).min(lattice.n[ax] - 1)
            });
            rho[lattice.index(c[0], c[1], c[2])] += a.total * w / (4.0 * PI) / h3;
        }
    }
    rho
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HMinusOne {
    pub value: f64,
    pub iterations: usize,
    pub residual: f64,
}

/// Discrete `H^-1(box(D))` norm of a nodal density: `|grad phi|_{L^2}` for
/// `-Delta_h phi = density` with `phi = 0` on the lattice faces.
pub fn h_minus_one_of_density(lattice: &Lattice, density: &[f64], tol: f64) -> Result<HMinusOne, MeasureError> {
    let n = lattice.len();
    let free: Vec<u8> = (0..n).map(|i| u8::from(!lattice.on_face(i))).collect();
    let mut sys = ConstrainedSystem::new(*lattice, free, vec![0.0; n], density.to_vec());
    let max_iter = sys.default_max_iter();
    let st = sys.solve(tol, max_iter)?;
    Ok(HMinusOne { value: sys.energy().sqrt(), iterations: st.iterations, residual: st.residual })
}

/// Numerical `|sigma^-2 mu_eps - m_eps(k)|_{H^-1}` on a lattice of spacing
/// `h`, which must resolve every sphere by three nodes.
pub fn h_minus_one_numeric(
    measure: &FluxMeasure,
    covering: &Covering,
    step: &StepFunction,
    h: f64,
    tol: f64,
) -> Result<HMinusOne, MeasureError> {
    if measure.mode != step.mode {
        return Err(MeasureError::ModeMismatch);
    }
    let lattice = discrepancy_lattice(measure, covering, h)?;
    let rho = signed_density(measure, covering, step, &lattice);
    h_minus_one_of_density(&lattice, &rho, tol)
}

/// `phi(x) = exp(-1 / (1 - |x - c|^2 / r^2))` inside `B_r(c)`, 0 outside.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Bump {
    pub center: [f64; 3],
    pub radius: f64,
}

impl Bump {
    /// The bump of radius 0.4 at the center of the unit cube.
    pub fn standard() -> Self {
        Bump { center: [0.5; 3], radius: 0.4 }
    }

    pub fn eval(&self, x: &Point) -> f64 {
        let s2 = (x - Point::from(self.center)).norm_squared() / (self.radius * self.radius);
        if s2 >= 1.0 {
            0.0
        } else {
            (-1.0 / (1.0 - s2)).exp()
        }
    }

    /// `int phi = 4 pi r^3 int_0^1 s^2 exp(-1/(1-s^2)) ds` by 200-point
    /// Gauss-Legendre.
    pub fn integral(&self) -> f64 {
        let (x, w) = gauss_legendre(200);
        let s: f64 = x
            .iter()
            .zip(&w)
            .map(|(t, w)| {
                let s = 0.5 * (t + 1.0);
                0.5 * w * s * s * (-1.0 / (1.0 - s * s)).exp()
            })
            .sum();
        4.0 * PI * self.radius.powi(3) * s
    }
}
