//! Finite-difference Poisson problem on the perforated domain: rasterized
//! holes, conjugate gradients, and the Darcy-limit diagnostics of the
//! rescaled solution `sigma_eps^2 u_eps`.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::correctors::{darcy_k, sigma};
use crate::domain::{Aabb, DomainSpec, Point};
use crate::geometry::{build_holes, HoleSet};
use crate::lattice::{dirichlet_energy, ConstrainedSystem, Lattice, SolverError};
use crate::pointprocess::{moment, sample_realization, PointProcessError, ProcessParams};
use crate::stats::summarize;

/// Default relative residual of the CG solve.
pub const DEFAULT_TOL: f64 = 1e-8;
/// Core nodes lie farther than this fraction of `diam(D)` from `dD`.
pub const CORE_FRACTION: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FdError {
    #[error("hole {index} of radius {radius} spans fewer than 3 cells at h={h}")]
    UnderResolvedHole { index: usize, radius: f64, h: f64 },
    #[error("grid spacing h={0} leaves no interior nodes")]
    EmptyGrid(f64),
    #[error("source has {got} values for {want} nodes")]
    SourceLength { got: usize, want: usize },
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Sampling(#[from] PointProcessError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[repr(u8)]
pub enum NodeState {
    Interior = 0,
    Hole = 1,
    Boundary = 2,
}

#[derive(Debug, Clone)]
pub struct MaskedGrid {
    pub lattice: Lattice,
    pub domain: DomainSpec,
    pub state: Vec<NodeState>,
}

impl MaskedGrid {
    pub fn unknowns(&self) -> usize {
        self.state.iter().filter(|s| **s == NodeState::Interior).count()
    }

    pub fn hole_fraction(&self) -> f64 {
        let holes = self.state.iter().filter(|s| **s == NodeState::Hole).count();
        let inside = self.state.iter().filter(|s| **s != NodeState::Boundary).count();
        if inside == 0 {
            0.0
        } else {
            holes as f64 / inside as f64
        }
    }
}

/// Classifies the nodes of the lattice covering `bbox` at spacing `h`:
/// boundary outside the open domain or on a lattice face, hole inside some
/// closed ball, interior otherwise. Every ball meeting `bbox` must have
/// radius at least `3h`.
pub fn rasterize(holes: &HoleSet, bbox: &Aabb, h: f64) -> Result<MaskedGrid, FdError> {
    let lattice = Lattice::covering(bbox, h);
    if lattice.n.iter().any(|&v| v < 3) {
        return Err(FdError::EmptyGrid(h));
    }
    let smallest = holes
        .balls
        .iter()
        .enumerate()
        .filter(|(_, b)| bbox.intersects_ball(&b.center, b.radius))
        .min_by(|a, b| a.1.radius.total_cmp(&b.1.radius));
    if let Some((index, b)) = smallest {
        if b.radius < 3.0 * h {
            return Err(FdError::UnderResolvedHole { index, radius: b.radius, h });
        }
    }
    let domain = holes.domain;
    let mut state: Vec<NodeState> = (0..lattice.len())
        .into_par_iter()
        .map(|idx| {
            if lattice.on_face(idx) || !domain.contains_strictly(&lattice.position(idx)) {
                NodeState::Boundary
            } else {
                NodeState::Interior
            }
        })
        .collect();
    for b in &holes.balls {
        let (rx, ry, rz) = (
            lattice.node_range(0, b.center.x - b.radius, b.center.x + b.radius),
            lattice.node_range(1, b.center.y - b.radius, b.center.y + b.radius),
            lattice.node_range(2, b.center.z - b.radius, b.center.z + b.radius),
        );
        for k in rz {
            for j in ry.clone() {
                for i in rx.clone() {
                    let idx = lattice.index(i, j, k);
                    if state[idx] == NodeState::Interior && b.contains(&lattice.position(idx)) {
                        state[idx] = NodeState::Hole;
                    }
                }
            }
        }
    }
    Ok(MaskedGrid { lattice, domain, state })
}

#[derive(Debug, Clone, PartialEq)]
pub enum Source {
    Constant(f64),
    /// One value per lattice node.
    Field(Vec<f64>),
}

impl Source {
    fn nodal(&self, n: usize) -> Result<Vec<f64>, FdError> {
        match self {
            Source::Constant(c) => Ok(vec![*c; n]),
            Source::Field(v) if v.len() == n => Ok(v.clone()),
            Source::Field(v) => Err(FdError::SourceLength { got: v.len(), want: n }),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PoissonSolution {
    /// Nodal values, 0 on hole and boundary nodes.
    pub u: Vec<f64>,
    pub f: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
    /// `h^3 sum |grad_h u|^2`.
    pub energy: f64,
    /// `h^3 sum f u`.
    pub work: f64,
    /// Smallest nodal value; nonnegative whenever `f >= 0`.
    pub min_value: f64,
}

/// `-Delta_h u = f` on interior nodes, `u = 0` on hole and boundary nodes.
pub fn solve_poisson(grid: &MaskedGrid, f: &Source, tol: f64) -> Result<PoissonSolution, FdError> {
    let n = grid.lattice.len();
    let mut fv = f.nodal(n)?;
    let free: Vec<u8> = grid.state.iter().map(|s| u8::from(*s == NodeState::Interior)).collect();
    for (v, m) in fv.iter_mut().zip(&free) {
        if *m == 0 {
            *v = 0.0;
        }
    }
    let mut sys = ConstrainedSystem::new(grid.lattice, free, vec![0.0; n], fv);
    let max_iter = sys.default_max_iter();
    let st = sys.solve(tol, max_iter)?;
    let h3 = grid.lattice.h.powi(3);
    let work = h3 * sys.f.iter().zip(&sys.u).map(|(f, u)| f * u).sum::<f64>();
    let energy = dirichlet_energy(&grid.lattice, &sys.u);
    let min_value = sys.u.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(PoissonSolution { u: sys.u, f: sys.f, iterations: st.iterations, residual: st.residual, energy, work, min_value })
}

/// Diagnostics of `sigma_eps^2 u` against the Darcy limit `k f`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DarcyError {
    pub p: f64,
    pub k: f64,
    pub sigma: f64,
    /// `|sigma^2 u - k f|_{L^p(core)}`, holes included with `u = 0`.
    pub lp_error: f64,
    /// Mean of `sigma^2 u` over core nodes.
    pub core_mean: f64,
    pub core_nodes: usize,
    /// `sigma |grad_h u|_{L^2}`.
    pub energy_norm: f64,
    /// `|u|_{L^2} / (sigma^-1 (1 + |log eps|^(3/2)) |grad_h u|_{L^2})`.
    pub poincare_ratio: f64,
}

/// Compares `sigma_eps^2 u` with `k f`, `k = 1 / (4 pi lambda E[rho])`, on
/// the nodes farther than `0.1 diam(D)` from `dD`.
pub fn darcy_error(sol: &PoissonSolution, grid: &MaskedGrid, params: &ProcessParams, f: &Source, p: f64) -> DarcyError {
    assert!((1.0..2.0).contains(&p), "p must lie in [1,2)");
    let k = darcy_k(params.lambda, moment(&params.radii_law, 1.0));
    let s = sigma(params.eps, params.alpha);
    let s2 = s * s;
    let n = grid.lattice.len();
    let fv = f.nodal(n).expect("source matches the grid");
    let margin = CORE_FRACTION * grid.domain.diameter();
    let h3 = grid.lattice.h.powi(3);
    let (mut acc, mut mean, mut count) = (0.0, 0.0, 0usize);
    for idx in 0..n {
        if grid.state[idx] == NodeState::Boundary || grid.domain.distance_to_boundary(&grid.lattice.position(idx)) <= margin {
            continue;
        }
        let v = s2 * sol.u[idx];
        acc += (v - k * fv[idx]).abs().powf(p);
        mean += v;
        count += 1;
    }
    let grad = sol.energy.sqrt();
    let l2 = (h3 * sol.u.iter().map(|u| u * u).sum::<f64>()).sqrt();
    let log_factor = 1.0 + params.eps.ln().abs().powf(1.5);
    DarcyError {
        p,
        k,
        sigma: s,
        lp_error: (h3 * acc).powf(1.0 / p),
        core_mean: if count > 0 { mean / count as f64 } else { f64::NAN },
        core_nodes: count,
        energy_norm: s * grad,
        poincare_ratio: if grad > 0.0 { l2 / (log_factor * grad / s) } else { 0.0 },
    }
}

/// One cell of a convergence sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepEntry {
    pub params: ProcessParams,
    pub h: f64,
    pub tol: f64,
    pub p: f64,
    /// Solve without holes, as a scaling control.
    pub control: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveRow {
    pub eps: f64,
    pub alpha: f64,
    pub seed: u64,
    pub h: f64,
    pub iters: usize,
    pub residual: f64,
    pub lp_error: f64,
    pub p: f64,
    pub energy_norm: f64,
    pub poincare_ratio: f64,
    pub core_mean: f64,
    pub hole_fraction: f64,
    pub control: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceReport {
    pub rows: Vec<SolveRow>,
    /// `(entry index, message)` of entries that failed.
    pub failures: Vec<(usize, String)>,
    /// Mean `lp_error` decreases with `eps`; `None` below two levels.
    pub error_decreasing: Option<bool>,
    /// Max/min ratio of mean energy norms across `eps` is below 3.
    pub energy_bounded: Option<bool>,
}

/// Solves one sweep entry.
pub fn solve_entry(entry: &SweepEntry) -> Result<SolveRow, FdError> {
    let real = sample_realization(&entry.params)?;
    let mut holes = build_holes(&real);
    if entry.control {
        holes = HoleSet::from_balls(holes.eps, holes.alpha, holes.domain, Vec::new());
    }
    let grid = rasterize(&holes, &holes.domain.bounding_box(), entry.h)?;
    let f = Source::Constant(1.0);
    let sol = solve_poisson(&grid, &f, entry.tol)?;
    let d = darcy_error(&sol, &grid, &entry.params, &f, entry.p);
    Ok(SolveRow {
        eps: entry.params.eps,
        alpha: entry.params.alpha,
        seed: entry.params.seed,
        h: entry.h,
        iters: sol.iterations,
        residual: sol.residual,
        lp_error: d.lp_error,
        p: entry.p,
        energy_norm: d.energy_norm,
        poincare_ratio: d.poincare_ratio,
        core_mean: d.core_mean,
        hole_fraction: grid.hole_fraction(),
        control: entry.control,
    })
}

/// Solves every entry, collecting failures instead of aborting.
pub fn convergence_sweep(entries: &[SweepEntry]) -> ConvergenceReport {
    let results: Vec<Result<SolveRow, FdError>> = entries.par_iter().map(solve_entry).collect();
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(row) => rows.push(row),
            Err(e) => failures.push((i, e.to_string())),
        }
    }
    let (error_decreasing, energy_bounded) = sweep_verdicts(&rows);
    ConvergenceReport { rows, failures, error_decreasing, energy_bounded }
}

fn sweep_verdicts(rows: &[SolveRow]) -> (Option<bool>, Option<bool>) {
    let mut eps: Vec<f64> = rows.iter().filter(|r| !r.control).map(|r| r.eps).collect();
    eps.sort_by(|a, b| b.total_cmp(a));
    eps.dedup();
    if eps.len() < 2 {
        return (None, None);
    }
    let level = |e: f64, get: fn(&SolveRow) -> f64| {
        let v: Vec<f64> = rows.iter().filter(|r| !r.control && r.eps == e).map(get).collect();
        summarize(&v).mean
    };
    let errs: Vec<f64> = eps.iter().map(|&e| level(e, |r| r.lp_error)).collect();
    let energies: Vec<f64> = eps.iter().map(|&e| level(e, |r| r.energy_norm)).collect();
    let decreasing = errs.windows(2).all(|w| w[1] < w[0]);
    let hi = energies.iter().copied().fold(f64::MIN, f64::max);
    let lo = energies.iter().copied().fold(f64::MAX, f64::min);
    (Some(decreasing), Some(lo > 0.0 && hi / lo < 3.0))
}

/// Text sidecar of a raw field dump.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldHeader {
    pub dims: [usize; 3],
    pub h: f64,
    pub bbox: Aabb,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SidecarError {
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("missing key {0}")]
    Missing(&'static str),
    #[error("field has {got} bytes, header wants {want}")]
    Length { got: usize, want: usize },
}

impl FieldHeader {
    pub fn of(lattice: &Lattice) -> Self {
        let max = lattice.origin + Point::new(
            (lattice.n[0] - 1) as f64,
            (lattice.n[1] - 1) as f64,
            (lattice.n[2] - 1) as f64,
        ) * lattice.h;
        FieldHeader { dims: lattice.n, h: lattice.h, bbox: Aabb::new(lattice.origin, max) }
    }

    pub fn node_count(&self) -> Option<usize> {
        self.dims[0].checked_mul(self.dims[1])?.checked_mul(self.dims[2])
    }
}

impl fmt::Display for FieldHeader {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (a, b) = (self.bbox.min, self.bbox.max);
        writeln!(f, "format f64-le")?;
        writeln!(f, "order x-fastest")?;
        writeln!(f, "dims {} {} {}", self.dims[0], self.dims[1], self.dims[2])?;
        writeln!(f, "h {:?}", self.h)?;
        writeln!(f, "box {:?} {:?} {:?} {:?} {:?} {:?}", a.x, a.y, a.z, b.x, b.y, b.z)
    }
}

impl FromStr for FieldHeader {
    type Err = SidecarError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (mut dims, mut h, mut bbox) = (None, None, None);
        for (no, raw) in s.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |msg: &str| SidecarError::Malformed { line: no + 1, msg: msg.to_string() };
            let mut parts = line.split_whitespace();
            let key = parts.next().unwrap_or_default();
            let vals: Vec<&str> = parts.collect();
            match key {
                "format" if vals == ["f64-le"] => {}
                "order" if vals == ["x-fastest"] => {}
                "dims" => {
                    let d: Vec<usize> = vals.iter().map(|v| v.parse()).collect::<Result<_, _>>().map_err(|_| bad("bad dims"))?;
                    if d.len() != 3 || d.contains(&0) {
                        return Err(bad("dims needs three positive integers"));
                    }
                    dims = Some([d[0], d[1], d[2]]);
                }
                "h" => {
                    let v: f64 = vals.first().ok_or_else(|| bad("missing h"))?.parse().map_err(|_| bad("bad h"))?;
                    if vals.len() != 1 || !(v > 0.0 && v.is_finite()) {
                        return Err(bad("h must be one positive number"));
                    }
                    h = Some(v);
                }
                "box" => {
                    let b: Vec<f64> = vals.iter().map(|v| v.parse()).collect::<Result<_, _>>().map_err(|_| bad("bad box"))?;
                    if b.len() != 6 || b.iter().any(|v| !v.is_finite()) || (0..3).any(|i| b[i] > b[i + 3]) {
                        return Err(bad("box needs min and max corners"));
                    }
                    bbox = Some(Aabb::new(Point::new(b[0], b[1], b[2]), Point::new(b[3], b[4], b[5])));
                }
                _ => return Err(bad("unknown line")),
            }
        }
        Ok(FieldHeader {
            dims: dims.ok_or(SidecarError::Missing("dims"))?,
            h: h.ok_or(SidecarError::Missing("h"))?,
            bbox: bbox.ok_or(SidecarError::Missing("box"))?,
        })
    }
}

/// Writes `<stem>.bin` (little-endian f64, x fastest) and `<stem>.txt`.
pub fn write_field(stem: &Path, lattice: &Lattice, u: &[f64]) -> std::io::Result<()> {
    assert_eq!(u.len(), lattice.len());
    let mut bytes = Vec::with_capacity(8 * u.len());
    for v in u {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(stem.with_extension("bin"), bytes)?;
    let mut side = std::fs::File::create(stem.with_extension("txt"))?;
    write!(side, "{}", FieldHeader::of(lattice))
}

/// Decodes a raw dump against its header.
pub fn decode_field(header: &FieldHeader, bytes: &[u8]) -> Result<Vec<f64>, SidecarError> {
    let want = header.node_count().and_then(|n| n.checked_mul(8)).unwrap_or(usize::MAX);
    if bytes.len() != want {
        return Err(SidecarError::Length { got: bytes.len(), want });
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect())
}
