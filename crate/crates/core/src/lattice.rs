//! Uniform node lattices and a matrix-free conjugate-gradient solver for the
//! 7-point Laplacian with Dirichlet constraints.
//!
//! Vectors live on the full lattice. Constrained nodes carry their
//! prescribed values in the solution and zero in every Krylov vector, so the
//! stencil needs no branches. Every node on the outer faces of the lattice
//! must be constrained.

use thiserror::Error;

use crate::domain::{Aabb, Point};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("conjugate gradient stopped after {iterations} iterations at relative residual {residual:.3e}")]
    Diverged { iterations: usize, residual: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lattice {
    pub origin: Point,
    pub h: f64,
    /// Nodes per axis.
    pub n: [usize; 3],
}

impl Lattice {
    /// Nodes `min + i h` covering `b`; the last node may fall short of
    /// `b.max` by less than `h`.
    pub fn covering(b: &Aabb, h: f64) -> Self {
        let e = b.extent();
        let n = [0, 1, 2].map(|i| (e[i] / h + 1e-9).floor() as usize + 1);
        Lattice { origin: b.min, h, n }
    }

    pub fn len(&self) -> usize {
        self.n[0] * self.n[1] * self.n[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn strides(&self) -> (usize, usize) {
        (self.n[0], self.n[0] * self.n[1])
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.n[1] + j) * self.n[0] + i
    }

    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.n[0];
        let j = (idx / self.n[0]) % self.n[1];
        [i, j, idx / (self.n[0] * self.n[1])]
    }

    pub fn position(&self, idx: usize) -> Point {
        let c = self.coords(idx);
        self.origin + Point::new(c[0] as f64, c[1] as f64, c[2] as f64) * self.h
    }

    pub fn on_face(&self, idx: usize) -> bool {
        let c = self.coords(idx);
        (0..3).any(|a| c[a] == 0 || c[a] + 1 == self.n[a])
    }

    /// The same box at spacing `2h`, if it still has interior nodes.
    pub fn coarsened(&self) -> Option<Lattice> {
        let n = self.n.map(|v| (v - 1) / 2 + 1);
        if n.iter().all(|&v| v >= 5) {
            Some(Lattice { origin: self.origin, h: 2.0 * self.h, n })
        } else {
            None
        }
    }

    /// Index range of lattice nodes with coordinate in `[lo, hi]` along `axis`.
    pub fn node_range(&self, axis: usize, lo: f64, hi: f64) -> std::ops::Range<usize> {
        let a = ((lo - self.origin[axis]) / self.h).ceil().max(0.0) as usize;
        let b = (((hi - self.origin[axis]) / self.h).floor() + 1.0).clamp(0.0, self.n[axis] as f64) as usize;
        a.min(b)..b
    }
}

/// Linear interpolation from `coarse` onto `fine` (spacing ratio 2, shared
/// origin).
pub fn prolong(coarse: &Lattice, u: &[f64], fine: &Lattice) -> Vec<f64> {
    let axis = |a: usize| -> Vec<(usize, usize)> {
        (0..fine.n[a]).map(|i| ((i / 2).min(coarse.n[a] - 1), (i.div_ceil(2)).min(coarse.n[a] - 1))).collect()
    };
    let (ax, ay, az) = (axis(0), axis(1), axis(2));
    let mut out = vec![0.0; fine.len()];
    for (k, &(k0, k1)) in az.iter().enumerate() {
        for (j, &(j0, j1)) in ay.iter().enumerate() {
            let row = fine.index(0, j, k);
            for (i, &(i0, i1)) in ax.iter().enumerate() {
                let mut s = 0.0;
                for kk in [k0, k1] {
                    for jj in [j0, j1] {
                        s += u[coarse.index(i0, jj, kk)] + u[coarse.index(i1, jj, kk)];
                    }
                }
                out[row + i] = s / 8.0;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgStats {
    pub iterations: usize,
    /// `|b - A u| / |b|`.
    pub residual: f64,
}

/// `-Delta_h u = f` on the free nodes with `u` fixed elsewhere.
#[derive(Debug, Clone)]
pub struct ConstrainedSystem {
    pub lattice: Lattice,
    /// 1 for unknowns, 0 for constrained nodes.
    pub free: Vec<u8>,
    /// Prescribed values on constrained nodes, initial guess on free ones;
    /// holds the solution after [`ConstrainedSystem::solve`].
    pub u: Vec<f64>,
    /// Source `f` at free nodes.
    pub f: Vec<f64>,
}

impl ConstrainedSystem {
    pub fn new(lattice: Lattice, free: Vec<u8>, u: Vec<f64>, f: Vec<f64>) -> Self {
        let n = lattice.len();
        assert!(free.len() == n && u.len() == n && f.len() == n);
        assert!(lattice.n.iter().all(|&v| v >= 3), "lattice needs interior nodes");
        debug_assert!((0..n).all(|i| free[i] == 0 || !lattice.on_face(i)), "face nodes must be constrained");
        ConstrainedSystem { lattice, free, u, f }
    }

    pub fn unknowns(&self) -> usize {
        self.free.iter().filter(|&&m| m == 1).count()
    }

    /// Default iteration cap `20 sqrt(unknowns)`.
    pub fn default_max_iter(&self) -> usize {
        (20.0 * (self.unknowns() as f64).sqrt()).ceil() as usize + 10
    }

    /// Right-hand side `h^2 f + sum of constrained neighbor values`.
    fn rhs(&self) -> Vec<f64> {
        let (sx, sy) = self.lattice.strides();
        let h2 = self.lattice.h * self.lattice.h;
        let n = self.u.len();
        let mut b = vec![0.0; n];
        for i in sy..n - sy {
            if self.free[i] == 1 {
                let mut s = h2 * self.f[i];
                for j in [i - 1, i + 1, i - sx, i + sx, i - sy, i + sy] {
                    if self.free[j] == 0 {
                        s += self.u[j];
                    }
                }
                b[i] = s;
            }
        }
        b
    }

    /// Conjugate gradients on the free nodes to `|r| <= tol |b|`.
    pub fn solve(&mut self, tol: f64, max_iter: usize) -> Result<CgStats, SolverError> {
        let n = self.u.len();
        let b = self.rhs();
        let bnorm = dot(&b, &b).sqrt();
        let mut y: Vec<f64> = self.u.iter().zip(&self.free).map(|(v, &m)| if m == 1 { *v } else { 0.0 }).collect();
        if bnorm == 0.0 {
            self.write_back(&y);
            return Ok(CgStats { iterations: 0, residual: 0.0 });
        }
        let mut q = vec![0.0; n];
        apply(&self.lattice, &self.free, &y, &mut q);
        let mut r: Vec<f64> = b.iter().zip(&q).map(|(b, q)| b - q).collect();
        let mut p = r.clone();
        let mut rr = dot(&r, &r);
        let target = tol * bnorm;
        let mut it = 0;
        while rr.sqrt() > target {
            if it >= max_iter {
                self.write_back(&y);
                return Err(SolverError::Diverged { iterations: it, residual: rr.sqrt() / bnorm });
            }
            let pq = apply(&self.lattice, &self.free, &p, &mut q);
            let a = rr / pq;
            let mut rr_new = 0.0;
            for i in 0..n {
                y[i] += a * p[i];
                r[i] -= a * q[i];
                rr_new += r[i] * r[i];
            }
            let beta = rr_new / rr;
            for i in 0..n {
                p[i] = r[i] + beta * p[i];
            }
            rr = rr_new;
            it += 1;
        }
        self.write_back(&y);
        Ok(CgStats { iterations: it, residual: rr.sqrt() / bnorm })
    }

    fn write_back(&mut self, y: &[f64]) {
        for i in 0..y.len() {
            if self.free[i] == 1 {
                self.u[i] = y[i];
            }
        }
    }

    /// `h^3 sum |grad_h u|^2` over all lattice edges.
    pub fn energy(&self) -> f64 {
        dirichlet_energy(&self.lattice, &self.u)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out = A x` with `A = h^2 (-Delta_h)` restricted to free nodes; returns
/// `x . out`. `x` must vanish on constrained nodes.
fn apply(l: &Lattice, free: &[u8], x: &[f64], out: &mut [f64]) -> f64 {
    let (sx, sy) = l.strides();
    let n = x.len();
    let m = n - 2 * sy;
    out[..sy].fill(0.0);
    out[n - sy..].fill(0.0);
    let c = &x[sy..sy + m];
    let xm = &x[sy - 1..sy - 1 + m];
    let xp = &x[sy + 1..sy + 1 + m];
    let ym = &x[sy - sx..sy - sx + m];
    let yp = &x[sy + sx..sy + sx + m];
    let zm = &x[..m];
    let zp = &x[2 * sy..2 * sy + m];
    let mask = &free[sy..sy + m];
    let o = &mut out[sy..sy + m];
    let mut acc = 0.0;
    for i in 0..m {
        let v = (6.0 * c[i] - xm[i] - xp[i] - ym[i] - yp[i] - zm[i] - zp[i]) * mask[i] as f64;
        o[i] = v;
        acc += v * c[i];
    }
    acc
}

pub fn dirichlet_energy(l: &Lattice, u: &[f64]) -> f64 {
    let (sx, sy) = l.strides();
    let mut e = 0.0;
    for k in 0..l.n[2] {
        for j in 0..l.n[1] {
            for i in 0..l.n[0] {
                let c = l.index(i, j, k);
                if i + 1 < l.n[0] {
                    e += (u[c + 1] - u[c]).powi(2);
                }
                if j + 1 < l.n[1] {
                    e += (u[c + sx] - u[c]).powi(2);
                }
                if k + 1 < l.n[2] {
                    e += (u[c + sy] - u[c]).powi(2);
                }
            }
        }
    }
    e * l.h
}
