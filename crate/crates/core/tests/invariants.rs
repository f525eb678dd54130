//! Property suites: geometric and measure invariants on random
//! realizations, the discrete maximum principle and energy identity of the
//! solver, chain detection against brute force, determinism.

mod common;

use std::f64::consts::PI;

use darcy_core::clusters::{detect_chains, good_bad_partition, size_classes, CHAIN_DILATION};
use darcy_core::correctors::{scalar_flux, y_value};
use darcy_core::domain::{DomainSpec, Point};
use darcy_core::fdsolver::{rasterize, solve_poisson, Source};
use darcy_core::geometry::{build_holes, neighbor_stats, Ball, HoleSet};
use darcy_core::measures::{
    build_covering, default_gamma, step_function, CellPolicy, FluxMeasure, Mode, DIAMETER_CONSTANT,
};
use darcy_core::pointprocess::{sample_realization, ProcessParams, RadiiLaw};
use proptest::prelude::*;

fn realization(eps: f64, alpha: f64, law: RadiiLaw, seed: u64) -> HoleSet {
    let p = ProcessParams::new(1.0, eps, alpha, DomainSpec::unit_cube(), law, seed);
    build_holes(&sample_realization(&p).unwrap())
}

fn law() -> impl Strategy<Value = RadiiLaw> {
    prop_oneof![
        (1.0..2.0f64).prop_map(RadiiLaw::Constant),
        (2.0..6.0f64).prop_map(RadiiLaw::ParetoShifted),
        (1.0..3.0f64).prop_map(RadiiLaw::BoundedUniform),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Spheres `dB_{R_{eps,z}}(eps z)` have pairwise disjoint interiors.
    #[test]
    fn cell_spheres_are_disjoint(eps in 0.06..0.2f64, alpha in 1.1..2.9f64, law in law(), seed in any::<u64>()) {
        let holes = realization(eps, alpha, law, seed);
        let stats = neighbor_stats(&holes);
        for i in 0..holes.len() {
            prop_assert!(stats.r_eps[i] <= eps / 2.0);
            for j in i + 1..holes.len() {
                let d = (holes.balls[i].center - holes.balls[j].center).norm();
                prop_assert!(stats.r_eps[i] + stats.r_eps[j] <= d * (1.0 + 1e-12), "pair {i} {j}");
            }
        }
    }

    /// Good holes sit strictly inside their spheres and are pairwise disjoint.
    #[test]
    fn good_holes_are_disjoint(eps in 0.03..0.1f64, alpha in 2.0..2.9f64, seed in any::<u64>()) {
        let holes = realization(eps, alpha, RadiiLaw::ParetoShifted(3.0), seed);
        let stats = neighbor_stats(&holes);
        let part = good_bad_partition(&holes, &stats, default_gamma(alpha), 2.0);
        let good: Vec<usize> = part.good_indices().collect();
        for &g in &good {
            prop_assert!(holes.balls[g].radius < stats.r_eps[g]);
        }
        for (x, &i) in good.iter().enumerate() {
            for &j in &good[x + 1..] {
                prop_assert!(!holes.balls[i].intersects(&holes.balls[j]));
            }
        }
    }

    /// Cells tile the bounding box; interior cells obey the volume and
    /// diameter bounds of the covering; every good center owns exactly one
    /// unit cell lying in its cell's base cube.
    #[test]
    fn covering_bounds(eps in 0.04..0.12f64, alpha in 2.0..2.9f64, k in 2usize..5, seed in any::<u64>(), strict in any::<bool>()) {
        let holes = realization(eps, alpha, RadiiLaw::Constant(1.0), seed);
        let stats = neighbor_stats(&holes);
        let part = good_bad_partition(&holes, &stats, default_gamma(alpha), 2.0);
        let policy = if strict { CellPolicy::Strict } else { CellPolicy::Shrink };
        let Ok(cov) = build_covering(&holes, &part, &stats, k, policy) else {
            // only the strict policy may reject a realization
            prop_assert!(strict);
            return Ok(());
        };
        let total: f64 = cov.cells.iter().map(|c| c.volume).sum();
        prop_assert!((total - cov.region.volume()).abs() < 1e-9);
        let (kf, e3) = (k as f64, eps.powi(3));
        for c in cov.interior_cells() {
            prop_assert!(c.volume >= (kf - 1.0).powi(3) * e3 * (1.0 - 1e-9));
            prop_assert!(c.volume <= (kf + 1.0).powi(3) * e3 * (1.0 + 1e-9));
            prop_assert!(c.diameter <= DIAMETER_CONSTANT * kf * eps);
        }
        prop_assert_eq!(cov.unit_cells.len(), part.n_good);
        for &(h, _, owner) in &cov.unit_cells {
            prop_assert_eq!(owner, cov.base_of(&holes.balls[h].center));
            prop_assert_eq!(cov.cell_of(&holes.balls[h].center), owner);
        }
    }

    /// `sum_K |K| m_K` equals the total flux of the measure.
    #[test]
    fn step_function_conserves_mass(eps in 0.04..0.12f64, alpha in 2.0..2.9f64, k in 2usize..5, seed in any::<u64>(), stokes in any::<bool>()) {
        let holes = realization(eps, alpha, RadiiLaw::Constant(1.0), seed);
        let stats = neighbor_stats(&holes);
        let part = good_bad_partition(&holes, &stats, default_gamma(alpha), 2.0);
        let mode = if stokes { Mode::Stokes } else { Mode::Scalar };
        let m = FluxMeasure::new(&holes, &part, &stats, mode).unwrap();
        let cov = build_covering(&holes, &part, &stats, k, CellPolicy::Shrink).unwrap();
        let step = step_function(&cov, &m);
        let (a, b) = (step.total_mass(&cov), m.total_mass());
        prop_assert!((a - b).abs() <= 1e-12 * b.max(1e-300), "{a} vs {b}");
    }

    /// `Y = eps^(3 - alpha) cap(B_a; B_R) / (4 pi)`.
    #[test]
    fn y_identity(eps in 0.001..0.5f64, alpha in 1.01..2.99f64, rho in 1.0..50.0f64, frac in 0.01..0.99f64) {
        let a = eps.powf(alpha) * rho;
        let r = a / frac;
        let y = y_value(eps, alpha, rho, r).unwrap();
        let oracle = eps.powf(3.0 - alpha) * scalar_flux(a, r).unwrap() / (4.0 * PI);
        prop_assert!((y - oracle).abs() <= 1e-12 * oracle);
    }

    /// `chain detection` equals brute-force components of the intersection graph.
    #[test]
    fn chains_match_brute_force(eps in 0.1..0.2f64, kappa in 0.1..0.5f64, seed in any::<u64>()) {
        let holes = realization(eps, 1.5, RadiiLaw::ParetoShifted(2.5), seed);
        let classes = size_classes(&holes, kappa);
        prop_assert_eq!(classes.members.iter().map(Vec::len).sum::<usize>(), holes.len());
        let report = detect_chains(&classes, &holes, CHAIN_DILATION);
        prop_assert_eq!(common::canonical(&report), common::brute_force_components(&classes, &holes, CHAIN_DILATION));
    }

    /// Same parameters, same realization; a different seed changes it.
    #[test]
    fn sampling_is_deterministic(eps in 0.1..0.3f64, law in law(), seed in any::<u64>()) {
        let p = ProcessParams::new(1.0, eps, 1.5, DomainSpec::unit_cube(), law, seed);
        let a = sample_realization(&p).unwrap();
        prop_assert_eq!(&a, &sample_realization(&p).unwrap());
        let b = sample_realization(&p.with_seed(seed.wrapping_add(1))).unwrap();
        prop_assert!(a.is_empty() || a != b);
    }
}

fn hole_strategy() -> impl Strategy<Value = Vec<Ball>> {
    prop::collection::vec(((0.15..0.85f64), (0.15..0.85f64), (0.15..0.85f64), (0.13..0.2f64)), 0..6).prop_map(|v| {
        v.into_iter().map(|(x, y, z, r)| Ball { center: Point::new(x, y, z), radius: r, rho: 1.0 }).collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    /// For `f >= 0`: `0 <= u <= u_0`, with `u_0` the solution without holes,
    /// and `h^3 sum |grad u|^2 = h^3 sum f u`.
    #[test]
    fn maximum_principle_and_energy_identity(balls in hole_strategy(), amp in 0.1..10.0f64, shift in 0.0..1.0f64) {
        let h = 1.0 / 24.0;
        let domain = DomainSpec::unit_cube();
        let holes = HoleSet::from_balls(0.1, 1.5, domain, balls);
        let grid = rasterize(&holes, &domain.bounding_box(), h).unwrap();
        let f = Source::Field((0..grid.lattice.len()).map(|i| {
            let p = grid.lattice.position(i);
            amp * (shift + (7.0 * p.x + 3.0 * p.y * p.z).sin().abs())
        }).collect());
        let tol = 1e-11;
        let sol = solve_poisson(&grid, &f, tol).unwrap();
        prop_assert!(sol.min_value >= 0.0);
        let free = rasterize(&HoleSet::from_balls(0.1, 1.5, domain, vec![]), &domain.bounding_box(), h).unwrap();
        let u0 = solve_poisson(&free, &f, tol).unwrap();
        let scale = u0.u.iter().copied().fold(0.0, f64::max);
        for (u, v) in sol.u.iter().zip(&u0.u) {
            prop_assert!(*u <= v + 1e-8 * scale);
        }
        prop_assert!((sol.energy - sol.work).abs() <= 1e-8 * sol.work.max(f64::MIN_POSITIVE));
    }
}
