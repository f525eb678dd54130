//! Size classes, chains of overlapping balls, the good/bad partition and a
//! greedy cluster hierarchy.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::domain::{Aabb, Point};
use crate::geometry::{build_holes, Ball, HoleSet, NeighborStats};
use crate::pointprocess::{moment, sample_realization, PointProcessError, ProcessParams};
use crate::rng::derive_seed;
use crate::spatial::PointGrid;
use crate::stats::wilson_interval;

/// Dilation factor in the chain definition.
pub const CHAIN_DILATION: f64 = 4.0;
pub const DEFAULT_THETA: f64 = 2.0;
pub const DEFAULT_LAMBDA_CAP: f64 = 64.0;
pub const DEFAULT_THETA_BAD: f64 = 2.0;
/// Lowest class index.
pub const K_MIN: i32 = -3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClusterError {
    #[error("radii law has no finite moment of order {order}")]
    InadmissibleLaw { order: f64 },
    #[error("hierarchy infeasible ({reason}); offending group {group:?}")]
    HierarchyInfeasible { reason: String, group: Vec<usize> },
    #[error(transparent)]
    Sampling(#[from] PointProcessError),
}

#[derive(Debug, Clone, Default)]
pub struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        UnionFind { parent: (0..n).collect(), size: vec![1; n] }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let (mut a, mut b) = (self.find(a), self.find(b));
        if a == b {
            return false;
        }
        if self.size[a] < self.size[b] {
            std::mem::swap(&mut a, &mut b);
        }
        self.parent[b] = a;
        self.size[a] += self.size[b];
        true
    }

    /// Components as sorted member lists, ordered by smallest member.
    pub fn components(&mut self) -> Vec<Vec<usize>> {
        let n = self.parent.len();
        let mut by_root: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        let mut first: Vec<Option<usize>> = vec![None; n];
        for i in 0..n {
            let r = self.find(i);
            let key = *first[r].get_or_insert(i);
            by_root.entry(key).or_default().push(i);
        }
        by_root.into_values().collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SizeClasses {
    pub eps: f64,
    pub alpha: f64,
    pub kappa: f64,
    pub k_max: i32,
    /// `members[k - K_MIN]` lists the hole indices of class `k`.
    pub members: Vec<Vec<usize>>,
    /// Class of every hole, `None` for holes left out by [`SizeClasses::restrict`].
    pub class_of: Vec<Option<i32>>,
}

pub fn k_max(kappa: f64) -> i32 {
    (1.0 / kappa).floor() as i32 + 1
}

/// Lower threshold `eps^(1 - k kappa)` of class `k > K_MIN`.
pub fn class_threshold(eps: f64, kappa: f64, k: i32) -> f64 {
    eps.powf(1.0 - k as f64 * kappa)
}

/// Class of a radius `a = eps^alpha rho`. Intervals are closed below and
/// open above, so a radius equal to a threshold starts the class above it.
pub fn class_of_radius(a: f64, eps: f64, kappa: f64) -> i32 {
    let top = k_max(kappa);
    let mut k = K_MIN;
    for j in (K_MIN + 1)..=top {
        if a >= class_threshold(eps, kappa, j) {
            k = j;
        } else {
            break;
        }
    }
    k
}

pub fn size_classes(holes: &HoleSet, kappa: f64) -> SizeClasses {
    assert!(kappa > 0.0 && kappa < 1.0, "kappa must lie in (0,1)");
    let top = k_max(kappa);
    let mut members = vec![Vec::new(); (top - K_MIN + 1) as usize];
    let mut class_of = Vec::with_capacity(holes.len());
    for (i, b) in holes.balls.iter().enumerate() {
        let k = class_of_radius(b.radius, holes.eps, kappa);
        members[(k - K_MIN) as usize].push(i);
        class_of.push(Some(k));
    }
    SizeClasses { eps: holes.eps, alpha: holes.alpha, kappa, k_max: top, members, class_of }
}

impl SizeClasses {
    pub fn class(&self, k: i32) -> &[usize] {
        &self.members[(k - K_MIN) as usize]
    }

    pub fn levels(&self) -> impl DoubleEndedIterator<Item = i32> {
        K_MIN..=self.k_max
    }

    pub fn total(&self) -> usize {
        self.members.iter().map(Vec::len).sum()
    }

    /// Classes of the holes with `keep[i]` only.
    pub fn restrict(&self, keep: &[bool]) -> SizeClasses {
        let members = self.members.iter().map(|m| m.iter().copied().filter(|&i| keep[i]).collect()).collect();
        let class_of = self.class_of.iter().zip(keep).map(|(c, &k)| if k { *c } else { None }).collect();
        SizeClasses { members, class_of, ..self.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairChains {
    /// Lower class `k` of the pair `I_k cup I_(k+1)`.
    pub k: i32,
    pub n_members: usize,
    pub max_component: usize,
    pub greedy_clique: usize,
    /// Components with at least two members (singletons omitted).
    pub components: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChainReport {
    pub dilation: f64,
    pub pairs: Vec<PairChains>,
}

impl ChainReport {
    pub fn pair(&self, k: i32) -> Option<&PairChains> {
        self.pairs.iter().find(|p| p.k == k)
    }

    /// Longest chain bound in the pairs with `k` in `range`.
    pub fn longest(&self, range: std::ops::RangeInclusive<i32>) -> usize {
        self.pairs.iter().filter(|p| range.contains(&p.k)).map(|p| p.greedy_clique).max().unwrap_or(0)
    }
}

fn dilated_overlap(a: &Ball, b: &Ball, dilation: f64) -> bool {
    (a.center - b.center).norm() <= dilation * (a.radius + b.radius)
}

/// Adjacency lists (local indices) of the dilated-intersection graph.
fn overlap_graph(balls: &[Ball], dilation: f64) -> Vec<Vec<usize>> {
    let n = balls.len();
    let mut adj = vec![Vec::new(); n];
    if n < 2 {
        return adj;
    }
    let r_max = balls.iter().map(|b| b.radius).fold(0.0, f64::max);
    let region = balls.iter().skip(1).fold(Aabb::cube(balls[0].center, 0.0), |acc, b| acc.union(&Aabb::cube(b.center, 0.0)));
    let grid = PointGrid::new(balls.iter().map(|b| b.center).collect(), region, (2.0 * dilation * r_max).max(1e-12));
    for i in 0..n {
        grid.for_each_within(&balls[i].center, dilation * (balls[i].radius + r_max), |j, _| {
            if j > i && dilated_overlap(&balls[i], &balls[j], dilation) {
                adj[i].push(j);
                adj[j].push(i);
            }
        });
    }
    for a in &mut adj {
        a.sort_unstable();
    }
    adj
}

/// Greedy clique inside one component: seeds from the highest-degree
/// vertices, candidates in decreasing degree order.
fn greedy_clique(component: &[usize], adj: &[Vec<usize>]) -> usize {
    if component.len() <= 1 {
        return component.len();
    }
    let mut order = component.to_vec();
    order.sort_by_key(|&v| std::cmp::Reverse(adj[v].len()));
    let adjacent = |a: usize, b: usize| adj[a].binary_search(&b).is_ok();
    let mut best = 1;
    for &seed in order.iter().take(32) {
        if adj[seed].len() < best {
            break;
        }
        let mut clique = vec![seed];
        let mut cand = adj[seed].clone();
        cand.sort_by_key(|&v| std::cmp::Reverse(adj[v].len()));
        for v in cand {
            if clique.iter().all(|&c| adjacent(c, v)) {
                clique.push(v);
            }
        }
        best = best.max(clique.len());
    }
    best
}

/// Components and clique bounds of the `dilation`-dilated intersection graph
/// restricted to every pair of consecutive classes.
pub fn detect_chains(classes: &SizeClasses, holes: &HoleSet, dilation: f64) -> ChainReport {
    let pairs = (K_MIN..classes.k_max)
        .map(|k| {
            let mut ids: Vec<usize> = classes.class(k).iter().chain(classes.class(k + 1)).copied().collect();
            ids.sort_unstable();
            let balls: Vec<Ball> = ids.iter().map(|&i| holes.balls[i]).collect();
            let adj = overlap_graph(&balls, dilation);
            let mut uf = UnionFind::new(ids.len());
            for (i, a) in adj.iter().enumerate() {
                for &j in a {
                    uf.union(i, j);
                }
            }
            let comps = uf.components();
            let max_component = comps.iter().map(Vec::len).max().unwrap_or(0);
            let greedy = comps.iter().map(|c| greedy_clique(c, &adj)).max().unwrap_or(0);
            PairChains {
                k,
                n_members: ids.len(),
                max_component,
                greedy_clique: greedy,
                components: comps
                    .into_iter()
                    .filter(|c| c.len() > 1)
                    .map(|c| c.into_iter().map(|i| ids[i]).collect())
                    .collect(),
            }
        })
        .collect();
    ChainReport { dilation, pairs }
}

/// Exponents of the chain argument for a given moment gap `beta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ChainParams {
    pub alpha: f64,
    pub beta: f64,
    /// `min(beta/6, alpha^2 beta / (6 + 2 alpha beta))`; `kappa` must stay below.
    pub kappa_sup: f64,
    pub kappa: f64,
    pub k_max: i32,
    /// First class pair expected to be empty.
    pub k0: i32,
    /// Chain length that pairs below `k0` should not reach.
    pub m: usize,
    /// Decay exponent `alpha beta / 2` of every bad event.
    pub decay_exponent: f64,
}

/// Exponent of the bound `P(A_{k,eps,M}) <~ eps^e`.
pub fn chain_event_exponent(alpha: f64, beta: f64, kappa: f64, k: i32, m: usize) -> f64 {
    alpha * beta + (k as f64 * kappa - 1.0) * (3.0 / alpha + beta) + (m as f64 - 1.0) * alpha * beta
}

/// `kappa = kappa_fraction * kappa_sup`; `k0` is the least `k` with
/// `P(A_{k,eps,1}) <~ eps^(alpha beta/2)` and `M` the least chain length with
/// `P(A_{-3,eps,M}) <~ eps^(alpha beta/2)` (the worst pair).
pub fn chain_parameters(alpha: f64, beta: f64, kappa_fraction: f64) -> ChainParams {
    assert!(beta > 0.0 && kappa_fraction > 0.0 && kappa_fraction < 1.0);
    let q = 3.0 / alpha + beta;
    let kappa_sup = (beta / 6.0).min(alpha * alpha * beta / (6.0 + 2.0 * alpha * beta));
    let kappa = kappa_fraction * kappa_sup;
    let half = alpha * beta / 2.0;
    let k0 = ((1.0 - alpha * alpha * beta / (6.0 + 2.0 * alpha * beta)) / kappa).ceil() as i32;
    let m = ((1.0 + 3.0 * kappa) * q / (alpha * beta) + 0.5).ceil().max(1.0) as usize;
    debug_assert!(chain_event_exponent(alpha, beta, kappa, k0, 1) >= half - 1e-12);
    debug_assert!(chain_event_exponent(alpha, beta, kappa, K_MIN, m) >= half - 1e-12);
    ChainParams { alpha, beta, kappa_sup, kappa, k_max: k_max(kappa), k0, m, decay_exponent: half }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChainRow {
    pub eps: f64,
    pub kappa: f64,
    pub class_k: i32,
    /// Largest component and clique bound over all seeds.
    pub max_component: usize,
    pub greedy_clique: usize,
    /// Seeds whose pair holds a chain of length at least `M` (clique bound).
    pub n_seeds_hit: usize,
    /// Seeds whose pair is nonempty.
    pub n_seeds_nonempty: usize,
    pub n_seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChainSweepLevel {
    pub eps: f64,
    pub n_seeds: usize,
    /// Seeds with a nonempty pair at some `k >= k0`.
    pub top_nonempty: usize,
    /// Seeds with a chain of length `>= M` at some `k >= k0`.
    pub top_chain_m: usize,
    /// Seeds with a chain of length `>= M` at some `k < k0`.
    pub low_chain_m: usize,
    pub top_nonempty_ci: (f64, f64),
    pub low_chain_m_ci: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChainSweep {
    pub params: ChainParams,
    pub rows: Vec<ChainRow>,
    pub levels: Vec<ChainSweepLevel>,
}

/// Monte Carlo frequencies of the chain events over `n_seeds` realizations
/// per scale. Seeds are `derive_seed(master, eps index, seed index)`.
pub fn chain_probability_sweep(
    base: &ProcessParams,
    chain: &ChainParams,
    eps_list: &[f64],
    n_seeds: usize,
    master_seed: u64,
) -> Result<ChainSweep, ClusterError> {
    let order = 3.0 / base.alpha + chain.beta;
    if !moment(&base.radii_law, order).is_finite() {
        return Err(ClusterError::InadmissibleLaw { order });
    }
    let mut rows = Vec::new();
    let mut levels = Vec::new();
    for (ei, &eps) in eps_list.iter().enumerate() {
        let per_seed: Vec<ChainReport> = (0..n_seeds)
            .into_par_iter()
            .map(|si| {
                let p = base.with_eps(eps).with_seed(derive_seed(&[master_seed, ei as u64, si as u64]));
                let holes = build_holes(&sample_realization(&p)?);
                let classes = size_classes(&holes, chain.kappa);
                Ok(detect_chains(&classes, &holes, CHAIN_DILATION))
            })
            .collect::<Result<_, ClusterError>>()?;
        for k in K_MIN..chain.k_max {
            let pairs: Vec<&PairChains> = per_seed.iter().map(|r| r.pair(k).expect("pair present")).collect();
            rows.push(ChainRow {
                eps,
                kappa: chain.kappa,
                class_k: k,
                max_component: pairs.iter().map(|p| p.max_component).max().unwrap_or(0),
                greedy_clique: pairs.iter().map(|p| p.greedy_clique).max().unwrap_or(0),
                n_seeds_hit: pairs.iter().filter(|p| p.greedy_clique >= chain.m).count(),
                n_seeds_nonempty: pairs.iter().filter(|p| p.n_members > 0).count(),
                n_seeds,
            });
        }
        let top = chain.k0..=chain.k_max;
        let low = K_MIN..=chain.k0 - 1;
        let top_nonempty = per_seed.iter().filter(|r| r.pairs.iter().any(|p| top.contains(&p.k) && p.n_members > 0)).count();
        let top_chain_m = per_seed.iter().filter(|r| r.longest(top.clone()) >= chain.m).count();
        let low_chain_m = per_seed.iter().filter(|r| r.longest(low.clone()) >= chain.m).count();
        levels.push(ChainSweepLevel {
            eps,
            n_seeds,
            top_nonempty,
            top_chain_m,
            low_chain_m,
            top_nonempty_ci: wilson_interval(top_nonempty, n_seeds, 1.96),
            low_chain_m_ci: wilson_interval(low_chain_m, n_seeds, 1.96),
        });
    }
    Ok(ChainSweep { params: *chain, rows, levels })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Partition {
    pub eps: f64,
    pub gamma: f64,
    pub theta_b: f64,
    pub good: Vec<bool>,
    /// `D_b`: the bad holes dilated by `theta_b`.
    pub safety_balls: Vec<(usize, f64)>,
    pub n_good: usize,
    pub n_bad: usize,
    /// `eps^alpha sum_bad rho`.
    pub cap_bound: f64,
    /// `eps^3 sum_bad rho^(3/alpha)`.
    pub vanish_stat: f64,
    /// Good centers demoted because `B_{R/2}(eps z)` met `D_b`.
    pub violations_fixed: usize,
}

impl Partition {
    pub fn good_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.good.iter().enumerate().filter(|(_, g)| **g).map(|(i, _)| i)
    }

    pub fn bad_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.good.iter().enumerate().filter(|(_, g)| !**g).map(|(i, _)| i)
    }

    /// Good centers whose `B_{R_{eps,z}/2}` meets `D_b`, by brute force.
    pub fn separation_violations(&self, holes: &HoleSet, stats: &NeighborStats) -> usize {
        self.good_indices()
            .filter(|&g| {
                self.safety_balls.iter().any(|&(b, r)| {
                    (holes.balls[g].center - holes.balls[b].center).norm() <= stats.r_eps[g] / 2.0 + r
                })
            })
            .count()
    }
}

/// Good centers satisfy `R_{eps,z} >= eps^(1+gamma/2)` and
/// `eps^alpha rho <= eps^(1+gamma)`; then good centers whose half-ball meets
/// the dilated bad set are demoted until none is left.
pub fn good_bad_partition(holes: &HoleSet, stats: &NeighborStats, gamma: f64, theta_b: f64) -> Partition {
    assert!(gamma > 0.0 && gamma < holes.alpha - 1.0, "gamma must lie in (0, alpha-1)");
    assert!(theta_b >= 1.0);
    let eps = holes.eps;
    let r_min = eps.powf(1.0 + gamma / 2.0);
    let a_max = eps.powf(1.0 + gamma);
    let mut good: Vec<bool> =
        (0..holes.len()).map(|i| stats.r_eps[i] >= r_min && holes.balls[i].radius <= a_max).collect();

    let half_reach = eps / 4.0; // R_{eps,z}/2 <= eps/4
    let mut queue: Vec<usize> = (0..holes.len()).filter(|&i| !good[i]).collect();
    let mut demoted = 0;
    while let Some(b) = queue.pop() {
        let bad = holes.balls[b];
        let dil = theta_b * bad.radius;
        let mut hit = Vec::new();
        holes.grid().for_each_within(&bad.center, dil + half_reach, |g, dist| {
            if good[g] && dist <= stats.r_eps[g] / 2.0 + dil {
                hit.push(g);
            }
        });
        for g in hit {
            good[g] = false;
            demoted += 1;
            queue.push(g);
        }
    }

    let e_a = eps.powf(holes.alpha);
    let (mut cap, mut van) = (0.0, 0.0);
    let mut safety = Vec::new();
    for (i, b) in holes.balls.iter().enumerate() {
        if !good[i] {
            cap += b.rho;
            van += b.rho.powf(3.0 / holes.alpha);
            safety.push((i, theta_b * b.radius));
        }
    }
    let n_good = good.iter().filter(|g| **g).count();
    Partition {
        eps,
        gamma,
        theta_b,
        n_good,
        n_bad: holes.len() - n_good,
        good,
        safety_balls: safety,
        cap_bound: e_a * cap,
        vanish_stat: eps.powi(3) * van,
        violations_fixed: demoted,
    }
}

/// Smallest ball containing two balls.
pub fn enclose_two(a: &Ball, b: &Ball) -> (Point, f64) {
    let d = (b.center - a.center).norm();
    if d + b.radius <= a.radius {
        return (a.center, a.radius);
    }
    if d + a.radius <= b.radius {
        return (b.center, b.radius);
    }
    let r = (d + a.radius + b.radius) / 2.0;
    let dir = (b.center - a.center) / d;
    (a.center + dir * (r - a.radius), r)
}

fn enclosing_radius(c: &Point, balls: &[Ball]) -> f64 {
    balls.iter().map(|b| (b.center - c).norm() + b.radius).fold(0.0, f64::max)
}

/// Ball containing every ball of the group: exact for one or two balls,
/// otherwise the better of an incremental two-ball enclosure and a
/// Badoiu-Clarkson iteration toward the Chebyshev center.
pub fn enclosing_ball(balls: &[Ball]) -> (Point, f64) {
    match balls {
        [] => (Point::zeros(), 0.0),
        [a] => (a.center, a.radius),
        [a, b] => enclose_two(a, b),
        _ => {
            let mut sorted = balls.to_vec();
            sorted.sort_by(|x, y| y.radius.total_cmp(&x.radius));
            let (mut c, mut r) = (sorted[0].center, sorted[0].radius);
            for b in &sorted[1..] {
                (c, r) = enclose_two(&Ball { center: c, radius: r, rho: 0.0 }, b);
            }
            let incremental = (c, enclosing_radius(&c, balls));

            let mut c = sorted[0].center;
            for t in 1..=400 {
                let far = balls
                    .iter()
                    .max_by(|x, y| ((x.center - c).norm() + x.radius).total_cmp(&((y.center - c).norm() + y.radius)))
                    .expect("nonempty");
                let v = far.center - c;
                let n = v.norm();
                let p = if n > 0.0 { far.center + v / n * far.radius } else { far.center + Point::x() * far.radius };
                c += (p - c) / (t as f64 + 1.0);
            }
            let bc = (c, enclosing_radius(&c, balls));
            if bc.1 < incremental.1 {
                bc
            } else {
                incremental
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoveringBall {
    pub level: i32,
    pub center: [f64; 3],
    pub radius: f64,
    /// Hole with the largest mark in the group.
    pub representative: usize,
    /// `radius / (eps^alpha rho_representative)`.
    pub lambda: f64,
    pub members: Vec<usize>,
}

impl CoveringBall {
    pub fn center(&self) -> Point {
        Point::from(self.center)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum HierarchyCheck {
    Inclusion,
    Separation,
    CrossLevel,
    SizeCap,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterHierarchy {
    pub theta: f64,
    pub lambda_cap: f64,
    pub kappa: f64,
    pub m: usize,
    pub balls: Vec<CoveringBall>,
    pub feasible: bool,
    /// First failed check and the hole indices involved.
    pub violation: Option<(HierarchyCheck, Vec<usize>)>,
    /// Covering balls with more than `m` members.
    pub groups_over_m: usize,
}

impl ClusterHierarchy {
    pub fn level(&self, k: i32) -> impl Iterator<Item = &CoveringBall> {
        self.balls.iter().filter(move |b| b.level == k)
    }

    pub fn into_result(self) -> Result<ClusterHierarchy, ClusterError> {
        match &self.violation {
            None => Ok(self),
            Some((check, group)) => {
                Err(ClusterError::HierarchyInfeasible { reason: format!("{check:?}"), group: group.clone() })
            }
        }
    }
}

fn covering_from(level: i32, members: Vec<usize>, holes: &HoleSet) -> CoveringBall {
    let balls: Vec<Ball> = members.iter().map(|&i| holes.balls[i]).collect();
    let (c, r) = enclosing_ball(&balls);
    let rep = *members.iter().max_by(|&&x, &&y| holes.balls[x].rho.total_cmp(&holes.balls[y].rho)).expect("nonempty");
    let base = holes.balls[rep].radius;
    // exact containment of the representative gives lambda >= 1
    let r = r.max(base);
    CoveringBall { level, center: [c.x, c.y, c.z], radius: r, representative: rep, lambda: r / base, members }
}

fn as_ball(c: &CoveringBall, scale: f64) -> Ball {
    Ball { center: c.center(), radius: scale * c.radius, rho: 0.0 }
}

/// Greedy hierarchy over the classified holes. Levels are processed from
/// the top class down; within a level, groups of covering balls with
/// overlapping `theta^2`-dilates are replaced by one enclosing ball until
/// the level is separated. The four structural checks are then replayed.
pub fn build_hierarchy(classes: &SizeClasses, holes: &HoleSet, theta: f64, lambda_cap: f64, m: usize) -> ClusterHierarchy {
    assert!(theta > 1.0 && lambda_cap >= theta * theta, "need theta > 1 and Lambda >= theta^2");
    let t2 = theta * theta;
    let mut all = Vec::new();
    for k in classes.levels().rev() {
        let mut level: Vec<CoveringBall> = classes.class(k).iter().map(|&i| covering_from(k, vec![i], holes)).collect();
        loop {
            let dilated: Vec<Ball> = level.iter().map(|c| Ball { center: c.center(), radius: c.radius, rho: 0.0 }).collect();
            let adj = overlap_graph(&dilated, t2);
            if adj.iter().all(Vec::is_empty) {
                break;
            }
            let mut uf = UnionFind::new(level.len());
            for (i, a) in adj.iter().enumerate() {
                for &j in a {
                    uf.union(i, j);
                }
            }
            level = uf
                .components()
                .into_iter()
                .map(|g| {
                    if g.len() == 1 {
                        level[g[0]].clone()
                    } else {
                        let mut members: Vec<usize> = g.iter().flat_map(|&i| level[i].members.iter().copied()).collect();
                        members.sort_unstable();
                        covering_from(k, members, holes)
                    }
                })
                .collect();
        }
        all.extend(level);
    }
    let mut h = ClusterHierarchy {
        theta,
        lambda_cap,
        kappa: classes.kappa,
        m,
        groups_over_m: all.iter().filter(|c| c.members.len() > m).count(),
        balls: all,
        feasible: false,
        violation: None,
    };
    h.violation = verify_hierarchy(&h, classes, holes);
    h.feasible = h.violation.is_none();
    h
}

const CONTAIN_TOL: f64 = 1e-12;

/// Replays the inclusion, separation, cross-level and size-cap predicates.
pub fn verify_hierarchy(h: &ClusterHierarchy, classes: &SizeClasses, holes: &HoleSet) -> Option<(HierarchyCheck, Vec<usize>)> {
    let cap = h.lambda_cap * classes.eps.powf(h.kappa);
    for c in &h.balls {
        if c.lambda < 1.0 - CONTAIN_TOL || c.lambda > h.lambda_cap || c.radius > cap {
            return Some((HierarchyCheck::SizeCap, c.members.clone()));
        }
    }
    for k in classes.levels() {
        let level: Vec<&CoveringBall> = h.level(k).collect();
        for &i in classes.class(k) {
            let b = &holes.balls[i];
            let inside = level.iter().any(|c| {
                (b.center - c.center()).norm() + b.radius <= c.radius * (1.0 + CONTAIN_TOL) + CONTAIN_TOL * b.radius
            });
            if !inside {
                return Some((HierarchyCheck::Inclusion, vec![i]));
            }
        }
        let dilated: Vec<Ball> = level.iter().map(|c| as_ball(c, 1.0)).collect();
        let adj = overlap_graph(&dilated, h.theta * h.theta);
        if let Some(i) = adj.iter().position(|a| !a.is_empty()) {
            let mut group = level[i].members.clone();
            group.extend(level[adj[i][0]].members.iter().copied());
            return Some((HierarchyCheck::Separation, group));
        }
    }
    // originals of class k against theta-dilates of covering balls below k
    for c in &h.balls {
        let reach = as_ball(c, h.theta);
        for i in holes.query_box(&reach.bounding_box()) {
            let Some(k) = classes.class_of[i] else { continue };
            if k > c.level && holes.balls[i].intersects(&reach) {
                let mut group = c.members.clone();
                group.push(i);
                return Some((HierarchyCheck::CrossLevel, group));
            }
        }
    }
    None
}
