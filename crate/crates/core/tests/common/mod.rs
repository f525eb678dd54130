//! Brute-force oracles shared by the integration suites.
#![allow(dead_code)]

use darcy_core::clusters::{ChainReport, SizeClasses, K_MIN};
use darcy_core::geometry::HoleSet;

/// Components with two or more members of the dilated-intersection graph on
/// every consecutive class pair, by testing all pairs. Members and
/// components are sorted.
pub fn brute_force_components(classes: &SizeClasses, holes: &HoleSet, dilation: f64) -> Vec<(i32, usize, Vec<Vec<usize>>)> {
    (K_MIN..classes.k_max)
        .map(|k| {
            let ids: Vec<usize> = classes.class(k).iter().chain(classes.class(k + 1)).copied().collect();
            let mut label: Vec<usize> = (0..ids.len()).collect();
            fn root(label: &mut [usize], mut x: usize) -> usize {
                while label[x] != x {
                    label[x] = label[label[x]];
                    x = label[x];
                }
                x
            }
            for i in 0..ids.len() {
                for j in i + 1..ids.len() {
                    let (a, b) = (&holes.balls[ids[i]], &holes.balls[ids[j]]);
                    if (a.center - b.center).norm() <= dilation * (a.radius + b.radius) {
                        let (ri, rj) = (root(&mut label, i), root(&mut label, j));
                        label[ri] = rj;
                    }
                }
            }
            let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
            for i in 0..ids.len() {
                let r = root(&mut label, i);
                groups.entry(r).or_default().push(ids[i]);
            }
            let largest = groups.values().map(Vec::len).max().unwrap_or(0);
            let mut comps: Vec<Vec<usize>> = groups
                .into_values()
                .filter(|g| g.len() > 1)
                .map(|mut g| {
                    g.sort_unstable();
                    g
                })
                .collect();
            comps.sort();
            (k, largest, comps)
        })
        .collect()
}

/// The report in the same canonical form.
pub fn canonical(report: &ChainReport) -> Vec<(i32, usize, Vec<Vec<usize>>)> {
    report
        .pairs
        .iter()
        .map(|p| {
            let mut comps: Vec<Vec<usize>> = p
                .components
                .iter()
                .map(|c| {
                    let mut c = c.clone();
                    c.sort_unstable();
                    c
                })
                .collect();
            comps.sort();
            (p.k, p.max_component, comps)
        })
        .collect()
}
