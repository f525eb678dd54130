//! Gauss-Legendre rules and a lat-long product rule on the unit sphere.

use std::f64::consts::PI;

use crate::domain::Point;

/// Nodes and weights of the `n`-point Gauss-Legendre rule on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        // Newton from the Chebyshev-like initial guess
        let mut t = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre(n, t);
            dp = d;
            let step = p / d;
            t -= step;
            if step.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre(n, t);
        dp = if d != 0.0 { d } else { dp };
        let wi = 2.0 / ((1.0 - t * t) * dp * dp);
        x[i] = -t;
        x[n - 1 - i] = t;
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    (x, w)
}

/// `P_n(t)` and `P_n'(t)` by the three-term recurrence.
fn legendre(n: usize, t: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, t);
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let p2 = ((2 * k - 1) as f64 * t * p1 - (k - 1) as f64 * p0) / k as f64;
        p0 = p1;
        p1 = p2;
    }
    (p1, n as f64 * (t * p1 - p0) / (t * t - 1.0))
}

/// Product rule on the unit sphere: `order` Gauss nodes in `cos theta`
/// times `2 order` equispaced longitudes. Integrates spherical polynomials
/// of degree below `2 order` exactly; weights sum to `4 pi`.
#[derive(Debug, Clone)]
pub struct SphereRule {
    pub order: usize,
    pub nodes: Vec<Point>,
    pub weights: Vec<f64>,
}

impl SphereRule {
    pub fn new(order: usize) -> Self {
        let (ct, wt) = gauss_legendre(order);
        let nphi = 2 * order;
        let dphi = 2.0 * PI / nphi as f64;
        let mut nodes = Vec::with_capacity(order * nphi);
        let mut weights = Vec::with_capacity(order * nphi);
        for (c, w) in ct.iter().zip(&wt) {
            let s = (1.0 - c * c).sqrt();
            for k in 0..nphi {
                let phi = (k as f64 + 0.5) * dphi;
                nodes.push(Point::new(s * phi.cos(), s * phi.sin(), *c));
                weights.push(w * dphi);
            }
        }
        SphereRule { order, nodes, weights }
    }

    /// `int_{dB_r(c)} g dS`.
    pub fn integrate<T>(&self, center: &Point, r: f64, mut g: impl FnMut(&Point, &Point) -> T) -> T
    where
        T: std::ops::Mul<f64, Output = T> + std::ops::Add<Output = T> + Default,
    {
        let mut acc = T::default();
        for (nu, w) in self.nodes.iter().zip(&self.weights) {
            let x = center + nu * r;
            acc = acc + g(&x, nu) * (w * r * r);
        }
        acc
    }

    /// Mean of `g` over the sphere `dB_r(c)`.
    pub fn average(&self, center: &Point, r: f64, mut g: impl FnMut(&Point) -> f64) -> f64 {
        let mut acc = 0.0;
        for (nu, w) in self.nodes.iter().zip(&self.weights) {
            acc += g(&(center + nu * r)) * w;
        }
        acc / (4.0 * PI)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre(8);
        assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-14);
        // degree 14 is within 2n - 1
        let int: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(14)).sum();
        assert!((int - 2.0 / 15.0).abs() < 1e-14);
        let (x, _) = gauss_legendre(5);
        assert!(x[2].abs() < 1e-15);
        assert!(x.windows(2).all(|p| p[0] < p[1]));
    }

    #[test]
    fn sphere_rule_moments() {
        let rule = SphereRule::new(16);
        assert!((rule.weights.iter().sum::<f64>() - 4.0 * PI).abs() < 1e-12);
        // int x^2 = 4 pi / 3, int x^2 y^2 z^2 = 4 pi / 105
        let c = Point::zeros();
        let x2 = rule.integrate(&c, 1.0, |x, _| x.x * x.x);
        assert!((x2 - 4.0 * PI / 3.0).abs() < 1e-12);
        let m = rule.integrate(&c, 1.0, |x, _| (x.x * x.y * x.z).powi(2));
        assert!((m - 4.0 * PI / 105.0).abs() < 1e-13);
        let area = rule.integrate(&Point::new(1.0, 2.0, 3.0), 2.0, |_, _| 1.0);
        assert!((area - 16.0 * PI).abs() < 1e-11);
    }
}
