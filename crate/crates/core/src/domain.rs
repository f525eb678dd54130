//! Macroscopic domains `D`: axis-aligned boxes and balls.
//!
//! Both shapes are star-shaped with respect to their center, which is all
//! the hole construction needs.

use std::fmt;
use std::str::FromStr;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

pub type Point = Vector3<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DomainSpec {
    Box { min: [f64; 3], max: [f64; 3] },
    Ball { center: [f64; 3], radius: f64 },
}

/// An axis-aligned box, used for bounding boxes and query regions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Point,
    pub max: Point,
}

impl Aabb {
    pub fn new(min: Point, max: Point) -> Self {
        Self { min, max }
    }

    pub fn cube(center: Point, half_side: f64) -> Self {
        let d = Point::repeat(half_side);
        Self::new(center - d, center + d)
    }

    pub fn volume(&self) -> f64 {
        let e = self.max - self.min;
        e.x.max(0.0) * e.y.max(0.0) * e.z.max(0.0)
    }

    pub fn extent(&self) -> Point {
        self.max - self.min
    }

    pub fn diameter(&self) -> f64 {
        self.extent().norm()
    }

    pub fn contains(&self, p: &Point) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn contains_box(&self, other: &Aabb) -> bool {
        (0..3).all(|i| other.min[i] >= self.min[i] && other.max[i] <= self.max[i])
    }

    pub fn intersection(&self, other: &Aabb) -> Aabb {
        Aabb::new(self.min.sup(&other.min), self.max.inf(&other.max))
    }

    /// Volume of the intersection; zero when disjoint.
    pub fn overlap_volume(&self, other: &Aabb) -> f64 {
        self.intersection(other).volume()
    }

    pub fn union(&self, other: &Aabb) -> Aabb {
        Aabb::new(self.min.inf(&other.min), self.max.sup(&other.max))
    }

    /// Squared distance from `p` to the box (zero inside).
    pub fn distance_squared(&self, p: &Point) -> f64 {
        (0..3)
            .map(|i| {
                let d = (self.min[i] - p[i]).max(0.0).max(p[i] - self.max[i]);
                d * d
            })
            .sum()
    }

    pub fn intersects_ball(&self, center: &Point, radius: f64) -> bool {
        self.distance_squared(center) <= radius * radius
    }

    /// Whether the closed ball lies inside the box.
    pub fn contains_ball(&self, center: &Point, radius: f64) -> bool {
        (0..3).all(|i| center[i] - radius >= self.min[i] && center[i] + radius <= self.max[i])
    }
}

impl DomainSpec {
    pub fn unit_cube() -> Self {
        DomainSpec::Box { min: [0.0; 3], max: [1.0; 3] }
    }

    /// The cube `[-1/2, 1/2]^3`, star-shaped about the origin.
    pub fn centered_unit_cube() -> Self {
        DomainSpec::Box { min: [-0.5; 3], max: [0.5; 3] }
    }

    pub fn unit_ball() -> Self {
        DomainSpec::Ball { center: [0.0; 3], radius: 1.0 }
    }

    pub fn validate(&self) -> Result<(), String> {
        match self {
            DomainSpec::Box { min, max } => {
                if min.iter().chain(max).any(|v| !v.is_finite()) {
                    return Err("box corners must be finite".into());
                }
                if (0..3).any(|i| max[i] <= min[i]) {
                    return Err("box must have positive extent along every axis".into());
                }
            }
            DomainSpec::Ball { center, radius } => {
                if center.iter().any(|v| !v.is_finite()) || !radius.is_finite() || *radius <= 0.0 {
                    return Err("ball needs a finite center and a positive radius".into());
                }
            }
        }
        Ok(())
    }

    pub fn center(&self) -> Point {
        match self {
            DomainSpec::Box { min, max } => {
                Point::new((min[0] + max[0]) / 2.0, (min[1] + max[1]) / 2.0, (min[2] + max[2]) / 2.0)
            }
            DomainSpec::Ball { center, .. } => Point::from(*center),
        }
    }

    pub fn volume(&self) -> f64 {
        match self {
            DomainSpec::Box { .. } => self.bounding_box().volume(),
            DomainSpec::Ball { radius, .. } => 4.0 / 3.0 * std::f64::consts::PI * radius.powi(3),
        }
    }

    pub fn bounding_box(&self) -> Aabb {
        match self {
            DomainSpec::Box { min, max } => Aabb::new(Point::from(*min), Point::from(*max)),
            DomainSpec::Ball { center, radius } => Aabb::cube(Point::from(*center), *radius),
        }
    }

    /// Largest distance from the center to a point of the closure.
    pub fn circumradius(&self) -> f64 {
        match self {
            DomainSpec::Box { .. } => self.bounding_box().diameter() / 2.0,
            DomainSpec::Ball { radius, .. } => *radius,
        }
    }

    pub fn diameter(&self) -> f64 {
        2.0 * self.circumradius()
    }

    /// Membership in the closed domain.
    pub fn contains(&self, p: &Point) -> bool {
        match self {
            DomainSpec::Box { .. } => self.bounding_box().contains(p),
            DomainSpec::Ball { center, radius } => (p - Point::from(*center)).norm_squared() <= radius * radius,
        }
    }

    /// Membership in the open domain.
    pub fn contains_strictly(&self, p: &Point) -> bool {
        match self {
            DomainSpec::Box { min, max } => (0..3).all(|i| p[i] > min[i] && p[i] < max[i]),
            DomainSpec::Ball { center, radius } => (p - Point::from(*center)).norm_squared() < radius * radius,
        }
    }

    /// Distance from an interior point to the boundary; negative outside.
    pub fn distance_to_boundary(&self, p: &Point) -> f64 {
        match self {
            DomainSpec::Box { min, max } => (0..3)
                .map(|i| (p[i] - min[i]).min(max[i] - p[i]))
                .fold(f64::INFINITY, f64::min),
            DomainSpec::Ball { center, radius } => radius - (p - Point::from(*center)).norm(),
        }
    }

    pub fn contains_box(&self, b: &Aabb) -> bool {
        match self {
            DomainSpec::Box { .. } => self.bounding_box().contains_box(b),
            DomainSpec::Ball { .. } => {
                // a box is inside a convex set iff its corners are
                (0..8).all(|c| {
                    let corner = Point::new(
                        if c & 1 == 0 { b.min.x } else { b.max.x },
                        if c & 2 == 0 { b.min.y } else { b.max.y },
                        if c & 4 == 0 { b.min.z } else { b.max.z },
                    );
                    self.contains(&corner)
                })
            }
        }
    }

    /// Distance from an interior point `p` to the boundary along the unit
    /// direction `dir`.
    pub fn exit_distance(&self, p: &Point, dir: &Point) -> f64 {
        match self {
            DomainSpec::Box { min, max } => (0..3)
                .filter_map(|i| {
                    if dir[i] > 0.0 {
                        Some((max[i] - p[i]) / dir[i])
                    } else if dir[i] < 0.0 {
                        Some((min[i] - p[i]) / dir[i])
                    } else {
                        None
                    }
                })
                .fold(f64::INFINITY, f64::min)
                .max(0.0),
            DomainSpec::Ball { center, radius } => {
                let q = p - Point::from(*center);
                let b = q.dot(dir);
                let c = q.norm_squared() - radius * radius;
                (-b + (b * b - c).max(0.0).sqrt()).max(0.0)
            }
        }
    }

    /// The domain `(1/eps) * self`.
    pub fn scaled(&self, factor: f64) -> DomainSpec {
        match self {
            DomainSpec::Box { min, max } => DomainSpec::Box {
                min: min.map(|v| v * factor),
                max: max.map(|v| v * factor),
            },
            DomainSpec::Ball { center, radius } => DomainSpec::Ball {
                center: center.map(|v| v * factor),
                radius: radius * factor,
            },
        }
    }
}

impl fmt::Display for DomainSpec {
    /// `box:x0,y0,z0,x1,y1,z1` or `ball:cx,cy,cz,r`, floats in shortest
    /// round-trip form.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DomainSpec::Box { min, max } => write!(
                f,
                "box:{},{},{},{},{},{}",
                min[0], min[1], min[2], max[0], max[1], max[2]
            ),
            DomainSpec::Ball { center, radius } => {
                write!(f, "ball:{},{},{},{}", center[0], center[1], center[2], radius)
            }
        }
    }
}

impl FromStr for DomainSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, rest) = s
            .trim()
            .split_once(':')
            .ok_or_else(|| format!("domain `{s}` lacks a `kind:` prefix"))?;
        let values = rest
            .split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|e| format!("bad number `{v}`: {e}")))
            .collect::<Result<Vec<_>, _>>()?;
        let domain = match (kind.trim(), values.as_slice()) {
            ("box", [a, b, c, d, e, g]) => DomainSpec::Box { min: [*a, *b, *c], max: [*d, *e, *g] },
            ("ball", [a, b, c, r]) => DomainSpec::Ball { center: [*a, *b, *c], radius: *r },
            ("box", _) => return Err("box needs 6 numbers".into()),
            ("ball", _) => return Err("ball needs 4 numbers".into()),
            (other, _) => return Err(format!("unknown domain kind `{other}`")),
        };
        domain.validate()?;
        Ok(domain)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_cube_measures() {
        let d = DomainSpec::unit_cube();
        assert_eq!(d.volume(), 1.0);
        assert!((d.circumradius() - 3f64.sqrt() / 2.0).abs() < 1e-15);
        assert!(d.contains(&Point::new(1.0, 0.0, 0.5)));
        assert!(!d.contains_strictly(&Point::new(1.0, 0.5, 0.5)));
        assert!((d.distance_to_boundary(&Point::new(0.2, 0.5, 0.9)) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn exit_distance_matches_geometry() {
        let cube = DomainSpec::centered_unit_cube();
        let diag = Point::new(1.0, 1.0, 1.0).normalize();
        assert!((cube.exit_distance(&Point::zeros(), &diag) - 3f64.sqrt() / 2.0).abs() < 1e-14);
        let ball = DomainSpec::unit_ball();
        assert!((ball.exit_distance(&Point::new(0.5, 0.0, 0.0), &Point::x()) - 0.5).abs() < 1e-14);
        assert!((ball.exit_distance(&Point::new(0.5, 0.0, 0.0), &-Point::x()) - 1.5).abs() < 1e-14);
    }

    #[test]
    fn parse_and_display_round_trip() {
        for d in [DomainSpec::unit_cube(), DomainSpec::unit_ball(), DomainSpec::centered_unit_cube()] {
            let back: DomainSpec = d.to_string().parse().unwrap();
            assert_eq!(back, d);
        }
        assert!("box:0,0,0,1,1".parse::<DomainSpec>().is_err());
        assert!("ball:0,0,0,-1".parse::<DomainSpec>().is_err());
        assert!("torus:1".parse::<DomainSpec>().is_err());
    }

    #[test]
    fn ball_contains_box_by_corners() {
        let ball = DomainSpec::unit_ball();
        assert!(ball.contains_box(&Aabb::cube(Point::zeros(), 0.5)));
        assert!(!ball.contains_box(&Aabb::cube(Point::zeros(), 0.6)));
    }
}
