//! The marked Poisson point process of hole centers and radius marks.
//!
//! Centers live in the blown-up domain `(1/eps) D` with intensity `lambda`;
//! every center carries an i.i.d. radius mark `rho >= 1`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{DomainSpec, Point};
use crate::rng;

pub const DEFAULT_COUNT_CAP: f64 = 1e8;

const STREAM_COUNT: u64 = 0;
const STREAM_CENTERS: u64 = 1;
const STREAM_MARKS: u64 = 2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PointProcessError {
    #[error("invalid process parameters: {0}")]
    InvalidParams(String),
    #[error("expected point count {expected:.3e} exceeds the cap {cap:.3e}")]
    ExpectedCountOverflow { expected: f64, cap: f64 },
    #[error("cannot view a realization at eps={requested} finer than its sampling scale eps={sampled}")]
    FinerScale { requested: f64, sampled: f64 },
    #[error("blown-up domains are nested only when the domain contains the origin")]
    NotNested,
}

/// Law of the radius marks; all mass sits on `[1, inf)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum RadiiLaw {
    /// Point mass at `rho0 >= 1`.
    Constant(f64),
    /// Pareto on `[1, inf)` with density `s rho^(-s-1)`.
    ParetoShifted(f64),
    /// Uniform on `[1, b]`.
    BoundedUniform(f64),
}

impl RadiiLaw {
    pub fn validate(&self) -> Result<(), String> {
        match *self {
            RadiiLaw::Constant(r) if !(r.is_finite() && r >= 1.0) => Err(format!("constant radius {r} must be >= 1")),
            RadiiLaw::ParetoShifted(s) if !(s.is_finite() && s > 0.0) => Err(format!("Pareto shape {s} must be > 0")),
            RadiiLaw::BoundedUniform(b) if !(b.is_finite() && b >= 1.0) => {
                Err(format!("uniform upper bound {b} must be >= 1"))
            }
            _ => Ok(()),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            RadiiLaw::Constant(r) => r,
            RadiiLaw::ParetoShifted(s) => {
                // inverse CDF with U in (0, 1]
                let u: f64 = 1.0 - rng.random::<f64>();
                u.powf(-1.0 / s)
            }
            RadiiLaw::BoundedUniform(b) => 1.0 + (b - 1.0) * rng.random::<f64>(),
        }
    }

    /// Exclusive upper limit of the exponents with a finite moment
    /// (`inf` for bounded laws).
    pub fn moment_threshold(&self) -> f64 {
        match *self {
            RadiiLaw::ParetoShifted(s) => s,
            _ => f64::INFINITY,
        }
    }
}

/// `E[rho^q]` in closed form; `+inf` when the moment diverges.
pub fn moment(law: &RadiiLaw, q: f64) -> f64 {
    assert!(q >= 0.0, "moment exponent must be nonnegative");
    match *law {
        RadiiLaw::Constant(r) => r.powf(q),
        RadiiLaw::ParetoShifted(s) => {
            if q < s {
                s / (s - q)
            } else {
                f64::INFINITY
            }
        }
        RadiiLaw::BoundedUniform(b) => {
            if b == 1.0 {
                1.0
            } else {
                (b.powf(q + 1.0) - 1.0) / ((q + 1.0) * (b - 1.0))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BetaRange {
    /// Every `beta > 0` works (bounded radii).
    Unbounded,
    /// Every `beta` in `(0, sup)` works; `sup` itself diverges.
    Below(f64),
    /// The configured probe value works.
    Probe(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Admissibility {
    Admissible,
    AdmissibleStokes(BetaRange),
    Inadmissible,
}

/// Moment conditions on the marks: `E[rho^(3/alpha)] < inf` for the scalar
/// problem, `E[rho^(3/alpha + beta)] < inf` for some `beta > 0` for Stokes.
///
/// With `probe_beta` set, only that `beta` is tested. With `require_beta`,
/// a law without any Stokes `beta` is reported inadmissible.
pub fn check_admissibility(law: &RadiiLaw, alpha: f64, require_beta: bool, probe_beta: Option<f64>) -> Admissibility {
    let q = 3.0 / alpha;
    if !moment(law, q).is_finite() {
        return Admissibility::Inadmissible;
    }
    let stokes = match probe_beta {
        Some(beta) if beta > 0.0 && moment(law, q + beta).is_finite() => Some(BetaRange::Probe(beta)),
        Some(_) => None,
        None => {
            let sup = law.moment_threshold() - q;
            if sup.is_infinite() {
                Some(BetaRange::Unbounded)
            } else if sup > 0.0 {
                Some(BetaRange::Below(sup))
            } else {
                None
            }
        }
    };
    match stokes {
        Some(range) => Admissibility::AdmissibleStokes(range),
        None if require_beta => Admissibility::Inadmissible,
        None => Admissibility::Admissible,
    }
}

impl fmt::Display for RadiiLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RadiiLaw::Constant(r) => write!(f, "constant:{r}"),
            RadiiLaw::ParetoShifted(s) => write!(f, "pareto:{s}"),
            RadiiLaw::BoundedUniform(b) => write!(f, "uniform:{b}"),
        }
    }
}

impl FromStr for RadiiLaw {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, value) = s
            .trim()
            .split_once(':')
            .ok_or_else(|| format!("radii law `{s}` must look like `kind:value`"))?;
        let v: f64 = value.trim().parse().map_err(|e| format!("bad radii-law parameter `{value}`: {e}"))?;
        let law = match kind.trim() {
            "constant" => RadiiLaw::Constant(v),
            "pareto" => RadiiLaw::ParetoShifted(v),
            "uniform" => RadiiLaw::BoundedUniform(v),
            other => return Err(format!("unknown radii law `{other}`")),
        };
        law.validate()?;
        Ok(law)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessParams {
    /// Points per unit volume of the blown-up domain.
    pub lambda: f64,
    pub eps: f64,
    pub alpha: f64,
    pub domain: DomainSpec,
    pub radii_law: RadiiLaw,
    pub seed: u64,
    /// Refuse to sample when `lambda |D| / eps^3` exceeds this.
    pub count_cap: f64,
}

impl ProcessParams {
    pub fn new(lambda: f64, eps: f64, alpha: f64, domain: DomainSpec, radii_law: RadiiLaw, seed: u64) -> Self {
        Self { lambda, eps, alpha, domain, radii_law, seed, count_cap: DEFAULT_COUNT_CAP }
    }

    pub fn with_eps(&self, eps: f64) -> Self {
        Self { eps, ..self.clone() }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<(), PointProcessError> {
        let bad = |m: String| Err(PointProcessError::InvalidParams(m));
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return bad(format!("lambda={} must be positive", self.lambda));
        }
        if !(self.eps > 0.0 && self.eps < 1.0) {
            return bad(format!("eps={} must lie in (0,1)", self.eps));
        }
        if !(self.alpha > 1.0 && self.alpha < 3.0) {
            return bad(format!("alpha={} must lie in (1,3)", self.alpha));
        }
        self.domain.validate().map_err(PointProcessError::InvalidParams)?;
        self.radii_law.validate().map_err(PointProcessError::InvalidParams)?;
        Ok(())
    }

    /// `lambda |D| eps^-3`.
    pub fn expected_count(&self) -> f64 {
        self.lambda * self.domain.volume() / self.eps.powi(3)
    }

    /// The blown-up domain `(1/eps) D` holding the centers.
    pub fn blown_up_domain(&self) -> DomainSpec {
        self.domain.scaled(1.0 / self.eps)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarkedPoint {
    /// Center in blown-up coordinates.
    pub z: [f64; 3],
    pub rho: f64,
}

impl MarkedPoint {
    pub fn center(&self) -> Point {
        Point::from(self.z)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Realization {
    pub points: Vec<MarkedPoint>,
    pub params: ProcessParams,
}

impl Realization {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// The same point process viewed at the coarser scale `eps`: keeps the
    /// centers with `eps z` in `D`. For a convex `D` containing the origin,
    /// `(1/eps) D` grows as `eps` shrinks, so this is an exact sample of the
    /// process at `eps`, coupled with the finer one.
    pub fn coarsen(&self, eps: f64) -> Result<Realization, PointProcessError> {
        if eps < self.params.eps {
            return Err(PointProcessError::FinerScale { requested: eps, sampled: self.params.eps });
        }
        let domain = self.params.domain;
        if !domain.contains(&Point::zeros()) {
            return Err(PointProcessError::NotNested);
        }
        let points = self
            .points
            .iter()
            .filter(|p| domain.contains(&(p.center() * eps)))
            .copied()
            .collect();
        Ok(Realization { points, params: self.params.with_eps(eps) })
    }

    pub fn empirical_moment(&self, q: f64) -> f64 {
        if self.points.is_empty() {
            return f64::NAN;
        }
        self.points.iter().map(|p| p.rho.powf(q)).sum::<f64>() / self.points.len() as f64
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DumpError {
    #[error("empty dump")]
    Empty,
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("header announces {expected} points, found {found}")]
    CountMismatch { expected: usize, found: usize },
}

const DUMP_MAGIC: &str = "# darcy-realization";

impl Realization {
    /// Text dump: one header line with the parameters, then one
    /// `z_x z_y z_z rho` line per point. Floats use the shortest
    /// representation that parses back to the same bits.
    pub fn to_dump(&self) -> String {
        let p = &self.params;
        let mut out = format!(
            "{DUMP_MAGIC} lambda={} eps={} alpha={} domain={} law={} seed={} cap={} count={}\n",
            p.lambda,
            p.eps,
            p.alpha,
            p.domain,
            p.radii_law,
            p.seed,
            p.count_cap,
            self.points.len()
        );
        for pt in &self.points {
            out.push_str(&format!("{} {} {} {}\n", pt.z[0], pt.z[1], pt.z[2], pt.rho));
        }
        out
    }

    pub fn from_dump(text: &str) -> Result<Realization, DumpError> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(DumpError::Empty)?;
        let bad = |line: usize, msg: String| DumpError::Malformed { line, msg };
        let fields = header
            .strip_prefix(DUMP_MAGIC)
            .ok_or_else(|| bad(1, "missing realization header".into()))?;

        let mut kv = std::collections::BTreeMap::new();
        for tok in fields.split_whitespace() {
            let (k, v) = tok.split_once('=').ok_or_else(|| bad(1, format!("expected key=value, got `{tok}`")))?;
            if kv.insert(k, v).is_some() {
                return Err(bad(1, format!("duplicate key `{k}`")));
            }
        }
        let get = |k: &str| kv.get(k).copied().ok_or_else(|| bad(1, format!("missing key `{k}`")));
        let num = |k: &str| -> Result<f64, DumpError> {
            get(k)?.parse::<f64>().map_err(|e| bad(1, format!("`{k}`: {e}")))
        };
        let mut params = ProcessParams::new(
            num("lambda")?,
            num("eps")?,
            num("alpha")?,
            get("domain")?.parse().map_err(|e| bad(1, e))?,
            get("law")?.parse().map_err(|e| bad(1, e))?,
            get("seed")?.parse().map_err(|e| bad(1, format!("`seed`: {e}")))?,
        );
        params.count_cap = num("cap")?;
        params.validate().map_err(|e| bad(1, e.to_string()))?;
        let count: usize = get("count")?.parse().map_err(|e| bad(1, format!("`count`: {e}")))?;
        if kv.len() != 8 {
            return Err(bad(1, "unexpected header keys".into()));
        }

        let mut points = Vec::with_capacity(count.min(1 << 20));
        for (i, line) in lines {
            let lineno = i + 1;
            let vals = line
                .split(' ')
                .map(|v| v.parse::<f64>().map_err(|e| bad(lineno, format!("`{v}`: {e}"))))
                .collect::<Result<Vec<_>, _>>()?;
            let [x, y, z, rho] = vals[..] else {
                return Err(bad(lineno, format!("expected 4 numbers, got {}", vals.len())));
            };
            let c = Point::new(x, y, z);
            if !c.iter().all(|v| v.is_finite()) || !params.domain.contains(&(c * params.eps)) {
                return Err(bad(lineno, "center outside the blown-up domain".into()));
            }
            if !(rho.is_finite() && rho >= 1.0) {
                return Err(bad(lineno, format!("mark {rho} below 1")));
            }
            points.push(MarkedPoint { z: [x, y, z], rho });
        }
        if points.len() != count {
            return Err(DumpError::CountMismatch { expected: count, found: points.len() });
        }
        Ok(Realization { points, params })
    }
}

/// Draw one realization. The count, centers and marks come from separate
/// streams of the same seed, so the result is a pure function of `params`.
pub fn sample_realization(params: &ProcessParams) -> Result<Realization, PointProcessError> {
    params.validate()?;
    let expected = params.expected_count();
    if expected > params.count_cap {
        return Err(PointProcessError::ExpectedCountOverflow { expected, cap: params.count_cap });
    }
    let count = {
        let mut r = rng::stream(params.seed, STREAM_COUNT);
        let poisson = Poisson::new(expected)
            .map_err(|e| PointProcessError::InvalidParams(format!("Poisson mean {expected}: {e}")))?;
        poisson.sample(&mut r) as usize
    };

    let region = params.blown_up_domain();
    let bbox = region.bounding_box();
    let extent = bbox.extent();
    let mut centers = rng::stream(params.seed, STREAM_CENTERS);
    let mut marks = rng::stream(params.seed, STREAM_MARKS);
    let mut points = Vec::with_capacity(count);
    while points.len() < count {
        let z = Point::new(
            bbox.min.x + extent.x * centers.random::<f64>(),
            bbox.min.y + extent.y * centers.random::<f64>(),
            bbox.min.z + extent.z * centers.random::<f64>(),
        );
        // rejection only bites for ball domains
        if !region.contains(&z) {
            continue;
        }
        let rho = params.radii_law.sample(&mut marks);
        points.push(MarkedPoint { z: [z.x, z.y, z.z], rho });
    }
    Ok(Realization { points, params: params.clone() })
}
