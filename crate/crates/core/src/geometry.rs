//! Spatial types and the forward delay model.
//!
//! Each baseline is a pair of reflectors `R_a`, `R_b` with a biphoton
//! source/detector station between them. A photon pair leaves the source,
//! travels to the user's retroreflector via one reflector each and comes back
//! the same way. The balanced-interferometer observable is the optical path
//! delay `s` that must be inserted on the `R_b` arm to equalise the two round
//! trips:
//!
//! ```text
//! s = |r − R_a| + |R_a − E| − |r − R_b| − |E − R_b|
//! ```
//!
//! With the source at the baseline midpoint the two source legs cancel and
//! `|r − R_a| = |r − R_b| + s`, a hyperboloid of revolution with foci
//! `R_a`, `R_b`. Positive `s` means the `R_a` leg is the longer one.

use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{QpsError, Result};
use crate::solver::DelayTriple;

/// Speed of light in vacuum, m/s (exact).
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Relative tolerance used by [`Baseline::is_midpoint_source`].
pub const MIDPOINT_REL_TOL: f64 = 1e-9;

/// A position (or displacement) in meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const ORIGIN: Point3 = Point3::new(0.0, 0.0, 0.0);

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    /// Checked constructor; rejects NaN and infinities.
    pub fn try_new(x: f64, y: f64, z: f64) -> Result<Self> {
        let p = Self::new(x, y, z);
        p.ensure_finite("point")?;
        Ok(p)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub(crate) fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(QpsError::invalid(format!("{what} has non-finite component: {self}")))
        }
    }

    pub fn norm(&self) -> f64 {
        self.to_vector().norm()
    }

    pub fn distance(&self, other: &Point3) -> f64 {
        (*self - *other).norm()
    }

    pub fn dot(&self, other: &Point3) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn to_vector(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self::new(v.x, v.y, v.z)
    }

    pub fn to_array(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

impl From<[f64; 3]> for Point3 {
    fn from(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }
}

impl From<Point3> for [f64; 3] {
    fn from(p: Point3) -> Self {
        p.to_array()
    }
}

impl fmt::Display for Point3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.x, self.y, self.z)
    }
}

impl Add for Point3 {
    type Output = Point3;
    fn add(self, rhs: Point3) -> Point3 {
        Point3::new(self.x + rhs.x, self.y + rhs.y, self.z + rhs.z)
    }
}

impl Sub for Point3 {
    type Output = Point3;
    fn sub(self, rhs: Point3) -> Point3 {
        Point3::new(self.x - rhs.x, self.y - rhs.y, self.z - rhs.z)
    }
}

impl Mul<f64> for Point3 {
    type Output = Point3;
    fn mul(self, k: f64) -> Point3 {
        Point3::new(self.x * k, self.y * k, self.z * k)
    }
}

impl Neg for Point3 {
    type Output = Point3;
    fn neg(self) -> Point3 {
        Point3::new(-self.x, -self.y, -self.z)
    }
}

/// One interferometer: two reflector endpoints and the source/detector station.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BaselineDoc", into = "BaselineDoc")]
pub struct Baseline {
    endpoint_a: Point3,
    endpoint_b: Point3,
    source: Point3,
}

#[derive(Serialize, Deserialize)]
struct BaselineDoc {
    a: Point3,
    b: Point3,
    source: Point3,
}

impl TryFrom<BaselineDoc> for Baseline {
    type Error = QpsError;
    fn try_from(doc: BaselineDoc) -> Result<Self> {
        Baseline::new(doc.a, doc.b, doc.source)
    }
}

impl From<Baseline> for BaselineDoc {
    fn from(b: Baseline) -> Self {
        BaselineDoc {
            a: b.endpoint_a,
            b: b.endpoint_b,
            source: b.source,
        }
    }
}

impl Baseline {
    pub fn new(endpoint_a: Point3, endpoint_b: Point3, source: Point3) -> Result<Self> {
        endpoint_a.ensure_finite("baseline endpoint a")?;
        endpoint_b.ensure_finite("baseline endpoint b")?;
        source.ensure_finite("baseline source")?;
        if endpoint_a.distance(&endpoint_b) == 0.0 {
            return Err(QpsError::invalid(format!(
                "baseline endpoints coincide at {endpoint_a}"
            )));
        }
        Ok(Self {
            endpoint_a,
            endpoint_b,
            source,
        })
    }

    /// Baseline with the source at the midpoint of the two endpoints.
    pub fn with_midpoint_source(endpoint_a: Point3, endpoint_b: Point3) -> Result<Self> {
        Self::new(endpoint_a, endpoint_b, (endpoint_a + endpoint_b) * 0.5)
    }

    pub fn endpoint_a(&self) -> Point3 {
        self.endpoint_a
    }

    pub fn endpoint_b(&self) -> Point3 {
        self.endpoint_b
    }

    pub fn source(&self) -> Point3 {
        self.source
    }

    pub fn length(&self) -> f64 {
        self.endpoint_a.distance(&self.endpoint_b)
    }

    pub fn midpoint(&self) -> Point3 {
        (self.endpoint_a + self.endpoint_b) * 0.5
    }

    /// True when the source is equidistant from both endpoints.
    pub fn is_midpoint_source(&self) -> bool {
        let da = self.source.distance(&self.endpoint_a);
        let db = self.source.distance(&self.endpoint_b);
        (da - db).abs() <= MIDPOINT_REL_TOL * da.max(db)
    }

    /// `|E − R_a| − |E − R_b|`; zero for a midpoint source.
    pub fn source_leg_difference(&self) -> f64 {
        leg_difference(self.source, self.endpoint_a, self.endpoint_b)
    }
}

/// Three baselines fixing the spatial reference frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ConstellationDoc", into = "ConstellationDoc")]
pub struct Constellation {
    baselines: [Baseline; 3],
}

#[derive(Serialize, Deserialize)]
struct ConstellationDoc {
    baselines: Vec<Baseline>,
}

impl TryFrom<ConstellationDoc> for Constellation {
    type Error = QpsError;
    fn try_from(doc: ConstellationDoc) -> Result<Self> {
        let n = doc.baselines.len();
        let baselines: [Baseline; 3] = doc.baselines.try_into().map_err(|_| {
            QpsError::invalid(format!("constellation needs exactly 3 baselines, got {n}"))
        })?;
        Ok(Constellation::new(baselines))
    }
}

impl From<Constellation> for ConstellationDoc {
    fn from(c: Constellation) -> Self {
        ConstellationDoc {
            baselines: c.baselines.to_vec(),
        }
    }
}

impl Constellation {
    pub fn new(baselines: [Baseline; 3]) -> Self {
        Self { baselines }
    }

    pub fn baselines(&self) -> &[Baseline; 3] {
        &self.baselines
    }

    /// Parse the JSON document form `{"baselines":[{"a":[..],"b":[..],"source":[..]}, ..]}`.
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn all_midpoint_sources(&self) -> bool {
        self.baselines.iter().all(Baseline::is_midpoint_source)
    }

    /// Largest distance of any endpoint from the origin; sets the length scale
    /// for tolerances.
    pub fn extent(&self) -> f64 {
        self.baselines
            .iter()
            .flat_map(|b| [b.endpoint_a.norm(), b.endpoint_b.norm()])
            .fold(0.0, f64::max)
    }
}

/// A slab of refractive material inserted in the `R_b` arm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpticalDelay {
    /// Geometric thickness along the beam, m.
    pub thickness: f64,
    /// Effective refractive index, ≥ 1.
    pub index: f64,
}

impl OpticalDelay {
    pub const NONE: OpticalDelay = OpticalDelay {
        thickness: 0.0,
        index: 1.0,
    };

    pub fn new(thickness: f64, index: f64) -> Result<Self> {
        if !(thickness.is_finite() && thickness >= 0.0) {
            return Err(QpsError::invalid(format!("delay thickness {thickness} must be >= 0")));
        }
        if !(index.is_finite() && index >= 1.0) {
            return Err(QpsError::invalid(format!("refractive index {index} must be >= 1")));
        }
        Ok(Self { thickness, index })
    }

    /// Excess optical path `(n − 1)·d`, m.
    pub fn delay_length(&self) -> f64 {
        (self.index - 1.0) * self.thickness
    }

    /// Excess propagation time `(n − 1)·d / c`, s.
    pub fn delay_time(&self) -> f64 {
        self.delay_length() / SPEED_OF_LIGHT
    }
}

/// Round-trip times of the two photons of a pair, seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundTripTimes {
    /// Path through `R_a`.
    pub left: f64,
    /// Path through `R_b`, including the optical delay.
    pub right: f64,
}

pub fn round_trip_times(
    baseline: &Baseline,
    user: Point3,
    delay: OpticalDelay,
) -> Result<RoundTripTimes> {
    user.ensure_finite("user")?;
    let left = user.distance(&baseline.endpoint_a) + baseline.endpoint_a.distance(&baseline.source);
    let right = user.distance(&baseline.endpoint_b)
        + baseline.source.distance(&baseline.endpoint_b)
        + delay.delay_length();
    Ok(RoundTripTimes {
        left: 2.0 * left / SPEED_OF_LIGHT,
        right: 2.0 * right / SPEED_OF_LIGHT,
    })
}

/// Optical delay length that balances `baseline` for a user at `user`.
///
/// Uses the general source placement; for a midpoint source this is
/// `|user − R_a| − |user − R_b|`.
pub fn balanced_delay(baseline: &Baseline, user: Point3) -> Result<f64> {
    user.ensure_finite("user")?;
    Ok(balanced_delay_unchecked(baseline, user))
}

pub(crate) fn balanced_delay_unchecked(baseline: &Baseline, user: Point3) -> f64 {
    leg_difference(user, baseline.endpoint_a, baseline.endpoint_b) + baseline.source_leg_difference()
}

/// `|p − a| − |p − b|` without cancellation: the difference of squares is
/// `(b − a)·(2p − a − b)`, divided by the sum of the distances.
fn leg_difference(p: Point3, a: Point3, b: Point3) -> f64 {
    let sum = p.distance(&a) + p.distance(&b);
    (b - a).dot(&(p * 2.0 - a - b)) / sum
}

/// The three balanced delays; the map the solver inverts.
pub fn forward_delays(constellation: &Constellation, user: Point3) -> Result<DelayTriple> {
    user.ensure_finite("user")?;
    let [b1, b2, b3] = constellation.baselines();
    Ok(DelayTriple::new(
        balanced_delay_unchecked(b1, user),
        balanced_delay_unchecked(b2, user),
        balanced_delay_unchecked(b3, user),
    ))
}
