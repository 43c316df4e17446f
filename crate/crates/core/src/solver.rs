//! Inversion of the three hyperboloid equations for the user position.
//!
//! Damped Gauss–Newton on `f_i(r) = s_i(r) − s_i^measured` with the analytic
//! Jacobian. A full Newton step is tried first; if it does not reduce the
//! residual norm, Levenberg damping is increased until it does.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{QpsError, Result};
use crate::gdop::{condition_number, forward_jacobian, DEGENERACY_CONDITION};
use crate::geometry::{balanced_delay_unchecked, Constellation, Point3};

pub const MAX_ITERATIONS: usize = 200;
/// Relative residual tolerance, scaled by `1 + |r|`.
pub const RESIDUAL_TOLERANCE: f64 = 1e-12;
/// Absolute step tolerance, m.
pub const STEP_TOLERANCE: f64 = 1e-14;
/// Converged multi-start results closer than this are one solution, m.
pub const CLUSTER_RADIUS: f64 = 1e-6;

const MAX_DAMPING_TRIES: usize = 40;
/// Steps are limited to this fraction of the distance to the nearest
/// reflector, the length scale over which the residuals stay near-linear.
const TRUST_FRACTION: f64 = 0.25;

/// Measured balancing delays `s_i = c·Δt_i`, m.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelayTriple {
    pub s1: f64,
    pub s2: f64,
    pub s3: f64,
}

impl DelayTriple {
    pub const fn new(s1: f64, s2: f64, s3: f64) -> Self {
        Self { s1, s2, s3 }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.s1, self.s2, self.s3]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    /// Rejects non-finite delays and delays no point in space can produce.
    pub fn validate(&self, constellation: &Constellation) -> Result<()> {
        for (i, (s, b)) in self
            .as_array()
            .into_iter()
            .zip(constellation.baselines())
            .enumerate()
        {
            if !s.is_finite() {
                return Err(QpsError::invalid(format!("delay s{} = {s} is not finite", i + 1)));
            }
            // achievable delays lie strictly inside leg_difference ± length
            let offset = balanced_delay_unchecked(b, b.midpoint());
            if (s - offset).abs() >= b.length() {
                return Err(QpsError::DegenerateDelay {
                    baseline: i + 1,
                    delay: s,
                    length: b.length(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveResult {
    pub position: Point3,
    /// Euclidean norm of the three residuals at `position`, m.
    pub residual_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Condition number of the forward Jacobian at `position`.
    pub condition_number: f64,
}

/// `f_i = s_i(candidate) − s_i`, one entry per baseline.
pub fn residuals(constellation: &Constellation, candidate: Point3, delays: &DelayTriple) -> [f64; 3] {
    let s = delays.as_array();
    let b = constellation.baselines();
    [0, 1, 2].map(|i| balanced_delay_unchecked(&b[i], candidate) - s[i])
}

fn residual_vector(c: &Constellation, p: Point3, d: &DelayTriple) -> Vector3<f64> {
    Vector3::from(residuals(c, p, d))
}

/// Positions farther than this multiple of the problem scale are runaways;
/// the residual tolerance stops growing with `|r|` there.
const RUNAWAY_FACTOR: f64 = 1e3;

/// Residual tolerance `1e-12·(1 + |r|)`, with `|r|` capped at
/// `RUNAWAY_FACTOR · scale` so points escaping along a hyperboloid asymptote
/// cannot satisfy it.
#[derive(Debug, Clone, Copy)]
struct Tolerance {
    cap: f64,
}

impl Tolerance {
    fn new(c: &Constellation, guess: Point3) -> Self {
        Self {
            cap: RUNAWAY_FACTOR * (1.0 + c.extent().max(guess.norm())),
        }
    }

    fn at(&self, p: Point3) -> f64 {
        RESIDUAL_TOLERANCE * (1.0 + p.norm().min(self.cap))
    }
}

fn final_condition(c: &Constellation, p: Point3) -> f64 {
    forward_jacobian(c, p)
        .map(|j| condition_number(&j))
        .unwrap_or(f64::INFINITY)
}

pub fn solve_position(
    constellation: &Constellation,
    delays: &DelayTriple,
    initial_guess: Point3,
) -> Result<SolveResult> {
    initial_guess.ensure_finite("initial guess")?;
    delays.validate(constellation)?;

    let tol = Tolerance::new(constellation, initial_guess);
    let mut x = initial_guess;
    let mut f = residual_vector(constellation, x, delays);
    let mut rn = f.norm();

    for iter in 0..MAX_ITERATIONS {
        if rn <= tol.at(x) {
            let (x, rn) = polish(constellation, delays, x, rn);
            return Ok(SolveResult {
                position: x,
                residual_norm: rn,
                iterations: iter,
                converged: true,
                condition_number: final_condition(constellation, x),
            });
        }

        let jac = forward_jacobian(constellation, x).map_err(|_| QpsError::SingularJacobian {
            condition_number: f64::INFINITY,
        })?;
        let cond = condition_number(&jac);
        if cond.is_nan() || cond > DEGENERACY_CONDITION {
            return Err(QpsError::SingularJacobian {
                condition_number: cond,
            });
        }

        let radius = TRUST_FRACTION * nearest_endpoint_distance(constellation, x);
        let (step, next, next_f) = match gauss_newton_step(&jac, &f)
            .map(|d| clamp_step(d, radius))
            .map(|d| (d, trial(constellation, delays, x, &d)))
            .filter(|(_, (_, tf))| tf.norm() < rn)
        {
            Some((d, (p, tf))) => (d, p, tf),
            None => damped_step(constellation, delays, x, &jac, &f, rn, radius).ok_or(
                QpsError::NotConverged {
                    iterations: iter + 1,
                    residual_norm: rn,
                },
            )?,
        };

        x = next;
        f = next_f;
        rn = f.norm();

        if step.norm() < STEP_TOLERANCE {
            if rn <= tol.at(x) {
                continue;
            }
            return Err(QpsError::NotConverged {
                iterations: iter + 1,
                residual_norm: rn,
            });
        }
    }

    if rn <= tol.at(x) {
        return Ok(SolveResult {
            position: x,
            residual_norm: rn,
            iterations: MAX_ITERATIONS,
            converged: true,
            condition_number: final_condition(constellation, x),
        });
    }
    Err(QpsError::NotConverged {
        iterations: MAX_ITERATIONS,
        residual_norm: rn,
    })
}

/// One more Newton step once within tolerance, kept only if it lowers the
/// residual; brings the position error down to rounding level.
fn polish(c: &Constellation, d: &DelayTriple, x: Point3, rn: f64) -> (Point3, f64) {
    let f = residual_vector(c, x, d);
    let Some(step) = forward_jacobian(c, x)
        .ok()
        .and_then(|jac| gauss_newton_step(&jac, &f))
    else {
        return (x, rn);
    };
    let (p, tf) = trial(c, d, x, &step);
    if tf.norm() < rn {
        (p, tf.norm())
    } else {
        (x, rn)
    }
}

fn nearest_endpoint_distance(c: &Constellation, x: Point3) -> f64 {
    c.baselines()
        .iter()
        .flat_map(|b| [x.distance(&b.endpoint_a()), x.distance(&b.endpoint_b())])
        .fold(f64::INFINITY, f64::min)
}

fn clamp_step(step: Vector3<f64>, radius: f64) -> Vector3<f64> {
    let n = step.norm();
    if n > radius {
        step * (radius / n)
    } else {
        step
    }
}

fn gauss_newton_step(jac: &Matrix3<f64>, f: &Vector3<f64>) -> Option<Vector3<f64>> {
    jac.lu().solve(&(-f))
}

fn trial(
    c: &Constellation,
    d: &DelayTriple,
    x: Point3,
    step: &Vector3<f64>,
) -> (Point3, Vector3<f64>) {
    let p = x + Point3::from_vector(step);
    (p, residual_vector(c, p, d))
}

fn damped_step(
    c: &Constellation,
    d: &DelayTriple,
    x: Point3,
    jac: &Matrix3<f64>,
    f: &Vector3<f64>,
    rn: f64,
    radius: f64,
) -> Option<(Vector3<f64>, Point3, Vector3<f64>)> {
    let jtj = jac.transpose() * jac;
    let g = jac.transpose() * f;
    let mut mu = 1e-3 * jtj.diagonal().max();
    for _ in 0..MAX_DAMPING_TRIES {
        let damped = jtj + Matrix3::identity() * mu;
        if let Some(step) = damped.cholesky().map(|ch| clamp_step(ch.solve(&(-g)), radius)) {
            let (p, tf) = trial(c, d, x, &step);
            if tf.norm() < rn {
                return Some((step, p, tf));
            }
        }
        mu *= 10.0;
    }
    None
}

/// Axis-aligned box of candidate positions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchRegion {
    pub min: Point3,
    pub max: Point3,
}

impl SearchRegion {
    pub fn new(min: Point3, max: Point3) -> Result<Self> {
        min.ensure_finite("region min")?;
        max.ensure_finite("region max")?;
        if min.x > max.x || min.y > max.y || min.z > max.z {
            return Err(QpsError::invalid(format!("empty region {min} .. {max}")));
        }
        Ok(Self { min, max })
    }

    pub fn center(&self) -> Point3 {
        (self.min + self.max) * 0.5
    }

    pub fn contains(&self, p: Point3) -> bool {
        (self.min.x..=self.max.x).contains(&p.x)
            && (self.min.y..=self.max.y).contains(&p.y)
            && (self.min.z..=self.max.z).contains(&p.z)
    }

    fn at_unit(&self, u: [f64; 3]) -> Point3 {
        let span = self.max - self.min;
        Point3::new(
            self.min.x + u[0] * span.x,
            self.min.y + u[1] * span.y,
            self.min.z + u[2] * span.z,
        )
    }
}

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut r = 0.0;
    while i > 0 {
        r += f * (i % base) as f64;
        i /= base;
        f *= inv;
    }
    r
}

/// Start points: the region center, then a Halton sequence in bases 2, 3, 5
/// with a seeded random shift.
pub fn start_points(region: &SearchRegion, n_starts: usize, seed: u64) -> Vec<Point3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shift: [f64; 3] = [rng.random(), rng.random(), rng.random()];
    (0..n_starts)
        .map(|i| {
            if i == 0 {
                return region.center();
            }
            let u = [2u64, 3, 5].map(|b| radical_inverse(i as u64, b));
            region.at_unit([0, 1, 2].map(|k| (u[k] + shift[k]).fract()))
        })
        .collect()
}

/// Solve from many starts and return one representative per distinct
/// converged solution, best residual first, ties broken by distance to the
/// region center.
pub fn multi_start_solve(
    constellation: &Constellation,
    delays: &DelayTriple,
    region: &SearchRegion,
    n_starts: usize,
    seed: u64,
) -> Result<Vec<SolveResult>> {
    if n_starts == 0 {
        return Err(QpsError::invalid("n_starts must be at least 1"));
    }
    delays.validate(constellation)?;
    let starts = start_points(region, n_starts, seed);
    let results: Vec<SolveResult> = starts
        .par_iter()
        .map(|&g| solve_position(constellation, delays, g).ok())
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .filter(|r| r.converged)
        .collect();

    let mut clusters: Vec<SolveResult> = Vec::new();
    for r in results {
        match clusters
            .iter_mut()
            .find(|c| c.position.distance(&r.position) <= CLUSTER_RADIUS)
        {
            Some(rep) => {
                if r.residual_norm < rep.residual_norm {
                    *rep = r;
                }
            }
            None => clusters.push(r),
        }
    }

    let center = region.center();
    clusters.sort_by(|a, b| {
        a.residual_norm.total_cmp(&b.residual_norm).then_with(|| {
            a.position
                .distance(&center)
                .total_cmp(&b.position.distance(&center))
        })
    });
    Ok(clusters)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{forward_delays, Baseline};
    use crate::scenarios::{build_leo, build_terrestrial, LeoConfig, TerrestrialConfig, EARTH_RADIUS};

    fn terrestrial() -> Constellation {
        build_terrestrial(TerrestrialConfig { half_length_a: 2.0 }).unwrap()
    }

    #[test]
    fn residuals_vanish_at_truth() {
        let c = terrestrial();
        let u = Point3::new(12.0, -7.0, 40.0);
        let d = forward_delays(&c, u).unwrap();
        assert_eq!(residuals(&c, u, &d), [0.0; 3]);
        assert_eq!(
            residuals(&c, Point3::ORIGIN, &DelayTriple::new(0.0, 0.0, 0.0)),
            [0.0; 3]
        );
    }

    #[test]
    fn residuals_first_order_match_jacobian() {
        let c = terrestrial();
        let u = Point3::new(20.0, 35.0, 50.0);
        let d = forward_delays(&c, u).unwrap();
        let h = 1e-3;
        let f = residuals(&c, u + Point3::new(h, 0.0, 0.0), &d);
        let jac = forward_jacobian(&c, u).unwrap();
        for i in 0..3 {
            let lin = jac[(i, 0)] * h;
            // second-order remainder is O(h²/r)
            assert!((f[i] - lin).abs() < 1e-7, "row {i}: {} vs {}", f[i], lin);
        }
    }

    #[test]
    fn recovers_terrestrial_user() {
        let c = terrestrial();
        let k = 100.0 / 3f64.sqrt();
        let user = Point3::new(k, k, k);
        let d = forward_delays(&c, user).unwrap();
        let r = solve_position(&c, &d, Point3::new(50.0, 50.0, 50.0)).unwrap();
        assert!(r.converged);
        assert!(r.position.distance(&user) < 1e-9, "{}", r.position);
        assert!(r.residual_norm <= RESIDUAL_TOLERANCE * (1.0 + r.position.norm()));
    }

    #[test]
    fn recovers_leo_user() {
        let c = build_leo(LeoConfig::default()).unwrap();
        let k = EARTH_RADIUS / 3f64.sqrt();
        let user = Point3::new(k, k, k);
        let d = forward_delays(&c, user).unwrap();
        let r = solve_position(&c, &d, Point3::new(6.0e6, 6.0e6, 6.0e6)).unwrap();
        assert!(r.position.distance(&user) < 1e-6, "{}", r.position.distance(&user));
    }

    #[test]
    fn zero_delays_give_origin() {
        let r = solve_position(
            &terrestrial(),
            &DelayTriple::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 1.0, 1.0),
        )
        .unwrap();
        assert!(r.position.norm() < 1e-12, "{}", r.position);
    }

    #[test]
    fn delay_at_baseline_length_is_rejected() {
        let err = solve_position(
            &terrestrial(),
            &DelayTriple::new(4.0, 0.0, 0.0),
            Point3::new(1.0, 1.0, 1.0),
        )
        .unwrap_err();
        assert!(matches!(err, QpsError::DegenerateDelay { baseline: 1, .. }));
    }

    #[test]
    fn guess_on_z_axis_is_singular() {
        let c = terrestrial();
        let d = forward_delays(&c, Point3::new(10.0, 20.0, 30.0)).unwrap();
        let err = solve_position(&c, &d, Point3::new(0.0, 0.0, 100.0)).unwrap_err();
        assert_eq!(err.kind(), "singular-jacobian");
    }

    #[test]
    fn permuting_baselines_permutes_residuals() {
        let c = terrestrial();
        let [b1, b2, b3] = *c.baselines();
        let p = Constellation::new([b3, b1, b2]);
        let d = DelayTriple::new(0.1, -0.2, 0.3);
        let dp = DelayTriple::new(0.3, 0.1, -0.2);
        let u = Point3::new(3.0, 4.0, 5.0);
        let f = residuals(&c, u, &d);
        assert_eq!(residuals(&p, u, &dp), [f[2], f[0], f[1]]);
    }

    #[test]
    fn single_start_matches_direct_solve() {
        let c = terrestrial();
        let user = Point3::new(30.0, 25.0, 45.0);
        let d = forward_delays(&c, user).unwrap();
        let guess = Point3::new(28.0, 27.0, 43.0);
        let region = SearchRegion::new(guess - Point3::new(5.0, 5.0, 5.0), guess + Point3::new(5.0, 5.0, 5.0)).unwrap();
        let multi = multi_start_solve(&c, &d, &region, 1, 9).unwrap();
        let direct = solve_position(&c, &d, guess).unwrap();
        assert_eq!(multi, vec![direct]);
    }

    #[test]
    fn multi_start_finds_mirror_pair_for_coplanar_baselines() {
        // all baselines in z = 0: reflecting the user through that plane
        // leaves every delay unchanged
        let bl = |a: [f64; 3], b: [f64; 3]| Baseline::with_midpoint_source(a.into(), b.into()).unwrap();
        let c = Constellation::new([
            bl([10.0, 0.0, 0.0], [-10.0, 0.0, 0.0]),
            bl([0.0, 30.0, 0.0], [0.0, 10.0, 0.0]),
            bl([25.0, 25.0, 0.0], [10.0, 10.0, 0.0]),
        ]);
        let user = Point3::new(6.0, 8.0, 15.0);
        let mirror = Point3::new(6.0, 8.0, -15.0);
        let d = forward_delays(&c, user).unwrap();
        assert_eq!(d, forward_delays(&c, mirror).unwrap());
        let region = SearchRegion::new(Point3::new(-40.0, -40.0, -40.0), Point3::new(40.0, 40.0, 40.0)).unwrap();
        let found = multi_start_solve(&c, &d, &region, 64, 1).unwrap();
        assert!(found.len() >= 2);
        assert!(found.iter().any(|r| r.position.distance(&user) < 1e-8));
        assert!(found.iter().any(|r| r.position.distance(&mirror) < 1e-8));
    }

    #[test]
    fn multi_start_is_deterministic() {
        let c = terrestrial();
        let d = forward_delays(&c, Point3::new(30.0, -20.0, 15.0)).unwrap();
        let region = SearchRegion::new(Point3::new(-50.0, -50.0, -50.0), Point3::new(50.0, 50.0, 50.0)).unwrap();
        let a = multi_start_solve(&c, &d, &region, 40, 3).unwrap();
        let b = multi_start_solve(&c, &d, &region, 40, 3).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().any(|r| r.position.distance(&Point3::new(30.0, -20.0, 15.0)) < 1e-8));
    }

    #[test]
    fn start_points_stay_in_region() {
        let region = SearchRegion::new(Point3::new(-1.0, 2.0, 3.0), Point3::new(1.0, 4.0, 9.0)).unwrap();
        let pts = start_points(&region, 100, 42);
        assert_eq!(pts[0], region.center());
        assert!(pts.iter().all(|p| region.contains(*p)));
        assert!(multi_start_solve(&terrestrial(), &DelayTriple::new(0.0, 0.0, 0.0), &region, 0, 1).is_err());
    }
}
