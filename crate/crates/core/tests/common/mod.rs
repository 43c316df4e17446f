//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use nalgebra::Matrix3;
use qps::geometry::{forward_delays, Baseline, Constellation, Point3};
use qps::solver::{solve_position, DelayTriple};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

pub fn random_unit<R: Rng>(rng: &mut R) -> Point3 {
    loop {
        let v = Point3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        let n = v.norm();
        if n > 1e-3 {
            return v * (1.0 / n);
        }
    }
}

pub fn random_in_box<R: Rng>(rng: &mut R, half: f64) -> Point3 {
    Point3::new(
        rng.random_range(-half..half),
        rng.random_range(-half..half),
        rng.random_range(-half..half),
    )
}

/// Three midpoint-source baselines with centers in a cube of half width
/// `scale`, random orientation and half lengths in `[0.1, 0.5]·scale`.
pub fn random_constellation<R: Rng>(rng: &mut R, scale: f64) -> Constellation {
    let mut bl = || {
        let mid = random_in_box(rng, scale);
        let dir = random_unit(rng);
        let half = rng.random_range(0.1..0.5) * scale;
        Baseline::with_midpoint_source(mid + dir * half, mid - dir * half).unwrap()
    };
    Constellation::new([bl(), bl(), bl()])
}

/// Central differences of the forward delay map; column k is `∂s/∂r_k`.
pub fn finite_difference_jacobian(c: &Constellation, user: Point3, h: f64) -> Matrix3<f64> {
    let mut jac = Matrix3::zeros();
    let basis = [
        Point3::new(h, 0.0, 0.0),
        Point3::new(0.0, h, 0.0),
        Point3::new(0.0, 0.0, h),
    ];
    for (k, e) in basis.iter().enumerate() {
        let plus = forward_delays(c, user + *e).unwrap().as_array();
        let minus = forward_delays(c, user - *e).unwrap().as_array();
        for i in 0..3 {
            jac[(i, k)] = (plus[i] - minus[i]) / (2.0 * h);
        }
    }
    jac
}

/// `∂r/∂s` by perturbing each delay and re-solving; column i is `∂r/∂s_i`.
pub fn resolve_sensitivity(c: &Constellation, user: Point3, ds: f64) -> Matrix3<f64> {
    let base = forward_delays(c, user).unwrap().as_array();
    let mut m = Matrix3::zeros();
    for i in 0..3 {
        let mut plus = base;
        let mut minus = base;
        plus[i] += ds;
        minus[i] -= ds;
        let rp = solve_position(c, &DelayTriple::from_array(plus), user).unwrap().position;
        let rm = solve_position(c, &DelayTriple::from_array(minus), user).unwrap().position;
        let col = (rp - rm) * (1.0 / (2.0 * ds));
        m[(0, i)] = col.x;
        m[(1, i)] = col.y;
        m[(2, i)] = col.z;
    }
    m
}

/// Sample standard deviation of each position component over `trials`
/// re-solves with Gaussian delay noise of standard deviation `sigma_s`.
pub fn monte_carlo_sigmas<R: Rng>(
    c: &Constellation,
    user: Point3,
    sigma_s: f64,
    trials: usize,
    rng: &mut R,
) -> [f64; 3] {
    let base = forward_delays(c, user).unwrap().as_array();
    let noise = Normal::new(0.0, sigma_s).unwrap();
    let mut sum = [0.0; 3];
    let mut sum_sq = [0.0; 3];
    for _ in 0..trials {
        let d = base.map(|s| s + noise.sample(rng));
        let p = solve_position(c, &DelayTriple::from_array(d), user)
            .unwrap()
            .position;
        let dev = (p - user).to_array();
        for k in 0..3 {
            sum[k] += dev[k];
            sum_sq[k] += dev[k] * dev[k];
        }
    }
    let n = trials as f64;
    [0, 1, 2].map(|k| ((sum_sq[k] - sum[k] * sum[k] / n) / (n - 1.0)).sqrt())
}

/// Apply `p ↦ rot·p + shift` to every endpoint and source.
pub fn transform_constellation(
    c: &Constellation,
    rot: &nalgebra::Rotation3<f64>,
    shift: Point3,
) -> Constellation {
    let f = |p: Point3| transform_point(p, rot, shift);
    Constellation::new(
        c.baselines()
            .map(|b| Baseline::new(f(b.endpoint_a()), f(b.endpoint_b()), f(b.source())).unwrap()),
    )
}

pub fn transform_point(p: Point3, rot: &nalgebra::Rotation3<f64>, shift: Point3) -> Point3 {
    Point3::from_vector(&(rot * p.to_vector())) + shift
}

pub fn random_rotation<R: Rng>(rng: &mut R) -> nalgebra::Rotation3<f64> {
    let axis = random_unit(rng).to_vector();
    nalgebra::Rotation3::from_scaled_axis(axis * rng.random_range(0.0..std::f64::consts::PI))
}

/// A (constellation, user) pair drawn from one of three families: a rigidly
/// moved terrestrial layout, a rigidly moved satellite layout, or three
/// random baselines. `family` selects the family modulo 3.
pub fn random_case<R: Rng>(rng: &mut R, family: usize) -> (Constellation, Point3) {
    use qps::scenarios::{build_leo, build_terrestrial, LeoConfig, TerrestrialConfig, EARTH_RADIUS};
    let (c, u) = match family % 3 {
        0 => {
            let a = rng.random_range(0.5..5.0);
            let c = build_terrestrial(TerrestrialConfig { half_length_a: a }).unwrap();
            (c, random_unit(rng) * rng.random_range(20.0..200.0))
        }
        1 => {
            let c = build_leo(LeoConfig {
                semi_major_a: rng.random_range(7.0e6..8.0e6),
                baseline_b: rng.random_range(5e3..5e4),
            })
            .unwrap();
            (c, random_unit(rng) * rng.random_range(EARTH_RADIUS..1.5 * EARTH_RADIUS))
        }
        _ => {
            let scale = 10f64.powf(rng.random_range(0.0..6.0));
            let c = random_constellation(rng, scale);
            (c, random_unit(rng) * (scale * rng.random_range(1.0..3.0)))
        }
    };
    let rot = random_rotation(rng);
    (
        transform_constellation(&c, &rot, Point3::ORIGIN),
        transform_point(u, &rot, Point3::ORIGIN),
    )
}

/// Condition number of the forward Jacobian, or infinity on an endpoint.
pub fn jacobian_condition(c: &Constellation, user: Point3) -> f64 {
    qps::gdop::forward_jacobian(c, user)
        .map(|j| qps::gdop::condition_number(&j))
        .unwrap_or(f64::INFINITY)
}

/// Draw cases until one has a Jacobian condition number at most `max_cond`.
pub fn well_conditioned_case<R: Rng>(
    rng: &mut R,
    family: usize,
    max_cond: f64,
) -> (Constellation, Point3) {
    loop {
        let (c, u) = random_case(rng, family);
        if jacobian_condition(&c, u) <= max_cond {
            return (c, u);
        }
    }
}

/// `user` displaced in a random direction by up to `frac·|user|`.
pub fn nearby_guess<R: Rng>(rng: &mut R, user: Point3, frac: f64) -> Point3 {
    user + random_unit(rng) * (rng.random_range(0.0..frac) * user.norm())
}
