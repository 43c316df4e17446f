//! Propagation of delay-measurement error into position error.
//!
//! The three baseline equations define the user position implicitly as a
//! function of the delays. Its derivative `∂r/∂s` is the inverse of the
//! forward Jacobian `∂s/∂r`, whose rows are differences of unit vectors from
//! the two endpoints of each baseline. With independent Gaussian delay errors
//! each position component has
//!
//! ```text
//! σ_x² = Σ_i (∂x/∂s_i)² σ_si²
//! ```
//!
//! and the summary metric is the weighted SEP approximation
//! `R_xyz = 1.538 · √((σ_x² + σ_y² + σ_z²) / 3)`.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{QpsError, Result};
use crate::geometry::{Constellation, Point3};

/// Ratio of the spherical error probable to the per-axis standard deviation
/// for a spherically symmetric Gaussian.
pub const SEP_FACTOR: f64 = 1.538;

/// Above this 2-norm condition number the geometry is treated as singular.
pub const DEGENERACY_CONDITION: f64 = 1e12;

/// `∂s_i/∂r` for the three baselines, one row per baseline.
pub fn forward_jacobian(constellation: &Constellation, user: Point3) -> Result<Matrix3<f64>> {
    user.ensure_finite("user")?;
    let mut jac = Matrix3::zeros();
    for (i, b) in constellation.baselines().iter().enumerate() {
        let to_a = user - b.endpoint_a();
        let to_b = user - b.endpoint_b();
        let (da, db) = (to_a.norm(), to_b.norm());
        if da == 0.0 || db == 0.0 {
            return Err(QpsError::invalid(format!(
                "user {user} coincides with an endpoint of baseline {}",
                i + 1
            )));
        }
        let row = to_a * (1.0 / da) - to_b * (1.0 / db);
        jac[(i, 0)] = row.x;
        jac[(i, 1)] = row.y;
        jac[(i, 2)] = row.z;
    }
    Ok(jac)
}

/// 2-norm condition number; infinite for an exactly singular matrix.
pub fn condition_number(m: &Matrix3<f64>) -> f64 {
    let sv = m.singular_values();
    let max = sv.max();
    let min = sv.min();
    if min == 0.0 || !min.is_finite() || !max.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

/// `∂(x, y, z)/∂(s_1, s_2, s_3)` at a user position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensitivityMatrix {
    /// Row k holds the partials of position component k.
    pub matrix: Matrix3<f64>,
    /// Condition number of the forward Jacobian that was inverted.
    pub condition_number: f64,
}

pub fn sensitivity(constellation: &Constellation, user: Point3) -> Result<SensitivityMatrix> {
    let jac = forward_jacobian(constellation, user)?;
    let condition_number = condition_number(&jac);
    if condition_number.is_nan() || condition_number > DEGENERACY_CONDITION {
        return Err(QpsError::DegenerateGeometry { condition_number });
    }
    let matrix = jac
        .try_inverse()
        .ok_or(QpsError::DegenerateGeometry { condition_number })?;
    Ok(SensitivityMatrix {
        matrix,
        condition_number,
    })
}

/// Per-axis position standard deviations and the `R_xyz` summary.
///
/// For degenerate geometry the four lengths are infinite; they serialize to
/// JSON `null`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorEstimate {
    #[serde(with = "finite_or_null")]
    pub sigma_x: f64,
    #[serde(with = "finite_or_null")]
    pub sigma_y: f64,
    #[serde(with = "finite_or_null")]
    pub sigma_z: f64,
    #[serde(with = "finite_or_null")]
    pub r_xyz: f64,
    pub degenerate: bool,
    #[serde(with = "finite_or_null")]
    pub condition_number: f64,
}

impl ErrorEstimate {
    pub fn degenerate(condition_number: f64) -> Self {
        Self {
            sigma_x: f64::INFINITY,
            sigma_y: f64::INFINITY,
            sigma_z: f64::INFINITY,
            r_xyz: f64::INFINITY,
            degenerate: true,
            condition_number,
        }
    }

    pub fn sigmas(&self) -> [f64; 3] {
        [self.sigma_x, self.sigma_y, self.sigma_z]
    }
}

/// Equal delay error `sigma_s` on all three baselines.
pub fn propagate_errors(sens: &SensitivityMatrix, sigma_s: f64) -> Result<ErrorEstimate> {
    propagate_errors_per_baseline(sens, [sigma_s; 3])
}

pub fn propagate_errors_per_baseline(
    sens: &SensitivityMatrix,
    sigma_s: [f64; 3],
) -> Result<ErrorEstimate> {
    if sigma_s.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
        return Err(QpsError::invalid(format!(
            "delay standard deviations must be finite and >= 0, got {sigma_s:?}"
        )));
    }
    let axis = |k: usize| -> f64 {
        (0..3)
            .map(|i| (sens.matrix[(k, i)] * sigma_s[i]).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let (sigma_x, sigma_y, sigma_z) = (axis(0), axis(1), axis(2));
    Ok(ErrorEstimate {
        sigma_x,
        sigma_y,
        sigma_z,
        r_xyz: weighted_sep(sigma_x, sigma_y, sigma_z),
        degenerate: false,
        condition_number: sens.condition_number,
    })
}

/// `1.538 · (1/√3) · (σ_x² + σ_y² + σ_z²)^½`.
pub fn weighted_sep(sigma_x: f64, sigma_y: f64, sigma_z: f64) -> f64 {
    SEP_FACTOR * ((sigma_x * sigma_x + sigma_y * sigma_y + sigma_z * sigma_z) / 3.0).sqrt()
}

/// SEP radius of a spherically symmetric distribution with per-axis σ.
pub fn sep_radius(sigma: f64) -> Result<f64> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(QpsError::invalid(format!("sigma {sigma} must be finite and >= 0")));
    }
    Ok(SEP_FACTOR * sigma)
}

/// Full chain at one user position. Singular geometry (including a user
/// sitting on an endpoint) yields a flagged estimate instead of an error.
pub fn evaluate(constellation: &Constellation, user: Point3, sigma_s: f64) -> Result<ErrorEstimate> {
    if !(sigma_s.is_finite() && sigma_s >= 0.0) {
        return Err(QpsError::invalid(format!("sigma_s {sigma_s} must be finite and >= 0")));
    }
    user.ensure_finite("user")?;
    match sensitivity(constellation, user) {
        Ok(sens) => propagate_errors(&sens, sigma_s),
        Err(QpsError::DegenerateGeometry { condition_number }) => {
            Ok(ErrorEstimate::degenerate(condition_number))
        }
        Err(QpsError::InvalidInput(_)) => Ok(ErrorEstimate::degenerate(f64::INFINITY)),
        Err(e) => Err(e),
    }
}

mod finite_or_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}
