//! Two-photon coincidence rate of a Hong–Ou–Mandel interferometer and the
//! dip scan used to find the balancing delay.
//!
//! The coincidence rate as a function of the arm imbalance `Δt` is
//!
//! ```text
//! R_c(Δt) = α₁ α₂ |ηV|² |G(0)|² · [1 − exp(−(Δω Δt)²)]
//! ```
//!
//! It vanishes at exact balance and rises to the plateau `α₁α₂|ηV|²|G(0)|²`.
//! A scan steps the calibrated delay across the dip, records Poisson counts
//! at each setting, and a least-squares fit of the dip shape gives the
//! balancing offset with a 1-σ uncertainty.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{QpsError, Result};
use crate::geometry::SPEED_OF_LIGHT;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HomConfig {
    /// Quantum efficiency of detector 1, in (0, 1].
    pub alpha1: f64,
    /// Quantum efficiency of detector 2, in (0, 1].
    pub alpha2: f64,
    /// `|ηV|²·|G(0)|²`, counts/s.
    pub eta_v_sq: f64,
    /// Interference-filter bandwidth `Δω`, rad/s.
    pub delta_omega: f64,
}

impl HomConfig {
    pub fn new(alpha1: f64, alpha2: f64, eta_v_sq: f64, delta_omega: f64) -> Result<Self> {
        let c = Self {
            alpha1,
            alpha2,
            eta_v_sq,
            delta_omega,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, a) in [("alpha1", self.alpha1), ("alpha2", self.alpha2)] {
            if !(a > 0.0 && a <= 1.0) {
                return Err(QpsError::invalid(format!("{name} = {a} must be in (0, 1]")));
            }
        }
        if !(self.eta_v_sq.is_finite() && self.eta_v_sq > 0.0) {
            return Err(QpsError::invalid(format!("eta_v_sq = {} must be > 0", self.eta_v_sq)));
        }
        if !(self.delta_omega.is_finite() && self.delta_omega > 0.0) {
            return Err(QpsError::invalid(format!(
                "delta_omega = {} must be > 0",
                self.delta_omega
            )));
        }
        Ok(())
    }

    /// Rate far from balance, counts/s.
    pub fn plateau(&self) -> f64 {
        self.alpha1 * self.alpha2 * self.eta_v_sq
    }

    /// Optical-path length of one dip width, `c/Δω`, m.
    pub fn dip_width(&self) -> f64 {
        SPEED_OF_LIGHT / self.delta_omega
    }
}

/// `[1 − exp(−x²)]`, accurate near zero.
fn dip_shape(x: f64) -> f64 {
    -(-x * x).exp_m1()
}

/// Coincidence rate at arm imbalance `imbalance` (seconds, either sign).
pub fn coincidence_rate(config: &HomConfig, imbalance: f64) -> f64 {
    config.plateau() * dip_shape(config.delta_omega * imbalance)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScanNoise {
    /// Poisson counting statistics at every grid point.
    Poisson,
    /// Expected rates, no noise.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DipScan {
    /// Trial delay offsets, m, strictly increasing.
    pub offsets: Vec<f64>,
    /// Observed coincidence rates, counts/s.
    pub rates: Vec<f64>,
    /// Dwell time per grid point, s.
    pub integration_time: f64,
    pub rng_seed: u64,
}

impl DipScan {
    pub fn validate(&self) -> Result<()> {
        if self.offsets.len() != self.rates.len() {
            return Err(QpsError::invalid(format!(
                "{} offsets but {} rates",
                self.offsets.len(),
                self.rates.len()
            )));
        }
        check_grid(&self.offsets)?;
        if self.rates.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(QpsError::invalid("rates must be finite and nonnegative"));
        }
        if !(self.integration_time.is_finite() && self.integration_time > 0.0) {
            return Err(QpsError::invalid("integration time must be > 0"));
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["offset_m", "rate_hz"])?;
        for (o, r) in self.offsets.iter().zip(&self.rates) {
            w.write_record([o.to_string(), r.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let scan: DipScan = serde_json::from_str(text)?;
        scan.validate()?;
        Ok(scan)
    }
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(QpsError::invalid("scan grid is empty"));
    }
    if grid.iter().any(|o| !o.is_finite()) {
        return Err(QpsError::invalid("scan grid has non-finite offsets"));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(QpsError::invalid("scan grid must be strictly increasing"));
    }
    Ok(())
}

/// `count` evenly spaced offsets over `center ± half_width`.
pub fn uniform_grid(center: f64, half_width: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![center],
        _ => (0..count)
            .map(|i| center - half_width + 2.0 * half_width * i as f64 / (count - 1) as f64)
            .collect(),
    }
}

/// Simulated scan of the dip at `true_balance_offset` over `grid` (all m).
pub fn simulate_dip_scan(
    config: &HomConfig,
    true_balance_offset: f64,
    grid: &[f64],
    integration_time: f64,
    seed: u64,
    noise: ScanNoise,
) -> Result<DipScan> {
    config.validate()?;
    check_grid(grid)?;
    if !(integration_time.is_finite() && integration_time > 0.0) {
        return Err(QpsError::invalid(format!(
            "integration time {integration_time} must be > 0"
        )));
    }
    if !true_balance_offset.is_finite() {
        return Err(QpsError::invalid("true balance offset must be finite"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rates = grid
        .iter()
        .map(|&o| {
            let rate = coincidence_rate(config, (o - true_balance_offset) / SPEED_OF_LIGHT);
            match noise {
                ScanNoise::None => Ok(rate),
                ScanNoise::Poisson => {
                    let mean = rate * integration_time;
                    let counts = if mean > 0.0 {
                        Poisson::new(mean)
                            .map_err(|e| QpsError::invalid(format!("poisson mean {mean}: {e}")))?
                            .sample(&mut rng)
                    } else {
                        0.0
                    };
                    Ok(counts / integration_time)
                }
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DipScan {
        offsets: grid.to_vec(),
        rates,
        integration_time,
        rng_seed: seed,
    })
}

/// Options for [`estimate_balance_with`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Fit `Δω` as a free parameter instead of holding the configured value.
    pub fit_bandwidth: bool,
    pub max_iterations: usize,
    /// Convergence threshold on the relative parameter step.
    pub step_tolerance: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            fit_bandwidth: false,
            max_iterations: 100,
            step_tolerance: 1e-10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BalanceEstimate {
    /// Fitted dip center, m.
    pub offset: f64,
    /// 1-σ uncertainty of `offset`, m.
    pub sigma_s: f64,
    /// Fitted plateau rate, counts/s.
    pub plateau: f64,
    /// Bandwidth used by (or obtained from) the fit, rad/s.
    pub delta_omega: f64,
    /// Weighted chi-square per degree of freedom at the solution.
    pub reduced_chi_square: f64,
    pub iterations: usize,
}

/// Fit the dip with the configured bandwidth held fixed.
pub fn estimate_balance(scan: &DipScan, config: &HomConfig) -> Result<BalanceEstimate> {
    estimate_balance_with(scan, config, FitOptions::default())
}

pub fn estimate_balance_with(
    scan: &DipScan,
    config: &HomConfig,
    options: FitOptions,
) -> Result<BalanceEstimate> {
    scan.validate()?;
    config.validate()?;
    let n_params = if options.fit_bandwidth { 3 } else { 2 };
    if scan.offsets.len() <= n_params {
        return Err(QpsError::NoDipFound(format!(
            "{} points cannot constrain {n_params} parameters",
            scan.offsets.len()
        )));
    }

    let t = scan.integration_time;
    let (i_min, &min_rate) = scan
        .rates
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("nonempty scan");
    let mut sorted = scan.rates.clone();
    sorted.sort_by(f64::total_cmp);
    let plateau_guess = sorted[sorted.len() / 2].max(*sorted.last().expect("nonempty") * 0.5);
    check_dip_depth(plateau_guess, min_rate, t)?;

    let k0 = config.delta_omega / SPEED_OF_LIGHT;
    let model = DipModel {
        offsets: &scan.offsets,
        fit_bandwidth: options.fit_bandwidth,
        fixed_k: k0,
    };
    let mut p0 = vec![plateau_guess, scan.offsets[i_min]];
    if options.fit_bandwidth {
        p0.push(k0);
    }
    let p0 = DVector::from_vec(p0);
    let y = DVector::from_column_slice(&scan.rates);
    let scales = model.scales(&p0);

    // Unweighted pass, then reweight with the Poisson variance of the fitted
    // model (floored at one count) and refit.
    let unweighted = DVector::from_element(y.len(), 1.0);
    let first = levenberg_marquardt(&model, &y, &unweighted, p0, &scales, options)?;
    let weights = model
        .predict(&first.params)
        .map(|m| t * t / (m * t).max(1.0));
    let fit = levenberg_marquardt(&model, &y, &weights, first.params, &scales, options)?;

    let plateau = fit.params[0];
    let offset = fit.params[1];
    let k = model.k(&fit.params);
    if !(plateau > 0.0 && k > 0.0) || !offset.is_finite() {
        return Err(QpsError::FitDiverged {
            iterations: first.iterations + fit.iterations,
        });
    }
    check_dip_depth(plateau, min_rate, t)?;
    let (lo, hi) = (scan.offsets[0], *scan.offsets.last().expect("nonempty"));
    if offset < lo || offset > hi {
        return Err(QpsError::NoDipFound(format!(
            "fitted center {offset} m lies outside the scanned range {lo}..{hi} m"
        )));
    }

    let jac = model.jacobian(&fit.params);
    let normal = weighted_normal(&jac, &weights);
    let cov = normal.try_inverse().ok_or(QpsError::FitDiverged {
        iterations: first.iterations + fit.iterations,
    })?;
    let dof = (y.len() - n_params) as f64;
    Ok(BalanceEstimate {
        offset,
        sigma_s: cov[(1, 1)].max(0.0).sqrt(),
        plateau,
        delta_omega: k * SPEED_OF_LIGHT,
        reduced_chi_square: fit.chi_square / dof,
        iterations: first.iterations + fit.iterations,
    })
}

fn check_dip_depth(plateau: f64, min_rate: f64, integration_time: f64) -> Result<()> {
    let sd = (plateau / integration_time).max(0.0).sqrt();
    if plateau - min_rate >= 3.0 * sd && plateau > min_rate {
        Ok(())
    } else {
        Err(QpsError::NoDipFound(format!(
            "minimum rate {min_rate} is within 3 sd ({sd}) of the plateau {plateau}"
        )))
    }
}

/// Parameters: plateau, center and, optionally, `k = Δω/c`.
struct DipModel<'a> {
    offsets: &'a [f64],
    fit_bandwidth: bool,
    fixed_k: f64,
}

impl DipModel<'_> {
    fn k(&self, p: &DVector<f64>) -> f64 {
        if self.fit_bandwidth {
            p[2]
        } else {
            self.fixed_k
        }
    }

    fn scales(&self, p: &DVector<f64>) -> DVector<f64> {
        let k = self.k(p);
        let mut s = vec![p[0].abs().max(f64::MIN_POSITIVE), 1.0 / k];
        if self.fit_bandwidth {
            s.push(k);
        }
        DVector::from_vec(s)
    }

    fn predict(&self, p: &DVector<f64>) -> DVector<f64> {
        let k = self.k(p);
        DVector::from_iterator(
            self.offsets.len(),
            self.offsets.iter().map(|&o| p[0] * dip_shape(k * (o - p[1]))),
        )
    }

    fn jacobian(&self, p: &DVector<f64>) -> DMatrix<f64> {
        let k = self.k(p);
        let n_params = p.len();
        let mut j = DMatrix::zeros(self.offsets.len(), n_params);
        for (i, &o) in self.offsets.iter().enumerate() {
            let d = o - p[1];
            let u = k * d;
            let e = (-u * u).exp();
            j[(i, 0)] = dip_shape(u);
            j[(i, 1)] = -2.0 * p[0] * k * u * e;
            if self.fit_bandwidth {
                j[(i, 2)] = 2.0 * p[0] * u * d * e;
            }
        }
        j
    }
}

fn weighted_normal(jac: &DMatrix<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    let mut wj = jac.clone();
    for (mut row, wi) in wj.row_iter_mut().zip(w.iter()) {
        row *= *wi;
    }
    jac.transpose() * wj
}

struct FitOutcome {
    params: DVector<f64>,
    chi_square: f64,
    iterations: usize,
}

fn chi_square(model: &DipModel, y: &DVector<f64>, w: &DVector<f64>, p: &DVector<f64>) -> f64 {
    (y - model.predict(p))
        .iter()
        .zip(w.iter())
        .map(|(r, wi)| wi * r * r)
        .sum()
}

fn levenberg_marquardt(
    model: &DipModel,
    y: &DVector<f64>,
    w: &DVector<f64>,
    mut p: DVector<f64>,
    scales: &DVector<f64>,
    options: FitOptions,
) -> Result<FitOutcome> {
    let mut lambda = 1e-3;
    let mut chi2 = chi_square(model, y, w, &p);
    for iter in 1..=options.max_iterations {
        let jac = model.jacobian(&p);
        let r = y - model.predict(&p);
        let normal = weighted_normal(&jac, w);
        let grad = jac.transpose() * r.component_mul(w);

        let mut accepted = None;
        while lambda < 1e20 {
            let mut damped = normal.clone();
            for i in 0..damped.nrows() {
                damped[(i, i)] += lambda * normal[(i, i)].max(f64::MIN_POSITIVE);
            }
            if let Some(step) = damped.lu().solve(&grad) {
                let trial = &p + &step;
                let trial_chi2 = chi_square(model, y, w, &trial);
                if trial_chi2.is_finite() && trial_chi2 <= chi2 {
                    accepted = Some((step, trial, trial_chi2));
                    break;
                }
            }
            lambda *= 10.0;
        }

        let Some((step, trial, trial_chi2)) = accepted else {
            // no direction lowers chi-square: already at the numerical minimum
            return Ok(FitOutcome {
                params: p,
                chi_square: chi2,
                iterations: iter,
            });
        };
        p = trial;
        chi2 = trial_chi2;
        lambda = (lambda / 10.0).max(1e-12);

        let relative_step = step
            .iter()
            .zip(p.iter().zip(scales.iter()))
            .map(|(d, (v, s))| d.abs() / (v.abs() + s))
            .fold(0.0, f64::max);
        if !p.iter().all(|v| v.is_finite()) {
            break;
        }
        if relative_step < options.step_tolerance {
            return Ok(FitOutcome {
                params: p,
                chi_square: chi2,
                iterations: iter,
            });
        }
    }
    Err(QpsError::FitDiverged {
        iterations: options.max_iterations,
    })
}
