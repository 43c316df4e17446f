//! Reference layouts and field scans of the position error `R_xyz`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{QpsError, Result};
use crate::gdop::{evaluate, ErrorEstimate};
use crate::geometry::{Baseline, Constellation, Point3};

/// Mean Earth radius used by the satellite layout, m.
pub const EARTH_RADIUS: f64 = 6_378_000.0;
/// Delay standard deviation used for all reference figures, m.
pub const REFERENCE_SIGMA_S: f64 = 1.0e-6;

/// Three orthogonal baselines of length `2a` along the coordinate axes,
/// all centred on the origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TerrestrialConfig {
    pub half_length_a: f64,
}

impl Default for TerrestrialConfig {
    fn default() -> Self {
        Self { half_length_a: 2.0 }
    }
}

/// Six satellites at orbital radius `a` forming three short baselines of
/// length `b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeoConfig {
    pub semi_major_a: f64,
    pub baseline_b: f64,
}

impl Default for LeoConfig {
    fn default() -> Self {
        Self {
            semi_major_a: 7_360_000.0,
            baseline_b: 20_000.0,
        }
    }
}

pub fn build_terrestrial(config: TerrestrialConfig) -> Result<Constellation> {
    let a = config.half_length_a;
    if !(a.is_finite() && a > 0.0) {
        return Err(QpsError::invalid(format!("half length a = {a} must be > 0")));
    }
    let axis = |u: Point3| Baseline::new(u * a, u * -a, Point3::ORIGIN);
    Ok(Constellation::new([
        axis(Point3::new(1.0, 0.0, 0.0))?,
        axis(Point3::new(0.0, 1.0, 0.0))?,
        axis(Point3::new(0.0, 0.0, 1.0))?,
    ]))
}

pub fn build_leo(config: LeoConfig) -> Result<Constellation> {
    let LeoConfig {
        semi_major_a: a,
        baseline_b: b,
    } = config;
    if !(b.is_finite() && a.is_finite() && b > 0.0 && a > b) {
        return Err(QpsError::invalid(format!(
            "need a > b > 0, got a = {a}, b = {b}"
        )));
    }
    let h = b / 2.0;
    let q = b / (2.0 * std::f64::consts::SQRT_2);
    let pair = |p: [f64; 3], r: [f64; 3]| Baseline::with_midpoint_source(p.into(), r.into());
    Ok(Constellation::new([
        pair([a, -h, 0.0], [a, h, 0.0])?,
        pair([h, a, 0.0], [-h, a, 0.0])?,
        pair([-q, -q, a], [q, q, a])?,
    ]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::X => "x",
            Axis::Y => "y",
            Axis::Z => "z",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Evenly spaced samples `min..=max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridAxis {
    pub name: String,
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

impl GridAxis {
    pub fn new(name: impl Into<String>, min: f64, max: f64, count: usize) -> Result<Self> {
        let name = name.into();
        if count < 2 {
            return Err(QpsError::invalid(format!("axis {name} needs at least 2 samples")));
        }
        if !(min.is_finite() && max.is_finite() && min < max) {
            return Err(QpsError::invalid(format!("axis {name} range {min}..{max} is invalid")));
        }
        Ok(Self { name, min, max, count })
    }

    pub fn value(&self, i: usize) -> f64 {
        if i + 1 == self.count {
            return self.max;
        }
        self.min + (self.max - self.min) * i as f64 / (self.count - 1) as f64
    }

    pub fn values(&self) -> Vec<f64> {
        (0..self.count).map(|i| self.value(i)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedCoord {
    pub name: String,
    pub value: f64,
}

/// One evaluated grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSample {
    /// Values of the grid's `columns`, in order.
    pub coords: Vec<f64>,
    pub estimate: ErrorEstimate,
}

/// Scan result in row-major order (the last axis varies fastest).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldGrid {
    pub axes: Vec<GridAxis>,
    pub fixed: Vec<FixedCoord>,
    /// Names of the per-sample coordinate columns, with units.
    pub columns: Vec<String>,
    pub sigma_s: f64,
    pub samples: Vec<FieldSample>,
}

impl FieldGrid {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sample whose coordinates are closest (Euclidean) to `target`.
    pub fn nearest(&self, target: &[f64]) -> Option<&FieldSample> {
        let d2 = |s: &FieldSample| -> f64 {
            s.coords
                .iter()
                .zip(target)
                .map(|(a, b)| (a - b).powi(2))
                .sum()
        };
        self.samples.iter().min_by(|a, b| d2(a).total_cmp(&d2(b)))
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = self.columns.clone();
        header.extend(["r_xyz_m", "degenerate", "condition_number"].map(String::from));
        w.write_record(&header)?;
        for s in &self.samples {
            let mut row: Vec<String> = s.coords.iter().map(f64::to_string).collect();
            row.push(s.estimate.r_xyz.to_string());
            row.push(s.estimate.degenerate.to_string());
            row.push(s.estimate.condition_number.to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

fn evaluate_points(
    constellation: &Constellation,
    points: &[Point3],
    sigma_s: f64,
) -> Result<Vec<ErrorEstimate>> {
    points
        .par_iter()
        .map(|&p| evaluate(constellation, p, sigma_s))
        .collect()
}

/// Plane through `fixed_value` on the third axis.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneSpec {
    pub first: Axis,
    pub second: Axis,
    pub fixed_value: f64,
    pub first_range: (f64, f64, usize),
    pub second_range: (f64, f64, usize),
}

impl PlaneSpec {
    fn fixed_axis(&self) -> Result<Axis> {
        if self.first == self.second {
            return Err(QpsError::invalid("plane axes must differ"));
        }
        Ok([Axis::X, Axis::Y, Axis::Z]
            .into_iter()
            .find(|a| *a != self.first && *a != self.second)
            .expect("three axes"))
    }
}

pub fn scan_plane(constellation: &Constellation, plane: &PlaneSpec, sigma_s: f64) -> Result<FieldGrid> {
    let fixed_axis = plane.fixed_axis()?;
    if !plane.fixed_value.is_finite() {
        return Err(QpsError::invalid("fixed coordinate must be finite"));
    }
    let (a0, a1, an) = plane.first_range;
    let (b0, b1, bn) = plane.second_range;
    let first = GridAxis::new(plane.first.name(), a0, a1, an)?;
    let second = GridAxis::new(plane.second.name(), b0, b1, bn)?;
    let (fv, sv) = (first.values(), second.values());

    let mut coords = Vec::with_capacity(an * bn);
    let mut points = Vec::with_capacity(an * bn);
    for &u in &fv {
        for &v in &sv {
            let mut p = [0.0; 3];
            p[plane.first.index()] = u;
            p[plane.second.index()] = v;
            p[fixed_axis.index()] = plane.fixed_value;
            coords.push(vec![u, v]);
            points.push(Point3::from(p));
        }
    }
    let estimates = evaluate_points(constellation, &points, sigma_s)?;
    Ok(FieldGrid {
        columns: vec![format!("{}_m", first.name), format!("{}_m", second.name)],
        axes: vec![first, second],
        fixed: vec![FixedCoord {
            name: fixed_axis.name().into(),
            value: plane.fixed_value,
        }],
        sigma_s,
        samples: coords
            .into_iter()
            .zip(estimates)
            .map(|(coords, estimate)| FieldSample { coords, estimate })
            .collect(),
    })
}

/// `count` evenly spaced points from `start` to `end` inclusive.
pub fn scan_line(
    constellation: &Constellation,
    start: Point3,
    end: Point3,
    count: usize,
    sigma_s: f64,
) -> Result<FieldGrid> {
    start.ensure_finite("line start")?;
    end.ensure_finite("line end")?;
    let axis = GridAxis::new("t", 0.0, 1.0, count)?;
    let points: Vec<Point3> = axis
        .values()
        .into_iter()
        .enumerate()
        .map(|(i, t)| if i + 1 == count { end } else { start + (end - start) * t })
        .collect();
    let estimates = evaluate_points(constellation, &points, sigma_s)?;
    Ok(FieldGrid {
        axes: vec![axis],
        fixed: Vec::new(),
        columns: ["x_m", "y_m", "z_m"].map(String::from).to_vec(),
        sigma_s,
        samples: points
            .iter()
            .zip(estimates)
            .map(|(p, estimate)| FieldSample {
                coords: p.to_array().to_vec(),
                estimate,
            })
            .collect(),
    })
}

/// `R_xyz` at a fixed user as the terrestrial half length `a` varies.
pub fn scan_baseline_length(
    a_range: (f64, f64, usize),
    user: Point3,
    sigma_s: f64,
) -> Result<FieldGrid> {
    user.ensure_finite("user")?;
    let (lo, hi, n) = a_range;
    if lo.is_nan() || lo <= 0.0 {
        return Err(QpsError::invalid(format!("half length range must be positive, got {lo}")));
    }
    let axis = GridAxis::new("a", lo, hi, n)?;
    let values = axis.values();
    let estimates = values
        .par_iter()
        .map(|&a| {
            let c = build_terrestrial(TerrestrialConfig { half_length_a: a })?;
            evaluate(&c, user, sigma_s)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FieldGrid {
        axes: vec![axis],
        fixed: vec![
            FixedCoord { name: "x".into(), value: user.x },
            FixedCoord { name: "y".into(), value: user.y },
            FixedCoord { name: "z".into(), value: user.z },
        ],
        columns: vec!["a_m".into()],
        sigma_s,
        samples: values
            .into_iter()
            .zip(estimates)
            .map(|(a, estimate)| FieldSample {
                coords: vec![a],
                estimate,
            })
            .collect(),
    })
}

/// Datasets behind the reference figures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Figure {
    /// Terrestrial, x–y plane at z = 100/√3 m.
    Fig4,
    /// Terrestrial, line along x at y = 30 m, z = 100/√3 m.
    Fig5,
    /// Terrestrial, sweep of a at (30, 30, 100/√3) m.
    Fig6,
    /// Satellite, x–y plane at z = R_e/√3.
    Fig8,
    /// Satellite, line along x at y = z = R_e/√3.
    Fig9,
    /// Satellite, radial line along (1,1,1)/√3.
    Fig10,
}

pub const PLANE_RESOLUTION: usize = 201;
pub const LINE_RESOLUTION: usize = 500;

impl std::str::FromStr for Figure {
    type Err = QpsError;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "fig4" => Figure::Fig4,
            "fig5" => Figure::Fig5,
            "fig6" => Figure::Fig6,
            "fig8" => Figure::Fig8,
            "fig9" => Figure::Fig9,
            "fig10" => Figure::Fig10,
            other => return Err(QpsError::invalid(format!("unknown figure {other}"))),
        })
    }
}

pub fn reproduce(figure: Figure) -> Result<FieldGrid> {
    let inv_sqrt3 = 1.0 / 3f64.sqrt();
    let sigma = REFERENCE_SIGMA_S;
    let terrestrial = || build_terrestrial(TerrestrialConfig::default());
    let leo = || build_leo(LeoConfig::default());
    // Plane half-widths of 2/√3 times the reference range put the diagonal
    // reference user exactly on a grid node (index 150 of 201).
    match figure {
        Figure::Fig4 => {
            let half = 200.0 * inv_sqrt3;
            scan_plane(
                &terrestrial()?,
                &PlaneSpec {
                    first: Axis::X,
                    second: Axis::Y,
                    fixed_value: 100.0 * inv_sqrt3,
                    first_range: (-half, half, PLANE_RESOLUTION),
                    second_range: (-half, half, PLANE_RESOLUTION),
                },
                sigma,
            )
        }
        Figure::Fig5 => scan_line(
            &terrestrial()?,
            Point3::new(-100.0, 30.0, 100.0 * inv_sqrt3),
            Point3::new(100.0, 30.0, 100.0 * inv_sqrt3),
            LINE_RESOLUTION,
            sigma,
        ),
        Figure::Fig6 => scan_baseline_length(
            (0.5, 5.0, LINE_RESOLUTION),
            Point3::new(30.0, 30.0, 100.0 * inv_sqrt3),
            sigma,
        ),
        Figure::Fig8 => {
            let half = 2.0 * EARTH_RADIUS * inv_sqrt3;
            scan_plane(
                &leo()?,
                &PlaneSpec {
                    first: Axis::X,
                    second: Axis::Y,
                    fixed_value: EARTH_RADIUS * inv_sqrt3,
                    first_range: (-half, half, PLANE_RESOLUTION),
                    second_range: (-half, half, PLANE_RESOLUTION),
                },
                sigma,
            )
        }
        Figure::Fig9 => {
            let k = EARTH_RADIUS * inv_sqrt3;
            scan_line(
                &leo()?,
                Point3::new(-2.0 * EARTH_RADIUS, k, k),
                Point3::new(2.0 * EARTH_RADIUS, k, k),
                LINE_RESOLUTION,
                sigma,
            )
        }
        Figure::Fig10 => {
            let dir = Point3::new(inv_sqrt3, inv_sqrt3, inv_sqrt3);
            scan_line(
                &leo()?,
                dir * EARTH_RADIUS,
                dir * 14_000_000.0,
                LINE_RESOLUTION,
                sigma,
            )
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::forward_delays;
    use approx::assert_relative_eq;

    #[test]
    fn terrestrial_endpoints() {
        let c = build_terrestrial(TerrestrialConfig { half_length_a: 2.0 }).unwrap();
        let x = c.baselines()[0];
        assert_eq!(x.endpoint_a(), Point3::new(2.0, 0.0, 0.0));
        assert_eq!(x.endpoint_b(), Point3::new(-2.0, 0.0, 0.0));
        assert!(c.all_midpoint_sources());
        assert_eq!(forward_delays(&c, Point3::ORIGIN).unwrap().as_array(), [0.0; 3]);
        assert!(build_terrestrial(TerrestrialConfig { half_length_a: 0.0 }).is_err());
    }

    #[test]
    fn leo_endpoints() {
        let c = build_leo(LeoConfig::default()).unwrap();
        let [b1, b2, b3] = c.baselines();
        assert_eq!(b1.endpoint_a(), Point3::new(7_360_000.0, -10_000.0, 0.0));
        assert_eq!(b2.endpoint_b(), Point3::new(-10_000.0, 7_360_000.0, 0.0));
        for b in c.baselines() {
            assert_relative_eq!(b.length(), 20_000.0, max_relative = 1e-12);
            assert!(b.is_midpoint_source());
        }
        assert_eq!(b3.midpoint(), Point3::new(0.0, 0.0, 7_360_000.0));
        assert!(build_leo(LeoConfig { semi_major_a: 1.0, baseline_b: 2.0 }).is_err());
    }

    #[test]
    fn plane_flags_axis_point_without_poisoning_neighbours() {
        let c = build_terrestrial(TerrestrialConfig::default()).unwrap();
        let grid = scan_plane(
            &c,
            &PlaneSpec {
                first: Axis::X,
                second: Axis::Y,
                fixed_value: 100.0 / 3f64.sqrt(),
                first_range: (-10.0, 10.0, 5),
                second_range: (-10.0, 10.0, 5),
            },
            1e-6,
        )
        .unwrap();
        assert_eq!(grid.len(), 25);
        let centre = grid.nearest(&[0.0, 0.0]).unwrap();
        assert_eq!(centre.coords, vec![0.0, 0.0]);
        assert!(centre.estimate.degenerate);
        assert_eq!(grid.samples.iter().filter(|s| s.estimate.degenerate).count(), 1);
    }

    #[test]
    fn plane_is_symmetric_under_xy_swap() {
        let c = build_terrestrial(TerrestrialConfig::default()).unwrap();
        let n = 9;
        let grid = scan_plane(
            &c,
            &PlaneSpec {
                first: Axis::X,
                second: Axis::Y,
                fixed_value: 57.0,
                first_range: (-40.0, 40.0, n),
                second_range: (-40.0, 40.0, n),
            },
            1e-6,
        )
        .unwrap();
        for i in 0..n {
            for j in 0..n {
                let a = grid.samples[i * n + j].estimate.r_xyz;
                let b = grid.samples[j * n + i].estimate.r_xyz;
                if a.is_finite() {
                    assert_relative_eq!(a, b, max_relative = 1e-9);
                }
            }
        }
    }

    #[test]
    fn line_isolates_degenerate_start() {
        let c = build_terrestrial(TerrestrialConfig::default()).unwrap();
        let g = scan_line(&c, Point3::new(0.0, 0.0, 100.0), Point3::new(50.0, 0.0, 100.0), 6, 1e-6).unwrap();
        assert!(g.samples[0].estimate.degenerate);
        assert!(g.samples[1..].iter().all(|s| !s.estimate.degenerate));
        assert_eq!(g.samples[5].coords, vec![50.0, 0.0, 100.0]);
    }

    #[test]
    fn csv_layout() {
        let c = build_terrestrial(TerrestrialConfig::default()).unwrap();
        let g = scan_line(&c, Point3::new(0.0, 0.0, 100.0), Point3::new(10.0, 0.0, 100.0), 2, 1e-6).unwrap();
        let mut buf = Vec::new();
        g.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "x_m,y_m,z_m,r_xyz_m,degenerate,condition_number");
        let first: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(&first[..5], &["0", "0", "100", "inf", "true"]);
        assert!(first[5].parse::<f64>().unwrap() > 1e12);
        assert_eq!(lines.count(), 1);
    }

    #[test]
    fn grid_axis_validation() {
        assert!(GridAxis::new("x", 0.0, 1.0, 1).is_err());
        assert!(GridAxis::new("x", 1.0, 0.0, 3).is_err());
        let ax = GridAxis::new("x", -1.0, 1.0, 3).unwrap();
        assert_eq!(ax.values(), vec![-1.0, 0.0, 1.0]);
    }

    #[test]
    fn figure_names() {
        assert_eq!("fig10".parse::<Figure>().unwrap(), Figure::Fig10);
        assert!("fig7".parse::<Figure>().is_err());
    }
}
