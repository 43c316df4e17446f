//! Command-line front end. Every subcommand is a thin wrapper over one
//! library call; JSON output is the serde form of the library result.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::error::{QpsError, Result};
use crate::gdop;
use crate::geometry::{Constellation, Point3};
use crate::photonics::{
    estimate_balance_with, simulate_dip_scan, uniform_grid, FitOptions, HomConfig, ScanNoise,
};
use crate::scenarios::{
    build_leo, build_terrestrial, reproduce, scan_baseline_length, scan_line, scan_plane, Axis,
    FieldGrid, Figure, LeoConfig, PlaneSpec, TerrestrialConfig, REFERENCE_SIGMA_S,
};
use crate::solver::{multi_start_solve, solve_position, DelayTriple, SearchRegion};

/// Environment variable capping scan parallelism.
pub const THREADS_ENV: &str = "QPS_THREADS";

#[derive(Debug, Parser)]
#[command(name = "qps", version, about = "Biphoton interferometric positioning toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Recover position candidates from three measured delays.
    Solve(SolveArgs),
    /// Simulate a coincidence-dip scan and fit its center.
    DipScan(DipScanArgs),
    /// Position error at a single user position.
    Gdop(GdopArgs),
    /// R_xyz over a coordinate plane.
    Field(FieldArgs),
    /// R_xyz along a line segment.
    Line(LineArgs),
    /// R_xyz versus terrestrial half baseline length a.
    SweepA(SweepArgs),
    /// Emit a reference figure dataset.
    Reproduce(ReproduceArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Preset {
    Terrestrial,
    Leo,
}

#[derive(Debug, Args)]
struct ConstellationArgs {
    /// Built-in layout.
    #[arg(long, value_enum, conflicts_with = "constellation", required_unless_present = "constellation")]
    preset: Option<Preset>,
    /// Terrestrial half length, or satellite orbit radius, m.
    #[arg(long)]
    a: Option<f64>,
    /// Satellite baseline length, m.
    #[arg(long)]
    b: Option<f64>,
    /// Constellation JSON file.
    #[arg(long)]
    constellation: Option<PathBuf>,
}

impl ConstellationArgs {
    fn load(&self) -> Result<Constellation> {
        match (self.preset, &self.constellation) {
            (Some(Preset::Terrestrial), None) => {
                if self.b.is_some() {
                    return Err(QpsError::invalid("--b only applies to the leo preset"));
                }
                build_terrestrial(TerrestrialConfig {
                    half_length_a: self.a.unwrap_or(TerrestrialConfig::default().half_length_a),
                })
            }
            (Some(Preset::Leo), None) => {
                let d = LeoConfig::default();
                build_leo(LeoConfig {
                    semi_major_a: self.a.unwrap_or(d.semi_major_a),
                    baseline_b: self.b.unwrap_or(d.baseline_b),
                })
            }
            (None, Some(path)) => {
                if self.a.is_some() || self.b.is_some() {
                    return Err(QpsError::invalid("--a/--b only apply to presets"));
                }
                Constellation::from_json(&std::fs::read_to_string(path)?)
            }
            _ => Err(QpsError::invalid(
                "give exactly one of --preset or --constellation",
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum, PartialEq, Eq)]
enum Format {
    Csv,
    Json,
}

#[derive(Debug, Args)]
struct OutputArgs {
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
}

#[derive(Debug, Args)]
struct SolveArgs {
    #[command(flatten)]
    constellation: ConstellationArgs,
    /// Measured delays s1,s2,s3, m.
    #[arg(long, value_parser = parse_triple, allow_hyphen_values = true)]
    s: [f64; 3],
    /// Single solve from this starting point.
    #[arg(long, value_parser = parse_triple, allow_hyphen_values = true, conflicts_with = "region")]
    guess: Option<[f64; 3]>,
    /// Multi-start box xmin,ymin,zmin,xmax,ymax,zmax, m.
    #[arg(long, value_parser = parse_box, allow_hyphen_values = true)]
    region: Option<[f64; 6]>,
    #[arg(long, default_value_t = 64)]
    starts: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct DipScanArgs {
    #[arg(long, default_value_t = 0.5)]
    alpha1: f64,
    #[arg(long, default_value_t = 0.5)]
    alpha2: f64,
    /// |ηV|²|G(0)|², counts/s.
    #[arg(long, default_value_t = 4.0e4)]
    eta_v_sq: f64,
    /// Filter bandwidth, rad/s.
    #[arg(long, default_value_t = 3.0e13)]
    delta_omega: f64,
    /// Planted balance offset, m.
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    true_offset: f64,
    /// Scan grid center,half_width,count, m; defaults to ±3 dip widths around
    /// the planted offset with 41 points.
    #[arg(long, value_parser = parse_grid, allow_hyphen_values = true)]
    grid: Option<(f64, f64, usize)>,
    /// Dwell time per point, s.
    #[arg(long, default_value_t = 1.0)]
    integration_time: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Use expected rates instead of Poisson counts.
    #[arg(long)]
    no_noise: bool,
    /// Fit the bandwidth as a free parameter.
    #[arg(long)]
    fit_bandwidth: bool,
    /// Write STEM.csv and STEM.json with the scan.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GdopArgs {
    #[command(flatten)]
    constellation: ConstellationArgs,
    #[arg(long, default_value_t = REFERENCE_SIGMA_S)]
    sigma_s: f64,
    #[arg(long, value_parser = parse_triple, allow_hyphen_values = true)]
    user: [f64; 3],
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Plane {
    Xy,
    Xz,
    Yz,
}

#[derive(Debug, Args)]
struct FieldArgs {
    #[command(flatten)]
    constellation: ConstellationArgs,
    #[arg(long, value_enum, default_value = "xy")]
    plane: Plane,
    /// Value of the coordinate normal to the plane, m.
    #[arg(long, allow_hyphen_values = true)]
    fixed: f64,
    /// min,max,count of the first plane axis.
    #[arg(long, value_parser = parse_grid, allow_hyphen_values = true)]
    range1: (f64, f64, usize),
    /// min,max,count of the second plane axis.
    #[arg(long, value_parser = parse_grid, allow_hyphen_values = true)]
    range2: (f64, f64, usize),
    #[arg(long, default_value_t = REFERENCE_SIGMA_S)]
    sigma_s: f64,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Debug, Args)]
struct LineArgs {
    #[command(flatten)]
    constellation: ConstellationArgs,
    #[arg(long, value_parser = parse_triple, allow_hyphen_values = true)]
    start: [f64; 3],
    #[arg(long, value_parser = parse_triple, allow_hyphen_values = true)]
    end: [f64; 3],
    #[arg(long, default_value_t = 500)]
    count: usize,
    #[arg(long, default_value_t = REFERENCE_SIGMA_S)]
    sigma_s: f64,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Debug, Args)]
struct SweepArgs {
    /// min,max,count of the half length a, m.
    #[arg(long, value_parser = parse_grid)]
    a_range: (f64, f64, usize),
    #[arg(long, value_parser = parse_triple, allow_hyphen_values = true)]
    user: [f64; 3],
    #[arg(long, default_value_t = REFERENCE_SIGMA_S)]
    sigma_s: f64,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Debug, Args)]
struct ReproduceArgs {
    #[arg(value_parser = ["fig4", "fig5", "fig6", "fig8", "fig9", "fig10"])]
    figure: String,
    #[command(flatten)]
    output: OutputArgs,
}

fn parse_floats(s: &str, n: usize) -> std::result::Result<Vec<f64>, String> {
    let v = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| format!("{t:?}: {e}")))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if v.len() != n {
        return Err(format!("expected {n} comma-separated numbers, got {}", v.len()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err("values must be finite".into());
    }
    Ok(v)
}

fn parse_triple(s: &str) -> std::result::Result<[f64; 3], String> {
    let v = parse_floats(s, 3)?;
    Ok([v[0], v[1], v[2]])
}

fn parse_box(s: &str) -> std::result::Result<[f64; 6], String> {
    let v = parse_floats(s, 6)?;
    Ok([v[0], v[1], v[2], v[3], v[4], v[5]])
}

fn parse_grid(s: &str) -> std::result::Result<(f64, f64, usize), String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err("expected a,b,count".into());
    }
    let v = parse_floats(&parts[..2].join(","), 2)?;
    let n = parts[2]
        .trim()
        .parse::<usize>()
        .map_err(|e| format!("count {:?}: {e}", parts[2]))?;
    Ok((v[0], v[1], n))
}

#[derive(Serialize)]
struct ErrorReport<'a> {
    error: &'a str,
    message: String,
}

/// Cap rayon's global pool from `QPS_THREADS`, if set. Only the first call
/// in a process has an effect.
pub fn init_thread_pool() {
    if let Some(n) = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|n| *n > 0)
    {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

/// Parse `args` (including the program name) and execute. Returns the
/// process exit status: 0 on success, 1 for domain errors, 2 for usage
/// errors. Errors are reported on `stderr` as a JSON object
/// `{"error": <kind>, "message": <text>}`.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(stdout, "{e}");
                return 0;
            }
            report(stderr, "usage", e.to_string());
            return 2;
        }
    };
    match execute(cli.command, stdout) {
        Ok(()) => 0,
        Err(e) => {
            report(stderr, e.kind(), e.to_string());
            1
        }
    }
}

fn report(stderr: &mut dyn Write, kind: &str, message: String) {
    let body = serde_json::to_string(&ErrorReport {
        error: kind,
        message: message.trim_end().to_string(),
    })
    .unwrap_or_else(|_| format!("{{\"error\":\"{kind}\"}}"));
    let _ = writeln!(stderr, "{body}");
}

fn execute(command: Command, stdout: &mut dyn Write) -> Result<()> {
    match command {
        Command::Solve(a) => {
            let constellation = a.constellation.load()?;
            let delays = DelayTriple::from_array(a.s);
            match (a.guess, a.region) {
                (Some(g), _) => {
                    let r = solve_position(&constellation, &delays, g.into())?;
                    emit_json(stdout, &r)
                }
                (None, Some(b)) => {
                    let region = SearchRegion::new(
                        Point3::new(b[0], b[1], b[2]),
                        Point3::new(b[3], b[4], b[5]),
                    )?;
                    let found = multi_start_solve(&constellation, &delays, &region, a.starts, a.seed)?;
                    emit_json(stdout, &found)
                }
                (None, None) => Err(QpsError::invalid("solve needs --guess or --region")),
            }
        }
        Command::DipScan(a) => {
            let config = HomConfig::new(a.alpha1, a.alpha2, a.eta_v_sq, a.delta_omega)?;
            let (center, half, count) = a
                .grid
                .unwrap_or((a.true_offset, 3.0 * config.dip_width(), 41));
            let grid = uniform_grid(center, half, count);
            let noise = if a.no_noise {
                ScanNoise::None
            } else {
                ScanNoise::Poisson
            };
            let scan = simulate_dip_scan(&config, a.true_offset, &grid, a.integration_time, a.seed, noise)?;
            if let Some(stem) = &a.out {
                let mut csv = Vec::new();
                scan.write_csv(&mut csv)?;
                write_atomic(&stem.with_extension("csv"), &csv)?;
                write_atomic(&stem.with_extension("json"), scan.to_json()?.as_bytes())?;
            }
            let estimate = estimate_balance_with(
                &scan,
                &config,
                FitOptions {
                    fit_bandwidth: a.fit_bandwidth,
                    ..FitOptions::default()
                },
            )?;
            if a.out.is_some() {
                emit_json(stdout, &estimate)
            } else {
                #[derive(Serialize)]
                struct Both<'a, S, E> {
                    scan: &'a S,
                    estimate: &'a E,
                }
                emit_json(
                    stdout,
                    &Both {
                        scan: &scan,
                        estimate: &estimate,
                    },
                )
            }
        }
        Command::Gdop(a) => {
            let constellation = a.constellation.load()?;
            let e = gdop::evaluate(&constellation, a.user.into(), a.sigma_s)?;
            emit_json(stdout, &e)
        }
        Command::Field(a) => {
            let constellation = a.constellation.load()?;
            let (first, second) = match a.plane {
                Plane::Xy => (Axis::X, Axis::Y),
                Plane::Xz => (Axis::X, Axis::Z),
                Plane::Yz => (Axis::Y, Axis::Z),
            };
            let grid = scan_plane(
                &constellation,
                &PlaneSpec {
                    first,
                    second,
                    fixed_value: a.fixed,
                    first_range: a.range1,
                    second_range: a.range2,
                },
                a.sigma_s,
            )?;
            emit_grid(stdout, &grid, &a.output)
        }
        Command::Line(a) => {
            let constellation = a.constellation.load()?;
            let grid = scan_line(&constellation, a.start.into(), a.end.into(), a.count, a.sigma_s)?;
            emit_grid(stdout, &grid, &a.output)
        }
        Command::SweepA(a) => {
            let grid = scan_baseline_length(a.a_range, a.user.into(), a.sigma_s)?;
            emit_grid(stdout, &grid, &a.output)
        }
        Command::Reproduce(a) => {
            let figure: Figure = a.figure.parse()?;
            let grid = reproduce(figure)?;
            emit_grid(stdout, &grid, &a.output)
        }
    }
}

fn emit_json<T: Serialize>(stdout: &mut dyn Write, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    writeln!(stdout, "{text}")?;
    Ok(())
}

fn emit_grid(stdout: &mut dyn Write, grid: &FieldGrid, output: &OutputArgs) -> Result<()> {
    let bytes = match output.format {
        Format::Csv => {
            let mut buf = Vec::new();
            grid.write_csv(&mut buf)?;
            buf
        }
        Format::Json => {
            let mut s = grid.to_json()?;
            s.push('\n');
            s.into_bytes()
        }
    };
    match &output.out {
        Some(path) => write_atomic(path, &bytes),
        None => {
            stdout.write_all(&bytes)?;
            Ok(())
        }
    }
}

/// Write through a temporary file in the target directory, then rename.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| QpsError::Io(e.error))?;
    Ok(())
}
