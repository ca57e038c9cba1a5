//! `kolmo`: build, evaluate and verify fundamental solutions of degenerate
//! Kolmogorov operators from a JSON model description.
//!
//! Exit codes: 0 success, 1 configuration error, 2 numerical failure,
//! 3 verification failure (reports are still written).

// `!(a > b)` is used on purpose so that NaN fails every range check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use kolmo::cauchy::{solve, CauchyProblem};
use kolmo::config::Model;
use kolmo::density::{PoleDensity, SourceDensity};
use kolmo::kernel::{covariance_const, FrozenKernel};
use kolmo::parametrix::{eval_kernel, parametrix_eval, ParametrixEval};
use kolmo::verify::{
    blowup_check, check_chapman_kolmogorov, check_expm_block_orders, check_gaussian_bounds,
    check_mass, check_residual, dyadic_scales, mc_oracle, BoundGrid, BoundLevel, McOptions,
    ResidualInputs, VerificationReport,
};
use kolmo::{KolmoError, Result};
use output::{indexed, indexed_pairs, num, parse_grid, parse_point, Csv, OutDir};

#[derive(Parser)]
#[command(
    name = "kolmo",
    version,
    about = "Fundamental solutions of degenerate Kolmogorov operators"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Model description (JSON).
    #[arg(long)]
    model: PathBuf,
    /// Output directory; must be absent or empty unless --force.
    #[arg(long)]
    out: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Write into a non-empty output directory.
    #[arg(long)]
    force: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Series truncation tolerance; for mc-oracle, the distance tolerance.
    #[arg(long)]
    tol: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Block structure of the drift.
    Analyze(Common),
    /// Γ^δ (with --delta) or the parametrix on a grid.
    EvalKernel {
        #[command(flatten)]
        common: Common,
        /// `t0:t1:nt,x1…,xN`, each axis `lo:hi:n` or a number.
        #[arg(long)]
        grid: String,
        /// `T,y1,…,yN` (default: T_bar and the origin).
        #[arg(long)]
        pole: Option<String>,
        #[arg(long)]
        delta: Option<f64>,
    },
    /// The fundamental solution and its derivatives on a grid.
    BuildDensity {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        grid: String,
        #[arg(long)]
        pole: Option<String>,
    },
    /// The solution of the Cauchy problem on a grid.
    SolveCauchy {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        grid: String,
        /// Terminal time (default: T_bar).
        #[arg(long)]
        t_end: Option<f64>,
        /// Terminal data `g(x)`.
        #[arg(long)]
        terminal: Option<String>,
        /// Source term `f(t, x)`.
        #[arg(long)]
        source: Option<String>,
    },
    /// Verification checks, written as a JSON report array.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Comma-separated subset of: mass, chapman-kolmogorov, residual,
        /// gaussian-bounds, expm-orders, holder-blowup.
        #[arg(
            long,
            default_value = "mass,chapman-kolmogorov,residual,gaussian-bounds,expm-orders"
        )]
        checks: String,
        #[arg(long)]
        pole: Option<String>,
        /// `t,x1,…,xN` (default: t = 0 on the backward flow of the pole).
        #[arg(long)]
        point: Option<String>,
        /// Expected constant zeroth-order coefficient for the mass check.
        #[arg(long)]
        abar: Option<f64>,
        /// Samples per scale for the Hölder blow-up check.
        #[arg(long, default_value_t = 300)]
        samples: usize,
    },
    /// Monte Carlo histogram of X_T against the computed density.
    McOracle {
        #[command(flatten)]
        common: Common,
        /// `t,x1,…,xN` (default: t = 0, x = 0).
        #[arg(long)]
        point: Option<String>,
        #[arg(long)]
        t_end: Option<f64>,
        #[arg(long, default_value_t = 1_000_000)]
        paths: usize,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value_t = 30)]
        bins: usize,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Analyze(c) => c,
            Command::EvalKernel { common, .. }
            | Command::BuildDensity { common, .. }
            | Command::SolveCauchy { common, .. }
            | Command::Verify { common, .. }
            | Command::McOracle { common, .. } => common,
        }
    }
}

/// Why a run stopped.
enum Failure {
    Error(KolmoError),
    Verification,
}

impl From<KolmoError> for Failure {
    fn from(e: KolmoError) -> Self {
        Failure::Error(e)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verification) => {
            eprintln!(
                "verification failed; reports written to {}",
                cli.command.common().out.display()
            );
            ExitCode::from(3)
        }
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 1 } else { 2 })
        }
    }
}

fn run(cmd: &Command) -> std::result::Result<(), Failure> {
    let common = cmd.common();
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(KolmoError::Config("--threads must be positive".into()).into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| KolmoError::Config(e.to_string()))?;
    }
    let mut model = load_model(&common.model)?;
    if let (Some(tol), false) = (common.tol, matches!(cmd, Command::McOracle { .. })) {
        model.quad.series_tol = tol;
        model.quad.validate()?;
    }
    let out = OutDir::prepare(&common.out, common.force)?;
    match cmd {
        Command::Analyze(_) => analyze(&model, &out)?,
        Command::EvalKernel {
            grid, pole, delta, ..
        } => eval_kernel_cmd(&model, &out, grid, pole.as_deref(), *delta)?,
        Command::BuildDensity { grid, pole, .. } => {
            build_density(&model, &out, grid, pole.as_deref())?
        }
        Command::SolveCauchy {
            grid,
            t_end,
            terminal,
            source,
            ..
        } => solve_cauchy(
            &model,
            &out,
            grid,
            *t_end,
            terminal.as_deref(),
            source.as_deref(),
        )?,
        Command::Verify {
            checks,
            pole,
            point,
            abar,
            samples,
            ..
        } => {
            let opts = VerifyOptions {
                checks,
                pole: pole.as_deref(),
                point: point.as_deref(),
                abar: *abar,
                samples: *samples,
                seed: common.seed,
            };
            if !verify(&model, &out, &opts)? {
                return Err(Failure::Verification);
            }
        }
        Command::McOracle {
            point,
            t_end,
            paths,
            steps,
            bins,
            ..
        } => {
            let opts = McOptions {
                paths: *paths,
                steps: *steps,
                bins: *bins,
                seed: common.seed,
                ..McOptions::default()
            };
            if !mc(
                &model,
                &out,
                point.as_deref(),
                *t_end,
                &opts,
                common.tol.unwrap_or(0.05),
            )? {
                return Err(Failure::Verification);
            }
        }
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<Model> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| KolmoError::Config(format!("cannot read model {}: {e}", path.display())))?;
    Model::from_json(&text)
}

/// `(T, y)` from `--pole`, defaulting to `T_bar` and the origin.
fn pole_of(model: &Model, pole: Option<&str>) -> Result<(f64, Vec<f64>)> {
    match pole {
        Some(src) => {
            let v = parse_point(src, model.n() + 1, "pole")?;
            Ok((v[0], v[1..].to_vec()))
        }
        None => Ok((model.coeffs.t_bar, vec![0.0; model.n()])),
    }
}

fn grid_before(model: &Model, grid: &str, t_end: f64) -> Result<Vec<(f64, Vec<f64>)>> {
    let points = parse_grid(grid, model.n())?;
    if let Some((t, _)) = points.iter().find(|(t, _)| !(*t < t_end)) {
        return Err(KolmoError::Config(format!(
            "grid time {t} is not before T = {t_end}"
        )));
    }
    Ok(points)
}

fn analyze(model: &Model, out: &OutDir) -> Result<()> {
    let text = serde_json::to_string(model.drift.structure())?;
    println!("{text}");
    out.write("structure.json", &(text + "\n"))
}

fn derivative_header(model: &Model, last: &str) -> Vec<String> {
    let (n, d) = (model.n(), model.d());
    let mut h = vec!["t".to_string()];
    h.extend(indexed("x", n));
    h.push("T".into());
    h.extend(indexed("y", n));
    h.push(last.into());
    h.extend(indexed("grad", d));
    h.extend(indexed_pairs("hess", d));
    h
}

fn derivative_row(
    t: f64,
    x: &[f64],
    t_end: f64,
    y: &[f64],
    value: f64,
    grad: &[f64],
    hess: &[f64],
) -> Vec<f64> {
    let mut row = vec![t];
    row.extend_from_slice(x);
    row.push(t_end);
    row.extend_from_slice(y);
    row.push(value);
    row.extend_from_slice(grad);
    row.extend_from_slice(hess);
    row
}

fn eval_kernel_cmd(
    model: &Model,
    out: &OutDir,
    grid: &str,
    pole: Option<&str>,
    delta: Option<f64>,
) -> Result<()> {
    let (t_end, y) = pole_of(model, pole)?;
    let points = grid_before(model, grid, t_end)?;
    let rows = points
        .par_iter()
        .map(|(t, x)| -> Result<Vec<f64>> {
            let e: ParametrixEval = match delta {
                Some(delta) => {
                    let dt = t_end - t;
                    let k = FrozenKernel::new(
                        &model.drift,
                        covariance_const(&model.drift, delta, dt)?.c,
                        dt,
                    )?;
                    eval_kernel(model, &k, x, &y, true)
                }
                None => parametrix_eval(model, *t, x, t_end, &y, true)?,
            };
            Ok(derivative_row(*t, x, t_end, &y, e.value, &e.grad, &e.hess))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut csv = Csv::new(&derivative_header(model, "p"));
    rows.iter().for_each(|r| csv.row(r));
    out.write("kernel.csv", &csv.finish())
}

fn build_density(model: &Model, out: &OutDir, grid: &str, pole: Option<&str>) -> Result<()> {
    let (t_end, y) = pole_of(model, pole)?;
    let points = grid_before(model, grid, t_end)?;
    let t_min = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let p = PoleDensity::build(model, t_min, t_end, &y)?;
    let evals = points
        .par_iter()
        .map(|(t, x)| p.eval(*t, x, true))
        .collect::<Result<Vec<_>>>()?;
    let mut csv = Csv::new(&derivative_header(model, "p"));
    for ((t, x), e) in points.iter().zip(&evals) {
        csv.row(&derivative_row(*t, x, t_end, &y, e.value, &e.grad, &e.hess));
    }
    out.write("density.csv", &csv.finish())?;
    let negative = evals
        .iter()
        .filter(|e| e.sign == kolmo::density::Sign::Negative)
        .count();
    let noise = evals
        .iter()
        .filter(|e| e.sign == kolmo::density::Sign::NoiseNegative)
        .count();
    out.write_json(
        "series.json",
        &json!({
            "pole": {"T": t_end, "y": y},
            "t_min": t_min,
            "exact_parametrix": p.is_exact(),
            "series": p.report(),
            "points": points.len(),
            "negative_points": negative,
            "noise_negative_points": noise,
        }),
    )
}

fn solve_cauchy(
    model: &Model,
    out: &OutDir,
    grid: &str,
    t_end: Option<f64>,
    terminal: Option<&str>,
    source: Option<&str>,
) -> Result<()> {
    let t_end = t_end.unwrap_or(model.coeffs.t_bar);
    if terminal.is_none() && source.is_none() {
        return Err(KolmoError::Config(
            "solve-cauchy needs --terminal and/or --source".into(),
        ));
    }
    let cp = CauchyProblem::from_exprs(model, t_end, terminal, source)?;
    let points = grid_before(model, grid, t_end)?;
    let opts = Default::default();
    let values = points
        .par_iter()
        .map(|(t, x)| solve(&cp, *t, x, &opts))
        .collect::<Result<Vec<_>>>()?;
    let mut header = vec!["t".to_string()];
    header.extend(indexed("x", model.n()));
    header.push("u".into());
    let mut csv = Csv::new(&header);
    for ((t, x), u) in points.iter().zip(&values) {
        let mut row = vec![*t];
        row.extend_from_slice(x);
        row.push(*u);
        csv.row(&row);
    }
    out.write("solution.csv", &csv.finish())
}

struct VerifyOptions<'a> {
    checks: &'a str,
    pole: Option<&'a str>,
    point: Option<&'a str>,
    abar: Option<f64>,
    samples: usize,
    seed: u64,
}

const CHECKS: [&str; 6] = [
    "mass",
    "chapman-kolmogorov",
    "residual",
    "gaussian-bounds",
    "expm-orders",
    "holder-blowup",
];

/// Runs the requested checks; returns whether all passed.
fn verify(model: &Model, out: &OutDir, opts: &VerifyOptions) -> Result<bool> {
    let checks: Vec<&str> = opts
        .checks
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect();
    if let Some(bad) = checks.iter().find(|c| !CHECKS.contains(c)) {
        return Err(KolmoError::Config(format!(
            "unknown check `{bad}`; known: {}",
            CHECKS.join(", ")
        )));
    }
    let (t_end, y) = pole_of(model, opts.pole)?;
    let (t, x) = match opts.point {
        Some(src) => {
            let v = parse_point(src, model.n() + 1, "point")?;
            (v[0], v[1..].to_vec())
        }
        None => {
            let x = model.drift.exp(-t_end)? * DVector::from_column_slice(&y);
            (0.0, x.as_slice().to_vec())
        }
    };
    if !(t < t_end) {
        return Err(KolmoError::Config(format!(
            "point time {t} is not before T = {t_end}"
        )));
    }
    let composed = model.quad.composed_tol();
    let s = 0.5 * (t + t_end);
    let needs_pole = checks.iter().any(|c| *c != "expm-orders" && *c != "mass");
    let pole = if needs_pole {
        Some(PoleDensity::build(model, t, t_end, &y)?)
    } else {
        None
    };
    let mut reports: Vec<VerificationReport> = Vec::new();
    for check in &checks {
        let report = match *check {
            "mass" => {
                let abar = match opts.abar {
                    Some(a) => a,
                    None => model.coeffs.a0_constant().ok_or_else(|| {
                        KolmoError::Config(
                            "mass check needs a constant zeroth-order coefficient or --abar".into(),
                        )
                    })?,
                };
                let src = SourceDensity::build(model, t, &x, t_end)?;
                let dens = |ys: &[f64]| src.densities(t_end, ys);
                check_mass(model, (t, &x), t_end, &dens, abar, 1e-4, 20)?
            }
            "chapman-kolmogorov" => {
                let p = pole.as_ref().expect("pole density built");
                let src = SourceDensity::build(model, t, &x, s)?;
                let left = |ys: &[f64]| src.densities(s, ys);
                let right = |eta: &[f64]| p.value(s, eta);
                let direct = p.value(t, &x)?;
                check_chapman_kolmogorov(
                    model,
                    (t, &x),
                    s,
                    (t_end, &y),
                    &left,
                    &right,
                    direct,
                    3.0 * composed,
                    16,
                )?
            }
            "residual" => {
                let p = pole.as_ref().expect("pole density built");
                let u = |r: f64, z: &[f64]| p.value(r, z);
                let au = |r: f64, z: &[f64]| Ok(p.apply_operator(r, z)?.1);
                let inputs = ResidualInputs {
                    u: &u,
                    au: &au,
                    f: None,
                    panels: 128,
                };
                check_residual(&model.drift, &inputs, t, &x, s, 5.0 * composed)?
            }
            "gaussian-bounds" => {
                let p = pole.as_ref().expect("pole density built");
                let grid = BoundGrid {
                    scales: dyadic_scales(t_end - t, 5),
                    points: 9,
                    radius: 3.0,
                };
                let level = if p.is_exact() {
                    BoundLevel::Kernel
                } else {
                    BoundLevel::Levi
                };
                check_gaussian_bounds(p, &grid, level)?
            }
            "expm-orders" => check_expm_block_orders(&model.drift)?,
            "holder-blowup" => {
                let p = pole.as_ref().expect("pole density built");
                blowup_check(p, 0.5, (t_end - t) / 4.0, 5, opts.samples, opts.seed, 0.3)?
            }
            _ => unreachable!("checks are validated above"),
        };
        reports.push(report);
    }
    out.write_json("reports.json", &reports)?;
    let mut csv = Csv::new(&["check_name".to_string(), "quantity".into(), "value".into()]);
    for r in &reports {
        for (k, v) in &r.measured {
            csv.raw_row(&[r.check_name.clone(), k.clone(), num(*v)]);
        }
    }
    out.write("scaling.csv", &csv.finish())?;
    Ok(reports.iter().all(VerificationReport::passed))
}

#[derive(Serialize)]
struct McSummary<'a> {
    report: VerificationReport,
    t: f64,
    x: &'a [f64],
    t_end: f64,
    lo: &'a [f64],
    width: &'a [f64],
    outside: u64,
    reference_outside: f64,
    mean: &'a [f64],
    cov: &'a [f64],
    expected_mean: Option<&'a [f64]>,
    expected_cov: Option<&'a [f64]>,
}

fn mc(
    model: &Model,
    out: &OutDir,
    point: Option<&str>,
    t_end: Option<f64>,
    opts: &McOptions,
    tol: f64,
) -> Result<bool> {
    let n = model.n();
    let (t, x) = match point {
        Some(src) => {
            let v = parse_point(src, n + 1, "point")?;
            (v[0], v[1..].to_vec())
        }
        None => (0.0, vec![0.0; n]),
    };
    let t_end = t_end.unwrap_or(model.coeffs.t_bar);
    let src = SourceDensity::build(model, t, &x, t_end)?;
    let dens = |ys: &[f64]| src.densities(t_end, ys);
    let r = mc_oracle(model, t, &x, t_end, opts, &dens)?;

    let mut header = indexed("y", n);
    header.extend(["count".into(), "mc_prob".into(), "ref_prob".into()]);
    let mut csv = Csv::new(&header);
    let cells = r.counts.len();
    for b in 0..cells {
        let mut idx = b;
        let mut center = vec![0.0; n];
        for i in (0..n).rev() {
            center[i] = r.lo[i] + (idx % r.bins) as f64 * r.width[i] + 0.5 * r.width[i];
            idx /= r.bins;
        }
        center.extend([
            r.counts[b] as f64,
            r.counts[b] as f64 / r.paths as f64,
            r.reference[b],
        ]);
        csv.row(&center);
    }
    out.write("histogram.csv", &csv.finish())?;
    let report = r.report(tol);
    let passed = report.passed();
    out.write_json(
        "mc.json",
        &McSummary {
            report,
            t,
            x: &x,
            t_end,
            lo: &r.lo,
            width: &r.width,
            outside: r.outside,
            reference_outside: r.reference_outside,
            mean: &r.mean,
            cov: &r.cov,
            expected_mean: r.expected_mean.as_deref(),
            expected_cov: r.expected_cov.as_deref(),
        },
    )?;
    Ok(passed)
}
