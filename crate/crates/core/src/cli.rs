//! Command-line driver.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::causality::{
    causal_cone, connectivity_crosscheck, delta_beta_condition, distance_map, omega_norm_sup,
    CrosscheckReport, Stencil,
};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::fermat::{Direction, RayRecord};
use crate::finsler::{FinslerMetric, RandersMetric};
use crate::variational::{multistart_homotopy, CurveRecord, DiscreteCurve, MinimizeOptions};

#[derive(Debug, Parser)]
#[command(name = "randers", version, about = "Randers and Fermat-metric geodesics, lensing and causality diagnostics")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Metric or spacetime config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Segments per discrete curve.
    #[arg(long = "N", global = true)]
    pub n: Option<usize>,
    /// Largest winding number per periodic axis.
    #[arg(long = "K", global = true)]
    pub k: Option<i64>,
    /// Stopping tolerance on the energy gradient.
    #[arg(long, global = true)]
    pub tol: Option<f64>,
    /// Integration step for geodesic shooting.
    #[arg(long, global = true)]
    pub step: Option<f64>,
    /// Grid points per axis for distance maps and cones.
    #[arg(long, global = true)]
    pub resolution: Option<usize>,
    /// Seed for random sampling.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Future- or past-pointing rays.
    #[arg(long, global = true, value_parser = ["future", "past"])]
    pub direction: Option<String>,
    /// Energy E > 0 of timelike geodesics.
    #[arg(long, global = true, allow_negative_numbers = true)]
    pub energy: Option<f64>,
    /// Also write gnuplot-ready `.dat` files.
    #[arg(long, global = true)]
    pub plot_data: bool,
    /// Print the effective config and exit.
    #[arg(long, global = true)]
    pub dump_config: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Check homogeneity, Euler identities, convexity, |omega| and lambda.
    Diag,
    /// Integrate the geodesic from `source` with `velocity` over `length`.
    Geodesic,
    /// Connect `source` to `observer`, one curve per homotopy class.
    Connect,
    /// Light rays from (`source`, `t0`) to the worldline of `observer`.
    Lens,
    /// Fixed-energy timelike geodesics from (`source`, `t0`) to `observer`.
    Timelike,
    /// Forward and backward distance maps from `source`.
    Distmap,
    /// Causal cone of (`source`, `t0`), with a membership query for
    /// (`observer`, `t1`) when both are set.
    Causal,
}

/// Exit code for an error: 2 for usage and config problems, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Expr(_) | Error::Invalid(_) | Error::Dimension { .. } => 2,
        _ => 1,
    }
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Config with command-line overrides applied and validated.
pub fn effective_config(cli: &Cli) -> Result<Config> {
    let path = cli.config.as_ref().ok_or_else(|| usage("--config is required"))?;
    let mut c = Config::load(path)?;
    let k = &mut c.knobs;
    if let Some(n) = cli.n {
        if n < 2 {
            return Err(usage("--N must be at least 2"));
        }
        k.n = n;
    }
    if let Some(v) = cli.k {
        if v < 0 {
            return Err(usage("--K must be >= 0"));
        }
        k.k = v;
    }
    for (name, v, slot) in [("tol", cli.tol, &mut k.tol), ("step", cli.step, &mut k.step)] {
        if let Some(v) = v {
            if !(v > 0.0 && v.is_finite()) {
                return Err(usage(format!("--{name} must be positive")));
            }
            *slot = v;
        }
    }
    if let Some(r) = cli.resolution {
        if r < 2 {
            return Err(usage("--resolution must be at least 2"));
        }
        k.resolution = r;
    }
    if let Some(s) = cli.seed {
        k.seed = s;
    }
    if let Some(d) = &cli.direction {
        k.direction = d.parse()?;
    }
    if let Some(e) = cli.energy {
        if !(e > 0.0 && e.is_finite()) {
            return Err(usage(format!("--energy must be positive, got {e}")));
        }
        k.energy = e;
    }
    Ok(c)
}

/// Runs the command; `Ok(code)` is 0 on success and 1 for failed checks.
pub fn run(cli: &Cli) -> Result<i32> {
    let config = effective_config(cli)?;
    if cli.dump_config {
        print!("{}", config.dump());
        return Ok(0);
    }
    fs::create_dir_all(&cli.out)
        .map_err(|e| usage(format!("cannot create {}: {e}", cli.out.display())))?;
    let out = Output {
        dir: cli.out.clone(),
        plot: cli.plot_data,
    };
    match cli.command {
        Command::Diag => cmd_diag(&config, &out),
        Command::Geodesic => cmd_geodesic(&config, &out),
        Command::Connect => cmd_connect(&config, &out),
        Command::Lens => cmd_lens(&config, &out),
        Command::Timelike => cmd_timelike(&config, &out),
        Command::Distmap => cmd_distmap(&config, &out),
        Command::Causal => cmd_causal(&config, &out),
    }
}

/// Parses `args`, runs, reports errors on stderr and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

struct Output {
    dir: PathBuf,
    plot: bool,
}

impl Output {
    fn write(&self, name: &str, text: &str) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, text).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))
    }

    fn json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value)
            .map_err(|e| Error::Invalid(format!("serializing {name}: {e}")))?;
        s.push('\n');
        self.write(name, &s)
    }

    fn csv(&self, name: &str, header: &[String], rows: &[Vec<f64>]) -> Result<()> {
        self.write(name, &csv_text(header, rows))
    }

    /// Two or more whitespace-separated columns for gnuplot.
    fn dat(&self, name: &str, rows: &[Vec<f64>]) -> Result<()> {
        if !self.plot {
            return Ok(());
        }
        let mut s = String::new();
        for r in rows {
            let cols: Vec<String> = r.iter().map(|v| format!("{v:.16e}")).collect();
            let _ = writeln!(s, "{}", cols.join(" "));
        }
        self.write(name, &s)
    }
}

/// Comma-separated values with 17 significant digits.
pub fn csv_text(header: &[String], rows: &[Vec<f64>]) -> String {
    let mut s = header.join(",");
    s.push('\n');
    for r in rows {
        let cols: Vec<String> = r.iter().map(|v| format!("{v:.16e}")).collect();
        s.push_str(&cols.join(","));
        s.push('\n');
    }
    s
}

fn coord_names(dim: usize) -> Vec<String> {
    (1..=dim).map(|i| format!("x{i}")).collect()
}

fn header(first: &[&str], dim: usize, last: &[&str]) -> Vec<String> {
    first
        .iter()
        .map(|s| s.to_string())
        .chain(coord_names(dim))
        .chain(last.iter().map(|s| s.to_string()))
        .collect()
}

fn require<'a, T>(v: &'a Option<T>, key: &str) -> Result<&'a T> {
    v.as_ref().ok_or_else(|| usage(format!("config key `{key}` is required for this command")))
}

fn vector(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

fn options(c: &Config) -> MinimizeOptions {
    MinimizeOptions::with_tol(c.knobs.tol)
}

fn curve_rows(curve: &DiscreteCurve, extra: &[&[f64]]) -> Vec<Vec<f64>> {
    let s = curve.parameters();
    curve
        .nodes()
        .iter()
        .enumerate()
        .map(|(k, x)| {
            let mut row = vec![s[k]];
            row.extend(x.iter());
            row.extend(extra.iter().map(|col| col[k]));
            row
        })
        .collect()
}

fn plot_rows(nodes: &[DVector<f64>]) -> Vec<Vec<f64>> {
    nodes.iter().map(|x| x.iter().copied().collect()).collect()
}

#[derive(Debug, Serialize)]
struct Check {
    name: &'static str,
    value: f64,
    threshold: f64,
    pass: bool,
}

#[derive(Debug, Serialize)]
struct DiagReport {
    metric: &'static str,
    direction: Option<Direction>,
    seed: u64,
    samples: usize,
    omega_norm_sup: f64,
    lambda: f64,
    delta_beta_sup: Option<f64>,
    checks: Vec<Check>,
    pass: bool,
    message: Option<String>,
}

const DIAG_SAMPLES: usize = 200;
const DIAG_GRID: usize = 21;

fn random_point(metric: &FinslerMetric, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let d = metric.domain();
    DVector::from_fn(d.dim(), |i, _| {
        let (lo, hi) = d.sample_range(i);
        let margin = 0.05 * (hi - lo);
        rng.random_range(lo + margin..hi - margin)
    })
}

fn random_direction(dim: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    loop {
        let y = DVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0));
        if y.norm() > 0.1 {
            return y;
        }
    }
}

fn diag_checks(metric: &FinslerMetric, seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut hom, mut euler, mut cartan) = (0.0f64, 0.0f64, 0.0f64);
    let mut min_eig = f64::INFINITY;
    for _ in 0..DIAG_SAMPLES {
        let x = random_point(metric, &mut rng);
        let y = random_direction(metric.dim(), &mut rng);
        let f = metric.eval(&x, &y);
        for lambda in [0.5, 2.0, 3.7] {
            let fl = metric.eval(&x, &(&y * lambda));
            hom = hom.max((fl - lambda * f).abs() / (lambda * f));
        }
        let g = metric.g_matrix_fd(&x, &y)?;
        euler = euler.max((y.dot(&(&g * &y)) - f * f).abs() / (f * f));
        let a = metric.cartan_tensor(&x, &y)?;
        cartan = cartan.max(a.contract_first(&y).amax());
        let g = metric.g_matrix(&x, &y)?;
        min_eig = min_eig.min(g.symmetric_eigenvalues().min());
    }
    let check = |name, value: f64, threshold: f64| Check {
        name,
        value,
        threshold,
        pass: value <= threshold,
    };
    Ok(vec![
        check("homogeneity", hom, 1e-12),
        check("euler_fundamental_tensor", euler, 1e-6),
        check("euler_cartan", cartan, 1e-7),
        Check {
            name: "positive_definite",
            value: min_eig,
            threshold: 0.0,
            pass: min_eig > 0.0,
        },
    ])
}

fn lambda_max(metric: &FinslerMetric) -> f64 {
    metric
        .domain()
        .sample_grid(DIAG_GRID)
        .iter()
        .map(|x| metric.reversibility(x))
        .fold(1.0, f64::max)
}

fn cmd_diag(c: &Config, out: &Output) -> Result<i32> {
    let seed = c.knobs.seed;
    let (kind, direction, randers, delta_beta) = if c.is_spacetime() {
        let st = c.spacetime()?;
        let db = delta_beta_condition(&st, DIAG_GRID).value;
        let m = st.metric_for(c.knobs.direction)?;
        let r = m.as_randers().cloned().expect("Fermat metrics are Randers");
        ("fermat", Some(c.knobs.direction), r, Some(db))
    } else {
        ("randers", None, c.randers_unchecked()?, None)
    };
    let sup = omega_norm_sup(&randers, DIAG_GRID).value;
    let mut report = DiagReport {
        metric: kind,
        direction,
        seed,
        samples: DIAG_SAMPLES,
        omega_norm_sup: sup,
        lambda: f64::NAN,
        delta_beta_sup: delta_beta,
        checks: vec![Check {
            name: "randers_condition",
            value: sup,
            threshold: 1.0,
            pass: sup < 1.0,
        }],
        pass: false,
        message: None,
    };
    if sup >= 1.0 {
        report.lambda = f64::INFINITY;
        report.message = Some(format!("construction rejected: |omega| = {sup} >= 1"));
        out.json("diag.json", &report)?;
        eprintln!("construction rejected: |omega| = {sup} >= 1");
        return Ok(1);
    }
    let metric = FinslerMetric::from(RandersMetric::new(randers.h().clone(), randers.omega().clone())?);
    report.checks.extend(diag_checks(&metric, seed)?);
    report.lambda = lambda_max(&metric);
    report.pass = report.checks.iter().all(|c| c.pass);
    out.json("diag.json", &report)?;
    Ok(if report.pass { 0 } else { 1 })
}

#[derive(Debug, Serialize)]
struct GeodesicSummary {
    source: Vec<f64>,
    velocity: Vec<f64>,
    length: f64,
    step: f64,
    nodes: usize,
    end: Vec<f64>,
    exited: bool,
}

fn cmd_geodesic(c: &Config, out: &Output) -> Result<i32> {
    let metric = c.metric()?;
    let x0 = vector(require(&c.events.source, "source")?);
    let v0 = vector(require(&c.events.velocity, "velocity")?);
    let length = c.events.length.unwrap_or(1.0);
    let shot = metric.geodesic_shoot(&x0, &v0, length, c.knobs.step)?;
    let rows: Vec<Vec<f64>> = shot
        .s
        .iter()
        .zip(&shot.x)
        .map(|(s, x)| std::iter::once(*s).chain(x.iter().copied()).collect())
        .collect();
    out.csv("geodesic.csv", &header(&["s"], c.dim, &[]), &rows)?;
    out.dat("geodesic.dat", &plot_rows(&shot.x))?;
    out.json(
        "summary.json",
        &GeodesicSummary {
            source: x0.iter().copied().collect(),
            velocity: v0.iter().copied().collect(),
            length,
            step: c.knobs.step,
            nodes: shot.x.len(),
            end: shot.last().iter().copied().collect(),
            exited: shot.exited,
        },
    )?;
    Ok(0)
}

#[derive(Debug, Serialize)]
struct ConnectSummary {
    source: Vec<f64>,
    target: Vec<f64>,
    n: usize,
    k: i64,
    curves: Vec<CurveRecord>,
}

fn cmd_connect(c: &Config, out: &Output) -> Result<i32> {
    let metric = c.metric()?;
    let p = vector(require(&c.events.source, "source")?);
    let q = vector(require(&c.events.observer, "observer")?);
    let found = multistart_homotopy(&metric, &p, &q, c.knobs.k, c.knobs.n, &options(c))?;
    for (i, r) in found.iter().enumerate() {
        out.csv(&format!("curve_{i}.csv"), &header(&["s"], c.dim, &[]), &curve_rows(&r.curve, &[]))?;
        out.dat(&format!("curve_{i}.dat"), &plot_rows(r.curve.nodes()))?;
    }
    let summary = ConnectSummary {
        source: p.iter().copied().collect(),
        target: q.iter().copied().collect(),
        n: c.knobs.n,
        k: c.knobs.k,
        curves: found.iter().map(|r| r.record()).collect(),
    };
    out.json("summary.json", &summary)?;
    Ok(if summary.curves.iter().any(|r| r.converged) { 0 } else { 1 })
}

#[derive(Debug, Serialize)]
struct RaySummary {
    direction: Direction,
    source: Vec<f64>,
    t0: f64,
    observer: Vec<f64>,
    n: usize,
    k: i64,
    energy: Option<f64>,
    interval: Option<(f64, f64)>,
    rays: Vec<RayRecord>,
}

fn cmd_lens(c: &Config, out: &Output) -> Result<i32> {
    let st = c.spacetime()?;
    let p = vector(require(&c.events.source, "source")?);
    let q = vector(require(&c.events.observer, "observer")?);
    let dir = c.knobs.direction;
    let mut rays = st.lens_images(&p, c.events.t0, &q, c.knobs.k, c.knobs.n, &options(c), dir)?;
    rays.sort_by(|a, b| a.arrival_time.total_cmp(&b.arrival_time));
    for (i, r) in rays.iter().enumerate() {
        let rows = curve_rows(&r.spatial, &[&r.t]);
        out.csv(&format!("ray_{i}.csv"), &header(&["s"], c.dim, &["t"]), &rows)?;
        out.dat(&format!("ray_{i}.dat"), &plot_rows(r.spatial.nodes()))?;
    }
    out.json(
        "summary.json",
        &RaySummary {
            direction: dir,
            source: p.iter().copied().collect(),
            t0: c.events.t0,
            observer: q.iter().copied().collect(),
            n: c.knobs.n,
            k: c.knobs.k,
            energy: None,
            interval: None,
            rays: rays.iter().map(|r| r.record()).collect(),
        },
    )?;
    if rays.is_empty() {
        eprintln!("no homotopy class produced a light ray");
        return Ok(1);
    }
    Ok(0)
}

fn cmd_timelike(c: &Config, out: &Output) -> Result<i32> {
    let st = c.spacetime()?;
    let p = vector(require(&c.events.source, "source")?);
    let q = vector(require(&c.events.observer, "observer")?);
    let interval = c.events.interval.unwrap_or((0.0, 1.0));
    let e = c.knobs.energy;
    let res = st.timelike_fixed_energy(&p, c.events.t0, &q, e, interval, c.knobs.k, c.knobs.n, &options(c))?;
    for (i, r) in res.iter().enumerate() {
        let rows: Vec<Vec<f64>> = (0..r.x.len())
            .map(|k| {
                std::iter::once(r.s[k])
                    .chain(r.x[k].iter().copied())
                    .chain([r.t[k], r.u[k]])
                    .collect()
            })
            .collect();
        out.csv(&format!("timelike_{i}.csv"), &header(&["s"], c.dim, &["t", "u"]), &rows)?;
        out.dat(&format!("timelike_{i}.dat"), &plot_rows(&r.x))?;
    }
    out.json(
        "summary.json",
        &RaySummary {
            direction: Direction::Future,
            source: p.iter().copied().collect(),
            t0: c.events.t0,
            observer: q.iter().copied().collect(),
            n: c.knobs.n,
            k: c.knobs.k,
            energy: Some(e),
            interval: Some(interval),
            rays: res.iter().map(|r| r.record()).collect(),
        },
    )?;
    if res.is_empty() {
        eprintln!("no homotopy class produced a timelike geodesic");
        return Ok(1);
    }
    Ok(0)
}

#[derive(Debug, Serialize)]
struct DistmapSummary {
    source: Vec<f64>,
    resolution: usize,
    stencil: Stencil,
    nodes: usize,
    forward_max: f64,
    backward_max: f64,
}

fn finite_max(v: &[f64]) -> f64 {
    v.iter().copied().filter(|x| x.is_finite()).fold(0.0, f64::max)
}

/// Node values as a matrix with axis 1 along rows (2D grids only).
fn heatmap(axes: &[Vec<f64>], values: &[f64]) -> Vec<Vec<f64>> {
    let nx = axes[0].len();
    values.chunks(nx).map(|r| r.to_vec()).collect()
}

fn cmd_distmap(c: &Config, out: &Output) -> Result<i32> {
    let metric = c.metric()?;
    let x0 = vector(require(&c.events.source, "source")?);
    let map = distance_map(&metric, &x0, c.knobs.resolution, Stencil::Sixteen)?;
    let rows: Vec<Vec<f64>> = (0..map.len())
        .map(|i| {
            map.point(i)
                .iter()
                .copied()
                .chain([map.forward[i], map.backward[i]])
                .collect()
        })
        .collect();
    out.csv("distmap.csv", &header(&[], c.dim, &["dplus", "dminus"]), &rows)?;
    if c.dim == 2 {
        out.dat("dplus.dat", &heatmap(&map.grid.axes, &map.forward))?;
        out.dat("dminus.dat", &heatmap(&map.grid.axes, &map.backward))?;
    }
    out.json(
        "summary.json",
        &DistmapSummary {
            source: map.source.clone(),
            resolution: c.knobs.resolution,
            stencil: map.stencil,
            nodes: map.len(),
            forward_max: finite_max(&map.forward),
            backward_max: finite_max(&map.backward),
        },
    )?;
    Ok(0)
}

#[derive(Debug, Serialize)]
struct CausalSummary {
    apex: Vec<f64>,
    t0: f64,
    direction: Direction,
    horizon: f64,
    resolution: usize,
    slices: usize,
    query: Option<(Vec<f64>, f64)>,
    member: Option<bool>,
    crosscheck: Option<CrosscheckReport>,
}

fn cmd_causal(c: &Config, out: &Output) -> Result<i32> {
    let st = c.spacetime()?;
    let x0 = vector(require(&c.events.source, "source")?);
    let t0 = c.events.t0;
    let dir = c.knobs.direction;
    let slices = c.events.slices.unwrap_or(8);
    let horizon = c.events.horizon.unwrap_or(f64::INFINITY);
    let cone = causal_cone(&st, &x0, t0, horizon, dir, c.knobs.resolution, slices)?;
    out.json("cone.json", &cone)?;
    for (i, s) in cone.slices.iter().enumerate() {
        if !out.plot {
            break;
        }
        let mut text = String::new();
        for line in &s.polylines {
            for p in line {
                let _ = writeln!(text, "{:.16e} {:.16e}", p[0], p[1]);
            }
            text.push('\n');
        }
        out.write(&format!("slice_{i}.dat"), &text)?;
    }
    let mut summary = CausalSummary {
        apex: cone.apex.clone(),
        t0,
        direction: dir,
        horizon: if horizon.is_finite() { horizon } else { finite_max(cone.map.values(dir)) },
        resolution: c.knobs.resolution,
        slices,
        query: None,
        member: None,
        crosscheck: None,
    };
    let mut code = 0;
    if let (Some(x1), Some(t1)) = (&c.events.observer, c.events.t1) {
        let x1v = vector(x1);
        summary.query = Some((x1.clone(), t1));
        summary.member = Some(
            cone.contains(&x1v, t1)
                .ok_or_else(|| Error::Domain { point: x1.clone() })?,
        );
        if dir == Direction::Future && t1 > t0 {
            match connectivity_crosscheck(&st, &cone.map, &x0, t0, &x1v, t1, c.knobs.n, &options(c)) {
                Ok(r) => summary.crosscheck = Some(r),
                Err(e @ Error::Inconsistent(_)) => {
                    eprintln!("error: {e}");
                    code = 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
    out.json("summary.json", &summary)?;
    Ok(code)
}
