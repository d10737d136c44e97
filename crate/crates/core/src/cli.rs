//! Command-line front end: `estimate`, `sweep` and `simulate`.
//!
//! Single estimates are written as JSON, sweeps and simulation campaigns as
//! tidy CSV preceded by `# key: value` metadata lines. Failures print a JSON
//! object `{"error": {"kind", "message"}}` on stderr and exit nonzero.

use std::fmt::Write as _;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::balancing::{eb_att, mixed_eb};
use crate::dataset::{load_csv_with, CsvOptions, ObservedSample};
use crate::error::{Error, Result};
use crate::estimators::{ipw_theta, mipw_att, ow_ato, ow_theta, EstimateReport, EstimatingSystem};
use crate::inference::{bootstrap_se, sandwich_se};
use crate::propensity::fit_logistic;
use crate::resample::mipw_m;
use crate::simulation::{run_monte_carlo, EstimatorKind, MonteCarloTable, Overlap, ScenarioSpec};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Environment variable holding the worker thread count.
pub const THREADS_ENV: &str = "MIXING_THREADS";

/// Shift applied by `--delta-nudge` when an estimator fails at a grid point.
pub const NUDGE: f64 = 0.001;

#[derive(Parser, Debug)]
#[command(name = "mixing", version, about = "ATT estimation under weak overlap by mixing")]
struct Cli {
    #[command(subcommand)]
    command: CommandArgs,
}

#[derive(Subcommand, Debug)]
enum CommandArgs {
    /// Estimate the ATT on a CSV file and write a JSON report.
    Estimate(EstimateArgs),
    /// Estimate over a grid of mixing proportions and write a CSV table.
    Sweep(SweepArgs),
    /// Run a Monte Carlo campaign and write a CSV table.
    Simulate(SimulateArgs),
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Input CSV with a header row.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "y")]
    outcome: String,
    #[arg(long, default_value = "z")]
    treatment: String,
    /// Field delimiter (single character).
    #[arg(long, default_value = ",")]
    delimiter: char,
}

#[derive(Args, Debug)]
struct RandomArgs {
    /// Master seed; required whenever a result depends on random draws.
    #[arg(long)]
    seed: Option<u64>,
    /// Mixing replicates for MIPW.M and MEB.
    #[arg(short = 'M', long = "mix-replicates", default_value_t = 200)]
    mix_replicates: usize,
    /// Bootstrap replicates (0 disables the bootstrap).
    #[arg(long, default_value_t = 0)]
    boot: usize,
}

#[derive(Args, Debug)]
struct EstimateArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Comma-separated estimators: ipw, mipw, mipw.m, ow, eb, meb.
    #[arg(long, value_delimiter = ',', default_value = "mipw")]
    estimator: Vec<String>,
    #[arg(long, value_parser = parse_delta)]
    delta: Option<f64>,
    #[command(flatten)]
    random: RandomArgs,
    /// JSON output path (stdout when omitted).
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_delimiter = ',', default_value = "ipw,mipw,ow")]
    estimator: Vec<String>,
    /// Grid `start:stop:step` strictly inside (0,1).
    #[arg(long = "delta-grid", conflicts_with = "delta")]
    delta_grid: Option<String>,
    #[arg(long, value_parser = parse_delta)]
    delta: Option<f64>,
    /// On failure at a grid point retry at delta - 0.001, then delta + 0.001.
    #[arg(long = "delta-nudge")]
    delta_nudge: bool,
    #[command(flatten)]
    random: RandomArgs,
    /// CSV output path (stdout when omitted).
    #[arg(long)]
    output: Option<PathBuf>,
    /// Standard error versus delta chart.
    #[arg(long)]
    svg: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Scenario file (TOML key-value pairs); flags below override it.
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long)]
    overlap: Option<String>,
    /// Observe transformed covariates (weak overlap design).
    #[arg(long)]
    misspecified: bool,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    replications: Option<usize>,
    /// Run the full 3000-replication campaign.
    #[arg(long, conflicts_with = "replications")]
    full: bool,
    #[arg(long = "delta-grid", conflicts_with = "delta")]
    delta_grid: Option<String>,
    #[arg(long, value_parser = parse_delta)]
    delta: Option<f64>,
    #[arg(long, value_delimiter = ',', default_value = "ipw,mipw,ow")]
    estimator: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(short = 'M', long = "mix-replicates")]
    mix_replicates: Option<usize>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    svg: Option<PathBuf>,
}

fn parse_delta(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("'{s}' is not a number"))?;
    crate::error::check_delta(v).map_err(|e| e.to_string())?;
    Ok(v)
}

/// Parses `start:stop:step` into a grid strictly inside (0,1).
pub fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    let bad = || Error::InvalidArgument(format!("delta grid '{spec}' must look like start:stop:step"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let v: Vec<f64> = parts.iter().map(|p| p.trim().parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|_| bad())?;
    let (start, stop, step) = (v[0], v[1], v[2]);
    if !(step > 0.0) || stop < start {
        return Err(bad());
    }
    let count = ((stop - start) / step + 1e-9).floor() as usize;
    let grid: Vec<f64> = (0..=count)
        .map(|k| ((start + k as f64 * step) * 1e10).round() / 1e10)
        .collect();
    for &d in &grid {
        crate::error::check_delta(d)?;
    }
    Ok(grid)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommandKind {
    Estimate,
    Sweep,
    Simulate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSource {
    pub path: PathBuf,
    pub outcome: String,
    pub treatment: String,
    pub delimiter: u8,
}

/// A validated command line.
#[derive(Debug, Clone, PartialEq)]
pub struct RunPlan {
    pub command: CommandKind,
    pub input: Option<DataSource>,
    pub scenario: Option<ScenarioSpec>,
    pub estimators: Vec<EstimatorKind>,
    pub deltas: Vec<f64>,
    pub mix_replicates: usize,
    pub boot: usize,
    pub seed: Option<u64>,
    pub output: Option<PathBuf>,
    pub svg: Option<PathBuf>,
    pub delta_nudge: bool,
}

#[derive(Debug)]
pub enum CliError {
    /// Help or version text requested; not a failure.
    Display(String),
    Usage(String),
    Run(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Run(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Display(_) => 0,
            CliError::Usage(_) => 2,
            CliError::Run(_) => 1,
        }
    }

    pub fn to_json(&self) -> Value {
        let (kind, message) = match self {
            CliError::Display(m) => ("display", m.clone()),
            CliError::Usage(m) => ("usage", m.clone()),
            CliError::Run(e) => (e.kind(), e.to_string()),
        };
        json!({ "error": { "kind": kind, "message": message } })
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn estimators(names: &[String], allow_oracle: bool) -> std::result::Result<Vec<EstimatorKind>, CliError> {
    let mut out = Vec::new();
    for n in names.iter().filter(|n| !n.trim().is_empty()) {
        let k = EstimatorKind::parse(n).map_err(|e| usage(e.to_string()))?;
        if k == EstimatorKind::Oracle && !allow_oracle {
            return Err(usage("the oracle estimator needs potential outcomes and is only available in simulate"));
        }
        if !out.contains(&k) {
            out.push(k);
        }
    }
    if out.is_empty() {
        return Err(usage("select at least one estimator"));
    }
    Ok(out)
}

fn source(d: DataArgs) -> std::result::Result<DataSource, CliError> {
    if !d.delimiter.is_ascii() {
        return Err(usage("delimiter must be a single ASCII character"));
    }
    Ok(DataSource {
        path: d.input,
        outcome: d.outcome,
        treatment: d.treatment,
        delimiter: d.delimiter as u8,
    })
}

fn deltas(grid: Option<String>, single: Option<f64>) -> std::result::Result<Vec<f64>, CliError> {
    match (grid, single) {
        (Some(g), _) => parse_grid(&g).map_err(|e| usage(e.to_string())),
        (None, Some(d)) => Ok(vec![d]),
        (None, None) => Ok(Vec::new()),
    }
}

fn needs_seed(est: &[EstimatorKind], boot: usize) -> bool {
    boot > 0 || est.iter().any(|k| matches!(k, EstimatorKind::MipwM | EstimatorKind::Meb))
}

/// Parses the arguments after the program name.
pub fn parse_args<S: AsRef<str>>(argv: &[S]) -> std::result::Result<RunPlan, CliError> {
    let args = std::iter::once("mixing").chain(argv.iter().map(|s| s.as_ref()));
    let cli = Cli::try_parse_from(args).map_err(|e| match e.kind() {
        clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => CliError::Display(e.to_string()),
        _ => CliError::Usage(e.to_string().trim_end().to_string()),
    })?;
    let plan = match cli.command {
        CommandArgs::Estimate(a) => {
            let est = estimators(&a.estimator, false)?;
            if est.iter().any(|k| k.uses_delta()) && a.delta.is_none() {
                return Err(usage("--delta is required for mipw, mipw.m and meb"));
            }
            RunPlan {
                command: CommandKind::Estimate,
                input: Some(source(a.data)?),
                scenario: None,
                deltas: a.delta.into_iter().collect(),
                mix_replicates: a.random.mix_replicates,
                boot: a.random.boot,
                seed: a.random.seed,
                output: a.output,
                svg: None,
                delta_nudge: false,
                estimators: est,
            }
        }
        CommandArgs::Sweep(a) => {
            let est = estimators(&a.estimator, false)?;
            let grid = deltas(a.delta_grid, a.delta)?;
            if est.iter().any(|k| k.uses_delta()) && grid.is_empty() {
                return Err(usage("--delta-grid or --delta is required for mipw, mipw.m and meb"));
            }
            RunPlan {
                command: CommandKind::Sweep,
                input: Some(source(a.data)?),
                scenario: None,
                deltas: grid,
                mix_replicates: a.random.mix_replicates,
                boot: a.random.boot,
                seed: a.random.seed,
                output: a.output,
                svg: a.svg,
                delta_nudge: a.delta_nudge,
                estimators: est,
            }
        }
        CommandArgs::Simulate(a) => {
            let mut spec = match &a.scenario {
                Some(p) => ScenarioSpec::load(p).map_err(|e| usage(e.to_string()))?,
                None => match a.misspecified {
                    true => ScenarioSpec::misspecified(),
                    false => {
                        let o = a.overlap.as_deref().map(Overlap::parse).transpose().map_err(|e| usage(e.to_string()))?;
                        ScenarioSpec::correct(o.unwrap_or(Overlap::Strong))
                    }
                },
            };
            if a.scenario.is_some() {
                if let Some(o) = &a.overlap {
                    spec.overlap = Overlap::parse(o).map_err(|e| usage(e.to_string()))?;
                }
                spec.misspecified |= a.misspecified;
            }
            if let Some(n) = a.n {
                spec.n = n;
            }
            if let Some(r) = a.replications {
                spec.replications = r;
            }
            if a.full {
                spec.replications = 3000;
            }
            if let Some(m) = a.mix_replicates {
                spec.mix_replicates = m;
            }
            let grid = deltas(a.delta_grid, a.delta)?;
            if !grid.is_empty() {
                spec.delta_grid = grid;
            }
            let Some(seed) = a.seed else {
                return Err(usage("--seed is required for simulate"));
            };
            spec.seed = seed;
            spec.validate().map_err(|e| usage(e.to_string()))?;
            RunPlan {
                command: CommandKind::Simulate,
                input: None,
                deltas: spec.delta_grid.clone(),
                mix_replicates: spec.mix_replicates,
                boot: 0,
                seed: Some(seed),
                output: a.output,
                svg: a.svg,
                delta_nudge: false,
                estimators: estimators(&a.estimator, true)?,
                scenario: Some(spec),
            }
        }
    };
    if plan.seed.is_none() && needs_seed(&plan.estimators, plan.boot) {
        return Err(usage("--seed is required for mipw.m, meb and the bootstrap"));
    }
    Ok(plan)
}

/// One estimator evaluated on a dataset, with standard errors attached.
fn point_and_robust(sample: &ObservedSample, kind: EstimatorKind, delta: Option<f64>, m: usize, seed: u64) -> Result<EstimateReport> {
    let need = |d: Option<f64>| d.ok_or_else(|| Error::InvalidArgument(format!("{} needs a delta", kind.name())));
    let robust = |theta, system| match sandwich_se(sample, &theta, system) {
        Ok(r) => Some(r.se),
        Err(e) => {
            log::warn!("{}: no robust standard error: {e}", kind.name());
            None
        }
    };
    match kind {
        EstimatorKind::Ipw => {
            let fit = fit_logistic(sample)?;
            let mut r = crate::estimators::ipw_att(sample, &fit)?;
            r.robust_se = robust(ipw_theta(sample, &fit)?, EstimatingSystem::Ipw);
            Ok(r)
        }
        EstimatorKind::Ow => {
            let fit = fit_logistic(sample)?;
            let mut r = ow_ato(sample, &fit)?;
            r.robust_se = robust(ow_theta(sample, &fit)?, EstimatingSystem::Ow);
            Ok(r)
        }
        EstimatorKind::Mipw => {
            let d = need(delta)?;
            let (mut r, theta) = mipw_att(sample, d)?;
            r.robust_se = robust(theta, EstimatingSystem::Mipw { delta: d });
            Ok(r)
        }
        EstimatorKind::MipwM => mipw_m(sample, need(delta)?, m, seed),
        EstimatorKind::Eb => eb_att(sample),
        EstimatorKind::Meb => mixed_eb(sample, need(delta)?, m, seed),
        EstimatorKind::Oracle => Err(Error::InvalidArgument("oracle needs simulated potential outcomes".into())),
    }
}

fn point_only(sample: &ObservedSample, kind: EstimatorKind, delta: Option<f64>, m: usize, seed: u64) -> Result<f64> {
    match kind {
        EstimatorKind::Ipw => Ok(crate::estimators::ipw_att(sample, &fit_logistic(sample)?)?.point),
        EstimatorKind::Ow => Ok(ow_ato(sample, &fit_logistic(sample)?)?.point),
        EstimatorKind::Mipw => Ok(mipw_att(sample, delta.unwrap_or(f64::NAN))?.0.point),
        _ => Ok(point_and_robust(sample, kind, delta, m, seed)?.point),
    }
}

fn full_estimate(sample: &ObservedSample, plan: &RunPlan, kind: EstimatorKind, delta: Option<f64>) -> Result<EstimateReport> {
    let seed = plan.seed.unwrap_or(0);
    let mut report = point_and_robust(sample, kind, delta, plan.mix_replicates, seed)?;
    if plan.boot > 0 {
        let m = plan.mix_replicates;
        let boot = bootstrap_se(sample, |s, inner| point_only(s, kind, delta, m, inner), plan.boot, seed)?;
        report.boot_se = Some(boot.se);
    }
    Ok(report)
}

fn report_json(r: &EstimateReport, seed: Option<u64>) -> Value {
    json!({
        "estimand": r.estimand,
        "estimator": r.estimator,
        "delta": r.delta,
        "point": r.point,
        "robust_se": r.robust_se,
        "boot_se": r.boot_se,
        "diagnostics": {
            "negative_weights": r.diagnostics.negative_weights,
            "max_weight": r.diagnostics.max_weight,
            "ess": r.diagnostics.ess,
        },
        "seed": seed,
        "version": VERSION,
    })
}

fn load(plan: &RunPlan) -> Result<ObservedSample> {
    let src = plan
        .input
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("no input file".into()))?;
    let sample = load_csv_with(
        &src.path,
        &src.outcome,
        &src.treatment,
        CsvOptions { delimiter: src.delimiter },
    )?;
    sample.check_rank();
    Ok(sample)
}

fn emit(plan: &RunPlan, bytes: &[u8], stdout: &mut dyn Write) -> Result<()> {
    match &plan.output {
        Some(p) => std::fs::write(p, bytes)?,
        None => stdout.write_all(bytes)?,
    }
    Ok(())
}

fn metadata(plan: &RunPlan) -> Vec<(String, String)> {
    let mut m = vec![
        ("seed".to_string(), plan.seed.map(|s| s.to_string()).unwrap_or_else(|| "none".into())),
        ("version".to_string(), VERSION.to_string()),
    ];
    if let Some(src) = &plan.input {
        m.push(("input".into(), src.path.display().to_string()));
    }
    if let Some(spec) = &plan.scenario {
        m.push(("scenario".into(), spec.name.clone()));
        m.push(("n".into(), spec.n.to_string()));
        m.push(("replications".into(), spec.replications.to_string()));
        m.push(("mix_replicates".into(), spec.mix_replicates.to_string()));
    } else {
        m.push(("mix_replicates".into(), plan.mix_replicates.to_string()));
        m.push(("boot".into(), plan.boot.to_string()));
    }
    m
}

/// One row of a sweep table.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub delta: Option<f64>,
    /// Delta actually used; differs from `delta` after a nudge.
    pub delta_used: Option<f64>,
    pub report: EstimateReport,
}

impl SweepRow {
    pub fn nudged(&self) -> bool {
        self.delta != self.delta_used
    }
}

fn sweep_rows(sample: &ObservedSample, plan: &RunPlan) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &kind in &plan.estimators {
        if !kind.uses_delta() {
            rows.push(SweepRow {
                delta: None,
                delta_used: None,
                report: full_estimate(sample, plan, kind, None)?,
            });
            continue;
        }
        for &d in &plan.deltas {
            match full_estimate(sample, plan, kind, Some(d)) {
                Ok(report) => rows.push(SweepRow {
                    delta: Some(d),
                    delta_used: Some(d),
                    report,
                }),
                Err(e) if plan.delta_nudge => {
                    let mut done = false;
                    for alt in [d - NUDGE, d + NUDGE] {
                        if !(alt > 0.0 && alt < 1.0) {
                            continue;
                        }
                        if let Ok(report) = full_estimate(sample, plan, kind, Some(alt)) {
                            log::warn!("{} failed at delta {d} ({e}); used {alt}", kind.name());
                            rows.push(SweepRow {
                                delta: Some(d),
                                delta_used: Some(alt),
                                report,
                            });
                            done = true;
                            break;
                        }
                    }
                    if !done {
                        return Err(e);
                    }
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok(rows)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn sweep_csv(rows: &[SweepRow], meta: &[(String, String)]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    for (k, v) in meta {
        writeln!(buf, "# {k}: {v}")?;
    }
    let mut w = csv::Writer::from_writer(&mut buf);
    w.write_record([
        "estimator",
        "delta",
        "delta_used",
        "nudged",
        "point",
        "robust_se",
        "boot_se",
        "negative_weights",
        "max_weight",
        "ess",
    ])?;
    for r in rows {
        w.write_record([
            r.report.estimator.clone(),
            opt(r.delta),
            opt(r.delta_used),
            r.nudged().to_string(),
            r.report.point.to_string(),
            opt(r.report.robust_se),
            opt(r.report.boot_se),
            r.report.diagnostics.negative_weights.to_string(),
            r.report.diagnostics.max_weight.to_string(),
            r.report.diagnostics.ess.to_string(),
        ])?;
    }
    w.flush()?;
    drop(w);
    Ok(buf)
}

/// A polyline for the standard error chart.
#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub dotted: bool,
}

const PALETTE: [&str; 7] = ["#d62728", "#2ca02c", "#1f77b4", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"];

/// Static SVG line chart of standard errors against delta.
pub fn se_chart_svg(title: &str, series: &[Series]) -> String {
    let (w, h, left, right, top, bottom) = (720.0, 440.0, 70.0, 180.0, 40.0, 50.0);
    let ymax = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.1))
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::max)
        .max(1e-12)
        * 1.1;
    let px = |x: f64| left + x * (w - left - right);
    let py = |y: f64| h - bottom - y / ymax * (h - top - bottom);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, px(0.5), escape(title));
    let _ = writeln!(
        s,
        r#"<path d="M{l} {t} L{l} {b} L{r} {b}" fill="none" stroke="black"/>"#,
        l = px(0.0),
        t = top,
        b = h - bottom,
        r = px(1.0)
    );
    for k in 0..=4 {
        let x = k as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{x}</text>"#, px(x), h - bottom + 18.0);
        let y = ymax * k as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{y:.3}</text>"#, left - 6.0, py(y) + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">delta</text>"#, px(0.5), h - 10.0);
    let _ = writeln!(s, r#"<text x="16" y="{:.1}" transform="rotate(-90 16 {:.1})" text-anchor="middle">standard error</text>"#, py(ymax / 2.0), py(ymax / 2.0));
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = ser
            .points
            .iter()
            .filter(|p| p.1.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        if pts.is_empty() {
            continue;
        }
        let dash = if ser.dotted { r#" stroke-dasharray="4 3""# } else { "" };
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"{dash}/>"#, pts.join(" "));
        let ly = top + 16.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="1.5"{dash}/><text x="{:.1}" y="{:.1}">{}</text>"#,
            w - right + 10.0,
            w - right + 34.0,
            w - right + 40.0,
            ly + 4.0,
            escape(&ser.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn flat_or_curve(points: Vec<(Option<f64>, f64)>, grid: &[f64]) -> Vec<(f64, f64)> {
    match points.as_slice() {
        [(None, v)] => {
            let (lo, hi) = (grid.first().copied().unwrap_or(0.0), grid.last().copied().unwrap_or(1.0));
            vec![(lo, *v), (hi, *v)]
        }
        _ => points.into_iter().filter_map(|(d, v)| d.map(|d| (d, v))).collect(),
    }
}

fn sweep_series(rows: &[SweepRow], plan: &RunPlan) -> Vec<Series> {
    let mut out = Vec::new();
    for &kind in &plan.estimators {
        let mine: Vec<&SweepRow> = rows.iter().filter(|r| r.report.estimator == kind.name()).collect();
        for (label, dotted, get) in [
            ("bootstrap SE", false, (|r: &SweepRow| r.report.boot_se) as fn(&SweepRow) -> Option<f64>),
            ("robust SE", true, |r: &SweepRow| r.report.robust_se),
        ] {
            let pts: Vec<(Option<f64>, f64)> = mine.iter().filter_map(|r| get(r).map(|v| (r.delta_used, v))).collect();
            if !pts.is_empty() {
                out.push(Series {
                    label: format!("{} {label}", kind.name()),
                    points: flat_or_curve(pts, &plan.deltas),
                    dotted,
                });
            }
        }
    }
    out
}

fn table_series(t: &MonteCarloTable, plan: &RunPlan) -> Vec<Series> {
    let mut out = Vec::new();
    for &kind in &plan.estimators {
        let mine: Vec<_> = t.rows.iter().filter(|r| r.estimator == kind).collect();
        let sd: Vec<(Option<f64>, f64)> = mine.iter().map(|r| (r.delta, r.sd_est)).collect();
        out.push(Series {
            label: format!("{} MC SD", kind.name()),
            points: flat_or_curve(sd, &plan.deltas),
            dotted: false,
        });
        let se: Vec<(Option<f64>, f64)> = mine.iter().filter_map(|r| r.mean_robust_se.map(|v| (r.delta, v))).collect();
        if !se.is_empty() {
            out.push(Series {
                label: format!("{} robust SE", kind.name()),
                points: flat_or_curve(se, &plan.deltas),
                dotted: true,
            });
        }
    }
    out
}

/// Runs a plan, writing primary output to `--output` or `stdout`.
pub fn execute(plan: &RunPlan, stdout: &mut dyn Write) -> Result<()> {
    match plan.command {
        CommandKind::Estimate => {
            let sample = load(plan)?;
            let delta = plan.deltas.first().copied();
            let reports = plan
                .estimators
                .iter()
                .map(|&k| full_estimate(&sample, plan, k, k.uses_delta().then_some(delta).flatten()))
                .collect::<Result<Vec<_>>>()?;
            let value = match reports.as_slice() {
                [one] => report_json(one, plan.seed),
                many => Value::Array(many.iter().map(|r| report_json(r, plan.seed)).collect()),
            };
            let mut text = serde_json::to_string_pretty(&value).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            text.push('\n');
            emit(plan, text.as_bytes(), stdout)
        }
        CommandKind::Sweep => {
            let sample = load(plan)?;
            let rows = sweep_rows(&sample, plan)?;
            emit(plan, &sweep_csv(&rows, &metadata(plan))?, stdout)?;
            if let Some(p) = &plan.svg {
                std::fs::write(p, se_chart_svg("standard error by delta", &sweep_series(&rows, plan)))?;
            }
            Ok(())
        }
        CommandKind::Simulate => {
            let spec = plan
                .scenario
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("no scenario".into()))?;
            let t = run_monte_carlo(spec, &plan.estimators)?;
            let mut buf = Vec::new();
            t.write_csv(&mut buf, &metadata(plan))?;
            emit(plan, &buf, stdout)?;
            if let Some(p) = &plan.svg {
                let title = format!("{} ({} replications)", spec.name, spec.replications);
                std::fs::write(p, se_chart_svg(&title, &table_series(&t, plan)))?;
            }
            Ok(())
        }
    }
}

fn configure_threads() {
    if let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not set thread count: {e}");
        }
    }
}

/// Full command-line entry point; returns the process exit code.
pub fn run<S: AsRef<str>>(argv: &[S], stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32 {
    let result = parse_args(argv).and_then(|plan| {
        configure_threads();
        execute(&plan, stdout).map_err(CliError::from)
    });
    match result {
        Ok(()) => 0,
        Err(CliError::Display(text)) => {
            let _ = write!(stdout, "{text}");
            0
        }
        Err(e) => {
            let _ = writeln!(stderr, "{}", e.to_json());
            e.exit_code()
        }
    }
}
