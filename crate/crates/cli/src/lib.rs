//! Subcommands behind the `lastlayer` binary.
//!
//! Exit codes: 0 success, 2 usage or configuration problem, 3 numerical
//! failure (divergence, non-finite state, failed self-check).

pub mod chart;

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::thread;

use clap::{Args, Parser, Subcommand};

use lastlayer::harness::selfcheck::{self, GradientFn};
use lastlayer::harness::{
    bound_series, nominal_dataset, run_online, run_scenario, run_training_with, static_error, verify_bounds, write_report_csv,
    write_training_log, BoundSeriesRow, CaseId, RunReport, ScenarioConfig, ScenarioResult, DIVERGENCE_LIMIT,
};
use lastlayer::mlp::{backprop_mse, Checkpoint};
use lastlayer::sta::StepDiagnostics;

use chart::{LineChart, Series};

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "lastlayer", version, about = "Train a spectrally normalized ReLU net and adapt its last layer online")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a network on the nominal plant and write a checkpoint.
    Train(TrainArgs),
    /// Run the online adaptation of a checkpoint against the real plant.
    Simulate(SimulateArgs),
    /// Run all three scenarios with the built-in settings and emit charts.
    Reproduce(ReproduceArgs),
    /// Run the numerical self-check suite.
    Verify,
}

#[derive(Debug, Clone, Args)]
pub struct OutputArgs {
    /// Output directory, created if missing.
    #[arg(long, short, env = "LASTLAYER_OUT", default_value = "out")]
    pub out: PathBuf,
    /// Overwrite existing output files.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Scenario config (TOML).
    #[arg(long, short)]
    pub config: PathBuf,
    /// Override the config's root seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    /// Scenario config (TOML).
    #[arg(long, short)]
    pub config: PathBuf,
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Also write an SVG chart of prediction vs truth.
    #[arg(long)]
    pub chart: bool,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Args)]
pub struct ReproduceArgs {
    /// Root seed shared by all three scenarios.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Override the 20000 training epochs (for quick looks).
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Skip the SVG charts.
    #[arg(long)]
    pub no_charts: bool,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    pub fn numerical(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_NUMERICAL,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<lastlayer::Error> for CliError {
    fn from(e: lastlayer::Error) -> Self {
        CliError {
            code: if e.is_numerical() { EXIT_NUMERICAL } else { EXIT_USAGE },
            message: e.to_string(),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Simulate(a) => cmd_simulate(&a).map(|_| ()),
        Command::Reproduce(a) => cmd_reproduce(&a).and_then(|o| reproduce_status(&o)),
        Command::Verify => cmd_verify_with(backprop_mse, &mut std::io::stdout()),
    }
}

/// Output directory that refuses to clobber files unless forced.
struct OutDir {
    root: PathBuf,
}

impl OutDir {
    fn prepare(args: &OutputArgs, files: &[String]) -> CliResult<Self> {
        if !args.force {
            for f in files {
                let p = args.out.join(f);
                if p.exists() {
                    return Err(CliError::usage(format!("{} exists; pass --force to overwrite", p.display())));
                }
            }
        }
        fs::create_dir_all(&args.out).map_err(|e| CliError::usage(format!("{}: {e}", args.out.display())))?;
        Ok(OutDir { root: args.out.clone() })
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn write(&self, rel: &str, bytes: &[u8]) -> CliResult<PathBuf> {
        let p = self.path(rel);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir).map_err(|e| CliError::usage(format!("{}: {e}", dir.display())))?;
        }
        fs::write(&p, bytes).map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?;
        Ok(p)
    }
}

fn load_config(path: &Path) -> CliResult<ScenarioConfig> {
    if !path.exists() {
        return Err(CliError::usage(format!("config {} not found", path.display())));
    }
    Ok(ScenarioConfig::load(path)?)
}

fn report_csv(report: &RunReport) -> CliResult<Vec<u8>> {
    let mut buf = Vec::new();
    write_report_csv(report, &mut buf)?;
    Ok(buf)
}

pub struct TrainOutput {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

pub fn cmd_train(args: &TrainArgs) -> CliResult<TrainOutput> {
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let files = ["checkpoint.json", "training_log.csv", "config.toml", "dataset.csv"].map(String::from);
    let out = OutDir::prepare(&args.output, &files)?;
    let every = (cfg.epochs / 10).max(1);
    let trained = run_training_with(&cfg, |r| {
        if r.epoch % every == 0 {
            eprintln!("epoch {:>6}  loss {:.6e}  prod sigma {:.6}", r.epoch, r.loss, r.sigma_product);
        }
    })?;
    let mut log = Vec::new();
    write_training_log(&trained.log, &mut log)?;
    let checkpoint = out.write("checkpoint.json", trained.checkpoint.to_json()?.as_bytes())?;
    let log = out.write("training_log.csv", &log)?;
    out.write("config.toml", cfg.to_toml().as_bytes())?;
    let mut data = Vec::new();
    nominal_dataset(&cfg)?.write_csv(&mut data)?;
    out.write("dataset.csv", &data)?;
    eprintln!(
        "trained {} epochs: loss {:.6e} -> {:.6e}, prod sigma {:.6}",
        cfg.epochs, trained.initial_loss, trained.final_loss, trained.lipschitz.product_bound
    );
    Ok(TrainOutput { checkpoint, log })
}

pub fn cmd_simulate(args: &SimulateArgs) -> CliResult<RunReport> {
    let cfg = load_config(&args.config)?;
    if !args.checkpoint.exists() {
        return Err(CliError::usage(format!("checkpoint {} not found", args.checkpoint.display())));
    }
    let checkpoint = Checkpoint::load(&args.checkpoint)?;
    let mut files = vec!["report.csv".to_string(), "summary.txt".to_string()];
    if args.chart {
        files.push("prediction.svg".into());
    }
    let out = OutDir::prepare(&args.output, &files)?;
    let report = run_online(&cfg, &checkpoint)?;
    out.write("report.csv", &report_csv(&report)?)?;
    let verdict = verify_bounds(&report, &checkpoint);
    let mut summary = summary_header();
    summary.push_str(&summary_row(&cfg, &report, None));
    if cfg.case.uses_estimate() {
        summary.push_str(&format!(
            "\nbound check: {} violations over {} steps (worst excess {:.3e}, step {:?}){}\n",
            verdict.violations,
            verdict.steps_checked,
            verdict.worst_excess,
            verdict.worst_step,
            if verdict.certified { "" } else { ", bound gamma not certified by training" }
        ));
    }
    summary.push_str(&divergence_lines(&[&report]));
    out.write("summary.txt", summary.as_bytes())?;
    if args.chart {
        out.write("prediction.svg", prediction_chart(&[(cfg.case, &report)]).render().as_bytes())?;
    }
    print!("{summary}");
    if let Some(t) = report.summary.diverged_at {
        return Err(CliError::numerical(format!(
            "online adaptation diverged at t = {t} s; report.csv holds the {} steps before it",
            report.steps.len()
        )));
    }
    Ok(report)
}

pub struct ReproduceOutcome {
    pub results: Vec<ScenarioResult>,
    pub bound: Vec<BoundSeriesRow>,
    /// Trailing max|e1| of II.b minus that of II.a.
    pub sn_margin: f64,
    pub summary: String,
}

pub fn preset_configs(seed: u64, epochs: Option<usize>) -> Vec<ScenarioConfig> {
    CaseId::ALL
        .into_iter()
        .map(|case| {
            let mut cfg = ScenarioConfig::preset(case);
            cfg.seed = seed;
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            cfg
        })
        .collect()
}

fn scenario_files(case: CaseId) -> [String; 4] {
    let d = case.slug();
    [
        format!("{d}/config.toml"),
        format!("{d}/checkpoint.json"),
        format!("{d}/training_log.csv"),
        format!("{d}/report.csv"),
    ]
}

const CHARTS: [&str; 3] = ["outputs.svg", "errors.svg", "perturbation.svg"];

fn write_scenario(out: &OutDir, r: &ScenarioResult) -> CliResult<()> {
    let [cfg, ck, log, report] = scenario_files(r.config.case);
    out.write(&cfg, r.config.to_toml().as_bytes())?;
    out.write(&ck, r.training.checkpoint.to_json()?.as_bytes())?;
    let mut buf = Vec::new();
    write_training_log(&r.training.log, &mut buf)?;
    out.write(&log, &buf)?;
    out.write(&report, &report_csv(&r.report)?)?;
    Ok(())
}

pub fn cmd_reproduce(args: &ReproduceArgs) -> CliResult<ReproduceOutcome> {
    let configs = preset_configs(args.seed, args.epochs);
    let mut files: Vec<String> = CaseId::ALL.into_iter().flat_map(scenario_files).collect();
    files.extend(["bound_series.csv".to_string(), "summary.txt".to_string()]);
    if !args.no_charts {
        files.extend(CHARTS.iter().map(|s| s.to_string()));
    }
    let out = OutDir::prepare(&args.output, &files)?;

    let outcomes: Vec<CliResult<ScenarioResult>> = thread::scope(|s| {
        let handles: Vec<_> = configs
            .iter()
            .map(|cfg| {
                let out = &out;
                s.spawn(move || {
                    eprintln!("{}: training {} epochs", cfg.case.label(), cfg.epochs);
                    let r = run_scenario(cfg)?;
                    write_scenario(out, &r)?;
                    match r.report.summary.diverged_at {
                        Some(t) => eprintln!("{}: done, online adaptation diverged at t = {t} s", cfg.case.label()),
                        None => eprintln!(
                            "{}: done, trailing max|e1| {:.4e}",
                            cfg.case.label(),
                            r.report.summary.trailing_max_abs_e1
                        ),
                    }
                    Ok(r)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(CliError::numerical("scenario thread panicked"))))
            .collect()
    });
    let mut results = Vec::new();
    for (cfg, r) in configs.iter().zip(outcomes) {
        match r {
            Ok(r) => results.push(r),
            Err(e) => {
                return Err(CliError {
                    code: e.code,
                    message: format!("{}: {}", cfg.case.label(), e.message),
                })
            }
        }
    }
    let by_case = |c: CaseId| results.iter().find(|r| r.config.case == c).expect("all cases ran");
    let (c1, c2a, c2b) = (by_case(CaseId::CaseI), by_case(CaseId::CaseIIa), by_case(CaseId::CaseIIb));

    let bound = bound_series(&c2a.report, &c2b.report)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| CliError::usage(e.to_string());
    w.write_record(["t", "p1_norm_sn", "p1_norm_no_sn", "p1_bound"]).map_err(csv_err)?;
    let cell = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
    for row in &bound {
        w.write_record([row.t.to_string(), cell(row.p1_certified), cell(row.p1_uncertified), cell(row.bound)])
            .map_err(csv_err)?;
    }
    let buf = w.into_inner().map_err(|e| CliError::usage(e.to_string()))?;
    out.write("bound_series.csv", &buf)?;

    let mut summary = format!("seed {}  epochs {}\n\n", args.seed, configs[0].epochs);
    summary.push_str(&summary_header());
    for r in [c1, c2a, c2b] {
        let stat = static_error(&r.training.network, &r.config)?;
        let start = r.config.t_online - r.config.trailing_window - 1e-9 * r.config.dt;
        let stat_max = stat
            .iter()
            .enumerate()
            .filter(|(k, _)| *k as f64 * r.config.dt >= start)
            .map(|(_, e)| e.abs())
            .fold(0.0, f64::max);
        summary.push_str(&summary_row(&r.config, &r.report, Some(stat_max)));
    }
    summary.push_str(&divergence_lines(&[&c1.report, &c2a.report, &c2b.report]));
    let verdict = verify_bounds(&c2a.report, &c2a.training.checkpoint);
    let uncert = verify_bounds(&c2b.report, &c2b.training.checkpoint);
    let a = c2a.report.summary.trailing_max_abs_e1;
    let b = c2b.report.summary.trailing_max_abs_e1;
    let sn_margin = b - a;
    summary.push_str(&format!(
        "\nII.a bound  ||G - G^|| <= gamma ||xdot - xdot^||: {} violations of {} steps (worst excess {:.3e})\n",
        verdict.violations, verdict.steps_checked, verdict.worst_excess
    ));
    summary.push_str(&format!(
        "II.b against the same line: {} violations of {} steps (uncertified, for comparison)\n",
        uncert.violations, uncert.steps_checked
    ));
    summary.push_str(&format!(
        "trailing max|e1|  II.a {a:.6e} vs II.b {b:.6e}: {} (margin {sn_margin:+.3e})\n",
        if a <= b { "II.a <= II.b" } else { "FLAG: II.a > II.b" }
    ));
    out.write("summary.txt", summary.as_bytes())?;

    if !args.no_charts {
        let pairs = [(CaseId::CaseI, &c1.report), (CaseId::CaseIIa, &c2a.report), (CaseId::CaseIIb, &c2b.report)];
        out.write(CHARTS[0], prediction_chart(&pairs).render().as_bytes())?;
        out.write(CHARTS[1], error_chart(&pairs).render().as_bytes())?;
        out.write(CHARTS[2], perturbation_chart(&bound).render().as_bytes())?;
    }
    print!("{summary}");
    Ok(ReproduceOutcome {
        results,
        bound,
        sn_margin,
        summary,
    })
}

/// A diverged scenario still yields every artifact; the exit code reports it.
fn reproduce_status(outcome: &ReproduceOutcome) -> CliResult<()> {
    let diverged: Vec<String> = outcome
        .results
        .iter()
        .filter_map(|r| r.report.summary.diverged_at.map(|t| format!("{} at t = {t} s", r.config.case.label())))
        .collect();
    if diverged.is_empty() {
        return Ok(());
    }
    Err(CliError::numerical(format!(
        "online adaptation diverged ({}); all artifacts were written",
        diverged.join(", ")
    )))
}

fn divergence_lines(reports: &[&RunReport]) -> String {
    reports
        .iter()
        .filter_map(|r| {
            r.summary.diverged_at.map(|t| {
                format!(
                    "\n{}: |y_hat| passed {DIVERGENCE_LIMIT:e} at t = {t} s; run stopped after {} steps\n",
                    r.summary.case.label(),
                    r.steps.len()
                )
            })
        })
        .collect()
}

/// y axis of the healthy runs, so a diverged run does not flatten the rest.
fn healthy_range(reports: &[(CaseId, &RunReport)], value: impl Fn(&StepDiagnostics) -> f64) -> Option<(f64, f64)> {
    if reports.iter().all(|(_, r)| r.summary.diverged_at.is_none()) {
        return None;
    }
    let healthy = reports.iter().filter(|(_, r)| r.summary.diverged_at.is_none());
    Some(chart::bounds(healthy.flat_map(|(_, r)| r.steps.iter().map(&value))))
}

fn summary_header() -> String {
    format!(
        "{:<10} {:>7} {:>11} {:>12} {:>14} {:>12} {:>14} {:>10} {:>10}\n",
        "case", "gamma", "prod_sigma", "final_loss", "max|e1|_tail", "rmse_tail", "static_max", "violations", "dead_basis"
    )
}

fn summary_row(cfg: &ScenarioConfig, report: &RunReport, static_max: Option<f64>) -> String {
    let s = &report.summary;
    let fmt_opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4e}"));
    format!(
        "{:<10} {:>7} {:>11.6} {:>12} {:>14.6e} {:>12.4e} {:>14} {:>10} {:>10}\n",
        cfg.case.label(),
        cfg.gamma.map_or("none".to_string(), |g| g.to_string()),
        s.lipschitz.product_bound,
        fmt_opt(s.training_final_loss),
        s.trailing_max_abs_e1,
        s.trailing_rmse,
        fmt_opt(static_max),
        s.bound_violations,
        s.dead_basis_steps
    )
}

const COLORS: [&str; 3] = ["#1f77b4", "#2ca02c", "#d62728"];

fn prediction_chart(reports: &[(CaseId, &RunReport)]) -> LineChart {
    let mut series = vec![Series::new(
        "real system",
        "black",
        reports[0].1.steps.iter().map(|s| (s.t, s.y_true[0])).collect(),
    )];
    for (i, (case, r)) in reports.iter().enumerate() {
        series.push(
            Series::new(
                format!("{} prediction", case.label()),
                COLORS[i % COLORS.len()],
                r.steps.iter().map(|s| (s.t, s.y_hat[0])).collect(),
            )
            .dashed(),
        );
    }
    LineChart {
        title: "Online-adapted prediction on the real plant (eps = 1.5)".into(),
        x_label: "t [s]".into(),
        y_label: "z_dot".into(),
        y_range: healthy_range(reports, |s| s.y_hat[0]).map(|(lo, hi)| {
            let (tlo, thi) = chart::bounds(reports[0].1.steps.iter().map(|s| s.y_true[0]));
            (lo.min(tlo), hi.max(thi))
        }),
        series,
    }
}

fn error_chart(reports: &[(CaseId, &RunReport)]) -> LineChart {
    LineChart {
        title: "Prediction error e1".into(),
        x_label: "t [s]".into(),
        y_label: "e1".into(),
        y_range: healthy_range(reports, |s| s.e1[0]),
        series: reports
            .iter()
            .enumerate()
            .map(|(i, (case, r))| {
                Series::new(case.label(), COLORS[i % COLORS.len()], r.steps.iter().map(|s| (s.t, s.e1[0])).collect())
            })
            .collect(),
    }
}

fn points(rows: &[BoundSeriesRow], value: impl Fn(&BoundSeriesRow) -> Option<f64>) -> Vec<(f64, f64)> {
    rows.iter().filter_map(|r| value(r).map(|v| (r.t, v))).collect()
}

fn perturbation_chart(rows: &[BoundSeriesRow]) -> LineChart {
    LineChart {
        title: "||Gamma - Gamma_hat|| with the gamma = 1 bound".into(),
        x_label: "t [s]".into(),
        y_label: "norm".into(),
        y_range: None,
        series: vec![
            Series::new("Case II.a (SN)", COLORS[1], points(rows, |r| r.p1_certified)),
            Series::new("Case II.b (no SN)", COLORS[2], points(rows, |r| r.p1_uncertified)),
            Series::new("bound", "black", points(rows, |r| r.bound)).dashed(),
        ],
    }
}

/// Runs the self-check suite with the given gradient routine and writes the
/// tolerance table and per-check verdicts to `out`.
pub fn cmd_verify_with(gradient: GradientFn, out: &mut impl Write) -> CliResult<()> {
    let checks = selfcheck::run_self_checks_with(gradient)?;
    let io = |e: std::io::Error| CliError::usage(e.to_string());
    writeln!(out, "tolerances:").map_err(io)?;
    for c in &checks {
        writeln!(out, "  {:<26} {}", c.name, c.tolerance).map_err(io)?;
    }
    writeln!(out).map_err(io)?;
    for c in &checks {
        writeln!(out, "{c}").map_err(io)?;
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    writeln!(out, "\n{} of {} checks passed", checks.len() - failed, checks.len()).map_err(io)?;
    if failed > 0 {
        return Err(CliError::numerical(format!("{failed} self-check(s) failed")));
    }
    Ok(())
}
