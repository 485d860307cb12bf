//! Command-line front end: flags and config files merged into a [`RunConfig`],
//! task pipelines, and report emission.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::cvar::{estimate_cvar, CvarReport};
use crate::dimred::DimRedConfig;
use crate::error::{Error, Result};
use crate::model::{oriented_response, Model, ModelKind, ModelSpec, Tail};
use crate::multilevel::{run_ladder, run_to_precision, EstimateReport, LadderConfig, LadderTrace, PrecisionConfig};
use crate::quantile::{estimate_quantile, QuantileConfig, QuantileReport};
use crate::rng::RngStream;
use crate::stratified::{strata_from_shift, stratified_estimate, StratumSummary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum, Default)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    #[default]
    Prob,
    Quantile,
    Cvar,
    Strata,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum, Default)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Table,
    Json,
    Csv,
}

/// Fully resolved run settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub task: Task,
    pub model: ModelSpec,
    /// Threshold in model units.
    pub gamma: Option<f64>,
    pub p: Option<f64>,
    pub batch: usize,
    pub precision: f64,
    pub quantile_precision: f64,
    pub confidence: f64,
    pub rho: f64,
    pub max_levels: usize,
    pub max_runs: usize,
    pub seed: u64,
    pub workers: usize,
    pub dimred: DimRedConfig,
    pub strata: usize,
    pub strata_runs: usize,
    pub pilot: f64,
    pub format: Format,
    pub out: Option<PathBuf>,
    pub trace_out: Option<PathBuf>,
}

/// Settings read from a TOML file; every key is optional and overridden by flags.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub task: Option<Task>,
    pub model: Option<String>,
    pub dim: Option<usize>,
    pub dim_a: Option<usize>,
    pub coef_a: Option<f64>,
    pub coef_b: Option<f64>,
    pub gamma: Option<f64>,
    pub gamma_from_p: Option<f64>,
    pub p: Option<f64>,
    pub tail: Option<Tail>,
    pub batch: Option<i64>,
    pub precision: Option<f64>,
    pub quantile_precision: Option<f64>,
    pub confidence: Option<f64>,
    pub rho: Option<f64>,
    pub max_levels: Option<usize>,
    pub max_runs: Option<usize>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub strata: Option<usize>,
    pub strata_runs: Option<usize>,
    pub pilot: Option<f64>,
    pub format: Option<Format>,
    pub out: Option<PathBuf>,
    pub trace_out: Option<PathBuf>,
    pub dimred: Option<DimRedFile>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DimRedFile {
    pub enabled: Option<bool>,
    pub auto_above: Option<usize>,
    pub max_dims: Option<usize>,
    pub energy: Option<f64>,
}

#[derive(Debug, Parser)]
#[command(name = "tailshift", version, about = "Rare-event tail estimation by adaptive Gaussian mean-shift importance sampling")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Tail probability P(h >= gamma) (or <= for the left tail).
    Prob(Flags),
    /// Threshold whose tail probability is p.
    Quantile(Flags),
    /// Tail probability and expected shortfall from the same runs.
    Cvar(Flags),
    /// Stratified estimate along the shift found by the ladder.
    Strata(Flags),
}

#[derive(Debug, Clone, Args, Default)]
pub struct Flags {
    /// builtin:linear | builtin:identity | builtin:skewed | exec:<path>
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub dim: Option<usize>,
    /// Leading dominant coordinates of builtin:linear.
    #[arg(long)]
    pub dim_a: Option<usize>,
    #[arg(long)]
    pub coef_a: Option<f64>,
    #[arg(long)]
    pub coef_b: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub gamma: Option<f64>,
    /// Set gamma from the closed form so that the tail probability is this value.
    #[arg(long)]
    pub gamma_from_p: Option<f64>,
    #[arg(long)]
    pub p: Option<f64>,
    #[arg(long)]
    pub tail: Option<Tail>,
    #[arg(long, allow_hyphen_values = true)]
    pub batch: Option<i64>,
    #[arg(long)]
    pub precision: Option<f64>,
    #[arg(long)]
    pub quantile_precision: Option<f64>,
    #[arg(long)]
    pub confidence: Option<f64>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub max_levels: Option<usize>,
    #[arg(long)]
    pub max_runs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, env = "TAILSHIFT_WORKERS")]
    pub workers: Option<usize>,
    /// Force dimension reduction on or off (default: on above 500 inputs).
    #[arg(long)]
    pub dimred: Option<bool>,
    #[arg(long)]
    pub max_dims: Option<usize>,
    #[arg(long)]
    pub strata: Option<usize>,
    #[arg(long)]
    pub strata_runs: Option<usize>,
    #[arg(long)]
    pub pilot: Option<f64>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub trace_out: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

pub fn load_file_config(path: &std::path::Path) -> Result<FileConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))?;
    parse_file_config(&text)
}

pub fn parse_file_config(text: &str) -> Result<FileConfig> {
    toml::from_str(text).map_err(|e| Error::config("config", e.to_string().trim_end().to_string()))
}

fn build_model(name: &str, dim: Option<usize>, dim_a: usize, coef_a: f64, coef_b: f64, tail: Tail) -> Result<ModelSpec> {
    let spec = if let Some(path) = name.strip_prefix("exec:") {
        let dim = dim.ok_or_else(|| Error::config("dim", "external models need --dim"))?;
        ModelSpec::external(path, Vec::new(), dim)
    } else {
        match name.strip_prefix("builtin:").unwrap_or(name) {
            "identity" => {
                let d = dim.unwrap_or(1);
                if d == 1 {
                    ModelSpec::identity(1)
                } else {
                    ModelSpec::linear(vec![1.0], vec![0.0; d.saturating_sub(1)])
                }
            }
            "linear" => {
                let d = dim.unwrap_or(dim_a + 100);
                if d < dim_a {
                    return Err(Error::config("dim", format!("dim {d} is below dim-a {dim_a}")));
                }
                ModelSpec::linear_family(dim_a, coef_a, d - dim_a, coef_b)
            }
            "skewed" => ModelSpec::skewed(dim.unwrap_or(2)),
            other => return Err(Error::config("model", format!("unknown model {other:?}"))),
        }
    };
    let spec = spec.with_tail(tail);
    spec.validate()?;
    Ok(spec)
}

macro_rules! pick {
    ($flag:expr, $file:expr, $default:expr) => {
        $flag.or($file).unwrap_or($default)
    };
}

/// Merges a subcommand's flags over its config file.
pub fn resolve(task: Task, flags: &Flags) -> Result<RunConfig> {
    let file = match &flags.config {
        Some(p) => load_file_config(p)?,
        None => FileConfig::default(),
    };
    if let Some(t) = file.task {
        if t != task {
            return Err(Error::config("task", format!("config file is for {t:?}, command is {task:?}")));
        }
    }
    let tail = pick!(flags.tail, file.tail, Tail::Right);
    let model_name = flags
        .model
        .clone()
        .or(file.model.clone())
        .unwrap_or_else(|| "builtin:identity".to_string());
    let model = build_model(
        &model_name,
        flags.dim.or(file.dim),
        pick!(flags.dim_a, file.dim_a, 10),
        pick!(flags.coef_a, file.coef_a, 1.0),
        pick!(flags.coef_b, file.coef_b, 0.01),
        tail,
    )?;

    let batch = pick!(flags.batch, file.batch, 1000);
    if batch <= 0 {
        return Err(Error::config("batch", format!("must be positive, got {batch}")));
    }
    let gamma_from_p = flags.gamma_from_p.or(file.gamma_from_p);
    let mut gamma = flags.gamma.or(file.gamma);
    let p = flags.p.or(file.p);
    if let Some(q) = gamma_from_p {
        if gamma.is_some() {
            return Err(Error::config("gamma", "give either gamma or gamma-from-p, not both"));
        }
        if !(q > 0.0 && q < 1.0) {
            return Err(Error::config("gamma-from-p", format!("must lie in (0,1), got {q}")));
        }
        gamma = Some(
            model
                .analytic_quantile(q)
                .ok_or_else(|| Error::config("gamma-from-p", "model has no closed-form tail"))?,
        );
    }
    match task {
        Task::Quantile => {
            if gamma.is_some() {
                return Err(Error::config("gamma", "the quantile task takes p, not gamma"));
            }
            match p {
                Some(v) if v > 0.0 && v < 1.0 => {}
                Some(v) => return Err(Error::config("p", format!("must lie in (0,1), got {v}"))),
                None => return Err(Error::config("p", "the quantile task needs --p")),
            }
        }
        _ => {
            if p.is_some() {
                return Err(Error::config("p", "this task takes gamma (or gamma-from-p), not p"));
            }
            match gamma {
                Some(g) if g.is_finite() => {}
                Some(g) => return Err(Error::config("gamma", format!("must be finite, got {g}"))),
                None => return Err(Error::config("gamma", "this task needs --gamma or --gamma-from-p")),
            }
        }
    }

    let df = file.dimred.clone().unwrap_or_default();
    let base = DimRedConfig::default();
    let dimred = DimRedConfig {
        enabled: flags.dimred.or(df.enabled),
        auto_above: df.auto_above.unwrap_or(base.auto_above),
        max_dims: pick!(flags.max_dims, df.max_dims, base.max_dims),
        energy: df.energy.unwrap_or(base.energy),
        z_min: base.z_min,
    };
    let workers = pick!(
        flags.workers,
        file.workers,
        std::thread::available_parallelism().map_or(1, |n| n.get())
    );
    let cfg = RunConfig {
        task,
        model,
        gamma,
        p,
        batch: batch as usize,
        precision: pick!(flags.precision, file.precision, 0.10),
        quantile_precision: pick!(flags.quantile_precision, file.quantile_precision, 0.005),
        confidence: pick!(flags.confidence, file.confidence, 0.95),
        rho: pick!(flags.rho, file.rho, 0.10),
        max_levels: pick!(flags.max_levels, file.max_levels, 30),
        max_runs: pick!(flags.max_runs, file.max_runs, 1_000_000),
        seed: pick!(flags.seed, file.seed, 0),
        workers: workers.max(1),
        dimred,
        strata: pick!(flags.strata, file.strata, 20),
        strata_runs: pick!(flags.strata_runs, file.strata_runs, 10_000),
        pilot: pick!(flags.pilot, file.pilot, 0.2),
        format: pick!(flags.format, file.format, Format::Table),
        out: flags.out.clone().or(file.out),
        trace_out: flags.trace_out.clone().or(file.trace_out),
    };
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(Error::config(name, format!("must lie in (0,1), got {v}")))
            }
        };
        unit("precision", self.precision)?;
        unit("quantile-precision", self.quantile_precision)?;
        unit("confidence", self.confidence)?;
        unit("rho", self.rho)?;
        unit("pilot", self.pilot)?;
        if self.batch < 100 {
            return Err(Error::config("batch", format!("must be >= 100, got {}", self.batch)));
        }
        if self.strata < 2 {
            return Err(Error::config("strata", "need at least 2 strata"));
        }
        self.model.validate()
    }

    fn ladder(&self, gamma: f64) -> LadderConfig {
        LadderConfig {
            gamma,
            n_per_level: self.batch,
            rho: self.rho,
            max_levels: self.max_levels,
            dimred: self.dimred,
            ..LadderConfig::default()
        }
    }

    fn precision_config(&self) -> PrecisionConfig {
        PrecisionConfig {
            target: self.precision,
            batch: self.batch,
            confidence: self.confidence,
            max_runs: self.max_runs,
        }
    }

    fn model_label(&self) -> String {
        match &self.model.kind {
            ModelKind::BuiltinLinear { .. } => "builtin:linear".into(),
            ModelKind::BuiltinIdentity => "builtin:identity".into(),
            ModelKind::BuiltinSkewed => "builtin:skewed".into(),
            ModelKind::ExternalProcess { program, .. } => format!("exec:{}", program.display()),
        }
    }
}

/// One line of the summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub measure: String,
    pub tail: Tail,
    pub value: f64,
    pub ci: f64,
    pub runs: usize,
    pub speedup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub task: Task,
    pub model: String,
    pub dim: usize,
    pub tail: Tail,
    pub seed: u64,
    pub converged: bool,
    pub rows: Vec<Row>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub probability: Option<EstimateReport>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub cvar: Option<CvarReport>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub quantile: Option<QuantileReport>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub strata: Option<Vec<StratumSummary>>,
    pub trace: LadderTrace,
}

fn prob_row(r: &EstimateReport, tail: Tail) -> Row {
    Row {
        measure: "Prob".into(),
        tail,
        value: r.estimate,
        ci: r.rel_half_width,
        runs: r.total_runs(),
        speedup: r.speedup,
    }
}

/// Executes the configured task. Runs that stop on their budget are returned
/// with `converged = false`.
pub fn run(cfg: &RunConfig) -> Result<RunReport> {
    cfg.validate()?;
    let model = Model::new(cfg.model.clone(), cfg.workers)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::config("workers", e.to_string()))?;
    pool.install(|| run_with(cfg, &model))
}

fn run_with(cfg: &RunConfig, model: &Model) -> Result<RunReport> {
    let rng = RngStream::new(cfg.seed, 0);
    let tail = cfg.model.tail;
    let mut out = RunReport {
        task: cfg.task,
        model: cfg.model_label(),
        dim: cfg.model.dim,
        tail,
        seed: cfg.seed,
        converged: true,
        rows: Vec::new(),
        probability: None,
        cvar: None,
        quantile: None,
        strata: None,
        trace: LadderTrace::default(),
    };
    match cfg.task {
        Task::Prob | Task::Cvar => {
            let gamma = oriented_response(tail, cfg.gamma.expect("validated"));
            let run = run_to_precision(model, &cfg.ladder(gamma), &cfg.precision_config(), &rng)?;
            let mut report = run.report.clone();
            report.gamma = cfg.gamma.expect("validated");
            out.converged = report.converged;
            out.rows.push(prob_row(&report, tail));
            if cfg.task == Task::Cvar && (run.moments.sum_b > 0.0 || report.converged) {
                let c = estimate_cvar(&run.moments, gamma, tail, cfg.confidence)?;
                out.rows.push(Row {
                    measure: "CVaR".into(),
                    tail,
                    value: c.estimate,
                    ci: c.rel_half_width,
                    runs: report.total_runs(),
                    speedup: report.speedup,
                });
                out.cvar = Some(c);
            }
            out.probability = Some(report);
            out.trace = run.trace;
        }
        Task::Quantile => {
            let qc = QuantileConfig {
                ladder: cfg.ladder(f64::INFINITY),
                precision: cfg.quantile_precision,
                batch: cfg.batch,
                confidence: cfg.confidence,
                max_runs: cfg.max_runs,
            };
            let run = estimate_quantile(model, cfg.p.expect("validated"), &qc, &rng)?;
            let r = run.report;
            out.converged = r.converged;
            out.rows.push(Row {
                measure: "Quantile".into(),
                tail,
                value: r.quantile,
                ci: r.rel_half_width,
                runs: r.total_runs(),
                speedup: r.speedup,
            });
            out.quantile = Some(r);
            out.trace = run.trace;
        }
        Task::Strata => {
            let gamma = oriented_response(tail, cfg.gamma.expect("validated"));
            let (theta, trace) = run_ladder(model, &cfg.ladder(gamma), &rng)?;
            let spec = strata_from_shift(&theta, cfg.strata)?;
            let s = stratified_estimate(model, gamma, &spec, cfg.pilot, cfg.strata_runs, &rng)?;
            let mut report = s.report;
            report.gamma = cfg.gamma.expect("validated");
            report.runs_exploration = trace.exploration_runs;
            report.theta_final = theta;
            report.speedup = crate::multilevel::speedup(
                report.estimate,
                report.rel_half_width,
                crate::multilevel::z_value(0.95)?,
                report.total_runs(),
            );
            out.rows.push(prob_row(&report, tail));
            out.probability = Some(report);
            out.strata = Some(s.strata);
            out.trace = trace;
        }
    }
    Ok(out)
}

fn pct(x: f64) -> String {
    if x.is_finite() {
        format!("{:.2}%", 100.0 * x)
    } else {
        "inf".into()
    }
}

fn sci(x: f64) -> String {
    if x != 0.0 && (x.abs() < 1e-3 || x.abs() >= 1e5) {
        format!("{x:.4e}")
    } else {
        format!("{x:.6}")
    }
}

fn speed(x: f64) -> String {
    if x >= 100.0 {
        format!("{x:.3e}")
    } else {
        format!("{x:.2}")
    }
}

pub fn trace_csv(trace: &LadderTrace) -> String {
    let mut s = String::from("iteration,runs,gamma,estimate,ci\n");
    for l in &trace.levels {
        s.push_str(&format!("{},{},{},{},{}\n", l.iteration, l.runs, l.gamma, l.estimate, pct(l.ci)));
    }
    s
}

/// Serializes a report as a table, JSON or CSV.
pub fn emit_report(report: &RunReport, format: Format) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    match format {
        Format::Json => {
            serde_json::to_writer_pretty(&mut buf, report)?;
            buf.push(b'\n');
        }
        Format::Csv => {
            writeln!(buf, "Measure,Tail,Prob,CI@95%,Nb. Runs,Speedup")?;
            for r in &report.rows {
                writeln!(buf, "{},{},{},{},{},{}", r.measure, r.tail, r.value, pct(r.ci), r.runs, r.speedup)?;
            }
        }
        Format::Table => {
            writeln!(buf, "{:<9} {:<6} {:>13} {:>9} {:>9} {:>10}", "Measure", "Tail", "Prob", "CI@95%", "Nb. Runs", "Speedup")?;
            for r in &report.rows {
                writeln!(
                    buf,
                    "{:<9} {:<6} {:>13} {:>9} {:>9} {:>10}",
                    r.measure,
                    r.tail.to_string(),
                    sci(r.value),
                    pct(r.ci),
                    r.runs,
                    speed(r.speedup)
                )?;
            }
            if !report.converged {
                writeln!(buf, "(precision target not reached within the run budget)")?;
            }
            if !report.trace.levels.is_empty() {
                writeln!(buf)?;
                writeln!(buf, "{:>9} {:>8} {:>13} {:>13} {:>9}", "iteration", "runs", "gamma", "estimate", "ci")?;
                for l in &report.trace.levels {
                    writeln!(buf, "{:>9} {:>8} {:>13} {:>13} {:>9}", l.iteration, l.runs, sci(l.gamma), sci(l.estimate), pct(l.ci))?;
                }
            }
            if let Some(sel) = &report.trace.selection {
                writeln!(buf)?;
                writeln!(buf, "selected inputs ({}): {:?}", sel.len(), sel)?;
            }
            if let Some(strata) = &report.strata {
                writeln!(buf)?;
                writeln!(buf, "{:>13} {:>13} {:>10} {:>7} {:>10} {:>10}", "lower", "upper", "p_i", "N_i", "v_i", "mean")?;
                for s in strata {
                    writeln!(
                        buf,
                        "{:>13} {:>13} {:>10.4e} {:>7} {:>10.4e} {:>10.4e}",
                        sci(s.lower),
                        sci(s.upper),
                        s.p,
                        s.runs,
                        s.v_hat,
                        s.mean
                    )?;
                }
            }
        }
    }
    Ok(buf)
}

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } => 2,
        Error::BudgetExhausted { .. } => 3,
        Error::Simulator { .. } => 4,
        Error::MaxLevelsExceeded { .. } => 5,
        _ => 1,
    }
}

fn write_out(path: &Option<PathBuf>, bytes: &[u8]) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, bytes)?,
        None => std::io::stdout().write_all(bytes)?,
    }
    Ok(())
}

/// Runs the command line and returns the process exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let (task, flags) = match &cli.command {
        Command::Prob(f) => (Task::Prob, f),
        Command::Quantile(f) => (Task::Quantile, f),
        Command::Cvar(f) => (Task::Cvar, f),
        Command::Strata(f) => (Task::Strata, f),
    };
    let result = resolve(task, flags).and_then(|cfg| {
        let report = run(&cfg)?;
        write_out(&cfg.out, &emit_report(&report, cfg.format)?)?;
        if let Some(p) = &cfg.trace_out {
            std::fs::write(p, trace_csv(&report.trace))?;
        }
        Ok(report.converged)
    });
    match result {
        Ok(true) => 0,
        Ok(false) => 3,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::MaxLevelsExceeded { trace } = &e {
                eprint!("{}", trace_csv(trace));
            }
            exit_code(&e)
        }
    }
}
