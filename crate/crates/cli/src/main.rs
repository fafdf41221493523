mod plots;
mod render;
mod report;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use parsimix_core::design::{ingest_csv, ColumnKind, ContrastKind, IngestOptions};
use parsimix_core::fitter::fit;
use parsimix_core::formula::FormulaAst;
use parsimix_core::repca::DEFAULT_DIM_TOL;
use parsimix_core::selection::{infer_within, maximal_formula, GroupWithin};
use parsimix_core::simulate::DEFAULT_SEED;
use parsimix_core::*;

use report::{ConfigEcho, DataSummary, ErrorPayload, FitPayload, Report, SimulationPayload};

const THREADS_VAR: &str = "PARSIMIX_THREADS";

#[derive(Parser)]
#[command(name = "parsimix", version, about = "Fit, diagnose and reduce linear mixed models")]
struct Cli {
    /// Seed for every random draw; fixed by default so runs reproduce.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit one model and print its estimates.
    Fit(FitArgs),
    /// Fit one model and print the principal-components table of each grouping factor.
    Repca(RepcaArgs),
    /// Run the full reduction from a maximal model.
    Reduce(ReduceArgs),
    /// Write a dataset simulated from a JSON truth specification.
    Simulate(SimulateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum CriterionArg {
    Ml,
    Reml,
}

impl From<CriterionArg> for Criterion {
    fn from(c: CriterionArg) -> Self {
        match c {
            CriterionArg::Ml => Criterion::Ml,
            CriterionArg::Reml => Criterion::Reml,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ContrastArg {
    Sum,
    Treatment,
}

impl From<ContrastArg> for ContrastKind {
    fn from(c: ContrastArg) -> Self {
        match c {
            ContrastArg::Sum => ContrastKind::Sum,
            ContrastArg::Treatment => ContrastKind::Treatment,
        }
    }
}

#[derive(Args)]
struct DataArgs {
    /// CSV file with a header row.
    #[arg(long)]
    data: PathBuf,
    /// Treat a column as a factor even if it looks numeric.
    #[arg(long = "factor", value_name = "COLUMN")]
    factors: Vec<String>,
    /// Treat a column as numeric.
    #[arg(long = "numeric", value_name = "COLUMN")]
    numerics: Vec<String>,
    /// Level order for a factor, e.g. `P=low,high`.
    #[arg(long = "levels", value_name = "COLUMN=L1,L2,...")]
    levels: Vec<String>,
    #[arg(long, value_enum, default_value = "sum")]
    contrasts: ContrastArg,
    #[arg(long, value_enum, default_value = "reml")]
    criterion: CriterionArg,
    /// Evaluation budget per fit; default max(10 |theta|^2, 2000).
    #[arg(long)]
    max_evals: Option<usize>,
    /// Write the JSON report here.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Write plot-ready CSV files into this directory.
    #[arg(long)]
    csv_dir: Option<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    formula: String,
}

#[derive(Args)]
struct RepcaArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    formula: String,
    /// Variance left unexplained when counting dimensions.
    #[arg(long, default_value_t = DEFAULT_DIM_TOL)]
    tol: f64,
}

#[derive(Args)]
struct ReduceArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Maximal model to start from.
    #[arg(long, conflicts_with = "fixed", required_unless_present = "fixed")]
    formula: Option<String>,
    /// Fixed part only; the maximal random part is built per `--group`.
    #[arg(long, requires = "groups")]
    fixed: Option<String>,
    #[arg(long = "group", value_name = "FACTOR")]
    groups: Vec<String>,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value_t = DEFAULT_DIM_TOL)]
    dim_tol: f64,
    /// Correlations with smaller magnitude are nominated for pruning.
    #[arg(long, default_value_t = 0.15)]
    prune_threshold: f64,
    #[arg(long, default_value_t = 100)]
    max_steps: usize,
    /// Evaluation budget for the maximal model only.
    #[arg(long)]
    maximal_max_evals: Option<usize>,
    /// Write the step-by-step trace as JSON here.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// JSON truth specification.
    #[arg(long)]
    spec: PathBuf,
    /// Output CSV, or `-` for standard output.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    json: Option<PathBuf>,
}

/// A failure and the exit code it maps to.
struct Failure {
    code: u8,
    error: Error,
}

impl From<Error> for Failure {
    fn from(error: Error) -> Self {
        let code = match &error {
            Error::RankDeficientX { .. }
            | Error::NotPositiveDefinite
            | Error::Bounds(_)
            | Error::Dimension(_)
            | Error::NotNested(_)
            | Error::DataMismatch
            | Error::NothingRemovable(_) => 2,
            _ => 1,
        };
        Failure { code, error }
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Parse(_) => "parse",
        Error::Io(_) | Error::Csv(_) | Error::Json(_) => "io",
        Error::Data(_)
        | Error::UnknownColumn(_)
        | Error::NonFactorGroup(_)
        | Error::SingleLevel(_)
        | Error::Unbalanced(_)
        | Error::NotPsd(_) => "data",
        Error::Config(_) | Error::NoRandomTerms => "config",
        _ => "fit",
    }
}

fn describe(e: &Error) -> String {
    match e {
        Error::Parse(p) => format!("{}\n{}", p, p.caret()),
        other => other.to_string(),
    }
}

fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_VAR) {
        Ok(v) if !v.trim().is_empty() => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Config(format!("{} must be a positive integer, got `{}`", THREADS_VAR, v))),
        },
        _ => Ok(None),
    }
}

fn ingest_options(args: &DataArgs) -> Result<IngestOptions> {
    let mut kinds = BTreeMap::new();
    for f in &args.factors {
        kinds.insert(f.clone(), ColumnKind::Factor);
    }
    for n in &args.numerics {
        if kinds.insert(n.clone(), ColumnKind::Numeric).is_some() {
            return Err(Error::Config(format!("`{}` given as both factor and numeric", n)));
        }
    }
    let mut level_order = BTreeMap::new();
    for spec in &args.levels {
        let (col, levels) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("level order `{}` is not COLUMN=L1,L2,...", spec)))?;
        level_order.insert(col.to_string(), levels.split(',').map(|s| s.trim().to_string()).collect());
        kinds.entry(col.to_string()).or_insert(ColumnKind::Factor);
    }
    Ok(IngestOptions { kinds, level_order })
}

fn load(args: &DataArgs, report: &mut Report) -> Result<Arc<Dataset>> {
    report.config.threads = threads_from_env()?;
    let data = ingest_csv(&args.data, &ingest_options(args)?)?;
    report.data = Some(DataSummary {
        source: args.data.display().to_string(),
        fingerprint: data.fingerprint(),
        dropped_rows: data.dropped_rows,
    });
    if data.dropped_rows > 0 {
        report
            .warnings
            .push(format!("{} rows with missing cells were dropped", data.dropped_rows));
    }
    Ok(Arc::new(data))
}

fn base_config(args: &DataArgs, seed: u64) -> ConfigEcho {
    let mut c = ConfigEcho::new(
        args.criterion.into(),
        ContrastScheme::uniform(args.contrasts.into()),
        seed,
    );
    c.max_evals = args.max_evals;
    c
}

fn fit_options(args: &DataArgs) -> FitOptions {
    FitOptions {
        max_evals: args.max_evals,
        ..FitOptions::with_criterion(args.criterion.into())
    }
}

fn singular_warning(fit: &Fit) -> Option<String> {
    if !fit.result.singular {
        return None;
    }
    let pca = repca(fit, DEFAULT_DIM_TOL).ok()?;
    let dims: Vec<String> = pca
        .factors
        .iter()
        .map(|f| format!("{} spans {} of {}", f.group, f.dim, f.cumulative.len()))
        .collect();
    Some(format!(
        "singular fit; rePCA: {}; the random-effects structure is richer than the data support",
        dims.join(", ")
    ))
}

fn fit_warnings(fit: &Fit, report: &mut Report) {
    if !fit.result.converged {
        report.warnings.push(format!(
            "optimizer stopped after {} of {} evaluations without converging",
            fit.result.n_evals, fit.result.budget
        ));
    }
    if let Some(w) = singular_warning(fit) {
        report.warnings.push(w);
    }
}

fn write_fit_csv(dir: &Path, prefix: &str, payload: &FitPayload) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    plots::write_fit(dir, prefix, payload)?;
    Ok(())
}

fn cmd_fit(args: &FitArgs, report: &mut Report) -> std::result::Result<String, Failure> {
    report.config.formula = Some(args.formula.clone());
    let formula = parse_formula(&args.formula).map_err(Error::from)?;
    let data = load(&args.data, report)?;
    let scheme = report.config.contrasts.clone();
    let m = fit(&formula, data, &scheme, &fit_options(&args.data))?;
    let payload = FitPayload::of(&m)?;
    fit_warnings(&m, report);
    if let Some(dir) = &args.data.csv_dir {
        write_fit_csv(dir, "", &payload)?;
    }
    let text = render::fit_text(&payload);
    report.fit = Some(payload);
    Ok(text)
}

fn cmd_repca(args: &RepcaArgs, report: &mut Report) -> std::result::Result<String, Failure> {
    report.config.formula = Some(args.formula.clone());
    report.config.dim_tol = args.tol;
    if !(args.tol >= 0.0 && args.tol < 1.0) {
        return Err(Error::Config(format!("tol must lie in [0, 1), got {}", args.tol)).into());
    }
    let formula = parse_formula(&args.formula).map_err(Error::from)?;
    let data = load(&args.data, report)?;
    let scheme = report.config.contrasts.clone();
    let m = fit(&formula, data, &scheme, &fit_options(&args.data))?;
    let payload = FitPayload::of(&m)?;
    let pca = repca(&m, args.tol)?;
    fit_warnings(&m, report);
    if let Some(dir) = &args.data.csv_dir {
        write_fit_csv(dir, "", &payload)?;
        plots::write_scree(dir, &pca).map_err(Error::from)?;
    }
    let mut text = render::repca_table(&pca);
    text.push_str(&format!(
        "\nFormula: {}\n{} deviance {:.4}, converged {}, singular {}\n",
        payload.formula,
        if payload.criterion == Criterion::Ml { "ML" } else { "REML" },
        payload.deviance,
        if payload.converged { "yes" } else { "no" },
        if payload.singular { "yes" } else { "no" }
    ));
    report.fit = Some(payload);
    report.repca = Some(pca);
    Ok(text)
}

fn reduce_start(args: &ReduceArgs, data: &Dataset) -> Result<FormulaAst> {
    if let Some(f) = &args.formula {
        return Ok(parse_formula(f)?);
    }
    let fixed = parse_formula(args.fixed.as_deref().unwrap_or_default())?;
    if !fixed.random.is_empty() {
        return Err(Error::Config("--fixed must not contain random terms".into()));
    }
    let candidates: Vec<String> = fixed
        .variables()
        .into_iter()
        .filter(|v| *v != fixed.response && !args.groups.contains(v))
        .collect();
    let groups = args
        .groups
        .iter()
        .map(|g| {
            Ok(GroupWithin {
                group: g.clone(),
                within: infer_within(data, g, &candidates)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    maximal_formula(&fixed, &groups, data)
}

fn cmd_reduce(args: &ReduceArgs, report: &mut Report) -> std::result::Result<String, Failure> {
    let threads = threads_from_env()?;
    report.config.alpha = Some(args.alpha);
    report.config.dim_tol = args.dim_tol;
    report.config.prune_threshold = Some(args.prune_threshold);
    report.config.max_steps = Some(args.max_steps);
    report.config.maximal_max_evals = args.maximal_max_evals;
    report.config.threads = threads;
    if let Some(f) = &args.formula {
        parse_formula(f).map_err(Error::from)?;
    }
    if let Some(f) = &args.fixed {
        parse_formula(f).map_err(Error::from)?;
    }
    let data = load(&args.data, report)?;
    let start = reduce_start(args, &data)?;
    report.config.formula = Some(start.to_string());
    let mut config = SelectionConfig {
        alpha: args.alpha,
        dim_tol: args.dim_tol,
        max_steps: args.max_steps,
        criterion: args.data.criterion.into(),
        prune_threshold: args.prune_threshold,
        contrasts: report.config.contrasts.clone(),
        maximal_max_evals: args.maximal_max_evals,
        threads,
        ..SelectionConfig::default()
    };
    config.fit.max_evals = args.data.max_evals;
    config.validate()?;
    let outcome = run_workflow(&start, data, &config)?;
    let payload = FitPayload::of(&outcome.final_fit)?;
    fit_warnings(&outcome.final_fit, report);
    if let Some(path) = &args.trace {
        let text = serde_json::to_string_pretty(&outcome.trace).map_err(Error::from)?;
        std::fs::write(path, text + "\n").map_err(Error::from)?;
    }
    if let Some(dir) = &args.data.csv_dir {
        write_fit_csv(dir, "final_", &payload)?;
        plots::write_trace(dir, &outcome.trace).map_err(Error::from)?;
    }
    let mut text = render::trace_narrative(&outcome.trace);
    text.push('\n');
    text.push_str(&render::fit_text(&payload));
    report.fit = Some(payload);
    report.trace = Some(outcome.trace);
    Ok(text)
}

fn cmd_simulate(args: &SimulateArgs, seed: Option<u64>, report: &mut Report) -> std::result::Result<String, Failure> {
    let text = std::fs::read_to_string(&args.spec).map_err(Error::from)?;
    let mut spec: TruthSpec = serde_json::from_str(&text).map_err(Error::from)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    report.config.seed = spec.seed;
    report.config.contrasts = spec.contrasts.clone();
    report.config.formula = Some(spec.fixed.clone());
    let data = simulate_lmm(&spec)?;
    let mut bytes = Vec::new();
    data.write_csv(&mut bytes)?;
    let out = args.out.display().to_string();
    if out == "-" {
        use std::io::Write;
        std::io::stdout().write_all(&bytes).map_err(Error::from)?;
    } else {
        std::fs::write(&args.out, &bytes).map_err(Error::from)?;
    }
    let fp = data.fingerprint();
    let summary = format!(
        "Simulated {} rows with seed {} (sha256 {})\n",
        fp.rows, spec.seed, fp.sha256
    );
    report.simulation = Some(SimulationPayload {
        spec,
        output: out.clone(),
        rows: fp.rows,
        sha256: fp.sha256,
    });
    Ok(if out == "-" { String::new() } else { summary })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let started = Instant::now();
    let seed = cli.seed.unwrap_or(DEFAULT_SEED);
    let (name, json, mut report) = match &cli.command {
        Command::Fit(a) => ("fit", a.data.json.clone(), Report::new("fit", base_config(&a.data, seed))),
        Command::Repca(a) => ("repca", a.data.json.clone(), Report::new("repca", base_config(&a.data, seed))),
        Command::Reduce(a) => ("reduce", a.data.json.clone(), Report::new("reduce", base_config(&a.data, seed))),
        Command::Simulate(a) => (
            "simulate",
            a.json.clone(),
            Report::new("simulate", ConfigEcho::new(Criterion::Reml, ContrastScheme::default(), seed)),
        ),
    };
    let result = match &cli.command {
        Command::Fit(a) => cmd_fit(a, &mut report),
        Command::Repca(a) => cmd_repca(a, &mut report),
        Command::Reduce(a) => cmd_reduce(a, &mut report),
        Command::Simulate(a) => cmd_simulate(a, cli.seed, &mut report),
    };
    report.timing.elapsed_seconds = started.elapsed().as_secs_f64();
    let code = match result {
        Ok(text) => {
            print!("{}", text);
            print!("{}", render::warnings(&report));
            0
        }
        Err(f) => {
            eprintln!("parsimix {}: {}", name, describe(&f.error));
            report.error = Some(ErrorPayload {
                kind: error_kind(&f.error).to_string(),
                message: f.error.to_string(),
            });
            f.code
        }
    };
    if let Some(path) = json {
        if let Err(e) = report.write_json(&path) {
            eprintln!("parsimix {}: cannot write report {}: {}", name, path.display(), e);
            return ExitCode::from(1);
        }
    }
    ExitCode::from(code)
}
