//! Command-line front end: validate, analyze, report, bench, fixture, export.
//!
//! Every command returns an exit code: 0 on success, 1 on a runtime or data
//! error, 2 on a usage error. Settings merge as flags > env > file > defaults.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use bizinsight::anonymize::NameVault;
use bizinsight::bench::{generate_fixture, run_bench, BenchOptions, FixtureSpec};
use bizinsight::datamodel::{insights_from_json, insights_to_json, validate_dataset, Dataset, FillStrategy};
use bizinsight::ingest::{load_any, read_any, write_csv, write_json, IngestConfig};
use bizinsight::llm::{HttpProvider, LlmHandle, SimConfig};
use bizinsight::narrative::{render_template, TemplateOptions};
use bizinsight::pipeline::{anonymize_dataset, run, Mode, PipelineConfig, PipelineSettings, RunResult};
use bizinsight::preprocess::{clean, CleanReport};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

type CliResult = Result<(), CliError>;

fn runtime(e: impl fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "bizinsight", version, about = "Business insight reports from time-series metrics")]
pub struct Cli {
    /// Log verbosely to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a data file against its registry and list every violation.
    Validate(ValidateArgs),
    /// Run one pipeline mode and write report.md, insights.json, run.json.
    Analyze(AnalyzeArgs),
    /// Render a Markdown report from an insights JSON file.
    Report(ReportArgs),
    /// Benchmark pipeline modes on generated fixtures.
    Bench(BenchArgs),
    /// Write a generated fixture with its registry and oracle.
    Fixture(FixtureArgs),
    /// Clean, optionally anonymize, and re-serialize a dataset.
    Export(ExportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct InputArgs {
    /// CSV or JSON data file (`.json` is read as JSON).
    #[arg(long)]
    pub input: PathBuf,
    /// Metric registry JSON.
    #[arg(long)]
    pub registry: PathBuf,
    #[arg(long, default_value = "date")]
    pub date_column: String,
    /// Comma-separated dimension columns; inferred when omitted.
    #[arg(long, value_delimiter = ',')]
    pub dims: Option<Vec<String>>,
}

impl InputArgs {
    fn ingest_config(&self) -> IngestConfig {
        IngestConfig {
            date_column: self.date_column.clone(),
            dimension_columns: self.dims.clone(),
            ..IngestConfig::with_registry(&self.registry)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Fill {
    Median,
    Zero,
    Drop,
}

impl From<Fill> for FillStrategy {
    fn from(f: Fill) -> Self {
        match f {
            Fill::Median => FillStrategy::Median,
            Fill::Zero => FillStrategy::Zero,
            Fill::Drop => FillStrategy::Drop,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct CleanArgs {
    /// How to fill missing metric values.
    #[arg(long, value_enum, default_value = "median")]
    pub fill: Fill,
    /// Cap outliers at median ± k·MAD.
    #[arg(long)]
    pub cap_k: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct ValidateArgs {
    #[command(flatten)]
    pub input: InputArgs,
}

#[derive(Debug, Clone, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub clean: CleanArgs,
    /// rule_only, llm_only, llm_chunked, sequential, or hybrid.
    #[arg(long)]
    pub pipeline: Option<String>,
    /// TOML settings file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Use the simulated model even when endpoint credentials are set.
    #[arg(long)]
    pub simulate: bool,
    /// Simulator seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; 0 means available parallelism.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Token budget for one analysis prompt.
    #[arg(long)]
    pub chunk_budget: Option<usize>,
    /// Simulated chance that each computed number is wrong
    #[arg(long)]
    pub sim_math_error: Option<f64>,
    /// Simulated chance of a fabricated entity in each model answer
    #[arg(long)]
    pub sim_hallucination: Option<f64>,
    /// Send real dimension values to the model.
    #[arg(long)]
    pub no_anonymize: bool,
    /// Leave aggregate computation to the model in hybrid mode.
    #[arg(long)]
    pub no_precalc: bool,
    #[arg(long)]
    pub title: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// Insights JSON as written by `analyze`.
    #[arg(long)]
    pub insights: PathBuf,
    #[arg(long, default_value = "report.md")]
    pub out: PathBuf,
    #[arg(long)]
    pub title: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    /// First fixture seed; also seeds the simulator.
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 730)]
    pub days: usize,
    /// Number of fixtures, seeded consecutively from --seed.
    #[arg(long, default_value_t = 10)]
    pub fixtures: usize,
    /// Comma-separated modes; all five by default.
    #[arg(long, value_delimiter = ',')]
    pub modes: Option<Vec<String>>,
    /// Simulated chance that each computed number is wrong
    #[arg(long, default_value_t = 0.37)]
    pub sim_math_error: f64,
    /// Simulated chance of a fabricated entity in each model answer
    #[arg(long, default_value_t = 0.12)]
    pub sim_hallucination: f64,
    /// Prompt budget as a fraction of the serialized dataset.
    #[arg(long, default_value_t = 0.4)]
    pub budget_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
    /// Accepted for symmetry with `analyze`; benchmarks always simulate.
    #[arg(long)]
    pub simulate: bool,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct FixtureArgs {
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 730)]
    pub days: usize,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub clean: CleanArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: Format,
    /// Replace dimension values with vault tokens; the vault is written
    /// next to the output as `<out>.vault.json`.
    #[arg(long)]
    pub anonymize: bool,
    #[arg(long, default_value = "bizinsight")]
    pub salt: String,
}

/// Parses `args` (program name first) and runs the command, writing
/// human-readable output to `out` and diagnostics to `err`.
pub fn run_cli<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = if code == EXIT_OK { write!(out, "{e}") } else { write!(err, "{e}") };
            return code;
        }
    };
    let result = match &cli.command {
        Command::Validate(a) => cmd_validate(a, out),
        Command::Analyze(a) => cmd_analyze(a, out),
        Command::Report(a) => cmd_report(a, out),
        Command::Bench(a) => cmd_bench(a, out),
        Command::Fixture(a) => cmd_fixture(a, out),
        Command::Export(a) => cmd_export(a, out),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "{e}");
            e.code()
        }
    }
}

fn write_file(path: &Path, contents: &str) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, contents).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn ensure_dir(dir: &Path) -> CliResult {
    std::fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))
}

fn with_file(path: &Path) -> impl Fn(bizinsight::ingest::IngestError) -> CliError + '_ {
    move |e| runtime(format!("{}: {e}", path.display()))
}

pub fn cmd_validate(a: &ValidateArgs, out: &mut dyn Write) -> CliResult {
    let ing = read_any(&a.input.input, &a.input.ingest_config()).map_err(with_file(&a.input.input))?;
    let violations = validate_dataset(&ing.dataset);
    for v in &violations {
        writeln!(out, "{v}").map_err(runtime)?;
    }
    writeln!(
        out,
        "{} violations ({} rows, {} missing values)",
        violations.len(),
        ing.summary.rows,
        ing.summary.missing_count
    )
    .map_err(runtime)?;
    if violations.is_empty() {
        Ok(())
    } else {
        Err(runtime(format!("{} has {} violations", a.input.input.display(), violations.len())))
    }
}

fn load_clean(input: &InputArgs, c: &CleanArgs) -> Result<(Dataset, CleanReport), CliError> {
    let ing = load_any(&input.input, &input.ingest_config()).map_err(with_file(&input.input))?;
    clean(&ing.dataset, c.fill.into(), c.cap_k).map_err(|e| runtime(format!("{}: {e}", input.input.display())))
}

/// File settings, then environment, then flags.
pub fn resolve_settings(a: &AnalyzeArgs) -> Result<PipelineSettings, CliError> {
    let mut s = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            toml::from_str::<PipelineSettings>(&text)
                .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
        }
        None => PipelineSettings::default(),
    };
    s.http = s.http.with_env();
    if let Some(p) = &a.pipeline {
        s.mode = p.parse().map_err(CliError::Usage)?;
    } else if a.config.is_none() {
        return Err(CliError::Usage("--pipeline is required (or set `mode` in --config)".into()));
    }
    if let Some(seed) = a.seed {
        s.sim.seed = seed;
    }
    if let Some(p) = a.sim_math_error {
        s.sim.p_math_error = p;
    }
    if let Some(p) = a.sim_hallucination {
        s.sim.p_hallucination = p;
    }
    if let Some(j) = a.jobs {
        s.jobs = j;
    }
    if let Some(b) = a.chunk_budget {
        s.chunk.budget_tokens = b;
    }
    if a.no_anonymize {
        s.anonymize = false;
    }
    if a.no_precalc {
        s.precalc = false;
    }
    if let Some(t) = &a.title {
        s.title = t.clone();
    }
    s.detector.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    s.sim.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(s)
}

/// The provider a mode needs, if any. `--simulate` always wins.
pub fn resolve_llm(s: &PipelineSettings, simulate: bool) -> Result<Option<LlmHandle>, CliError> {
    if !s.mode.uses_llm() {
        return Ok(None);
    }
    if simulate {
        return Ok(Some(LlmHandle::simulated(s.sim.clone())));
    }
    if !s.http.is_configured() {
        return Err(CliError::Usage(format!(
            "--pipeline {} needs a model: set LLM_API_URL and LLM_API_KEY (or [http] in --config), or pass --simulate",
            s.mode
        )));
    }
    HttpProvider::new(s.http.clone())
        .map(|p| Some(LlmHandle::Http(p)))
        .map_err(|e| CliError::Usage(e.to_string()))
}

#[derive(Serialize)]
struct RunFile<'a> {
    input: String,
    simulated: bool,
    clean: CleanReport,
    #[serde(flatten)]
    result: &'a RunResult,
}

pub fn cmd_analyze(a: &AnalyzeArgs, out: &mut dyn Write) -> CliResult {
    let settings = resolve_settings(a)?;
    let llm = resolve_llm(&settings, a.simulate)?;
    let simulated = llm.as_ref().is_some_and(LlmHandle::is_simulated);
    let (d, cleaned) = load_clean(&a.input, &a.clean)?;
    let cfg = PipelineConfig::from_settings(&settings, llm);
    let result = run(&d, &cfg).map_err(|e| runtime(format!("{}: {e}", a.input.input.display())))?;

    ensure_dir(&a.out)?;
    write_file(&a.out.join("report.md"), &result.report.to_markdown())?;
    write_file(&a.out.join("insights.json"), &(insights_to_json(&result.insights) + "\n"))?;
    let meta = RunFile {
        input: a.input.input.display().to_string(),
        simulated,
        clean: cleaned,
        result: &result,
    };
    let json = serde_json::to_string_pretty(&meta).map_err(runtime)? + "\n";
    write_file(&a.out.join("run.json"), &json)?;
    writeln!(
        out,
        "{}: {} insights, {} rows, {} model calls -> {}",
        result.mode,
        result.insights.len(),
        result.rows_processed,
        result.llm_calls,
        a.out.display()
    )
    .map_err(runtime)
}

pub fn cmd_report(a: &ReportArgs, out: &mut dyn Write) -> CliResult {
    let text = std::fs::read_to_string(&a.insights).map_err(|e| runtime(format!("{}: {e}", a.insights.display())))?;
    let insights = insights_from_json(&text).map_err(|e| runtime(format!("{}: {e}", a.insights.display())))?;
    let mut opts = TemplateOptions::default();
    if let Some(t) = &a.title {
        opts.title = t.clone();
    }
    write_file(&a.out, &render_template(&insights, &opts).to_markdown())?;
    writeln!(out, "{} insights -> {}", insights.len(), a.out.display()).map_err(runtime)
}

pub fn parse_modes(list: &Option<Vec<String>>) -> Result<Vec<Mode>, CliError> {
    match list {
        None => Ok(Mode::ALL.to_vec()),
        Some(items) => items.iter().map(|m| m.trim().parse().map_err(CliError::Usage)).collect(),
    }
}

pub fn cmd_bench(a: &BenchArgs, out: &mut dyn Write) -> CliResult {
    let modes = parse_modes(&a.modes)?;
    if a.fixtures == 0 {
        return Err(CliError::Usage("--fixtures must be at least 1".into()));
    }
    if !(a.budget_fraction > 0.0 && a.budget_fraction <= 1.0) {
        return Err(CliError::Usage("--budget-fraction must be in (0, 1]".into()));
    }
    let sim = SimConfig {
        seed: a.seed,
        p_math_error: a.sim_math_error,
        p_hallucination: a.sim_hallucination,
        ..SimConfig::default()
    };
    sim.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let spec = FixtureSpec {
        days: a.days,
        ..FixtureSpec::default()
    };
    let fixtures = (0..a.fixtures as u64)
        .map(|i| generate_fixture(&spec, a.seed.wrapping_add(i)))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| runtime(format!("fixture: {e}")))?;
    let opts = BenchOptions {
        budget_fraction: a.budget_fraction,
        jobs: a.jobs,
        ..BenchOptions::default()
    };
    let report = run_bench(&fixtures, &modes, &sim, &opts);
    ensure_dir(&a.out)?;
    write_file(&a.out.join("bench_report.json"), &report.to_json())?;
    let md = report.to_markdown();
    write_file(&a.out.join("bench_report.md"), &md)?;
    write!(out, "{md}").map_err(runtime)
}

pub fn cmd_fixture(a: &FixtureArgs, out: &mut dyn Write) -> CliResult {
    let spec = FixtureSpec {
        days: a.days,
        ..FixtureSpec::default()
    };
    let f = generate_fixture(&spec, a.seed).map_err(|e| runtime(format!("fixture: {e}")))?;
    ensure_dir(&a.out)?;
    write_file(&a.out.join("data.csv"), &write_csv(&f.dataset))?;
    write_file(&a.out.join("registry.json"), &(f.dataset.metrics.to_json() + "\n"))?;
    write_file(&a.out.join("oracle.json"), &(insights_to_json(&f.oracle) + "\n"))?;
    let names = serde_json::to_string_pretty(&f.names).map_err(runtime)? + "\n";
    write_file(&a.out.join("names.json"), &names)?;
    writeln!(
        out,
        "{} rows, {} oracle insights, {} planted events -> {}",
        f.dataset.len(),
        f.oracle.len(),
        f.planted.len(),
        a.out.display()
    )
    .map_err(runtime)
}

pub fn cmd_export(a: &ExportArgs, out: &mut dyn Write) -> CliResult {
    let (mut d, report) = load_clean(&a.input, &a.clean)?;
    if a.anonymize {
        let vault = NameVault::with_names(a.salt.clone(), &d.all_dimension_values()).map_err(runtime)?;
        d = anonymize_dataset(&d, &vault);
        let mut vault_path = a.out.clone().into_os_string();
        vault_path.push(".vault.json");
        write_file(Path::new(&vault_path), &(vault.to_json() + "\n"))?;
    }
    let text = match a.format {
        Format::Csv => write_csv(&d),
        Format::Json => write_json(&d),
    };
    write_file(&a.out, &text)?;
    writeln!(
        out,
        "{} rows ({} duplicates removed, {} values imputed, {} rows dropped, {} capped) -> {}",
        d.len(),
        report.duplicates_removed,
        report.values_imputed,
        report.rows_dropped,
        report.outliers_capped,
        a.out.display()
    )
    .map_err(runtime)
}
