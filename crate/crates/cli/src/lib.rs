//! Command implementations behind the `dpgraph` binary.
//!
//! Every command returns a [`CliError`] carrying its process exit code:
//! 2 for unusable inputs, 3 for analysis failures, 4 for invalid privacy
//! parameters.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use dpgraph_core::runtime::{write_csv, CSV_HEADER};
use dpgraph_core::{
    benchmark, compile, estimate_sensitivity, privatize, CompiledProgram, Graph, LipschitzError, MechanismError,
    Method, ModelFile, NodeId, PrivacyParams, SensitivityConfig, SensitivityReport, Shape, Tensor,
};
use serde::{Deserialize, Serialize};

pub const EXIT_INPUT: i32 = 2;
pub const EXIT_ANALYSIS: i32 = 3;
pub const EXIT_PRIVACY: i32 = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn input(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_INPUT,
            message: message.into(),
        }
    }

    fn analysis(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_ANALYSIS,
            message: message.into(),
        }
    }

    fn privacy(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_PRIVACY,
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

#[derive(Debug, Parser)]
#[command(name = "dpgraph", version, about = "Sensitivity analysis and privatized execution of tensor queries")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Bound the sensitivity of a model with one or more methods.
    Analyze(AnalyzeArgs),
    /// Evaluate a model on private data and release a noised result.
    Run(RunArgs),
    /// Measure compile and execution time of the benchmark network.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Comma-separated list of ibp, global_opt, grid_oracle.
    #[arg(long, value_delimiter = ',', default_value = "ibp,global_opt")]
    pub methods: Vec<Method>,
    /// Report file; defaults to `<model>.analysis.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed of the optimizer's sample sequence.
    #[arg(long, default_value_t = 0)]
    pub seed: u32,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// CSV file for the single private input, or `name=path`. Repeatable.
    #[arg(long, required = true)]
    pub data: Vec<DataArg>,
    #[arg(long, allow_negative_numbers = true)]
    pub epsilon: f64,
    #[arg(long, allow_negative_numbers = true)]
    pub delta: f64,
    /// Seed of the noise generator.
    #[arg(long)]
    pub seed: u64,
    /// Refuse to run when the sensitivity exceeds this value.
    #[arg(long, allow_negative_numbers = true)]
    pub cap: Option<f64>,
    /// Reuse a report written by `analyze` when its fingerprint matches.
    #[arg(long)]
    pub analysis: Option<PathBuf>,
    /// Output file; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "16,64,256,1024")]
    pub widths: Vec<PositiveInt>,
    #[arg(long, default_value = "100")]
    pub reps: PositiveInt,
    /// CSV file; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PositiveInt(pub usize);

impl FromStr for PositiveInt {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(PositiveInt(n)),
            _ => Err(format!("expected a positive integer, got {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataArg {
    pub name: Option<String>,
    pub path: PathBuf,
}

impl FromStr for DataArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.split_once('=') {
            Some((name, path)) if !name.is_empty() && !path.is_empty() => Ok(DataArg {
                name: Some(name.to_string()),
                path: path.into(),
            }),
            Some(_) => Err(format!("expected name=path, got {s:?}")),
            None => Ok(DataArg {
                name: None,
                path: s.into(),
            }),
        }
    }
}

/// Contents of the report file written by `analyze`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisOutput {
    pub reports: Vec<SensitivityReport>,
    pub fingerprint: String,
    pub model_path: String,
    pub tool_version: String,
}

/// Contents of the file written by `run`. Holds no un-noised query values
/// apart from the output norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunOutput {
    pub value: Vec<Tensor>,
    pub sigma: f64,
    pub clipped_fraction: f64,
    pub output_l2_norm: f64,
    pub seed: u64,
    pub epsilon: f64,
    pub delta: f64,
    pub sensitivity: f64,
    pub method: Method,
    pub fingerprint: String,
}

pub fn load_model(path: &Path) -> Result<Graph, CliError> {
    let src = fs::read_to_string(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    let graph = ModelFile::load(&src).map_err(|e| {
        let lines: Vec<String> = e.diagnostics().iter().map(|d| format!("{}: {d}", path.display())).collect();
        CliError::input(lines.join("\n"))
    })?;
    graph.validate().map_err(|diags| {
        let lines: Vec<String> = diags.iter().map(|d| format!("{}: {d}", path.display())).collect();
        CliError::input(lines.join("\n"))
    })?;
    Ok(graph)
}

fn analysis_error(e: LipschitzError) -> CliError {
    CliError::analysis(format!("sensitivity analysis failed: {e}"))
}

fn analyze_graph(graph: &Graph, methods: &[Method], seed: u32) -> Result<Vec<SensitivityReport>, CliError> {
    let wrt: Vec<NodeId> = graph.private_inputs().to_vec();
    let mut config = SensitivityConfig::default();
    config.optimizer.seed = seed;
    methods
        .iter()
        .map(|&m| estimate_sensitivity(graph, &wrt, graph.bounds(), m, &config).map_err(analysis_error))
        .collect()
}

fn default_report_path(model: &Path) -> PathBuf {
    let mut name = model.file_stem().unwrap_or_default().to_os_string();
    name.push(".analysis.json");
    model.with_file_name(name)
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

/// Renders one row per report.
pub fn report_table(reports: &[SensitivityReport]) -> String {
    let mut s = format!(
        "{:<12} {:>16} {:>16} {:>10} {:>12}\n",
        "method", "bound", "interval_low", "certified", "wall_ms"
    );
    for r in reports {
        s.push_str(&format!(
            "{:<12} {:>16.8e} {:>16.8e} {:>10} {:>12.3}\n",
            r.method.as_str(),
            r.bound,
            r.interval_low,
            if r.certified { "yes" } else { "no" },
            r.wall_time_ms
        ));
    }
    s
}

pub fn cmd_analyze(args: &AnalyzeArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<AnalysisOutput, CliError> {
    let graph = load_model(&args.model)?;
    if args.methods.is_empty() {
        return Err(CliError::input("no methods given"));
    }
    let reports = analyze_graph(&graph, &args.methods, args.seed)?;
    let output = AnalysisOutput {
        fingerprint: reports[0].fingerprint.clone(),
        reports,
        model_path: args.model.display().to_string(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
    };
    let out = args.out.clone().unwrap_or_else(|| default_report_path(&args.model));
    write_text(&out, &(serde_json::to_string_pretty(&output).expect("reports serialize") + "\n"))?;
    let _ = stdout.write_all(report_table(&output.reports).as_bytes());
    for r in &output.reports {
        if let Some(w) = &r.warning {
            let _ = writeln!(stderr, "warning: {}: {w}", r.method);
        }
    }
    let _ = writeln!(stderr, "wrote {}", out.display());
    Ok(output)
}

/// Reads a CSV of numbers, one row per line, without a header.
pub fn read_csv(path: &Path) -> Result<Vec<Vec<f64>>, CliError> {
    let bad = |msg: String| CliError::input(format!("{}: {msg}", path.display()));
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| bad(e.to_string()))?;
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let row = rec
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| bad(format!("line {}: {f:?} is not a number", i + 1))))
            .collect::<Result<Vec<_>, _>>()?;
        if row.iter().any(|v| !v.is_finite()) {
            return Err(bad(format!("line {}: non-finite value", i + 1)));
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Arranges CSV rows as a tensor of the declared shape. A vector may be
/// given as one row or one column; anything else must match exactly.
pub fn rows_to_tensor(rows: &[Vec<f64>], shape: &Shape) -> Result<Tensor, String> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err("rows have different lengths".into());
    }
    let fits = match shape.dims() {
        [] => r == 1 && c == 1,
        [n] => (r == 1 && c == *n) || (c == 1 && r == *n),
        [a, b] => r == *a && c == *b,
        _ => return Err(format!("shape {shape} cannot be read from CSV")),
    };
    if !fits {
        return Err(format!("data is {r}x{c} but the model declares shape {shape}"));
    }
    Ok(Tensor::new(shape.clone(), rows.concat()).expect("element count checked"))
}

fn load_data(graph: &Graph, args: &[DataArg]) -> Result<HashMap<String, Tensor>, CliError> {
    let mut data = HashMap::new();
    for arg in args {
        let name = match &arg.name {
            Some(n) => n.clone(),
            None => match graph.private_inputs() {
                [only] => graph.name(*only).unwrap_or_default().to_string(),
                _ => {
                    return Err(CliError::input(format!(
                        "{}: the model has several private inputs; use --data name=path",
                        arg.path.display()
                    )))
                }
            },
        };
        let id = graph
            .variable(&name)
            .ok_or_else(|| CliError::input(format!("{}: the model has no input named {name}", arg.path.display())))?;
        let rows = read_csv(&arg.path)?;
        let t = rows_to_tensor(&rows, graph.shape(id))
            .map_err(|e| CliError::input(format!("{}: {name}: {e}", arg.path.display())))?;
        if data.insert(name.clone(), t).is_some() {
            return Err(CliError::input(format!("data for {name} given twice")));
        }
    }
    for v in graph.variables() {
        let name = graph.name(v).unwrap_or_default();
        if !data.contains_key(name) {
            return Err(CliError::input(format!("no data given for {name}")));
        }
    }
    Ok(data)
}

/// Picks the report to calibrate with: global optimization first, then the
/// interval bound, then any other.
fn pick_report(reports: &[SensitivityReport]) -> Option<&SensitivityReport> {
    [Method::GlobalOpt, Method::Ibp, Method::GridOracle]
        .iter()
        .find_map(|m| reports.iter().find(|r| r.method == *m))
}

fn cached_report(path: &Path, program: &CompiledProgram, stderr: &mut dyn Write) -> Result<Option<SensitivityReport>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    let analysis: AnalysisOutput =
        serde_json::from_str(&text).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    let expected = program.fingerprint().to_hex();
    if analysis.fingerprint != expected {
        let _ = writeln!(stderr, "warning: {} was computed for another model; reanalyzing", path.display());
        return Ok(None);
    }
    Ok(pick_report(&analysis.reports).filter(|r| r.fingerprint == expected).cloned())
}

pub fn cmd_run(args: &RunArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<RunOutput, CliError> {
    let params = match args.cap {
        Some(cap) => PrivacyParams::with_cap(args.epsilon, args.delta, cap),
        None => PrivacyParams::new(args.epsilon, args.delta),
    };
    params.validate().map_err(|e| CliError::privacy(e.to_string()))?;

    let graph = load_model(&args.model)?;
    let data = load_data(&graph, &args.data)?;
    let program = compile(&graph).map_err(|e| CliError::input(e.to_string()))?;
    let report = match &args.analysis {
        Some(path) => cached_report(path, &program, stderr)?,
        None => None,
    };
    let report = match report {
        Some(r) => r,
        None => analyze_graph(&graph, &[Method::GlobalOpt], 0)?.remove(0),
    };
    if let Some(w) = &report.warning {
        let _ = writeln!(stderr, "warning: {w}");
    }

    let out = privatize(&program, &data, &params, &report, args.seed).map_err(|e| match e {
        MechanismError::InvalidParams(m) => CliError::privacy(m),
        MechanismError::InvalidReport(m) => CliError::analysis(m),
        MechanismError::MissingInput(_) | MechanismError::ShapeMismatch { .. } => CliError::input(e.to_string()),
        other => CliError::analysis(other.to_string()),
    })?;
    let result = RunOutput {
        value: out.value,
        sigma: out.sigma,
        clipped_fraction: out.clipped_fraction,
        output_l2_norm: out.output_l2_norm,
        seed: out.seed,
        epsilon: params.epsilon,
        delta: params.delta,
        sensitivity: report.bound,
        method: report.method,
        fingerprint: report.fingerprint.clone(),
    };
    let text = serde_json::to_string_pretty(&result).expect("outputs serialize") + "\n";
    match &args.out {
        Some(path) => {
            write_text(path, &text)?;
            let _ = writeln!(stderr, "wrote {}", path.display());
        }
        None => {
            let _ = stdout.write_all(text.as_bytes());
        }
    }
    if result.clipped_fraction > 0.0 {
        let _ = writeln!(stderr, "clipped {:.2}% of private input elements", 100.0 * result.clipped_fraction);
    }
    Ok(result)
}

pub fn cmd_bench(args: &BenchArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<(), CliError> {
    let widths: Vec<usize> = args.widths.iter().map(|w| w.0).collect();
    if widths.is_empty() {
        return Err(CliError::input("no widths given"));
    }
    if args.reps.0 == 1 {
        let _ = writeln!(stderr, "warning: a single repetition gives a noisy median");
    }
    let records = benchmark(&widths, args.reps.0).map_err(|e| CliError::input(e.to_string()))?;
    let mut csv = Vec::new();
    write_csv(&records, &mut csv).expect("writing to memory");
    match &args.out {
        Some(path) => write_text(path, std::str::from_utf8(&csv).expect("csv is utf-8"))?,
        None => {
            let _ = stdout.write_all(&csv);
        }
    }
    let summary: &mut dyn Write = if args.out.is_some() { stdout } else { stderr };
    let _ = writeln!(summary, "{CSV_HEADER}");
    for r in &records {
        let _ = writeln!(
            summary,
            "width {:>5}: {:>9} params, compile {:.4} s (cached {:.2e} s), exec {:.1} us",
            r.width, r.param_count, r.compile_s, r.compile_cached_s, r.exec_us
        );
    }
    Ok(())
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: &Cli, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32 {
    let result = match &cli.command {
        Command::Analyze(a) => cmd_analyze(a, stdout, stderr).map(|_| ()),
        Command::Run(a) => cmd_run(a, stdout, stderr).map(|_| ()),
        Command::Bench(a) => cmd_bench(a, stdout, stderr),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.code
        }
    }
}

pub fn main_with(args: impl IntoIterator<Item = String>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { 0 };
        }
    };
    run(&cli, &mut io::stdout().lock(), &mut io::stderr().lock())
}
