//! Argument parsing and the `fit`, `benchmark`, `validate` and `score`
//! commands.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use vmp_core::models::{Benchmark, DATA_SEED};
use vmp_core::{initialize_from_random, run_annealed, run_svi, run_vb, FitFailure, FitOptions, FitReport};

use crate::data::{load_data_csv, DEFAULT_MISSING};
use crate::dump::PosteriorDump;
use crate::error::{is_numerical, CliError, Result};
use crate::spec::{build_model, fit_plan, parse_model_spec, FitPlan, Mode, Model, ModelSpec, Overrides};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;
pub const EXIT_NOT_CONVERGED: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "vmp",
    version,
    about = "Variational message passing for conjugate exponential-family models"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a model spec to CSV data and write the posterior dump.
    Fit {
        spec: PathBuf,
        /// Data file for an observed node, overriding the spec.
        #[arg(long = "data", value_name = "NODE=PATH")]
        data: Vec<String>,
        /// Dump path; standard output when absent.
        #[arg(long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        flags: Flags,
    },
    /// Fit one of the synthetic benchmark models and print timing.
    Benchmark {
        /// gmm-small, gmm-large, pca-small or pca-large.
        model: String,
        #[command(flatten)]
        flags: Flags,
    },
    /// Parse and type-check a spec without running inference.
    Validate { spec: PathBuf },
    /// Reload a dump and print the bound it implies.
    Score {
        spec: PathBuf,
        dump: PathBuf,
        #[arg(long = "data", value_name = "NODE=PATH")]
        data: Vec<String>,
        #[arg(long)]
        missing_token: Option<String>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Clone, Args)]
pub struct Flags {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_sweeps: Option<usize>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long, value_enum)]
    pub broadcast: Option<Switch>,
    #[arg(long)]
    pub missing_token: Option<String>,
}

impl Flags {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            max_sweeps: self.max_sweeps,
            tol: self.tol,
        }
    }

    fn broadcast(&self) -> bool {
        self.broadcast != Some(Switch::Off)
    }
}

/// Run the command line in `args` (program name first). Everything meant
/// for standard output is written to `out` in one piece at the end.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
            let _ = write!(err, "{e}");
            return code;
        }
    };
    let mut stdout = String::new();
    let code = match dispatch(cli.command, &mut stdout, err) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    };
    let _ = out.write_all(stdout.as_bytes());
    code
}

fn dispatch(command: Command, out: &mut String, err: &mut dyn Write) -> Result<i32> {
    match command {
        Command::Fit {
            spec,
            data,
            output,
            flags,
        } => cmd_fit(&spec, &data, output.as_deref(), &flags, out, err),
        Command::Benchmark { model, flags } => cmd_benchmark(&model, &flags, out),
        Command::Validate { spec } => cmd_validate(&spec, out),
        Command::Score {
            spec,
            dump,
            data,
            missing_token,
        } => {
            let (_, mut model) = load_observed(&spec, &data, missing_token.as_deref())?;
            let dump = PosteriorDump::from_json(&read(&dump)?)?;
            let elbo = dump.restore(&mut model)?;
            out.push_str(&format!("{elbo:.17e}\n"));
            Ok(EXIT_OK)
        }
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Read, check and build a spec.
pub fn load_spec(path: &Path) -> Result<(ModelSpec, Model)> {
    let spec = parse_model_spec(&read(path)?)?;
    let model = build_model(&spec)?;
    Ok((spec, model))
}

/// Build a spec and attach its observations. `data` entries are
/// `NODE=PATH` overrides; spec paths are relative to the spec file.
pub fn load_observed(path: &Path, data: &[String], missing: Option<&str>) -> Result<(ModelSpec, Model)> {
    let (spec, mut model) = load_spec(path)?;
    let mut sources = Vec::new();
    for o in &spec.observe {
        let file = o.data.as_ref().map(|p| path.parent().unwrap_or(Path::new("")).join(p));
        sources.push((o.node.clone(), file, o.missing_token.clone()));
    }
    for entry in data {
        let (node, file) = entry
            .split_once('=')
            .ok_or_else(|| CliError::validation("--data", format!("expected NODE=PATH, got {entry:?}")))?;
        match sources.iter_mut().find(|s| s.0 == node) {
            Some(s) => s.1 = Some(PathBuf::from(file)),
            None => sources.push((node.to_string(), Some(PathBuf::from(file)), None)),
        }
    }
    for (node, file, token) in sources {
        let at = format!("observe ({node})");
        let id = model
            .id(&node)
            .ok_or_else(|| CliError::validation(at.clone(), format!("unresolved name {node:?}")))?;
        let file = file.ok_or_else(|| CliError::validation(at.clone(), "no data file given"))?;
        let token = missing.or(token.as_deref()).unwrap_or(DEFAULT_MISSING);
        let table = load_data_csv(&file, token)?;
        let family = model
            .graph
            .family(id)
            .ok()
            .flatten()
            .ok_or_else(|| CliError::validation(at.clone(), "only stochastic nodes can be observed"))?;
        let mask = (!table.is_complete()).then(|| table.element_mask(family.value_size()));
        model
            .graph
            .observe(id, &table.values, mask.as_deref())
            .map_err(|e| CliError::validation(at, e.to_string()))?;
    }
    Ok((spec, model))
}

fn cmd_validate(path: &Path, out: &mut String) -> Result<i32> {
    load_spec(path)?;
    out.push_str("OK\n");
    Ok(EXIT_OK)
}

/// Randomize the requested nodes and run the planned fit.
pub fn execute(model: &mut Model, plan: &FitPlan) -> std::result::Result<FitReport, FitFailure> {
    for (i, &id) in plan.initialize.iter().enumerate() {
        initialize_from_random(&mut model.graph, id, plan.options.seed.wrapping_add(i as u64))?;
    }
    match plan.mode {
        Mode::Vb => run_vb(&mut model.graph, &plan.options),
        Mode::Annealed => run_annealed(
            &mut model.graph,
            &plan.options,
            plan.annealing.as_ref().expect("planned"),
        ),
        Mode::Svi => run_svi(&mut model.graph, &plan.options, plan.svi.as_ref().expect("planned")),
    }
}

fn fit_error(e: vmp_core::Error) -> CliError {
    if is_numerical(&e) {
        CliError::Numerical(e)
    } else {
        CliError::validation("engine", e.to_string())
    }
}

fn cmd_fit(
    path: &Path,
    data: &[String],
    output: Option<&Path>,
    flags: &Flags,
    out: &mut String,
    err: &mut dyn Write,
) -> Result<i32> {
    let (spec, mut model) = load_observed(path, data, flags.missing_token.as_deref())?;
    let plan = fit_plan(&spec, &model, &flags.overrides())?;
    model.graph.set_broadcast(flags.broadcast()).map_err(fit_error)?;
    let report = execute(&mut model, &plan).map_err(|f| fit_error(f.error))?;
    let dump = PosteriorDump::capture(&model, &report)?;
    let json = dump.to_json();
    match output {
        Some(p) => std::fs::write(p, json).map_err(|source| CliError::Io {
            path: p.to_path_buf(),
            source,
        })?,
        None => out.push_str(&json),
    }
    if report.converged {
        Ok(EXIT_OK)
    } else {
        let _ = writeln!(err, "not converged after {} sweeps", report.sweeps);
        Ok(EXIT_NOT_CONVERGED)
    }
}

/// One line of benchmark output.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkRow {
    pub model: &'static str,
    pub broadcast: bool,
    pub sweeps: usize,
    /// Median over sweeps, the first sweep excluded as warm-up.
    pub median_ms: f64,
    pub final_elbo: f64,
}

pub const BENCHMARK_HEADER: &str = "model      broadcast  sweeps  median_ms  final_elbo";

impl BenchmarkRow {
    pub fn line(&self) -> String {
        format!(
            "{:<10} {:<10} {:>6} {:>10.3}  {:.10e}",
            self.model,
            if self.broadcast { "on" } else { "off" },
            self.sweeps,
            self.median_ms,
            self.final_elbo
        )
    }
}

pub fn median_ms(ms: &[f64]) -> f64 {
    let mut t = if ms.len() > 1 { ms[1..].to_vec() } else { ms.to_vec() };
    if t.is_empty() {
        return 0.0;
    }
    t.sort_by(f64::total_cmp);
    let m = t.len() / 2;
    if t.len() % 2 == 0 {
        0.5 * (t[m - 1] + t[m])
    } else {
        t[m]
    }
}

/// Fit a benchmark configuration on its fixed synthetic data.
pub fn benchmark(bench: Benchmark, broadcast: bool, options: &FitOptions) -> Result<(BenchmarkRow, FitReport)> {
    let data = bench.data(DATA_SEED);
    let mut model = bench.build(&data, options.seed).map_err(fit_error)?;
    model.graph_mut().set_broadcast(broadcast).map_err(fit_error)?;
    let report = run_vb(model.graph_mut(), options).map_err(|f| fit_error(f.error))?;
    let row = BenchmarkRow {
        model: bench.name(),
        broadcast,
        sweeps: report.sweeps,
        median_ms: median_ms(&report.ms_per_sweep),
        final_elbo: report.final_elbo().unwrap_or(f64::NAN),
    };
    Ok((row, report))
}

fn cmd_benchmark(name: &str, flags: &Flags, out: &mut String) -> Result<i32> {
    let bench = Benchmark::from_name(name).ok_or_else(|| {
        let known: Vec<&str> = Benchmark::ALL.iter().map(Benchmark::name).collect();
        CliError::validation(
            "model",
            format!("unknown model {name:?}; expected one of {}", known.join(", ")),
        )
    })?;
    let defaults = FitOptions::default();
    let options = FitOptions {
        order: None,
        max_sweeps: flags.max_sweeps.unwrap_or(defaults.max_sweeps),
        tol: flags.tol.unwrap_or(defaults.tol),
        seed: flags.seed.unwrap_or(defaults.seed),
    };
    let (row, report) = benchmark(bench, flags.broadcast(), &options)?;
    out.push_str(BENCHMARK_HEADER);
    out.push('\n');
    out.push_str(&row.line());
    out.push('\n');
    Ok(if report.converged { EXIT_OK } else { EXIT_NOT_CONVERGED })
}
