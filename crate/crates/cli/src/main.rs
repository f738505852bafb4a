//! `esb`: run ESB task-stack scenarios and the acceptance suite.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use esb_core::acceptance::{run_suite, Suite};
use esb_core::scenario::{builtin, load_scenario, summarize, write_trace_csv, ScenarioFile, BUILTINS};
use esb_core::sim::run_scenario;
use esb_core::tasks::{classify_pair, RelationshipReport};
use esb_core::Vector;

/// Writes a line to stdout; a closed pipe is not an error worth reporting.
macro_rules! say {
    ($($arg:tt)*) => {{
        let _ = writeln!(io::stdout().lock(), $($arg)*);
    }};
}

#[derive(Parser)]
#[command(name = "esb", version, about = "Prioritized ESB task stacks through CBF-constrained QPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    Fast,
    Full,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario file or builtin id; writes the trace and a summary.
    Run {
        scenario: String,
        /// Output directory, or a trace file path whose stem also names the summary.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Dotted-path override such as integrator.dt=0.005 (repeatable).
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Trace format; the summary is always JSON.
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
    /// List the builtin scenarios, or print one as a scenario file.
    Scenarios {
        #[arg(long, value_name = "ID")]
        show: Option<String>,
        #[arg(long, value_enum)]
        format: Option<Format>,
    },
    /// Pairwise task relationships at the initial or given configurations.
    Classify {
        scenario: String,
        /// Configuration as comma-separated joint values (repeatable).
        #[arg(long = "q", value_name = "Q1,Q2,...", allow_hyphen_values = true)]
        configurations: Vec<String>,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, value_enum)]
        format: Option<Format>,
    },
    /// Offline selection of the auxiliary-barrier gains for a dynamic scenario.
    GammaSelect {
        scenario: String,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Seed for the boundary sampling.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the acceptance suite.
    Verify {
        #[arg(long, value_enum, default_value_t = SuiteArg::Fast)]
        suite: SuiteArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum)]
        format: Option<Format>,
    },
}

enum Failure {
    Input(String),
    Solver(String),
    Acceptance,
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Input(_) => 2,
            Failure::Solver(_) => 3,
            Failure::Acceptance => 4,
        }
    }
}

impl From<esb_core::Error> for Failure {
    fn from(e: esb_core::Error) -> Self {
        if e.is_solver_failure() {
            Failure::Solver(e.to_string())
        } else {
            Failure::Input(e.to_string())
        }
    }
}

fn io_failure(path: &Path, e: io::Error) -> Failure {
    Failure::Input(format!("{}: {e}", path.display()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run {
            scenario,
            out,
            overrides,
            format,
        } => cmd_run(&scenario, out.as_deref(), &overrides, format),
        Command::Scenarios { show, format } => cmd_scenarios(show.as_deref(), format),
        Command::Classify {
            scenario,
            configurations,
            overrides,
            format,
        } => cmd_classify(&scenario, &configurations, &overrides, format),
        Command::GammaSelect {
            scenario,
            overrides,
            seed,
        } => cmd_gamma_select(&scenario, &overrides, seed),
        Command::Verify { suite, seed, format } => cmd_verify(suite, seed, format),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Input(m) => eprintln!("error: {m}"),
                Failure::Solver(m) => eprintln!("solver error: {m}"),
                Failure::Acceptance => eprintln!("acceptance suite failed"),
            }
            ExitCode::from(f.code())
        }
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Input(e.to_string()))?;
    say!("{text}");
    Ok(())
}

/// Trace and summary paths for `--out`.
fn output_paths(out: Option<&Path>, name: &str, format: Format) -> (PathBuf, PathBuf) {
    let ext = match format {
        Format::Csv => "csv",
        Format::Json => "json",
    };
    match out {
        Some(p) if p.extension().is_some() && !p.is_dir() => {
            let stem = p.file_stem().map_or_else(|| name.into(), |s| s.to_string_lossy().into_owned());
            (p.to_path_buf(), p.with_file_name(format!("{stem}.summary.json")))
        }
        other => {
            let dir = other.map_or_else(|| PathBuf::from("."), Path::to_path_buf);
            (dir.join(format!("{name}.{ext}")), dir.join(format!("{name}.summary.json")))
        }
    }
}

fn cmd_run(source: &str, out: Option<&Path>, overrides: &[String], format: Format) -> Result<(), Failure> {
    let file = load_scenario(source, overrides)?;
    let scenario = file.build()?;
    let trace = run_scenario(&scenario)?;
    let summary = summarize(&trace, &scenario.tasks);

    let (trace_path, summary_path) = output_paths(out, &file.name, format);
    if let Some(dir) = trace_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
    }
    let sink = fs::File::create(&trace_path).map_err(|e| io_failure(&trace_path, e))?;
    match format {
        Format::Csv => write_trace_csv(&trace, io::BufWriter::new(sink))?,
        Format::Json => {
            let doc = json!({ "meta": trace.meta, "records": trace.records });
            serde_json::to_writer(io::BufWriter::new(sink), &doc).map_err(|e| Failure::Input(e.to_string()))?;
        }
    }
    let text = serde_json::to_string_pretty(&summary).map_err(|e| Failure::Input(e.to_string()))?;
    fs::write(&summary_path, format!("{text}\n")).map_err(|e| io_failure(&summary_path, e))?;
    say!("{text}");
    eprintln!("wrote {} and {}", trace_path.display(), summary_path.display());
    Ok(())
}

fn cmd_scenarios(show: Option<&str>, format: Option<Format>) -> Result<(), Failure> {
    if let Some(id) = show {
        let file = builtin(id).ok_or_else(|| Failure::Input(format!("no builtin scenario `{id}`")))?;
        say!("{}", file.to_json_pretty());
        return Ok(());
    }
    if format == Some(Format::Json) {
        let list: Vec<_> = BUILTINS
            .iter()
            .map(|b| json!({ "id": b.id, "description": b.description }))
            .collect();
        return print_json(&list);
    }
    let width = BUILTINS.iter().map(|b| b.id.len()).max().unwrap_or(0);
    for b in BUILTINS {
        say!("{:width$}  {}", b.id, b.description);
    }
    Ok(())
}

fn parse_configuration(text: &str, dof: usize) -> Result<Vector, Failure> {
    let values = text
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| Failure::Input(format!("configuration `{text}`: {e}")))?;
    if values.len() != dof {
        return Err(Failure::Input(format!(
            "configuration `{text}` has {} values, the robot has {dof} joints",
            values.len()
        )));
    }
    Ok(Vector::from_vec(values))
}

#[derive(Serialize)]
#[serde(untagged)]
enum PairOutcome {
    Classified(RelationshipReport),
    Failed { pair: (String, String), error: String },
}

#[derive(Serialize)]
struct ClassifyAt {
    q: Vec<f64>,
    pairs: Vec<PairOutcome>,
}

fn classify_all(file: &ScenarioFile, configurations: &[String]) -> Result<Vec<ClassifyAt>, Failure> {
    let robot = file.robot()?;
    let tasks = file.build_tasks()?;
    let qs = if configurations.is_empty() {
        vec![Vector::from_vec(file.initial.q.clone())]
    } else {
        configurations
            .iter()
            .map(|c| parse_configuration(c, robot.dof()))
            .collect::<Result<_, _>>()?
    };
    let tol = file.diagnostics.rank_tol;
    Ok(qs
        .into_iter()
        .map(|q| {
            let mut pairs = Vec::new();
            for i in 0..tasks.len() {
                for j in i + 1..tasks.len() {
                    pairs.push(match classify_pair(&tasks[i], &tasks[j], &robot, &q, 0.0, tol) {
                        Ok(r) => PairOutcome::Classified(r),
                        Err(e) => PairOutcome::Failed {
                            pair: (tasks[i].id.clone(), tasks[j].id.clone()),
                            error: e.to_string(),
                        },
                    });
                }
            }
            ClassifyAt {
                q: q.iter().copied().collect(),
                pairs,
            }
        })
        .collect())
}

fn cmd_classify(
    source: &str,
    configurations: &[String],
    overrides: &[String],
    format: Option<Format>,
) -> Result<(), Failure> {
    let file = load_scenario(source, overrides)?;
    let table = classify_all(&file, configurations)?;
    if format == Some(Format::Json) {
        return print_json(&table);
    }
    for at in &table {
        say!("q = {:?}", at.q);
        for p in &at.pairs {
            match p {
                PairOutcome::Classified(r) => say!(
                    "  {:<16} {:<16} {:<12} angle {:.4} rad",
                    r.pair.0,
                    r.pair.1,
                    format!("{:?}", r.classification).to_lowercase(),
                    r.gradient_angle
                ),
                PairOutcome::Failed { pair, error } => say!("  {:<16} {:<16} {error}", pair.0, pair.1),
            }
        }
    }
    Ok(())
}

fn cmd_gamma_select(source: &str, overrides: &[String], seed: Option<u64>) -> Result<(), Failure> {
    let file = load_scenario(source, overrides)?;
    let result = file.gamma_selection(seed)?;
    print_json(&result)?;
    if result.feasible {
        Ok(())
    } else {
        Err(Failure::Solver("no gain on the grid keeps the sampled boundaries feasible".into()))
    }
}

fn cmd_verify(suite: SuiteArg, seed: u64, format: Option<Format>) -> Result<(), Failure> {
    let suite = match suite {
        SuiteArg::Fast => Suite::Fast,
        SuiteArg::Full => Suite::Full,
    };
    let start = Instant::now();
    let report = run_suite(suite, seed)?;
    let secs = start.elapsed().as_secs_f64();
    if format == Some(Format::Json) {
        print_json(&json!({ "report": report, "runtime_s": secs }))?;
    } else {
        for r in &report.results {
            say!("{r}");
        }
        let passed = report.results.iter().filter(|r| r.passed).count();
        say!(
            "{passed}/{} criteria passed ({:?} suite, seed {seed}) in {secs:.1} s",
            report.results.len(),
            suite
        );
    }
    if report.all_passed() {
        Ok(())
    } else {
        Err(Failure::Acceptance)
    }
}
