//! `agentcg` command-line front end.
//!
//! Every subcommand writes its machine-readable result to `--out` and a
//! short summary to stdout. Without `--out` the result itself goes to
//! stdout. Exit codes: 0 on success (including replays in which workloads
//! were killed), 1 on input or configuration errors, 2 on usage errors.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use agentcg::analyzer::{analyze_dataset, analyze_task, AnalyzeConfig, DatasetReport, TaskCsvRow, TaskReport};
use agentcg::engine::{replay, run_comparison, ComparisonReport, ReplayReport, Scenario};
use agentcg::policy::PolicyKind;
use agentcg::trace::{parse_trace, serialize_trace, synthesize_trace, SynthParams, TaskTrace};
use agentcg::units::MIB;
use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "agentcg", version, about = "cgroup v2 memory governance simulator for agent traces")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Subcommand)]
enum Cmd {
    /// Characterize trace files (runs in parallel across files).
    Analyze {
        #[arg(required = true)]
        traces: Vec<PathBuf>,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// json: per-task reports plus a dataset aggregate; csv: one row per task.
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
        /// Samples at or above this many MiB count as bursts.
        #[arg(long, default_value_t = 300.0)]
        burst_threshold_mb: f64,
    },
    /// Generate a trace from a JSON parameter file.
    Synth {
        params: PathBuf,
        /// Overrides the seed in the parameter file.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Replay a scenario under its configured policy.
    Replay {
        scenario: PathBuf,
        /// Overrides the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// json: full report; csv: one row per workload plus an aggregate row.
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
    },
    /// Replay a scenario once per policy and report paired metrics.
    Compare {
        scenario: PathBuf,
        /// Comma-separated policies; the first one is the baseline for deltas.
        #[arg(long, value_delimiter = ',', default_value = "static,graduated")]
        policies: Vec<PolicyKind>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
    },
    /// Summarize replay or comparison JSON files into one CSV row per run.
    Report {
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Analyze { traces, out, format, burst_threshold_mb } => {
            analyze(&traces, out.as_deref(), format, burst_threshold_mb)
        }
        Cmd::Synth { params, seed, out } => synth(&params, seed, out.as_deref()),
        Cmd::Replay { scenario, seed, out, format } => {
            let sc = load_scenario(&scenario, seed)?;
            let r = replay(&sc)?;
            let body = match format {
                Format::Json => r.to_json() + "\n",
                Format::Csv => to_csv(&r.csv_rows())?,
            };
            emit(out.as_deref(), &body, || r.summary())
        }
        Cmd::Compare { scenario, policies, seed, out, format } => {
            let sc = load_scenario(&scenario, seed)?;
            let c = run_comparison(&sc, &policies)?;
            let body = match format {
                Format::Json => serde_json::to_string_pretty(&c)? + "\n",
                Format::Csv => to_csv(&c.runs.iter().flat_map(ReplayReport::csv_rows).collect::<Vec<_>>())?,
            };
            emit(out.as_deref(), &body, || c.summary())
        }
        Cmd::Report { metrics, out } => report(&metrics, out.as_deref()),
    }
}

/// Writes `body` to `out` and prints the summary, or prints `body` alone.
fn emit(out: Option<&Path>, body: &str, summary: impl FnOnce() -> String) -> Result<()> {
    match out {
        Some(p) => {
            fs::write(p, body).with_context(|| format!("writing {}", p.display()))?;
            print!("{}", summary());
        }
        None => std::io::stdout().write_all(body.as_bytes())?,
    }
    Ok(())
}

fn to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

fn read_trace(p: &Path) -> Result<TaskTrace> {
    let bytes = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
    parse_trace(&bytes).with_context(|| format!("parsing {}", p.display()))
}

#[derive(Serialize)]
struct AnalyzeOutput<'a> {
    tasks: &'a [TaskReport],
    dataset: DatasetReport,
}

fn analyze(paths: &[PathBuf], out: Option<&Path>, format: Format, threshold_mb: f64) -> Result<()> {
    if !(threshold_mb.is_finite() && threshold_mb > 0.0) {
        bail!("--burst-threshold-mb must be positive");
    }
    let cfg = AnalyzeConfig { burst_threshold_bytes: threshold_mb * MIB as f64, ..AnalyzeConfig::default() };
    let traces: Vec<TaskTrace> = paths.par_iter().map(|p| read_trace(p)).collect::<Result<_>>()?;
    let reports: Vec<TaskReport> = traces.par_iter().map(|t| analyze_task(t, &cfg)).collect();
    let refs: Vec<&TaskTrace> = traces.iter().collect();
    let dataset = analyze_dataset(&refs, &reports);
    let summary = || {
        let mut s = String::new();
        for r in &reports {
            s += &format!(
                "{}: peak {:.1} MiB, mean {:.1} MiB, peak/avg {}, retry groups {}\n",
                r.task_id,
                r.peak_mb,
                r.mean_mb,
                r.peak_to_avg.map_or("-".into(), |v| format!("{v:.2}")),
                r.retry_groups.len()
            );
        }
        s += &format!(
            "{} tasks, tool-attributed bursts {:.1}%\n",
            dataset.tasks,
            dataset.pooled_tool_burst_frac * 100.0
        );
        s
    };
    let body = match format {
        Format::Json => {
            serde_json::to_string_pretty(&AnalyzeOutput { tasks: &reports, dataset: dataset.clone() })? + "\n"
        }
        Format::Csv => to_csv(&reports.iter().map(TaskCsvRow::from).collect::<Vec<_>>())?,
    };
    emit(out, &body, summary)
}

fn synth(params: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<()> {
    let text = fs::read_to_string(params).with_context(|| format!("reading {}", params.display()))?;
    let mut p: SynthParams = serde_json::from_str(&text).with_context(|| format!("parsing {}", params.display()))?;
    if let Some(s) = seed {
        p.seed = s;
    }
    let t = synthesize_trace(&p)?;
    emit(out, &serialize_trace(&t), || {
        format!(
            "{}: {} samples, {} tool calls, peak {:.1} MiB over {} ms\n",
            t.task_id(),
            t.samples().len(),
            t.tool_calls().len(),
            t.peak_bytes() as f64 / MIB as f64,
            t.total_ms()
        )
    })
}

fn load_scenario(path: &Path, seed: Option<u64>) -> Result<Scenario> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut sc: Scenario = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if let Some(s) = seed {
        sc.seed = s;
    }
    sc.resolve(path.parent().unwrap_or(Path::new(".")))?;
    sc.validate()?;
    Ok(sc)
}

fn report(paths: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let mut rows = Vec::new();
    for p in paths {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        let source = p.display().to_string();
        if let Ok(c) = serde_json::from_str::<ComparisonReport>(&text) {
            rows.extend(c.runs.iter().map(|r| r.summary_row(&source)));
        } else {
            let r: ReplayReport = serde_json::from_str(&text)
                .with_context(|| format!("{} is neither a replay nor a comparison report", p.display()))?;
            rows.push(r.summary_row(&source));
        }
    }
    let body = to_csv(&rows)?;
    emit(out, &body, || format!("{} runs summarized\n", rows.len()))
}
