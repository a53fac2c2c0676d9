//! Characterization metrics over agent task traces: phase breakdown,
//! burstiness, burst attribution to tool calls, change rates, retry loops,
//! CPU/memory coupling and cross-task variance.
//!
//! Every function here is pure over an immutable [`TaskTrace`].

use std::collections::BTreeMap;

use serde::Serialize;

use crate::trace::{BashCategory, TaskTrace, ToolCallEvent, ToolType};
use crate::units::{to_mib, MIB};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AnalyzerError {
    #[error("trace has no samples")]
    Empty,
    #[error("mean memory is zero")]
    ZeroMean,
    #[error("trace duration is zero")]
    ZeroDuration,
    #[error("need at least {need} {what}, got {got}")]
    TooFew { what: &'static str, need: usize, got: usize },
    #[error("threshold must be positive")]
    InvalidThreshold,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PhaseShares {
    pub init_frac: f64,
    pub tool_frac: f64,
    pub llm_frac: f64,
}

pub fn phase_breakdown(trace: &TaskTrace) -> Result<PhaseShares, AnalyzerError> {
    let total = trace.total_ms();
    if total == 0 {
        return Err(AnalyzerError::ZeroDuration);
    }
    let tool_ms: u64 = trace.tool_calls().iter().map(ToolCallEvent::duration_ms).sum();
    let init_frac = trace.init_end_ms() as f64 / total as f64;
    let tool_frac = tool_ms as f64 / total as f64;
    // Tool calls never overlap and start after init, so the remainder is >= 0
    // up to rounding.
    let llm_frac = (1.0 - init_frac - tool_frac).max(0.0);
    Ok(PhaseShares { init_frac, tool_frac, llm_frac })
}

pub fn peak_to_avg(trace: &TaskTrace) -> Result<f64, AnalyzerError> {
    let s = trace.samples();
    if s.is_empty() {
        return Err(AnalyzerError::Empty);
    }
    let peak = s.iter().map(|x| x.mem_bytes).max().unwrap_or(0) as f64;
    let mean = s.iter().map(|x| x.mem_bytes as f64).sum::<f64>() / s.len() as f64;
    if mean == 0.0 {
        return Err(AnalyzerError::ZeroMean);
    }
    Ok(peak / mean)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BurstAttribution {
    pub tool_time_frac: f64,
    pub tool_burst_frac: f64,
    pub burst_count: usize,
}

/// A burst is a post-init sample with `mem >= threshold_bytes`. With no
/// bursts both fractions are reported as 0.
pub fn burst_attribution(trace: &TaskTrace, threshold_bytes: f64) -> Result<BurstAttribution, AnalyzerError> {
    if threshold_bytes.is_nan() || threshold_bytes <= 0.0 {
        return Err(AnalyzerError::InvalidThreshold);
    }
    let mut n = 0usize;
    let mut in_tool = 0usize;
    let mut bursts = 0usize;
    let mut tool_bursts = 0usize;
    for s in trace.samples().iter().filter(|s| s.ts_ms >= trace.init_end_ms()) {
        n += 1;
        let inside = trace.call_at(s.ts_ms).is_some();
        in_tool += inside as usize;
        if s.mem_bytes as f64 >= threshold_bytes {
            bursts += 1;
            tool_bursts += inside as usize;
        }
    }
    let frac = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(BurstAttribution {
        tool_time_frac: frac(in_tool, n),
        tool_burst_frac: frac(tool_bursts, bursts),
        burst_count: bursts,
    })
}

/// Signed memory-rate histogram in MiB/s. `counts[i]` holds rates in
/// `[edges[i-1], edges[i])`, with open-ended first and last bins.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateHistogram {
    pub edges_mb_s: Vec<f64>,
    pub counts: Vec<usize>,
}

const RATE_EDGES_MB_S: [f64; 10] = [-1000.0, -500.0, -100.0, -50.0, -10.0, 10.0, 50.0, 100.0, 500.0, 1000.0];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChangeRateStats {
    pub cpu_burst_frac: f64,
    pub mem_burst_frac: f64,
    /// Bytes per second.
    pub max_mem_rate: f64,
    pub histogram: RateHistogram,
}

/// Per-interval rates; an interval is a burst when `|rate| >= threshold`.
pub fn change_rate_stats(
    trace: &TaskTrace,
    cpu_thr_pct_s: f64,
    mem_thr_bytes_s: f64,
) -> Result<ChangeRateStats, AnalyzerError> {
    let s = trace.samples();
    if s.len() < 2 {
        return Err(AnalyzerError::TooFew { what: "samples", need: 2, got: s.len() });
    }
    let mut counts = vec![0usize; RATE_EDGES_MB_S.len() + 1];
    let (mut cpu_b, mut mem_b) = (0usize, 0usize);
    let mut max_rate = 0.0f64;
    for w in s.windows(2) {
        let dt = (w[1].ts_ms - w[0].ts_ms) as f64 / 1000.0;
        let mem_rate = (w[1].mem_bytes as f64 - w[0].mem_bytes as f64) / dt;
        let cpu_rate = (w[1].cpu_pct - w[0].cpu_pct) / dt;
        mem_b += (mem_rate.abs() >= mem_thr_bytes_s) as usize;
        cpu_b += (cpu_rate.abs() >= cpu_thr_pct_s) as usize;
        max_rate = max_rate.max(mem_rate.abs());
        let mb_s = mem_rate / MIB as f64;
        counts[RATE_EDGES_MB_S.partition_point(|e| *e <= mb_s)] += 1;
    }
    let intervals = (s.len() - 1) as f64;
    Ok(ChangeRateStats {
        cpu_burst_frac: cpu_b as f64 / intervals,
        mem_burst_frac: mem_b as f64 / intervals,
        max_mem_rate: max_rate,
        histogram: RateHistogram { edges_mb_s: RATE_EDGES_MB_S.to_vec(), counts },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetryGroup {
    pub command: String,
    /// Position of the first call within the task's Bash-call sequence.
    pub start_index: usize,
    pub length: usize,
    pub retained_mb: f64,
}

pub const MIN_RETRY_GROUP: usize = 3;

/// Collapses whitespace and drops trailing shell redirections
/// (`> out.log`, `2>&1`, `>>log`, ...).
pub fn normalize_command(cmd: &str) -> String {
    let toks: Vec<&str> = cmd.split_whitespace().collect();
    let mut end = toks.len();
    loop {
        if end >= 1 && is_attached_redirect(toks[end - 1]) {
            end -= 1;
        } else if end >= 2 && is_redirect_op(toks[end - 2]) {
            end -= 2;
        } else {
            break;
        }
    }
    toks[..end].join(" ")
}

fn split_redirect(tok: &str) -> Option<&str> {
    let rest = tok.strip_prefix('&').unwrap_or_else(|| tok.trim_start_matches(|c: char| c.is_ascii_digit()));
    rest.strip_prefix(">>").or_else(|| rest.strip_prefix('>')).or_else(|| rest.strip_prefix('<'))
}

fn is_redirect_op(tok: &str) -> bool {
    split_redirect(tok) == Some("")
}

fn is_attached_redirect(tok: &str) -> bool {
    matches!(split_redirect(tok), Some(target) if !target.is_empty())
}

/// Maximal runs of at least three consecutive Bash calls with the same
/// normalized command and category Test. Non-Bash calls do not break a run.
pub fn detect_retry_groups(calls: &[ToolCallEvent], trace: &TaskTrace) -> Vec<RetryGroup> {
    let bash: Vec<(usize, &ToolCallEvent)> =
        calls.iter().enumerate().filter(|(_, c)| c.tool_type == ToolType::Bash).collect();
    let key = |c: &ToolCallEvent| -> Option<String> {
        (c.category == Some(BashCategory::Test)).then(|| normalize_command(c.command.as_deref().unwrap_or("")))
    };

    let mut groups = Vec::new();
    let mut i = 0;
    while i < bash.len() {
        let Some(k) = key(bash[i].1) else {
            i += 1;
            continue;
        };
        let mut j = i + 1;
        while j < bash.len() && key(bash[j].1).as_deref() == Some(k.as_str()) {
            j += 1;
        }
        if j - i >= MIN_RETRY_GROUP {
            let first = bash[i].0;
            let last = bash[j - 1].0;
            let before = gap_baseline(trace, calls, first, true);
            let after = gap_baseline(trace, calls, last, false);
            groups.push(RetryGroup {
                command: k,
                start_index: i,
                length: j - i,
                retained_mb: to_mib(after) - to_mib(before),
            });
        }
        i = j;
    }
    groups
}

/// Minimum memory in the idle gap just before (or after) call `idx`.
fn gap_baseline(trace: &TaskTrace, calls: &[ToolCallEvent], idx: usize, before: bool) -> u64 {
    let (from, to) = if before {
        let from = idx.checked_sub(1).map_or(trace.init_end_ms(), |p| calls[p].end_ms);
        (from.min(calls[idx].start_ms), calls[idx].start_ms)
    } else {
        let to = calls.get(idx + 1).map_or(trace.total_ms(), |n| n.start_ms);
        (calls[idx].end_ms, to.max(calls[idx].end_ms))
    };
    let edge = |t: u64| trace.demand_at(t.min(trace.total_ms())).unwrap_or(0);
    trace
        .samples()
        .iter()
        .filter(|s| s.ts_ms > from && s.ts_ms < to)
        .map(|s| s.mem_bytes)
        .chain([edge(from), edge(to)])
        .min()
        .unwrap_or(0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", content = "r", rename_all = "snake_case")]
pub enum Correlation {
    Defined(f64),
    NoVariance,
}

impl Correlation {
    pub fn value(self) -> Option<f64> {
        match self {
            Correlation::Defined(r) => Some(r),
            Correlation::NoVariance => None,
        }
    }
}

/// Pearson correlation of per-sample CPU and memory.
pub fn cpu_mem_correlation(trace: &TaskTrace) -> Result<Correlation, AnalyzerError> {
    let s = trace.samples();
    if s.len() < 2 {
        return Err(AnalyzerError::TooFew { what: "samples", need: 2, got: s.len() });
    }
    let n = s.len() as f64;
    let mx = s.iter().map(|x| x.cpu_pct).sum::<f64>() / n;
    let my = s.iter().map(|x| x.mem_bytes as f64).sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for x in s {
        let dx = x.cpu_pct - mx;
        let dy = x.mem_bytes as f64 - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(Correlation::NoVariance);
    }
    Ok(Correlation::Defined((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)))
}

fn normalized_shares<K: Ord + Copy>(items: impl Iterator<Item = (K, u64)>) -> BTreeMap<K, f64> {
    let mut acc: BTreeMap<K, u64> = BTreeMap::new();
    for (k, d) in items {
        *acc.entry(k).or_default() += d;
    }
    let total: u64 = acc.values().sum();
    acc.into_iter().map(|(k, d)| (k, if total == 0 { 0.0 } else { d as f64 / total as f64 })).collect()
}

pub fn tool_time_shares(calls: &[ToolCallEvent]) -> BTreeMap<ToolType, f64> {
    normalized_shares(calls.iter().map(|c| (c.tool_type, c.duration_ms())))
}

pub fn bash_category_shares(calls: &[ToolCallEvent]) -> BTreeMap<BashCategory, f64> {
    normalized_shares(
        calls.iter().filter_map(|c| c.category.filter(|_| c.tool_type == ToolType::Bash).map(|k| (k, c.duration_ms()))),
    )
}

/// Rule-ordered classification of a Bash command line.
pub fn categorize_bash(command: &str) -> BashCategory {
    let names: Vec<&str> = command.split_whitespace().map(|t| t.rsplit('/').next().unwrap_or(t)).collect();
    let has = |set: &[&str]| names.iter().any(|n| set.contains(n));
    if has(&["pytest", "py.test", "unittest", "tox", "nosetests"]) {
        return BashCategory::Test;
    }
    if has(&["pip", "pip3", "poetry", "conda", "mamba", "uv"]) && has(&["install", "add"]) {
        return BashCategory::PackageInstall;
    }
    if names.iter().any(|n| n.starts_with("python")) {
        return BashCategory::PythonSnippet;
    }
    match names.first().copied() {
        Some("git") => BashCategory::Git,
        Some("ls" | "cat" | "find" | "grep" | "head" | "tail") => BashCategory::FileExploration,
        _ => BashCategory::Other,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CrossTaskStats {
    /// Population standard deviation over mean of per-task peaks.
    pub peak_cv: f64,
    pub min_peak_bytes: u64,
    pub max_peak_bytes: u64,
    pub mean_cpu_pct: f64,
}

pub fn cross_task_stats(traces: &[&TaskTrace]) -> Result<CrossTaskStats, AnalyzerError> {
    if traces.len() < 2 {
        return Err(AnalyzerError::TooFew { what: "traces", need: 2, got: traces.len() });
    }
    let peaks: Vec<f64> = traces.iter().map(|t| t.peak_bytes() as f64).collect();
    let n = peaks.len() as f64;
    let mean = peaks.iter().sum::<f64>() / n;
    let var = peaks.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / n;
    let cpus: Vec<f64> = traces
        .iter()
        .filter(|t| !t.samples().is_empty())
        .map(|t| t.samples().iter().map(|s| s.cpu_pct).sum::<f64>() / t.samples().len() as f64)
        .collect();
    Ok(CrossTaskStats {
        peak_cv: if mean == 0.0 { 0.0 } else { var.sqrt() / mean },
        min_peak_bytes: traces.iter().map(|t| t.peak_bytes()).min().unwrap_or(0),
        max_peak_bytes: traces.iter().map(|t| t.peak_bytes()).max().unwrap_or(0),
        mean_cpu_pct: if cpus.is_empty() { 0.0 } else { cpus.iter().sum::<f64>() / cpus.len() as f64 },
    })
}

/// Tool-call counts per tool type by execution-progress decile (call start
/// relative to total duration).
pub fn progress_histogram(trace: &TaskTrace) -> BTreeMap<ToolType, [u32; 10]> {
    let mut out: BTreeMap<ToolType, [u32; 10]> = BTreeMap::new();
    let total = trace.total_ms().max(1);
    for c in trace.tool_calls() {
        let decile = ((c.start_ms * 10 / total) as usize).min(9);
        out.entry(c.tool_type).or_insert([0; 10])[decile] += 1;
    }
    out
}

/// Thresholds used by [`analyze_task`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AnalyzeConfig {
    pub burst_threshold_bytes: f64,
    pub cpu_rate_thr_pct_s: f64,
    pub mem_rate_thr_bytes_s: f64,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        AnalyzeConfig {
            burst_threshold_bytes: (300 * MIB) as f64,
            cpu_rate_thr_pct_s: 20.0,
            mem_rate_thr_bytes_s: (50 * MIB) as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskReport {
    pub task_id: String,
    pub phase: Option<PhaseShares>,
    pub peak_mb: f64,
    pub mean_mb: f64,
    pub mean_cpu_pct: f64,
    pub peak_to_avg: Option<f64>,
    pub burst_attribution: BurstAttribution,
    pub change_rate: Option<ChangeRateStats>,
    pub retry_groups: Vec<RetryGroup>,
    pub cpu_mem_correlation: Option<Correlation>,
    pub tool_time_shares: BTreeMap<ToolType, f64>,
    pub bash_category_shares: BTreeMap<BashCategory, f64>,
    pub progress_histogram: BTreeMap<ToolType, [u32; 10]>,
}

pub fn analyze_task(trace: &TaskTrace, cfg: &AnalyzeConfig) -> TaskReport {
    let s = trace.samples();
    let n = s.len().max(1) as f64;
    TaskReport {
        task_id: trace.task_id().to_string(),
        phase: phase_breakdown(trace).ok(),
        peak_mb: to_mib(trace.peak_bytes()),
        mean_mb: s.iter().map(|x| to_mib(x.mem_bytes)).sum::<f64>() / n,
        mean_cpu_pct: s.iter().map(|x| x.cpu_pct).sum::<f64>() / n,
        peak_to_avg: peak_to_avg(trace).ok(),
        burst_attribution: burst_attribution(trace, cfg.burst_threshold_bytes).unwrap_or(BurstAttribution {
            tool_time_frac: 0.0,
            tool_burst_frac: 0.0,
            burst_count: 0,
        }),
        change_rate: change_rate_stats(trace, cfg.cpu_rate_thr_pct_s, cfg.mem_rate_thr_bytes_s).ok(),
        retry_groups: detect_retry_groups(trace.tool_calls(), trace),
        cpu_mem_correlation: cpu_mem_correlation(trace).ok(),
        tool_time_shares: tool_time_shares(trace.tool_calls()),
        bash_category_shares: bash_category_shares(trace.tool_calls()),
        progress_histogram: progress_histogram(trace),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetReport {
    pub tasks: usize,
    pub mean_tool_frac: Option<f64>,
    pub mean_peak_to_avg: Option<f64>,
    pub max_peak_to_avg: Option<f64>,
    /// Bursts inside tool windows over all bursts, pooled across tasks.
    pub pooled_tool_burst_frac: f64,
    pub pooled_tool_time_frac: f64,
    pub tasks_with_retry_groups_frac: f64,
    pub mean_retry_groups: f64,
    pub max_retry_length: usize,
    pub mean_cpu_mem_correlation: Option<f64>,
    pub cross_task: Option<CrossTaskStats>,
}

pub fn analyze_dataset(traces: &[&TaskTrace], reports: &[TaskReport]) -> DatasetReport {
    let mean = |v: Vec<f64>| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let n = reports.len().max(1) as f64;
    let total_bursts: usize = reports.iter().map(|r| r.burst_attribution.burst_count).sum();
    let tool_bursts: f64 =
        reports.iter().map(|r| r.burst_attribution.tool_burst_frac * r.burst_attribution.burst_count as f64).sum();
    DatasetReport {
        tasks: reports.len(),
        mean_tool_frac: mean(reports.iter().filter_map(|r| r.phase.map(|p| p.tool_frac)).collect()),
        mean_peak_to_avg: mean(reports.iter().filter_map(|r| r.peak_to_avg).collect()),
        max_peak_to_avg: reports.iter().filter_map(|r| r.peak_to_avg).reduce(f64::max),
        pooled_tool_burst_frac: if total_bursts == 0 { 0.0 } else { tool_bursts / total_bursts as f64 },
        pooled_tool_time_frac: reports.iter().map(|r| r.burst_attribution.tool_time_frac).sum::<f64>() / n,
        tasks_with_retry_groups_frac: reports.iter().filter(|r| !r.retry_groups.is_empty()).count() as f64 / n,
        mean_retry_groups: reports.iter().map(|r| r.retry_groups.len() as f64).sum::<f64>() / n,
        max_retry_length: reports.iter().flat_map(|r| r.retry_groups.iter().map(|g| g.length)).max().unwrap_or(0),
        mean_cpu_mem_correlation: mean(
            reports.iter().filter_map(|r| r.cpu_mem_correlation.and_then(Correlation::value)).collect(),
        ),
        cross_task: cross_task_stats(traces).ok(),
    }
}

/// One CSV row per task. Column order is part of the output contract.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskCsvRow {
    pub task_id: String,
    pub init_frac: Option<f64>,
    pub tool_frac: Option<f64>,
    pub llm_frac: Option<f64>,
    pub peak_mb: f64,
    pub mean_mb: f64,
    pub peak_to_avg: Option<f64>,
    pub tool_time_frac: f64,
    pub tool_burst_frac: f64,
    pub burst_count: usize,
    pub cpu_burst_frac: Option<f64>,
    pub mem_burst_frac: Option<f64>,
    pub max_mem_rate_mb_s: Option<f64>,
    pub retry_groups: usize,
    pub max_retry_length: usize,
    pub cpu_mem_corr: Option<f64>,
    pub mean_cpu_pct: f64,
}

impl From<&TaskReport> for TaskCsvRow {
    fn from(r: &TaskReport) -> Self {
        TaskCsvRow {
            task_id: r.task_id.clone(),
            init_frac: r.phase.map(|p| p.init_frac),
            tool_frac: r.phase.map(|p| p.tool_frac),
            llm_frac: r.phase.map(|p| p.llm_frac),
            peak_mb: r.peak_mb,
            mean_mb: r.mean_mb,
            peak_to_avg: r.peak_to_avg,
            tool_time_frac: r.burst_attribution.tool_time_frac,
            tool_burst_frac: r.burst_attribution.tool_burst_frac,
            burst_count: r.burst_attribution.burst_count,
            cpu_burst_frac: r.change_rate.as_ref().map(|c| c.cpu_burst_frac),
            mem_burst_frac: r.change_rate.as_ref().map(|c| c.mem_burst_frac),
            max_mem_rate_mb_s: r.change_rate.as_ref().map(|c| c.max_mem_rate / MIB as f64),
            retry_groups: r.retry_groups.len(),
            max_retry_length: r.retry_groups.iter().map(|g| g.length).max().unwrap_or(0),
            cpu_mem_corr: r.cpu_mem_correlation.and_then(Correlation::value),
            mean_cpu_pct: r.mean_cpu_pct,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::Sample;

    fn mb(ts_ms: u64, mb: u64) -> Sample {
        Sample { ts_ms, mem_bytes: mb * MIB, cpu_pct: 0.0 }
    }

    fn trace(samples: Vec<Sample>, calls: Vec<ToolCallEvent>, init: u64, total: u64) -> TaskTrace {
        TaskTrace::new("t", init, total, samples, calls).unwrap()
    }

    fn bash(start: u64, end: u64, cmd: &str) -> ToolCallEvent {
        ToolCallEvent::bash(start, end, cmd, categorize_bash(cmd))
    }

    #[test]
    fn phase_examples() {
        let calls = vec![
            ToolCallEvent::other(ToolType::Read, 30_000, 40_000),
            ToolCallEvent::other(ToolType::Edit, 50_000, 70_000),
        ];
        let p = phase_breakdown(&trace(vec![], calls, 30_000, 100_000)).unwrap();
        assert!((p.init_frac - 0.3).abs() < 1e-12);
        assert!((p.tool_frac - 0.3).abs() < 1e-12);
        assert!((p.llm_frac - 0.4).abs() < 1e-12);

        let p = phase_breakdown(&trace(vec![], vec![], 10, 100)).unwrap();
        assert_eq!(p.tool_frac, 0.0);

        let p = phase_breakdown(&trace(vec![], vec![], 100, 100)).unwrap();
        assert_eq!((p.init_frac, p.tool_frac, p.llm_frac), (1.0, 0.0, 0.0));
    }

    #[test]
    fn peak_to_avg_examples() {
        let t = trace(vec![mb(0, 100), mb(1000, 100), mb(2000, 300)], vec![], 0, 2000);
        assert!((peak_to_avg(&t).unwrap() - 1.8).abs() < 1e-12);
        let t = trace(vec![mb(0, 7), mb(1000, 7)], vec![], 0, 2000);
        assert_eq!(peak_to_avg(&t).unwrap(), 1.0);
        let t = trace(vec![], vec![], 0, 10);
        assert_eq!(peak_to_avg(&t), Err(AnalyzerError::Empty));
        let t = trace(vec![mb(0, 0)], vec![], 0, 10);
        assert_eq!(peak_to_avg(&t), Err(AnalyzerError::ZeroMean));
    }

    #[test]
    fn burst_attribution_counts_window_samples() {
        let samples = vec![mb(0, 185), mb(1000, 400), mb(2000, 185), mb(3000, 185)];
        let calls = vec![bash(500, 1500, "pytest")];
        let t = trace(samples, calls, 0, 3000);
        let b = burst_attribution(&t, (300 * MIB) as f64).unwrap();
        assert_eq!(b.burst_count, 1);
        assert_eq!(b.tool_burst_frac, 1.0);
        assert_eq!(b.tool_time_frac, 0.25);

        let b = burst_attribution(&t, (5000 * MIB) as f64).unwrap();
        assert_eq!((b.burst_count, b.tool_burst_frac), (0, 0.0));
        assert_eq!(burst_attribution(&t, f64::INFINITY).unwrap().burst_count, 0);
        assert!(burst_attribution(&t, 0.0).is_err());
    }

    #[test]
    fn burst_attribution_skips_init_samples() {
        let samples = vec![mb(0, 900), mb(1000, 900), mb(2000, 185)];
        let t = trace(samples, vec![], 1500, 3000);
        let b = burst_attribution(&t, (300 * MIB) as f64).unwrap();
        assert_eq!(b.burst_count, 0);
    }

    #[test]
    fn change_rate_magnitude_rule() {
        let t = trace(vec![mb(0, 100), mb(1000, 200), mb(2000, 150)], vec![], 0, 2000);
        let c = change_rate_stats(&t, 20.0, (50 * MIB) as f64).unwrap();
        assert_eq!(c.mem_burst_frac, 1.0);
        assert_eq!(c.cpu_burst_frac, 0.0);
        assert_eq!(c.max_mem_rate, (100 * MIB) as f64);
        assert_eq!(c.histogram.counts.iter().sum::<usize>(), 2);

        let flat = trace(vec![mb(0, 100), mb(1000, 100)], vec![], 0, 1000);
        let c = change_rate_stats(&flat, 20.0, (50 * MIB) as f64).unwrap();
        assert_eq!((c.cpu_burst_frac, c.mem_burst_frac, c.max_mem_rate), (0.0, 0.0, 0.0));

        let jump = trace(vec![mb(0, 0), mb(1000, 3072)], vec![], 0, 1000);
        let c = change_rate_stats(&jump, 20.0, (50 * MIB) as f64).unwrap();
        assert_eq!(c.max_mem_rate, (3072 * MIB) as f64);
    }

    fn calls_for(cmds: &[&str]) -> Vec<ToolCallEvent> {
        cmds.iter().enumerate().map(|(i, c)| bash(i as u64 * 1000, i as u64 * 1000 + 500, c)).collect()
    }

    #[test]
    fn retry_group_examples() {
        let calls = calls_for(&["pytest x", "pytest x", "pytest x", "ls"]);
        let t = trace(vec![mb(0, 185)], calls.clone(), 0, 10_000);
        let g = detect_retry_groups(&calls, &t);
        assert_eq!(g.len(), 1);
        assert_eq!((g[0].start_index, g[0].length), (0, 3));

        let calls = calls_for(&["pytest x", "pytest y", "pytest x"]);
        let t = trace(vec![mb(0, 185)], calls.clone(), 0, 10_000);
        assert!(detect_retry_groups(&calls, &t).is_empty());

        let cmds = vec!["pytest x"; 56];
        let calls = calls_for(&cmds);
        let t = trace(vec![mb(0, 185)], calls.clone(), 0, 100_000);
        let g = detect_retry_groups(&calls, &t);
        assert_eq!(g.len(), 1);
        assert_eq!(g[0].length, 56);
    }

    #[test]
    fn retry_groups_ignore_interleaved_edits_and_redirections() {
        let mut calls = vec![
            bash(0, 100, "pytest  tests/a.py"),
            ToolCallEvent::other(ToolType::Edit, 200, 300),
            bash(400, 500, "pytest tests/a.py 2>&1"),
            bash(600, 700, "pytest tests/a.py > out.log"),
        ];
        calls.push(bash(800, 900, "git status"));
        let t = trace(vec![mb(0, 185)], calls.clone(), 0, 1000);
        let g = detect_retry_groups(&calls, &t);
        assert_eq!(g.len(), 1);
        assert_eq!(g[0].command, "pytest tests/a.py");
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_command("  pytest   -x  tests "), "pytest -x tests");
        assert_eq!(normalize_command("pytest -x >> log.txt 2>&1"), "pytest -x");
        assert_eq!(normalize_command("pytest -x &>/dev/null"), "pytest -x");
        assert_eq!(normalize_command("pytest -x 2> err"), "pytest -x");
        assert_eq!(normalize_command("echo a>b c"), "echo a>b c");
    }

    #[test]
    fn correlation_examples() {
        let mk = |pairs: &[(f64, u64)]| {
            let s = pairs
                .iter()
                .enumerate()
                .map(|(i, (c, m))| Sample { ts_ms: i as u64 * 1000, mem_bytes: *m, cpu_pct: *c })
                .collect();
            trace(s, vec![], 0, 100_000)
        };
        let r = cpu_mem_correlation(&mk(&[(1.0, 2), (2.0, 4), (5.0, 10)])).unwrap();
        assert!((r.value().unwrap() - 1.0).abs() < 1e-12);
        let r = cpu_mem_correlation(&mk(&[(1.0, 9), (2.0, 8), (5.0, 5)])).unwrap();
        assert!((r.value().unwrap() + 1.0).abs() < 1e-12);
        let r = cpu_mem_correlation(&mk(&[(1.0, 3), (2.0, 1), (3.0, 2)])).unwrap();
        assert!((r.value().unwrap() + 0.5).abs() < 1e-12);
        let r = cpu_mem_correlation(&mk(&[(1.0, 3), (1.0, 1)])).unwrap();
        assert_eq!(r, Correlation::NoVariance);
        assert!(cpu_mem_correlation(&mk(&[(1.0, 3)])).is_err());
    }

    #[test]
    fn share_examples() {
        let calls = vec![bash(0, 90_000, "pytest"), ToolCallEvent::other(ToolType::Read, 90_000, 100_000)];
        let s = tool_time_shares(&calls);
        assert_eq!(s[&ToolType::Bash], 0.9);
        assert_eq!(s[&ToolType::Read], 0.1);
        assert_eq!(tool_time_shares(&calls[1..]), BTreeMap::from([(ToolType::Read, 1.0)]));
        assert!(tool_time_shares(&[]).is_empty());
        assert_eq!(bash_category_shares(&calls), BTreeMap::from([(BashCategory::Test, 1.0)]));
    }

    #[test]
    fn categorize_rules() {
        assert_eq!(categorize_bash("pytest tests/ -x"), BashCategory::Test);
        assert_eq!(categorize_bash("git status"), BashCategory::Git);
        assert_eq!(categorize_bash("python -m pytest -q"), BashCategory::Test);
        assert_eq!(categorize_bash("python -m unittest discover"), BashCategory::Test);
        assert_eq!(categorize_bash("tox -e py39"), BashCategory::Test);
        assert_eq!(categorize_bash("pip install -e ."), BashCategory::PackageInstall);
        assert_eq!(categorize_bash("python -m pip install numpy"), BashCategory::PackageInstall);
        assert_eq!(categorize_bash("python3 -c 'print(1)'"), BashCategory::PythonSnippet);
        assert_eq!(categorize_bash("grep -rn foo src"), BashCategory::FileExploration);
        assert_eq!(categorize_bash("cd repo && ls"), BashCategory::Other);
        assert_eq!(categorize_bash("make"), BashCategory::Other);
    }

    #[test]
    fn cross_task_examples() {
        let mk = |peak_mb: u64| trace(vec![mb(0, 50), mb(1000, peak_mb)], vec![], 0, 1000);
        let (a, b, c) = (mk(100), mk(200), mk(300));
        let st = cross_task_stats(&[&a, &b, &c]).unwrap();
        assert!((st.peak_cv - 0.408_248_290_463_863).abs() < 1e-9);
        assert_eq!((st.min_peak_bytes, st.max_peak_bytes), (100 * MIB, 300 * MIB));
        assert_eq!(cross_task_stats(&[&a, &a]).unwrap().peak_cv, 0.0);
        let lo = mk(197);
        let hi = mk(4096);
        let st = cross_task_stats(&[&lo, &hi]).unwrap();
        assert_eq!((st.min_peak_bytes, st.max_peak_bytes), (197 * MIB, 4096 * MIB));
        assert!(cross_task_stats(&[&a]).is_err());
    }

    #[test]
    fn progress_deciles() {
        let calls = vec![
            ToolCallEvent::other(ToolType::Read, 0, 10),
            ToolCallEvent::other(ToolType::Read, 150, 160),
            bash(950, 1000, "pytest"),
        ];
        let t = trace(vec![], calls, 0, 1000);
        let h = progress_histogram(&t);
        assert_eq!(h[&ToolType::Read][0], 1);
        assert_eq!(h[&ToolType::Read][1], 1);
        assert_eq!(h[&ToolType::Bash][9], 1);
    }
}
