use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cgmodel::Priority;
use crate::domains::ToolCallReport;
use crate::policy::{PolicyKind, PolicySpec};
use crate::units::to_mib;

pub const LATENCY_DEFINITION: &str = "per allocation request (one per tick with positive demand growth): \
virtual time from request to successful charge, including throttle delay, budget stall and contention";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    Throttle,
    Freeze,
    Thaw,
    Feedback,
    Kill,
}

/// Policy action log entry. Consecutive throttles of one workload are
/// collapsed into a single entry with a count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineEvent {
    pub t_ms: f64,
    pub workload: String,
    pub kind: EventKind,
    pub reason: String,
    pub count: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LatencyStats {
    pub count: usize,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub mean_ms: f64,
    pub max_ms: f64,
}

/// Nearest-rank percentile of an ascending slice; 0 when empty.
pub fn nearest_rank(sorted: &[u64], p: f64) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64 - 1e-9).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

impl LatencyStats {
    pub fn from_us(samples: &[u64]) -> Self {
        if samples.is_empty() {
            return LatencyStats::default();
        }
        let mut s = samples.to_vec();
        s.sort_unstable();
        let ms = |us: u64| us as f64 / 1000.0;
        LatencyStats {
            count: s.len(),
            p50_ms: ms(nearest_rank(&s, 50.0)),
            p95_ms: ms(nearest_rank(&s, 95.0)),
            mean_ms: s.iter().sum::<u64>() as f64 / s.len() as f64 / 1000.0,
            max_ms: ms(*s.last().unwrap()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadMetrics {
    pub name: String,
    pub priority: Priority,
    pub completed: bool,
    pub oom_killed: bool,
    pub completion_ms: Option<f64>,
    pub wall_equiv_completion_ms: Option<f64>,
    pub solo_ms: f64,
    /// `(completion - solo) / solo`; absent when the workload did not finish.
    pub overhead_frac: Option<f64>,
    pub requests: u64,
    pub delay_triggers: u64,
    pub throttle_ms: f64,
    pub stall_ms: f64,
    pub feedback_retries: u64,
    pub latency: LatencyStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayMetrics {
    pub survival_rate: f64,
    pub completed: usize,
    pub total: usize,
    pub latency: BTreeMap<Priority, LatencyStats>,
    pub latency_all: LatencyStats,
    pub delay_trigger_count: u64,
    pub freeze_count: u64,
    pub feedback_count: u64,
    pub kill_count: u64,
    pub peak_global_usage: u64,
    pub virtual_duration_ms: f64,
    pub wall_equiv_duration_ms: f64,
    pub workloads: Vec<WorkloadMetrics>,
}

impl ReplayMetrics {
    pub fn latency_of(&self, p: Priority) -> LatencyStats {
        self.latency.get(&p).copied().unwrap_or_default()
    }

    pub fn workload(&self, name: &str) -> Option<&WorkloadMetrics> {
        self.workloads.iter().find(|w| w.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportHeader {
    pub policy: PolicySpec,
    pub physical_budget: u64,
    pub acceleration: f64,
    pub tick_ms: u64,
    pub high_watermark: f64,
    pub contention_slope_ms_per_mb: f64,
    pub stall_timeout_ms: u64,
    pub seed: u64,
    pub time_base: String,
    pub latency_definition: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub header: ReportHeader,
    pub metrics: ReplayMetrics,
    pub tool_calls: Vec<ToolCallReport>,
    pub events: Vec<EngineEvent>,
}

impl ReplayReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn policy(&self) -> PolicyKind {
        self.header.policy.kind
    }

    pub fn csv_rows(&self) -> Vec<WorkloadCsvRow> {
        let policy = self.policy().short_name().to_string();
        let mut rows: Vec<WorkloadCsvRow> = self
            .metrics
            .workloads
            .iter()
            .map(|w| WorkloadCsvRow {
                policy: policy.clone(),
                workload: w.name.clone(),
                priority: format!("{:?}", w.priority),
                completed: u64::from(w.completed),
                oom_killed: u64::from(w.oom_killed),
                completion_ms: w.completion_ms,
                solo_ms: Some(w.solo_ms),
                overhead_frac: w.overhead_frac,
                survival_rate: None,
                requests: w.requests,
                p50_ms: w.latency.p50_ms,
                p95_ms: w.latency.p95_ms,
                delay_triggers: w.delay_triggers,
                throttle_ms: w.throttle_ms,
                stall_ms: w.stall_ms,
                feedback_retries: w.feedback_retries,
            })
            .collect();
        let m = &self.metrics;
        let overall = m.latency_all;
        rows.push(WorkloadCsvRow {
            policy,
            workload: "ALL".into(),
            priority: String::new(),
            completed: m.completed as u64,
            oom_killed: m.workloads.iter().filter(|w| w.oom_killed).count() as u64,
            completion_ms: Some(m.virtual_duration_ms),
            solo_ms: None,
            overhead_frac: None,
            survival_rate: Some(m.survival_rate),
            requests: m.workloads.iter().map(|w| w.requests).sum(),
            p50_ms: overall.p50_ms,
            p95_ms: overall.p95_ms,
            delay_triggers: m.delay_trigger_count,
            throttle_ms: m.workloads.iter().map(|w| w.throttle_ms).sum(),
            stall_ms: m.workloads.iter().map(|w| w.stall_ms).sum(),
            feedback_retries: m.feedback_count,
        });
        rows
    }

    pub fn summary_row(&self, source: &str) -> SummaryCsvRow {
        let m = &self.metrics;
        let hi = m.latency_of(Priority::High);
        let lo = m.latency_of(Priority::Low);
        SummaryCsvRow {
            source: source.to_string(),
            policy: self.policy().short_name().to_string(),
            survival_rate: m.survival_rate,
            kills: m.kill_count,
            high_p50_ms: hi.p50_ms,
            high_p95_ms: hi.p95_ms,
            low_p50_ms: lo.p50_ms,
            low_p95_ms: lo.p95_ms,
            delay_triggers: m.delay_trigger_count,
            freezes: m.freeze_count,
            feedbacks: m.feedback_count,
            peak_global_mb: to_mib(m.peak_global_usage),
            max_high_overhead: m
                .workloads
                .iter()
                .filter(|w| w.priority == Priority::High)
                .filter_map(|w| w.overhead_frac)
                .fold(None, |a: Option<f64>, x| Some(a.map_or(x, |a| a.max(x)))),
        }
    }

    /// Short human-readable summary.
    pub fn summary(&self) -> String {
        let m = &self.metrics;
        let mut s = format!(
            "policy {}: {}/{} workloads completed (survival {:.1}%), kills {}, throttles {}, freezes {}, feedback {}\n",
            self.policy().short_name(),
            m.completed,
            m.total,
            m.survival_rate * 100.0,
            m.kill_count,
            m.delay_trigger_count,
            m.freeze_count,
            m.feedback_count
        );
        for (p, l) in &m.latency {
            s += &format!("  {:?} latency: n={} p50={:.3} ms p95={:.3} ms\n", p, l.count, l.p50_ms, l.p95_ms);
        }
        for w in &m.workloads {
            let status = if w.completed { "completed" } else { "killed" };
            let over = w.overhead_frac.map_or(String::from("-"), |o| format!("{:+.2}%", o * 100.0));
            s += &format!("  {} [{:?}] {} overhead {}\n", w.name, w.priority, status, over);
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadCsvRow {
    pub policy: String,
    pub workload: String,
    pub priority: String,
    pub completed: u64,
    pub oom_killed: u64,
    pub completion_ms: Option<f64>,
    pub solo_ms: Option<f64>,
    pub overhead_frac: Option<f64>,
    pub survival_rate: Option<f64>,
    pub requests: u64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub delay_triggers: u64,
    pub throttle_ms: f64,
    pub stall_ms: f64,
    pub feedback_retries: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryCsvRow {
    pub source: String,
    pub policy: String,
    pub survival_rate: f64,
    pub kills: u64,
    pub high_p50_ms: f64,
    pub high_p95_ms: f64,
    pub low_p50_ms: f64,
    pub low_p95_ms: f64,
    pub delay_triggers: u64,
    pub freezes: u64,
    pub feedbacks: u64,
    pub peak_global_mb: f64,
    pub max_high_overhead: Option<f64>,
}

/// Candidate policy measured against the first policy of a comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyDelta {
    pub baseline: PolicyKind,
    pub candidate: PolicyKind,
    pub survival_delta: f64,
    /// `1 - candidate/baseline` of HIGH P95; absent when the baseline is 0.
    pub high_p95_reduction: Option<f64>,
    pub low_p95_reduction: Option<f64>,
    pub kill_delta: i64,
    pub delay_trigger_delta: i64,
}

fn reduction(base: f64, cand: f64) -> Option<f64> {
    (base > 0.0).then(|| 1.0 - cand / base)
}

impl PolicyDelta {
    pub fn between(base: &ReplayReport, cand: &ReplayReport) -> Self {
        let (b, c) = (&base.metrics, &cand.metrics);
        PolicyDelta {
            baseline: base.policy(),
            candidate: cand.policy(),
            survival_delta: c.survival_rate - b.survival_rate,
            high_p95_reduction: reduction(b.latency_of(Priority::High).p95_ms, c.latency_of(Priority::High).p95_ms),
            low_p95_reduction: reduction(b.latency_of(Priority::Low).p95_ms, c.latency_of(Priority::Low).p95_ms),
            kill_delta: c.kill_count as i64 - b.kill_count as i64,
            delay_trigger_delta: c.delay_trigger_count as i64 - b.delay_trigger_count as i64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub runs: Vec<ReplayReport>,
    pub deltas: Vec<PolicyDelta>,
}

impl ComparisonReport {
    pub fn run(&self, kind: PolicyKind) -> Option<&ReplayReport> {
        self.runs.iter().find(|r| r.policy() == kind)
    }

    pub fn summary(&self) -> String {
        let mut s: String = self.runs.iter().map(|r| r.summary()).collect();
        for d in &self.deltas {
            let pct = |x: Option<f64>| x.map_or(String::from("n/a"), |v| format!("{:.1}%", v * 100.0));
            s += &format!(
                "{} vs {}: survival {:+.1} pts, HIGH P95 reduction {}, LOW P95 reduction {}\n",
                d.candidate.short_name(),
                d.baseline.short_name(),
                d.survival_delta * 100.0,
                pct(d.high_p95_reduction),
                pct(d.low_p95_reduction)
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank_percentiles() {
        let v: Vec<u64> = (1..=100).collect();
        assert_eq!(nearest_rank(&v, 95.0), 95);
        assert_eq!(nearest_rank(&v, 50.0), 50);
        assert_eq!(nearest_rank(&[7], 95.0), 7);
        assert_eq!(nearest_rank(&[], 95.0), 0);
        assert_eq!(nearest_rank(&[1, 2, 3], 100.0), 3);
    }

    #[test]
    fn latency_stats_in_ms() {
        let l = LatencyStats::from_us(&[0, 0, 2_000_000, 1000]);
        assert_eq!(l.count, 4);
        assert_eq!(l.p50_ms, 0.0);
        assert_eq!(l.max_ms, 2000.0);
        assert_eq!(LatencyStats::from_us(&[]), LatencyStats::default());
    }

    #[test]
    fn reduction_undefined_for_zero_baseline() {
        assert_eq!(reduction(0.0, 1.0), None);
        assert_eq!(reduction(2.0, 0.5), Some(0.75));
    }
}
