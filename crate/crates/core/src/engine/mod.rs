//! Multi-tenant replay engine.
//!
//! A [`Scenario`] places several traces under one physical memory budget,
//! each in its own session cgroup, and replays them in virtual time under
//! one policy. Every allocation is charged through [`CgroupTree`], so limit
//! semantics come from the cgroup model and policy decisions from
//! [`crate::policy`].
//!
//! Acceleration only rescales the reported wall-clock equivalents; all
//! decisions are taken in virtual time.

mod report;
mod scenario;
mod sim;

use std::collections::BTreeMap;
use std::sync::Arc;

pub use report::{
    nearest_rank, ComparisonReport, EngineEvent, EventKind, LatencyStats, PolicyDelta, ReplayMetrics, ReplayReport,
    ReportHeader, SummaryCsvRow, WorkloadCsvRow, WorkloadMetrics, LATENCY_DEFINITION,
};
pub use scenario::{Scenario, WorkloadSpec};
pub use sim::RUNTIME_CAP_FACTOR;

use crate::cgmodel::{CgroupError, CgroupTree, Priority};
use crate::domains::DomainError;
use crate::policy::{PolicyKind, PolicySpec};
use crate::trace::{TaskTrace, TraceError};

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("i/o: {0}")]
    Io(String),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Cgroup(#[from] CgroupError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("replay did not terminate within {cap_ms} ms of virtual time")]
    NonTerminating { cap_ms: u64 },
}

/// Result of a replay together with the final cgroup tree, for callers that
/// need to inspect it.
pub struct ReplayRun {
    pub report: ReplayReport,
    pub final_tree: CgroupTree,
}

fn traces(sc: &Scenario) -> Result<Vec<Arc<TaskTrace>>, EngineError> {
    sc.workloads.iter().map(|w| w.trace(sc.seed)).collect()
}

/// Completion time of a trace replayed alone, with no limits and no
/// budget pressure.
pub fn solo_baseline(trace: Arc<TaskTrace>, tick_ms: u64) -> Result<u64, EngineError> {
    let w = WorkloadSpec::from_shared("solo", trace, Priority::Low);
    let mut sc = Scenario::new(u64::MAX, PolicySpec::new(PolicyKind::StaticLimits), vec![w]);
    sc.tick_ms = tick_ms;
    let out = sim::Sim::new(&sc, traces(&sc)?)?.run()?;
    Ok(out.workloads[0].completion_us.unwrap_or(0))
}

pub fn replay(sc: &Scenario) -> Result<ReplayReport, EngineError> {
    replay_full(sc).map(|r| r.report)
}

pub fn replay_full(sc: &Scenario) -> Result<ReplayRun, EngineError> {
    sc.validate()?;
    let ts = traces(sc)?;
    let mut solo = Vec::with_capacity(ts.len());
    for t in &ts {
        solo.push(solo_baseline(t.clone(), sc.tick_ms)?);
    }
    let out = sim::Sim::new(sc, ts)?.run()?;
    let ms = |us: u64| us as f64 / 1000.0;
    let accel = sc.acceleration;

    let mut by_prio: BTreeMap<Priority, Vec<u64>> = BTreeMap::new();
    let mut all = Vec::new();
    let workloads: Vec<WorkloadMetrics> = out
        .workloads
        .iter()
        .zip(&solo)
        .map(|(w, &solo_us)| {
            by_prio.entry(w.priority).or_default().extend(&w.latencies_us);
            all.extend(&w.latencies_us);
            let completion_ms = w.completion_us.map(ms);
            WorkloadMetrics {
                name: w.name.clone(),
                priority: w.priority,
                completed: w.completion_us.is_some(),
                oom_killed: w.oom_killed,
                completion_ms,
                wall_equiv_completion_ms: completion_ms.map(|c| c / accel),
                solo_ms: ms(solo_us),
                overhead_frac: w
                    .completion_us
                    .filter(|_| solo_us > 0)
                    .map(|c| (c as f64 - solo_us as f64) / solo_us as f64),
                requests: w.requests,
                delay_triggers: w.delay_triggers,
                throttle_ms: ms(w.throttle_us),
                stall_ms: ms(w.stall_us),
                feedback_retries: w.feedback_retries,
                latency: LatencyStats::from_us(&w.latencies_us),
            }
        })
        .collect();
    let completed = workloads.iter().filter(|w| w.completed).count();
    let metrics = ReplayMetrics {
        survival_rate: completed as f64 / workloads.len() as f64,
        completed,
        total: workloads.len(),
        latency: by_prio.iter().map(|(p, v)| (*p, LatencyStats::from_us(v))).collect(),
        latency_all: LatencyStats::from_us(&all),
        delay_trigger_count: out.delay_triggers,
        freeze_count: out.freezes,
        feedback_count: out.feedbacks,
        kill_count: out.kills,
        peak_global_usage: out.peak_global,
        virtual_duration_ms: ms(out.end_us),
        wall_equiv_duration_ms: ms(out.end_us) / accel,
        workloads,
    };
    let header = ReportHeader {
        policy: sc.policy,
        physical_budget: sc.physical_budget,
        acceleration: accel,
        tick_ms: sc.tick_ms,
        high_watermark: sc.high_watermark,
        contention_slope_ms_per_mb: sc.contention_slope_ms_per_mb,
        stall_timeout_ms: sc.stall_timeout_ms,
        seed: sc.seed,
        time_base: "virtual milliseconds; wall_equiv = virtual / acceleration".into(),
        latency_definition: LATENCY_DEFINITION.into(),
    };
    Ok(ReplayRun {
        report: ReplayReport { header, metrics, tool_calls: out.tool_calls, events: out.events },
        final_tree: out.final_tree,
    })
}

/// Replays the scenario once per policy kind, keeping every other policy
/// parameter. Deltas are taken against the first kind.
pub fn run_comparison(sc: &Scenario, kinds: &[PolicyKind]) -> Result<ComparisonReport, EngineError> {
    if kinds.len() < 2 {
        return Err(EngineError::Invalid("a comparison needs at least two policies".into()));
    }
    let runs = kinds
        .iter()
        .map(|&k| {
            let mut s = sc.clone();
            s.policy.kind = k;
            replay(&s)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let deltas = runs[1..].iter().map(|r| PolicyDelta::between(&runs[0], r)).collect();
    Ok(ComparisonReport { runs, deltas })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domains::ToolOutcome;
    use crate::trace::BashCategory;
    use crate::trace::{Sample, ToolCallEvent};
    use crate::units::{Limit, MIB};

    fn s(ts_ms: u64, mb: u64) -> Sample {
        Sample { ts_ms, mem_bytes: mb * MIB, cpu_pct: 10.0 }
    }

    /// Baseline 100 MB with one test call ramping to `peak_mb` at 5 s.
    fn burst(peak_mb: u64) -> TaskTrace {
        let samples = vec![s(0, 100), s(4000, 100), s(5000, peak_mb), s(6000, 100), s(10_000, 100)];
        let calls = vec![ToolCallEvent::bash(4000, 6000, "pytest", BashCategory::Test)];
        TaskTrace::new("b", 0, 10_000, samples, calls).unwrap()
    }

    fn wl(name: &str, peak_mb: u64, p: Priority) -> WorkloadSpec {
        WorkloadSpec::from_trace(name, burst(peak_mb), p)
    }

    fn scenario(budget_mb: u64, kind: PolicyKind, w: Vec<WorkloadSpec>) -> Scenario {
        Scenario::new(budget_mb * MIB, PolicySpec::new(kind), w)
    }

    #[test]
    fn uncontended_replay_is_identity() {
        for kind in PolicyKind::ALL {
            let r = replay(&scenario(1 << 20, kind, vec![wl("a", 500, Priority::Low)])).unwrap();
            let w = &r.metrics.workloads[0];
            assert_eq!(w.completion_ms, Some(10_000.0), "{kind}");
            assert_eq!(w.solo_ms, 10_000.0);
            assert_eq!(w.overhead_frac, Some(0.0));
            assert_eq!(w.latency.max_ms, 0.0);
            assert!(w.requests > 0);
            assert_eq!(r.metrics.survival_rate, 1.0);
            assert_eq!(r.metrics.peak_global_usage, 500 * MIB);
        }
    }

    #[test]
    fn solo_matches_trace_duration() {
        assert_eq!(solo_baseline(Arc::new(burst(300)), 10).unwrap(), 10_000_000);
        assert_eq!(solo_baseline(Arc::new(burst(300)), 7).unwrap(), 10_000_000);
    }

    #[test]
    fn tool_calls_get_domains() {
        let r = replay(&scenario(4096, PolicyKind::StaticLimits, vec![wl("a", 300, Priority::Low)])).unwrap();
        assert_eq!(r.tool_calls.len(), 1);
        let c = &r.tool_calls[0];
        assert_eq!(c.domain_name, "tool_0_4000");
        assert_eq!(c.outcome, ToolOutcome::Completed);
        assert_eq!(c.duration_ms, 2000);
        assert_eq!(c.peak_bytes, 200 * MIB);
    }

    #[test]
    fn session_max_kills_under_static() {
        let w = wl("a", 500, Priority::Low).with_limits(Limit::Unlimited, Limit::Bytes(400 * MIB), 0);
        let r = replay(&scenario(4096, PolicyKind::StaticLimits, vec![w])).unwrap();
        assert_eq!(r.metrics.kill_count, 1);
        assert!(r.metrics.workloads[0].oom_killed);
        assert_eq!(r.tool_calls[0].outcome, ToolOutcome::OomKilled);
        assert_eq!(r.events.last().unwrap().kind, EventKind::Kill);
    }

    #[test]
    fn predictive_uses_history_percentile() {
        let mut w = wl("a", 500, Priority::Low);
        w.history_peaks = vec![300 * MIB, 350 * MIB, 450 * MIB];
        let r = replay(&scenario(4096, PolicyKind::Predictive, vec![w.clone()])).unwrap();
        assert_eq!(r.metrics.kill_count, 1);
        w.history_peaks.push(600 * MIB);
        let r = replay(&scenario(4096, PolicyKind::Predictive, vec![w])).unwrap();
        assert_eq!(r.metrics.kill_count, 0);
    }

    #[test]
    fn stall_timeout_kills_under_baseline() {
        // Co-peaking 2 x 600 MB under a 1000 MB budget.
        let w = vec![wl("a", 600, Priority::Low), wl("b", 600, Priority::Low)];
        let r = replay(&scenario(1000, PolicyKind::StaticLimits, w)).unwrap();
        assert_eq!(r.metrics.kill_count, 1);
        assert_eq!(r.metrics.completed, 1);
        let survivor = r.metrics.workloads.iter().find(|w| w.completed).unwrap();
        assert!(survivor.stall_ms >= 10_000.0);
    }

    /// Ramps to `mb` in one second and holds it until 9 s.
    fn plateau(name: &str, mb: u64, p: Priority) -> WorkloadSpec {
        let samples = vec![s(0, 0), s(1000, mb), s(9000, mb), s(10_000, 0)];
        WorkloadSpec::from_trace(name, TaskTrace::new("p", 0, 10_000, samples, vec![]).unwrap(), p)
    }

    #[test]
    fn reactive_kills_lowest_priority() {
        let w = vec![plateau("hi", 500, Priority::High), plateau("lo", 480, Priority::Low)];
        let r = replay(&scenario(1000, PolicyKind::ReactiveUserSpace, w)).unwrap();
        let lo = r.metrics.workload("lo").unwrap();
        let hi = r.metrics.workload("hi").unwrap();
        assert!(lo.oom_killed);
        assert!(hi.completed);
        let kill = r.events.iter().find(|e| e.kind == EventKind::Kill).unwrap();
        // decided once the 1 s window mean crosses 0.95, executed 50 ms later
        assert!(kill.t_ms >= 1050.0 && kill.t_ms < 2100.0, "{}", kill.t_ms);
        assert_eq!(r.metrics.kill_count, 1);
    }

    #[test]
    fn graduated_freeze_without_deficit_is_lifted() {
        // 150 MB over memory.high with plenty of budget: throttled, frozen,
        // thawed, never killed.
        let w = wl("a", 400, Priority::Low).with_limits(Limit::Bytes(250 * MIB), Limit::Unlimited, 0);
        let r = replay(&scenario(4096, PolicyKind::GraduatedInKernel, vec![w])).unwrap();
        assert_eq!(r.metrics.kill_count, 0);
        assert!(r.metrics.freeze_count >= 1);
        assert!(r.events.iter().any(|e| e.kind == EventKind::Thaw));
        assert!(r.metrics.workloads[0].completed);
    }

    #[test]
    fn comparison_deltas_match_separate_replays() {
        let sc =
            scenario(1000, PolicyKind::StaticLimits, vec![wl("a", 600, Priority::High), wl("b", 600, Priority::Low)]);
        let c = run_comparison(&sc, &[PolicyKind::StaticLimits, PolicyKind::GraduatedInKernel]).unwrap();
        let mut g = sc.clone();
        g.policy.kind = PolicyKind::GraduatedInKernel;
        assert_eq!(c.runs[0], replay(&sc).unwrap());
        assert_eq!(c.runs[1], replay(&g).unwrap());
        let d = &c.deltas[0];
        assert_eq!(d.survival_delta, c.runs[1].metrics.survival_rate - c.runs[0].metrics.survival_rate);
        assert!(run_comparison(&sc, &[PolicyKind::StaticLimits]).is_err());
    }

    #[test]
    fn endless_stall_hits_the_cap() {
        let mut sc = scenario(1000, PolicyKind::StaticLimits, vec![wl("a", 1200, Priority::Low)]);
        sc.stall_timeout_ms = u64::MAX / 4;
        assert!(matches!(replay(&sc), Err(EngineError::NonTerminating { cap_ms: 1_000_000 })));
    }

    #[test]
    fn lone_oversized_workload_is_killed_by_the_ladder() {
        let r = replay(&scenario(1000, PolicyKind::GraduatedInKernel, vec![wl("a", 1200, Priority::Low)])).unwrap();
        let kinds: Vec<EventKind> = r.events.iter().map(|e| e.kind).collect();
        assert_eq!(kinds, [EventKind::Freeze, EventKind::Kill]);
        assert_eq!(r.metrics.freeze_count, 1);
    }

    #[test]
    fn invalid_scenarios_are_rejected() {
        let ok = || scenario(1000, PolicyKind::StaticLimits, vec![wl("a", 200, Priority::Low)]);
        let mut sc = ok();
        sc.physical_budget = 0;
        assert!(matches!(replay(&sc), Err(EngineError::Invalid(_))));
        let mut sc = ok();
        sc.high_watermark = 1.5;
        assert!(replay(&sc).is_err());
        let mut sc = ok();
        sc.workloads.clear();
        assert!(replay(&sc).is_err());
        let mut sc = ok();
        sc.workloads.push(wl("a", 100, Priority::Low));
        assert!(replay(&sc).is_err());
    }

    #[test]
    fn scenario_json_with_synth_workloads() {
        let text = r#"{
            "physical_budget": "2G",
            "policy": {"kind": "GraduatedInKernel"},
            "seed": 3,
            "workloads": [
                {"name": "a", "priority": "High", "memory_low": "512M",
                 "synth": {"duration_s": 30, "tool_schedule": [["Test", 2]]}},
                {"name": "b", "memory_high": "400M", "hints": {"0": "memory:low"},
                 "synth": {"duration_s": 30, "tool_schedule": [["Test", 2]]}}
            ]
        }"#;
        let sc = Scenario::from_json(text, std::path::Path::new(".")).unwrap();
        assert_eq!(sc.physical_budget, 2048 * MIB);
        assert_eq!(sc.acceleration, 50.0);
        let r = replay(&sc).unwrap();
        assert_eq!(r.metrics.total, 2);
        assert_eq!(r.header.policy.graduated.max_delay_ms, 2000.0);
        assert_eq!(replay(&sc).unwrap().to_json(), r.to_json());
        let mut other = sc.clone();
        other.seed = 4;
        for w in &mut other.workloads {
            w.resolved = None;
        }
        other.resolve(std::path::Path::new(".")).unwrap();
        assert_ne!(other.workloads[0].resolved, sc.workloads[0].resolved);
    }

    #[test]
    fn csv_rows_have_aggregate() {
        let r = replay(&scenario(
            1000,
            PolicyKind::StaticLimits,
            vec![wl("a", 600, Priority::Low), wl("b", 600, Priority::Low)],
        ))
        .unwrap();
        let rows = r.csv_rows();
        assert_eq!(rows.len(), 3);
        let all = rows.last().unwrap();
        assert_eq!(all.workload, "ALL");
        assert_eq!(all.survival_rate, Some(0.5));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn tenants(peaks: &[(u64, bool)]) -> Vec<WorkloadSpec> {
            peaks
                .iter()
                .enumerate()
                .map(|(i, &(p, high))| {
                    let prio = if high { Priority::High } else { Priority::Low };
                    let w = wl(&format!("w{i}"), p, prio);
                    if high {
                        w.with_limits(Limit::Unlimited, Limit::Unlimited, p * MIB)
                    } else {
                        w.with_limits(Limit::Bytes(250 * MIB), Limit::Unlimited, 0)
                    }
                })
                .collect()
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn replay_is_deterministic(peaks in prop::collection::vec((150u64..700, any::<bool>()), 1..4),
                                       budget in 400u64..2000, k in 0usize..5) {
                let sc = scenario(budget, PolicyKind::ALL[k], tenants(&peaks));
                let a = replay_full(&sc).unwrap();
                prop_assert_eq!(a.report.to_json(), replay(&sc).unwrap().to_json());
                // Everything is released by the end.
                prop_assert_eq!(a.final_tree.usage(crate::cgmodel::NodeId::ROOT), 0);
                prop_assert!(a.report.metrics.peak_global_usage <= sc.physical_budget);
            }

            #[test]
            fn high_is_not_killed_while_low_lives(peaks in prop::collection::vec(150u64..700, 1..3),
                                                  high_peak in 150u64..500, budget in 600u64..1600) {
                let mut spec: Vec<(u64, bool)> = vec![(high_peak, true)];
                spec.extend(peaks.iter().map(|&p| (p, false)));
                let r = replay(&scenario(budget, PolicyKind::GraduatedInKernel, tenants(&spec))).unwrap();
                let kills: Vec<&str> = r.events.iter().filter(|e| e.kind == EventKind::Kill).map(|e| e.workload.as_str()).collect();
                if let Some(pos) = kills.iter().position(|w| *w == "w0") {
                    // every LOW must already be gone
                    let low_killed = kills[..pos].len();
                    let low_done = r.metrics.workloads[1..].iter().filter(|w| w.completed).count();
                    prop_assert_eq!(low_killed + low_done, peaks.len());
                }
            }
        }

        #[test]
        fn survival_is_monotone_in_budget() {
            let peaks = [(420, true), (400, false), (400, false), (380, false)];
            for kind in PolicyKind::ALL {
                let mut last = 0.0;
                for budget in (700..=2000).step_by(50) {
                    let r = replay(&scenario(budget, kind, tenants(&peaks))).unwrap();
                    assert!(r.metrics.survival_rate >= last, "{kind} at {budget} MB");
                    last = r.metrics.survival_rate;
                }
                assert_eq!(last, 1.0);
            }
        }
    }
}
