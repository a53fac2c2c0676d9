//! Scenario fixtures shared by integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use agentcg::cgmodel::Priority;
use agentcg::engine::{Scenario, WorkloadSpec};
use agentcg::policy::{PolicyKind, PolicySpec};
use agentcg::trace::{synthesize_trace, BashCategory, SynthParams, TaskTrace};
use agentcg::units::{Limit, MIB};

pub const HIGH_APEX_MB: f64 = 421.0;
pub const LOW_APEX_MB: f64 = 406.0;
pub const SEED: u64 = 7;

/// 120 s session with four 2 s test bursts; equal seeds give equal burst
/// timing, so the three workloads peak together.
pub fn burst_params(apex_mb: f64) -> SynthParams {
    SynthParams {
        task_id: format!("apex{apex_mb}"),
        duration_s: 120.0,
        tool_schedule: vec![(BashCategory::Test, 4)],
        burst_peak_mb: BTreeMap::from([(BashCategory::Test, apex_mb)]),
        burst_duration_s: (2.0, 2.0),
        seed: SEED,
        ..SynthParams::default()
    }
}

pub fn burst_trace(apex_mb: f64) -> TaskTrace {
    synthesize_trace(&burst_params(apex_mb)).unwrap()
}

/// One HIGH workload protected by `memory.low` and two LOW workloads
/// limited by `memory.high = 400M`.
pub fn three_tenant(budget_mb: u64, kind: PolicyKind) -> Scenario {
    let high = WorkloadSpec::from_trace("high", burst_trace(HIGH_APEX_MB), Priority::High).with_limits(
        Limit::Unlimited,
        Limit::Unlimited,
        512 * MIB,
    );
    let low = |n: &str| {
        WorkloadSpec::from_trace(n, burst_trace(LOW_APEX_MB), Priority::Low).with_limits(
            Limit::Bytes(400 * MIB),
            Limit::Unlimited,
            0,
        )
    };
    Scenario::new(budget_mb * MIB, PolicySpec::new(kind), vec![high, low("low1"), low("low2")])
}

/// One LOW workload at a 20 MB baseline whose single test call climbs to
/// 540 MB (520 MB above baseline, all charged to the tool domain). The call
/// is hinted `memory:low`.
pub fn intent_scenario(session_max_mb: u64, max_retries: u32) -> Scenario {
    let params = SynthParams {
        task_id: "intent".into(),
        baseline_mb: 20.0,
        duration_s: 20.0,
        tool_schedule: vec![(BashCategory::Test, 1)],
        burst_peak_mb: BTreeMap::from([(BashCategory::Test, 540.0)]),
        burst_duration_s: (2.0, 2.0),
        seed: SEED,
        ..SynthParams::default()
    };
    let w = WorkloadSpec::from_trace("agent", synthesize_trace(&params).unwrap(), Priority::Low)
        .with_limits(Limit::Unlimited, Limit::Bytes(session_max_mb * MIB), 0)
        .with_hint(0, "memory:low");
    let mut policy = PolicySpec::new(PolicyKind::IntentDriven);
    policy.intent.max_retries = max_retries;
    Scenario::new(8192 * MIB, policy, vec![w])
}
