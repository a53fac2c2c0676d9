//! Enforcement strategies and their pure decision functions.
//!
//! Five policies are compared: static limits, a reactive user-space killer,
//! predictive (history-percentile) limits, graduated in-kernel enforcement,
//! and graduated enforcement plus the intent protocol. The engine owns all
//! state and calls into this module for decisions.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cgmodel::{NodeId, Priority};
use crate::intent::HintPolicyConfig;
use crate::units::MIB;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum PolicyKind {
    #[default]
    StaticLimits,
    ReactiveUserSpace,
    Predictive,
    GraduatedInKernel,
    IntentDriven,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 5] = [
        PolicyKind::StaticLimits,
        PolicyKind::ReactiveUserSpace,
        PolicyKind::Predictive,
        PolicyKind::GraduatedInKernel,
        PolicyKind::IntentDriven,
    ];

    pub fn short_name(self) -> &'static str {
        match self {
            PolicyKind::StaticLimits => "static",
            PolicyKind::ReactiveUserSpace => "reactive",
            PolicyKind::Predictive => "predictive",
            PolicyKind::GraduatedInKernel => "graduated",
            PolicyKind::IntentDriven => "intent",
        }
    }

    /// Policies with the throttle/freeze ladder.
    pub fn is_graduated(self) -> bool {
        matches!(self, PolicyKind::GraduatedInKernel | PolicyKind::IntentDriven)
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for PolicyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let k = s.trim().to_ascii_lowercase().replace(['-', '_'], "");
        Ok(match k.as_str() {
            "static" | "staticlimits" => PolicyKind::StaticLimits,
            "reactive" | "reactiveuserspace" => PolicyKind::ReactiveUserSpace,
            "predictive" => PolicyKind::Predictive,
            "graduated" | "graduatedinkernel" => PolicyKind::GraduatedInKernel,
            "intent" | "intentdriven" => PolicyKind::IntentDriven,
            _ => return Err(format!("unknown policy {s:?}")),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraduatedParams {
    pub delay_slope_ms_per_mb: f64,
    pub max_delay_ms: f64,
    pub freeze_after_consecutive_throttles: u32,
    pub feedback_after_frozen_ms: u64,
    pub kill_as_last_resort: bool,
}

impl Default for GraduatedParams {
    fn default() -> Self {
        GraduatedParams {
            delay_slope_ms_per_mb: 10.0,
            max_delay_ms: 2000.0,
            freeze_after_consecutive_throttles: 20,
            feedback_after_frozen_ms: 5000,
            kill_as_last_resort: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum ReactiveAction {
    #[default]
    KillLowestPriority,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReactiveParams {
    pub reaction_latency_ms: u64,
    pub pressure_threshold: f64,
    pub window_ms: u64,
    pub action: ReactiveAction,
}

impl Default for ReactiveParams {
    fn default() -> Self {
        ReactiveParams {
            reaction_latency_ms: 50,
            pressure_threshold: 0.95,
            window_ms: 1000,
            action: ReactiveAction::KillLowestPriority,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictiveParams {
    pub percentile: f64,
}

impl Default for PredictiveParams {
    fn default() -> Self {
        PredictiveParams { percentile: 95.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntentParams {
    pub hint_mapping: HintPolicyConfig,
    /// Demand scale applied per feedback retry.
    pub reduction_factor: f64,
    pub max_retries: u32,
}

impl Default for IntentParams {
    fn default() -> Self {
        IntentParams { hint_mapping: HintPolicyConfig::default(), reduction_factor: 0.5, max_retries: 2 }
    }
}

/// A policy plus every parameter block; blocks not used by `kind` are
/// carried along so reports always show the full configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct PolicySpec {
    pub kind: PolicyKind,
    pub graduated: GraduatedParams,
    pub reactive: ReactiveParams,
    pub predictive: PredictiveParams,
    pub intent: IntentParams,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PolicyError {
    #[error("invalid policy parameters: {0}")]
    Invalid(String),
    #[error("empty history")]
    EmptyHistory,
}

impl PolicySpec {
    pub fn new(kind: PolicyKind) -> Self {
        PolicySpec { kind, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        let bad = |m: &str| Err(PolicyError::Invalid(m.to_string()));
        let g = &self.graduated;
        if !(g.delay_slope_ms_per_mb >= 0.0 && g.delay_slope_ms_per_mb.is_finite()) {
            return bad("delay_slope_ms_per_mb must be >= 0");
        }
        if !(g.max_delay_ms > 0.0 && g.max_delay_ms.is_finite()) {
            return bad("max_delay_ms must be > 0");
        }
        let r = &self.reactive;
        if !(r.pressure_threshold >= 0.0 && r.pressure_threshold.is_finite()) {
            return bad("pressure_threshold must be >= 0");
        }
        let p = self.predictive.percentile;
        if !(p > 0.0 && p <= 100.0) {
            return bad("percentile must be in (0, 100]");
        }
        let i = &self.intent;
        if !(i.reduction_factor > 0.0 && i.reduction_factor < 1.0) {
            return bad("reduction_factor must be in (0, 1)");
        }
        i.hint_mapping.validate().map_err(PolicyError::Invalid)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PressureSignal {
    /// Projected global usage over the physical budget.
    pub global_utilization: f64,
    pub breaching_node: Option<NodeId>,
    /// Excess over `memory.high` the request would cause.
    pub overshoot_bytes: u64,
    /// A high-priority workload is stalled or under pressure.
    pub high_priority_stalled: bool,
}

/// Delay in milliseconds imposed on an allocation request.
pub fn throttle_delay(spec: &PolicySpec, priority: Priority, signal: &PressureSignal) -> f64 {
    if !spec.kind.is_graduated() || priority == Priority::High {
        return 0.0;
    }
    let g = &spec.graduated;
    if signal.high_priority_stalled {
        return g.max_delay_ms;
    }
    let over_mb = signal.overshoot_bytes as f64 / MIB as f64;
    (g.delay_slope_ms_per_mb * over_mb).clamp(0.0, g.max_delay_ms)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LadderAction {
    None,
    Throttle,
    Freeze,
    Feedback,
    Kill,
}

/// Per-workload ladder state, owned by the engine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct EscalationState {
    /// Throttled requests in a row, including the one being decided.
    pub consecutive_throttles: u32,
    /// How long the workload has been frozen, if it is.
    pub frozen_for_ms: Option<u64>,
    /// A feedback retry is possible (intent policy, open tool call, retries
    /// left).
    pub feedback_available: bool,
}

pub fn graduated_step(state: &EscalationState, params: &GraduatedParams) -> LadderAction {
    match state.frozen_for_ms {
        None if state.consecutive_throttles < params.freeze_after_consecutive_throttles => LadderAction::Throttle,
        None => LadderAction::Freeze,
        Some(t) if t < params.feedback_after_frozen_ms => LadderAction::None,
        Some(_) if state.feedback_available => LadderAction::Feedback,
        Some(_) if params.kill_as_last_resort => LadderAction::Kill,
        Some(_) => LadderAction::None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ScheduledAction {
    pub action: ReactiveAction,
    pub decided_at_ms: u64,
    pub execute_at_ms: u64,
}

/// `history` holds `(ts_ms, utilization)` observations. The mean over
/// `(now - window, now]` is compared with the threshold.
pub fn reactive_decide(history: &[(u64, f64)], params: &ReactiveParams, now_ms: u64) -> Option<ScheduledAction> {
    let window: Vec<f64> = history
        .iter()
        .filter(|(t, _)| *t <= now_ms && (*t + params.window_ms > now_ms || *t == now_ms))
        .map(|(_, u)| *u)
        .collect();
    if window.is_empty() {
        return None;
    }
    let mean = window.iter().sum::<f64>() / window.len() as f64;
    (mean >= params.pressure_threshold).then_some(ScheduledAction {
        action: params.action,
        decided_at_ms: now_ms,
        execute_at_ms: now_ms + params.reaction_latency_ms,
    })
}

/// Execution-time check: the action still applies only if pressure persists.
pub fn reactive_revalidate(current_utilization: f64, params: &ReactiveParams) -> bool {
    current_utilization >= params.pressure_threshold
}

/// Nearest-rank percentile of historical peaks.
pub fn predictive_limit(history_peaks: &[u64], percentile: f64) -> Result<u64, PolicyError> {
    if history_peaks.is_empty() {
        return Err(PolicyError::EmptyHistory);
    }
    if !(percentile > 0.0 && percentile <= 100.0) {
        return Err(PolicyError::Invalid("percentile must be in (0, 100]".into()));
    }
    let mut v = history_peaks.to_vec();
    v.sort_unstable();
    let n = v.len();
    // p * n / 100 is exact for integral p; the epsilon absorbs rounding
    // noise from fractional percentiles.
    let rank = ((percentile * n as f64 / 100.0) - 1e-9).ceil() as usize;
    Ok(v[rank.clamp(1, n) - 1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sig(over_mb: u64, stalled: bool) -> PressureSignal {
        PressureSignal {
            global_utilization: 0.5,
            breaching_node: None,
            overshoot_bytes: over_mb * MIB,
            high_priority_stalled: stalled,
        }
    }

    #[test]
    fn delay_curve() {
        let g = PolicySpec::new(PolicyKind::GraduatedInKernel);
        assert_eq!(throttle_delay(&g, Priority::Low, &sig(10, false)), 100.0);
        assert_eq!(throttle_delay(&g, Priority::High, &sig(10, true)), 0.0);
        assert_eq!(throttle_delay(&g, Priority::Low, &sig(500, false)), 2000.0);
        assert_eq!(throttle_delay(&g, Priority::Low, &sig(0, true)), 2000.0);
        for k in [PolicyKind::StaticLimits, PolicyKind::Predictive, PolicyKind::ReactiveUserSpace] {
            assert_eq!(throttle_delay(&PolicySpec::new(k), Priority::Low, &sig(500, true)), 0.0);
        }
    }

    #[test]
    fn ladder() {
        let p = GraduatedParams::default();
        let st = |c, f, fb| EscalationState { consecutive_throttles: c, frozen_for_ms: f, feedback_available: fb };
        assert_eq!(graduated_step(&st(19, None, false), &p), LadderAction::Throttle);
        assert_eq!(graduated_step(&st(20, None, false), &p), LadderAction::Freeze);
        assert_eq!(graduated_step(&st(20, Some(4999), true), &p), LadderAction::None);
        assert_eq!(graduated_step(&st(20, Some(5000), true), &p), LadderAction::Feedback);
        assert_eq!(graduated_step(&st(20, Some(5000), false), &p), LadderAction::Kill);
        let soft = GraduatedParams { kill_as_last_resort: false, ..p };
        assert_eq!(graduated_step(&st(20, Some(50_000), false), &soft), LadderAction::None);
    }

    #[test]
    fn reactive() {
        let p = ReactiveParams::default();
        let h = |u: f64| (1..=10).map(|i| (i * 100, u)).collect::<Vec<_>>();
        let a = reactive_decide(&h(0.96), &p, 1000).unwrap();
        assert_eq!(a.execute_at_ms, 1050);
        assert!(reactive_decide(&h(0.94), &p, 1000).is_none());
        assert!(!reactive_revalidate(0.5, &p));
        assert!(reactive_decide(&[], &p, 1000).is_none());
    }

    #[test]
    fn predictive() {
        let peaks: Vec<u64> = (1..=10).map(|i| i * 100).collect();
        assert_eq!(predictive_limit(&peaks, 95.0).unwrap(), 1000);
        assert_eq!(predictive_limit(&peaks, 30.0).unwrap(), 300);
        assert_eq!(predictive_limit(&[7], 1.0).unwrap(), 7);
        assert_eq!(predictive_limit(&[7], 100.0).unwrap(), 7);
        assert_eq!(predictive_limit(&[4096 * MIB, 197 * MIB], 50.0).unwrap(), 197 * MIB);
        assert_eq!(predictive_limit(&[], 50.0), Err(PolicyError::EmptyHistory));
    }

    #[test]
    fn parse_names() {
        assert_eq!("static".parse::<PolicyKind>().unwrap(), PolicyKind::StaticLimits);
        assert_eq!("GraduatedInKernel".parse::<PolicyKind>().unwrap(), PolicyKind::GraduatedInKernel);
        assert_eq!("intent-driven".parse::<PolicyKind>().unwrap(), PolicyKind::IntentDriven);
        assert!("x".parse::<PolicyKind>().is_err());
        let spec: PolicySpec =
            serde_json::from_str(r#"{"kind":"GraduatedInKernel","graduated":{"max_delay_ms":500}}"#).unwrap();
        assert_eq!(spec.graduated.max_delay_ms, 500.0);
        assert_eq!(spec.graduated.delay_slope_ms_per_mb, 10.0);
    }

    proptest! {
        #[test]
        fn delay_monotone_in_overshoot(a in 0u64..(1 << 34), b in 0u64..(1 << 34), slope in 0.0f64..100.0) {
            let mut spec = PolicySpec::new(PolicyKind::GraduatedInKernel);
            spec.graduated.delay_slope_ms_per_mb = slope;
            let d = |o| throttle_delay(&spec, Priority::Low, &PressureSignal {
                global_utilization: 0.0, breaching_node: None, overshoot_bytes: o, high_priority_stalled: false });
            let (lo, hi) = (a.min(b), a.max(b));
            prop_assert!(d(lo) <= d(hi));
            prop_assert!(d(hi) <= spec.graduated.max_delay_ms);
        }

        #[test]
        fn never_kill_unfrozen(c in 0u32..100, frozen in prop::option::of(0u64..20_000), fb in any::<bool>(), kill in any::<bool>()) {
            let p = GraduatedParams { kill_as_last_resort: kill, ..Default::default() };
            let a = graduated_step(&EscalationState { consecutive_throttles: c, frozen_for_ms: frozen, feedback_available: fb }, &p);
            if a == LadderAction::Kill {
                prop_assert!(frozen.is_some() && kill);
            }
        }

        #[test]
        fn reactive_respects_latency(us in prop::collection::vec(0.0f64..1.2, 1..20), now in 0u64..10_000) {
            let p = ReactiveParams::default();
            let h: Vec<(u64, f64)> = us.iter().enumerate().map(|(i, u)| (now.saturating_sub(i as u64 * 10), *u)).collect();
            if let Some(a) = reactive_decide(&h, &p, now) {
                prop_assert!(a.execute_at_ms >= now + p.reaction_latency_ms);
            }
        }

        #[test]
        fn predictive_permutation_invariant(mut v in prop::collection::vec(0u64..1_000_000, 1..30), p in 1.0f64..100.0, seed in any::<u64>()) {
            let a = predictive_limit(&v, p).unwrap();
            let n = v.len();
            v.rotate_left((seed as usize) % n);
            v.reverse();
            prop_assert_eq!(a, predictive_limit(&v, p).unwrap());
        }
    }
}
