use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::EngineError;
use crate::cgmodel::Priority;
use crate::policy::PolicySpec;
use crate::trace::{parse_trace, synthesize_trace, SynthParams, TaskTrace};
use crate::units::{bytes_field, Limit};

fn default_acceleration() -> f64 {
    50.0
}
fn default_tick_ms() -> u64 {
    10
}
fn default_watermark() -> f64 {
    0.90
}
fn default_slope() -> f64 {
    0.05
}
fn default_stall_timeout() -> u64 {
    10_000
}

/// A multi-tenant replay configuration. Loaded from a single JSON document;
/// trace paths are resolved relative to that document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(with = "bytes_field")]
    pub physical_budget: u64,
    #[serde(default = "default_acceleration")]
    pub acceleration: f64,
    #[serde(default = "default_tick_ms")]
    pub tick_ms: u64,
    #[serde(default = "default_watermark")]
    pub high_watermark: f64,
    #[serde(default = "default_slope")]
    pub contention_slope_ms_per_mb: f64,
    #[serde(default = "default_stall_timeout")]
    pub stall_timeout_ms: u64,
    #[serde(default)]
    pub policy: PolicySpec,
    pub workloads: Vec<WorkloadSpec>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub name: String,
    /// Path to a trace file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<PathBuf>,
    /// Parameters for a synthesized trace; its seed is offset by the
    /// scenario seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthParams>,
    #[serde(default)]
    pub priority: Priority,
    #[serde(default)]
    pub memory_high: Limit,
    #[serde(default)]
    pub memory_max: Limit,
    #[serde(default, with = "bytes_field")]
    pub memory_low: u64,
    /// Tool-call index to hint string, e.g. `{"3": "memory:low"}`. Invalid
    /// hints are ignored.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub hints: BTreeMap<usize, String>,
    /// Peaks of earlier runs in bytes, used by the predictive policy.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub history_peaks: Vec<u64>,
    #[serde(skip)]
    pub resolved: Option<Arc<TaskTrace>>,
}

impl WorkloadSpec {
    pub fn from_trace(name: impl Into<String>, trace: TaskTrace, priority: Priority) -> Self {
        Self::from_shared(name, Arc::new(trace), priority)
    }

    pub fn from_shared(name: impl Into<String>, trace: Arc<TaskTrace>, priority: Priority) -> Self {
        WorkloadSpec {
            name: name.into(),
            trace: None,
            synth: None,
            priority,
            memory_high: Limit::Unlimited,
            memory_max: Limit::Unlimited,
            memory_low: 0,
            hints: BTreeMap::new(),
            history_peaks: Vec::new(),
            resolved: Some(trace),
        }
    }

    pub fn with_limits(mut self, high: Limit, max: Limit, low: u64) -> Self {
        self.memory_high = high;
        self.memory_max = max;
        self.memory_low = low;
        self
    }

    pub fn with_hint(mut self, call_index: usize, hint: &str) -> Self {
        self.hints.insert(call_index, hint.to_string());
        self
    }

    /// The workload's trace; synthesized on demand when not yet resolved.
    pub fn trace(&self, scenario_seed: u64) -> Result<Arc<TaskTrace>, EngineError> {
        if let Some(t) = &self.resolved {
            return Ok(t.clone());
        }
        if let Some(p) = &self.synth {
            let params = SynthParams { seed: p.seed.wrapping_add(scenario_seed), ..p.clone() };
            return Ok(Arc::new(synthesize_trace(&params)?));
        }
        Err(EngineError::Invalid(format!("workload {:?} has no resolved trace", self.name)))
    }
}

impl Scenario {
    pub fn new(physical_budget: u64, policy: PolicySpec, workloads: Vec<WorkloadSpec>) -> Self {
        Scenario {
            physical_budget,
            acceleration: default_acceleration(),
            tick_ms: default_tick_ms(),
            high_watermark: default_watermark(),
            contention_slope_ms_per_mb: default_slope(),
            stall_timeout_ms: default_stall_timeout(),
            policy,
            workloads,
            seed: 0,
        }
    }

    pub fn from_json(text: &str, base_dir: &Path) -> Result<Self, EngineError> {
        let mut s: Scenario = serde_json::from_str(text).map_err(|e| EngineError::Invalid(e.to_string()))?;
        s.resolve(base_dir)?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, EngineError> {
        let text = std::fs::read_to_string(path).map_err(|e| EngineError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Loads trace files and synthesizes generated traces.
    pub fn resolve(&mut self, base_dir: &Path) -> Result<(), EngineError> {
        let seed = self.seed;
        for w in &mut self.workloads {
            if w.resolved.is_some() {
                continue;
            }
            match (&w.trace, &w.synth) {
                (Some(_), Some(_)) => {
                    return Err(EngineError::Invalid(format!("workload {:?}: give either trace or synth", w.name)))
                }
                (Some(p), None) => {
                    let full = base_dir.join(p);
                    let bytes =
                        std::fs::read(&full).map_err(|e| EngineError::Io(format!("{}: {e}", full.display())))?;
                    w.resolved = Some(Arc::new(parse_trace(&bytes)?));
                }
                (None, Some(_)) => w.resolved = Some(w.trace(seed)?),
                (None, None) => return Err(EngineError::Invalid(format!("workload {:?} has no trace", w.name))),
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |m: String| Err(EngineError::Invalid(m));
        if self.physical_budget == 0 {
            return bad("physical_budget must be > 0".into());
        }
        if !(self.high_watermark > 0.0 && self.high_watermark <= 1.0) {
            return bad("high_watermark must be in (0, 1]".into());
        }
        if !(self.acceleration > 0.0 && self.acceleration.is_finite()) {
            return bad("acceleration must be > 0".into());
        }
        if self.tick_ms == 0 {
            return bad("tick_ms must be > 0".into());
        }
        if !(self.contention_slope_ms_per_mb >= 0.0 && self.contention_slope_ms_per_mb.is_finite()) {
            return bad("contention_slope_ms_per_mb must be >= 0".into());
        }
        if self.workloads.is_empty() {
            return bad("at least one workload is required".into());
        }
        let mut names = std::collections::BTreeSet::new();
        for w in &self.workloads {
            if w.name.is_empty() || w.name.contains('/') {
                return bad(format!("invalid workload name {:?}", w.name));
            }
            if !names.insert(&w.name) {
                return bad(format!("duplicate workload name {:?}", w.name));
            }
        }
        self.policy.validate().map_err(|e| EngineError::Invalid(e.to_string()))
    }
}
