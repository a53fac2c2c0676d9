//! Agent/runtime intent protocol.
//!
//! Upward: the agent declares a per-tool-call hint such as
//! `AGENT_RESOURCE_HINT=memory:high`, which maps to a `memory.high` for the
//! tool's domain. Downward: when a tool call is throttled or killed, a fixed
//! one-line message is injected into its stderr so the agent can retry with
//! a smaller scope.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::units::{round_mib, Limit, MIB};

/// Environment variable carrying the hint on a real host.
pub const HINT_ENV_VAR: &str = "AGENT_RESOURCE_HINT";

pub const FEEDBACK_SUGGESTION: &str = "reduce scope (e.g., run a subset of tests or lower parallelism) and retry.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Resource {
    Memory,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum HintLevel {
    Low,
    Medium,
    High,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ResourceHint {
    pub resource: Resource,
    pub level: HintLevel,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum HintError {
    #[error("malformed hint {0:?}: expected <resource>:<level>")]
    Malformed(String),
    #[error("unknown resource {0:?}")]
    UnknownResource(String),
    #[error("unknown level {0:?}")]
    UnknownLevel(String),
}

/// Parses `memory:(low|medium|high)`, case-insensitively.
pub fn parse_hint(value: &str) -> Result<ResourceHint, HintError> {
    let (res, level) = value.trim().split_once(':').ok_or_else(|| HintError::Malformed(value.to_string()))?;
    if level.contains(':') {
        return Err(HintError::Malformed(value.to_string()));
    }
    let resource = match res.trim().to_ascii_lowercase().as_str() {
        "memory" => Resource::Memory,
        "" => return Err(HintError::Malformed(value.to_string())),
        other => return Err(HintError::UnknownResource(other.to_string())),
    };
    let level = match level.trim().to_ascii_lowercase().as_str() {
        "low" => HintLevel::Low,
        "medium" => HintLevel::Medium,
        "high" => HintLevel::High,
        "" => return Err(HintError::Malformed(value.to_string())),
        other => return Err(HintError::UnknownLevel(other.to_string())),
    };
    Ok(ResourceHint { resource, level })
}

impl FromStr for ResourceHint {
    type Err = HintError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_hint(s)
    }
}

impl fmt::Display for ResourceHint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let level = match self.level {
            HintLevel::Low => "low",
            HintLevel::Medium => "medium",
            HintLevel::High => "high",
        };
        write!(f, "memory:{level}")
    }
}

/// Hint level to per-tool `memory.high`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct HintPolicyConfig {
    pub low: Limit,
    pub medium: Limit,
    pub high: Limit,
}

impl Default for HintPolicyConfig {
    fn default() -> Self {
        HintPolicyConfig { low: Limit::Bytes(64 * MIB), medium: Limit::Bytes(512 * MIB), high: Limit::Unlimited }
    }
}

impl HintPolicyConfig {
    pub fn validate(&self) -> Result<(), String> {
        let le = |a: Limit, b: Limit| match (a, b) {
            (_, Limit::Unlimited) => true,
            (Limit::Unlimited, Limit::Bytes(_)) => false,
            (Limit::Bytes(x), Limit::Bytes(y)) => x <= y,
        };
        if !le(self.low, self.medium) {
            return Err("hint mapping requires low <= medium".into());
        }
        if !le(self.medium, self.high) {
            return Err("hint mapping requires high to be unlimited or >= medium".into());
        }
        Ok(())
    }
}

pub fn hint_to_limits(hint: ResourceHint, config: &HintPolicyConfig) -> Limit {
    match hint.level {
        HintLevel::Low => config.low,
        HintLevel::Medium => config.medium,
        HintLevel::High => config.high,
    }
}

/// A hint never loosens the session's hard limit.
pub fn clamp_to_session(limit: Limit, session_max: Limit) -> Limit {
    limit.min(session_max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FeedbackKind {
    OomKilled,
    Throttled,
}

impl FeedbackKind {
    fn verb(self) -> &'static str {
        match self {
            FeedbackKind::OomKilled => "killed",
            FeedbackKind::Throttled => "throttled",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackMessage {
    pub kind: FeedbackKind,
    pub peak_mb: u64,
    pub limit_mb: u64,
    pub suggestion: String,
    pub rendered: String,
}

pub fn render_feedback(peak_bytes: u64, limit_bytes: u64, kind: FeedbackKind) -> FeedbackMessage {
    let peak_mb = round_mib(peak_bytes);
    let limit_mb = round_mib(limit_bytes);
    let rendered = format!(
        "[agentcgroup] tool call {}: peak={peak_mb} MiB exceeded limit={limit_mb} MiB. Suggestion: {FEEDBACK_SUGGESTION}",
        kind.verb()
    );
    FeedbackMessage { kind, peak_mb, limit_mb, suggestion: FEEDBACK_SUGGESTION.to_string(), rendered }
}

/// Inverse of [`render_feedback`]: recovers `(kind, peak_mb, limit_mb)`.
pub fn parse_feedback(text: &str) -> Option<(FeedbackKind, u64, u64)> {
    let rest = text.strip_prefix("[agentcgroup] tool call ")?;
    let (verb, rest) = rest.split_once(": peak=")?;
    let kind = match verb {
        "killed" => FeedbackKind::OomKilled,
        "throttled" => FeedbackKind::Throttled,
        _ => return None,
    };
    let (peak, rest) = rest.split_once(" MiB exceeded limit=")?;
    let (limit, rest) = rest.split_once(" MiB. Suggestion: ")?;
    if rest != FEEDBACK_SUGGESTION {
        return None;
    }
    Some((kind, peak.parse().ok()?, limit.parse().ok()?))
}

/// Demand scale applied on the `attempt`-th retry (0 = original run).
pub fn retry_scale(reduction_factor: f64, attempt: u32) -> f64 {
    reduction_factor.powi(attempt as i32)
}

/// Scales the part of `raw` above `baseline`; the baseline itself is kept.
pub fn scale_demand(raw: f64, baseline: f64, scale: f64) -> f64 {
    baseline + scale * (raw - baseline).max(0.0)
}

/// The simulated agent's response to feedback: the tool window's demand
/// series for retry number `attempt` (1-based), or `None` once the retry
/// budget `max_retries` is spent.
pub fn adapt_on_feedback(
    window: &[u64],
    baseline: u64,
    reduction_factor: f64,
    attempt: u32,
    max_retries: u32,
) -> Option<Vec<u64>> {
    if attempt == 0 || attempt > max_retries {
        return None;
    }
    let s = retry_scale(reduction_factor, attempt);
    Some(window.iter().map(|&d| scale_demand(d as f64, baseline as f64, s).round() as u64).collect())
}
