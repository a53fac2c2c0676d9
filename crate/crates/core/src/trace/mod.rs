//! Agent task traces: 1-second memory/CPU samples plus the tool-call
//! timeline of one task.
//!
//! Timestamps are virtual milliseconds since task start. Traces are immutable
//! once built; [`TaskTrace::new`] is the only constructor and enforces every
//! structural invariant, so downstream code never re-validates.

mod format;
mod synth;

use serde::{Deserialize, Serialize};

pub use format::{parse_trace, serialize_trace};
pub use synth::{synthesize_trace, RetryGroupSpec, SynthParams};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TraceError {
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("missing meta record")]
    MissingMeta,
    #[error("non-monotonic timestamp: sample at {ts_ms} ms follows {prev_ms} ms")]
    NonMonotonic { prev_ms: u64, ts_ms: u64 },
    #[error(
        "overlapping tool calls: call starting at {start_ms} ms overlaps previous call ending at {prev_end_ms} ms"
    )]
    Overlapping { prev_end_ms: u64, start_ms: u64 },
    #[error("invalid trace: {0}")]
    Invalid(String),
    #[error("time {t_ms} ms outside trace range 0..={total_ms}")]
    OutOfRange { t_ms: u64, total_ms: u64 },
    #[error("trace has no samples")]
    NoSamples,
    #[error("schedule does not fit duration: {0}")]
    ScheduleDoesNotFit(String),
    #[error("invalid synthesis parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub ts_ms: u64,
    pub mem_bytes: u64,
    /// Percent of one core; may exceed 100.
    pub cpu_pct: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ToolType {
    Bash,
    Read,
    Edit,
    Write,
    SubAgent,
    WebSearch,
    Other,
}

impl ToolType {
    pub const ALL: [ToolType; 7] = [
        ToolType::Bash,
        ToolType::Read,
        ToolType::Edit,
        ToolType::Write,
        ToolType::SubAgent,
        ToolType::WebSearch,
        ToolType::Other,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BashCategory {
    Test,
    PackageInstall,
    PythonSnippet,
    FileExploration,
    Git,
    Other,
}

impl BashCategory {
    pub const ALL: [BashCategory; 6] = [
        BashCategory::Test,
        BashCategory::PackageInstall,
        BashCategory::PythonSnippet,
        BashCategory::FileExploration,
        BashCategory::Git,
        BashCategory::Other,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCallEvent {
    pub tool_type: ToolType,
    pub start_ms: u64,
    pub end_ms: u64,
    pub command: Option<String>,
    pub category: Option<BashCategory>,
}

impl ToolCallEvent {
    pub fn bash(start_ms: u64, end_ms: u64, command: impl Into<String>, category: BashCategory) -> Self {
        ToolCallEvent {
            tool_type: ToolType::Bash,
            start_ms,
            end_ms,
            command: Some(command.into()),
            category: Some(category),
        }
    }

    pub fn other(tool_type: ToolType, start_ms: u64, end_ms: u64) -> Self {
        ToolCallEvent { tool_type, start_ms, end_ms, command: None, category: None }
    }

    pub fn duration_ms(&self) -> u64 {
        self.end_ms - self.start_ms
    }

    /// Closed-interval containment, so boundary samples count as in-window.
    pub fn contains(&self, ts_ms: u64) -> bool {
        self.start_ms <= ts_ms && ts_ms <= self.end_ms
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskTrace {
    task_id: String,
    init_end_ms: u64,
    total_ms: u64,
    samples: Vec<Sample>,
    tool_calls: Vec<ToolCallEvent>,
}

impl TaskTrace {
    pub fn new(
        task_id: impl Into<String>,
        init_end_ms: u64,
        total_ms: u64,
        samples: Vec<Sample>,
        tool_calls: Vec<ToolCallEvent>,
    ) -> Result<Self, TraceError> {
        if init_end_ms > total_ms {
            return Err(TraceError::Invalid(format!("init_end_ms {init_end_ms} exceeds total_ms {total_ms}")));
        }
        for w in samples.windows(2) {
            if w[1].ts_ms <= w[0].ts_ms {
                return Err(TraceError::NonMonotonic { prev_ms: w[0].ts_ms, ts_ms: w[1].ts_ms });
            }
        }
        for s in &samples {
            if s.ts_ms > total_ms {
                return Err(TraceError::Invalid(format!("sample at {} ms after total_ms {total_ms}", s.ts_ms)));
            }
            if !(s.cpu_pct.is_finite() && s.cpu_pct >= 0.0) {
                return Err(TraceError::Invalid(format!("sample at {} ms has invalid cpu {}", s.ts_ms, s.cpu_pct)));
            }
        }
        let mut prev_end: Option<u64> = None;
        for c in &tool_calls {
            if c.start_ms >= c.end_ms {
                return Err(TraceError::Invalid(format!("tool call start {} not before end {}", c.start_ms, c.end_ms)));
            }
            if let Some(pe) = prev_end {
                if c.start_ms < pe {
                    return Err(TraceError::Overlapping { prev_end_ms: pe, start_ms: c.start_ms });
                }
            }
            if c.start_ms < init_end_ms {
                return Err(TraceError::Invalid(format!(
                    "tool call at {} ms starts before init end {init_end_ms}",
                    c.start_ms
                )));
            }
            if c.end_ms > total_ms {
                return Err(TraceError::Invalid(format!("tool call ends at {} ms after total_ms", c.end_ms)));
            }
            let is_bash = c.tool_type == ToolType::Bash;
            if is_bash != c.category.is_some() {
                return Err(TraceError::Invalid(format!(
                    "tool call at {} ms: category must be present exactly for Bash",
                    c.start_ms
                )));
            }
            if is_bash && c.command.as_deref().is_none_or(str::is_empty) {
                return Err(TraceError::Invalid(format!("Bash call at {} ms has no command", c.start_ms)));
            }
            prev_end = Some(c.end_ms);
        }
        Ok(TaskTrace { task_id: task_id.into(), init_end_ms, total_ms, samples, tool_calls })
    }

    pub fn task_id(&self) -> &str {
        &self.task_id
    }

    pub fn init_end_ms(&self) -> u64 {
        self.init_end_ms
    }

    pub fn total_ms(&self) -> u64 {
        self.total_ms
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn tool_calls(&self) -> &[ToolCallEvent] {
        &self.tool_calls
    }

    pub fn peak_bytes(&self) -> u64 {
        self.samples.iter().map(|s| s.mem_bytes).max().unwrap_or(0)
    }

    /// Index of the tool call whose window contains `ts_ms`.
    pub fn call_at(&self, ts_ms: u64) -> Option<usize> {
        let i = self.tool_calls.partition_point(|c| c.end_ms < ts_ms);
        self.tool_calls.get(i).filter(|c| c.contains(ts_ms)).map(|_| i)
    }

    /// Memory demand at `t_ms`, linearly interpolated between samples and
    /// held flat before the first and after the last sample.
    pub fn demand_at(&self, t_ms: u64) -> Result<u64, TraceError> {
        if t_ms > self.total_ms {
            return Err(TraceError::OutOfRange { t_ms, total_ms: self.total_ms });
        }
        Ok(self.demand_at_f(t_ms as f64)?.round() as u64)
    }

    pub(crate) fn demand_at_f(&self, t: f64) -> Result<f64, TraceError> {
        let s = &self.samples;
        let first = s.first().ok_or(TraceError::NoSamples)?;
        let last = s[s.len() - 1];
        if t <= first.ts_ms as f64 {
            return Ok(first.mem_bytes as f64);
        }
        if t >= last.ts_ms as f64 {
            return Ok(last.mem_bytes as f64);
        }
        // first index with ts > t; guaranteed in 1..len
        let hi = s.partition_point(|x| (x.ts_ms as f64) <= t);
        let (a, b) = (s[hi - 1], s[hi]);
        let frac = (t - a.ts_ms as f64) / (b.ts_ms - a.ts_ms) as f64;
        Ok(a.mem_bytes as f64 + frac * (b.mem_bytes as f64 - a.mem_bytes as f64))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::units::MIB;

    fn s(ts_ms: u64, mb: u64) -> Sample {
        Sample { ts_ms, mem_bytes: mb * MIB, cpu_pct: 0.0 }
    }

    #[test]
    fn interpolates_midpoint() {
        let t = TaskTrace::new("t", 0, 2000, vec![s(0, 100), s(2000, 300)], vec![]).unwrap();
        assert_eq!(t.demand_at(1000).unwrap(), 200 * MIB);
        assert_eq!(t.demand_at(0).unwrap(), 100 * MIB);
        assert_eq!(t.demand_at(2000).unwrap(), 300 * MIB);
    }

    #[test]
    fn interpolates_gigabyte_jump() {
        let t = TaskTrace::new("t", 0, 1000, vec![s(0, 0), s(1000, 3 * 1024)], vec![]).unwrap();
        assert_eq!(t.demand_at(500).unwrap(), 1536 * MIB);
    }

    #[test]
    fn out_of_range_is_error() {
        let t = TaskTrace::new("t", 0, 1000, vec![s(0, 1)], vec![]).unwrap();
        assert!(matches!(t.demand_at(1001), Err(TraceError::OutOfRange { .. })));
    }

    #[test]
    fn rejects_overlap_and_init_violation() {
        let a = ToolCallEvent::other(ToolType::Read, 0, 5000);
        let b = ToolCallEvent::other(ToolType::Read, 4000, 9000);
        let e = TaskTrace::new("t", 0, 10_000, vec![], vec![a.clone(), b]).unwrap_err();
        assert!(matches!(e, TraceError::Overlapping { .. }));
        let e = TaskTrace::new("t", 1000, 10_000, vec![], vec![a]).unwrap_err();
        assert!(matches!(e, TraceError::Invalid(_)));
    }

    #[test]
    fn bash_requires_category() {
        let mut c = ToolCallEvent::bash(0, 10, "ls", BashCategory::FileExploration);
        c.category = None;
        assert!(TaskTrace::new("t", 0, 100, vec![], vec![c]).is_err());
        let mut r = ToolCallEvent::other(ToolType::Read, 0, 10);
        r.category = Some(BashCategory::Git);
        assert!(TaskTrace::new("t", 0, 100, vec![], vec![r]).is_err());
    }

    #[test]
    fn call_lookup() {
        let calls =
            vec![ToolCallEvent::other(ToolType::Read, 100, 200), ToolCallEvent::other(ToolType::Edit, 300, 400)];
        let t = TaskTrace::new("t", 0, 1000, vec![], calls).unwrap();
        assert_eq!(t.call_at(50), None);
        assert_eq!(t.call_at(100), Some(0));
        assert_eq!(t.call_at(250), None);
        assert_eq!(t.call_at(400), Some(1));
    }
}
