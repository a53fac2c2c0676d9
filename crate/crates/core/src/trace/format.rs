//! Line-delimited JSON trace files.
//!
//! ```text
//! {"t":"meta","task_id":"dask-11628","init_end_ms":42000,"total_ms":600000}
//! {"t":"s","ms":0,"mem":193986560,"cpu":4.8}
//! {"t":"tc","tool":"Bash","start_ms":61000,"end_ms":66500,"cmd":"pytest -x","cat":"Test"}
//! ```
//!
//! The meta record must come first. Unknown keys are ignored; unknown record
//! types are rejected.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{BashCategory, Sample, TaskTrace, ToolCallEvent, ToolType, TraceError};

#[derive(Deserialize, Serialize)]
#[serde(tag = "t")]
enum Record {
    #[serde(rename = "meta")]
    Meta { task_id: String, init_end_ms: u64, total_ms: u64 },
    #[serde(rename = "s")]
    Sample { ms: u64, mem: u64, cpu: f64 },
    #[serde(rename = "tc")]
    Tool {
        tool: ToolType,
        start_ms: u64,
        end_ms: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cmd: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cat: Option<BashCategory>,
    },
}

pub fn parse_trace(content: &[u8]) -> Result<TaskTrace, TraceError> {
    let text =
        std::str::from_utf8(content).map_err(|e| TraceError::Malformed { line: 0, msg: format!("not UTF-8: {e}") })?;

    let mut meta = None;
    let mut samples: Vec<Sample> = Vec::new();
    let mut calls: Vec<ToolCallEvent> = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(raw).map_err(|e| TraceError::Malformed { line, msg: e.to_string() })?;
        match rec {
            Record::Meta { task_id, init_end_ms, total_ms } => {
                if meta.is_some() || !samples.is_empty() || !calls.is_empty() {
                    return Err(TraceError::Malformed {
                        line,
                        msg: "meta record must be the first and only meta line".into(),
                    });
                }
                meta = Some((task_id, init_end_ms, total_ms));
            }
            _ if meta.is_none() => return Err(TraceError::MissingMeta),
            Record::Sample { ms, mem, cpu } => {
                if let Some(prev) = samples.last() {
                    if ms <= prev.ts_ms {
                        return Err(TraceError::NonMonotonic { prev_ms: prev.ts_ms, ts_ms: ms });
                    }
                }
                samples.push(Sample { ts_ms: ms, mem_bytes: mem, cpu_pct: cpu });
            }
            Record::Tool { tool, start_ms, end_ms, cmd, cat } => {
                if let Some(prev) = calls.last() {
                    if start_ms < prev.end_ms {
                        return Err(TraceError::Overlapping { prev_end_ms: prev.end_ms, start_ms });
                    }
                }
                calls.push(ToolCallEvent { tool_type: tool, start_ms, end_ms, command: cmd, category: cat });
            }
        }
    }

    let (task_id, init_end_ms, total_ms) = meta.ok_or(TraceError::MissingMeta)?;
    TaskTrace::new(task_id, init_end_ms, total_ms, samples, calls)
}

/// Renders a trace in the canonical line order: meta, samples, tool calls.
pub fn serialize_trace(trace: &TaskTrace) -> String {
    let mut out = String::new();
    let mut push = |r: &Record| {
        // Record serialization cannot fail: no maps with non-string keys.
        let _ = writeln!(out, "{}", serde_json::to_string(r).expect("record serializes"));
    };
    push(&Record::Meta {
        task_id: trace.task_id().to_string(),
        init_end_ms: trace.init_end_ms(),
        total_ms: trace.total_ms(),
    });
    for s in trace.samples() {
        push(&Record::Sample { ms: s.ts_ms, mem: s.mem_bytes, cpu: s.cpu_pct });
    }
    for c in trace.tool_calls() {
        push(&Record::Tool {
            tool: c.tool_type,
            start_ms: c.start_ms,
            end_ms: c.end_ms,
            cmd: c.command.clone(),
            cat: c.category,
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const BASIC: &str = r#"{"t":"meta","task_id":"x","init_end_ms":0,"total_ms":10000}
{"t":"s","ms":0,"mem":100,"cpu":1.5}
{"t":"s","ms":1000,"mem":200,"cpu":2.0,"extra":"ignored"}
{"t":"s","ms":2000,"mem":150,"cpu":0}
{"t":"tc","tool":"Bash","start_ms":500,"end_ms":1500,"cmd":"pytest -x","cat":"Test"}
"#;

    #[test]
    fn parses_basic_trace() {
        let t = parse_trace(BASIC.as_bytes()).unwrap();
        assert_eq!(t.task_id(), "x");
        assert_eq!(t.samples().len(), 3);
        assert_eq!(t.tool_calls().len(), 1);
        assert_eq!(t.tool_calls()[0].category, Some(BashCategory::Test));
    }

    #[test]
    fn rejects_repeated_timestamp() {
        let src = r#"{"t":"meta","task_id":"x","init_end_ms":0,"total_ms":5000}
{"t":"s","ms":1000,"mem":1,"cpu":0}
{"t":"s","ms":1000,"mem":2,"cpu":0}"#;
        let err = parse_trace(src.as_bytes()).unwrap_err();
        assert!(matches!(err, TraceError::NonMonotonic { prev_ms: 1000, ts_ms: 1000 }));
        assert!(err.to_string().contains("non-monotonic timestamp"));
    }

    #[test]
    fn rejects_overlapping_calls() {
        let src = r#"{"t":"meta","task_id":"x","init_end_ms":0,"total_ms":10000}
{"t":"tc","tool":"Read","start_ms":0,"end_ms":5000}
{"t":"tc","tool":"Read","start_ms":4000,"end_ms":9000}"#;
        let err = parse_trace(src.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("overlapping tool calls"));
    }

    #[test]
    fn reports_line_of_malformed_record() {
        let src = "{\"t\":\"meta\",\"task_id\":\"x\",\"init_end_ms\":0,\"total_ms\":10}\n{\"t\":\"s\",\"ms\":1}\n";
        match parse_trace(src.as_bytes()).unwrap_err() {
            TraceError::Malformed { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn unknown_record_type_is_error() {
        let src = "{\"t\":\"meta\",\"task_id\":\"x\",\"init_end_ms\":0,\"total_ms\":10}\n{\"t\":\"zz\"}\n";
        assert!(matches!(parse_trace(src.as_bytes()), Err(TraceError::Malformed { line: 2, .. })));
    }

    #[test]
    fn meta_must_come_first() {
        let src = "{\"t\":\"s\",\"ms\":1,\"mem\":1,\"cpu\":0}\n";
        assert_eq!(parse_trace(src.as_bytes()).unwrap_err(), TraceError::MissingMeta);
        assert_eq!(parse_trace(b"").unwrap_err(), TraceError::MissingMeta);
    }

    fn arb_trace() -> impl Strategy<Value = TaskTrace> {
        (
            "[a-z0-9_-]{1,12}",
            prop::collection::vec((1u64..2000, 0u64..(8u64 << 30), 0.0f64..400.0), 0..40),
            prop::collection::vec((0u64..3000, 1u64..3000, 0usize..7, "[a-z ]{1,10}"), 0..10),
        )
            .prop_map(|(id, raw_samples, raw_calls)| {
                let mut ts = 0;
                let samples: Vec<Sample> = raw_samples
                    .into_iter()
                    .map(|(dt, mem, cpu)| {
                        ts += dt;
                        Sample { ts_ms: ts, mem_bytes: mem, cpu_pct: cpu }
                    })
                    .collect();
                let mut at = 0;
                let calls: Vec<ToolCallEvent> = raw_calls
                    .into_iter()
                    .map(|(gap, dur, kind, cmd)| {
                        let start = at + gap;
                        at = start + dur;
                        let tool = ToolType::ALL[kind];
                        if tool == ToolType::Bash {
                            ToolCallEvent::bash(start, at, format!("x{cmd}"), BashCategory::ALL[kind % 6])
                        } else {
                            ToolCallEvent::other(tool, start, at)
                        }
                    })
                    .collect();
                let total = ts.max(at) + 1;
                TaskTrace::new(id, 0, total, samples, calls).unwrap()
            })
    }

    proptest! {
        #[test]
        fn roundtrip(trace in arb_trace()) {
            let text = serialize_trace(&trace);
            let back = parse_trace(text.as_bytes()).unwrap();
            prop_assert_eq!(back, trace);
        }
    }
}
