//! Synthetic traces following the two-layer memory shape of agent tasks: a
//! flat framework baseline with short triangular tool-call bursts on top.
//!
//! Layout: the active period `[init, duration]` is split into one equal slot
//! per tool call (scheduled calls first, then retry groups). Each burst is
//! placed inside its slot with a seeded random duration and offset, keeping
//! at least [`GAP_MARGIN_MS`] of baseline on either side. Samples are taken
//! on the regular sampling grid plus every burst start, apex, end and gap
//! midpoint, so linear interpolation reproduces the burst shape exactly.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BashCategory, Sample, TaskTrace, ToolCallEvent, TraceError};
use crate::units::mib;

const GAP_MARGIN_MS: u64 = 600;
const CPU_BASELINE_PCT: f64 = 5.0;
const CPU_TEST_SPIKE_PCT: f64 = 3.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryGroupSpec {
    pub command: String,
    pub repetitions: u32,
    pub retained_mb_per_retry: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    pub task_id: String,
    pub baseline_mb: f64,
    pub duration_s: f64,
    pub init_s: f64,
    pub tool_schedule: Vec<(BashCategory, u32)>,
    /// Per-category overrides; see [`SynthParams::peak_mb`] for defaults.
    pub burst_peak_mb: BTreeMap<BashCategory, f64>,
    pub burst_duration_s: (f64, f64),
    pub retry_groups: Vec<RetryGroupSpec>,
    pub sample_interval_ms: u64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            task_id: "synthetic".into(),
            baseline_mb: 185.0,
            duration_s: 60.0,
            init_s: 0.0,
            tool_schedule: Vec::new(),
            burst_peak_mb: BTreeMap::new(),
            burst_duration_s: (1.0, 2.0),
            retry_groups: Vec::new(),
            sample_interval_ms: 1000,
            seed: 0,
        }
    }
}

impl SynthParams {
    /// Burst peak for a category. Values above `baseline_mb` are absolute
    /// resident sizes at the apex; smaller values are spike heights added to
    /// the current level (file exploration and git barely move memory).
    pub fn peak_mb(&self, cat: BashCategory) -> f64 {
        if let Some(v) = self.burst_peak_mb.get(&cat) {
            return *v;
        }
        match cat {
            BashCategory::Test => 518.0,
            BashCategory::PackageInstall => 233.0,
            BashCategory::FileExploration => 4.5,
            BashCategory::Git => 13.5,
            BashCategory::PythonSnippet => 50.0,
            BashCategory::Other => 20.0,
        }
    }

    fn apex_mb(&self, cat: BashCategory, level_mb: f64) -> f64 {
        let peak = self.peak_mb(cat);
        if peak > self.baseline_mb {
            peak + (level_mb - self.baseline_mb)
        } else {
            level_mb + peak
        }
    }

    fn validate(&self) -> Result<(), TraceError> {
        let bad = |m: String| Err(TraceError::InvalidParams(m));
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !finite_nonneg(self.baseline_mb) {
            return bad(format!("baseline_mb {}", self.baseline_mb));
        }
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return bad(format!("duration_s {}", self.duration_s));
        }
        if !finite_nonneg(self.init_s) || self.init_s > self.duration_s {
            return bad(format!("init_s {}", self.init_s));
        }
        let (lo, hi) = self.burst_duration_s;
        if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && lo <= hi) {
            return bad(format!("burst_duration_s ({lo}, {hi})"));
        }
        if let Some((c, v)) = self.burst_peak_mb.iter().find(|(_, v)| !finite_nonneg(**v)) {
            return bad(format!("burst_peak_mb[{c:?}] = {v}"));
        }
        for g in &self.retry_groups {
            if !finite_nonneg(g.retained_mb_per_retry) || g.command.trim().is_empty() {
                return bad(format!("retry group {:?}", g.command));
            }
        }
        if self.sample_interval_ms == 0 {
            return bad("sample_interval_ms must be positive".into());
        }
        Ok(())
    }
}

struct Burst {
    category: BashCategory,
    command: String,
    start: u64,
    mid: u64,
    end: u64,
    level_before: f64,
    apex: f64,
    level_after: f64,
}

pub fn synthesize_trace(params: &SynthParams) -> Result<TaskTrace, TraceError> {
    params.validate()?;
    let total = (params.duration_s * 1000.0).round() as u64;
    let init = (params.init_s * 1000.0).round() as u64;

    let mut planned: Vec<(BashCategory, String, f64)> = Vec::new();
    for &(cat, count) in &params.tool_schedule {
        for _ in 0..count {
            let i = planned.len();
            planned.push((cat, default_command(cat, i), 0.0));
        }
    }
    for g in &params.retry_groups {
        for _ in 0..g.repetitions {
            planned.push((BashCategory::Test, g.command.clone(), g.retained_mb_per_retry));
        }
    }

    let mut bursts = Vec::with_capacity(planned.len());
    if !planned.is_empty() {
        let slot = (total - init) / planned.len() as u64;
        let min_d = quantize((params.burst_duration_s.0 * 1000.0).round() as u64, 20).max(20);
        let max_d = quantize((params.burst_duration_s.1 * 1000.0).round() as u64, 20).max(min_d);
        if slot < max_d + 2 * GAP_MARGIN_MS {
            return Err(TraceError::ScheduleDoesNotFit(format!(
                "{} bursts of up to {max_d} ms need {} ms slots, only {slot} ms available",
                planned.len(),
                max_d + 2 * GAP_MARGIN_MS
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let mut level = params.baseline_mb;
        for (i, (category, command, retained)) in planned.into_iter().enumerate() {
            let d = quantize(rng.gen_range(min_d..=max_d), 20);
            let slack = slot - 2 * GAP_MARGIN_MS - d;
            let offset = rng.gen_range(0..=slack) / 10 * 10;
            let start = init + i as u64 * slot + GAP_MARGIN_MS + offset;
            let apex = params.apex_mb(category, level);
            let after = level + retained;
            bursts.push(Burst {
                category,
                command,
                start,
                mid: start + d / 2,
                end: start + d,
                level_before: level,
                apex,
                level_after: after,
            });
            level = after;
        }
    }

    let mut points: Vec<u64> = (0..=total / params.sample_interval_ms).map(|k| k * params.sample_interval_ms).collect();
    points.push(total);
    for (i, b) in bursts.iter().enumerate() {
        points.extend([b.start, b.mid, b.end]);
        let next = bursts.get(i + 1).map_or(total, |n| n.start);
        points.push((b.end + next) / 2);
    }
    if let Some(first) = bursts.first() {
        points.push((init + first.start) / 2);
    }
    points.sort_unstable();
    points.dedup();

    let samples = points
        .into_iter()
        .map(|t| {
            let (mem_mb, in_test) = memory_at(params.baseline_mb, &bursts, t);
            Sample {
                ts_ms: t,
                mem_bytes: mib(mem_mb),
                cpu_pct: if in_test { CPU_BASELINE_PCT + CPU_TEST_SPIKE_PCT } else { CPU_BASELINE_PCT },
            }
        })
        .collect();

    let calls = bursts.iter().map(|b| ToolCallEvent::bash(b.start, b.end, b.command.clone(), b.category)).collect();
    TaskTrace::new(params.task_id.clone(), init, total, samples, calls)
}

fn quantize(v: u64, q: u64) -> u64 {
    (v + q / 2) / q * q
}

fn default_command(cat: BashCategory, i: usize) -> String {
    match cat {
        BashCategory::Test => format!("pytest tests/test_case_{i}.py"),
        BashCategory::PackageInstall => format!("pip install pkg{i}"),
        BashCategory::PythonSnippet => format!("python -c 'import mod{i}'"),
        BashCategory::FileExploration => format!("ls src/dir{i}"),
        BashCategory::Git => "git status".into(),
        BashCategory::Other => format!("make target{i}"),
    }
}

/// Memory in MiB at `t`, and whether `t` is strictly inside a Test burst.
fn memory_at(baseline: f64, bursts: &[Burst], t: u64) -> (f64, bool) {
    let idx = bursts.partition_point(|b| b.end < t);
    match bursts.get(idx) {
        Some(b) if b.start <= t => {
            let v = if t <= b.mid {
                lerp(b.level_before, b.apex, t - b.start, b.mid - b.start)
            } else {
                lerp(b.apex, b.level_after, t - b.mid, b.end - b.mid)
            };
            let inside = b.start < t && t < b.end && b.category == BashCategory::Test;
            (v, inside)
        }
        _ => {
            let level = idx.checked_sub(1).map_or(baseline, |p| bursts[p].level_after);
            (level, false)
        }
    }
}

fn lerp(a: f64, b: f64, num: u64, den: u64) -> f64 {
    if den == 0 {
        b
    } else {
        a + (b - a) * num as f64 / den as f64
    }
}
