//! The discrete-event replay loop.
//!
//! Time is integer microseconds of virtual time. Each workload carries its
//! own progress clock through its trace and one pending event; the loop
//! always handles the earliest event, ties broken by workload index, so a
//! replay is a pure function of the scenario.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use super::report::{EngineEvent, EventKind};
use super::{EngineError, Scenario};
use crate::cgmodel::{CgroupTree, ChargeOutcome, NodeId, NodeLimits, Priority};
use crate::domains::{DomainId, DomainManager, ToolCallReport, ToolOutcome};
use crate::intent::{
    clamp_to_session, parse_hint, render_feedback, retry_scale, scale_demand, FeedbackKind, ResourceHint,
};
use crate::policy::{
    graduated_step, predictive_limit, reactive_decide, reactive_revalidate, throttle_delay, EscalationState,
    LadderAction, PolicyKind, PolicySpec, PressureSignal, ScheduledAction,
};
use crate::trace::TaskTrace;
use crate::units::{Limit, MIB};

const US_PER_MS: u64 = 1000;

/// Runs longer than this multiple of the longest trace are aborted.
pub const RUNTIME_CAP_FACTOR: u64 = 100;

#[derive(Debug, Clone, Copy, PartialEq)]
enum St {
    Ready,
    Throttled,
    Stalled { since: u64 },
    Frozen { since: u64, deficit: bool },
    Done,
    Killed,
}

#[derive(Debug, Clone, Copy)]
struct Pending {
    requested: u64,
    target: u64,
    step: u64,
    stalled_from: Option<u64>,
}

#[derive(Debug, Clone, Copy)]
struct OpenCall {
    domain: DomainId,
    node: NodeId,
    call: usize,
}

#[derive(Debug)]
pub(super) struct Wl {
    pub name: String,
    pub priority: Priority,
    trace: Arc<TaskTrace>,
    session: NodeId,
    memory_low: u64,
    hints: BTreeMap<usize, ResourceHint>,
    pub total_us: u64,
    progress: u64,
    next: u64,
    st: St,
    pending: Option<Pending>,
    consecutive: u32,
    cursor: usize,
    open: Option<OpenCall>,
    retries: u32,
    scale: f64,
    window_base: f64,
    last_grow: Option<u64>,
    pub completion_us: Option<u64>,
    pub oom_killed: bool,
    pub requests: u64,
    pub delay_triggers: u64,
    pub throttle_us: u64,
    pub stall_us: u64,
    pub feedback_retries: u64,
    pub latencies_us: Vec<u64>,
}

impl Wl {
    fn active(&self) -> bool {
        !matches!(self.st, St::Done | St::Killed)
    }
}

struct ReactiveMonitor {
    history: VecDeque<(u64, f64)>,
    pending: Option<ScheduledAction>,
    next: u64,
}

pub(super) struct Outcome {
    pub workloads: Vec<Wl>,
    pub delay_triggers: u64,
    pub freezes: u64,
    pub feedbacks: u64,
    pub kills: u64,
    pub peak_global: u64,
    pub end_us: u64,
    pub tool_calls: Vec<ToolCallReport>,
    pub events: Vec<EngineEvent>,
    pub final_tree: CgroupTree,
}

pub(super) struct Sim<'a> {
    sc: &'a Scenario,
    spec: PolicySpec,
    tree: CgroupTree,
    domains: DomainManager<NodeId>,
    wl: Vec<Wl>,
    tick: u64,
    stall_timeout: u64,
    delay_triggers: u64,
    freezes: u64,
    feedbacks: u64,
    kills: u64,
    peak_global: u64,
    tool_calls: Vec<ToolCallReport>,
    events: Vec<EngineEvent>,
    reactive: Option<ReactiveMonitor>,
}

fn us_from_ms_f(ms: f64) -> u64 {
    (ms * US_PER_MS as f64).round().max(0.0) as u64
}

impl<'a> Sim<'a> {
    pub fn new(sc: &'a Scenario, traces: Vec<Arc<TaskTrace>>) -> Result<Self, EngineError> {
        let spec = sc.policy;
        let mut tree = CgroupTree::new();
        let mut wl = Vec::with_capacity(sc.workloads.len());
        for (w, trace) in sc.workloads.iter().zip(traces) {
            let max = match spec.kind {
                PolicyKind::Predictive if !w.history_peaks.is_empty() => {
                    let p = predictive_limit(&w.history_peaks, spec.predictive.percentile)
                        .map_err(|e| EngineError::Invalid(e.to_string()))?;
                    Limit::Bytes(p)
                }
                _ => w.memory_max,
            };
            let limits = NodeLimits { high: w.memory_high, max, low: w.memory_low };
            let session = tree.create_child(NodeId::ROOT, &w.name, limits, w.priority)?;
            // Session-wide OOM is atomic except under the intent protocol,
            // where a tool-level OOM is turned into feedback instead.
            tree.set_oom_group(session, spec.kind != PolicyKind::IntentDriven)?;
            let hints = w.hints.iter().filter_map(|(k, v)| parse_hint(v).ok().map(|h| (*k, h))).collect();
            wl.push(Wl {
                name: w.name.clone(),
                priority: w.priority,
                total_us: trace.total_ms() * US_PER_MS,
                trace,
                session,
                memory_low: w.memory_low,
                hints,
                progress: 0,
                next: 0,
                st: St::Ready,
                pending: None,
                consecutive: 0,
                cursor: 0,
                open: None,
                retries: 0,
                scale: 1.0,
                window_base: 0.0,
                last_grow: None,
                completion_us: None,
                oom_killed: false,
                requests: 0,
                delay_triggers: 0,
                throttle_us: 0,
                stall_us: 0,
                feedback_retries: 0,
                latencies_us: Vec::new(),
            });
        }
        let reactive = (spec.kind == PolicyKind::ReactiveUserSpace).then(|| ReactiveMonitor {
            history: VecDeque::new(),
            pending: None,
            next: 0,
        });
        Ok(Sim {
            sc,
            spec,
            tree,
            domains: DomainManager::new(spec.intent.hint_mapping),
            wl,
            tick: sc.tick_ms.saturating_mul(US_PER_MS),
            stall_timeout: sc.stall_timeout_ms.saturating_mul(US_PER_MS),
            delay_triggers: 0,
            freezes: 0,
            feedbacks: 0,
            kills: 0,
            peak_global: 0,
            tool_calls: Vec::new(),
            events: Vec::new(),
            reactive,
        })
    }

    pub fn run(mut self) -> Result<Outcome, EngineError> {
        let longest = self.wl.iter().map(|w| w.total_us).max().unwrap_or(0).max(self.tick);
        let cap = longest.saturating_mul(RUNTIME_CAP_FACTOR);
        let mut end = 0;
        while let Some((i, t)) = self
            .wl
            .iter()
            .enumerate()
            .filter(|(_, w)| w.active())
            .map(|(i, w)| (i, w.next))
            .min_by_key(|&(i, t)| (t, i))
        {
            if let Some(m) = &self.reactive {
                if m.next <= t {
                    let at = m.next;
                    self.monitor(at)?;
                    continue;
                }
            }
            if t > cap {
                return Err(EngineError::NonTerminating { cap_ms: cap / US_PER_MS });
            }
            end = end.max(t);
            self.process(i, t)?;
            debug_assert_eq!(self.tree.usage(NodeId::ROOT), self.tree.live_local_total());
            debug_assert!(self.tree.usage(NodeId::ROOT) <= self.sc.physical_budget);
        }
        debug_assert_eq!(self.domains.open_count(), 0);
        Ok(Outcome {
            workloads: self.wl,
            delay_triggers: self.delay_triggers,
            freezes: self.freezes,
            feedbacks: self.feedbacks,
            kills: self.kills,
            peak_global: self.peak_global,
            end_us: end,
            tool_calls: self.tool_calls,
            events: self.events,
            final_tree: self.tree,
        })
    }

    fn log(&mut self, now: u64, i: usize, kind: EventKind, reason: &str) {
        let t_ms = now as f64 / US_PER_MS as f64;
        if kind == EventKind::Throttle {
            if let Some(last) = self.events.iter_mut().rev().find(|e| e.workload == self.wl[i].name) {
                if last.kind == EventKind::Throttle {
                    last.count += 1;
                    return;
                }
            }
        }
        self.events.push(EngineEvent {
            t_ms,
            workload: self.wl[i].name.clone(),
            kind,
            reason: reason.to_string(),
            count: 1,
        });
    }

    fn process(&mut self, i: usize, now: u64) -> Result<(), EngineError> {
        match self.wl[i].st {
            St::Ready => self.begin_step(i, now),
            St::Throttled => self.attempt(i, now),
            St::Stalled { .. } => {
                self.attempt(i, now)?;
                if let St::Stalled { since } = self.wl[i].st {
                    if now - since >= self.stall_timeout {
                        self.on_stall_timeout(i, now)?;
                    }
                }
                Ok(())
            }
            St::Frozen { since, deficit } => self.reevaluate(i, now, since, deficit),
            St::Done | St::Killed => Ok(()),
        }
    }

    fn graduated(&self) -> bool {
        self.spec.kind.is_graduated()
    }

    fn intent(&self) -> bool {
        self.spec.kind == PolicyKind::IntentDriven
    }

    fn charge_node(&self, i: usize) -> NodeId {
        let w = &self.wl[i];
        w.open.map_or(w.session, |o| o.node)
    }

    fn session_max(&self, i: usize) -> Limit {
        self.tree.node(self.wl[i].session).map_or(Limit::Unlimited, |n| n.limits.max)
    }

    fn target(&self, i: usize, at_us: u64) -> u64 {
        let w = &self.wl[i];
        let raw = w.trace.demand_at_f(at_us as f64 / US_PER_MS as f64).unwrap_or(0.0);
        let d = if w.open.is_some() && w.scale < 1.0 { scale_demand(raw, w.window_base, w.scale) } else { raw };
        d.round().max(0.0) as u64
    }

    fn handle_boundaries(&mut self, i: usize, now: u64) -> Result<(), EngineError> {
        let now_ms = now / US_PER_MS;
        if let Some(o) = self.wl[i].open {
            let end = self.wl[i].trace.tool_calls()[o.call].end_ms * US_PER_MS;
            if self.wl[i].progress < end {
                return Ok(());
            }
            let r = self.domains.close_tool_domain(&mut self.tree, o.domain, now_ms)?;
            self.tool_calls.push(r);
            let w = &mut self.wl[i];
            w.open = None;
            w.cursor += 1;
            w.retries = 0;
            w.scale = 1.0;
        }
        let w = &self.wl[i];
        let Some(call) = w.trace.tool_calls().get(w.cursor) else {
            return Ok(());
        };
        let (start, end) = (call.start_ms * US_PER_MS, call.end_ms * US_PER_MS);
        if w.progress < start || w.progress >= end {
            return Ok(());
        }
        let session_max = self.session_max(i);
        let high = if !self.intent() {
            Limit::Unlimited
        } else if w.retries > 0 {
            // Feedback retries run without the hint's limit.
            clamp_to_session(Limit::Unlimited, session_max)
        } else {
            self.domains.hint_limit(w.hints.get(&w.cursor).copied(), session_max)
        };
        let (session, name, cursor) = (w.session, w.name.clone(), w.cursor);
        let window_base = w.trace.demand_at_f(call.start_ms as f64).unwrap_or(0.0);
        let domain = self.domains.open_with_high(&mut self.tree, &session, &name, cursor as u64, now_ms, high)?;
        let node = *self.domains.handle(domain).expect("domain just opened");
        let w = &mut self.wl[i];
        w.open = Some(OpenCall { domain, node, call: cursor });
        w.window_base = window_base;
        Ok(())
    }

    fn next_boundary(&self, i: usize) -> u64 {
        let w = &self.wl[i];
        let calls = w.trace.tool_calls();
        match w.open {
            Some(o) => calls[o.call].end_ms * US_PER_MS,
            None => calls.get(w.cursor).map_or(w.total_us, |c| c.start_ms * US_PER_MS),
        }
    }

    fn begin_step(&mut self, i: usize, now: u64) -> Result<(), EngineError> {
        self.handle_boundaries(i, now)?;
        let w = &self.wl[i];
        if w.progress >= w.total_us {
            return self.complete(i, now);
        }
        let boundary = self.next_boundary(i);
        let step = self.tick.min(w.total_us - w.progress).min(boundary.saturating_sub(w.progress).max(1));
        let target = self.target(i, w.progress + step);
        let usage = self.tree.usage(w.session);
        if target <= usage {
            self.release(i, usage - target)?;
            let w = &mut self.wl[i];
            w.progress += step;
            w.next = now + step;
            return Ok(());
        }
        let w = &mut self.wl[i];
        w.pending = Some(Pending { requested: now, target, step, stalled_from: None });
        w.requests += 1;
        w.last_grow = Some(now);
        if self.graduated() {
            let delay = self.delay_for(i, now, target - usage);
            if delay > 0.0 {
                self.wl[i].consecutive += 1;
                let esc = EscalationState {
                    consecutive_throttles: self.wl[i].consecutive,
                    frozen_for_ms: None,
                    feedback_available: self.feedback_available(i),
                };
                match graduated_step(&esc, &self.spec.graduated) {
                    LadderAction::Freeze => return self.freeze(i, now, false, "consecutive throttles"),
                    _ => {
                        let d = us_from_ms_f(delay);
                        self.delay_triggers += 1;
                        let w = &mut self.wl[i];
                        w.delay_triggers += 1;
                        w.throttle_us += d;
                        w.st = St::Throttled;
                        w.next = now + d;
                        self.log(now, i, EventKind::Throttle, "memory.high");
                        return Ok(());
                    }
                }
            }
            self.wl[i].consecutive = 0;
        }
        self.attempt(i, now)
    }

    /// Frees `bytes` from the open tool domain first, then the session.
    fn release(&mut self, i: usize, bytes: u64) -> Result<(), EngineError> {
        let mut left = bytes;
        if let Some(o) = self.wl[i].open {
            let from_child = left.min(self.tree.node(o.node)?.local_bytes);
            if from_child > 0 {
                self.tree.uncharge(o.node, from_child)?;
            }
            left -= from_child;
        }
        if left > 0 {
            let s = self.wl[i].session;
            let take = left.min(self.tree.node(s)?.local_bytes);
            self.tree.uncharge(s, take)?;
        }
        Ok(())
    }

    fn overshoot_on_path(&self, node: NodeId, delta: u64) -> (u64, Option<NodeId>) {
        let mut worst = (0, None);
        for p in self.tree.path(node) {
            let n = &self.tree.nodes()[p.0];
            let over = n.limits.high.overshoot(n.usage_bytes + delta);
            if over > worst.0 {
                worst = (over, Some(p));
            }
        }
        worst
    }

    /// A high-priority workload is stalled on the budget, or is growing
    /// while this request (plus the unused part of every high-priority
    /// `memory.low` reservation) would push utilization past the watermark.
    fn high_priority_pressure(&self, i: usize, now: u64, delta: u64) -> bool {
        if self.wl[i].priority == Priority::High {
            return false;
        }
        let highs =
            || self.wl.iter().enumerate().filter(|(j, w)| *j != i && w.active() && w.priority == Priority::High);
        if highs().any(|(_, w)| matches!(w.st, St::Stalled { .. })) {
            return true;
        }
        let horizon = now.saturating_sub(2 * self.tick);
        if !highs().any(|(_, w)| w.last_grow.is_some_and(|t| t >= horizon)) {
            return false;
        }
        let reserve: u64 = highs().map(|(_, w)| w.memory_low.saturating_sub(self.tree.usage(w.session))).sum();
        let projected = self.tree.usage(NodeId::ROOT) + delta + reserve;
        projected as f64 > self.sc.high_watermark * self.sc.physical_budget as f64
    }

    fn delay_for(&self, i: usize, now: u64, delta: u64) -> f64 {
        if !self.graduated() {
            return 0.0;
        }
        let (overshoot_bytes, breaching_node) = self.overshoot_on_path(self.charge_node(i), delta);
        let signal = PressureSignal {
            global_utilization: (self.tree.usage(NodeId::ROOT) + delta) as f64 / self.sc.physical_budget as f64,
            breaching_node,
            overshoot_bytes,
            high_priority_stalled: self.high_priority_pressure(i, now, delta),
        };
        throttle_delay(&self.spec, self.wl[i].priority, &signal)
    }

    fn feedback_available(&self, i: usize) -> bool {
        let w = &self.wl[i];
        self.intent() && w.open.is_some() && w.retries < self.spec.intent.max_retries
    }

    fn attempt(&mut self, i: usize, now: u64) -> Result<(), EngineError> {
        let Some(p) = self.wl[i].pending else {
            self.wl[i].st = St::Ready;
            return self.begin_step(i, now);
        };
        let usage = self.tree.usage(self.wl[i].session);
        if p.target <= usage {
            return self.succeed(i, now, 0);
        }
        let delta = p.target - usage;
        let node = self.charge_node(i);
        if let ChargeOutcome::Oom { breaching_node, victim_root, .. } = self.tree.probe_charge(node, delta)? {
            return self.on_oom(i, now, delta, breaching_node, victim_root);
        }
        if self.tree.usage(NodeId::ROOT) + delta > self.sc.physical_budget {
            let w = &mut self.wl[i];
            if !matches!(w.st, St::Stalled { .. }) {
                w.st = St::Stalled { since: now };
            }
            if let Some(pp) = w.pending.as_mut() {
                pp.stalled_from.get_or_insert(now);
            }
            w.next = now + self.tick;
            return Ok(());
        }
        self.tree.charge(node, delta)?;
        self.succeed(i, now, delta)
    }

    fn succeed(&mut self, i: usize, now: u64, delta: u64) -> Result<(), EngineError> {
        let root = self.tree.usage(NodeId::ROOT);
        self.peak_global = self.peak_global.max(root);
        let contended = root as f64 > self.sc.high_watermark * self.sc.physical_budget as f64;
        let extra = if delta > 0 && contended {
            us_from_ms_f(self.sc.contention_slope_ms_per_mb * delta as f64 / MIB as f64)
        } else {
            0
        };
        let w = &mut self.wl[i];
        let p = w.pending.take().expect("pending request");
        w.latencies_us.push(now - p.requested + extra);
        if let Some(s) = p.stalled_from {
            w.stall_us += now - s;
        }
        w.progress += p.step;
        w.st = St::Ready;
        w.next = now + extra + p.step;
        Ok(())
    }

    fn on_oom(
        &mut self,
        i: usize,
        now: u64,
        delta: u64,
        breaching: NodeId,
        victim_root: NodeId,
    ) -> Result<(), EngineError> {
        let tool_level = self.wl[i].open.is_some_and(|o| o.node == victim_root);
        if tool_level && self.feedback_available(i) {
            let node = self.charge_node(i);
            let peak = self.tree.usage(node) + delta;
            let limit = self.tree.node(breaching)?.limits.max.bytes().unwrap_or(0);
            return self.feedback(i, now, FeedbackKind::OomKilled, Some((peak, limit)));
        }
        self.kill_session(i, now, "memory.max")
    }

    fn on_stall_timeout(&mut self, i: usize, now: u64) -> Result<(), EngineError> {
        if !self.graduated() {
            let victim = self.tree.select_oom_victim()?;
            let j = self.owner(victim)?;
            self.kill_session(j, now, "stall timeout")?;
            if j != i && matches!(self.wl[i].st, St::Stalled { .. }) {
                self.wl[i].st = St::Stalled { since: now };
                self.attempt(i, now)?;
            }
            return Ok(());
        }
        let j = self.graduated_victim()?;
        if !matches!(self.wl[j].st, St::Frozen { .. }) {
            self.freeze(j, now, true, "stall timeout")?;
        }
        if let St::Stalled { .. } = self.wl[i].st {
            self.wl[i].st = St::Stalled { since: now };
        }
        Ok(())
    }

    /// Largest live low-priority session; falls back to the generic rule.
    fn graduated_victim(&self) -> Result<usize, EngineError> {
        let low = self
            .wl
            .iter()
            .enumerate()
            .filter(|(_, w)| w.active() && w.priority == Priority::Low)
            .max_by(|(a, wa), (b, wb)| self.tree.usage(wa.session).cmp(&self.tree.usage(wb.session)).then(b.cmp(a)))
            .map(|(j, _)| j);
        match low {
            Some(j) => Ok(j),
            None => self.owner(self.tree.select_oom_victim()?),
        }
    }

    fn owner(&self, session: NodeId) -> Result<usize, EngineError> {
        self.wl
            .iter()
            .position(|w| w.session == session)
            .ok_or_else(|| EngineError::Invalid(format!("node {session:?} is not a session")))
    }

    fn freeze(&mut self, i: usize, now: u64, deficit: bool, reason: &str) -> Result<(), EngineError> {
        self.tree.freeze(self.wl[i].session, true)?;
        self.freezes += 1;
        let w = &mut self.wl[i];
        w.st = St::Frozen { since: now, deficit };
        w.next = now + self.tick;
        self.log(now, i, EventKind::Freeze, reason);
        Ok(())
    }

    fn pending_delta(&self, i: usize) -> Option<u64> {
        let w = &self.wl[i];
        w.pending.map(|p| p.target.saturating_sub(self.tree.usage(w.session)))
    }

    /// Memory is actually short: someone else waits on the budget, this
    /// workload's own request does not fit, or a high-priority workload is
    /// under pressure.
    fn deficit(&self, i: usize, now: u64) -> bool {
        let others_stalled =
            self.wl.iter().enumerate().any(|(j, w)| j != i && w.active() && matches!(w.st, St::Stalled { .. }));
        others_stalled
            || self.pending_delta(i).is_some_and(|d| {
                self.tree.usage(NodeId::ROOT) + d > self.sc.physical_budget || self.high_priority_pressure(i, now, d)
            })
    }

    fn thaw(&mut self, i: usize, now: u64, reason: &str) -> Result<(), EngineError> {
        self.tree.freeze(self.wl[i].session, false)?;
        self.log(now, i, EventKind::Thaw, reason);
        let w = &mut self.wl[i];
        w.consecutive = 0;
        w.st = St::Ready;
        if w.pending.is_some() {
            self.attempt(i, now)
        } else {
            self.begin_step(i, now)
        }
    }

    /// A freeze is lifted as soon as its cause is gone. After the freeze
    /// threshold the ladder moves on to feedback, or to a kill when memory
    /// is still short; an over-`memory.high` freeze with no shortage is
    /// lifted instead.
    fn reevaluate(&mut self, i: usize, now: u64, since: u64, deficit: bool) -> Result<(), EngineError> {
        let delta = self.pending_delta(i);
        let short = self.deficit(i, now);
        let persists = if deficit { short } else { delta.is_some_and(|d| d > 0 && self.delay_for(i, now, d) > 0.0) };
        if !persists {
            return self.thaw(i, now, "pressure resolved");
        }
        let frozen_for = (now - since) / US_PER_MS;
        let esc = EscalationState {
            consecutive_throttles: self.wl[i].consecutive,
            frozen_for_ms: Some(frozen_for),
            feedback_available: self.feedback_available(i),
        };
        let expired = frozen_for >= self.spec.graduated.feedback_after_frozen_ms;
        match graduated_step(&esc, &self.spec.graduated) {
            LadderAction::Feedback => self.feedback(i, now, FeedbackKind::Throttled, None),
            LadderAction::Kill if short => self.kill_session(i, now, "frozen with persistent deficit"),
            _ if expired && !short => self.thaw(i, now, "freeze expired without deficit"),
            _ => {
                self.wl[i].next = now + self.tick;
                Ok(())
            }
        }
    }

    /// Kills the tool call, tells the agent, and replays the call's window
    /// with reduced demand.
    fn feedback(
        &mut self,
        i: usize,
        now: u64,
        kind: FeedbackKind,
        info: Option<(u64, u64)>,
    ) -> Result<(), EngineError> {
        let o = self.wl[i].open.take().expect("feedback needs an open tool call");
        let (peak, limit) = match info {
            Some(x) => x,
            None => {
                let n = self.tree.node(o.node)?;
                let want = n.usage_bytes + self.pending_delta(i).unwrap_or(0);
                let limit = n.limits.high.bytes().or(self.session_max(i).bytes()).unwrap_or(0);
                (n.peak_bytes.max(want), limit)
            }
        };
        let msg = render_feedback(peak, limit, kind);
        if self.tree.node(o.node)?.alive {
            self.tree.kill_subtree(o.node)?;
        }
        let r = self.domains.finish(
            &mut self.tree,
            o.domain,
            now / US_PER_MS,
            ToolOutcome::FeedbackRetried,
            Some(msg.rendered),
        )?;
        self.tool_calls.push(r);
        self.feedbacks += 1;
        self.log(
            now,
            i,
            EventKind::Feedback,
            match kind {
                FeedbackKind::OomKilled => "tool call hit memory.max",
                FeedbackKind::Throttled => "frozen tool call",
            },
        );
        if self.tree.node(self.wl[i].session)?.frozen {
            self.tree.freeze(self.wl[i].session, false)?;
        }
        let rho = self.spec.intent.reduction_factor;
        let w = &mut self.wl[i];
        w.retries += 1;
        w.feedback_retries += 1;
        w.scale = retry_scale(rho, w.retries);
        w.progress = w.trace.tool_calls()[o.call].start_ms * US_PER_MS;
        w.pending = None;
        w.consecutive = 0;
        w.st = St::Ready;
        w.next = now;
        Ok(())
    }

    fn kill_session(&mut self, i: usize, now: u64, reason: &str) -> Result<(), EngineError> {
        let frozen = matches!(self.wl[i].st, St::Frozen { .. });
        let session = self.wl[i].session;
        if self.tree.node(session)?.alive {
            self.tree.kill_subtree(session)?;
        }
        if let Some(o) = self.wl[i].open.take() {
            let outcome = if frozen { ToolOutcome::Frozen } else { ToolOutcome::OomKilled };
            let r = self.domains.finish(&mut self.tree, o.domain, now / US_PER_MS, outcome, None)?;
            self.tool_calls.push(r);
        }
        self.kills += 1;
        let w = &mut self.wl[i];
        w.st = St::Killed;
        w.oom_killed = true;
        w.pending = None;
        self.log(now, i, EventKind::Kill, reason);
        Ok(())
    }

    fn complete(&mut self, i: usize, now: u64) -> Result<(), EngineError> {
        let session = self.wl[i].session;
        self.tree.kill_subtree(session)?;
        let w = &mut self.wl[i];
        w.st = St::Done;
        w.completion_us = Some(now);
        Ok(())
    }

    fn monitor(&mut self, at: u64) -> Result<(), EngineError> {
        let params = self.spec.reactive;
        let util = self.tree.usage(NodeId::ROOT) as f64 / self.sc.physical_budget as f64;
        let at_ms = at / US_PER_MS;
        let m = self.reactive.as_mut().expect("reactive monitor");
        m.next = at + self.tick;
        m.history.push_back((at_ms, util));
        while m.history.front().is_some_and(|(t, _)| t + params.window_ms <= at_ms) {
            m.history.pop_front();
        }
        match m.pending {
            Some(a) if at_ms >= a.execute_at_ms => {
                m.pending = None;
                if reactive_revalidate(util, &params) {
                    m.history.clear();
                    if let Some(j) = self.reactive_victim() {
                        self.kill_session(j, at, "reactive daemon")?;
                    }
                }
            }
            Some(_) => {}
            None => {
                let hist: Vec<(u64, f64)> = m.history.iter().copied().collect();
                m.pending = reactive_decide(&hist, &params, at_ms);
            }
        }
        Ok(())
    }

    /// Largest live session in the lowest priority class present.
    fn reactive_victim(&self) -> Option<usize> {
        let pick = |prio: Priority| {
            self.wl
                .iter()
                .enumerate()
                .filter(|(_, w)| w.active() && w.priority == prio)
                .max_by(|(a, wa), (b, wb)| self.tree.usage(wa.session).cmp(&self.tree.usage(wb.session)).then(b.cmp(a)))
                .map(|(j, _)| j)
        };
        pick(Priority::Low).or_else(|| pick(Priority::High))
    }
}
