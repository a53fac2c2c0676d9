//! Per-tool-call resource domains.
//!
//! Every tool call runs in an ephemeral child cgroup named
//! `tool_<pid>_<ts>` under its session. The domain is removed when the call
//! exits; memory still charged to it at that point moves to the session.
//!
//! [`DomainBackend`] abstracts the cgroup operations. [`CgroupTree`] is the
//! in-process backend used by the replay engine. [`CgroupFsBackend`] drives a
//! real cgroup v2 mount and is provided as an extension point only.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cgmodel::{CgroupError, CgroupTree, NodeId, NodeLimits, Priority};
use crate::intent::{clamp_to_session, hint_to_limits, HintPolicyConfig, ResourceHint};
use crate::units::Limit;

#[derive(Debug, thiserror::Error)]
pub enum DomainError {
    #[error(transparent)]
    Cgroup(#[from] CgroupError),
    #[error("cgroupfs: {0}")]
    Io(#[from] io::Error),
    #[error("session {0} is not alive")]
    DeadSession(String),
    #[error("unknown domain {0:?}")]
    UnknownDomain(DomainId),
    #[error("session {0} already has an open tool domain")]
    AlreadyOpen(String),
}

pub trait DomainBackend {
    type Handle: Clone + std::fmt::Debug;

    fn is_alive(&self, h: &Self::Handle) -> bool;
    fn create_child(
        &mut self,
        parent: &Self::Handle,
        name: &str,
        limits: NodeLimits,
        priority: Priority,
    ) -> Result<Self::Handle, DomainError>;
    fn limits(&self, h: &Self::Handle) -> Result<NodeLimits, DomainError>;
    fn set_limits(&mut self, h: &Self::Handle, limits: NodeLimits) -> Result<(), DomainError>;
    fn read_usage(&self, h: &Self::Handle) -> Result<u64, DomainError>;
    fn read_peak(&self, h: &Self::Handle) -> Result<u64, DomainError>;
    /// Removes the domain and returns the bytes migrated to its parent.
    /// Removing an already-removed domain is a no-op returning 0.
    fn remove(&mut self, h: &Self::Handle) -> Result<u64, DomainError>;
}

impl DomainBackend for CgroupTree {
    type Handle = NodeId;

    fn is_alive(&self, h: &NodeId) -> bool {
        self.node(*h).is_ok_and(|n| n.alive)
    }

    fn create_child(
        &mut self,
        parent: &NodeId,
        name: &str,
        limits: NodeLimits,
        priority: Priority,
    ) -> Result<NodeId, DomainError> {
        Ok(CgroupTree::create_child(self, *parent, name, limits, priority)?)
    }

    fn limits(&self, h: &NodeId) -> Result<NodeLimits, DomainError> {
        Ok(self.node(*h)?.limits)
    }

    fn set_limits(&mut self, h: &NodeId, limits: NodeLimits) -> Result<(), DomainError> {
        Ok(CgroupTree::set_limits(self, *h, limits)?)
    }

    fn read_usage(&self, h: &NodeId) -> Result<u64, DomainError> {
        Ok(self.node(*h)?.usage_bytes)
    }

    fn read_peak(&self, h: &NodeId) -> Result<u64, DomainError> {
        Ok(self.node(*h)?.peak_bytes)
    }

    fn remove(&mut self, h: &NodeId) -> Result<u64, DomainError> {
        if !DomainBackend::is_alive(self, h) {
            self.node(*h)?;
            return Ok(0);
        }
        Ok(CgroupTree::remove(self, *h)?)
    }
}

/// Backend over a mounted cgroup v2 hierarchy. Handles are directories.
/// Requires the memory controller to be enabled in the parent's
/// `cgroup.subtree_control`; moving processes into the domain is the
/// caller's job.
#[derive(Debug, Clone)]
pub struct CgroupFsBackend {
    pub root: PathBuf,
}

impl CgroupFsBackend {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        CgroupFsBackend { root: root.into() }
    }

    fn read_u64(path: &Path) -> Result<u64, DomainError> {
        let s = fs::read_to_string(path)?;
        s.trim().parse().map_err(|_| {
            DomainError::Io(io::Error::new(io::ErrorKind::InvalidData, format!("{}: {s:?}", path.display())))
        })
    }

    fn read_limit(path: &Path) -> Result<Limit, DomainError> {
        let s = fs::read_to_string(path)?;
        s.trim().parse().map_err(|_| {
            DomainError::Io(io::Error::new(io::ErrorKind::InvalidData, format!("{}: {s:?}", path.display())))
        })
    }
}

impl DomainBackend for CgroupFsBackend {
    type Handle = PathBuf;

    fn is_alive(&self, h: &PathBuf) -> bool {
        h.is_dir()
    }

    fn create_child(
        &mut self,
        parent: &PathBuf,
        name: &str,
        limits: NodeLimits,
        _priority: Priority,
    ) -> Result<PathBuf, DomainError> {
        let dir = parent.join(name);
        fs::create_dir(&dir)?;
        self.set_limits(&dir, limits)?;
        Ok(dir)
    }

    fn limits(&self, h: &PathBuf) -> Result<NodeLimits, DomainError> {
        Ok(NodeLimits {
            high: Self::read_limit(&h.join("memory.high"))?,
            max: Self::read_limit(&h.join("memory.max"))?,
            low: Self::read_u64(&h.join("memory.low"))?,
        })
    }

    fn set_limits(&mut self, h: &PathBuf, limits: NodeLimits) -> Result<(), DomainError> {
        fs::write(h.join("memory.high"), limits.high.to_string())?;
        fs::write(h.join("memory.max"), limits.max.to_string())?;
        fs::write(h.join("memory.low"), limits.low.to_string())?;
        Ok(())
    }

    fn read_usage(&self, h: &PathBuf) -> Result<u64, DomainError> {
        Self::read_u64(&h.join("memory.current"))
    }

    fn read_peak(&self, h: &PathBuf) -> Result<u64, DomainError> {
        Self::read_u64(&h.join("memory.peak"))
    }

    /// The kernel recharges remaining pages to the parent on rmdir, so the
    /// residual is read from `memory.current` just before removal.
    fn remove(&mut self, h: &PathBuf) -> Result<u64, DomainError> {
        let residual = self.read_usage(h).unwrap_or(0);
        match fs::remove_dir(h) {
            Ok(()) => Ok(residual),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(0),
            Err(e) => Err(e.into()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DomainId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ToolOutcome {
    Completed,
    OomKilled,
    Frozen,
    FeedbackRetried,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCallReport {
    pub workload: String,
    pub domain_name: String,
    pub peak_bytes: u64,
    pub duration_ms: u64,
    pub outcome: ToolOutcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feedback: Option<String>,
}

#[derive(Debug, Clone)]
struct OpenDomain<H> {
    handle: H,
    workload: String,
    name: String,
    opened_ms: u64,
}

pub fn domain_name(pid: u64, ts_ms: u64) -> String {
    format!("tool_{pid}_{ts_ms}")
}

/// Tracks open tool domains; at most one per session.
#[derive(Debug, Clone)]
pub struct DomainManager<H> {
    hints: HintPolicyConfig,
    open: BTreeMap<DomainId, OpenDomain<H>>,
    next: u64,
}

impl<H: Clone + std::fmt::Debug> DomainManager<H> {
    pub fn new(hints: HintPolicyConfig) -> Self {
        DomainManager { hints, open: BTreeMap::new(), next: 0 }
    }

    /// Per-tool `memory.high` for an optional hint, never above the
    /// session's `memory.max`.
    pub fn hint_limit(&self, hint: Option<ResourceHint>, session_max: Limit) -> Limit {
        match hint {
            Some(h) => clamp_to_session(hint_to_limits(h, &self.hints), session_max),
            None => Limit::Unlimited,
        }
    }

    pub fn open_tool_domain<B: DomainBackend<Handle = H>>(
        &mut self,
        backend: &mut B,
        session: &H,
        workload: &str,
        pid: u64,
        ts_ms: u64,
        hint: Option<ResourceHint>,
    ) -> Result<DomainId, DomainError> {
        if !backend.is_alive(session) {
            return Err(DomainError::DeadSession(workload.to_string()));
        }
        let session_max = backend.limits(session)?.max;
        let high = self.hint_limit(hint, session_max);
        self.open_with_high(backend, session, workload, pid, ts_ms, high)
    }

    /// Opens a domain with an explicit `memory.high`.
    pub fn open_with_high<B: DomainBackend<Handle = H>>(
        &mut self,
        backend: &mut B,
        session: &H,
        workload: &str,
        pid: u64,
        ts_ms: u64,
        high: Limit,
    ) -> Result<DomainId, DomainError> {
        if !backend.is_alive(session) {
            return Err(DomainError::DeadSession(workload.to_string()));
        }
        if self.open.values().any(|d| d.workload == workload) {
            return Err(DomainError::AlreadyOpen(workload.to_string()));
        }
        let name = domain_name(pid, ts_ms);
        let limits = NodeLimits { high, ..NodeLimits::UNLIMITED };
        let handle = backend.create_child(session, &name, limits, Priority::Low)?;
        let id = DomainId(self.next);
        self.next += 1;
        self.open.insert(id, OpenDomain { handle, workload: workload.to_string(), name, opened_ms: ts_ms });
        Ok(id)
    }

    pub fn handle(&self, id: DomainId) -> Option<&H> {
        self.open.get(&id).map(|d| &d.handle)
    }

    pub fn open_count(&self) -> usize {
        self.open.len()
    }

    /// Closes a tool call that ran to completion.
    pub fn close_tool_domain<B: DomainBackend<Handle = H>>(
        &mut self,
        backend: &mut B,
        id: DomainId,
        now_ms: u64,
    ) -> Result<ToolCallReport, DomainError> {
        self.finish(backend, id, now_ms, ToolOutcome::Completed, None)
    }

    /// Closes a domain with an explicit outcome; the node may already be
    /// dead (killed), in which case removal is a no-op.
    pub fn finish<B: DomainBackend<Handle = H>>(
        &mut self,
        backend: &mut B,
        id: DomainId,
        now_ms: u64,
        outcome: ToolOutcome,
        feedback: Option<String>,
    ) -> Result<ToolCallReport, DomainError> {
        let d = self.open.remove(&id).ok_or(DomainError::UnknownDomain(id))?;
        let peak_bytes = backend.read_peak(&d.handle).unwrap_or(0);
        backend.remove(&d.handle)?;
        Ok(ToolCallReport {
            workload: d.workload,
            domain_name: d.name,
            peak_bytes,
            duration_ms: now_ms.saturating_sub(d.opened_ms),
            outcome,
            feedback,
        })
    }
}
