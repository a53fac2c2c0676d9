//! Hierarchical memory accounting with cgroup v2 `memory.high`,
//! `memory.max` and `memory.low` semantics, freezing, subtree kill and
//! atomic OOM groups.
//!
//! Nodes live in an arena indexed by [`NodeId`]; the root is always id 0.
//! Each node tracks the bytes charged directly to it (`local_bytes`) and its
//! hierarchical usage (local plus all live descendants). Dead nodes stay in
//! the arena so reports can still read their peaks.
//!
//! [`CgroupTree::charge`] never mutates on `Oom`: it reports the victims and
//! the caller applies the kill (see [`CgroupTree::charge_enforced`]).

use serde::{Deserialize, Serialize};

use crate::units::Limit;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub usize);

impl NodeId {
    pub const ROOT: NodeId = NodeId(0);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
pub enum Priority {
    High,
    #[default]
    Low,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct NodeLimits {
    pub high: Limit,
    pub max: Limit,
    /// Protection floor; 0 means unprotected.
    pub low: u64,
}

impl NodeLimits {
    pub const UNLIMITED: NodeLimits = NodeLimits { high: Limit::Unlimited, max: Limit::Unlimited, low: 0 };
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CgroupNode {
    pub id: NodeId,
    pub name: String,
    pub parent: Option<NodeId>,
    #[serde(skip)]
    children: Vec<NodeId>,
    pub usage_bytes: u64,
    pub local_bytes: u64,
    pub peak_bytes: u64,
    pub limits: NodeLimits,
    pub frozen: bool,
    pub oom_group: bool,
    pub priority: Priority,
    pub alive: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum ChargeOutcome {
    Ok,
    /// The charge was applied but usage is above `memory.high` somewhere on
    /// the path; `overshoot_bytes` is the largest such excess.
    OverHigh {
        overshoot_bytes: u64,
        breaching_node: NodeId,
    },
    /// The charge would exceed `memory.max` at `breaching_node`. Nothing was
    /// charged. `victims` is the set of nodes the OOM kill must take down,
    /// rooted at `victim_root`.
    Oom {
        breaching_node: NodeId,
        victim_root: NodeId,
        victims: Vec<NodeId>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CgroupError {
    #[error("unknown node {0:?}")]
    UnknownNode(NodeId),
    #[error("node {0:?} is dead")]
    Dead(NodeId),
    #[error("node {0:?} is frozen")]
    Frozen(NodeId),
    #[error("duplicate child name {0:?}")]
    DuplicateName(String),
    #[error("uncharge of {delta} bytes exceeds {available} bytes charged to node {node:?}")]
    Underflow { node: NodeId, delta: u64, available: u64 },
    #[error("charge delta must be positive")]
    ZeroCharge,
    #[error("node {0:?} still has live children")]
    HasChildren(NodeId),
    #[error("the root node cannot be removed")]
    RemoveRoot,
    #[error("no live session to select as OOM victim")]
    Empty,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CgroupTree {
    nodes: Vec<CgroupNode>,
}

impl Default for CgroupTree {
    fn default() -> Self {
        Self::new()
    }
}

impl CgroupTree {
    pub fn new() -> Self {
        let root = CgroupNode {
            id: NodeId::ROOT,
            name: String::new(),
            parent: None,
            children: Vec::new(),
            usage_bytes: 0,
            local_bytes: 0,
            peak_bytes: 0,
            limits: NodeLimits::UNLIMITED,
            frozen: false,
            oom_group: false,
            priority: Priority::High,
            alive: true,
        };
        CgroupTree { nodes: vec![root] }
    }

    pub fn node(&self, id: NodeId) -> Result<&CgroupNode, CgroupError> {
        self.nodes.get(id.0).ok_or(CgroupError::UnknownNode(id))
    }

    fn node_mut(&mut self, id: NodeId) -> Result<&mut CgroupNode, CgroupError> {
        self.nodes.get_mut(id.0).ok_or(CgroupError::UnknownNode(id))
    }

    fn alive(&self, id: NodeId) -> Result<&CgroupNode, CgroupError> {
        let n = self.node(id)?;
        if n.alive {
            Ok(n)
        } else {
            Err(CgroupError::Dead(id))
        }
    }

    pub fn nodes(&self) -> &[CgroupNode] {
        &self.nodes
    }

    pub fn usage(&self, id: NodeId) -> u64 {
        self.nodes.get(id.0).map_or(0, |n| n.usage_bytes)
    }

    pub fn children(&self, id: NodeId) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.get(id.0).into_iter().flat_map(|n| n.children.iter().copied()).filter(|c| self.nodes[c.0].alive)
    }

    /// `id` followed by its ancestors up to the root.
    pub fn path(&self, id: NodeId) -> Vec<NodeId> {
        let mut out = vec![id];
        let mut cur = id;
        while let Some(p) = self.nodes.get(cur.0).and_then(|n| n.parent) {
            out.push(p);
            cur = p;
        }
        out
    }

    /// Alive nodes of the subtree rooted at `id`, in preorder.
    pub fn subtree(&self, id: NodeId) -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut stack = vec![id];
        while let Some(n) = stack.pop() {
            if !self.nodes[n.0].alive {
                continue;
            }
            out.push(n);
            stack.extend(self.nodes[n.0].children.iter().rev().copied());
        }
        out
    }

    pub fn is_frozen(&self, id: NodeId) -> bool {
        self.path(id).iter().any(|p| self.nodes[p.0].frozen)
    }

    pub fn create_child(
        &mut self,
        parent: NodeId,
        name: &str,
        limits: NodeLimits,
        priority: Priority,
    ) -> Result<NodeId, CgroupError> {
        self.alive(parent)?;
        if self.is_frozen(parent) {
            return Err(CgroupError::Frozen(parent));
        }
        if self.children(parent).any(|c| self.nodes[c.0].name == name) {
            return Err(CgroupError::DuplicateName(name.to_string()));
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(CgroupNode {
            id,
            name: name.to_string(),
            parent: Some(parent),
            children: Vec::new(),
            usage_bytes: 0,
            local_bytes: 0,
            peak_bytes: 0,
            limits,
            frozen: false,
            oom_group: false,
            priority,
            alive: true,
        });
        self.nodes[parent.0].children.push(id);
        Ok(id)
    }

    pub fn set_limits(&mut self, id: NodeId, limits: NodeLimits) -> Result<(), CgroupError> {
        self.alive(id)?;
        self.node_mut(id)?.limits = limits;
        Ok(())
    }

    pub fn set_oom_group(&mut self, id: NodeId, on: bool) -> Result<(), CgroupError> {
        self.alive(id)?;
        self.node_mut(id)?.oom_group = on;
        Ok(())
    }

    /// Evaluates a charge without applying it.
    pub fn probe_charge(&self, id: NodeId, delta: u64) -> Result<ChargeOutcome, CgroupError> {
        self.alive(id)?;
        if delta == 0 {
            return Err(CgroupError::ZeroCharge);
        }
        if self.is_frozen(id) {
            return Err(CgroupError::Frozen(id));
        }
        let path = self.path(id);
        if let Some(&breach) = path
            .iter()
            .find(|p| self.nodes[p.0].limits.max.exceeded_by(self.nodes[p.0].usage_bytes.saturating_add(delta)))
        {
            let victim_root = self.oom_group_root(id, breach);
            return Ok(ChargeOutcome::Oom { breaching_node: breach, victim_root, victims: self.subtree(victim_root) });
        }
        let mut worst: Option<(u64, NodeId)> = None;
        for p in &path {
            let n = &self.nodes[p.0];
            let over = n.limits.high.overshoot(n.usage_bytes + delta);
            if over > 0 && worst.is_none_or(|(w, _)| over > w) {
                worst = Some((over, *p));
            }
        }
        Ok(match worst {
            Some((overshoot_bytes, breaching_node)) => ChargeOutcome::OverHigh { overshoot_bytes, breaching_node },
            None => ChargeOutcome::Ok,
        })
    }

    /// The victim is the requesting node. With `oom_group` set on any node
    /// between it and the OOM domain (inclusive), the kill widens to the
    /// highest such node.
    fn oom_group_root(&self, requester: NodeId, domain: NodeId) -> NodeId {
        let mut root = requester;
        for p in self.path(requester) {
            if self.nodes[p.0].oom_group {
                root = p;
            }
            if p == domain {
                break;
            }
        }
        root
    }

    /// Applies the charge unless it would OOM; an `Oom` outcome leaves the
    /// tree untouched.
    pub fn charge(&mut self, id: NodeId, delta: u64) -> Result<ChargeOutcome, CgroupError> {
        let outcome = self.probe_charge(id, delta)?;
        if !matches!(outcome, ChargeOutcome::Oom { .. }) {
            self.nodes[id.0].local_bytes += delta;
            for p in self.path(id) {
                let n = &mut self.nodes[p.0];
                n.usage_bytes += delta;
                n.peak_bytes = n.peak_bytes.max(n.usage_bytes);
            }
        }
        Ok(outcome)
    }

    /// [`charge`](Self::charge) followed by the OOM kill it calls for.
    pub fn charge_enforced(&mut self, id: NodeId, delta: u64) -> Result<ChargeOutcome, CgroupError> {
        let outcome = self.charge(id, delta)?;
        if let ChargeOutcome::Oom { victim_root, .. } = &outcome {
            self.kill_subtree(*victim_root)?;
        }
        Ok(outcome)
    }

    /// Releases bytes charged directly to `id`.
    pub fn uncharge(&mut self, id: NodeId, delta: u64) -> Result<(), CgroupError> {
        let available = self.alive(id)?.local_bytes;
        if delta > available {
            return Err(CgroupError::Underflow { node: id, delta, available });
        }
        self.nodes[id.0].local_bytes -= delta;
        for p in self.path(id) {
            self.nodes[p.0].usage_bytes -= delta;
        }
        Ok(())
    }

    pub fn freeze(&mut self, id: NodeId, on: bool) -> Result<(), CgroupError> {
        self.alive(id)?;
        self.node_mut(id)?.frozen = on;
        Ok(())
    }

    /// Kills `id` and every live descendant, releasing all their memory.
    pub fn kill_subtree(&mut self, id: NodeId) -> Result<Vec<NodeId>, CgroupError> {
        let freed = self.alive(id)?.usage_bytes;
        let killed = self.subtree(id);
        for k in &killed {
            let n = &mut self.nodes[k.0];
            n.alive = false;
            n.usage_bytes = 0;
            n.local_bytes = 0;
        }
        for p in self.path(id).into_iter().skip(1) {
            self.nodes[p.0].usage_bytes -= freed;
        }
        Ok(killed)
    }

    /// Removes a leaf, moving any residual charge to its parent. Returns the
    /// migrated byte count.
    pub fn remove(&mut self, id: NodeId) -> Result<u64, CgroupError> {
        let n = self.alive(id)?;
        let parent = n.parent.ok_or(CgroupError::RemoveRoot)?;
        if self.children(id).next().is_some() {
            return Err(CgroupError::HasChildren(id));
        }
        let residual = self.nodes[id.0].local_bytes;
        // Usage of the parent and above already includes the residual.
        self.nodes[parent.0].local_bytes += residual;
        let n = &mut self.nodes[id.0];
        n.local_bytes = 0;
        n.usage_bytes = 0;
        n.alive = false;
        Ok(residual)
    }

    /// Among live top-level sessions, the largest one above its `memory.low`
    /// protection; if all are protected, the largest overall. Ties go to the
    /// smaller id.
    pub fn select_oom_victim(&self) -> Result<NodeId, CgroupError> {
        let sessions: Vec<&CgroupNode> = self.children(NodeId::ROOT).map(|c| &self.nodes[c.0]).collect();
        let largest = |it: &mut dyn Iterator<Item = &&CgroupNode>| {
            it.max_by(|a, b| a.usage_bytes.cmp(&b.usage_bytes).then(b.id.cmp(&a.id))).map(|n| n.id)
        };
        largest(&mut sessions.iter().filter(|n| n.usage_bytes > n.limits.low))
            .or_else(|| largest(&mut sessions.iter()))
            .ok_or(CgroupError::Empty)
    }

    /// Sum of bytes charged directly to live nodes; equals root usage.
    pub fn live_local_total(&self) -> u64 {
        self.nodes.iter().filter(|n| n.alive).map(|n| n.local_bytes).sum()
    }

    pub fn snapshot(&self) -> TreeSnapshot {
        TreeSnapshot { nodes: self.nodes.clone() }
    }
}

/// JSON-serializable dump of every node, live or dead.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TreeSnapshot {
    pub nodes: Vec<CgroupNode>,
}
