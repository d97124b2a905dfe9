//! The rooted tree of generated agents.
//!
//! Node ids are assigned in creation order and never reused. Only children
//! that passed the validity check are stored; the others appear in the run's
//! event log alone. In [`Mode::NoOpenEnded`] the archive holds exactly one
//! node, the latest valid agent, whose parentage lives in the event log.

pub mod store;

pub use store::{load, manifest_hash, persist, ArchiveStore, Manifest, MANIFEST_FILE, NODES_DIR};

use crate::Mode;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::PathBuf;
use thiserror::Error;

pub type NodeId = u64;

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("node id {0} already present in the archive")]
    DuplicateId(NodeId),
    #[error("expected next node id {expected}, got {got}")]
    UnexpectedId { expected: NodeId, got: NodeId },
    #[error("node {id} refers to parent {parent} which is not in the archive")]
    DanglingParent { id: NodeId, parent: NodeId },
    #[error("non-root node {0} has no parent")]
    MissingParent(NodeId),
    #[error("root node must have id 0 and no parent")]
    BadRoot,
    #[error("root node must be compiled")]
    RootNotCompiled,
    #[error("unknown node id {0}")]
    UnknownNode(NodeId),
    #[error("node {node} is not a descendant of {ancestor}")]
    NotDescendant { ancestor: NodeId, node: NodeId },
    #[error("node {id}: {field} score {value} outside [0, 1]")]
    ScoreOutOfRange {
        id: NodeId,
        field: String,
        value: f64,
    },
    #[error("node {id}: stored compiled_children {stored} but {actual} compiled children present")]
    ChildCountMismatch {
        id: NodeId,
        stored: u32,
        actual: u32,
    },
    #[error("archive is empty")]
    Empty,
    #[error("operation `{0}` is not available in single-agent mode")]
    SingleAgentMode(&'static str),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt archive record {record}: {reason}")]
    CorruptRecord { record: String, reason: String },
    #[error("corrupt archive manifest: {0}")]
    CorruptManifest(String),
}

pub type Result<T, E = ArchiveError> = std::result::Result<T, E>;

/// Scores of one agent on one domain's splits.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DomainScores {
    pub train: f64,
    pub validation: Option<f64>,
    pub test: Option<f64>,
}

impl DomainScores {
    pub fn train_only(train: f64) -> Self {
        Self {
            train,
            validation: None,
            test: None,
        }
    }

    /// Validation aggregate when present, otherwise training aggregate.
    pub fn selection(&self) -> f64 {
        self.validation.unwrap_or(self.train)
    }

    fn check(&self, id: NodeId, domain: &str) -> Result<()> {
        let fields = [
            ("train", Some(self.train)),
            ("validation", self.validation),
            ("test", self.test),
        ];
        for (name, value) in fields {
            if let Some(v) = value {
                if !(0.0..=1.0).contains(&v) {
                    return Err(ArchiveError::ScoreOutOfRange {
                        id,
                        field: format!("{domain}.{name}"),
                        value: v,
                    });
                }
            }
        }
        Ok(())
    }
}

/// One archive entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentNode {
    pub id: NodeId,
    pub parent_id: Option<NodeId>,
    /// Opaque locator of the agent program, relative to the run's payload root.
    pub payload_ref: String,
    pub compiled: bool,
    pub compiled_children: u32,
    /// Per-domain scores keyed by domain name.
    pub scores: BTreeMap<String, DomainScores>,
    pub created_at_iteration: u64,
}

impl AgentNode {
    pub fn new(id: NodeId, parent_id: Option<NodeId>, payload_ref: impl Into<String>) -> Self {
        Self {
            id,
            parent_id,
            payload_ref: payload_ref.into(),
            compiled: true,
            compiled_children: 0,
            scores: BTreeMap::new(),
            created_at_iteration: 0,
        }
    }

    pub fn with_score(mut self, domain: impl Into<String>, scores: DomainScores) -> Self {
        self.scores.insert(domain.into(), scores);
        self
    }

    pub fn at_iteration(mut self, t: u64) -> Self {
        self.created_at_iteration = t;
        self
    }

    pub fn compiled(mut self, compiled: bool) -> Self {
        self.compiled = compiled;
        self
    }

    /// Unweighted mean over domains of each domain's selection score; 0 when
    /// the node carries no scores.
    pub fn selection_score(&self) -> f64 {
        if self.scores.is_empty() {
            return 0.0;
        }
        self.scores.values().map(DomainScores::selection).sum::<f64>() / self.scores.len() as f64
    }

    /// Unweighted mean of test scores over domains that have one.
    pub fn test_score(&self) -> Option<f64> {
        let tests: Vec<f64> = self.scores.values().filter_map(|s| s.test).collect();
        if tests.is_empty() {
            None
        } else {
            Some(tests.iter().sum::<f64>() / tests.len() as f64)
        }
    }

    pub(crate) fn check_scores(&self) -> Result<()> {
        self.scores
            .iter()
            .try_for_each(|(domain, s)| s.check(self.id, domain))
    }
}

/// Result of offering a child to the archive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AddOutcome {
    Added,
    /// The child did not compile; it is logged but not stored.
    Rejected,
    /// Single-agent mode: the previous sole member was dropped.
    Replaced { previous: NodeId },
}

#[derive(Debug, Clone)]
pub struct Archive {
    nodes: Vec<AgentNode>,
    children: Vec<Vec<NodeId>>,
    mode: Mode,
    run_id: String,
    next_id: NodeId,
    dirty: BTreeSet<NodeId>,
}

impl PartialEq for Archive {
    fn eq(&self, other: &Self) -> bool {
        self.nodes == other.nodes
            && self.mode == other.mode
            && self.run_id == other.run_id
            && self.next_id == other.next_id
    }
}

impl Archive {
    pub fn new(mode: Mode, run_id: impl Into<String>) -> Self {
        Self {
            nodes: Vec::new(),
            children: Vec::new(),
            mode,
            run_id: run_id.into(),
            next_id: 0,
            dirty: BTreeSet::new(),
        }
    }

    /// Archive containing only `root`.
    pub fn with_root(mode: Mode, run_id: impl Into<String>, root: AgentNode) -> Result<Self> {
        let mut archive = Self::new(mode, run_id);
        archive.add_node(root)?;
        Ok(archive)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Id the next generated agent will receive.
    pub fn next_id(&self) -> NodeId {
        self.next_id
    }

    pub fn nodes(&self) -> &[AgentNode] {
        &self.nodes
    }

    /// Most recently added node.
    pub fn latest(&self) -> Option<&AgentNode> {
        self.nodes.last()
    }

    fn position(&self, id: NodeId) -> Option<usize> {
        self.nodes.binary_search_by_key(&id, |n| n.id).ok()
    }

    pub fn get(&self, id: NodeId) -> Result<&AgentNode> {
        self.position(id)
            .map(|p| &self.nodes[p])
            .ok_or(ArchiveError::UnknownNode(id))
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.position(id).is_some()
    }

    /// Compiled children of `id` currently stored.
    pub fn children(&self, id: NodeId) -> Result<&[NodeId]> {
        self.position(id)
            .map(|p| self.children[p].as_slice())
            .ok_or(ArchiveError::UnknownNode(id))
    }

    /// Appends `node`. Non-compiled children are rejected without being stored.
    ///
    /// In single-agent mode a compiled child replaces the sole member instead.
    pub fn add_node(&mut self, node: AgentNode) -> Result<AddOutcome> {
        node.check_scores()?;
        if self.nodes.is_empty() {
            if node.id != 0 || node.parent_id.is_some() || self.next_id != 0 {
                return Err(ArchiveError::BadRoot);
            }
            if !node.compiled {
                return Err(ArchiveError::RootNotCompiled);
            }
            self.push(node);
            return Ok(AddOutcome::Added);
        }
        if self.contains(node.id) {
            return Err(ArchiveError::DuplicateId(node.id));
        }
        if node.id != self.next_id {
            return Err(ArchiveError::UnexpectedId {
                expected: self.next_id,
                got: node.id,
            });
        }
        let parent = node.parent_id.ok_or(ArchiveError::MissingParent(node.id))?;
        let parent_pos = self.position(parent).ok_or(ArchiveError::DanglingParent {
            id: node.id,
            parent,
        })?;
        if !node.compiled {
            return Ok(AddOutcome::Rejected);
        }
        if !self.mode.keeps_archive() {
            let previous = self.nodes[0].id;
            let mut node = node;
            node.parent_id = None;
            node.compiled_children = 0;
            self.nodes.clear();
            self.children.clear();
            self.push(node);
            return Ok(AddOutcome::Replaced { previous });
        }
        self.nodes[parent_pos].compiled_children += 1;
        self.children[parent_pos].push(node.id);
        self.dirty.insert(parent);
        self.push(node);
        Ok(AddOutcome::Added)
    }

    fn push(&mut self, node: AgentNode) {
        self.next_id = node.id + 1;
        self.dirty.insert(node.id);
        self.children.push(Vec::new());
        self.nodes.push(node);
    }

    /// Records the test score of `id` on `domain`.
    pub fn set_test_score(&mut self, id: NodeId, domain: &str, score: f64) -> Result<()> {
        let pos = self.position(id).ok_or(ArchiveError::UnknownNode(id))?;
        if !(0.0..=1.0).contains(&score) {
            return Err(ArchiveError::ScoreOutOfRange {
                id,
                field: format!("{domain}.test"),
                value: score,
            });
        }
        self.nodes[pos]
            .scores
            .entry(domain.to_string())
            .or_default()
            .test = Some(score);
        self.dirty.insert(id);
        Ok(())
    }

    /// All nodes reachable from `id` by child edges, excluding `id`.
    pub fn descendants(&self, id: NodeId) -> Result<BTreeSet<NodeId>> {
        let mut out = BTreeSet::new();
        let mut queue: VecDeque<NodeId> = self.children(id)?.iter().copied().collect();
        while let Some(next) = queue.pop_front() {
            if out.insert(next) {
                queue.extend(self.children(next)?.iter().copied());
            }
        }
        Ok(out)
    }

    /// Number of edges on the path from ancestor `i` down to descendant `j`.
    pub fn tree_distance(&self, i: NodeId, j: NodeId) -> Result<u32> {
        self.get(i)?;
        let mut current = self.get(j)?;
        let mut steps = 0u32;
        while let Some(parent) = current.parent_id {
            steps += 1;
            if parent == i {
                return Ok(steps);
            }
            current = self.get(parent)?;
        }
        Err(ArchiveError::NotDescendant {
            ancestor: i,
            node: j,
        })
    }

    /// Path from the root to `id`, root first.
    pub fn lineage(&self, id: NodeId) -> Result<Vec<NodeId>> {
        let mut path = vec![id];
        let mut current = self.get(id)?;
        while let Some(parent) = current.parent_id {
            path.push(parent);
            current = self.get(parent)?;
        }
        path.reverse();
        Ok(path)
    }

    /// Checks every structural invariant: sorted unique ids, parents with
    /// smaller ids, one root, scores in range and exact child counts.
    pub fn validate(&self) -> Result<()> {
        let first = self.nodes.first().ok_or(ArchiveError::Empty)?;
        if self.mode.keeps_archive() {
            if first.id != 0 || first.parent_id.is_some() {
                return Err(ArchiveError::BadRoot);
            }
        } else if self.nodes.len() != 1 || first.parent_id.is_some() {
            return Err(ArchiveError::SingleAgentMode("validate"));
        }
        let mut counts: BTreeMap<NodeId, u32> = BTreeMap::new();
        for (pos, node) in self.nodes.iter().enumerate() {
            node.check_scores()?;
            if pos > 0 {
                let prev = self.nodes[pos - 1].id;
                if node.id <= prev {
                    return Err(ArchiveError::DuplicateId(node.id));
                }
                let parent = node.parent_id.ok_or(ArchiveError::MissingParent(node.id))?;
                if parent >= node.id || !self.contains(parent) {
                    return Err(ArchiveError::DanglingParent {
                        id: node.id,
                        parent,
                    });
                }
                if node.compiled {
                    *counts.entry(parent).or_default() += 1;
                }
            }
        }
        for node in &self.nodes {
            let actual = counts.get(&node.id).copied().unwrap_or(0);
            if actual != node.compiled_children {
                return Err(ArchiveError::ChildCountMismatch {
                    id: node.id,
                    stored: node.compiled_children,
                    actual,
                });
            }
        }
        Ok(())
    }

    /// Node with the highest selection score; ties resolved to the lowest id.
    pub fn best_by_selection(&self) -> Option<&AgentNode> {
        self.nodes.iter().fold(None, |best: Option<&AgentNode>, n| match best {
            Some(b) if b.selection_score() >= n.selection_score() => Some(b),
            _ => Some(n),
        })
    }

    pub(crate) fn take_dirty(&mut self) -> BTreeSet<NodeId> {
        std::mem::take(&mut self.dirty)
    }

    /// Rebuilds an archive from stored parts, recomputing the child index.
    pub(crate) fn from_parts(
        mode: Mode,
        run_id: String,
        next_id: NodeId,
        nodes: Vec<AgentNode>,
    ) -> Self {
        let mut children = vec![Vec::new(); nodes.len()];
        let ids: Vec<NodeId> = nodes.iter().map(|n| n.id).collect();
        for node in &nodes {
            if let Some(parent) = node.parent_id {
                if let Ok(pos) = ids.binary_search(&parent) {
                    if node.compiled {
                        children[pos].push(node.id);
                    }
                }
            }
        }
        Self {
            nodes,
            children,
            mode,
            run_id,
            next_id,
            dirty: BTreeSet::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn root() -> AgentNode {
        AgentNode::new(0, None, "root").with_score("d", DomainScores::train_only(0.1))
    }

    fn child(id: NodeId, parent: NodeId) -> AgentNode {
        AgentNode::new(id, Some(parent), format!("c{id}")).with_score("d", DomainScores::train_only(0.2))
    }

    fn chain(n: u64) -> Archive {
        let mut a = Archive::with_root(Mode::Full, "r", root()).unwrap();
        for id in 1..n {
            a.add_node(child(id, id - 1)).unwrap();
        }
        a
    }

    #[test]
    fn root_initialization() {
        let a = Archive::with_root(Mode::Full, "r", root()).unwrap();
        assert_eq!(a.len(), 1);
        assert_eq!(a.next_id(), 1);
    }

    #[test]
    fn compiled_child_counts_once() {
        let mut a = Archive::with_root(Mode::Full, "r", root()).unwrap();
        assert_eq!(a.add_node(child(1, 0)).unwrap(), AddOutcome::Added);
        assert_eq!(a.get(0).unwrap().compiled_children, 1);
        a.validate().unwrap();
    }

    #[test]
    fn non_compiled_child_is_not_stored() {
        let mut a = chain(2);
        let out = a.add_node(child(2, 1).compiled(false)).unwrap();
        assert_eq!(out, AddOutcome::Rejected);
        assert_eq!(a.len(), 2);
        assert_eq!(a.get(1).unwrap().compiled_children, 0);
        // the rejected id is not consumed
        assert_eq!(a.next_id(), 2);
    }

    #[test]
    fn corrupt_inserts_are_errors() {
        let mut a = chain(2);
        assert!(matches!(a.add_node(child(1, 0)), Err(ArchiveError::DuplicateId(1))));
        assert!(matches!(
            a.add_node(child(2, 9)),
            Err(ArchiveError::DanglingParent { id: 2, parent: 9 })
        ));
        assert!(matches!(
            a.add_node(child(5, 0)),
            Err(ArchiveError::UnexpectedId { expected: 2, got: 5 })
        ));
        let mut orphan = child(2, 0);
        orphan.parent_id = None;
        assert!(matches!(a.add_node(orphan), Err(ArchiveError::MissingParent(2))));
        let mut bad = child(2, 0);
        bad.scores.insert("d".into(), DomainScores::train_only(1.5));
        assert!(matches!(a.add_node(bad), Err(ArchiveError::ScoreOutOfRange { .. })));
    }

    #[test]
    fn descendant_and_distance_queries() {
        let a = chain(3);
        assert!(a.descendants(2).unwrap().is_empty());
        assert_eq!(a.descendants(0).unwrap(), BTreeSet::from([1, 2]));
        assert_eq!(a.tree_distance(0, 1).unwrap(), 1);
        let long = chain(4);
        assert_eq!(long.tree_distance(0, 3).unwrap(), 3);
        assert!(matches!(
            long.tree_distance(3, 0),
            Err(ArchiveError::NotDescendant { .. })
        ));
        assert!(matches!(a.descendants(7), Err(ArchiveError::UnknownNode(7))));
    }

    #[test]
    fn lineage_walks_to_root() {
        let a = chain(3);
        assert_eq!(a.lineage(0).unwrap(), vec![0]);
        assert_eq!(a.lineage(2).unwrap(), vec![0, 1, 2]);
        assert!(a.lineage(3).is_err());
    }

    #[test]
    fn single_agent_mode_replaces() {
        let mut a = Archive::with_root(Mode::NoOpenEnded, "r", root()).unwrap();
        let out = a.add_node(child(1, 0)).unwrap();
        assert_eq!(out, AddOutcome::Replaced { previous: 0 });
        assert_eq!(a.len(), 1);
        assert_eq!(a.latest().unwrap().id, 1);
        assert_eq!(a.latest().unwrap().parent_id, None);
        assert_eq!(a.add_node(child(2, 1).compiled(false)).unwrap(), AddOutcome::Rejected);
        assert_eq!(a.len(), 1);
        a.validate().unwrap();
    }

    #[test]
    fn selection_score_prefers_validation() {
        let n = AgentNode::new(0, None, "x")
            .with_score(
                "a",
                DomainScores {
                    train: 0.2,
                    validation: Some(0.6),
                    test: None,
                },
            )
            .with_score("b", DomainScores::train_only(0.2));
        assert!((n.selection_score() - 0.4).abs() < 1e-15);
    }
}
