//! Heterogeneous member/job graph with text features and labels.

mod ego;
mod io;
mod metapath;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

pub use ego::{sample_ego_graph, EgoGraph, EgoNode};
pub use io::{load_graph, parse_graph, write_graph, GraphRecord};
pub use metapath::{
    compute_proximity, metapath_exists, sample_metapath_triple, Metapath, MetapathSet,
    ProximityVector, Step, Triple, DEFAULT_METAPATHS,
};

/// One-based node id; members come first, then jobs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub usize);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityType {
    Member,
    Job,
}

impl EntityType {
    pub fn index(self) -> usize {
        match self {
            EntityType::Member => 0,
            EntityType::Job => 1,
        }
    }

    pub fn letter(self) -> char {
        match self {
            EntityType::Member => 'U',
            EntityType::Job => 'I',
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RelationType {
    /// Member interacted with a job (u -> i).
    #[serde(rename = "ui")]
    MemberJob,
    /// Member follows or co-works with a member (u -> u').
    #[serde(rename = "uu")]
    MemberMember,
}

impl RelationType {
    pub fn source(self) -> EntityType {
        EntityType::Member
    }

    pub fn target(self) -> EntityType {
        match self {
            RelationType::MemberJob => EntityType::Job,
            RelationType::MemberMember => EntityType::Member,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("unknown node id {0}")]
    UnknownNode(usize),
    #[error("duplicate node id {0}")]
    DuplicateNode(usize),
    #[error("node ids must be dense, 1-based, members first: {0}")]
    Layout(String),
    #[error("{rel:?} edge {src} -> {dst} does not match the relation signature")]
    EdgeType {
        rel: RelationType,
        src: usize,
        dst: usize,
    },
    #[error("node {node} is a {actual:?}, expected a {expected:?}")]
    TypeMismatch {
        node: usize,
        expected: EntityType,
        actual: EntityType,
    },
    #[error("invalid metapath {0:?}")]
    Metapath(String),
    #[error("node {0} is not in the ego graph")]
    NotInEgo(usize),
    #[error("node {0} has no neighbor to start the metapath from")]
    NoIntermediates(usize),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NodeData {
    pub features: BTreeMap<String, String>,
    pub labels: BTreeMap<String, usize>,
}

/// Validated, immutable graph. Adjacency lists are sorted and duplicate-free.
#[derive(Clone, Debug, PartialEq)]
pub struct HetGraph {
    n_members: usize,
    n_jobs: usize,
    nodes: Vec<NodeData>,
    // Indexed by node id - 1; empty for nodes of the wrong source type.
    ui_out: Vec<Vec<NodeId>>,
    ui_in: Vec<Vec<NodeId>>,
    uu_out: Vec<Vec<NodeId>>,
    uu_in: Vec<Vec<NodeId>>,
}

impl HetGraph {
    pub fn empty() -> Self {
        GraphBuilder::new(0, 0).build().expect("empty graph is valid")
    }

    pub fn n_members(&self) -> usize {
        self.n_members
    }

    pub fn n_jobs(&self) -> usize {
        self.n_jobs
    }

    pub fn n_nodes(&self) -> usize {
        self.n_members + self.n_jobs
    }

    pub fn members(&self) -> impl Iterator<Item = NodeId> {
        (1..=self.n_members).map(NodeId)
    }

    pub fn jobs(&self) -> impl Iterator<Item = NodeId> {
        (self.n_members + 1..=self.n_nodes()).map(NodeId)
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> {
        (1..=self.n_nodes()).map(NodeId)
    }

    pub fn contains(&self, k: NodeId) -> bool {
        k.0 >= 1 && k.0 <= self.n_nodes()
    }

    pub fn check(&self, k: NodeId) -> Result<(), GraphError> {
        if self.contains(k) {
            Ok(())
        } else {
            Err(GraphError::UnknownNode(k.0))
        }
    }

    pub fn node_type(&self, k: NodeId) -> Result<EntityType, GraphError> {
        self.check(k)?;
        Ok(self.type_of(k))
    }

    /// Type of a node known to exist.
    pub fn type_of(&self, k: NodeId) -> EntityType {
        if k.0 <= self.n_members {
            EntityType::Member
        } else {
            EntityType::Job
        }
    }

    pub fn data(&self, k: NodeId) -> Result<&NodeData, GraphError> {
        self.check(k)?;
        Ok(&self.nodes[k.0 - 1])
    }

    pub fn feature(&self, k: NodeId, name: &str) -> Option<&str> {
        self.data(k).ok()?.features.get(name).map(String::as_str)
    }

    pub fn label(&self, k: NodeId, task: &str) -> Option<usize> {
        self.data(k).ok()?.labels.get(task).copied()
    }

    /// Sorted out-neighbors of `k` under `r`.
    pub fn neighbors(&self, k: NodeId, r: RelationType) -> Result<&[NodeId], GraphError> {
        let t = self.node_type(k)?;
        if t != r.source() {
            return Err(GraphError::TypeMismatch {
                node: k.0,
                expected: r.source(),
                actual: t,
            });
        }
        Ok(self.out_list(k, r))
    }

    /// Sorted in-neighbors of `k` under `r` (sources of edges ending at `k`).
    pub fn in_neighbors(&self, k: NodeId, r: RelationType) -> Result<&[NodeId], GraphError> {
        let t = self.node_type(k)?;
        if t != r.target() {
            return Err(GraphError::TypeMismatch {
                node: k.0,
                expected: r.target(),
                actual: t,
            });
        }
        Ok(self.in_list(k, r))
    }

    fn out_list(&self, k: NodeId, r: RelationType) -> &[NodeId] {
        match r {
            RelationType::MemberJob => &self.ui_out[k.0 - 1],
            RelationType::MemberMember => &self.uu_out[k.0 - 1],
        }
    }

    fn in_list(&self, k: NodeId, r: RelationType) -> &[NodeId] {
        match r {
            RelationType::MemberJob => &self.ui_in[k.0 - 1],
            RelationType::MemberMember => &self.uu_in[k.0 - 1],
        }
    }

    /// Every node adjacent to `k` under any relation and direction, sorted, unique.
    pub fn undirected_neighbors(&self, k: NodeId) -> Vec<NodeId> {
        let i = k.0 - 1;
        let mut v: Vec<NodeId> = self.ui_out[i]
            .iter()
            .chain(&self.ui_in[i])
            .chain(&self.uu_out[i])
            .chain(&self.uu_in[i])
            .copied()
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn has_edge(&self, r: RelationType, src: NodeId, dst: NodeId) -> bool {
        self.contains(src)
            && self.type_of(src) == r.source()
            && self.out_list(src, r).binary_search(&dst).is_ok()
    }

    pub fn edges(&self, r: RelationType) -> impl Iterator<Item = (NodeId, NodeId)> + '_ {
        self.members().flat_map(move |u| self.out_list(u, r).iter().map(move |&v| (u, v)))
    }

    pub fn edge_count(&self, r: RelationType) -> usize {
        self.members().map(|u| self.out_list(u, r).len()).sum()
    }

    /// A copy without the listed edges.
    pub fn without_edges(&self, r: RelationType, removed: &[(NodeId, NodeId)]) -> HetGraph {
        let mut g = self.clone();
        for &(s, d) in removed {
            if !g.contains(s) || !g.contains(d) {
                continue;
            }
            let (out, inn) = match r {
                RelationType::MemberJob => (&mut g.ui_out, &mut g.ui_in),
                RelationType::MemberMember => (&mut g.uu_out, &mut g.uu_in),
            };
            if let Ok(p) = out[s.0 - 1].binary_search(&d) {
                out[s.0 - 1].remove(p);
            }
            if let Ok(p) = inn[d.0 - 1].binary_search(&s) {
                inn[d.0 - 1].remove(p);
            }
        }
        g
    }

    /// Zero-based row of a node in node-indexed tables.
    pub fn row(&self, k: NodeId) -> usize {
        k.0 - 1
    }
}

/// Collects nodes and edges, then validates them into a [`HetGraph`].
#[derive(Clone, Debug)]
pub struct GraphBuilder {
    n_members: usize,
    n_jobs: usize,
    nodes: Vec<Option<NodeData>>,
    edges: Vec<(RelationType, NodeId, NodeId)>,
}

impl GraphBuilder {
    pub fn new(n_members: usize, n_jobs: usize) -> Self {
        GraphBuilder {
            n_members,
            n_jobs,
            nodes: vec![Some(NodeData::default()); n_members + n_jobs],
            edges: Vec::new(),
        }
    }

    pub fn set_feature(&mut self, k: NodeId, name: &str, text: &str) -> &mut Self {
        if let Some(Some(d)) = k.0.checked_sub(1).and_then(|i| self.nodes.get_mut(i)) {
            d.features.insert(name.to_string(), text.to_string());
        }
        self
    }

    pub fn set_label(&mut self, k: NodeId, task: &str, label: usize) -> &mut Self {
        if let Some(Some(d)) = k.0.checked_sub(1).and_then(|i| self.nodes.get_mut(i)) {
            d.labels.insert(task.to_string(), label);
        }
        self
    }

    pub fn add_edge(&mut self, r: RelationType, src: NodeId, dst: NodeId) -> &mut Self {
        self.edges.push((r, src, dst));
        self
    }

    pub fn build(self) -> Result<HetGraph, GraphError> {
        let n = self.n_members + self.n_jobs;
        let nm = self.n_members;
        let type_of = |k: NodeId| {
            if k.0 <= nm {
                EntityType::Member
            } else {
                EntityType::Job
            }
        };
        let mut g = HetGraph {
            n_members: self.n_members,
            n_jobs: self.n_jobs,
            nodes: self.nodes.into_iter().map(Option::unwrap_or_default).collect(),
            ui_out: vec![Vec::new(); n],
            ui_in: vec![Vec::new(); n],
            uu_out: vec![Vec::new(); n],
            uu_in: vec![Vec::new(); n],
        };
        for (r, s, d) in self.edges {
            for k in [s, d] {
                if k.0 == 0 || k.0 > n {
                    return Err(GraphError::UnknownNode(k.0));
                }
            }
            if type_of(s) != r.source() || type_of(d) != r.target() {
                return Err(GraphError::EdgeType {
                    rel: r,
                    src: s.0,
                    dst: d.0,
                });
            }
            let (out, inn) = match r {
                RelationType::MemberJob => (&mut g.ui_out, &mut g.ui_in),
                RelationType::MemberMember => (&mut g.uu_out, &mut g.uu_in),
            };
            out[s.0 - 1].push(d);
            inn[d.0 - 1].push(s);
        }
        for list in g
            .ui_out
            .iter_mut()
            .chain(g.ui_in.iter_mut())
            .chain(g.uu_out.iter_mut())
            .chain(g.uu_in.iter_mut())
        {
            list.sort_unstable();
            list.dedup();
        }
        Ok(g)
    }
}
