//! Randomly subsampled D-hop neighborhoods.

use std::collections::{HashMap, HashSet, VecDeque};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{EntityType, GraphError, HetGraph, NodeId, RelationType};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EgoNode {
    pub id: NodeId,
    pub hop: usize,
}

/// Sampled neighborhood of a center node. Nodes are kept in canonical order:
/// ascending hop, members before jobs, ascending id.
#[derive(Clone, Debug, PartialEq)]
pub struct EgoGraph {
    pub center: NodeId,
    pub depth: usize,
    pub nodes: Vec<EgoNode>,
    /// Induced directed edges among the sampled nodes.
    pub edges: Vec<(RelationType, NodeId, NodeId)>,
    hop_of: HashMap<NodeId, usize>,
}

impl EgoGraph {
    pub fn contains(&self, i: NodeId) -> bool {
        self.hop_of.contains_key(&i)
    }

    pub fn shortest_distance(&self, i: NodeId) -> Result<usize, GraphError> {
        self.hop_of
            .get(&i)
            .copied()
            .ok_or(GraphError::NotInEgo(i.0))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.iter().map(|n| n.id)
    }

    /// Ego graph holding only the center.
    pub fn singleton(center: NodeId, depth: usize) -> Self {
        EgoGraph::from_nodes(center, depth, vec![(center, 0)], Vec::new(), |_| EntityType::Member)
    }

    /// Ego graph over a given node set (which must contain `center`); edges and
    /// hops are derived as in [`sample_ego_graph`]. Nodes unreachable from the
    /// center inside the set are dropped.
    pub fn with_nodes(g: &HetGraph, center: NodeId, depth: usize, ids: &[NodeId]) -> Result<Self, GraphError> {
        g.check(center)?;
        let mut order: Vec<NodeId> = ids.to_vec();
        for &v in &order {
            g.check(v)?;
        }
        order.push(center);
        order.sort_unstable();
        order.dedup();
        let edges = induced_edges(g, &order);
        let hops = bfs_hops(center, &order, &edges);
        let kept: Vec<NodeId> = order.into_iter().filter(|v| hops.contains_key(v)).collect();
        let edges = induced_edges(g, &kept);
        let nodes = kept.iter().map(|&v| (v, hops[&v])).collect();
        Ok(EgoGraph::from_nodes(center, depth, nodes, edges, |v| g.type_of(v)))
    }

    fn from_nodes(
        center: NodeId,
        depth: usize,
        mut nodes: Vec<(NodeId, usize)>,
        edges: Vec<(RelationType, NodeId, NodeId)>,
        type_of: impl Fn(NodeId) -> EntityType,
    ) -> Self {
        nodes.sort_by_key(|&(id, hop)| (hop, type_of(id), id));
        let hop_of = nodes.iter().copied().collect();
        EgoGraph {
            center,
            depth,
            nodes: nodes.into_iter().map(|(id, hop)| EgoNode { id, hop }).collect(),
            edges,
            hop_of,
        }
    }
}

/// Breadth-first expansion from `k` over edges in either direction, keeping at most
/// `fanout` unvisited neighbors per expanded node. Hop distances are shortest
/// paths within the induced subgraph of the sampled nodes.
pub fn sample_ego_graph(
    g: &HetGraph,
    k: NodeId,
    depth: usize,
    fanout: usize,
    seed: u64,
) -> Result<EgoGraph, GraphError> {
    g.check(k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut visited: HashSet<NodeId> = HashSet::from([k]);
    let mut order = vec![k];
    let mut frontier = vec![k];
    for _ in 0..depth {
        let mut next = Vec::new();
        for &u in &frontier {
            let cand: Vec<NodeId> = g
                .undirected_neighbors(u)
                .into_iter()
                .filter(|v| !visited.contains(v))
                .collect();
            let picked: Vec<NodeId> = if cand.len() > fanout {
                let mut idx = sample(&mut rng, cand.len(), fanout).into_vec();
                idx.sort_unstable();
                idx.into_iter().map(|i| cand[i]).collect()
            } else {
                cand
            };
            for v in picked {
                visited.insert(v);
                order.push(v);
                next.push(v);
            }
        }
        if next.is_empty() {
            break;
        }
        frontier = next;
    }
    order.sort_unstable();
    let edges = induced_edges(g, &order);
    let hops = bfs_hops(k, &order, &edges);
    let nodes = order.iter().map(|&v| (v, hops[&v])).collect();
    Ok(EgoGraph::from_nodes(k, depth, nodes, edges, |v| g.type_of(v)))
}

fn induced_edges(g: &HetGraph, sorted_nodes: &[NodeId]) -> Vec<(RelationType, NodeId, NodeId)> {
    let mut edges = Vec::new();
    for &u in sorted_nodes {
        if g.type_of(u) != EntityType::Member {
            continue;
        }
        for rel in [RelationType::MemberJob, RelationType::MemberMember] {
            for &v in g.out_list(u, rel) {
                if sorted_nodes.binary_search(&v).is_ok() {
                    edges.push((rel, u, v));
                }
            }
        }
    }
    edges
}

fn bfs_hops(
    center: NodeId,
    nodes: &[NodeId],
    edges: &[(RelationType, NodeId, NodeId)],
) -> HashMap<NodeId, usize> {
    let mut adj: HashMap<NodeId, Vec<NodeId>> = nodes.iter().map(|&v| (v, Vec::new())).collect();
    for &(_, s, d) in edges {
        adj.get_mut(&s).expect("endpoint sampled").push(d);
        adj.get_mut(&d).expect("endpoint sampled").push(s);
    }
    let mut hop = HashMap::from([(center, 0)]);
    let mut queue = VecDeque::from([center]);
    while let Some(u) = queue.pop_front() {
        let h = hop[&u];
        for &v in &adj[&u] {
            if !hop.contains_key(&v) {
                hop.insert(v, h + 1);
                queue.push_back(v);
            }
        }
    }
    hop
}
