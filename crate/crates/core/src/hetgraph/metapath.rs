//! Typed path schemas, their existence test, proximity vectors and triple sampling.

use std::collections::BTreeSet;
use std::fmt;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{EgoGraph, EntityType, GraphError, HetGraph, NodeId, RelationType};

/// One traversal step: a relation followed forward (source to target) or backward.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Step {
    pub rel: RelationType,
    pub reverse: bool,
}

impl Step {
    fn between(a: EntityType, b: EntityType) -> Option<Step> {
        use EntityType::*;
        match (a, b) {
            (Member, Member) => Some(Step {
                rel: RelationType::MemberMember,
                reverse: false,
            }),
            (Member, Job) => Some(Step {
                rel: RelationType::MemberJob,
                reverse: false,
            }),
            (Job, Member) => Some(Step {
                rel: RelationType::MemberJob,
                reverse: true,
            }),
            (Job, Job) => None,
        }
    }

    pub fn from_type(self) -> EntityType {
        if self.reverse {
            self.rel.target()
        } else {
            self.rel.source()
        }
    }

    pub fn to_type(self) -> EntityType {
        if self.reverse {
            self.rel.source()
        } else {
            self.rel.target()
        }
    }

    pub fn inverse(self) -> Step {
        Step {
            rel: self.rel,
            reverse: !self.reverse,
        }
    }

    /// Nodes reached from `k` in one step; `k` must have type `from_type()`.
    pub fn next<'g>(self, g: &'g HetGraph, k: NodeId) -> &'g [NodeId] {
        if self.reverse {
            g.in_list(k, self.rel)
        } else {
            g.out_list(k, self.rel)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Metapath {
    pub entity_seq: Vec<EntityType>,
    pub relation_seq: Vec<RelationType>,
    pub abbreviation: String,
    steps: Vec<Step>,
}

impl Metapath {
    /// Parses an abbreviation over `U` (member) and `I` (job), e.g. `"UIU"`.
    pub fn parse(abbreviation: &str) -> Result<Metapath, GraphError> {
        let entity_seq = abbreviation
            .chars()
            .map(|c| match c {
                'U' => Ok(EntityType::Member),
                'I' => Ok(EntityType::Job),
                _ => Err(GraphError::Metapath(abbreviation.to_string())),
            })
            .collect::<Result<Vec<_>, _>>()?;
        if entity_seq.len() < 2 {
            return Err(GraphError::Metapath(abbreviation.to_string()));
        }
        let steps = entity_seq
            .windows(2)
            .map(|w| Step::between(w[0], w[1]))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| GraphError::Metapath(abbreviation.to_string()))?;
        Ok(Metapath {
            relation_seq: steps.iter().map(|s| s.rel).collect(),
            entity_seq,
            abbreviation: abbreviation.to_string(),
            steps,
        })
    }

    pub fn hops(&self) -> usize {
        self.steps.len()
    }

    pub fn steps(&self) -> &[Step] {
        &self.steps
    }

    pub fn start(&self) -> EntityType {
        self.entity_seq[0]
    }

    pub fn end(&self) -> EntityType {
        *self.entity_seq.last().expect("nonempty")
    }
}

impl fmt::Display for Metapath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.abbreviation)
    }
}

/// Ordered metapaths; position 0 of every proximity vector is the implicit self path.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MetapathSet {
    paths: Vec<Metapath>,
}

pub const DEFAULT_METAPATHS: [&str; 6] = ["UU", "UI", "IU", "UIU", "UUI", "IUI"];

impl MetapathSet {
    pub fn new(paths: Vec<Metapath>) -> Result<Self, GraphError> {
        if paths.len() > 31 {
            return Err(GraphError::Metapath("more than 31 metapaths".into()));
        }
        Ok(MetapathSet { paths })
    }

    pub fn parse<S: AsRef<str>>(abbreviations: &[S]) -> Result<Self, GraphError> {
        MetapathSet::new(
            abbreviations
                .iter()
                .map(|a| Metapath::parse(a.as_ref().trim()))
                .collect::<Result<_, _>>()?,
        )
    }

    /// Non-trivial metapaths, in bit order starting at bit 1.
    pub fn paths(&self) -> &[Metapath] {
        &self.paths
    }

    /// M + 1.
    pub fn width(&self) -> usize {
        self.paths.len() + 1
    }

    pub fn abbreviations(&self) -> Vec<String> {
        self.paths.iter().map(|p| p.abbreviation.clone()).collect()
    }
}

impl Default for MetapathSet {
    fn default() -> Self {
        MetapathSet::parse(&DEFAULT_METAPATHS).expect("valid defaults")
    }
}

/// Metapath-existence indicator between two nodes, bit 0 for identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ProximityVector {
    pub bits: u32,
    pub width: usize,
}

impl ProximityVector {
    pub fn zero(width: usize) -> Self {
        ProximityVector { bits: 0, width }
    }

    pub fn get(&self, i: usize) -> bool {
        i < self.width && self.bits >> i & 1 == 1
    }

    pub fn is_zero(&self) -> bool {
        self.bits == 0
    }

    pub fn to_vec(&self) -> Vec<u8> {
        (0..self.width).map(|i| self.get(i) as u8).collect()
    }
}

fn sorted_intersects(a: &[NodeId], b: &[NodeId]) -> bool {
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => return true,
        }
    }
    false
}

/// True iff a directed path from `j` to `j2` realizes `phi`'s relation sequence.
/// Type-incompatible endpoints give `false`.
pub fn metapath_exists(
    g: &HetGraph,
    j: NodeId,
    j2: NodeId,
    phi: &Metapath,
) -> Result<bool, GraphError> {
    g.check(j)?;
    g.check(j2)?;
    if g.type_of(j) != phi.start() || g.type_of(j2) != phi.end() {
        return Ok(false);
    }
    let steps = phi.steps();
    let last = *steps.last().expect("nonempty");
    match steps.len() {
        1 => Ok(last.next(g, j).binary_search(&j2).is_ok()),
        2 => Ok(sorted_intersects(
            steps[0].next(g, j),
            last.inverse().next(g, j2),
        )),
        _ => {
            let mut frontier: BTreeSet<NodeId> = BTreeSet::from([j]);
            for s in &steps[..steps.len() - 1] {
                frontier = frontier
                    .iter()
                    .flat_map(|&v| s.next(g, v).iter().copied())
                    .collect();
            }
            let before_last: Vec<NodeId> = frontier.into_iter().collect();
            Ok(sorted_intersects(&before_last, last.inverse().next(g, j2)))
        }
    }
}

pub fn compute_proximity(
    g: &HetGraph,
    j: NodeId,
    j2: NodeId,
    phis: &MetapathSet,
) -> Result<ProximityVector, GraphError> {
    g.check(j)?;
    g.check(j2)?;
    let mut bits = (j == j2) as u32;
    for (i, phi) in phis.paths().iter().enumerate() {
        if metapath_exists(g, j, j2, phi)? {
            bits |= 1 << (i + 1);
        }
    }
    Ok(ProximityVector {
        bits,
        width: phis.width(),
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Triple {
    pub center: NodeId,
    pub intermediates: Vec<NodeId>,
    pub ends: Vec<NodeId>,
}

/// Samples up to `n_mid` intermediates uniformly without replacement, then up to
/// `n_end` distinct end nodes from the multiset union of the intermediates'
/// end-neighbors, each draw proportional to multiplicity. Ends exclude `k`, every
/// node of `ego`, and the intermediates.
pub fn sample_metapath_triple(
    g: &HetGraph,
    k: NodeId,
    phi: &Metapath,
    n_mid: usize,
    n_end: usize,
    ego: &EgoGraph,
    seed: u64,
) -> Result<Triple, GraphError> {
    let t = g.node_type(k)?;
    if phi.hops() != 2 {
        return Err(GraphError::Metapath(format!(
            "{} is not a two-hop metapath",
            phi.abbreviation
        )));
    }
    if t != phi.start() {
        return Err(GraphError::TypeMismatch {
            node: k.0,
            expected: phi.start(),
            actual: t,
        });
    }
    let [first, second] = [phi.steps()[0], phi.steps()[1]];
    let mids_all = first.next(g, k);
    if mids_all.is_empty() || n_mid == 0 {
        return Err(GraphError::NoIntermediates(k.0));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let intermediates: Vec<NodeId> = if mids_all.len() > n_mid {
        sample(&mut rng, mids_all.len(), n_mid)
            .into_iter()
            .map(|i| mids_all[i])
            .collect()
    } else {
        mids_all.to_vec()
    };
    let mut pool: Vec<NodeId> = intermediates
        .iter()
        .flat_map(|&m| second.next(g, m).iter().copied())
        .filter(|&v| v != k && !ego.contains(v) && !intermediates.contains(&v))
        .collect();
    let mut ends = Vec::new();
    while ends.len() < n_end && !pool.is_empty() {
        let pick = pool[rng.random_range(0..pool.len())];
        pool.retain(|&v| v != pick);
        ends.push(pick);
    }
    Ok(Triple {
        center: k,
        intermediates,
        ends,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hetgraph::GraphBuilder;

    fn ui(b: &mut GraphBuilder, u: usize, i: usize) {
        b.add_edge(RelationType::MemberJob, NodeId(u), NodeId(i));
    }

    #[test]
    fn parse_and_signature() {
        let p = Metapath::parse("IUU").unwrap();
        assert_eq!(p.entity_seq, vec![EntityType::Job, EntityType::Member, EntityType::Member]);
        assert_eq!(p.relation_seq, vec![RelationType::MemberJob, RelationType::MemberMember]);
        assert!(p.steps()[0].reverse);
        assert!(Metapath::parse("UII").is_err());
        assert!(Metapath::parse("U").is_err());
        assert!(Metapath::parse("UX").is_err());
        assert_eq!(MetapathSet::default().width(), 7);
    }

    #[test]
    fn single_edge_and_shared_job() {
        let mut b = GraphBuilder::new(2, 1);
        ui(&mut b, 1, 3);
        ui(&mut b, 2, 3);
        let g = b.build().unwrap();
        let ui_p = Metapath::parse("UI").unwrap();
        let uiu = Metapath::parse("UIU").unwrap();
        let iu = Metapath::parse("IU").unwrap();
        assert!(metapath_exists(&g, NodeId(1), NodeId(3), &ui_p).unwrap());
        assert!(metapath_exists(&g, NodeId(1), NodeId(2), &uiu).unwrap());
        assert!(metapath_exists(&g, NodeId(1), NodeId(1), &uiu).unwrap());
        assert!(metapath_exists(&g, NodeId(3), NodeId(2), &iu).unwrap());
        assert!(!metapath_exists(&g, NodeId(3), NodeId(1), &ui_p).unwrap());
        let uu = Metapath::parse("UU").unwrap();
        assert!(!metapath_exists(&g, NodeId(1), NodeId(2), &uu).unwrap());
    }

    #[test]
    fn proximity_in_edgeless_graph() {
        let g = GraphBuilder::new(2, 1).build().unwrap();
        let set = MetapathSet::default();
        let same = compute_proximity(&g, NodeId(1), NodeId(1), &set).unwrap();
        assert_eq!(same.to_vec(), vec![1, 0, 0, 0, 0, 0, 0]);
        assert!(compute_proximity(&g, NodeId(1), NodeId(3), &set).unwrap().is_zero());
    }

    #[test]
    fn only_legal_triple() {
        let mut b = GraphBuilder::new(2, 1);
        ui(&mut b, 1, 3);
        ui(&mut b, 2, 3);
        let g = b.build().unwrap();
        let ego = EgoGraph::singleton(NodeId(1), 2);
        let t = sample_metapath_triple(&g, NodeId(1), &Metapath::parse("UIU").unwrap(), 3, 3, &ego, 9)
            .unwrap();
        assert_eq!(t.intermediates, vec![NodeId(3)]);
        assert_eq!(t.ends, vec![NodeId(2)]);
    }

    #[test]
    fn ends_follow_multiplicity() {
        // u1 -> {i5, i6}; i5 <- {u1, u2}; i6 <- {u1, u2, u3}: candidates {u2, u2, u3}.
        let mut b = GraphBuilder::new(4, 2);
        for (u, i) in [(1, 5), (1, 6), (2, 5), (2, 6), (3, 6)] {
            ui(&mut b, u, i);
        }
        let g = b.build().unwrap();
        let ego = EgoGraph::singleton(NodeId(1), 2);
        let phi = Metapath::parse("UIU").unwrap();
        let draws = 10_000;
        let hits = (0..draws)
            .filter(|&s| {
                let t = sample_metapath_triple(&g, NodeId(1), &phi, 2, 1, &ego, s).unwrap();
                t.ends == vec![NodeId(2)]
            })
            .count();
        let freq = hits as f64 / draws as f64;
        assert!((freq - 2.0 / 3.0).abs() < 0.02, "{freq}");
    }

    #[test]
    fn ends_in_ego_are_dropped() {
        let mut b = GraphBuilder::new(2, 1);
        ui(&mut b, 1, 3);
        ui(&mut b, 2, 3);
        let g = b.build().unwrap();
        let ego = EgoGraph::with_nodes(&g, NodeId(1), 2, &[NodeId(3), NodeId(2)]).unwrap();
        let t = sample_metapath_triple(&g, NodeId(1), &Metapath::parse("UIU").unwrap(), 3, 3, &ego, 0)
            .unwrap();
        assert!(t.ends.is_empty());
    }
}
