//! Latent-cluster block-model graphs with planted labels, and train/valid/test splits.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::hetgraph::{GraphBuilder, GraphError, HetGraph, NodeId, RelationType};

pub const BIOGRAPHY: &str = "biography";
pub const DESCRIPTION: &str = "description";
pub const SKILL_TASK: &str = "skill";
pub const WORK_MODE_TASK: &str = "work_mode";
/// Skill named in the binary skill question; label 1 means the member has it.
pub const SKILL_NAME: &str = "coding";

const TOPIC_WORDS: [&str; 40] = [
    "data", "model", "metrics", "query", "cloud", "deploy", "cluster", "uptime", "retail",
    "store", "pricing", "stock", "health", "clinic", "patient", "care", "media", "video",
    "studio", "story", "energy", "grid", "solar", "power", "legal", "contract", "court",
    "policy", "design", "brand", "layout", "color", "travel", "hotel", "route", "guest",
    "school", "course", "tutor", "exam",
];
const CODING_WORDS: [&str; 4] = ["rust", "python", "java", "golang"];
const OTHER_WORDS: [&str; 4] = ["sales", "budget", "hiring", "events"];
const WORK_MODES: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_members: usize,
    pub n_jobs: usize,
    pub n_clusters: usize,
    /// Member-job edge probability within a cluster.
    pub p_in: f64,
    /// Member-job edge probability across clusters.
    pub p_out: f64,
    /// Co-working probability for each same-cluster member pair (both directions).
    pub p_uu: f64,
    pub label_noise: f64,
    /// Probability that a member's work mode is its cluster's preferred mode.
    pub work_mode_bias: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_members: 300,
            n_jobs: 200,
            n_clusters: 5,
            p_in: 0.05,
            p_out: 0.005,
            p_uu: 0.05,
            label_noise: 0.1,
            work_mode_bias: 0.7,
            seed: 0,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid synthetic configuration: {0}")]
    Config(String),
    #[error("task {0:?} has no labeled nodes")]
    NoLabels(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let probs = [
            ("p_in", self.p_in),
            ("p_out", self.p_out),
            ("p_uu", self.p_uu),
            ("label_noise", self.label_noise),
            ("work_mode_bias", self.work_mode_bias),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(SynthError::Config(format!("{name} = {p} is not a probability")));
            }
        }
        if self.p_in <= self.p_out {
            return Err(SynthError::Config("p_in must exceed p_out".into()));
        }
        if self.n_clusters < 2 {
            return Err(SynthError::Config("at least two clusters are needed".into()));
        }
        Ok(())
    }
}

/// Ground-truth cluster of every member and job; diagnostics only.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterSidecar {
    pub member_clusters: Vec<usize>,
    pub job_clusters: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct SynthGraph {
    pub graph: HetGraph,
    pub clusters: ClusterSidecar,
}

fn cluster_words(c: usize) -> Vec<String> {
    (0..4)
        .map(|w| {
            let i = (c * 4 + w) % TOPIC_WORDS.len();
            let round = (c * 4 + w) / TOPIC_WORDS.len();
            if round == 0 {
                TOPIC_WORDS[i].to_string()
            } else {
                format!("{}{round}", TOPIC_WORDS[i])
            }
        })
        .collect()
}

/// Skill label before noise: alternating across clusters.
pub fn planted_skill(cluster: usize) -> usize {
    (cluster % 2 == 0) as usize
}

pub fn generate_graph(config: &SynthConfig) -> Result<SynthGraph, SynthError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (nu, ni, nc) = (config.n_members, config.n_jobs, config.n_clusters);
    let member_clusters: Vec<usize> = (0..nu).map(|_| rng.random_range(0..nc)).collect();
    let job_clusters: Vec<usize> = (0..ni).map(|_| rng.random_range(0..nc)).collect();
    let words: Vec<Vec<String>> = (0..nc).map(cluster_words).collect();
    let preferred_mode: Vec<usize> = (0..nc).map(|c| c % WORK_MODES).collect();

    let mut b = GraphBuilder::new(nu, ni);
    for (u, &c) in member_clusters.iter().enumerate() {
        let id = NodeId(u + 1);
        let clean = planted_skill(c);
        let skill = if rng.random_bool(config.label_noise) {
            1 - clean
        } else {
            clean
        };
        let skill_word = if skill == 1 {
            CODING_WORDS.choose(&mut rng)
        } else {
            OTHER_WORDS.choose(&mut rng)
        }
        .expect("nonempty");
        let mut topic: Vec<&String> = words[c].choose_multiple(&mut rng, 2).collect();
        topic.shuffle(&mut rng);
        let bio = format!("{skill_word} {} {}", topic[0], topic[1]);
        let mode = if rng.random_bool(config.work_mode_bias) {
            preferred_mode[c]
        } else {
            rng.random_range(0..WORK_MODES)
        };
        b.set_feature(id, BIOGRAPHY, &bio)
            .set_label(id, SKILL_TASK, skill)
            .set_label(id, WORK_MODE_TASK, mode);
    }
    for (i, &c) in job_clusters.iter().enumerate() {
        let id = NodeId(nu + i + 1);
        let topic: Vec<&String> = words[c].choose_multiple(&mut rng, 2).collect();
        let desc = format!("{} {} role", topic[0], topic[1]);
        b.set_feature(id, DESCRIPTION, &desc);
    }
    for (u, &cu) in member_clusters.iter().enumerate() {
        for (i, &ci) in job_clusters.iter().enumerate() {
            let p = if cu == ci { config.p_in } else { config.p_out };
            if rng.random_bool(p) {
                b.add_edge(RelationType::MemberJob, NodeId(u + 1), NodeId(nu + i + 1));
            }
        }
    }
    for u in 0..nu {
        for v in u + 1..nu {
            if member_clusters[u] == member_clusters[v] && rng.random_bool(config.p_uu) {
                b.add_edge(RelationType::MemberMember, NodeId(u + 1), NodeId(v + 1))
                    .add_edge(RelationType::MemberMember, NodeId(v + 1), NodeId(u + 1));
            }
        }
    }
    Ok(SynthGraph {
        graph: b.build()?,
        clusters: ClusterSidecar {
            member_clusters,
            job_clusters,
        },
    })
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeLinks {
    pub train: Vec<NodeId>,
    pub valid: Vec<NodeId>,
    pub test: Vec<NodeId>,
}

/// Per-node partition of the out-links of one relation. Only evaluation nodes
/// (at least `min_degree` links) are listed; all other links are training links.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkSplit {
    pub rel: RelationType,
    pub nodes: BTreeMap<NodeId, NodeLinks>,
}

impl LinkSplit {
    pub fn eval_nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.keys().copied()
    }

    /// Every valid and test edge, as (source, target).
    pub fn heldout_edges(&self) -> Vec<(NodeId, NodeId)> {
        let mut out = Vec::new();
        for (&k, l) in &self.nodes {
            out.extend(l.valid.iter().chain(&l.test).map(|&v| (k, v)));
        }
        out
    }

    /// The graph with valid and test links removed. For member-member links the
    /// reverse edge is removed too, so a held-out follow is not visible backwards.
    pub fn training_graph(&self, g: &HetGraph) -> HetGraph {
        let mut removed = self.heldout_edges();
        if self.rel == RelationType::MemberMember {
            let rev: Vec<_> = removed.iter().map(|&(a, b)| (b, a)).collect();
            removed.extend(rev);
        }
        g.without_edges(self.rel, &removed)
    }
}

fn round_share(n: usize, r: f64) -> usize {
    (n as f64 * r).round() as usize
}

pub fn split_links(
    g: &HetGraph,
    rel: RelationType,
    ratios: (f64, f64, f64),
    min_degree: usize,
    seed: u64,
) -> LinkSplit {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut nodes = BTreeMap::new();
    for u in g.members() {
        let links = g.neighbors(u, rel).expect("member source");
        if links.len() < min_degree {
            continue;
        }
        let mut shuffled = links.to_vec();
        shuffled.shuffle(&mut rng);
        let n = shuffled.len();
        let n_train = round_share(n, ratios.0).min(n);
        let n_valid = round_share(n, ratios.1).min(n - n_train);
        let part = |a: usize, b: usize| {
            let mut v = shuffled[a..b].to_vec();
            v.sort_unstable();
            v
        };
        let links = NodeLinks {
            train: part(0, n_train),
            valid: part(n_train, n_train + n_valid),
            test: part(n_train + n_valid, n),
        };
        nodes.insert(u, links);
    }
    LinkSplit { rel, nodes }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSplit {
    pub task: String,
    pub train: Vec<NodeId>,
    pub valid: Vec<NodeId>,
    pub test: Vec<NodeId>,
}

pub fn split_nodes(
    g: &HetGraph,
    task: &str,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<NodeSplit, SynthError> {
    let mut labeled: Vec<NodeId> = g.node_ids().filter(|&k| g.label(k, task).is_some()).collect();
    if labeled.is_empty() {
        return Err(SynthError::NoLabels(task.to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    labeled.shuffle(&mut rng);
    let n = labeled.len();
    let n_train = round_share(n, ratios.0).min(n);
    let n_valid = round_share(n, ratios.1).min(n - n_train);
    let part = |a: usize, b: usize| {
        let mut v = labeled[a..b].to_vec();
        v.sort_unstable();
        v
    };
    Ok(NodeSplit {
        task: task.to_string(),
        train: part(0, n_train),
        valid: part(n_train, n_train + n_valid),
        test: part(n_train + n_valid, n),
    })
}
