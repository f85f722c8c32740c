//! Ranking and classification metrics, averaged prediction, evaluation reports,
//! baselines and embedding export.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::hetgraph::{EntityType, HetGraph, NodeId, RelationType};
use crate::nn::{Model, OutputSpace, Real};
use crate::seed::derive;
use crate::train::{RunConfig, Setup, TaskKind, TrainError};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("the target set is empty")]
    EmptyTargets,
    #[error("no evaluation split for task {0}")]
    MissingSplit(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<crate::nn::NnError> for EvalError {
    fn from(e: crate::nn::NnError) -> Self {
        EvalError::Train(e.into())
    }
}

impl From<crate::hetgraph::GraphError> for EvalError {
    fn from(e: crate::hetgraph::GraphError) -> Self {
        EvalError::Train(e.into())
    }
}

/// Share of `targets` found in the first `m` ranked items.
pub fn recall_at_m<I: Ord>(ranked: &[I], targets: &BTreeSet<I>, m: usize) -> Result<f64, EvalError> {
    if targets.is_empty() {
        return Err(EvalError::EmptyTargets);
    }
    let hits = ranked.iter().take(m).filter(|x| targets.contains(x)).count();
    Ok(hits as f64 / targets.len() as f64)
}

/// Binary-gain NDCG: hits at rank r (1-based) add `1 / log2(r + 1)`, normalized
/// by the best achievable DCG with `min(|targets|, m)` hits.
pub fn ndcg_at_m<I: Ord>(ranked: &[I], targets: &BTreeSet<I>, m: usize) -> Result<f64, EvalError> {
    if targets.is_empty() {
        return Err(EvalError::EmptyTargets);
    }
    let gain = |r: usize| 1.0 / ((r + 1) as f64).log2();
    let dcg: f64 = ranked
        .iter()
        .take(m)
        .enumerate()
        .filter(|(_, x)| targets.contains(x))
        .map(|(i, _)| gain(i + 1))
        .sum();
    let ideal: f64 = (1..=targets.len().min(m)).map(gain).sum();
    Ok(if ideal > 0.0 { dcg / ideal } else { 0.0 })
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64
}

/// F1 of one class treated as positive; 0 when it is never predicted nor present.
pub fn f1_for_class(pred: &[usize], truth: &[usize], class: usize) -> f64 {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fneg = 0usize;
    for (&p, &t) in pred.iter().zip(truth) {
        match (p == class, t == class) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    if tp == 0 {
        return 0.0;
    }
    2.0 * tp as f64 / (2 * tp + fp + fneg) as f64
}

/// Positive-class F1 for binary tasks, macro F1 over classes otherwise.
pub fn task_f1(pred: &[usize], truth: &[usize], classes: usize) -> f64 {
    if classes == 2 {
        f1_for_class(pred, truth, 1)
    } else {
        (0..classes).map(|c| f1_for_class(pred, truth, c)).sum::<f64>() / classes as f64
    }
}

/// Indices of the `m` largest scores, ties broken by lower index, skipping `exclude`.
pub fn top_m(scores: &[f64], exclude: &BTreeSet<usize>, m: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).filter(|i| !exclude.contains(i)).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(m);
    idx
}

fn space_of(rel: RelationType) -> (OutputSpace, EntityType) {
    match rel {
        RelationType::MemberJob => (OutputSpace::Job, EntityType::Job),
        RelationType::MemberMember => (OutputSpace::Member, EntityType::Member),
    }
}

/// First node id of an entity type (the node of local index 0).
fn space_offset(g: &HetGraph, t: EntityType) -> usize {
    match t {
        EntityType::Member => 1,
        EntityType::Job => g.n_members() + 1,
    }
}

/// Class prediction from class-head probabilities averaged over `n_g` prompts with
/// independently sampled ego graphs. Ties go to the lowest class.
pub fn predict_node<T: Real>(
    model: &Model<T>,
    setup: &Setup,
    k: NodeId,
    task: &str,
    n_g: usize,
    seed: u64,
) -> Result<(usize, Vec<f64>), EvalError> {
    setup.full.check(k)?;
    let (idx, spec) = setup
        .task_spec(task)
        .ok_or_else(|| TrainError::UnknownTask(task.to_string()))?;
    let n_g = n_g.max(1);
    let mut avg = vec![0.0; spec.classes];
    let alignment = model.config.attention_alignment;
    for r in 0..n_g {
        let input = setup.node_task_input(k, spec, derive(seed, k.0 as u64, r as u64, "predict/node"), alignment)?;
        let p = model.class_probabilities(&input, idx)?;
        for (a, x) in avg.iter_mut().zip(p) {
            *a += x.to_f64().unwrap_or(0.0) / n_g as f64;
        }
    }
    let best = top_m(&avg, &BTreeSet::new(), 1)[0];
    Ok((best, avg))
}

/// Averaged link-head distribution over `n_g` query prompts for member `k`.
pub fn link_distribution<T: Real>(
    model: &Model<T>,
    setup: &Setup,
    k: NodeId,
    rel: RelationType,
    n_g: usize,
    seed: u64,
) -> Result<(Vec<f64>, Vec<NodeId>), EvalError> {
    let (space, _) = space_of(rel);
    let n_g = n_g.max(1);
    let mut avg = vec![0.0; model.space_size(space)];
    let mut shown = Vec::new();
    let alignment = model.config.attention_alignment;
    for r in 0..n_g {
        let (input, s) = setup.link_query_input(k, rel, derive(seed, k.0 as u64, r as u64, "predict/link"), alignment)?;
        shown = s;
        let p = model.link_probabilities(&input, space)?;
        for (a, x) in avg.iter_mut().zip(p) {
            *a += x.to_f64().unwrap_or(0.0) / n_g as f64;
        }
    }
    Ok((avg, shown))
}

/// Top-`m` entities for member `k`, excluding `k`, the shown neighbors and `extra`.
pub fn predict_links<T: Real>(
    model: &Model<T>,
    setup: &Setup,
    k: NodeId,
    rel: RelationType,
    m: usize,
    n_g: usize,
    seed: u64,
    extra: &[NodeId],
) -> Result<Vec<NodeId>, EvalError> {
    let (avg, shown) = link_distribution(model, setup, k, rel, n_g, seed)?;
    Ok(rank_excluding(&setup.full, rel, &avg, k, shown.iter().chain(extra), m))
}

fn rank_excluding<'a>(
    g: &HetGraph,
    rel: RelationType,
    scores: &[f64],
    k: NodeId,
    exclude: impl Iterator<Item = &'a NodeId>,
    m: usize,
) -> Vec<NodeId> {
    let (_, t) = space_of(rel);
    let off = space_offset(g, t);
    let local = |n: NodeId| n.0.checked_sub(off).filter(|&i| i < scores.len());
    let mut ex: BTreeSet<usize> = exclude.filter_map(|&n| local(n)).collect();
    ex.extend(local(k));
    top_m(scores, &ex, m).into_iter().map(|i| NodeId(i + off)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitPart {
    Valid,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub split: SplitPart,
    pub config_hash: String,
    /// `accuracy`, `f1` for node tasks; `recall@M`, `ndcg@M` for link tasks.
    pub metrics: BTreeMap<String, f64>,
    pub nodes: usize,
    /// Metrics of every run a mean was taken over, keyed by seed.
    #[serde(default)]
    pub per_seed: BTreeMap<String, BTreeMap<String, f64>>,
}

/// A ranking for one evaluation node, given its known positives to exclude.
pub trait Ranker {
    fn rank(&self, k: NodeId, exclude: &[NodeId], m: usize) -> Result<Vec<NodeId>, EvalError>;
}

/// Link ranking by the trained model with `n_g`-averaged prompts.
pub struct ModelRanker<'a, T: Real> {
    pub model: &'a Model<T>,
    pub setup: &'a Setup,
    pub rel: RelationType,
    pub n_g: usize,
    pub seed: u64,
}

impl<T: Real> Ranker for ModelRanker<'_, T> {
    fn rank(&self, k: NodeId, exclude: &[NodeId], m: usize) -> Result<Vec<NodeId>, EvalError> {
        predict_links(self.model, self.setup, k, self.rel, m, self.n_g, self.seed, exclude)
    }
}

/// Ranks targets by in-degree in the training graph.
pub struct PopularityRanker<'a> {
    pub graph: &'a HetGraph,
    pub rel: RelationType,
}

impl Ranker for PopularityRanker<'_> {
    fn rank(&self, k: NodeId, exclude: &[NodeId], m: usize) -> Result<Vec<NodeId>, EvalError> {
        let (_, t) = space_of(self.rel);
        let ids: Vec<NodeId> = match t {
            EntityType::Member => self.graph.members().collect(),
            EntityType::Job => self.graph.jobs().collect(),
        };
        let scores: Vec<f64> = ids
            .iter()
            .map(|&n| self.graph.in_neighbors(n, self.rel).map(|v| v.len()).unwrap_or(0) as f64)
            .collect();
        Ok(rank_excluding(self.graph, self.rel, &scores, k, exclude.iter(), m))
    }
}

/// Ranks targets by the dot product of node embedding rows `z_k . z_i`.
pub struct EmbeddingDotRanker<'a> {
    pub graph: &'a HetGraph,
    pub rel: RelationType,
    /// One row per node, in node-id order.
    pub embeddings: &'a [Vec<f64>],
}

impl Ranker for EmbeddingDotRanker<'_> {
    fn rank(&self, k: NodeId, exclude: &[NodeId], m: usize) -> Result<Vec<NodeId>, EvalError> {
        let (_, t) = space_of(self.rel);
        let off = space_offset(self.graph, t);
        let n = match t {
            EntityType::Member => self.graph.n_members(),
            EntityType::Job => self.graph.n_jobs(),
        };
        let zk = &self.embeddings[k.0 - 1];
        let scores: Vec<f64> = (0..n)
            .map(|i| zk.iter().zip(&self.embeddings[off + i - 1]).map(|(a, b)| a * b).sum())
            .collect();
        Ok(rank_excluding(self.graph, self.rel, &scores, k, exclude.iter(), m))
    }
}

/// Mean ranking metrics of `ranker` over a link split's evaluation nodes.
pub fn evaluate_links(
    ranker: &dyn Ranker,
    setup: &Setup,
    rel: RelationType,
    part: SplitPart,
    config: &RunConfig,
) -> Result<EvalReport, EvalError> {
    let task = TaskKind::Link(rel).to_string();
    let split = setup.link_split(rel).ok_or_else(|| EvalError::MissingSplit(task.clone()))?;
    let cutoffs: BTreeSet<usize> = config.eval.recall_at.iter().chain(&config.eval.ndcg_at).copied().collect();
    let depth = cutoffs.iter().max().copied().unwrap_or(0);
    let mut sums: BTreeMap<String, f64> = BTreeMap::new();
    let mut nodes = 0usize;
    for (&k, links) in &split.nodes {
        let (targets, exclude): (&[NodeId], Vec<NodeId>) = match part {
            SplitPart::Valid => (&links.valid, links.train.clone()),
            SplitPart::Test => (&links.test, links.train.iter().chain(&links.valid).copied().collect()),
        };
        if targets.is_empty() {
            continue;
        }
        let target_set: BTreeSet<NodeId> = targets.iter().copied().collect();
        let ranked = ranker.rank(k, &exclude, depth)?;
        for &m in &config.eval.recall_at {
            *sums.entry(format!("recall@{m}")).or_default() += recall_at_m(&ranked, &target_set, m)?;
        }
        for &m in &config.eval.ndcg_at {
            *sums.entry(format!("ndcg@{m}")).or_default() += ndcg_at_m(&ranked, &target_set, m)?;
        }
        nodes += 1;
    }
    if nodes == 0 {
        return Err(EvalError::MissingSplit(task));
    }
    for v in sums.values_mut() {
        *v /= nodes as f64;
    }
    Ok(EvalReport {
        task,
        split: part,
        config_hash: config.hash(),
        metrics: sums,
        nodes,
        per_seed: BTreeMap::new(),
    })
}

/// Accuracy and F1 of averaged class predictions over a node split.
pub fn evaluate_node_task<T: Real>(
    model: &Model<T>,
    setup: &Setup,
    task: &str,
    part: SplitPart,
    config: &RunConfig,
) -> Result<EvalReport, EvalError> {
    let split = setup.node_split(task).ok_or_else(|| EvalError::MissingSplit(task.to_string()))?;
    let (_, spec) = setup
        .task_spec(task)
        .ok_or_else(|| TrainError::UnknownTask(task.to_string()))?;
    let (nodes, n_g) = match part {
        SplitPart::Valid => (&split.valid, config.eval.n_g_valid),
        SplitPart::Test => (&split.test, config.eval.n_g),
    };
    if nodes.is_empty() {
        return Err(EvalError::MissingSplit(task.to_string()));
    }
    let mut pred = Vec::with_capacity(nodes.len());
    let mut truth = Vec::with_capacity(nodes.len());
    for &k in nodes {
        pred.push(predict_node(model, setup, k, task, n_g, config.eval.seed)?.0);
        truth.push(setup.full.label(k, task).expect("split nodes are labeled"));
    }
    let metrics = BTreeMap::from([
        ("accuracy".to_string(), accuracy(&pred, &truth)),
        ("f1".to_string(), task_f1(&pred, &truth, spec.classes)),
    ]);
    Ok(EvalReport {
        task: task.to_string(),
        split: part,
        config_hash: config.hash(),
        metrics,
        nodes: nodes.len(),
        per_seed: BTreeMap::new(),
    })
}

/// Evaluates the model on one configured task.
pub fn evaluate<T: Real>(
    model: &Model<T>,
    setup: &Setup,
    task: &TaskKind,
    part: SplitPart,
    config: &RunConfig,
) -> Result<EvalReport, EvalError> {
    match task {
        TaskKind::Node(name) => evaluate_node_task(model, setup, name, part, config),
        TaskKind::Link(rel) => {
            let n_g = match part {
                SplitPart::Valid => config.eval.n_g_valid,
                SplitPart::Test => config.eval.n_g,
            };
            let ranker = ModelRanker {
                model,
                setup,
                rel: *rel,
                n_g,
                seed: config.eval.seed,
            };
            evaluate_links(&ranker, setup, *rel, part, config)
        }
    }
}

/// Averages metric maps; the per-seed breakdown keeps every input.
pub fn mean_report(reports: &[(u64, EvalReport)]) -> Option<EvalReport> {
    let (_, first) = reports.first()?;
    let mut out = first.clone();
    out.metrics = first.metrics.keys().map(|k| (k.clone(), 0.0)).collect();
    for (seed, r) in reports {
        for (k, v) in &r.metrics {
            *out.metrics.entry(k.clone()).or_default() += v / reports.len() as f64;
        }
        out.per_seed.insert(seed.to_string(), r.metrics.clone());
    }
    Some(out)
}

/// Node embedding rows as `f64`, in node-id order.
pub fn node_embeddings<T: Real>(model: &Model<T>) -> Vec<Vec<f64>> {
    let z = model.store.value(model.ids.node_embed);
    (0..z.rows())
        .map(|r| z.row(r).iter().map(|x| x.to_f64().unwrap_or(0.0)).collect())
        .collect()
}

/// One line per node: id, type, then the embedding row, tab-separated.
pub fn export_embeddings<T: Real, W: Write>(model: &Model<T>, g: &HetGraph, mut out: W) -> Result<(), EvalError> {
    let z = model.store.value(model.ids.node_embed);
    for k in g.node_ids() {
        let kind = match g.type_of(k) {
            EntityType::Member => "member",
            EntityType::Job => "job",
        };
        write!(out, "{}\t{kind}", k.0)?;
        for x in z.row(g.row(k)) {
            write!(out, "\t{x}")?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}
