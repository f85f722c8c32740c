//! Prompt/completion construction over ego graphs.
//!
//! A [`PromptInstance`] holds the full token sequence (prompt then completion) in
//! unified token ids, with per-token segment tags, node associations and hop
//! distances for node tokens.

pub mod templates;

use std::sync::Arc;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::hetgraph::{
    compute_proximity, sample_metapath_triple, EgoGraph, EntityType, GraphError, HetGraph,
    Metapath, MetapathSet, NodeId, RelationType,
};
use crate::nn::{AttentionBias, BiasEntry, InputToken, ModelInput, OutputSpace, Target};
use crate::vocab::{ByteTokenizer, Tokenizer, VocabError, VocabLayout};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentTag {
    Instruction,
    EgoGraph,
    IntermediateRelation,
    Feature,
    Question,
    Completion,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossSpace {
    TextOnly,
    MemberOnly,
    JobOnly,
}

impl LossSpace {
    pub fn of_entity(t: EntityType) -> Self {
        match t {
            EntityType::Member => LossSpace::MemberOnly,
            EntityType::Job => LossSpace::JobOnly,
        }
    }

    pub fn output_space(self) -> OutputSpace {
        match self {
            LossSpace::TextOnly => OutputSpace::Text,
            LossSpace::MemberOnly => OutputSpace::Member,
            LossSpace::JobOnly => OutputSpace::Job,
        }
    }

    pub fn range(self, layout: &VocabLayout) -> std::ops::Range<usize> {
        match self {
            LossSpace::TextOnly => layout.text_range(),
            LossSpace::MemberOnly => layout.member_range(),
            LossSpace::JobOnly => layout.job_range(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PromptKind {
    Feature { feature: String },
    FirstOrder { metapath: String },
    HigherOrder { metapath: String },
    NodeTask { task: String },
    LinkTask { rel: RelationType },
}

/// A node-level classification task and the question that ends its prompt.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub classes: usize,
    pub question: String,
}

impl TaskSpec {
    /// Binary skill task: the question names the skill.
    pub fn binary_skill(name: &str, skill: &str) -> Self {
        TaskSpec {
            name: name.to_string(),
            classes: 2,
            question: templates::binary_skill_question(skill),
        }
    }

    pub fn multiclass(name: &str, classes: usize, question: &str) -> Self {
        TaskSpec {
            name: name.to_string(),
            classes,
            question: question.to_string(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("node {0} has no text for feature {1:?}")]
    MissingFeature(usize, String),
    #[error("no eligible completion targets")]
    NoTargets,
    #[error("node {0} needs at least two observed neighbors")]
    TooFewNeighbors(usize),
    #[error("metapath {0} does not start at a {1:?}")]
    Incompatible(String, EntityType),
    #[error("unknown node task {0:?}")]
    UnknownTask(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
}

impl PromptError {
    /// Expected conditions under which the training instance is simply skipped.
    pub fn is_skip(&self) -> bool {
        matches!(
            self,
            PromptError::MissingFeature(..)
                | PromptError::NoTargets
                | PromptError::TooFewNeighbors(_)
                | PromptError::Graph(GraphError::NoIntermediates(_))
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptInstance {
    pub kind: PromptKind,
    pub center: NodeId,
    pub tokens: Vec<usize>,
    /// Node each position is associated with for the proximity bias.
    pub node_assoc: Vec<Option<NodeId>>,
    pub segments: Vec<SegmentTag>,
    /// Hop embedding row of each node token; `None` for text.
    pub hops: Vec<Option<usize>>,
    /// Positions `prompt_len..` hold the completion.
    pub prompt_len: usize,
    pub targets: Vec<usize>,
    pub loss_space: Option<LossSpace>,
    /// Masked neighbors of a link-task prompt.
    pub heldout: Vec<NodeId>,
    pub ego: Arc<EgoGraph>,
}

impl PromptInstance {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Positions fed to the model: every token except a trailing completion token,
    /// which is only ever a target.
    pub fn input_len(&self) -> usize {
        if self.targets.is_empty() {
            self.tokens.len()
        } else {
            self.tokens.len() - 1
        }
    }

    pub fn segment_order(&self) -> Vec<SegmentTag> {
        let mut out: Vec<SegmentTag> = Vec::new();
        for &s in &self.segments {
            if out.last() != Some(&s) {
                out.push(s);
            }
        }
        out
    }

    pub fn is_node_token(&self, pos: usize, layout: &VocabLayout) -> bool {
        layout.node_of(self.tokens[pos]).is_some()
    }
}

/// Tunables shared by every builder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptOptions {
    pub n_end: usize,
    pub n_mid: usize,
    pub mask_ratio: f64,
    /// Node-task prompts include every listed feature instead of only the first.
    pub concat_features: bool,
    /// Bias completion rows toward earlier completion node tokens too.
    pub completion_keys: bool,
}

impl Default for PromptOptions {
    fn default() -> Self {
        PromptOptions {
            n_end: 3,
            n_mid: 3,
            mask_ratio: 0.5,
            concat_features: false,
            completion_keys: true,
        }
    }
}

/// Tokenizer plus vocabulary layout, with every template phrase registered.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptVocab {
    pub tokenizer: ByteTokenizer,
    pub layout: VocabLayout,
}

impl PromptVocab {
    pub fn new(g: &HetGraph, features: &[String], tasks: &[TaskSpec]) -> Self {
        let mut phrases: Vec<String> = templates::static_phrases()
            .into_iter()
            .map(String::from)
            .collect();
        for f in features {
            for t in [EntityType::Member, EntityType::Job] {
                phrases.push(templates::feature_phrase(f, t));
            }
        }
        phrases.extend(tasks.iter().map(|t| t.question.clone()));
        let tokenizer = ByteTokenizer::new(&phrases);
        let layout = VocabLayout::new(
            tokenizer.vocab_size(),
            g,
            tasks.iter().map(|t| (t.name.clone(), t.classes)).collect(),
        );
        PromptVocab { tokenizer, layout }
    }

    pub fn phrase(&self, text: &str) -> Result<usize, VocabError> {
        self.tokenizer.special(text)
    }

    /// Human-readable rendering of one token.
    pub fn render(&self, g: &HetGraph, token: usize) -> String {
        if let Some(n) = self.layout.node_of(token) {
            return match g.type_of(n) {
                EntityType::Member => format!("<member_{}>", n.0),
                EntityType::Job => format!("<job_{}>", n.0),
            };
        }
        if self.layout.is_text(token) {
            return self
                .tokenizer
                .decode(&[token])
                .unwrap_or_else(|_| format!("<byte_{token}>"));
        }
        format!("<class_{token}>")
    }
}

struct Seq<'a> {
    vocab: &'a PromptVocab,
    ego: &'a EgoGraph,
    tokens: Vec<usize>,
    assoc: Vec<Option<NodeId>>,
    segments: Vec<SegmentTag>,
    hops: Vec<Option<usize>>,
}

impl<'a> Seq<'a> {
    fn new(vocab: &'a PromptVocab, ego: &'a EgoGraph) -> Self {
        Seq {
            vocab,
            ego,
            tokens: Vec::with_capacity(96),
            assoc: Vec::with_capacity(96),
            segments: Vec::with_capacity(96),
            hops: Vec::with_capacity(96),
        }
    }

    fn phrase(&mut self, text: &str, seg: SegmentTag) -> Result<(), PromptError> {
        let id = self.vocab.phrase(text)?;
        self.push(id, None, seg, None);
        Ok(())
    }

    fn text(&mut self, text: &str, seg: SegmentTag, assoc: Option<NodeId>) {
        for id in self.vocab.tokenizer.encode(text) {
            self.push(id, assoc, seg, None);
        }
    }

    /// A node token; its hop is the ego distance when sampled, else `fallback`.
    fn node(&mut self, n: NodeId, seg: SegmentTag, fallback: usize) -> Result<(), PromptError> {
        let id = self.vocab.layout.node_token_id(n)?;
        let hop = self
            .ego
            .shortest_distance(n)
            .unwrap_or(fallback.min(self.ego.depth));
        self.push(id, Some(n), seg, Some(hop));
        Ok(())
    }

    fn push(&mut self, id: usize, assoc: Option<NodeId>, seg: SegmentTag, hop: Option<usize>) {
        self.tokens.push(id);
        self.assoc.push(assoc);
        self.segments.push(seg);
        self.hops.push(hop);
    }

    fn header(&mut self, skip: &[NodeId]) -> Result<(), PromptError> {
        self.phrase(templates::INSTRUCTION, SegmentTag::Instruction)?;
        for n in &self.ego.nodes {
            if !skip.contains(&n.id) {
                self.node(n.id, SegmentTag::EgoGraph, n.hop)?;
            }
        }
        self.phrase(templates::EGO_END, SegmentTag::EgoGraph)
    }

    fn finish(
        self,
        kind: PromptKind,
        center: NodeId,
        prompt_len: usize,
        loss_space: Option<LossSpace>,
        heldout: Vec<NodeId>,
    ) -> PromptInstance {
        PromptInstance {
            kind,
            center,
            targets: self.tokens[prompt_len..].to_vec(),
            tokens: self.tokens,
            node_assoc: self.assoc,
            segments: self.segments,
            hops: self.hops,
            prompt_len,
            loss_space,
            heldout,
            ego: Arc::new(self.ego.clone()),
        }
    }
}

/// Builds prompts from one graph (normally the training graph).
#[derive(Clone, Copy)]
pub struct PromptBuilder<'a> {
    pub g: &'a HetGraph,
    pub vocab: &'a PromptVocab,
    pub options: &'a PromptOptions,
}

impl<'a> PromptBuilder<'a> {
    pub fn new(g: &'a HetGraph, vocab: &'a PromptVocab, options: &'a PromptOptions) -> Self {
        PromptBuilder { g, vocab, options }
    }

    fn check_center(&self, ego: &EgoGraph, k: NodeId) -> Result<EntityType, PromptError> {
        let t = self.g.node_type(k)?;
        if ego.center != k {
            return Err(GraphError::NotInEgo(k.0).into());
        }
        Ok(t)
    }

    /// Feature modeling: the completion is the center's feature text.
    pub fn feature(&self, ego: &EgoGraph, k: NodeId, feature: &str) -> Result<PromptInstance, PromptError> {
        let t = self.check_center(ego, k)?;
        let text = self
            .g
            .feature(k, feature)
            .filter(|s| !s.is_empty())
            .ok_or_else(|| PromptError::MissingFeature(k.0, feature.to_string()))?;
        let mut s = Seq::new(self.vocab, ego);
        s.header(&[])?;
        s.phrase(&templates::feature_phrase(feature, t), SegmentTag::Question)?;
        s.node(k, SegmentTag::Question, 0)?;
        s.phrase(templates::FEATURE_IS, SegmentTag::Question)?;
        let prompt_len = s.tokens.len();
        s.text(text, SegmentTag::Completion, Some(k));
        Ok(s.finish(
            PromptKind::Feature {
                feature: feature.to_string(),
            },
            k,
            prompt_len,
            Some(LossSpace::TextOnly),
            Vec::new(),
        ))
    }

    /// One-hop structural modeling: complete with unseen end nodes of `phi`.
    pub fn first_order(
        &self,
        ego: &EgoGraph,
        k: NodeId,
        phi: &Metapath,
        seed: u64,
    ) -> Result<PromptInstance, PromptError> {
        let t = self.check_center(ego, k)?;
        if phi.hops() != 1 {
            return Err(GraphError::Metapath(format!("{phi} is not one-hop")).into());
        }
        if phi.start() != t {
            return Err(PromptError::Incompatible(phi.abbreviation.clone(), t));
        }
        let step = phi.steps()[0];
        let cand: Vec<NodeId> = step
            .next(self.g, k)
            .iter()
            .copied()
            .filter(|&v| v != k && !ego.contains(v))
            .collect();
        if cand.is_empty() || self.options.n_end == 0 {
            return Err(PromptError::NoTargets);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ends: Vec<NodeId> = if cand.len() > self.options.n_end {
            sample(&mut rng, cand.len(), self.options.n_end)
                .into_iter()
                .map(|i| cand[i])
                .collect()
        } else {
            cand
        };
        ends.shuffle(&mut rng);
        let mut s = Seq::new(self.vocab, ego);
        s.header(&[])?;
        s.phrase(templates::center_phrase(t), SegmentTag::Question)?;
        s.node(k, SegmentTag::Question, 0)?;
        s.phrase(templates::first_step_phrase(step), SegmentTag::Question)?;
        let prompt_len = s.tokens.len();
        for &e in &ends {
            s.node(e, SegmentTag::Completion, 1)?;
        }
        Ok(s.finish(
            PromptKind::FirstOrder {
                metapath: phi.abbreviation.clone(),
            },
            k,
            prompt_len,
            Some(LossSpace::of_entity(phi.end())),
            Vec::new(),
        ))
    }

    /// Two-hop structural modeling through sampled intermediates.
    pub fn higher_order(
        &self,
        ego: &EgoGraph,
        k: NodeId,
        phi: &Metapath,
        seed: u64,
    ) -> Result<PromptInstance, PromptError> {
        let t = self.check_center(ego, k)?;
        if phi.hops() == 2 && phi.start() != t {
            return Err(PromptError::Incompatible(phi.abbreviation.clone(), t));
        }
        let triple = sample_metapath_triple(
            self.g,
            k,
            phi,
            self.options.n_mid,
            self.options.n_end,
            ego,
            seed,
        )?;
        if triple.ends.is_empty() {
            return Err(PromptError::NoTargets);
        }
        let [first, second] = [phi.steps()[0], phi.steps()[1]];
        let mut s = Seq::new(self.vocab, ego);
        s.header(&[])?;
        let seg = SegmentTag::IntermediateRelation;
        s.phrase(templates::center_phrase(t), seg)?;
        s.node(k, seg, 0)?;
        s.phrase(templates::first_step_phrase(first), seg)?;
        for &m in &triple.intermediates {
            s.node(m, seg, 1)?;
        }
        s.phrase(templates::second_step_phrase(second), SegmentTag::Question)?;
        let prompt_len = s.tokens.len();
        for &e in &triple.ends {
            s.node(e, SegmentTag::Completion, 2)?;
        }
        Ok(s.finish(
            PromptKind::HigherOrder {
                metapath: phi.abbreviation.clone(),
            },
            k,
            prompt_len,
            Some(LossSpace::of_entity(phi.end())),
            Vec::new(),
        ))
    }

    /// Node classification prompt; the class head reads the last position.
    pub fn node_task(
        &self,
        ego: &EgoGraph,
        k: NodeId,
        task: &TaskSpec,
        features: &[String],
    ) -> Result<PromptInstance, PromptError> {
        let t = self.check_center(ego, k)?;
        let mut s = Seq::new(self.vocab, ego);
        s.header(&[])?;
        let used: Vec<(&String, &str)> = features
            .iter()
            .filter_map(|f| self.g.feature(k, f).filter(|x| !x.is_empty()).map(|x| (f, x)))
            .take(if self.options.concat_features { usize::MAX } else { 1 })
            .collect();
        for (i, (f, text)) in used.iter().enumerate() {
            if i > 0 {
                s.push(self.vocab.tokenizer.special(crate::vocab::SEP)?, None, SegmentTag::Feature, None);
            }
            s.phrase(&templates::feature_phrase(f, t), SegmentTag::Feature)?;
            s.node(k, SegmentTag::Feature, 0)?;
            s.phrase(templates::FEATURE_IS, SegmentTag::Feature)?;
            s.text(text, SegmentTag::Feature, None);
        }
        s.phrase(&task.question, SegmentTag::Question)?;
        let n = s.tokens.len();
        Ok(s.finish(
            PromptKind::NodeTask {
                task: task.name.clone(),
            },
            k,
            n,
            None,
            Vec::new(),
        ))
    }

    /// Link prompt for training: masks a random share of the observed neighbors.
    pub fn link_task(
        &self,
        ego: &EgoGraph,
        k: NodeId,
        rel: RelationType,
        seed: u64,
    ) -> Result<PromptInstance, PromptError> {
        let observed = self.g.neighbors(k, rel)?;
        let (shown, heldout) = mask_neighbors(observed, self.options.mask_ratio, seed)
            .ok_or(PromptError::TooFewNeighbors(k.0))?;
        self.link_with(ego, k, rel, &shown, &heldout)
    }

    /// Link prompt with an explicit shown/held-out partition. Held-out nodes are
    /// left out of the ego-graph segment. An empty `heldout` gives a query prompt.
    pub fn link_with(
        &self,
        ego: &EgoGraph,
        k: NodeId,
        rel: RelationType,
        shown: &[NodeId],
        heldout: &[NodeId],
    ) -> Result<PromptInstance, PromptError> {
        let t = self.check_center(ego, k)?;
        if t != EntityType::Member {
            return Err(GraphError::TypeMismatch {
                node: k.0,
                expected: EntityType::Member,
                actual: t,
            }
            .into());
        }
        let mut s = Seq::new(self.vocab, ego);
        s.header(heldout)?;
        let seg = SegmentTag::IntermediateRelation;
        s.phrase(templates::LINK_CENTER, seg)?;
        s.node(k, seg, 0)?;
        let (rel_phrase, question) = match rel {
            RelationType::MemberMember => (templates::LINK_FOLLOWS, templates::LINK_FOLLOW_QUESTION),
            RelationType::MemberJob => (templates::LINK_INTERESTED, templates::LINK_JOB_QUESTION),
        };
        s.phrase(rel_phrase, seg)?;
        for &v in shown {
            s.node(v, seg, 1)?;
        }
        s.phrase(question, SegmentTag::Question)?;
        let n = s.tokens.len();
        Ok(s.finish(
            PromptKind::LinkTask { rel },
            k,
            n,
            Some(LossSpace::of_entity(rel.target())),
            heldout.to_vec(),
        ))
    }
}

/// Random shown/held-out split of an observed neighbor list; `None` when fewer
/// than two neighbors exist. At least one neighbor lands on each side.
pub fn mask_neighbors(
    observed: &[NodeId],
    mask_ratio: f64,
    seed: u64,
) -> Option<(Vec<NodeId>, Vec<NodeId>)> {
    let n = observed.len();
    if n < 2 {
        return None;
    }
    let n_held = ((n as f64 * mask_ratio).round() as usize).clamp(1, n - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut held: Vec<usize> = sample(&mut rng, n, n_held).into_vec();
    held.sort_unstable();
    let heldout: Vec<NodeId> = held.iter().map(|&i| observed[i]).collect();
    let shown: Vec<NodeId> = observed
        .iter()
        .copied()
        .filter(|v| heldout.binary_search(v).is_err())
        .collect();
    Some((shown, heldout))
}

/// Proximity bias for one instance, using the proximity between each generating
/// position's node and each attended node token. Generating positions are the
/// last prompt position (associated with the center) and every completion
/// position fed to the model. Keys are prompt node tokens, plus earlier
/// completion node tokens when `completion_keys` is set.
pub fn attention_bias_matrix(
    instance: &PromptInstance,
    g: &HetGraph,
    phis: &MetapathSet,
    layout: &VocabLayout,
    completion_keys: bool,
) -> Result<AttentionBias, GraphError> {
    let input_len = instance.input_len();
    let node_pos: Vec<(usize, NodeId)> = (0..input_len)
        .filter_map(|p| layout.node_of(instance.tokens[p]).map(|n| (p, n)))
        .collect();
    let anchor = instance.prompt_len.saturating_sub(1);
    let mut entries = Vec::new();
    for q in anchor..input_len {
        let j = if q == anchor {
            instance.center
        } else {
            match instance.node_assoc[q] {
                Some(j) => j,
                None => continue,
            }
        };
        for &(p, j2) in &node_pos {
            let visible = p < instance.prompt_len || (completion_keys && p <= q);
            if !visible || p > q {
                continue;
            }
            let psi = compute_proximity(g, j, j2, phis)?;
            if !psi.is_zero() {
                entries.push(BiasEntry {
                    query: q,
                    key: p,
                    bits: psi.bits,
                });
            }
        }
    }
    Ok(AttentionBias::new(phis.width(), entries))
}

/// Model-facing form of an instance plus its training target, if any.
pub fn to_model_input(
    instance: &PromptInstance,
    g: &HetGraph,
    layout: &VocabLayout,
    bias: AttentionBias,
) -> (ModelInput, Option<Target>) {
    let n = instance.input_len();
    let tokens = (0..n)
        .map(|p| {
            let id = instance.tokens[p];
            match layout.node_of(id) {
                Some(node) => InputToken::Node {
                    index: g.row(node),
                    entity: g.type_of(node).index(),
                    hop: instance.hops[p].unwrap_or(0),
                },
                None => InputToken::Text(id),
            }
        })
        .collect();
    let target = match (instance.loss_space, &instance.kind) {
        (Some(space), PromptKind::LinkTask { .. }) => {
            (!instance.heldout.is_empty()).then(|| Target::Links {
                space: space.output_space(),
                items: instance
                    .heldout
                    .iter()
                    .map(|&v| layout.node_token_id(v).expect("known node") - space.range(layout).start)
                    .collect(),
            })
        }
        (Some(space), _) if !instance.targets.is_empty() => {
            let start = space.range(layout).start;
            Some(Target::Tokens {
                space: space.output_space(),
                first_row: instance.prompt_len - 1,
                ids: instance.targets.iter().map(|&t| t - start).collect(),
            })
        }
        _ => None,
    };
    (
        ModelInput {
            tokens,
            bias: Arc::new(bias),
        },
        target,
    )
}

/// JSON rendering of an instance for debugging.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PromptDump {
    pub kind: PromptKind,
    pub center: usize,
    pub tokens: Vec<String>,
    pub ids: Vec<usize>,
    pub segments: Vec<SegmentTag>,
    pub node_assoc: Vec<Option<usize>>,
    pub hops: Vec<Option<usize>>,
    pub prompt_len: usize,
    pub loss_space: Option<LossSpace>,
    pub heldout: Vec<usize>,
}

pub fn dump(instance: &PromptInstance, g: &HetGraph, vocab: &PromptVocab) -> PromptDump {
    PromptDump {
        kind: instance.kind.clone(),
        center: instance.center.0,
        tokens: instance.tokens.iter().map(|&t| vocab.render(g, t)).collect(),
        ids: instance.tokens.clone(),
        segments: instance.segments.clone(),
        node_assoc: instance.node_assoc.iter().map(|a| a.map(|n| n.0)).collect(),
        hops: instance.hops.clone(),
        prompt_len: instance.prompt_len,
        loss_space: instance.loss_space,
        heldout: instance.heldout.iter().map(|n| n.0).collect(),
    }
}
