use crate::hetgraph::{
    sample_ego_graph, EgoGraph, EntityType, HetGraph, MetapathSet, NodeId, RelationType,
};
use crate::nn::{AttentionBias, ModelInput, Target, TransformerConfig};
use crate::prompts::{
    attention_bias_matrix, templates, to_model_input, PromptBuilder, PromptInstance,
    PromptOptions, PromptVocab, TaskSpec,
};
use crate::synth::{split_links, split_nodes, LinkSplit, NodeSplit, SKILL_NAME};

use super::config::{EgoSettings, RunConfig, TaskKind};
use super::TrainError;

/// A graph with its splits, the graph visible during training, and the prompt vocabulary.
#[derive(Clone, Debug)]
pub struct Setup {
    pub full: HetGraph,
    /// `full` without validation and test links.
    pub train_graph: HetGraph,
    pub vocab: PromptVocab,
    pub phis: MetapathSet,
    /// Node tasks in class-head order.
    pub task_specs: Vec<TaskSpec>,
    pub link_splits: Vec<LinkSplit>,
    pub node_splits: Vec<NodeSplit>,
    pub options: PromptOptions,
    pub ego: EgoSettings,
    pub features: Vec<String>,
    pub task_features: Vec<String>,
}

fn node_task_spec(g: &HetGraph, name: &str) -> Result<TaskSpec, TrainError> {
    let max = g
        .node_ids()
        .filter_map(|k| g.label(k, name))
        .max()
        .ok_or_else(|| TrainError::UnknownTask(name.to_string()))?;
    let classes = (max + 1).max(2);
    Ok(if classes == 2 {
        TaskSpec::binary_skill(name, SKILL_NAME)
    } else {
        TaskSpec::multiclass(name, classes, templates::SKILLS_QUESTION)
    })
}

impl Setup {
    pub fn new(full: HetGraph, config: &RunConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let phis = config.metapath_set()?;
        let s = &config.split;
        let mut link_splits = Vec::new();
        let mut node_splits = Vec::new();
        let mut task_specs = Vec::new();
        let mut train_graph = full.clone();
        for task in &config.train.tasks {
            match task {
                TaskKind::Link(rel) => {
                    let split = split_links(&full, *rel, s.link_ratios, s.min_degree, s.seed);
                    train_graph = split.training_graph(&train_graph);
                    link_splits.push(split);
                }
                TaskKind::Node(name) => {
                    task_specs.push(node_task_spec(&full, name)?);
                    node_splits.push(split_nodes(&full, name, s.node_ratios, s.seed)?);
                }
            }
        }
        let mut phrase_features = config.train.features.clone();
        phrase_features.extend(config.train.task_features.iter().cloned());
        let vocab = PromptVocab::new(&full, &phrase_features, &task_specs);
        Ok(Setup {
            full,
            train_graph,
            vocab,
            phis,
            task_specs,
            link_splits,
            node_splits,
            options: config.prompt.clone(),
            ego: config.ego,
            features: config.train.features.clone(),
            task_features: config.train.task_features.clone(),
        })
    }

    pub fn model_config(&self, config: &RunConfig) -> TransformerConfig {
        let m = &config.model;
        TransformerConfig {
            layers: m.layers,
            heads: m.heads,
            d_model: m.d_model,
            d_ff: m.d_ff,
            context: m.context,
            text_vocab: self.vocab.layout.text_size,
            n_members: self.full.n_members(),
            n_jobs: self.full.n_jobs(),
            max_hop: self.ego.depth,
            metapaths: self.phis.paths().len(),
            node_tasks: self.task_specs.iter().map(|t| (t.name.clone(), t.classes)).collect(),
            tie_heads: m.tie_heads,
            bias_scope: m.bias_scope,
            entity_position: m.entity_position,
            attention_alignment: m.attention_alignment,
        }
    }

    pub fn link_split(&self, rel: RelationType) -> Option<&LinkSplit> {
        self.link_splits.iter().find(|s| s.rel == rel)
    }

    pub fn node_split(&self, task: &str) -> Option<&NodeSplit> {
        self.node_splits.iter().find(|s| s.task == task)
    }

    pub fn task_spec(&self, task: &str) -> Option<(usize, &TaskSpec)> {
        self.task_specs.iter().enumerate().find(|(_, t)| t.name == task)
    }

    pub fn builder<'a>(&'a self, g: &'a HetGraph) -> PromptBuilder<'a> {
        PromptBuilder::new(g, &self.vocab, &self.options)
    }

    pub fn sample_ego(&self, g: &HetGraph, k: NodeId, seed: u64) -> Result<EgoGraph, TrainError> {
        Ok(sample_ego_graph(g, k, self.ego.depth, self.ego.fanout, seed)?)
    }

    /// First configured feature with non-empty text for `k`.
    pub fn feature_of(&self, k: NodeId) -> Option<&str> {
        self.features
            .iter()
            .find(|f| self.full.feature(k, f).is_some_and(|t| !t.is_empty()))
            .map(String::as_str)
    }

    /// Model input and target of an instance; the bias uses proximities in `g`.
    pub fn encode(
        &self,
        g: &HetGraph,
        inst: &PromptInstance,
        alignment: bool,
    ) -> Result<(ModelInput, Option<Target>), TrainError> {
        let bias = if alignment {
            attention_bias_matrix(inst, g, &self.phis, &self.vocab.layout, self.options.completion_keys)?
        } else {
            AttentionBias::empty(self.phis.width())
        };
        Ok(to_model_input(inst, g, &self.vocab.layout, bias))
    }

    /// Node-task prompt over the training graph.
    pub fn node_task_input(
        &self,
        k: NodeId,
        task: &TaskSpec,
        seed: u64,
        alignment: bool,
    ) -> Result<ModelInput, TrainError> {
        let g = &self.train_graph;
        let ego = self.sample_ego(g, k, seed)?;
        let inst = self.builder(g).node_task(&ego, k, task, &self.task_features)?;
        Ok(self.encode(g, &inst, alignment)?.0)
    }

    /// Link query prompt listing every training-graph neighbor of `k` as shown.
    pub fn link_query_input(
        &self,
        k: NodeId,
        rel: RelationType,
        seed: u64,
        alignment: bool,
    ) -> Result<(ModelInput, Vec<NodeId>), TrainError> {
        let g = &self.train_graph;
        if g.node_type(k)? != EntityType::Member {
            return Err(TrainError::Config(format!("link queries start at members, not node {}", k.0)));
        }
        let shown = g.neighbors(k, rel)?.to_vec();
        let ego = self.sample_ego(g, k, seed)?;
        let inst = self.builder(g).link_with(&ego, k, rel, &shown, &[])?;
        Ok((self.encode(g, &inst, alignment)?.0, shown))
    }
}
