use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::hetgraph::{Metapath, MetapathSet, RelationType, DEFAULT_METAPATHS};
use crate::nn::{BiasScope, ParamGroup};
use crate::prompts::PromptOptions;
use crate::synth::SynthConfig;

use super::optim::AdamConfig;
use super::TrainError;

/// A fine-tuning objective: a node classification label name, or link prediction.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum TaskKind {
    Node(String),
    Link(RelationType),
}

impl TaskKind {
    pub fn link_ui() -> Self {
        TaskKind::Link(RelationType::MemberJob)
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskKind::Node(n) => write!(f, "{n}"),
            TaskKind::Link(RelationType::MemberJob) => write!(f, "link:ui"),
            TaskKind::Link(RelationType::MemberMember) => write!(f, "link:uu"),
        }
    }
}

impl FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "link:ui" => Ok(TaskKind::Link(RelationType::MemberJob)),
            "link:uu" => Ok(TaskKind::Link(RelationType::MemberMember)),
            _ if s.starts_with("link:") => Err(format!("unknown link relation in {s:?}")),
            "" => Err("empty task name".into()),
            _ => Ok(TaskKind::Node(s.to_string())),
        }
    }
}

impl TryFrom<String> for TaskKind {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<TaskKind> for String {
    fn from(t: TaskKind) -> String {
        t.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub context: usize,
    pub tie_heads: bool,
    pub bias_scope: BiasScope,
    pub entity_position: bool,
    pub attention_alignment: bool,
    pub init_seed: u64,
}

impl Default for ModelSettings {
    fn default() -> Self {
        ModelSettings {
            layers: 2,
            heads: 2,
            d_model: 64,
            d_ff: 256,
            context: 256,
            tie_heads: true,
            bias_scope: BiasScope::PerLayer,
            entity_position: true,
            attention_alignment: true,
            init_seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EgoSettings {
    pub depth: usize,
    pub fanout: usize,
}

impl Default for EgoSettings {
    fn default() -> Self {
        EgoSettings { depth: 2, fanout: 5 }
    }
}

/// How structural instances pick their metapath.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetapathPolicy {
    /// One random one-hop and one random two-hop path per node.
    OnePerOrder,
    /// A single path drawn uniformly from every compatible one.
    Uniform,
}

/// Parameters a node-classification batch may update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeTaskUpdates {
    /// Class embeddings only; node, entity and hop rows are left to the
    /// feature and structural objectives.
    ClassHead,
    /// Every tensor except the per-node rows `Z`.
    Shared,
    /// Every trainable tensor the loss reaches.
    All,
}

impl NodeTaskUpdates {
    /// Groups a node-task batch may touch; `None` means no restriction.
    pub fn groups(self) -> Option<&'static [ParamGroup]> {
        match self {
            NodeTaskUpdates::ClassHead => Some(&[ParamGroup::ClassHead]),
            NodeTaskUpdates::Shared => Some(&[ParamGroup::ClassHead, ParamGroup::EntityPosition, ParamGroup::AttentionBias]),
            NodeTaskUpdates::All => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Causal-LM epochs over node texts before graph training.
    pub stage0_epochs: usize,
    /// Stage-0 learning rate; `None` uses `adam.lr`.
    pub stage0_lr: Option<f64>,
    pub warmup_epochs: usize,
    /// Warmup plus interleaved epochs.
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub metapaths: Vec<String>,
    pub warmup_policy: MetapathPolicy,
    pub interleaved_policy: MetapathPolicy,
    pub freeze_backbone: bool,
    pub node_task_updates: NodeTaskUpdates,
    pub tasks: Vec<TaskKind>,
    /// Feature names tried in order for feature modeling.
    pub features: Vec<String>,
    /// Feature names shown in node-task prompts.
    pub task_features: Vec<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage0_epochs: 2,
            stage0_lr: None,
            warmup_epochs: 10,
            epochs: 100,
            batch_size: 8,
            adam: AdamConfig::default(),
            seed: 0,
            metapaths: DEFAULT_METAPATHS.iter().map(|s| s.to_string()).collect(),
            warmup_policy: MetapathPolicy::OnePerOrder,
            interleaved_policy: MetapathPolicy::Uniform,
            freeze_backbone: true,
            node_task_updates: NodeTaskUpdates::ClassHead,
            tasks: vec![TaskKind::link_ui()],
            features: vec!["biography".into(), "description".into()],
            task_features: vec!["biography".into()],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub link_ratios: (f64, f64, f64),
    pub min_degree: usize,
    pub node_ratios: (f64, f64, f64),
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            link_ratios: (0.6, 0.2, 0.2),
            min_degree: 5,
            node_ratios: (0.7, 0.15, 0.15),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Ego graphs averaged per test-time prediction.
    pub n_g: usize,
    /// Ego graphs averaged per validation-time prediction.
    pub n_g_valid: usize,
    pub recall_at: Vec<usize>,
    pub ndcg_at: Vec<usize>,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_g: 4,
            n_g_valid: 4,
            recall_at: vec![20, 40],
            ndcg_at: vec![100],
            seed: 0,
        }
    }
}

/// Everything that determines a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub model: ModelSettings,
    pub prompt: PromptOptions,
    pub ego: EgoSettings,
    pub train: TrainConfig,
    pub split: SplitConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let t = &self.train;
        if t.warmup_epochs > t.epochs {
            return Err(TrainError::Config(format!(
                "{} warmup epochs exceed {} total epochs",
                t.warmup_epochs, t.epochs
            )));
        }
        if [Some(t.adam.lr), t.stage0_lr].iter().flatten().any(|lr| !(*lr > 0.0 && lr.is_finite())) {
            return Err(TrainError::Config("learning rates must be positive".into()));
        }
        if t.batch_size == 0 {
            return Err(TrainError::Config("batch size must be positive".into()));
        }
        let phis = self.metapath_set()?;
        if !phis.paths().iter().any(|p| p.hops() == 1) {
            return Err(TrainError::Config("the metapath set needs a one-hop path".into()));
        }
        if self.ego.depth == 0 || self.ego.fanout == 0 {
            return Err(TrainError::Config("ego depth and fanout must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.prompt.mask_ratio) {
            return Err(TrainError::Config("mask ratio must lie in [0, 1]".into()));
        }
        for (name, r) in [("link", self.split.link_ratios), ("node", self.split.node_ratios)] {
            if ((r.0 + r.1 + r.2) - 1.0).abs() > 1e-9 || r.0 < 0.0 || r.1 < 0.0 || r.2 < 0.0 {
                return Err(TrainError::Config(format!("{name} split ratios must sum to 1")));
            }
        }
        if self.eval.n_g == 0 || self.eval.n_g_valid == 0 {
            return Err(TrainError::Config("N_g must be positive".into()));
        }
        Ok(())
    }

    pub fn metapath_set(&self) -> Result<MetapathSet, TrainError> {
        if self.train.metapaths.is_empty() {
            return Err(TrainError::Config("the metapath set is empty".into()));
        }
        let paths = self
            .train
            .metapaths
            .iter()
            .map(|s| Metapath::parse(s))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(MetapathSet::new(paths)?)
    }

    /// SHA-256 of the canonical JSON rendering, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}
