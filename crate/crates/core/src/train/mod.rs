//! Stage-0 text pretraining, the warmup and interleaved graph schedules,
//! optimization and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod optim;

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::hetgraph::{GraphError, Metapath, NodeId, RelationType};
use crate::nn::{Gradients, InputToken, Model, ModelInput, NnError, OutputSpace, ParamGroup, Real, Tape, Target};
use crate::prompts::{mask_neighbors, PromptError, PromptInstance};
use crate::seed::derive;
use crate::synth::SynthError;
use crate::vocab::Tokenizer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TrainState, FORMAT_VERSION, MAGIC};
pub use config::{
    EgoSettings, EvalConfig, MetapathPolicy, ModelSettings, NodeTaskUpdates, RunConfig, SplitConfig, TaskKind,
    TrainConfig,
};
pub use data::Setup;
pub use optim::{Adam, AdamConfig};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("the text corpus is empty")]
    EmptyCorpus,
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("checkpoint truncated: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Stage0,
    Warmup,
    Interleaved,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveStats {
    pub mean_loss: f64,
    pub instances: usize,
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub phase: Phase,
    pub epoch: usize,
    pub steps: usize,
    /// Keyed by `feature`, `structural`, `task` (or `text` in stage 0).
    pub objectives: BTreeMap<String, ObjectiveStats>,
}

impl EpochStats {
    fn new(phase: Phase, epoch: usize) -> Self {
        EpochStats {
            phase,
            epoch,
            steps: 0,
            objectives: BTreeMap::new(),
        }
    }

    fn entry(&mut self, key: &str) -> &mut ObjectiveStats {
        self.objectives.entry(key.to_string()).or_default()
    }

    fn skip(&mut self, key: &str) {
        self.entry(key).skipped += 1;
    }

    fn record(&mut self, key: &str, loss: f64) {
        let e = self.entry(key);
        e.mean_loss += (loss - e.mean_loss) / (e.instances + 1) as f64;
        e.instances += 1;
    }
}

pub const FEATURE: &str = "feature";
pub const STRUCTURAL: &str = "structural";
pub const TASK: &str = "task";
pub const TEXT: &str = "text";

struct Example {
    objective: &'static str,
    input: ModelInput,
    target: Target,
}

/// Mean loss and summed gradients of a batch, then one optimizer step.
fn apply_batch<T: Real>(
    model: &mut Model<T>,
    opt: &mut Adam<T>,
    batch: &[Example],
    class_groups: Option<&[ParamGroup]>,
    stats: &mut EpochStats,
) -> Result<(), TrainError> {
    if batch.is_empty() {
        return Ok(());
    }
    let mut total = Gradients::empty(model.store.len());
    for ex in batch {
        let mut tape = Tape::new(&model.store);
        let loss = model.loss(&mut tape, &ex.input, &ex.target)?;
        let value = tape.value(loss).data()[0].to_f64().unwrap_or(f64::NAN);
        if !value.is_finite() {
            return Err(TrainError::NonFinite(format!("{} loss", ex.objective)));
        }
        stats.record(ex.objective, value);
        let mut g = tape.backward(loss)?;
        if let (Some(keep), Target::Class { .. }) = (class_groups, &ex.target) {
            let store = &model.store;
            g.retain(|id| keep.contains(&store.get(id).group));
        }
        total.accumulate(&g);
    }
    total.scale(T::lit(1.0 / batch.len() as f64));
    opt.step(&mut model.store, &mut total)?;
    stats.steps += 1;
    Ok(())
}

/// `<bos> text <eos>` sequences of every configured feature text, clipped to `context`.
pub fn text_corpus(setup: &Setup, context: usize) -> Vec<Vec<usize>> {
    let tok = &setup.vocab.tokenizer;
    let mut out = Vec::new();
    for k in setup.full.node_ids() {
        for f in &setup.features {
            if let Some(t) = setup.full.feature(k, f).filter(|t| !t.is_empty()) {
                let mut seq = vec![tok.bos()];
                seq.extend(tok.encode(t));
                seq.push(tok.eos());
                seq.truncate(context + 1);
                out.push(seq);
            }
        }
    }
    out
}

/// Plain causal language modeling of the backbone over a token corpus.
pub fn stage0_text_pretrain<T: Real>(
    model: &mut Model<T>,
    corpus: &[Vec<usize>],
    epochs: usize,
    batch_size: usize,
    adam: AdamConfig,
    seed: u64,
) -> Result<Vec<EpochStats>, TrainError> {
    if corpus.iter().all(|s| s.len() < 2) {
        return Err(TrainError::EmptyCorpus);
    }
    let mut opt = Adam::new(adam, &model.store);
    let mut history = Vec::with_capacity(epochs);
    let window = model.config.context + 1;
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..corpus.len()).filter(|&i| corpus[i].len() >= 2).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive(seed, 0, epoch as u64, "stage0/order")));
        // documents are packed back to back so every position row gets trained
        let stream: Vec<usize> = order.iter().flat_map(|&i| corpus[i].iter().copied()).collect();
        let windows: Vec<&[usize]> = stream.chunks(window).filter(|w| w.len() >= 2).collect();
        let mut stats = EpochStats::new(Phase::Stage0, epoch);
        for chunk in windows.chunks(batch_size.max(1)) {
            let batch: Vec<Example> = chunk
                .iter()
                .map(|seq| Example {
                    objective: TEXT,
                    input: ModelInput::text(&seq[..seq.len() - 1], 0),
                    target: Target::Tokens {
                        space: OutputSpace::Text,
                        first_row: 0,
                        ids: seq[1..].to_vec(),
                    },
                })
                .collect();
            apply_batch(model, &mut opt, &batch, None, &mut stats)?;
        }
        history.push(stats);
    }
    Ok(history)
}

/// Trainer state: model, optimizer, epoch counter and the JSON-Lines log.
pub struct Trainer<'s, T: Real> {
    pub setup: &'s Setup,
    pub config: RunConfig,
    pub model: Model<T>,
    pub optimizer: Adam<T>,
    pub state: TrainState,
    pub history: Vec<EpochStats>,
    log: Option<Box<dyn Write + 's>>,
}

impl<'s, T: Real> Trainer<'s, T> {
    pub fn new(setup: &'s Setup, config: RunConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let model = Model::new(setup.model_config(&config), config.model.init_seed)?;
        let optimizer = Adam::new(config.train.adam, &model.store);
        Ok(Trainer {
            setup,
            model,
            optimizer,
            state: TrainState {
                stage0_done: false,
                epoch: 0,
                seed: config.train.seed,
            },
            config,
            history: Vec::new(),
            log: None,
        })
    }

    /// Resumes from a checkpoint written by [`Trainer::checkpoint`].
    pub fn from_checkpoint(setup: &'s Setup, ck: Checkpoint<T>) -> Result<Self, TrainError> {
        let optimizer = ck
            .optimizer
            .unwrap_or_else(|| Adam::new(ck.config.train.adam, &ck.model.store));
        Ok(Trainer {
            setup,
            model: ck.model,
            optimizer,
            state: ck.state,
            config: ck.config,
            history: Vec::new(),
            log: None,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            model: self.model.clone(),
            vocab: self.setup.vocab.clone(),
            config: self.config.clone(),
            state: self.state.clone(),
            optimizer: Some(self.optimizer.clone()),
        }
    }

    pub fn set_log(&mut self, w: Box<dyn Write + 's>) {
        self.log = Some(w);
    }

    fn emit(&mut self, stats: EpochStats) -> Result<(), TrainError> {
        for (k, o) in &stats.objectives {
            if !o.mean_loss.is_finite() {
                return Err(TrainError::NonFinite(format!("{k} epoch mean")));
            }
        }
        if let Some(w) = self.log.as_mut() {
            serde_json::to_writer(&mut *w, &stats)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        self.history.push(stats);
        Ok(())
    }

    fn alignment(&self) -> bool {
        self.config.model.attention_alignment
    }

    /// Stage 0 (once), then the remaining warmup and interleaved epochs.
    pub fn fit(&mut self) -> Result<(), TrainError> {
        self.stage0()?;
        while self.state.epoch < self.config.train.epochs {
            self.run_epoch()?;
        }
        Ok(())
    }

    pub fn stage0(&mut self) -> Result<(), TrainError> {
        if self.state.stage0_done {
            return Ok(());
        }
        let t = &self.config.train;
        let adam = AdamConfig { lr: t.stage0_lr.unwrap_or(t.adam.lr), ..t.adam };
        let (epochs, batch, seed) = (t.stage0_epochs, t.batch_size, t.seed);
        if epochs > 0 {
            let corpus = text_corpus(self.setup, self.config.model.context);
            for s in stage0_text_pretrain(&mut self.model, &corpus, epochs, batch, adam, seed)? {
                self.emit(s)?;
            }
        }
        if self.config.train.freeze_backbone {
            self.model.set_backbone_frozen(true);
        }
        self.optimizer = Adam::new(self.config.train.adam, &self.model.store);
        self.state.stage0_done = true;
        Ok(())
    }

    /// The next epoch of the schedule.
    pub fn run_epoch(&mut self) -> Result<EpochStats, TrainError> {
        let stats = if self.state.epoch < self.config.train.warmup_epochs {
            self.warmup_epoch()?
        } else {
            self.interleaved_epoch()?
        };
        self.state.epoch += 1;
        self.emit(stats.clone())?;
        Ok(stats)
    }

    fn seed(&self, node: NodeId, purpose: &str) -> u64 {
        derive(self.state.seed, node.0 as u64, self.state.epoch as u64, purpose)
    }

    fn node_order(&self, purpose: &str) -> Vec<NodeId> {
        let mut order: Vec<NodeId> = self.setup.train_graph.node_ids().collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(self.seed(NodeId(0), purpose)));
        order
    }

    /// Skips expected failures, counting them; propagates anything else.
    fn collect(
        &self,
        stats: &mut EpochStats,
        objective: &'static str,
        built: Result<PromptInstance, PromptError>,
        g: &crate::hetgraph::HetGraph,
        out: &mut Vec<Example>,
    ) -> Result<(), TrainError> {
        let inst = match built {
            Ok(i) => i,
            Err(e) if e.is_skip() => {
                stats.skip(objective);
                return Ok(());
            }
            Err(e) => return Err(e.into()),
        };
        match self.setup.encode(g, &inst, self.alignment())? {
            (input, Some(target)) => out.push(Example {
                objective,
                input,
                target,
            }),
            _ => stats.skip(objective),
        }
        Ok(())
    }

    fn feature_example(&self, k: NodeId, phase: &str, stats: &mut EpochStats, out: &mut Vec<Example>) -> Result<(), TrainError> {
        let g = &self.setup.train_graph;
        let Some(f) = self.setup.feature_of(k) else {
            stats.skip(FEATURE);
            return Ok(());
        };
        let ego = self.setup.sample_ego(g, k, self.seed(k, &format!("{phase}/feature/ego")))?;
        let built = self.setup.builder(g).feature(&ego, k, f);
        self.collect(stats, FEATURE, built, g, out)
    }

    fn structural_examples(
        &self,
        k: NodeId,
        phase: &str,
        policy: MetapathPolicy,
        stats: &mut EpochStats,
        out: &mut Vec<Example>,
    ) -> Result<(), TrainError> {
        let g = &self.setup.train_graph;
        let t = g.type_of(k);
        let compatible: Vec<&Metapath> = self.setup.phis.paths().iter().filter(|p| p.start() == t).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed(k, &format!("{phase}/structural/path")));
        let chosen: Vec<&Metapath> = match policy {
            MetapathPolicy::OnePerOrder => [1, 2]
                .iter()
                .filter_map(|&h| {
                    let c: Vec<&&Metapath> = compatible.iter().filter(|p| p.hops() == h).collect();
                    c.choose(&mut rng).map(|p| **p)
                })
                .collect(),
            MetapathPolicy::Uniform => compatible.choose(&mut rng).copied().into_iter().collect(),
        };
        if chosen.is_empty() {
            stats.skip(STRUCTURAL);
        }
        let ego = self.setup.sample_ego(g, k, self.seed(k, &format!("{phase}/structural/ego")))?;
        let b = self.setup.builder(g);
        for phi in chosen {
            let seed = self.seed(k, &format!("{phase}/structural/{phi}"));
            let built = match phi.hops() {
                1 => b.first_order(&ego, k, phi, seed),
                _ => b.higher_order(&ego, k, phi, seed),
            };
            self.collect(stats, STRUCTURAL, built, g, out)?;
        }
        Ok(())
    }

    fn task_example(&self, task: &TaskKind, k: NodeId, stats: &mut EpochStats, out: &mut Vec<Example>) -> Result<(), TrainError> {
        let tg = &self.setup.train_graph;
        match task {
            TaskKind::Node(name) => {
                let (idx, spec) = self
                    .setup
                    .task_spec(name)
                    .ok_or_else(|| TrainError::UnknownTask(name.clone()))?;
                let Some(class) = self.setup.full.label(k, name) else {
                    stats.skip(TASK);
                    return Ok(());
                };
                let input = self.setup.node_task_input(k, spec, self.seed(k, "task/ego"), self.alignment())?;
                out.push(Example {
                    objective: TASK,
                    input,
                    target: Target::Class { task: idx, class },
                });
                Ok(())
            }
            TaskKind::Link(rel) => {
                let observed = tg.neighbors(k, *rel)?;
                let Some((shown, heldout)) =
                    mask_neighbors(observed, self.setup.options.mask_ratio, self.seed(k, "task/mask"))
                else {
                    stats.skip(TASK);
                    return Ok(());
                };
                // proximities and the ego graph must not see the masked links
                let removed: Vec<(NodeId, NodeId)> = heldout.iter().map(|&v| (k, v)).collect();
                let g = tg.without_edges(*rel, &removed);
                let ego = self.setup.sample_ego(&g, k, self.seed(k, "task/ego"))?;
                let built = self.setup.builder(&g).link_with(&ego, k, *rel, &shown, &heldout);
                self.collect(stats, TASK, built, &g, out)
            }
        }
    }

    /// Nodes that can produce a training example for `task`.
    pub fn task_nodes(&self, task: &TaskKind) -> Result<Vec<NodeId>, TrainError> {
        let tg = &self.setup.train_graph;
        Ok(match task {
            TaskKind::Node(name) => self
                .setup
                .node_split(name)
                .ok_or_else(|| TrainError::UnknownTask(name.clone()))?
                .train
                .clone(),
            TaskKind::Link(rel) => tg
                .members()
                .filter(|&u| tg.neighbors(u, *rel).map(|n| n.len() >= 2).unwrap_or(false))
                .collect(),
        })
    }

    /// Every node contributes a feature instance and structural instances; steps
    /// are taken every `batch_size` instances. Task heads are not used.
    pub fn warmup_epoch(&mut self) -> Result<EpochStats, TrainError> {
        let mut stats = EpochStats::new(Phase::Warmup, self.state.epoch);
        let policy = self.config.train.warmup_policy;
        let batch = self.config.train.batch_size;
        let mut pending = Vec::new();
        for k in self.node_order("warmup/order") {
            self.feature_example(k, "warmup", &mut stats, &mut pending)?;
            self.structural_examples(k, "warmup", policy, &mut stats, &mut pending)?;
            while pending.len() >= batch {
                let rest = pending.split_off(batch);
                apply_batch(&mut self.model, &mut self.optimizer, &pending, None, &mut stats)?;
                pending = rest;
            }
        }
        apply_batch(&mut self.model, &mut self.optimizer, &pending, None, &mut stats)?;
        Ok(stats)
    }

    /// Cycles a feature batch, a structural batch and a task batch over chunks of
    /// the shuffled node list. Task batches rotate through the configured tasks.
    pub fn interleaved_epoch(&mut self) -> Result<EpochStats, TrainError> {
        let mut stats = EpochStats::new(Phase::Interleaved, self.state.epoch);
        let tasks = self.config.train.tasks.clone();
        let batch = self.config.train.batch_size;
        let policy = self.config.train.interleaved_policy;
        let mut queues: Vec<(Vec<NodeId>, usize, usize)> = Vec::with_capacity(tasks.len());
        for (i, t) in tasks.iter().enumerate() {
            let mut nodes = self.task_nodes(t)?;
            nodes.shuffle(&mut ChaCha8Rng::seed_from_u64(self.seed(NodeId(i), "task/order/0")));
            queues.push((nodes, 0, 0));
        }
        let order = self.node_order("interleaved/order");
        for (cycle, chunk) in order.chunks(batch).enumerate() {
            let mut f = Vec::new();
            for &k in chunk {
                self.feature_example(k, "interleaved", &mut stats, &mut f)?;
            }
            apply_batch(&mut self.model, &mut self.optimizer, &f, None, &mut stats)?;
            let mut s = Vec::new();
            for &k in chunk {
                self.structural_examples(k, "interleaved", policy, &mut stats, &mut s)?;
            }
            apply_batch(&mut self.model, &mut self.optimizer, &s, None, &mut stats)?;
            if tasks.is_empty() {
                continue;
            }
            let ti = cycle % tasks.len();
            let mut t = Vec::new();
            for _ in 0..batch {
                let (nodes, pos, pass) = &mut queues[ti];
                if nodes.is_empty() {
                    stats.skip(TASK);
                    break;
                }
                if *pos == nodes.len() {
                    *pos = 0;
                    *pass += 1;
                    let purpose = format!("task/order/{pass}");
                    nodes.shuffle(&mut ChaCha8Rng::seed_from_u64(derive(
                        self.state.seed,
                        ti as u64,
                        self.state.epoch as u64,
                        &purpose,
                    )));
                }
                let k = nodes[*pos];
                *pos += 1;
                self.task_example(&tasks[ti], k, &mut stats, &mut t)?;
            }
            let keep = self.config.train.node_task_updates.groups();
            apply_batch(&mut self.model, &mut self.optimizer, &t, keep, &mut stats)?;
        }
        Ok(stats)
    }
}

impl ModelInput {
    /// Text-only input with an empty bias.
    pub fn text(ids: &[usize], bias_width: usize) -> Self {
        ModelInput {
            tokens: ids.iter().map(|&i| InputToken::Text(i)).collect(),
            bias: std::sync::Arc::new(crate::nn::AttentionBias::empty(bias_width)),
        }
    }
}

/// Relation of a link task, if it is one.
pub fn link_rel(task: &TaskKind) -> Option<RelationType> {
    match task {
        TaskKind::Link(r) => Some(*r),
        TaskKind::Node(_) => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_graph, SynthConfig, SKILL_TASK};

    fn class_step(updates: NodeTaskUpdates) -> (bool, bool, bool) {
        let mut c = RunConfig::default();
        c.synth = SynthConfig { n_members: 20, n_jobs: 10, n_clusters: 2, p_in: 0.3, ..SynthConfig::default() };
        c.model.d_model = 16;
        c.model.d_ff = 32;
        c.model.context = 96;
        c.split.min_degree = 3;
        c.train.tasks = vec![TaskKind::Node(SKILL_TASK.into())];
        c.train.node_task_updates = updates;
        let setup = Setup::new(generate_graph(&c.synth).unwrap().graph, &c).unwrap();
        let mut t: Trainer<f64> = Trainer::new(&setup, c).unwrap();
        let k = setup.node_split(SKILL_TASK).unwrap().train[0];
        let mut stats = EpochStats::new(Phase::Interleaved, 0);
        let mut batch = Vec::new();
        t.task_example(&TaskKind::Node(SKILL_TASK.into()), k, &mut stats, &mut batch).unwrap();
        let ids = t.model.ids.clone();
        let before = t.model.store.clone();
        apply_batch(&mut t.model, &mut t.optimizer, &batch, updates.groups(), &mut stats).unwrap();
        let moved = |id| t.model.store.value(id).data() != before.value(id).data();
        (moved(ids.class_heads[0]), moved(ids.node_embed), moved(ids.entity_embed))
    }

    #[test]
    fn node_task_update_scope() {
        assert_eq!(class_step(NodeTaskUpdates::ClassHead), (true, false, false));
        assert_eq!(class_step(NodeTaskUpdates::Shared), (true, false, true));
        assert_eq!(class_step(NodeTaskUpdates::All), (true, true, true));
    }
}
