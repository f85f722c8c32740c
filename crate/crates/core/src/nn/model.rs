//! Decoder-only transformer with node tokens, proximity-biased attention and the
//! restricted language-model and task heads.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::attention::AttentionBias;
use super::params::{ParamGroup, ParamId, ParamStore};
use super::real::Real;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use super::NnError;

/// Standard deviation of the Gaussian used for every learnable table.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasScope {
    /// One bias vector per layer, shared across heads.
    PerLayer,
    /// A single bias vector shared by every layer.
    Global,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub context: usize,
    /// Size of the text part of the vocabulary.
    pub text_vocab: usize,
    pub n_members: usize,
    pub n_jobs: usize,
    /// Maximum hop distance D; the hop table has D + 1 rows.
    pub max_hop: usize,
    /// Number of non-trivial metapaths M; bias vectors have M + 1 entries.
    pub metapaths: usize,
    /// Class count of each node-level task, in head order.
    pub node_tasks: Vec<(String, usize)>,
    pub tie_heads: bool,
    pub bias_scope: BiasScope,
    /// Add entity and hop embeddings to node tokens.
    pub entity_position: bool,
    /// Apply the proximity bias inside attention.
    pub attention_alignment: bool,
}

impl TransformerConfig {
    pub fn n_nodes(&self) -> usize {
        self.n_members + self.n_jobs
    }

    pub fn vocab_size(&self) -> usize {
        self.text_vocab + self.n_nodes() + self.node_tasks.iter().map(|t| t.1).sum::<usize>()
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.layers == 0 || self.heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return Err(NnError::Config("layer, head and width counts must be positive".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(NnError::Config(format!(
                "model width {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.metapaths + 1 > 32 {
            return Err(NnError::Config("at most 31 metapaths are supported".into()));
        }
        if self.context == 0 {
            return Err(NnError::Config("context length must be positive".into()));
        }
        Ok(())
    }

    /// Tiny configuration used by gradient checks and unit tests.
    pub fn tiny(text_vocab: usize, n_members: usize, n_jobs: usize) -> Self {
        TransformerConfig {
            layers: 2,
            heads: 2,
            d_model: 16,
            d_ff: 32,
            context: 64,
            text_vocab,
            n_members,
            n_jobs,
            max_hop: 2,
            metapaths: 6,
            node_tasks: vec![("skill".into(), 2)],
            tie_heads: true,
            bias_scope: BiasScope::PerLayer,
            entity_position: true,
            attention_alignment: true,
        }
    }
}

/// One input position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputToken {
    Text(usize),
    /// `index` is the zero-based node row, `entity` the entity-type row, `hop` the
    /// distance to the ego-graph center.
    Node {
        index: usize,
        entity: usize,
        hop: usize,
    },
}

#[derive(Clone, Debug)]
pub struct ModelInput {
    pub tokens: Vec<InputToken>,
    pub bias: Arc<AttentionBias>,
}

/// Token space a language-model head normalizes over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputSpace {
    Text,
    Member,
    Job,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    /// Next-token targets predicted at rows `first_row..first_row + ids.len()`;
    /// ids are local to the space.
    Tokens {
        space: OutputSpace,
        first_row: usize,
        ids: Vec<usize>,
    },
    /// Class of a node-level task, read from the last position.
    Class { task: usize, class: usize },
    /// Held-out members or jobs, read from the last position.
    Links { space: OutputSpace, items: Vec<usize> },
}

#[derive(Clone, Debug)]
pub struct LayerIds {
    pub ln1_gamma: ParamId,
    pub ln1_beta: ParamId,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2_gamma: ParamId,
    pub ln2_beta: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug)]
pub struct ModelIds {
    pub token_embed: ParamId,
    pub position_embed: ParamId,
    pub layers: Vec<LayerIds>,
    pub lnf_gamma: ParamId,
    pub lnf_beta: ParamId,
    pub node_embed: ParamId,
    pub entity_embed: ParamId,
    pub hop_embed: ParamId,
    pub attn_bias: ParamId,
    pub class_heads: Vec<ParamId>,
    pub member_head: Option<ParamId>,
    pub job_head: Option<ParamId>,
}

#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    pub config: TransformerConfig,
    pub store: ParamStore<T>,
    pub ids: ModelIds,
}

struct Init {
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl Init {
    fn gaussian<T: Real>(&mut self, shape: &[usize]) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::lit(self.normal.sample(&mut self.rng)))
            .collect();
        Tensor::from_vec(shape, data).expect("shape matches")
    }
}

impl<T: Real> Model<T> {
    pub fn new(config: TransformerConfig, seed: u64) -> Result<Self, NnError> {
        config.validate()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            normal: Normal::new(0.0, INIT_STD).expect("valid std"),
        };
        let c = &config;
        let d = c.d_model;
        let mut s = ParamStore::new();
        use ParamGroup::*;
        let token_embed = s.insert("backbone.wte", Backbone, init.gaussian(&[c.text_vocab, d]));
        let position_embed = s.insert("backbone.wpe", Backbone, init.gaussian(&[c.context, d]));
        let mut layers = Vec::with_capacity(c.layers);
        for l in 0..c.layers {
            let p = |n: &str| format!("backbone.layer{l}.{n}");
            let ones = Tensor::filled(&[d], T::one());
            layers.push(LayerIds {
                ln1_gamma: s.insert(&p("ln1.gamma"), Backbone, ones.clone()),
                ln1_beta: s.insert(&p("ln1.beta"), Backbone, Tensor::zeros(&[d])),
                wq: s.insert(&p("attn.wq"), Backbone, init.gaussian(&[d, d])),
                bq: s.insert(&p("attn.bq"), Backbone, Tensor::zeros(&[d])),
                wk: s.insert(&p("attn.wk"), Backbone, init.gaussian(&[d, d])),
                bk: s.insert(&p("attn.bk"), Backbone, Tensor::zeros(&[d])),
                wv: s.insert(&p("attn.wv"), Backbone, init.gaussian(&[d, d])),
                bv: s.insert(&p("attn.bv"), Backbone, Tensor::zeros(&[d])),
                wo: s.insert(&p("attn.wo"), Backbone, init.gaussian(&[d, d])),
                bo: s.insert(&p("attn.bo"), Backbone, Tensor::zeros(&[d])),
                ln2_gamma: s.insert(&p("ln2.gamma"), Backbone, ones),
                ln2_beta: s.insert(&p("ln2.beta"), Backbone, Tensor::zeros(&[d])),
                w1: s.insert(&p("ffn.w1"), Backbone, init.gaussian(&[d, c.d_ff])),
                b1: s.insert(&p("ffn.b1"), Backbone, Tensor::zeros(&[c.d_ff])),
                w2: s.insert(&p("ffn.w2"), Backbone, init.gaussian(&[c.d_ff, d])),
                b2: s.insert(&p("ffn.b2"), Backbone, Tensor::zeros(&[d])),
            });
        }
        let lnf_gamma = s.insert("backbone.lnf.gamma", Backbone, Tensor::filled(&[d], T::one()));
        let lnf_beta = s.insert("backbone.lnf.beta", Backbone, Tensor::zeros(&[d]));
        let node_embed = s.insert("node.z", NodeEmbedding, init.gaussian(&[c.n_nodes(), d]));
        let entity_embed = s.insert("node.entity", EntityPosition, init.gaussian(&[2, d]));
        let hop_embed = s.insert("node.hop", EntityPosition, init.gaussian(&[c.max_hop + 1, d]));
        let bias_rows = match c.bias_scope {
            BiasScope::PerLayer => c.layers,
            BiasScope::Global => 1,
        };
        let attn_bias = s.insert(
            "align.bias",
            AttentionBias,
            Tensor::zeros(&[bias_rows, c.metapaths + 1]),
        );
        let class_heads = c
            .node_tasks
            .iter()
            .map(|(name, n)| s.insert(&format!("head.class.{name}"), ClassHead, init.gaussian(&[*n, d])))
            .collect();
        let (member_head, job_head) = if c.tie_heads {
            (None, None)
        } else {
            (
                Some(s.insert("head.member", LinkHead, init.gaussian(&[c.n_members, d]))),
                Some(s.insert("head.job", LinkHead, init.gaussian(&[c.n_jobs, d]))),
            )
        };
        if !c.entity_position {
            s.set_group_frozen(EntityPosition, true);
        }
        if !c.attention_alignment {
            s.set_group_frozen(AttentionBias, true);
        }
        let ids = ModelIds {
            token_embed,
            position_embed,
            layers,
            lnf_gamma,
            lnf_beta,
            node_embed,
            entity_embed,
            hop_embed,
            attn_bias,
            class_heads,
            member_head,
            job_head,
        };
        Ok(Model { config, store: s, ids })
    }

    pub fn task_index(&self, task: &str) -> Option<usize> {
        self.config.node_tasks.iter().position(|(n, _)| n == task)
    }

    /// Final-norm hidden states `[T, d]`.
    pub fn forward(&self, tape: &mut Tape<'_, T>, input: &ModelInput) -> Result<Var, NnError> {
        let c = &self.config;
        let t = input.tokens.len();
        if t == 0 {
            return Err(NnError::Shape("empty input".into()));
        }
        if t > c.context {
            return Err(NnError::ContextOverflow {
                len: t,
                context: c.context,
            });
        }
        let x = self.embed(tape, &input.tokens)?;
        let bias = (c.attention_alignment && !input.bias.is_empty()).then(|| tape.param(self.ids.attn_bias));
        let mut x = x;
        for (l, ids) in self.ids.layers.iter().enumerate() {
            let a = {
                let (g, b) = (tape.param(ids.ln1_gamma), tape.param(ids.ln1_beta));
                tape.layer_norm(x, g, b)?
            };
            let q = self.linear(tape, a, ids.wq, ids.bq)?;
            let k = self.linear(tape, a, ids.wk, ids.bk)?;
            let v = self.linear(tape, a, ids.wv, ids.bv)?;
            let row = match c.bias_scope {
                BiasScope::PerLayer => l,
                BiasScope::Global => 0,
            };
            let att = tape.attention(q, k, v, c.heads, bias.map(|b| (input.bias.clone(), b, row)))?;
            let o = self.linear(tape, att, ids.wo, ids.bo)?;
            x = tape.add(x, o)?;
            let m = {
                let (g, b) = (tape.param(ids.ln2_gamma), tape.param(ids.ln2_beta));
                tape.layer_norm(x, g, b)?
            };
            let f = self.linear(tape, m, ids.w1, ids.b1)?;
            let f = tape.gelu(f);
            let f = self.linear(tape, f, ids.w2, ids.b2)?;
            x = tape.add(x, f)?;
        }
        let (g, b) = (tape.param(self.ids.lnf_gamma), tape.param(self.ids.lnf_beta));
        tape.layer_norm(x, g, b)
    }

    fn linear(&self, tape: &mut Tape<'_, T>, x: Var, w: ParamId, b: ParamId) -> Result<Var, NnError> {
        let (w, b) = (tape.param(w), tape.param(b));
        let y = tape.matmul(x, w)?;
        tape.add_row_bias(y, b)
    }

    /// Input embeddings: text rows from the token table, node rows as node + entity +
    /// hop embeddings; every position then adds its sequence-position embedding.
    fn embed(&self, tape: &mut Tape<'_, T>, tokens: &[InputToken]) -> Result<Var, NnError> {
        let c = &self.config;
        let mut text_pos = Vec::new();
        let mut text_ids = Vec::new();
        let mut node_pos = Vec::new();
        let mut node_rows = Vec::new();
        let mut entity_rows = Vec::new();
        let mut hop_rows = Vec::new();
        for (p, tok) in tokens.iter().enumerate() {
            match *tok {
                InputToken::Text(id) => {
                    if id >= c.text_vocab {
                        return Err(NnError::Shape(format!("text token {id} out of vocabulary")));
                    }
                    text_pos.push(p);
                    text_ids.push(id);
                }
                InputToken::Node { index, entity, hop } => {
                    if index >= c.n_nodes() || entity >= 2 {
                        return Err(NnError::Shape(format!("node row {index} out of range")));
                    }
                    if hop > c.max_hop {
                        return Err(NnError::HopOutOfRange { hop, max: c.max_hop });
                    }
                    node_pos.push(p);
                    node_rows.push(index);
                    entity_rows.push(entity);
                    hop_rows.push(hop);
                }
            }
        }
        let mut parts = Vec::with_capacity(2);
        if !text_pos.is_empty() {
            let wte = tape.param(self.ids.token_embed);
            parts.push((tape.gather_rows(wte, &text_ids)?, text_pos));
        }
        if !node_pos.is_empty() {
            let z = tape.param(self.ids.node_embed);
            let mut h = tape.gather_rows(z, &node_rows)?;
            if c.entity_position {
                let e = tape.param(self.ids.entity_embed);
                let e = tape.gather_rows(e, &entity_rows)?;
                let p = tape.param(self.ids.hop_embed);
                let p = tape.gather_rows(p, &hop_rows)?;
                h = tape.add(h, e)?;
                h = tape.add(h, p)?;
            }
            parts.push((h, node_pos));
        }
        let x = tape.scatter_rows(parts, tokens.len())?;
        let wpe = tape.param(self.ids.position_embed);
        let wpe = tape.slice_rows(wpe, 0, tokens.len())?;
        tape.add(x, wpe)
    }

    /// Prediction-head weights `[n, d]` of a token space.
    pub fn space_weights(&self, tape: &mut Tape<'_, T>, space: OutputSpace) -> Result<Var, NnError> {
        let c = &self.config;
        match space {
            OutputSpace::Text => Ok(tape.param(self.ids.token_embed)),
            OutputSpace::Member => match self.ids.member_head {
                Some(id) => Ok(tape.param(id)),
                None => {
                    let z = tape.param(self.ids.node_embed);
                    tape.slice_rows(z, 0, c.n_members)
                }
            },
            OutputSpace::Job => match self.ids.job_head {
                Some(id) => Ok(tape.param(id)),
                None => {
                    let z = tape.param(self.ids.node_embed);
                    tape.slice_rows(z, c.n_members, c.n_jobs)
                }
            },
        }
    }

    pub fn space_size(&self, space: OutputSpace) -> usize {
        match space {
            OutputSpace::Text => self.config.text_vocab,
            OutputSpace::Member => self.config.n_members,
            OutputSpace::Job => self.config.n_jobs,
        }
    }

    fn last_row(&self, tape: &mut Tape<'_, T>, hidden: Var) -> Result<Var, NnError> {
        let t = tape.value(hidden).rows();
        tape.slice_rows(hidden, t - 1, 1)
    }

    /// `C^n h_last` for a node-level task, `[1, N_C]`.
    pub fn node_class_logits(
        &self,
        tape: &mut Tape<'_, T>,
        hidden: Var,
        task: usize,
    ) -> Result<Var, NnError> {
        let head = *self
            .ids
            .class_heads
            .get(task)
            .ok_or_else(|| NnError::UnknownTask(task.to_string()))?;
        let h = self.last_row(tape, hidden)?;
        let c = tape.param(head);
        tape.matmul_nt(h, c)
    }

    /// `C^{U|I} h_last` over every member or every job, `[1, N]`.
    pub fn link_logits(
        &self,
        tape: &mut Tape<'_, T>,
        hidden: Var,
        space: OutputSpace,
    ) -> Result<Var, NnError> {
        if space == OutputSpace::Text {
            return Err(NnError::Config("link head needs a member or job space".into()));
        }
        let h = self.last_row(tape, hidden)?;
        let w = self.space_weights(tape, space)?;
        tape.matmul_nt(h, w)
    }

    /// Scalar training loss of one example.
    pub fn loss(
        &self,
        tape: &mut Tape<'_, T>,
        input: &ModelInput,
        target: &Target,
    ) -> Result<Var, NnError> {
        let hidden = self.forward(tape, input)?;
        self.loss_from_hidden(tape, hidden, target)
    }

    pub fn loss_from_hidden(
        &self,
        tape: &mut Tape<'_, T>,
        hidden: Var,
        target: &Target,
    ) -> Result<Var, NnError> {
        match target {
            Target::Tokens {
                space,
                first_row,
                ids,
            } => {
                if ids.is_empty() {
                    return Err(NnError::EmptyTargets);
                }
                let size = self.space_size(*space);
                if let Some(bad) = ids.iter().find(|&&i| i >= size) {
                    return Err(NnError::Shape(format!("target {bad} outside a space of {size}")));
                }
                let rows = tape.slice_rows(hidden, *first_row, ids.len())?;
                let w = self.space_weights(tape, *space)?;
                let logits = tape.matmul_nt(rows, w)?;
                let pairs: Vec<(usize, usize)> = ids.iter().copied().enumerate().collect();
                tape.nll_log_softmax(logits, &pairs)
            }
            Target::Class { task, class } => {
                let logits = self.node_class_logits(tape, hidden, *task)?;
                tape.nll_log_softmax(logits, &[(0, *class)])
            }
            Target::Links { space, items } => {
                let logits = self.link_logits(tape, hidden, *space)?;
                let pairs: Vec<(usize, usize)> = items.iter().map(|&i| (0, i)).collect();
                tape.nll_log_softmax(logits, &pairs)
            }
        }
    }

    /// Softmax of the node-class head for one prompt.
    pub fn class_probabilities(&self, input: &ModelInput, task: usize) -> Result<Vec<T>, NnError> {
        let mut tape = Tape::new(&self.store);
        let h = self.forward(&mut tape, input)?;
        let logits = self.node_class_logits(&mut tape, h, task)?;
        Ok(softmax(tape.value(logits).data()))
    }

    /// Softmax of the link head over every member or job for one prompt.
    pub fn link_probabilities(
        &self,
        input: &ModelInput,
        space: OutputSpace,
    ) -> Result<Vec<T>, NnError> {
        let mut tape = Tape::new(&self.store);
        let h = self.forward(&mut tape, input)?;
        let logits = self.link_logits(&mut tape, h, space)?;
        Ok(softmax(tape.value(logits).data()))
    }

    /// Last-position hidden state without building gradients.
    pub fn last_hidden(&self, input: &ModelInput) -> Result<Vec<T>, NnError> {
        let mut tape = Tape::new(&self.store);
        let h = self.forward(&mut tape, input)?;
        let v = tape.value(h);
        Ok(v.row(v.rows() - 1).to_vec())
    }

    /// Freezes or unfreezes the transformer weights and text embeddings.
    pub fn set_backbone_frozen(&mut self, frozen: bool) {
        self.store.set_group_frozen(ParamGroup::Backbone, frozen);
    }

    pub fn backbone_ids(&self) -> Vec<ParamId> {
        self.store
            .iter()
            .filter(|(_, p)| p.group == ParamGroup::Backbone)
            .map(|(id, _)| id)
            .collect()
    }
}

pub fn softmax<T: Real>(xs: &[T]) -> Vec<T> {
    let mut v = xs.to_vec();
    super::attention::softmax_in_place(&mut v);
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::attention::BiasEntry;
    use crate::nn::gradcheck::gradient_check;

    fn sample_input() -> ModelInput {
        let tokens = vec![
            InputToken::Text(3),
            InputToken::Node { index: 0, entity: 0, hop: 0 },
            InputToken::Node { index: 5, entity: 1, hop: 1 },
            InputToken::Node { index: 2, entity: 0, hop: 2 },
            InputToken::Text(7),
            InputToken::Node { index: 1, entity: 0, hop: 2 },
            InputToken::Node { index: 3, entity: 0, hop: 2 },
        ];
        let entries = vec![
            BiasEntry { query: 4, key: 1, bits: 0b0000001 },
            BiasEntry { query: 4, key: 2, bits: 0b0000100 },
            BiasEntry { query: 5, key: 3, bits: 0b0010010 },
            BiasEntry { query: 5, key: 5, bits: 0b0000001 },
            BiasEntry { query: 6, key: 1, bits: 0b0100010 },
        ];
        ModelInput { tokens, bias: Arc::new(AttentionBias::new(7, entries)) }
    }

    #[test]
    fn tiny_model_gradients_match_finite_differences() {
        let mut cfg = TransformerConfig::tiny(12, 4, 3);
        let input = sample_input();
        for tie in [true, false] {
            cfg.tie_heads = tie;
            let mut m = Model::<f64>::new(cfg.clone(), 5).unwrap();
            // Nonzero bias so its gradient path is exercised away from the origin.
            for (i, x) in m.store.value_mut(m.ids.attn_bias).data_mut().iter_mut().enumerate() {
                *x = 0.1 * (i as f64 % 3.0) - 0.1;
            }
            let targets = [
                Target::Tokens { space: OutputSpace::Member, first_row: 4, ids: vec![1, 3, 2] },
                Target::Class { task: 0, class: 1 },
                Target::Links { space: OutputSpace::Job, items: vec![0, 2] },
                Target::Tokens { space: OutputSpace::Text, first_row: 0, ids: vec![4, 5] },
            ];
            for t in &targets {
                let r = gradient_check(&mut m, &input, t, 3e-4, 12, 1).unwrap();
                assert!(r.max_rel_error < 1e-4, "{t:?}: {:#?}", r.tensors);
            }
        }
    }

    #[test]
    fn zeroed_parameters_give_zero_logits() {
        let mut m = Model::<f64>::new(TransformerConfig::tiny(12, 4, 3), 1).unwrap();
        for id in m.store.ids().collect::<Vec<_>>() {
            m.store.value_mut(id).data_mut().fill(0.0);
        }
        let mut tape = Tape::new(&m.store);
        let h = m.forward(&mut tape, &sample_input()).unwrap();
        let w = m.space_weights(&mut tape, OutputSpace::Text).unwrap();
        let l = tape.matmul_nt(h, w).unwrap();
        assert!(tape.value(l).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn context_overflow_is_reported() {
        let mut cfg = TransformerConfig::tiny(12, 4, 3);
        cfg.context = 3;
        let m = Model::<f64>::new(cfg, 1).unwrap();
        let mut tape = Tape::new(&m.store);
        assert!(matches!(
            m.forward(&mut tape, &sample_input()),
            Err(NnError::ContextOverflow { len: 7, context: 3 })
        ));
    }
}
