//! Tokenizer, unified vocabulary layout and node-token embedding composition.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::hetgraph::{EgoGraph, EntityType, HetGraph, NodeId};
use crate::nn::{Model, Real, Tensor};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum VocabError {
    #[error("token id {0} is not a text token")]
    NotText(usize),
    #[error("decoded bytes are not valid UTF-8")]
    Utf8,
    #[error("unknown node id {0}")]
    UnknownNode(usize),
    #[error("node {0} is not in the ego graph")]
    NotInEgo(usize),
    #[error("hop distance {hop} exceeds the table depth {max}")]
    HopOutOfRange { hop: usize, max: usize },
    #[error("embedding table {name} has {rows} rows, expected {expected}")]
    TableRows {
        name: &'static str,
        rows: usize,
        expected: usize,
    },
    #[error("unknown phrase {0:?}")]
    UnknownPhrase(String),
}

/// Text tokenizer over the text part of the vocabulary.
pub trait Tokenizer {
    /// Number of text token ids, `V_text`.
    fn vocab_size(&self) -> usize;
    fn encode(&self, s: &str) -> Vec<usize>;
    fn decode(&self, ids: &[usize]) -> Result<String, VocabError>;
}

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const SEP: &str = "<sep>";

/// One token per byte (ids 0..256), then special tokens. Specials include whole
/// template phrases so fixed prompt text costs one position per phrase.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ByteTokenizer {
    specials: Vec<String>,
}

impl ByteTokenizer {
    pub fn new<S: AsRef<str>>(extra: &[S]) -> Self {
        let mut specials: Vec<String> = [BOS, EOS, SEP].iter().map(|s| s.to_string()).collect();
        for s in extra {
            if !specials.iter().any(|x| x == s.as_ref()) {
                specials.push(s.as_ref().to_string());
            }
        }
        ByteTokenizer { specials }
    }

    pub fn special(&self, text: &str) -> Result<usize, VocabError> {
        self.specials
            .iter()
            .position(|s| s == text)
            .map(|p| 256 + p)
            .ok_or_else(|| VocabError::UnknownPhrase(text.to_string()))
    }

    pub fn specials(&self) -> &[String] {
        &self.specials
    }

    pub fn bos(&self) -> usize {
        256
    }

    pub fn eos(&self) -> usize {
        257
    }
}

impl Default for ByteTokenizer {
    fn default() -> Self {
        ByteTokenizer::new::<&str>(&[])
    }
}

impl Tokenizer for ByteTokenizer {
    fn vocab_size(&self) -> usize {
        256 + self.specials.len()
    }

    fn encode(&self, s: &str) -> Vec<usize> {
        s.bytes().map(usize::from).collect()
    }

    /// Special tokens decode to their literal text.
    fn decode(&self, ids: &[usize]) -> Result<String, VocabError> {
        let mut bytes = Vec::with_capacity(ids.len());
        for &id in ids {
            if id < 256 {
                bytes.push(id as u8);
            } else if let Some(s) = self.specials.get(id - 256) {
                bytes.extend_from_slice(s.as_bytes());
            } else {
                return Err(VocabError::NotText(id));
            }
        }
        String::from_utf8(bytes).map_err(|_| VocabError::Utf8)
    }
}

/// `[0, V_text)` text, then one token per node (members then jobs), then one
/// contiguous block of class tokens per node task.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabLayout {
    pub text_size: usize,
    pub n_members: usize,
    pub n_jobs: usize,
    pub classes: Vec<(String, usize)>,
}

impl VocabLayout {
    pub fn new(text_size: usize, g: &HetGraph, classes: Vec<(String, usize)>) -> Self {
        VocabLayout {
            text_size,
            n_members: g.n_members(),
            n_jobs: g.n_jobs(),
            classes,
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.n_members + self.n_jobs
    }

    pub fn text_range(&self) -> Range<usize> {
        0..self.text_size
    }

    pub fn node_range(&self) -> Range<usize> {
        self.text_size..self.text_size + self.n_nodes()
    }

    pub fn member_range(&self) -> Range<usize> {
        self.text_size..self.text_size + self.n_members
    }

    pub fn job_range(&self) -> Range<usize> {
        self.text_size + self.n_members..self.node_range().end
    }

    pub fn entity_range(&self, t: EntityType) -> Range<usize> {
        match t {
            EntityType::Member => self.member_range(),
            EntityType::Job => self.job_range(),
        }
    }

    pub fn class_range(&self, task: &str) -> Option<Range<usize>> {
        let mut start = self.node_range().end;
        for (name, n) in &self.classes {
            if name == task {
                return Some(start..start + n);
            }
            start += n;
        }
        None
    }

    pub fn total(&self) -> usize {
        self.node_range().end + self.classes.iter().map(|c| c.1).sum::<usize>()
    }

    pub fn node_token_id(&self, i: NodeId) -> Result<usize, VocabError> {
        if i.0 == 0 || i.0 > self.n_nodes() {
            return Err(VocabError::UnknownNode(i.0));
        }
        Ok(self.text_size + i.0 - 1)
    }

    pub fn node_of(&self, token: usize) -> Option<NodeId> {
        self.node_range()
            .contains(&token)
            .then(|| NodeId(token - self.text_size + 1))
    }

    pub fn is_text(&self, token: usize) -> bool {
        token < self.text_size
    }
}

/// Borrowed view of the input embedding tables: text `V_text x K`, node `N x K`,
/// entity `2 x K`, hop `(D + 1) x K`.
#[derive(Clone, Copy, Debug)]
pub struct EmbeddingTables<'a, T> {
    pub text: &'a Tensor<T>,
    pub node: &'a Tensor<T>,
    pub entity: &'a Tensor<T>,
    pub hop: &'a Tensor<T>,
}

impl<'a, T: Real> EmbeddingTables<'a, T> {
    pub fn new(
        text: &'a Tensor<T>,
        node: &'a Tensor<T>,
        entity: &'a Tensor<T>,
        hop: &'a Tensor<T>,
        layout: &VocabLayout,
        depth: usize,
    ) -> Result<Self, VocabError> {
        for (name, t, expected) in [
            ("text", text, layout.text_size),
            ("node", node, layout.n_nodes()),
            ("entity", entity, 2),
            ("hop", hop, depth + 1),
        ] {
            if t.rows() != expected {
                return Err(VocabError::TableRows {
                    name,
                    rows: t.rows(),
                    expected,
                });
            }
        }
        Ok(EmbeddingTables {
            text,
            node,
            entity,
            hop,
        })
    }

    pub fn of_model(model: &'a Model<T>) -> Self {
        let s = &model.store;
        EmbeddingTables {
            text: s.value(model.ids.token_embed),
            node: s.value(model.ids.node_embed),
            entity: s.value(model.ids.entity_embed),
            hop: s.value(model.ids.hop_embed),
        }
    }

    pub fn depth(&self) -> usize {
        self.hop.rows() - 1
    }
}

/// `z_i + e_type(i) + p_dist(i, center)`.
pub fn compose_node_embedding<T: Real>(
    tables: &EmbeddingTables<'_, T>,
    g: &HetGraph,
    i: NodeId,
    ego: &EgoGraph,
) -> Result<Vec<T>, VocabError> {
    if !g.contains(i) {
        return Err(VocabError::UnknownNode(i.0));
    }
    let hop = ego
        .shortest_distance(i)
        .map_err(|_| VocabError::NotInEgo(i.0))?;
    if hop > tables.depth() {
        return Err(VocabError::HopOutOfRange {
            hop,
            max: tables.depth(),
        });
    }
    let z = tables.node.row(g.row(i));
    let e = tables.entity.row(g.type_of(i).index());
    let p = tables.hop.row(hop);
    Ok(z.iter()
        .zip(e)
        .zip(p)
        .map(|((&a, &b), &c)| a + b + c)
        .collect())
}
