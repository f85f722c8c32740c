//! JSON-Lines graph files.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EntityType, GraphBuilder, GraphError, HetGraph, NodeId, RelationType};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum GraphRecord {
    Node {
        id: usize,
        #[serde(rename = "type")]
        node_type: EntityType,
        #[serde(default)]
        features: BTreeMap<String, String>,
        #[serde(default)]
        labels: BTreeMap<String, usize>,
    },
    Edge {
        rel: RelationType,
        src: usize,
        dst: usize,
    },
}

pub fn load_graph(path: &Path) -> Result<HetGraph, GraphError> {
    let f = std::fs::File::open(path)?;
    parse_graph(BufReader::new(f))
}

pub fn parse_graph<R: BufRead>(reader: R) -> Result<HetGraph, GraphError> {
    let mut nodes: BTreeMap<usize, (EntityType, BTreeMap<String, String>, BTreeMap<String, usize>)> =
        BTreeMap::new();
    let mut edges = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: GraphRecord = serde_json::from_str(&line).map_err(|e| GraphError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        match rec {
            GraphRecord::Node {
                id,
                node_type,
                features,
                labels,
            } => {
                if nodes.insert(id, (node_type, features, labels)).is_some() {
                    return Err(GraphError::DuplicateNode(id));
                }
            }
            GraphRecord::Edge { rel, src, dst } => edges.push((rel, src, dst)),
        }
    }
    let n_members = nodes.values().filter(|n| n.0 == EntityType::Member).count();
    let n_jobs = nodes.len() - n_members;
    for (pos, (&id, node)) in nodes.iter().enumerate() {
        if id != pos + 1 {
            return Err(GraphError::Layout(format!("expected id {}, found {id}", pos + 1)));
        }
        let expected = if id <= n_members {
            EntityType::Member
        } else {
            EntityType::Job
        };
        if node.0 != expected {
            return Err(GraphError::Layout(format!(
                "node {id} is a {:?} but ids 1..={n_members} are members",
                node.0
            )));
        }
    }
    let mut b = GraphBuilder::new(n_members, n_jobs);
    for (&id, (_, features, labels)) in &nodes {
        for (k, v) in features {
            b.set_feature(NodeId(id), k, v);
        }
        for (k, &v) in labels {
            b.set_label(NodeId(id), k, v);
        }
    }
    for (rel, src, dst) in edges {
        b.add_edge(rel, NodeId(src), NodeId(dst));
    }
    b.build()
}

/// Writes nodes in id order, then member-job and member-member edges in sorted order.
pub fn write_graph<W: Write>(g: &HetGraph, mut out: W) -> Result<(), GraphError> {
    let to_io = |e: serde_json::Error| GraphError::Io(e.into());
    for k in g.node_ids() {
        let d = g.data(k)?;
        let rec = GraphRecord::Node {
            id: k.0,
            node_type: g.type_of(k),
            features: d.features.clone(),
            labels: d.labels.clone(),
        };
        serde_json::to_writer(&mut out, &rec).map_err(to_io)?;
        out.write_all(b"\n")?;
    }
    for rel in [RelationType::MemberJob, RelationType::MemberMember] {
        for (s, d) in g.edges(rel) {
            let rec = GraphRecord::Edge {
                rel,
                src: s.0,
                dst: d.0,
            };
            serde_json::to_writer(&mut out, &rec).map_err(to_io)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}
