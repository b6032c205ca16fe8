//! Localized bipartite graphs: question entities on one side, passage
//! entities on the other, edges wherever the knowledge graph connects a
//! cross-side pair in either direction. Within-side relations are never
//! examined, and nodes that end up with no edges are pruned.

use crate::kgstore::{EntityId, KnowledgeGraph, RelationId};
use crate::textproc::{AnnotatedDocument, Side};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

/// One graph node: an entity on one side of the document, with every span
/// occurrence it collapses.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeRef {
    pub entity: EntityId,
    pub side: Side,
    /// Indices into the document's span list, ascending.
    pub span_indices: Vec<usize>,
}

/// Edge between U index `u` and V index `v`, carrying every distinct
/// relation that witnesses the pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Edge {
    pub u: usize,
    pub v: usize,
    pub relations: Vec<RelationId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LocalGraph {
    pub u_nodes: Vec<NodeRef>,
    pub v_nodes: Vec<NodeRef>,
    pub edges: Vec<Edge>,
    /// Spans whose entity id was not present in the knowledge graph and was
    /// therefore ignored. Zero in any well-formed pipeline.
    pub skipped_spans: usize,
}

impl LocalGraph {
    pub fn node_count(&self) -> usize {
        self.u_nodes.len() + self.v_nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node_count() == 0
    }

    /// Nodes in global order: all of U, then all of V. The GNN's node
    /// attribute matrix uses exactly this row order.
    pub fn nodes(&self) -> impl Iterator<Item = &NodeRef> {
        self.u_nodes.iter().chain(self.v_nodes.iter())
    }

    /// Global node index of edge endpoint on the V side.
    pub fn global_v(&self, v: usize) -> usize {
        self.u_nodes.len() + v
    }
}

/// Build the bipartite graph for one annotated document.
///
/// Unique entities per side become candidate nodes in ascending first-span
/// order; edges come from scanning candidate U×V pairs against the knowledge
/// graph; candidates without any edge are dropped. An entity appearing on
/// both sides yields two distinct nodes, connected only if the KG holds a
///self-triple for it.
pub fn build_graph(doc: &AnnotatedDocument, kg: &KnowledgeGraph) -> LocalGraph {
    let mut skipped = 0usize;
    let mut u_cands: Vec<NodeRef> = Vec::new();
    let mut v_cands: Vec<NodeRef> = Vec::new();
    for (j, span) in doc.spans.iter().enumerate() {
        if (span.entity.0 as usize) >= kg.entity_count() {
            skipped += 1;
            continue;
        }
        let cands = match span.side {
            Side::Question => &mut u_cands,
            Side::Passage => &mut v_cands,
        };
        match cands.iter_mut().find(|n| n.entity == span.entity) {
            Some(node) => node.span_indices.push(j),
            None => cands.push(NodeRef {
                entity: span.entity,
                side: span.side,
                span_indices: vec![j],
            }),
        }
    }

    let mut edges = Vec::new();
    for (ui, u) in u_cands.iter().enumerate() {
        for (vi, v) in v_cands.iter().enumerate() {
            let witnesses = kg
                .relations_between(u.entity, v.entity)
                .expect("candidate ids were validated against the kg");
            if witnesses.is_empty() {
                continue;
            }
            // A relation witnessed in both directions still enters once:
            // the edge is bidirectional, so the message set would repeat.
            let mut relations: Vec<RelationId> = Vec::new();
            for (r, _) in witnesses {
                if !relations.contains(&r) {
                    relations.push(r);
                }
            }
            edges.push(Edge {
                u: ui,
                v: vi,
                relations,
            });
        }
    }

    // Prune isolated candidates and re-index the edges.
    let mut u_keep = vec![false; u_cands.len()];
    let mut v_keep = vec![false; v_cands.len()];
    for e in &edges {
        u_keep[e.u] = true;
        v_keep[e.v] = true;
    }
    let u_map: Vec<Option<usize>> = renumber(&u_keep);
    let v_map: Vec<Option<usize>> = renumber(&v_keep);
    let u_nodes: Vec<NodeRef> = u_cands
        .into_iter()
        .zip(&u_keep)
        .filter(|(_, &k)| k)
        .map(|(n, _)| n)
        .collect();
    let v_nodes: Vec<NodeRef> = v_cands
        .into_iter()
        .zip(&v_keep)
        .filter(|(_, &k)| k)
        .map(|(n, _)| n)
        .collect();
    let edges = edges
        .into_iter()
        .map(|e| Edge {
            u: u_map[e.u].expect("edge endpoint survives pruning"),
            v: v_map[e.v].expect("edge endpoint survives pruning"),
            relations: e.relations,
        })
        .collect();

    LocalGraph {
        u_nodes,
        v_nodes,
        edges,
        skipped_spans: skipped,
    }
}

fn renumber(keep: &[bool]) -> Vec<Option<usize>> {
    let mut next = 0;
    keep.iter()
        .map(|&k| {
            if k {
                let i = next;
                next += 1;
                Some(i)
            } else {
                None
            }
        })
        .collect()
}

/// Mean and population standard deviation of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return MeanStd { mean: 0.0, std: 0.0 };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        MeanStd {
            mean,
            std: var.max(0.0).sqrt(),
        }
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.2} ± {:.2}", self.mean, self.std)
    }
}

/// Corpus-level graph statistics. Node statistics cover non-empty graphs
/// only; the per-question count also counts only non-empty graphs, but
/// every question contributes a data point (possibly zero).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub questions: usize,
    pub graphs: usize,
    pub graphs_per_question: MeanStd,
    pub u_nodes_per_graph: MeanStd,
    pub v_nodes_per_graph: MeanStd,
    pub nodes_per_graph: MeanStd,
}

impl StatsReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("{:<24}{}\n", "questions", self.questions));
        s.push_str(&format!("{:<24}{}\n", "non-empty graphs", self.graphs));
        for (name, m) in [
            ("graphs per question", &self.graphs_per_question),
            ("u nodes per graph", &self.u_nodes_per_graph),
            ("v nodes per graph", &self.v_nodes_per_graph),
            ("nodes per graph", &self.nodes_per_graph),
        ] {
            s.push_str(&format!("{:<24}{:.4} ± {:.4}\n", name, m.mean, m.std));
        }
        s
    }
}

/// Statistics over (|U|, |V|) sizes grouped by question. Empty graphs may
/// be present in the input; they are excluded everywhere except that their
/// question still counts as a question.
pub fn graph_stats_from_sizes(per_question: &[Vec<(usize, usize)>]) -> StatsReport {
    let mut per_q_counts = Vec::with_capacity(per_question.len());
    let mut us = Vec::new();
    let mut vs = Vec::new();
    let mut totals = Vec::new();
    for sizes in per_question {
        let mut count = 0usize;
        for &(u, v) in sizes {
            if u + v == 0 {
                continue;
            }
            count += 1;
            us.push(u as f64);
            vs.push(v as f64);
            totals.push((u + v) as f64);
        }
        per_q_counts.push(count as f64);
    }
    StatsReport {
        questions: per_question.len(),
        graphs: totals.len(),
        graphs_per_question: MeanStd::of(&per_q_counts),
        u_nodes_per_graph: MeanStd::of(&us),
        v_nodes_per_graph: MeanStd::of(&vs),
        nodes_per_graph: MeanStd::of(&totals),
    }
}

/// Statistics straight from grouped graphs.
pub fn graph_stats(per_question: &[Vec<LocalGraph>]) -> StatsReport {
    let sizes: Vec<Vec<(usize, usize)>> = per_question
        .iter()
        .map(|gs| {
            gs.iter()
                .map(|g| (g.u_nodes.len(), g.v_nodes.len()))
                .collect()
        })
        .collect();
    graph_stats_from_sizes(&sizes)
}

#[derive(Debug, Error)]
pub enum GraphIoError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("graph file {path}, line {line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
}

/// Serialized node: entity label plus span indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub entity: String,
    pub spans: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeRecord {
    pub u: usize,
    pub v: usize,
    pub relations: Vec<String>,
}

/// One graph as stored in graph files, tagged with its question index so
/// statistics can group by question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphRecord {
    pub question: usize,
    pub u_nodes: Vec<NodeRecord>,
    pub v_nodes: Vec<NodeRecord>,
    pub edges: Vec<EdgeRecord>,
}

impl GraphRecord {
    pub fn from_graph(g: &LocalGraph, kg: &KnowledgeGraph, question: usize) -> Self {
        let node_rec = |n: &NodeRef| NodeRecord {
            entity: kg.entity_label(n.entity).to_string(),
            spans: n.span_indices.clone(),
        };
        GraphRecord {
            question,
            u_nodes: g.u_nodes.iter().map(node_rec).collect(),
            v_nodes: g.v_nodes.iter().map(node_rec).collect(),
            edges: g
                .edges
                .iter()
                .map(|e| EdgeRecord {
                    u: e.u,
                    v: e.v,
                    relations: e
                        .relations
                        .iter()
                        .map(|&r| kg.relation_label(r).to_string())
                        .collect(),
                })
                .collect(),
        }
    }
}

/// Write graphs as JSON-lines.
pub fn write_graph_records(path: &Path, records: &[GraphRecord]) -> Result<(), GraphIoError> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).expect("graph records serialize"));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|source| GraphIoError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_graph_records(path: &Path) -> Result<Vec<GraphRecord>, GraphIoError> {
    let text = std::fs::read_to_string(path).map_err(|source| GraphIoError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: GraphRecord =
            serde_json::from_str(line).map_err(|e| GraphIoError::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg: e.to_string(),
            })?;
        out.push(rec);
    }
    Ok(out)
}
