//! Relation-aware attention over localized bipartite graphs. Each node
//! attends over its incident messages: one per (neighbor, relation) pair
//! plus a self-loop carrying a learned stand-in relation vector.

use super::config::{Ablation, Activation, Aggregate, AttnNorm, ReaderConfig};
use super::params::GnnHeadParams;
use super::ReaderError;
use crate::localgraph::LocalGraph;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Relation vectors computed once per optimizer step and reused for every
/// no-gradient forward until the parameters move again.
#[derive(Debug, Clone)]
pub struct RelationBuffer<T: Scalar> {
    vectors: Vec<Tensor<T>>,
    version: u64,
}

impl<T: Scalar> RelationBuffer<T> {
    pub(crate) fn new(vectors: Vec<Tensor<T>>, version: u64) -> Self {
        RelationBuffer { vectors, version }
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// The buffered vectors, refused when the parameters have moved since
    /// they were computed.
    pub fn vectors(&self, param_version: u64) -> Result<&[Tensor<T>], ReaderError> {
        if self.version != param_version {
            return Err(ReaderError::StaleRelationBuffer {
                have: self.version,
                want: param_version,
            });
        }
        Ok(&self.vectors)
    }
}

/// Incident messages for every node: `(neighbor, relation vector index)`
/// pairs, self-loop first, then edge messages in graph edge order, one per
/// relation. The relation index `None` marks the self-loop.
fn incident_messages(graph: &LocalGraph) -> Vec<Vec<(usize, Option<u32>)>> {
    let n = graph.node_count();
    let mut messages: Vec<Vec<(usize, Option<u32>)>> = (0..n).map(|v| vec![(v, None)]).collect();
    for e in &graph.edges {
        let u_global = e.u;
        let v_global = graph.global_v(e.v);
        for &r in &e.relations {
            messages[u_global].push((v_global, Some(r.0)));
            messages[v_global].push((u_global, Some(r.0)));
        }
    }
    messages
}

fn apply_activation<T: Scalar>(
    x: &Tensor<T>,
    activation: Activation,
) -> Result<Tensor<T>, ReaderError> {
    Ok(match activation {
        Activation::Relu => x.relu()?,
        Activation::Sigmoid => x.sigmoid()?,
    })
}

/// One head of one layer: transform all nodes, then attention-aggregate
/// each node's incident messages.
fn gnn_head<T: Scalar>(
    h_prev: &Tensor<T>,
    rel_vecs: &[Tensor<T>],
    self_rel: &Tensor<T>,
    head: &GnnHeadParams<T>,
    config: &ReaderConfig,
    messages: &[Vec<(usize, Option<u32>)>],
) -> Result<Tensor<T>, ReaderError> {
    let d = config.d;
    let a = apply_activation(&h_prev.matmul(&head.w_t)?.add_row(&head.b_t)?, config.activation)?;
    let mut node_rows = Vec::with_capacity(messages.len());
    for (v, incident) in messages.iter().enumerate() {
        let count = incident.len();
        let receiver_rows = a.slice_rows(&vec![v; count])?;
        let neighbor_ids: Vec<usize> = incident.iter().map(|&(u, _)| u).collect();
        let neighbor_rows = a.slice_rows(&neighbor_ids)?;
        let score_input = match config.ablation {
            Ablation::NoRel => Tensor::concat(&[&receiver_rows, &neighbor_rows], 1)?,
            _ => {
                let rel_refs: Vec<&Tensor<T>> = incident
                    .iter()
                    .map(|&(_, r)| match r {
                        None => Ok(self_rel),
                        Some(rid) => rel_vecs
                            .get(rid as usize)
                            .ok_or(ReaderError::UnknownRelation(rid)),
                    })
                    .collect::<Result<_, _>>()?;
                let rel_rows = Tensor::concat(&rel_refs, 0)?;
                Tensor::concat(&[&receiver_rows, &rel_rows, &neighbor_rows], 1)?
            }
        };
        let values = match config.aggregate {
            Aggregate::Neighbor => &neighbor_rows,
            Aggregate::SelfRepr => &receiver_rows,
        };
        let row = if config.ablation == Ablation::NoAtt {
            values.mean(0)?.reshape(&[1, d])?
        } else {
            let scores = score_input.matmul(&head.w_e)?;
            let weights = match config.attn_norm {
                AttnNorm::Softmax => scores.softmax(0)?,
                AttnNorm::Ratio => {
                    let magnitude: f64 = scores.data().iter().map(|s| s.as_f64().abs()).sum();
                    if magnitude < 1e-12 {
                        return Err(ReaderError::DegenerateAttention { node: v });
                    }
                    scores.scale_by(&scores.sum_all()?.recip()?)?
                }
            };
            weights.reshape(&[1, count])?.matmul(values)?
        };
        node_rows.push(row);
    }
    let refs: Vec<&Tensor<T>> = node_rows.iter().collect();
    Ok(Tensor::concat(&refs, 0)?)
}

/// One full layer: heads run on the same input and their outputs are
/// summed.
pub fn gnn_layer<T: Scalar>(
    graph: &LocalGraph,
    h_prev: &Tensor<T>,
    rel_vecs: &[Tensor<T>],
    self_rel: &Tensor<T>,
    heads: &[GnnHeadParams<T>],
    config: &ReaderConfig,
) -> Result<Tensor<T>, ReaderError> {
    let messages = incident_messages(graph);
    let mut out: Option<Tensor<T>> = None;
    for head in heads {
        let h = gnn_head(h_prev, rel_vecs, self_rel, head, config, &messages)?;
        out = Some(match out {
            None => h,
            Some(acc) => acc.add(&h)?,
        });
    }
    Ok(out.expect("config guarantees at least one head"))
}

/// Stack all layers over the node attributes. An empty graph passes its
/// zero-row input straight through.
pub fn run_gnn<T: Scalar>(
    graph: &LocalGraph,
    node_attrs: &Tensor<T>,
    rel_vecs: &[Tensor<T>],
    self_rel: &Tensor<T>,
    layers: &[Vec<GnnHeadParams<T>>],
    config: &ReaderConfig,
) -> Result<Tensor<T>, ReaderError> {
    if node_attrs.shape()[0] != graph.node_count() {
        return Err(ReaderError::Config(format!(
            "node attributes have {} rows for a {}-node graph",
            node_attrs.shape()[0],
            graph.node_count()
        )));
    }
    if graph.is_empty() {
        return Ok(node_attrs.clone());
    }
    let mut h = node_attrs.clone();
    for layer in layers {
        h = gnn_layer(graph, &h, rel_vecs, self_rel, layer, config)?;
    }
    Ok(h)
}
