//! The passage reader: a split transformer encoder whose intermediate
//! states feed a relation-aware graph network, with the graph output added
//! back at entity marker positions before the upper encoder half and a
//! multi-document decoder on top.

pub mod config;
mod gnn;
pub mod params;
mod transformer;

pub use config::{Ablation, Activation, Aggregate, AttnNorm, ReaderConfig};
pub use gnn::{gnn_layer, run_gnn, RelationBuffer};
pub use params::ReaderParams;

use crate::localgraph::LocalGraph;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, TensorError};
use crate::textproc::{AnnotatedDocument, BOS, EOS};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReaderError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("document has {len} tokens, limit is {max}")]
    DocTooLong { len: usize, max: usize },
    #[error("answer prefix has {len} tokens, limit is {max}")]
    PrefixTooLong { len: usize, max: usize },
    #[error("mention span {span} reaches past the document ({len} rows)")]
    SpanOutOfRange { span: usize, len: usize },
    #[error("no vector for relation id {0}")]
    UnknownRelation(u32),
    #[error("relation buffer built at parameter version {have}, current is {want}")]
    StaleRelationBuffer { have: u64, want: u64 },
    #[error("attention scores at node {node} sum to nearly zero; ratio normalization undefined")]
    DegenerateAttention { node: usize },
    #[error("decoder needs at least one encoded document")]
    EmptyDocumentSet,
    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// The three encoder snapshots for one document: before fusion, after
/// fusion, and after the upper half.
#[derive(Debug, Clone)]
pub struct EncoderStates<T: Scalar> {
    pub h_b: Tensor<T>,
    pub h_u: Tensor<T>,
    pub h_i: Tensor<T>,
}

/// Dot-product retrieval score between two same-length embeddings.
pub fn score_passage<T: Scalar>(q: &Tensor<T>, p: &Tensor<T>) -> Result<T, ReaderError> {
    if q.shape() != p.shape() || q.numel() == 0 {
        return Err(ReaderError::Tensor(TensorError::ShapeMismatch {
            op: "score_passage",
            lhs: q.shape().to_vec(),
            rhs: p.shape().to_vec(),
        }));
    }
    let mut acc = T::zero();
    for (a, b) in q.data().iter().zip(p.data()) {
        acc += *a * *b;
    }
    Ok(acc)
}

#[derive(Debug, Clone)]
pub struct Reader<T: Scalar> {
    pub config: ReaderConfig,
    pub params: ReaderParams<T>,
}

impl<T: Scalar> Reader<T> {
    pub fn new(config: ReaderConfig, seed: u64) -> Result<Self, ReaderError> {
        let params = ReaderParams::init(&config, seed)?;
        Ok(Reader { config, params })
    }

    pub fn from_parts(config: ReaderConfig, params: ReaderParams<T>) -> Result<Self, ReaderError> {
        config.validate()?;
        Ok(Reader { config, params })
    }

    /// Copy whose parameters are leaves of `tape`; forwards run through it
    /// to collect gradients.
    pub fn bind(&self, tape: &Tape<T>) -> Self {
        Reader {
            config: self.config.clone(),
            params: self.params.bind(tape),
        }
    }

    fn embed_positions(&self, tokens: &[u32]) -> Result<Tensor<T>, ReaderError> {
        let emb = Tensor::embed(&self.params.token_emb, tokens)?;
        let rows: Vec<usize> = (0..tokens.len()).collect();
        let pos = self.params.pos_emb.slice_rows(&rows)?;
        Ok(emb.add(&pos)?)
    }

    /// Lower encoder half over an annotated document.
    pub fn encode_bot(&self, doc: &AnnotatedDocument) -> Result<Tensor<T>, ReaderError> {
        if doc.tokens.len() > self.config.max_doc_len {
            return Err(ReaderError::DocTooLong {
                len: doc.tokens.len(),
                max: self.config.max_doc_len,
            });
        }
        let x = self.embed_positions(&doc.tokens)?;
        transformer::encode_range(&x, &self.params.enc[..self.config.split_layer], self.config.heads)
    }

    /// Upper encoder half.
    pub fn encode_top(&self, h_u: &Tensor<T>) -> Result<Tensor<T>, ReaderError> {
        transformer::encode_range(
            h_u,
            &self.params.enc[self.config.split_layer..],
            self.config.heads,
        )
    }

    /// The whole encoder with no graph machinery attached; used for
    /// relation labels, retrieval embeddings, and the graph-free ablation.
    pub fn encode_unfused(&self, tokens: &[u32]) -> Result<Tensor<T>, ReaderError> {
        if tokens.len() > self.config.max_doc_len {
            return Err(ReaderError::DocTooLong {
                len: tokens.len(),
                max: self.config.max_doc_len,
            });
        }
        let x = self.embed_positions(tokens)?;
        transformer::encode_range(&x, &self.params.enc, self.config.heads)
    }

    /// Per-node attributes: mean of the lower-encoder rows under each span,
    /// then mean over the node's spans. Rows follow graph node order, U
    /// side first.
    pub fn extract_node_attrs(
        &self,
        h_b: &Tensor<T>,
        doc: &AnnotatedDocument,
        graph: &LocalGraph,
    ) -> Result<Tensor<T>, ReaderError> {
        let d = self.config.d;
        if graph.is_empty() {
            return Ok(Tensor::zeros(&[0, d]));
        }
        let doc_len = h_b.shape()[0];
        let mut rows = Vec::with_capacity(graph.node_count());
        for node in graph.nodes() {
            let mut span_means = Vec::with_capacity(node.span_indices.len());
            for &si in &node.span_indices {
                let span = &doc.spans[si];
                if span.end > doc_len {
                    return Err(ReaderError::SpanOutOfRange {
                        span: si,
                        len: doc_len,
                    });
                }
                let token_rows: Vec<usize> = (span.start..span.end).collect();
                let mean = h_b.slice_rows(&token_rows)?.mean(0)?.reshape(&[1, d])?;
                span_means.push(mean);
            }
            let row = if span_means.len() == 1 {
                span_means.pop().expect("one span mean")
            } else {
                let refs: Vec<&Tensor<T>> = span_means.iter().collect();
                Tensor::concat(&refs, 0)?.mean(0)?.reshape(&[1, d])?
            };
            rows.push(row);
        }
        let refs: Vec<&Tensor<T>> = rows.iter().collect();
        Ok(Tensor::concat(&refs, 0)?)
    }

    /// All graph layers over the node attributes.
    pub fn run_gnn(
        &self,
        graph: &LocalGraph,
        node_attrs: &Tensor<T>,
        rel_vecs: &[Tensor<T>],
    ) -> Result<Tensor<T>, ReaderError> {
        gnn::run_gnn(
            graph,
            node_attrs,
            rel_vecs,
            &self.params.self_rel,
            &self.params.gnn,
            &self.config,
        )
    }

    /// Add each node's graph vector onto the entity marker row of every
    /// occurrence of that node. All other rows pass through untouched; an
    /// empty graph shares the input's storage outright.
    pub fn fuse(
        &self,
        h_b: &Tensor<T>,
        h_g: &Tensor<T>,
        doc: &AnnotatedDocument,
        graph: &LocalGraph,
    ) -> Result<Tensor<T>, ReaderError> {
        let mut marker_rows = Vec::new();
        let mut node_rows = Vec::new();
        for (i, node) in graph.nodes().enumerate() {
            for &si in &node.span_indices {
                marker_rows.push(doc.spans[si].special_index);
                node_rows.push(i);
            }
        }
        let src = h_g.slice_rows(&node_rows)?;
        Ok(h_b.scatter_add(&marker_rows, &src)?)
    }

    /// Whole per-document path: lower half, node extraction, graph layers,
    /// fusion, upper half. The graph-free ablation skips straight from the
    /// lower to the upper half.
    pub fn encode_doc(
        &self,
        doc: &AnnotatedDocument,
        graph: &LocalGraph,
        rel_vecs: &[Tensor<T>],
    ) -> Result<EncoderStates<T>, ReaderError> {
        let h_b = self.encode_bot(doc)?;
        let h_u = if self.config.ablation == Ablation::Baseline {
            h_b.clone()
        } else {
            let attrs = self.extract_node_attrs(&h_b, doc, graph)?;
            let h_g = self.run_gnn(graph, &attrs, rel_vecs)?;
            self.fuse(&h_b, &h_g, doc, graph)?
        };
        let h_i = self.encode_top(&h_u)?;
        Ok(EncoderStates { h_b, h_u, h_i })
    }

    /// Relation vectors: the unfused encoder over each relation's label
    /// tokens, averaged over positions. Index `i` serves relation id `i`.
    pub fn relation_vectors(
        &self,
        relation_tokens: &[Vec<u32>],
    ) -> Result<Vec<Tensor<T>>, ReaderError> {
        let d = self.config.d;
        relation_tokens
            .iter()
            .map(|tokens| {
                let h = self.encode_unfused(tokens)?;
                Ok(h.mean(0)?.reshape(&[1, d])?)
            })
            .collect()
    }

    /// Compute and stamp a buffer for no-gradient forwards.
    pub fn build_relation_buffer(
        &self,
        relation_tokens: &[Vec<u32>],
    ) -> Result<RelationBuffer<T>, ReaderError> {
        Ok(RelationBuffer::new(
            self.relation_vectors(relation_tokens)?,
            self.params.version,
        ))
    }

    /// Retrieval embedding of a token sequence: the first output row of the
    /// unfused encoder.
    pub fn doc_embedding(&self, tokens: &[u32]) -> Result<Tensor<T>, ReaderError> {
        let h = self.encode_unfused(tokens)?;
        Ok(h.slice_rows(&[0])?)
    }

    /// Next-token logits for an answer prefix over the concatenation of the
    /// per-document encoder outputs.
    pub fn decode(
        &self,
        memories: &[&Tensor<T>],
        prefix: &[u32],
    ) -> Result<Tensor<T>, ReaderError> {
        if memories.is_empty() {
            return Err(ReaderError::EmptyDocumentSet);
        }
        let max_prefix = self.config.max_answer_len + 1;
        if prefix.is_empty() || prefix.len() > max_prefix {
            return Err(ReaderError::PrefixTooLong {
                len: prefix.len(),
                max: max_prefix,
            });
        }
        let memory = if memories.len() == 1 {
            memories[0].clone()
        } else {
            Tensor::concat(memories, 0)?
        };
        let mut x = self.embed_positions(prefix)?;
        let mask = transformer::causal_mask(prefix.len());
        for layer in &self.params.dec {
            x = transformer::decoder_layer(&x, &memory, layer, self.config.heads, &mask)?;
        }
        // Output head is tied to the token embedding table: emitting a token
        // the decoder has just read back from the encoder states needs no
        // separately learned projection.
        Ok(x.matmul_nt(&self.params.token_emb)?)
    }

    /// Greedy decoding from BOS until EOS or the answer length limit.
    /// Returns answer tokens without the sentinels.
    pub fn generate(
        &self,
        docs: &[(&AnnotatedDocument, &LocalGraph)],
        rel_vecs: &[Tensor<T>],
    ) -> Result<Vec<u32>, ReaderError> {
        if docs.is_empty() {
            return Err(ReaderError::EmptyDocumentSet);
        }
        let states: Vec<EncoderStates<T>> = docs
            .iter()
            .map(|(doc, graph)| self.encode_doc(doc, graph, rel_vecs))
            .collect::<Result<_, _>>()?;
        let memories: Vec<&Tensor<T>> = states.iter().map(|s| &s.h_i).collect();
        let mut prefix = vec![BOS];
        let mut answer = Vec::new();
        while answer.len() < self.config.max_answer_len {
            let logits = self.decode(&memories, &prefix)?;
            let next = *logits
                .argmax_rows()
                .last()
                .expect("prefix is never empty") as u32;
            if next == EOS {
                break;
            }
            answer.push(next);
            prefix.push(next);
        }
        Ok(answer)
    }
}
