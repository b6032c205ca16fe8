//! Dot-product passage retrieval: both sides embed through the reader's
//! unfused encoder and passages rank by score against the question.

use crate::PipelineError;
use kgfuse_core::reader::{score_passage, Reader};
use kgfuse_core::scalar::Scalar;

/// Result of ranking a passage pool for one question.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Retrieved {
    /// Passage indices, best first.
    pub indices: Vec<usize>,
    /// Set when fewer passages existed than were requested.
    pub short: bool,
}

/// Rank `passages` against the question and keep the `k` best. Ties break
/// toward the lower passage index. Asking for more passages than exist
/// returns them all, flagged `short`.
pub fn retrieve_topk<T: Scalar>(
    reader: &Reader<T>,
    question_tokens: &[u32],
    passages: &[Vec<u32>],
    k: usize,
) -> Result<Retrieved, PipelineError> {
    if passages.is_empty() {
        return Err(PipelineError::EmptyCorpus);
    }
    let q = reader.doc_embedding(question_tokens)?;
    let mut scored: Vec<(usize, f64)> = Vec::with_capacity(passages.len());
    for (i, p_tokens) in passages.iter().enumerate() {
        let p = reader.doc_embedding(p_tokens)?;
        scored.push((i, score_passage(&q, &p)?.as_f64()));
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let short = k > scored.len();
    scored.truncate(k.min(passages.len()));
    Ok(Retrieved {
        indices: scored.into_iter().map(|(i, _)| i).collect(),
        short,
    })
}
