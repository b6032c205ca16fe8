//! Answer scoring and report assembly: normalized exact match, the
//! fact-related subset predicate over built graphs, and per-variant
//! comparison tables.

use crate::kgstore::EntityId;
use crate::localgraph::{graph_stats, LocalGraph, StatsReport};
use crate::textproc::{tokenize, TokenLexicon, Vocab};
use regex::Regex;
use serde::Serialize;
use std::sync::OnceLock;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("example {index} has no gold answers")]
    EmptyGolds { index: usize },
    #[error("variant {name:?} has {found} predictions for {expected} examples")]
    MisalignedPredictions {
        name: String,
        expected: usize,
        found: usize,
    },
}

fn punctuation() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\p{P}+").expect("punctuation class compiles"))
}

/// Normal form used for all answer comparisons: lowercase, remove
/// punctuation, drop standalone articles, collapse whitespace. The rules
/// apply in exactly that order.
pub fn normalize_answer(s: &str) -> String {
    let lower = s.to_lowercase();
    let no_punct = punctuation().replace_all(&lower, "");
    no_punct
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Whether the prediction's normal form appears in the acceptable answers.
pub fn exact_match(prediction: &str, gold_answers: &[String]) -> bool {
    let normalized = normalize_answer(prediction);
    gold_answers
        .iter()
        .any(|g| normalize_answer(g) == normalized)
}

/// An answer is graph-supported when any edge of any graph ends at a
/// passage-side node carrying one of the answer's entities.
pub fn fact_related(graphs: &[LocalGraph], answer_entities: &[EntityId]) -> bool {
    graphs.iter().any(|g| {
        g.edges
            .iter()
            .any(|e| answer_entities.contains(&g.v_nodes[e.v].entity))
    })
}

/// Entities named by the gold answers, resolved by exact lookup of each
/// normalized answer in the mention lexicon. Answers that are not entity
/// surfaces contribute nothing, which makes [`fact_related`] conservative.
pub fn link_answer_entities(
    gold_answers: &[String],
    vocab: &Vocab,
    lexicon: &TokenLexicon,
) -> Vec<EntityId> {
    let mut out = Vec::new();
    for gold in gold_answers {
        let tokens = tokenize(&normalize_answer(gold), vocab);
        if tokens.is_empty() {
            continue;
        }
        if let Some(e) = lexicon.lookup(&tokens) {
            if !out.contains(&e) {
                out.push(e);
            }
        }
    }
    out
}

/// One scored question: the primary model's prediction plus everything
/// needed to place the example in the fact-related subset.
#[derive(Debug, Clone)]
pub struct EvalExample {
    pub question: String,
    pub gold_answers: Vec<String>,
    pub prediction: String,
    pub graphs: Vec<LocalGraph>,
    pub answer_entities: Vec<EntityId>,
}

#[derive(Debug, Clone, Serialize)]
pub struct VariantReport {
    pub name: String,
    pub overall_em: f64,
    pub subset_em: f64,
    /// Primary minus this variant; positive means the primary model wins.
    pub overall_delta: f64,
    pub subset_delta: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub examples: usize,
    pub subset_count: usize,
    pub subset_fraction: f64,
    pub overall_em: f64,
    pub subset_em: f64,
    pub variants: Vec<VariantReport>,
    pub graph_stats: StatsReport,
}

fn em_pair(flags: &[bool], subset: &[bool]) -> (f64, f64) {
    let n = flags.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let overall = flags.iter().filter(|&&b| b).count() as f64 / n as f64;
    let subset_total = subset.iter().filter(|&&s| s).count();
    if subset_total == 0 {
        return (overall, 0.0);
    }
    let subset_hits = flags
        .iter()
        .zip(subset)
        .filter(|&(&hit, &in_subset)| hit && in_subset)
        .count();
    (overall, subset_hits as f64 / subset_total as f64)
}

/// Score the examples and any number of alternative prediction sets, each
/// aligned index-by-index with `examples`.
pub fn build_report(
    examples: &[EvalExample],
    variants: &[(String, Vec<String>)],
) -> Result<EvalReport, EvalError> {
    for (i, ex) in examples.iter().enumerate() {
        if ex.gold_answers.is_empty() {
            return Err(EvalError::EmptyGolds { index: i });
        }
    }
    for (name, preds) in variants {
        if preds.len() != examples.len() {
            return Err(EvalError::MisalignedPredictions {
                name: name.clone(),
                expected: examples.len(),
                found: preds.len(),
            });
        }
    }
    let subset: Vec<bool> = examples
        .iter()
        .map(|ex| fact_related(&ex.graphs, &ex.answer_entities))
        .collect();
    let primary: Vec<bool> = examples
        .iter()
        .map(|ex| exact_match(&ex.prediction, &ex.gold_answers))
        .collect();
    let (overall_em, subset_em) = em_pair(&primary, &subset);
    let variant_reports = variants
        .iter()
        .map(|(name, preds)| {
            let flags: Vec<bool> = preds
                .iter()
                .zip(examples)
                .map(|(p, ex)| exact_match(p, &ex.gold_answers))
                .collect();
            let (o, s) = em_pair(&flags, &subset);
            VariantReport {
                name: name.clone(),
                overall_em: o,
                subset_em: s,
                overall_delta: overall_em - o,
                subset_delta: subset_em - s,
            }
        })
        .collect();
    let per_question: Vec<Vec<LocalGraph>> =
        examples.iter().map(|ex| ex.graphs.clone()).collect();
    let subset_count = subset.iter().filter(|&&s| s).count();
    Ok(EvalReport {
        examples: examples.len(),
        subset_count,
        subset_fraction: if examples.is_empty() {
            0.0
        } else {
            subset_count as f64 / examples.len() as f64
        },
        overall_em,
        subset_em,
        variants: variant_reports,
        graph_stats: graph_stats(&per_question),
    })
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Fixed-width table; rendering is byte-stable for golden comparisons.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("{:<20}{}\n", "examples", self.examples));
        s.push_str(&format!(
            "{:<20}{} ({:.4})\n\n",
            "fact subset", self.subset_count, self.subset_fraction
        ));
        s.push_str(&format!(
            "{:<12}{:>12}{:>12}{:>12}{:>12}\n",
            "variant", "overall_em", "subset_em", "d_overall", "d_subset"
        ));
        s.push_str(&format!(
            "{:<12}{:>12.4}{:>12.4}{:>12}{:>12}\n",
            "primary", self.overall_em, self.subset_em, "-", "-"
        ));
        for v in &self.variants {
            s.push_str(&format!(
                "{:<12}{:>12.4}{:>12.4}{:>12.4}{:>12.4}\n",
                v.name, v.overall_em, v.subset_em, v.overall_delta, v.subset_delta
            ));
        }
        s.push('\n');
        s.push_str(&self.graph_stats.to_text());
        s
    }
}
