//! Seeded multi-variant comparison runs over a shared dataset and budget,
//! plus the passage-count sweep that produces plot data.

use crate::data::{PreparedData, PreparedExample};
use crate::retrieval::retrieve_topk;
use crate::train::{train, TrainConfig};
use crate::{io_err, PipelineError};
use kgfuse_core::evalkit::{build_report, exact_match, fact_related, EvalExample, EvalReport};
use kgfuse_core::localgraph::LocalGraph;
use kgfuse_core::reader::{Ablation, Reader, ReaderConfig, ReaderParams};
use kgfuse_core::scalar::Scalar;
use kgfuse_core::textproc::{detokenize, AnnotatedDocument};
use serde::Serialize;
use std::path::Path;

#[derive(Debug, Clone)]
pub struct ExperimentOptions {
    /// Variants to train; the first is the primary model the rest are
    /// measured against.
    pub variants: Vec<Ablation>,
    pub seeds: Vec<u64>,
    /// Passages retrieved per question at evaluation time.
    pub eval_k: usize,
}

impl Default for ExperimentOptions {
    fn default() -> Self {
        ExperimentOptions {
            variants: vec![
                Ablation::Full,
                Ablation::NoRel,
                Ablation::NoAtt,
                Ablation::Baseline,
            ],
            seeds: vec![1, 2, 3],
            eval_k: 5,
        }
    }
}

impl ExperimentOptions {
    fn validate(&self) -> Result<(), PipelineError> {
        let fail = |key: &str, msg: &str| Err(PipelineError::Option {
            key: key.into(),
            msg: msg.into(),
        });
        if self.variants.is_empty() {
            return fail("exp.variants", "need at least one variant");
        }
        if self.seeds.is_empty() {
            return fail("exp.seeds", "need at least one seed");
        }
        if self.eval_k == 0 {
            return fail("exp.eval_k", "must be at least 1");
        }
        Ok(())
    }
}

/// Retrieve the top passages for each example with the reader's own
/// encoder, then greedy-decode an answer string per example.
pub fn predict_examples<T: Scalar>(
    reader: &Reader<T>,
    data: &PreparedData,
    examples: &[PreparedExample],
    k: usize,
) -> Result<Vec<String>, PipelineError> {
    let rel_vecs = reader.relation_vectors(&data.relation_tokens)?;
    let mut out = Vec::with_capacity(examples.len());
    for ex in examples {
        let picked = retrieve_topk(reader, &ex.question_tokens, &ex.passage_tokens, k)?;
        let docs: Vec<(&AnnotatedDocument, &LocalGraph)> = picked
            .indices
            .iter()
            .map(|&i| (&ex.docs[i].0, &ex.docs[i].1))
            .collect();
        let tokens = reader.generate(&docs, &rel_vecs)?;
        out.push(detokenize(&tokens, &data.vocab));
    }
    Ok(out)
}

fn em_over(preds: &[String], examples: &[PreparedExample], flags: &[bool]) -> f64 {
    let mut hits = 0usize;
    let mut total = 0usize;
    for ((p, ex), &keep) in preds.iter().zip(examples).zip(flags) {
        if keep {
            total += 1;
            if exact_match(p, &ex.answers) {
                hits += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VariantScores {
    pub name: String,
    pub overall_em: f64,
    /// EM over examples whose graphs reach an answer entity.
    pub subset_em: f64,
    /// EM over examples labeled relation-discriminative.
    pub discriminative_em: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedRun {
    pub seed: u64,
    /// Aligned with the experiment's variant list, primary first.
    pub scores: Vec<VariantScores>,
    pub subset_fraction: f64,
    pub discriminative_fraction: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct VariantSummary {
    pub name: String,
    pub mean_overall_em: f64,
    pub mean_subset_em: f64,
    pub mean_discriminative_em: f64,
    /// Primary minus this variant, averaged over seeds.
    pub mean_overall_delta: f64,
    pub mean_subset_delta: f64,
    pub mean_discriminative_delta: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentSummary {
    pub seeds: Vec<u64>,
    pub eval_k: usize,
    pub subset_fraction: f64,
    pub discriminative_fraction: f64,
    /// Primary first; its deltas are zero by construction.
    pub variants: Vec<VariantSummary>,
}

pub struct ExperimentOutcome<T: Scalar> {
    pub summary: ExperimentSummary,
    pub runs: Vec<SeedRun>,
    /// One primary-model report per seed, in seed order.
    pub reports: Vec<EvalReport>,
    /// The trained primary model of each seed, for reuse in sweeps.
    pub primary_params: Vec<ReaderParams<T>>,
}

/// Train every (seed, variant) pair on the same data and budget, score the
/// test split with retrieval at `eval_k`, and aggregate across seeds.
/// Artifacts land under `out_dir/seed{S}/{variant}/` plus per-seed reports
/// and a cross-seed `summary.json`.
pub fn run_experiment<T: Scalar>(
    rcfg: &ReaderConfig,
    tcfg: &TrainConfig,
    data: &PreparedData,
    options: &ExperimentOptions,
    out_dir: Option<&Path>,
) -> Result<ExperimentOutcome<T>, PipelineError> {
    options.validate()?;
    let subset_flags: Vec<bool> = data
        .test
        .iter()
        .map(|ex| {
            let graphs: Vec<LocalGraph> = ex.docs.iter().map(|(_, g)| g.clone()).collect();
            fact_related(&graphs, &ex.answer_entities)
        })
        .collect();
    let disc_flags: Vec<bool> = data
        .test
        .iter()
        .map(|ex| ex.discriminative == Some(true))
        .collect();
    let frac = |flags: &[bool]| {
        if flags.is_empty() {
            0.0
        } else {
            flags.iter().filter(|&&b| b).count() as f64 / flags.len() as f64
        }
    };

    let mut runs = Vec::new();
    let mut reports = Vec::new();
    let mut primary_params = Vec::new();
    for &seed in &options.seeds {
        let mut predictions: Vec<(String, Vec<String>)> = Vec::new();
        let mut budgets: Vec<Vec<(usize, String)>> = Vec::new();
        for (vi, &variant) in options.variants.iter().enumerate() {
            let mut cfg = rcfg.clone();
            cfg.ablation = variant;
            let mut t = tcfg.clone();
            t.seed = seed;
            let dir = out_dir.map(|d| d.join(format!("seed{seed}")).join(variant.to_string()));
            let outcome = train::<T>(&cfg, &t, data, dir.as_deref())?;
            let reader = Reader::from_parts(cfg, outcome.best_params)?;
            let preds = predict_examples(&reader, data, &data.test, options.eval_k)?;
            budgets.push(
                outcome
                    .metrics
                    .iter()
                    .map(|r| (r.step, r.batch_hash.clone()))
                    .collect(),
            );
            if vi == 0 {
                primary_params.push(reader.params.clone());
            }
            predictions.push((variant.to_string(), preds));
        }
        for b in &budgets[1..] {
            assert_eq!(b, &budgets[0], "variants consumed different training batches");
        }

        let eval_examples: Vec<EvalExample> = data
            .test
            .iter()
            .zip(&predictions[0].1)
            .map(|(ex, pred)| EvalExample {
                question: ex.question.clone(),
                gold_answers: ex.answers.clone(),
                prediction: pred.clone(),
                graphs: ex.docs.iter().map(|(_, g)| g.clone()).collect(),
                answer_entities: ex.answer_entities.clone(),
            })
            .collect();
        let report = build_report(&eval_examples, &predictions[1..])?;

        let scores: Vec<VariantScores> = predictions
            .iter()
            .map(|(name, preds)| VariantScores {
                name: name.clone(),
                overall_em: em_over(preds, &data.test, &vec![true; data.test.len()]),
                subset_em: em_over(preds, &data.test, &subset_flags),
                discriminative_em: em_over(preds, &data.test, &disc_flags),
            })
            .collect();
        if let Some(dir) = out_dir {
            let seed_dir = dir.join(format!("seed{seed}"));
            std::fs::create_dir_all(&seed_dir).map_err(|e| io_err(&seed_dir, e))?;
            let json = seed_dir.join("report.json");
            std::fs::write(&json, report.to_json()).map_err(|e| io_err(&json, e))?;
            let txt = seed_dir.join("report.txt");
            std::fs::write(&txt, report.to_text()).map_err(|e| io_err(&txt, e))?;
        }
        runs.push(SeedRun {
            seed,
            scores,
            subset_fraction: frac(&subset_flags),
            discriminative_fraction: frac(&disc_flags),
        });
        reports.push(report);
    }

    let n = runs.len() as f64;
    let variants = (0..options.variants.len())
        .map(|vi| {
            let mean = |f: &dyn Fn(&VariantScores) -> f64| {
                runs.iter().map(|r| f(&r.scores[vi])).sum::<f64>() / n
            };
            let delta = |f: &dyn Fn(&VariantScores) -> f64| {
                runs.iter()
                    .map(|r| f(&r.scores[0]) - f(&r.scores[vi]))
                    .sum::<f64>()
                    / n
            };
            VariantSummary {
                name: options.variants[vi].to_string(),
                mean_overall_em: mean(&|s| s.overall_em),
                mean_subset_em: mean(&|s| s.subset_em),
                mean_discriminative_em: mean(&|s| s.discriminative_em),
                mean_overall_delta: delta(&|s| s.overall_em),
                mean_subset_delta: delta(&|s| s.subset_em),
                mean_discriminative_delta: delta(&|s| s.discriminative_em),
            }
        })
        .collect();
    let summary = ExperimentSummary {
        seeds: options.seeds.clone(),
        eval_k: options.eval_k,
        subset_fraction: frac(&subset_flags),
        discriminative_fraction: frac(&disc_flags),
        variants,
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let path = dir.join("summary.json");
        let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
        std::fs::write(&path, text).map_err(|e| io_err(&path, e))?;
    }
    Ok(ExperimentOutcome {
        summary,
        runs,
        reports,
        primary_params,
    })
}

/// Score one trained model's test predictions, with no comparison variants.
pub fn build_eval_report<T: Scalar>(
    reader: &Reader<T>,
    data: &PreparedData,
    eval_k: usize,
) -> Result<EvalReport, PipelineError> {
    let preds = predict_examples(reader, data, &data.test, eval_k)?;
    let eval_examples: Vec<EvalExample> = data
        .test
        .iter()
        .zip(&preds)
        .map(|(ex, pred)| EvalExample {
            question: ex.question.clone(),
            gold_answers: ex.answers.clone(),
            prediction: pred.clone(),
            graphs: ex.docs.iter().map(|(_, g)| g.clone()).collect(),
            answer_entities: ex.answer_entities.clone(),
        })
        .collect();
    Ok(build_report(&eval_examples, &[])?)
}

/// Test-split exact match at each passage count, ascending with duplicates
/// collapsed. When `out_dir` is given, writes `sweep.tsv` with one
/// tab-separated `k EM` row per count.
pub fn sweep_passages<T: Scalar>(
    rcfg: &ReaderConfig,
    params: &ReaderParams<T>,
    data: &PreparedData,
    k_values: &[usize],
    out_dir: Option<&Path>,
) -> Result<Vec<(usize, f64)>, PipelineError> {
    if k_values.iter().any(|&k| k == 0) {
        return Err(PipelineError::Option {
            key: "sweep.k_values".into(),
            msg: "passage counts start at 1".into(),
        });
    }
    let mut ks = k_values.to_vec();
    ks.sort_unstable();
    ks.dedup();
    if ks.is_empty() {
        return Err(PipelineError::Option {
            key: "sweep.k_values".into(),
            msg: "need at least one passage count".into(),
        });
    }
    let reader = Reader::from_parts(rcfg.clone(), params.clone())?;
    let mut rows = Vec::with_capacity(ks.len());
    for &k in &ks {
        let preds = predict_examples(&reader, data, &data.test, k)?;
        let flags = vec![true; data.test.len()];
        rows.push((k, em_over(&preds, &data.test, &flags)));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let mut text = String::new();
        for (k, em) in &rows {
            text.push_str(&format!("{k}\t{em:.6}\n"));
        }
        let path = dir.join("sweep.tsv");
        std::fs::write(&path, text).map_err(|e| io_err(&path, e))?;
    }
    Ok(rows)
}
