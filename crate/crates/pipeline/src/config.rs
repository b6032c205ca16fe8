//! Plain-text `key = value` run configuration shared by every subcommand.
//! Keys are namespaced by component: `model.*`, `train.*`, `synth.*`,
//! `exp.*`, `sweep.*`, `data.*`, `kg.*`, `eval.*`.

use crate::experiment::ExperimentOptions;
use crate::synth::SynthSpec;
use crate::train::{Precision, TrainConfig};
use crate::{io_err, PipelineError};
use kgfuse_core::reader::{Ablation, ReaderConfig};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    /// Raw `model.*` overrides, applied to a fresh default model config
    /// once the vocabulary size is known.
    pub model_overrides: Vec<(String, String)>,
    pub train: TrainConfig,
    pub synth: SynthSpec,
    pub options: ExperimentOptions,
    pub k_values: Vec<usize>,
    /// Where prepared dataset artifacts live; defaults to the run's
    /// output directory.
    pub data_dir: Option<PathBuf>,
    /// Source triples file for `kg build`.
    pub kg_triples: Option<PathBuf>,
    /// Checkpoint consumed by `eval` and `sweep`; defaults to the best
    /// checkpoint in the output directory.
    pub eval_checkpoint: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            model_overrides: Vec::new(),
            train: TrainConfig::default(),
            synth: SynthSpec::default(),
            options: ExperimentOptions::default(),
            k_values: vec![1, 2, 3, 4, 5],
            data_dir: None,
            kg_triples: None,
            eval_checkpoint: None,
        }
    }
}

fn parse_ablation(s: &str) -> Option<Ablation> {
    match s {
        "full" => Some(Ablation::Full),
        "no_rel" => Some(Ablation::NoRel),
        "no_att" => Some(Ablation::NoAtt),
        "baseline" => Some(Ablation::Baseline),
        _ => None,
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn parse(text: &str, source: &str) -> Result<Self, PipelineError> {
        let mut cfg = PipelineConfig::default();
        // Scratch model config used only to validate each override's key
        // and value as soon as it is read.
        let mut scratch = ReaderConfig::desk_default(64);
        for (i, raw) in text.lines().enumerate() {
            let fail = |msg: String| PipelineError::Config {
                path: source.to_string(),
                line: i + 1,
                msg,
            };
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(fail(format!("expected key = value, got {line:?}")));
            };
            let key = key.trim();
            let value = value.trim();
            let Some((section, rest)) = key.split_once('.') else {
                return Err(fail(format!("key {key:?} is missing its section prefix")));
            };
            let result = match section {
                "model" => {
                    if rest == "vocab_size" {
                        Err(fail(
                            "model.vocab_size is derived from the dataset vocabulary".into(),
                        ))
                    } else {
                        match scratch.set(rest, value) {
                            Ok(()) => {
                                cfg.model_overrides.push((rest.to_string(), value.to_string()));
                                Ok(())
                            }
                            Err(e) => Err(fail(e.to_string())),
                        }
                    }
                }
                "train" => cfg.train.set(rest, value).map_err(|e| fail(e.to_string())),
                "synth" => cfg.synth.set(rest, value).map_err(|e| fail(e.to_string())),
                "exp" => match rest {
                    "variants" => {
                        let mut variants = Vec::new();
                        for name in value.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                            match parse_ablation(name) {
                                Some(v) => variants.push(v),
                                None => return Err(fail(format!("unknown variant {name:?}"))),
                            }
                        }
                        if variants.is_empty() {
                            return Err(fail("exp.variants needs at least one name".into()));
                        }
                        cfg.options.variants = variants;
                        Ok(())
                    }
                    "seeds" => {
                        let seeds: Result<Vec<u64>, _> = value
                            .split(',')
                            .map(str::trim)
                            .filter(|s| !s.is_empty())
                            .map(str::parse)
                            .collect();
                        match seeds {
                            Ok(s) if !s.is_empty() => {
                                cfg.options.seeds = s;
                                Ok(())
                            }
                            _ => Err(fail(format!("bad seed list {value:?}"))),
                        }
                    }
                    "eval_k" => match value.parse::<usize>() {
                        Ok(k) if k >= 1 => {
                            cfg.options.eval_k = k;
                            Ok(())
                        }
                        _ => Err(fail(format!("bad passage count {value:?}"))),
                    },
                    _ => Err(fail(format!("unknown key exp.{rest}"))),
                },
                "sweep" => match rest {
                    "k_values" => {
                        let ks: Result<Vec<usize>, _> = value
                            .split(',')
                            .map(str::trim)
                            .filter(|s| !s.is_empty())
                            .map(str::parse)
                            .collect();
                        match ks {
                            Ok(ks) if !ks.is_empty() && ks.iter().all(|&k| k >= 1) => {
                                cfg.k_values = ks;
                                Ok(())
                            }
                            _ => Err(fail(format!("bad passage-count list {value:?}"))),
                        }
                    }
                    _ => Err(fail(format!("unknown key sweep.{rest}"))),
                },
                "data" => match rest {
                    "dir" => {
                        cfg.data_dir = Some(PathBuf::from(value));
                        Ok(())
                    }
                    _ => Err(fail(format!("unknown key data.{rest}"))),
                },
                "kg" => match rest {
                    "triples" => {
                        cfg.kg_triples = Some(PathBuf::from(value));
                        Ok(())
                    }
                    _ => Err(fail(format!("unknown key kg.{rest}"))),
                },
                "eval" => match rest {
                    "checkpoint" => {
                        cfg.eval_checkpoint = Some(PathBuf::from(value));
                        Ok(())
                    }
                    _ => Err(fail(format!("unknown key eval.{rest}"))),
                },
                _ => Err(fail(format!("unknown section {section:?}"))),
            };
            result?;
        }
        Ok(cfg)
    }

    /// Route one `--seed` value everywhere a seed matters.
    pub fn apply_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.synth.seed = seed;
        self.options.seeds = vec![seed];
    }

    /// The model configuration for a dataset of the given vocabulary size,
    /// with every `model.*` override applied.
    pub fn reader_config(&self, vocab_size: usize) -> Result<ReaderConfig, PipelineError> {
        let mut config = ReaderConfig::desk_default(vocab_size);
        for (key, value) in &self.model_overrides {
            config.set(key, value).map_err(PipelineError::Reader)?;
        }
        config.validate().map_err(PipelineError::Reader)?;
        Ok(config)
    }

    pub fn precision(&self) -> Precision {
        self.train.precision
    }
}
