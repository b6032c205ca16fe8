//! Teacher-forced training of the reader with a decoupled-weight-decay
//! adaptive optimizer, linear learning-rate warmup, periodic dev-set exact
//! match, and best-checkpoint tracking. Metrics stream to a JSON-lines log.

use crate::data::{PreparedData, PreparedExample};
use crate::{io_err, PipelineError};
use kgfuse_core::evalkit::exact_match;
use kgfuse_core::localgraph::LocalGraph;
use kgfuse_core::reader::{EncoderStates, Reader, ReaderConfig, ReaderParams};
use kgfuse_core::rng::{fnv1a64, SeededRng};
use kgfuse_core::scalar::Scalar;
use kgfuse_core::tensor::{Tape, Tensor};
use kgfuse_core::textproc::{detokenize, AnnotatedDocument, Vocab, BOS, EOS};
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    /// Dev evaluation cadence in steps; 0 evaluates only at the end.
    pub eval_every: usize,
    pub seed: u64,
    pub precision: Precision,
    /// Decoupled weight decay; zero disables it.
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 400,
            batch_size: 8,
            learning_rate: 3e-3,
            warmup_steps: 40,
            eval_every: 100,
            seed: 1,
            precision: Precision::F32,
            weight_decay: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let fail = |key: &str, msg: String| Err(PipelineError::Option {
            key: format!("train.{key}"),
            msg,
        });
        if self.steps < self.warmup_steps {
            return fail("warmup_steps", format!(
                "warmup {} exceeds total steps {}",
                self.warmup_steps, self.steps
            ));
        }
        if !(self.learning_rate > 0.0) {
            return fail("learning_rate", format!("must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return fail("batch_size", "must be at least 1".into());
        }
        if self.weight_decay < 0.0 {
            return fail("weight_decay", "must be non-negative".into());
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), PipelineError> {
        let v = value.trim();
        let bad = |key: &str| PipelineError::Option {
            key: format!("train.{key}"),
            msg: format!("bad value {v:?}"),
        };
        match key {
            "steps" => self.steps = v.parse().map_err(|_| bad(key))?,
            "batch_size" => self.batch_size = v.parse().map_err(|_| bad(key))?,
            "learning_rate" => self.learning_rate = v.parse().map_err(|_| bad(key))?,
            "warmup_steps" => self.warmup_steps = v.parse().map_err(|_| bad(key))?,
            "eval_every" => self.eval_every = v.parse().map_err(|_| bad(key))?,
            "seed" => self.seed = v.parse().map_err(|_| bad(key))?,
            "weight_decay" => self.weight_decay = v.parse().map_err(|_| bad(key))?,
            "precision" => {
                self.precision = match v {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(bad(key)),
                }
            }
            _ => {
                return Err(PipelineError::Option {
                    key: format!("train.{key}"),
                    msg: "unknown training key".into(),
                })
            }
        }
        Ok(())
    }

    /// Learning rate at a 1-based step: linear warmup, then constant.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps > 0 && step <= self.warmup_steps {
            self.learning_rate * step as f64 / self.warmup_steps as f64
        } else {
            self.learning_rate
        }
    }
}

/// One metrics line, serialized verbatim into the JSON-lines log.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    /// Mean batch loss since the previous record.
    pub train_loss: f64,
    pub dev_em: f64,
    pub lr: f64,
    /// Running hash of every training example index consumed so far.
    pub batch_hash: String,
}

pub struct TrainOutcome<T: Scalar> {
    pub final_params: ReaderParams<T>,
    pub best_params: ReaderParams<T>,
    /// Dev exact match of the best checkpoint, if any evaluation ran.
    pub best_dev_em: Option<f64>,
    pub best_step: usize,
    pub metrics: Vec<StepRecord>,
    /// Batch loss at every step, for trend checks.
    pub step_losses: Vec<f64>,
}

/// Teacher-forced token negative log-likelihood of the first gold answer,
/// averaged over its tokens plus the end sentinel.
pub fn example_loss<T: Scalar>(
    reader: &Reader<T>,
    ex: &PreparedExample,
    rel_vecs: &[Tensor<T>],
) -> Result<Tensor<T>, PipelineError> {
    let k = reader.config.docs_per_question.min(ex.docs.len());
    let states: Vec<EncoderStates<T>> = ex.docs[..k]
        .iter()
        .map(|(d, g)| reader.encode_doc(d, g, rel_vecs))
        .collect::<Result<_, _>>()?;
    let memories: Vec<&Tensor<T>> = states.iter().map(|s| &s.h_i).collect();
    let mut prefix = Vec::with_capacity(ex.answer_tokens.len() + 1);
    prefix.push(BOS);
    prefix.extend_from_slice(&ex.answer_tokens);
    let targets: Vec<usize> = ex
        .answer_tokens
        .iter()
        .map(|&t| t as usize)
        .chain([EOS as usize])
        .collect();
    let logits = reader.decode(&memories, &prefix)?;
    Ok(logits.log_softmax(1)?.nll_mean(&targets)?)
}

/// Greedy-decode every example with its first `k` stored passages and
/// score exact match. `k = 0` means the model's configured count.
pub fn dataset_em<T: Scalar>(
    reader: &Reader<T>,
    rel_vecs: &[Tensor<T>],
    examples: &[PreparedExample],
    vocab: &Vocab,
) -> Result<f64, PipelineError> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for ex in examples {
        let k = reader.config.docs_per_question.min(ex.docs.len());
        let docs: Vec<(&AnnotatedDocument, &LocalGraph)> =
            ex.docs[..k].iter().map(|(d, g)| (d, g)).collect();
        let tokens = reader.generate(&docs, rel_vecs)?;
        if exact_match(&detokenize(&tokens, vocab), &ex.answers) {
            hits += 1;
        }
    }
    Ok(hits as f64 / examples.len() as f64)
}

/// Adam with decoupled weight decay. Moment buffers are kept in f64 no
/// matter the parameter precision.
struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: usize,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    fn new(weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: Vec::new(),
        }
    }

    /// One update over every parameter with a gradient on the tape.
    /// Returns the global gradient L2 norm.
    fn apply<T: Scalar>(
        &mut self,
        params: &mut ReaderParams<T>,
        tape: &Tape<T>,
        lr: f64,
    ) -> f64 {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let mut entries = params.entries_mut();
        if self.moments.is_empty() {
            self.moments = entries
                .iter()
                .map(|(_, t)| (vec![0.0; t.numel()], vec![0.0; t.numel()]))
                .collect();
        }
        let mut norm2 = 0.0;
        for (i, (_, tensor)) in entries.iter_mut().enumerate() {
            let Some(grad) = tape.grad_of(tensor) else {
                continue;
            };
            let g = grad.data();
            let (m, v) = &mut self.moments[i];
            let x = tensor.data_mut();
            for j in 0..x.len() {
                let gj = g[j].as_f64();
                norm2 += gj * gj;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                let xj = x[j].as_f64();
                x[j] = T::of(xj - lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * xj));
            }
        }
        norm2.sqrt()
    }
}

/// Endless deterministic example-index stream: a reshuffled pass over the
/// dataset per epoch.
struct BatchStream {
    rng: SeededRng,
    order: Vec<usize>,
    pos: usize,
    hash: u64,
}

impl BatchStream {
    fn new(n: usize, seed: u64) -> Self {
        BatchStream {
            rng: SeededRng::new(seed).fork("batches"),
            order: (0..n).collect(),
            pos: n,
            hash: fnv1a64(b"batches"),
        }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut batch = Vec::with_capacity(size);
        while batch.len() < size {
            if self.pos >= self.order.len() {
                self.rng.shuffle(&mut self.order);
                self.pos = 0;
            }
            let idx = self.order[self.pos];
            self.pos += 1;
            // Chain the running hash over consumed indices so equal-budget
            // runs are checkable by comparing one value.
            let mut bytes = self.hash.to_le_bytes().to_vec();
            bytes.extend_from_slice(&(idx as u64).to_le_bytes());
            self.hash = fnv1a64(&bytes);
            batch.push(idx);
        }
        batch
    }
}

fn open_metrics(out_dir: Option<&Path>) -> Result<Option<std::fs::File>, PipelineError> {
    let Some(dir) = out_dir else { return Ok(None) };
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let path = dir.join("metrics.jsonl");
    Ok(Some(
        std::fs::File::create(&path).map_err(|e| io_err(&path, e))?,
    ))
}

/// Run the full training loop. When `out_dir` is given, `metrics.jsonl`,
/// `checkpoint-final.json`, and `checkpoint-best.json` are written there.
pub fn train<T: Scalar>(
    config: &ReaderConfig,
    tcfg: &TrainConfig,
    data: &PreparedData,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome<T>, PipelineError> {
    config.validate().map_err(PipelineError::Reader)?;
    tcfg.validate()?;
    if data.train.is_empty() {
        return Err(PipelineError::Example {
            index: 0,
            msg: "training split is empty".into(),
        });
    }
    let mut params = ReaderParams::<T>::init(config, tcfg.seed)?;
    let mut optimizer = AdamW::new(tcfg.weight_decay);
    let mut stream = BatchStream::new(data.train.len(), tcfg.seed);
    let mut metrics_file = open_metrics(out_dir)?;

    let mut metrics = Vec::new();
    let mut step_losses = Vec::with_capacity(tcfg.steps);
    let mut window_loss = 0.0;
    let mut window_count = 0usize;
    let mut best: Option<(f64, usize, ReaderParams<T>)> = None;

    for step in 1..=tcfg.steps {
        let batch = stream.next_batch(tcfg.batch_size);
        let lr = tcfg.lr_at(step);

        let tape = Tape::new();
        let bound = Reader::from_parts(config.clone(), params.bind(&tape))?;
        let rel_vecs = bound.relation_vectors(&data.relation_tokens)?;
        let mut total: Option<Tensor<T>> = None;
        for &idx in &batch {
            let loss = example_loss(&bound, &data.train[idx], &rel_vecs)?;
            total = Some(match total {
                Some(t) => t.add(&loss)?,
                None => loss,
            });
        }
        let loss = total
            .expect("batch is non-empty")
            .scale(T::of(1.0 / tcfg.batch_size as f64))?;
        let loss_val = loss.item().as_f64();
        if !loss_val.is_finite() {
            let grad_norm = match loss.backward() {
                Ok(()) => params
                    .entries_mut()
                    .iter()
                    .filter_map(|(_, t)| tape.grad_of(t))
                    .map(|g| g.data().iter().map(|x| x.as_f64().powi(2)).sum::<f64>())
                    .sum::<f64>()
                    .sqrt(),
                Err(_) => f64::NAN,
            };
            return Err(PipelineError::NonFiniteLoss {
                loss: loss_val,
                step,
                batch,
                grad_norm,
            });
        }
        loss.backward().map_err(|e| PipelineError::Reader(e.into()))?;
        optimizer.apply(&mut params, &tape, lr);
        params.version += 1;

        step_losses.push(loss_val);
        window_loss += loss_val;
        window_count += 1;

        let eval_now =
            step == tcfg.steps || (tcfg.eval_every > 0 && step % tcfg.eval_every == 0);
        if eval_now {
            let reader = Reader::from_parts(config.clone(), params.clone())?;
            let rel = reader.relation_vectors(&data.relation_tokens)?;
            let dev_em = dataset_em(&reader, &rel, &data.dev, &data.vocab)?;
            let record = StepRecord {
                step,
                train_loss: window_loss / window_count.max(1) as f64,
                dev_em,
                lr,
                batch_hash: format!("{:016x}", stream.hash),
            };
            window_loss = 0.0;
            window_count = 0;
            if let Some(f) = metrics_file.as_mut() {
                let line = serde_json::to_string(&record).expect("record serializes");
                writeln!(f, "{line}").map_err(|e| io_err(Path::new("metrics.jsonl"), e))?;
            }
            let better = best
                .as_ref()
                .map(|(em, _, _)| dev_em > *em)
                .unwrap_or(true);
            if better {
                best = Some((dev_em, step, params.clone()));
            }
            metrics.push(record);
        }
    }

    let (best_dev_em, best_step, best_params) = match best {
        Some((em, step, p)) => (Some(em), step, p),
        None => (None, 0, params.clone()),
    };
    if let Some(dir) = out_dir {
        save_checkpoint(&dir.join("checkpoint-final.json"), config, &params)?;
        save_checkpoint(&dir.join("checkpoint-best.json"), config, &best_params)?;
    }
    Ok(TrainOutcome {
        final_params: params,
        best_params,
        best_dev_em,
        best_step,
        metrics,
        step_losses,
    })
}

#[derive(Serialize, Deserialize)]
struct EntryFile {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    precision: String,
    version: u64,
    config: String,
    entries: Vec<EntryFile>,
}

fn precision_name<T: Scalar>() -> &'static str {
    if std::mem::size_of::<T>() == 4 {
        "f32"
    } else {
        "f64"
    }
}

/// Serialize parameters and their architecture. Values are stored as f64,
/// which widens f32 exactly, so save → load round trips bit-for-bit.
pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    config: &ReaderConfig,
    params: &ReaderParams<T>,
) -> Result<(), PipelineError> {
    let file = CheckpointFile {
        precision: precision_name::<T>().to_string(),
        version: params.version,
        config: config.to_kv(),
        entries: params
            .entries()
            .into_iter()
            .map(|(name, t)| EntryFile {
                name,
                shape: t.shape().to_vec(),
                data: t.data().iter().map(|x| x.as_f64()).collect(),
            })
            .collect(),
    };
    let text = serde_json::to_string(&file).expect("checkpoint serializes");
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn load_checkpoint<T: Scalar>(
    path: &Path,
) -> Result<(ReaderConfig, ReaderParams<T>), PipelineError> {
    let fail = |msg: String| PipelineError::Checkpoint {
        path: path.display().to_string(),
        msg,
    };
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let file: CheckpointFile =
        serde_json::from_str(&text).map_err(|e| fail(format!("unreadable: {e}")))?;
    let want = precision_name::<T>();
    if file.precision != want {
        return Err(fail(format!(
            "stores {} values but {} were requested",
            file.precision, want
        )));
    }
    let config = ReaderConfig::from_kv(&file.config).map_err(PipelineError::Reader)?;
    let entries: Vec<(String, Tensor<T>)> = file
        .entries
        .into_iter()
        .map(|e| {
            let data: Vec<T> = e.data.iter().map(|&x| T::of(x)).collect();
            Tensor::from_vec(e.shape, data)
                .map(|t| (e.name, t))
                .map_err(|err| fail(format!("tensor: {err}")))
        })
        .collect::<Result<_, _>>()?;
    let mut params = ReaderParams::from_entries(&config, entries).map_err(PipelineError::Reader)?;
    params.version = file.version;
    Ok((config, params))
}
