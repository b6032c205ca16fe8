use super::ReaderError;
use std::fmt;

/// Non-linearity used by the graph network's node transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Relu,
    Sigmoid,
}

/// How raw attention scores become weights. `Ratio` divides by the plain
/// sum, which explodes near zero and admits negative weights; it exists for
/// comparison runs and is guarded at use sites.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttnNorm {
    #[default]
    Softmax,
    Ratio,
}

/// Model variants. `Baseline` never looks at graphs; `NoRel` drops relation
/// vectors from attention scoring; `NoAtt` uses uniform weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Ablation {
    #[default]
    Full,
    NoRel,
    NoAtt,
    Baseline,
}

/// Whose transformed representation a message carries: the neighbor's (the
/// default) or the receiving node's own.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Aggregate {
    #[default]
    Neighbor,
    SelfRepr,
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Ablation::Full => "full",
            Ablation::NoRel => "no_rel",
            Ablation::NoAtt => "no_att",
            Ablation::Baseline => "baseline",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReaderConfig {
    pub vocab_size: usize,
    /// Hidden dimension.
    pub d: usize,
    /// Total encoder layers.
    pub enc_layers: usize,
    /// The bottom encoder takes layers 1..=split_layer; fusion happens at
    /// this boundary.
    pub split_layer: usize,
    pub dec_layers: usize,
    /// Transformer attention heads.
    pub heads: usize,
    /// Graph network depth.
    pub gnn_layers: usize,
    /// Graph network heads per layer.
    pub gnn_heads: usize,
    /// Documents read per question.
    pub docs_per_question: usize,
    pub max_doc_len: usize,
    pub max_answer_len: usize,
    /// Feed-forward width as a multiple of `d`.
    pub ff_mult: usize,
    pub activation: Activation,
    pub attn_norm: AttnNorm,
    pub ablation: Ablation,
    pub aggregate: Aggregate,
}

impl ReaderConfig {
    /// Small configuration that trains in minutes on one CPU core.
    pub fn desk_default(vocab_size: usize) -> Self {
        ReaderConfig {
            vocab_size,
            d: 32,
            enc_layers: 4,
            split_layer: 1,
            dec_layers: 2,
            heads: 4,
            gnn_layers: 2,
            gnn_heads: 2,
            docs_per_question: 5,
            max_doc_len: 64,
            max_answer_len: 8,
            ff_mult: 4,
            activation: Activation::Relu,
            attn_norm: AttnNorm::Softmax,
            ablation: Ablation::Full,
            aggregate: Aggregate::Neighbor,
        }
    }

    pub fn validate(&self) -> Result<(), ReaderError> {
        let fail = |msg: String| Err(ReaderError::Config(msg));
        if self.vocab_size <= crate::textproc::RESERVED_TOKENS.len() {
            return fail(format!(
                "vocab_size {} leaves no room beyond the reserved tokens",
                self.vocab_size
            ));
        }
        if self.d == 0 {
            return fail("d must be positive".into());
        }
        if self.split_layer == 0 || self.split_layer >= self.enc_layers {
            return fail(format!(
                "split_layer must satisfy 0 < {} < enc_layers {}",
                self.split_layer, self.enc_layers
            ));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return fail(format!("d {} not divisible by heads {}", self.d, self.heads));
        }
        if self.dec_layers == 0 {
            return fail("dec_layers must be at least 1".into());
        }
        if self.gnn_layers == 0 || self.gnn_heads == 0 {
            return fail("graph network needs at least one layer and one head".into());
        }
        if self.docs_per_question == 0 {
            return fail("docs_per_question must be at least 1".into());
        }
        if self.max_doc_len < 2 || self.max_answer_len == 0 {
            return fail("token limits too small".into());
        }
        if self.ff_mult == 0 {
            return fail("ff_mult must be at least 1".into());
        }
        Ok(())
    }

    /// Width of the concatenated score input for the current ablation.
    pub fn score_width(&self) -> usize {
        match self.ablation {
            Ablation::NoRel => 2 * self.d,
            _ => 3 * self.d,
        }
    }

    /// Longest position index the model can see (documents and answer
    /// prefixes share the positional table).
    pub fn max_positions(&self) -> usize {
        self.max_doc_len.max(self.max_answer_len + 1)
    }

    /// Serialize as `key = value` lines.
    pub fn to_kv(&self) -> String {
        let act = match self.activation {
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
        };
        let norm = match self.attn_norm {
            AttnNorm::Softmax => "softmax",
            AttnNorm::Ratio => "ratio",
        };
        let agg = match self.aggregate {
            Aggregate::Neighbor => "neighbor",
            Aggregate::SelfRepr => "self",
        };
        format!(
            "vocab_size = {}\nd = {}\nenc_layers = {}\nsplit_layer = {}\ndec_layers = {}\n\
             heads = {}\ngnn_layers = {}\ngnn_heads = {}\ndocs_per_question = {}\n\
             max_doc_len = {}\nmax_answer_len = {}\nff_mult = {}\nactivation = {}\n\
             attn_norm = {}\nablation = {}\naggregate = {}\n",
            self.vocab_size,
            self.d,
            self.enc_layers,
            self.split_layer,
            self.dec_layers,
            self.heads,
            self.gnn_layers,
            self.gnn_heads,
            self.docs_per_question,
            self.max_doc_len,
            self.max_answer_len,
            self.ff_mult,
            act,
            norm,
            self.ablation,
            agg
        )
    }

    /// Apply one `key = value` entry. Returns an error for unknown keys or
    /// unparsable values, so config typos fail loudly.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ReaderError> {
        let bad = |what: &str| {
            Err(ReaderError::Config(format!(
                "bad value {value:?} for {what}"
            )))
        };
        fn count(value: &str, key: &str) -> Result<usize, ReaderError> {
            value.trim().parse::<usize>().map_err(|_| {
                ReaderError::Config(format!("bad value {value:?} for {key}"))
            })
        }
        match key {
            "vocab_size" => self.vocab_size = count(value, key)?,
            "d" => self.d = count(value, key)?,
            "enc_layers" => self.enc_layers = count(value, key)?,
            "split_layer" => self.split_layer = count(value, key)?,
            "dec_layers" => self.dec_layers = count(value, key)?,
            "heads" => self.heads = count(value, key)?,
            "gnn_layers" => self.gnn_layers = count(value, key)?,
            "gnn_heads" => self.gnn_heads = count(value, key)?,
            "docs_per_question" => self.docs_per_question = count(value, key)?,
            "max_doc_len" => self.max_doc_len = count(value, key)?,
            "max_answer_len" => self.max_answer_len = count(value, key)?,
            "ff_mult" => self.ff_mult = count(value, key)?,
            "activation" => {
                self.activation = match value.trim() {
                    "relu" => Activation::Relu,
                    "sigmoid" => Activation::Sigmoid,
                    _ => return bad(key),
                }
            }
            "attn_norm" => {
                self.attn_norm = match value.trim() {
                    "softmax" => AttnNorm::Softmax,
                    "ratio" => AttnNorm::Ratio,
                    _ => return bad(key),
                }
            }
            "ablation" => {
                self.ablation = match value.trim() {
                    "full" => Ablation::Full,
                    "no_rel" => Ablation::NoRel,
                    "no_att" => Ablation::NoAtt,
                    "baseline" => Ablation::Baseline,
                    _ => return bad(key),
                }
            }
            "aggregate" => {
                self.aggregate = match value.trim() {
                    "neighbor" => Aggregate::Neighbor,
                    "self" => Aggregate::SelfRepr,
                    _ => return bad(key),
                }
            }
            _ => {
                return Err(ReaderError::Config(format!("unknown model config key {key:?}")));
            }
        }
        Ok(())
    }

    /// Parse a full `key = value` document produced by [`Self::to_kv`].
    pub fn from_kv(text: &str) -> Result<Self, ReaderError> {
        let mut cfg = ReaderConfig::desk_default(crate::textproc::RESERVED_TOKENS.len() + 1);
        for raw in text.lines() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(ReaderError::Config(format!("expected key = value, got {line:?}")));
            };
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
