use super::config::ReaderConfig;
use super::ReaderError;
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};

const INIT_STD: f64 = 0.02;
pub(crate) const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct LayerNormParams<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct AttentionParams<T: Scalar> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct FeedForwardParams<T: Scalar> {
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct EncLayerParams<T: Scalar> {
    pub attn: AttentionParams<T>,
    pub ln1: LayerNormParams<T>,
    pub ff: FeedForwardParams<T>,
    pub ln2: LayerNormParams<T>,
}

#[derive(Debug, Clone)]
pub struct DecLayerParams<T: Scalar> {
    pub self_attn: AttentionParams<T>,
    pub ln1: LayerNormParams<T>,
    pub cross_attn: AttentionParams<T>,
    pub ln2: LayerNormParams<T>,
    pub ff: FeedForwardParams<T>,
    pub ln3: LayerNormParams<T>,
}

/// One attention head of one graph layer. `w_e` is sized to the score
/// concatenation width, which shrinks when relation vectors are ablated.
#[derive(Debug, Clone)]
pub struct GnnHeadParams<T: Scalar> {
    pub w_t: Tensor<T>,
    pub b_t: Tensor<T>,
    pub w_e: Tensor<T>,
}

/// Every learnable tensor in the model. Construction is keyed by parameter
/// name, so two configs sharing a seed draw identical values for every
/// parameter they have in common regardless of what else differs.
#[derive(Debug, Clone)]
pub struct ReaderParams<T: Scalar> {
    pub token_emb: Tensor<T>,
    pub pos_emb: Tensor<T>,
    pub enc: Vec<EncLayerParams<T>>,
    pub dec: Vec<DecLayerParams<T>>,
    pub gnn: Vec<Vec<GnnHeadParams<T>>>,
    /// Learned stand-in for the relation slot of self-loop messages.
    pub self_rel: Tensor<T>,
    /// Bumped by the optimizer after each update; relation buffers check it.
    pub version: u64,
}

fn normal<T: Scalar>(rng: &SeededRng, name: &str, shape: &[usize]) -> Tensor<T> {
    let mut stream = rng.fork(name);
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n)
        .map(|_| T::of(stream.gaussian(0.0, INIT_STD)))
        .collect();
    Tensor::from_vec(shape.to_vec(), data).expect("init shape consistent")
}

fn ln_init<T: Scalar>(d: usize) -> LayerNormParams<T> {
    LayerNormParams {
        gamma: Tensor::ones(&[d]),
        beta: Tensor::zeros(&[d]),
    }
}

fn attn_init<T: Scalar>(rng: &SeededRng, prefix: &str, d: usize) -> AttentionParams<T> {
    AttentionParams {
        wq: normal(rng, &format!("{prefix}.wq"), &[d, d]),
        wk: normal(rng, &format!("{prefix}.wk"), &[d, d]),
        wv: normal(rng, &format!("{prefix}.wv"), &[d, d]),
        wo: normal(rng, &format!("{prefix}.wo"), &[d, d]),
    }
}

fn ff_init<T: Scalar>(rng: &SeededRng, prefix: &str, d: usize, mult: usize) -> FeedForwardParams<T> {
    FeedForwardParams {
        w1: normal(rng, &format!("{prefix}.w1"), &[d, d * mult]),
        b1: Tensor::zeros(&[d * mult]),
        w2: normal(rng, &format!("{prefix}.w2"), &[d * mult, d]),
        b2: Tensor::zeros(&[d]),
    }
}

impl<T: Scalar> ReaderParams<T> {
    pub fn init(config: &ReaderConfig, seed: u64) -> Result<Self, ReaderError> {
        config.validate()?;
        let rng = SeededRng::new(seed);
        let d = config.d;
        let enc = (0..config.enc_layers)
            .map(|i| EncLayerParams {
                attn: attn_init(&rng, &format!("enc.{i}.attn"), d),
                ln1: ln_init(d),
                ff: ff_init(&rng, &format!("enc.{i}.ff"), d, config.ff_mult),
                ln2: ln_init(d),
            })
            .collect();
        let dec = (0..config.dec_layers)
            .map(|i| DecLayerParams {
                self_attn: attn_init(&rng, &format!("dec.{i}.self"), d),
                ln1: ln_init(d),
                cross_attn: attn_init(&rng, &format!("dec.{i}.cross"), d),
                ln2: ln_init(d),
                ff: ff_init(&rng, &format!("dec.{i}.ff"), d, config.ff_mult),
                ln3: ln_init(d),
            })
            .collect();
        let gnn = (0..config.gnn_layers)
            .map(|n| {
                (0..config.gnn_heads)
                    .map(|m| GnnHeadParams {
                        w_t: normal(&rng, &format!("gnn.{n}.{m}.w_t"), &[d, d]),
                        b_t: Tensor::zeros(&[d]),
                        w_e: normal(&rng, &format!("gnn.{n}.{m}.w_e"), &[config.score_width(), 1]),
                    })
                    .collect()
            })
            .collect();
        Ok(ReaderParams {
            token_emb: normal(&rng, "token_emb", &[config.vocab_size, d]),
            pos_emb: normal(&rng, "pos_emb", &[config.max_positions(), d]),
            enc,
            dec,
            gnn,
            self_rel: normal(&rng, "self_rel", &[1, d]),
            version: 0,
        })
    }

    /// Stable (name, tensor) listing used by checkpoints and the optimizer.
    pub fn entries(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = vec![
            ("token_emb".into(), &self.token_emb),
            ("pos_emb".into(), &self.pos_emb),
        ];
        for (i, l) in self.enc.iter().enumerate() {
            push_attn(&mut out, &format!("enc.{i}.attn"), &l.attn);
            push_ln(&mut out, &format!("enc.{i}.ln1"), &l.ln1);
            push_ff(&mut out, &format!("enc.{i}.ff"), &l.ff);
            push_ln(&mut out, &format!("enc.{i}.ln2"), &l.ln2);
        }
        for (i, l) in self.dec.iter().enumerate() {
            push_attn(&mut out, &format!("dec.{i}.self"), &l.self_attn);
            push_ln(&mut out, &format!("dec.{i}.ln1"), &l.ln1);
            push_attn(&mut out, &format!("dec.{i}.cross"), &l.cross_attn);
            push_ln(&mut out, &format!("dec.{i}.ln2"), &l.ln2);
            push_ff(&mut out, &format!("dec.{i}.ff"), &l.ff);
            push_ln(&mut out, &format!("dec.{i}.ln3"), &l.ln3);
        }
        for (n, layer) in self.gnn.iter().enumerate() {
            for (m, h) in layer.iter().enumerate() {
                out.push((format!("gnn.{n}.{m}.w_t"), &h.w_t));
                out.push((format!("gnn.{n}.{m}.b_t"), &h.b_t));
                out.push((format!("gnn.{n}.{m}.w_e"), &h.w_e));
            }
        }
        out.push(("self_rel".into(), &self.self_rel));
        out
    }

    /// Mutable view in the same order as [`Self::entries`].
    pub fn entries_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = vec![
            ("token_emb".into(), &mut self.token_emb),
            ("pos_emb".into(), &mut self.pos_emb),
        ];
        for (i, l) in self.enc.iter_mut().enumerate() {
            push_attn_mut(&mut out, &format!("enc.{i}.attn"), &mut l.attn);
            push_ln_mut(&mut out, &format!("enc.{i}.ln1"), &mut l.ln1);
            push_ff_mut(&mut out, &format!("enc.{i}.ff"), &mut l.ff);
            push_ln_mut(&mut out, &format!("enc.{i}.ln2"), &mut l.ln2);
        }
        for (i, l) in self.dec.iter_mut().enumerate() {
            push_attn_mut(&mut out, &format!("dec.{i}.self"), &mut l.self_attn);
            push_ln_mut(&mut out, &format!("dec.{i}.ln1"), &mut l.ln1);
            push_attn_mut(&mut out, &format!("dec.{i}.cross"), &mut l.cross_attn);
            push_ln_mut(&mut out, &format!("dec.{i}.ln2"), &mut l.ln2);
            push_ff_mut(&mut out, &format!("dec.{i}.ff"), &mut l.ff);
            push_ln_mut(&mut out, &format!("dec.{i}.ln3"), &mut l.ln3);
        }
        for (n, layer) in self.gnn.iter_mut().enumerate() {
            for (m, h) in layer.iter_mut().enumerate() {
                out.push((format!("gnn.{n}.{m}.w_t"), &mut h.w_t));
                out.push((format!("gnn.{n}.{m}.b_t"), &mut h.b_t));
                out.push((format!("gnn.{n}.{m}.w_e"), &mut h.w_e));
            }
        }
        out.push(("self_rel".into(), &mut self.self_rel));
        out
    }

    /// Rebuild from checkpoint entries, verifying names and shapes against
    /// what `config` demands.
    pub fn from_entries(
        config: &ReaderConfig,
        entries: Vec<(String, Tensor<T>)>,
    ) -> Result<Self, ReaderError> {
        let mut params = Self::init(config, 0)?;
        let expected: Vec<(String, Vec<usize>)> = params
            .entries()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if entries.len() != expected.len() {
            return Err(ReaderError::Checkpoint(format!(
                "expected {} tensors, found {}",
                expected.len(),
                entries.len()
            )));
        }
        for (slot, (name, tensor)) in params.entries_mut().into_iter().zip(entries) {
            let (want_name, want_shape) = expected
                .iter()
                .find(|(n, _)| *n == slot.0)
                .expect("expected listing covers every slot");
            if name != *want_name {
                return Err(ReaderError::Checkpoint(format!(
                    "tensor {name:?} out of order, expected {want_name:?}"
                )));
            }
            if tensor.shape() != want_shape.as_slice() {
                return Err(ReaderError::Checkpoint(format!(
                    "tensor {name:?} has shape {:?}, expected {:?}",
                    tensor.shape(),
                    want_shape
                )));
            }
            *slot.1 = tensor;
        }
        params.version = 0;
        Ok(params)
    }

    /// Copy whose tensors are registered as leaves of `tape`. Gradients
    /// land under the original storage, so `tape.grad_of` works on either
    /// copy.
    pub fn bind(&self, tape: &Tape<T>) -> Self {
        let mut bound = self.clone();
        for (_, t) in bound.entries_mut() {
            *t = tape.leaf(t);
        }
        bound.version = self.version;
        bound
    }

    pub fn param_count(&self) -> usize {
        self.entries().iter().map(|(_, t)| t.numel()).sum()
    }
}

fn push_attn<'a, T: Scalar>(
    out: &mut Vec<(String, &'a Tensor<T>)>,
    prefix: &str,
    p: &'a AttentionParams<T>,
) {
    out.push((format!("{prefix}.wq"), &p.wq));
    out.push((format!("{prefix}.wk"), &p.wk));
    out.push((format!("{prefix}.wv"), &p.wv));
    out.push((format!("{prefix}.wo"), &p.wo));
}

fn push_ln<'a, T: Scalar>(
    out: &mut Vec<(String, &'a Tensor<T>)>,
    prefix: &str,
    p: &'a LayerNormParams<T>,
) {
    out.push((format!("{prefix}.gamma"), &p.gamma));
    out.push((format!("{prefix}.beta"), &p.beta));
}

fn push_ff<'a, T: Scalar>(
    out: &mut Vec<(String, &'a Tensor<T>)>,
    prefix: &str,
    p: &'a FeedForwardParams<T>,
) {
    out.push((format!("{prefix}.w1"), &p.w1));
    out.push((format!("{prefix}.b1"), &p.b1));
    out.push((format!("{prefix}.w2"), &p.w2));
    out.push((format!("{prefix}.b2"), &p.b2));
}

fn push_attn_mut<'a, T: Scalar>(
    out: &mut Vec<(String, &'a mut Tensor<T>)>,
    prefix: &str,
    p: &'a mut AttentionParams<T>,
) {
    out.push((format!("{prefix}.wq"), &mut p.wq));
    out.push((format!("{prefix}.wk"), &mut p.wk));
    out.push((format!("{prefix}.wv"), &mut p.wv));
    out.push((format!("{prefix}.wo"), &mut p.wo));
}

fn push_ln_mut<'a, T: Scalar>(
    out: &mut Vec<(String, &'a mut Tensor<T>)>,
    prefix: &str,
    p: &'a mut LayerNormParams<T>,
) {
    out.push((format!("{prefix}.gamma"), &mut p.gamma));
    out.push((format!("{prefix}.beta"), &mut p.beta));
}

fn push_ff_mut<'a, T: Scalar>(
    out: &mut Vec<(String, &'a mut Tensor<T>)>,
    prefix: &str,
    p: &'a mut FeedForwardParams<T>,
) {
    out.push((format!("{prefix}.w1"), &mut p.w1));
    out.push((format!("{prefix}.b1"), &mut p.b1));
    out.push((format!("{prefix}.w2"), &mut p.w2));
    out.push((format!("{prefix}.b2"), &mut p.b2));
}
