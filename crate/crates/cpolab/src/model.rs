//! Tiny decoder-only transformer with per-layer hidden state capture.
//!
//! Each block is pre-norm attention + pre-norm MLP with residual
//! connections; the hidden state reported for layer `u` is the residual
//! stream after block `u` (post-block, pre-final-norm). Learned absolute
//! positional embeddings. The embedding and output head live outside the
//! per-layer groups and are never selected for training.

use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError};
use crate::tensor::{Scalar, Tensor, TensorError};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.n_layers == 0
            || self.d_model == 0
            || self.n_heads == 0
            || self.vocab_size == 0
            || self.max_seq_len == 0
        {
            return Err(ModelError::BadConfig("all dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::BadConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("bad model config: {0}")]
    BadConfig(String),
    #[error("input length {len} exceeds max_seq_len {max}")]
    InputTooLong { len: usize, max: usize },
    #[error("token id {id} out of vocabulary (size {vocab})")]
    TokenOutOfVocab { id: usize, vocab: usize },
    #[error("empty token sequence")]
    EmptyInput,
    #[error("layer index {index} out of range for {n_layers} layers")]
    LayerOutOfRange { index: usize, n_layers: usize },
    #[error("targets length {targets} does not match sequence length {seq}")]
    TargetLengthMismatch { targets: usize, seq: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub struct LayerParams<S: Scalar> {
    pub ln1_gamma: Tensor<S>,
    pub ln1_beta: Tensor<S>,
    pub wq: Tensor<S>,
    pub wk: Tensor<S>,
    pub wv: Tensor<S>,
    pub wo: Tensor<S>,
    pub ln2_gamma: Tensor<S>,
    pub ln2_beta: Tensor<S>,
    pub mlp_w1: Tensor<S>,
    pub mlp_b1: Tensor<S>,
    pub mlp_w2: Tensor<S>,
    pub mlp_b2: Tensor<S>,
}

impl<S: Scalar> LayerParams<S> {
    fn named(&self, layer: usize) -> Vec<(String, Tensor<S>)> {
        let p = |suffix: &str| format!("layer{layer}.{suffix}");
        vec![
            (p("ln1.gamma"), self.ln1_gamma.clone()),
            (p("ln1.beta"), self.ln1_beta.clone()),
            (p("attn.wq"), self.wq.clone()),
            (p("attn.wk"), self.wk.clone()),
            (p("attn.wv"), self.wv.clone()),
            (p("attn.wo"), self.wo.clone()),
            (p("ln2.gamma"), self.ln2_gamma.clone()),
            (p("ln2.beta"), self.ln2_beta.clone()),
            (p("mlp.w1"), self.mlp_w1.clone()),
            (p("mlp.b1"), self.mlp_b1.clone()),
            (p("mlp.w2"), self.mlp_w2.clone()),
            (p("mlp.b2"), self.mlp_b2.clone()),
        ]
    }
}

pub struct Model<S: Scalar> {
    pub config: ModelConfig,
    pub embedding: Tensor<S>,
    pub pos_embedding: Tensor<S>,
    pub layers: Vec<LayerParams<S>>,
    pub lnf_gamma: Tensor<S>,
    pub lnf_beta: Tensor<S>,
    pub head: Tensor<S>,
    trainable: Vec<bool>,
}

/// Hidden states captured from one forward pass, shaped
/// (layers, sequence length, hidden size), stored as f64 for probing.
pub struct ActivationTensor {
    pub n_layers: usize,
    pub seq_len: usize,
    pub d_model: usize,
    pub data: Vec<f64>,
}

impl ActivationTensor {
    pub fn at(&self, layer: usize, pos: usize) -> &[f64] {
        let start = (layer * self.seq_len + pos) * self.d_model;
        &self.data[start..start + self.d_model]
    }

    pub fn last_token(&self, layer: usize) -> &[f64] {
        self.at(layer, self.seq_len - 1)
    }
}

pub struct ForwardOutput<S: Scalar> {
    /// (T x vocab) logits, still attached to the tape.
    pub logits: Tensor<S>,
    /// Residual-stream state after each block, (T x d_model) per layer.
    pub hidden: Vec<Tensor<S>>,
    /// Per-layer, per-head attention output slices (T x d_head values),
    /// captured only when requested.
    pub head_activations: Option<Vec<Vec<Vec<S>>>>,
}

impl<S: Scalar> ForwardOutput<S> {
    pub fn seq_len(&self) -> usize {
        self.logits.shape()[0]
    }

    pub fn activation_tensor(&self) -> ActivationTensor {
        let n_layers = self.hidden.len();
        let seq_len = self.hidden[0].shape()[0];
        let d_model = self.hidden[0].shape()[1];
        let mut data = Vec::with_capacity(n_layers * seq_len * d_model);
        for h in &self.hidden {
            data.extend(h.data().iter().map(|v| v.to_f64_lossy()));
        }
        ActivationTensor {
            n_layers,
            seq_len,
            d_model,
            data,
        }
    }
}

const LN_EPS: f64 = 1e-5;
const MASK_NEG: f64 = -1e9;

impl<S: Scalar> Model<S> {
    /// Random init, normal(0, 0.02) for weights, ones/zeros for norms.
    /// The unembedding head uses normal(0, 1/sqrt(d_model)) instead: under
    /// per-layer selective training it can stay frozen at init, and a
    /// 0.02-scale frozen readout would cap the reachable logit range (and
    /// therefore the maximum token probability) regardless of how well the
    /// trained layers shape the residual stream.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut normal = |shape: &[usize], std: f64| -> Tensor<S> {
            let n: usize = shape.iter().product();
            let data: Vec<S> = (0..n)
                .map(|_| {
                    // Box-Muller from two uniforms keeps the stream identical
                    // across element types.
                    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                    let u2: f64 = rng.gen();
                    let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                    S::from_f64(z * std)
                })
                .collect();
            Tensor::param(shape, data)
        };
        let d = config.d_model;
        let hidden = 4 * d;
        let ones = |n: usize| Tensor::param(&[n], vec![S::one(); n]);
        let zeros_p = |n: usize| Tensor::param(&[n], vec![S::zero(); n]);
        let embedding = normal(&[config.vocab_size, d], 0.02);
        let pos_embedding = normal(&[config.max_seq_len, d], 0.02);
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                ln1_gamma: ones(d),
                ln1_beta: zeros_p(d),
                wq: normal(&[d, d], 0.02),
                wk: normal(&[d, d], 0.02),
                wv: normal(&[d, d], 0.02),
                wo: normal(&[d, d], 0.02),
                ln2_gamma: ones(d),
                ln2_beta: zeros_p(d),
                mlp_w1: normal(&[d, hidden], 0.02),
                mlp_b1: zeros_p(hidden),
                mlp_w2: normal(&[hidden, d], 0.02),
                mlp_b2: zeros_p(d),
            })
            .collect();
        let head = normal(&[d, config.vocab_size], 1.0 / (d as f64).sqrt());
        Ok(Model {
            trainable: vec![true; config.n_layers],
            lnf_gamma: ones(d),
            lnf_beta: zeros_p(d),
            embedding,
            pos_embedding,
            layers,
            head,
            config,
        })
    }

    /// All parameters with stable names, layer groups first-to-last.
    pub fn named_params(&self) -> Vec<(String, Tensor<S>)> {
        let mut out = vec![
            ("embedding".to_string(), self.embedding.clone()),
            ("pos_embedding".to_string(), self.pos_embedding.clone()),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            out.extend(layer.named(i));
        }
        out.push(("lnf.gamma".to_string(), self.lnf_gamma.clone()));
        out.push(("lnf.beta".to_string(), self.lnf_beta.clone()));
        out.push(("head".to_string(), self.head.clone()));
        out
    }

    /// Parameters of one transformer block.
    pub fn layer_params(&self, layer: usize) -> Vec<(String, Tensor<S>)> {
        self.layers[layer].named(layer)
    }

    /// Parameters eligible for optimizer updates: only the blocks currently
    /// marked trainable. Embedding, positions, final norm, and head are
    /// never updated.
    pub fn trainable_params(&self) -> Vec<(String, Tensor<S>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if self.trainable[i] {
                out.extend(layer.named(i));
            }
        }
        out
    }

    pub fn set_trainable_layers(&mut self, layers: &[usize]) -> Result<(), ModelError> {
        for &i in layers {
            if i >= self.config.n_layers {
                return Err(ModelError::LayerOutOfRange {
                    index: i,
                    n_layers: self.config.n_layers,
                });
            }
        }
        for flag in self.trainable.iter_mut() {
            *flag = false;
        }
        for &i in layers {
            self.trainable[i] = true;
        }
        Ok(())
    }

    pub fn trainable_layers(&self) -> Vec<usize> {
        self.trainable
            .iter()
            .enumerate()
            .filter(|(_, &t)| t)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn zero_grads(&self) {
        for (_, t) in self.named_params() {
            t.zero_grad();
        }
    }

    /// Deep copy: fresh leaf tensors with identical values.
    pub fn deep_clone(&self) -> Self {
        let copy = |t: &Tensor<S>| Tensor::param(t.shape(), t.to_vec());
        Model {
            config: self.config.clone(),
            embedding: copy(&self.embedding),
            pos_embedding: copy(&self.pos_embedding),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    ln1_gamma: copy(&l.ln1_gamma),
                    ln1_beta: copy(&l.ln1_beta),
                    wq: copy(&l.wq),
                    wk: copy(&l.wk),
                    wv: copy(&l.wv),
                    wo: copy(&l.wo),
                    ln2_gamma: copy(&l.ln2_gamma),
                    ln2_beta: copy(&l.ln2_beta),
                    mlp_w1: copy(&l.mlp_w1),
                    mlp_b1: copy(&l.mlp_b1),
                    mlp_w2: copy(&l.mlp_w2),
                    mlp_b2: copy(&l.mlp_b2),
                })
                .collect(),
            lnf_gamma: copy(&self.lnf_gamma),
            lnf_beta: copy(&self.lnf_beta),
            head: copy(&self.head),
            trainable: self.trainable.clone(),
        }
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<(), ModelError> {
        if tokens.is_empty() {
            return Err(ModelError::EmptyInput);
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(ModelError::InputTooLong {
                len: tokens.len(),
                max: self.config.max_seq_len,
            });
        }
        for &id in tokens {
            if id >= self.config.vocab_size {
                return Err(ModelError::TokenOutOfVocab {
                    id,
                    vocab: self.config.vocab_size,
                });
            }
        }
        Ok(())
    }

    /// Causal teacher-forced forward pass over one token sequence.
    pub fn forward(&self, tokens: &[usize], capture_heads: bool) -> Result<ForwardOutput<S>, ModelError> {
        self.check_tokens(tokens)?;
        let t_len = tokens.len();
        let n_heads = self.config.n_heads;
        let d_head = self.config.d_head();
        let eps = S::from_f64(LN_EPS);
        let inv_sqrt_dh = S::from_f64(1.0 / (d_head as f64).sqrt());

        // additive causal mask: 0 on/below the diagonal, large negative above
        let mut mask_data = vec![S::zero(); t_len * t_len];
        for i in 0..t_len {
            for j in (i + 1)..t_len {
                mask_data[i * t_len + j] = S::from_f64(MASK_NEG);
            }
        }
        let causal_mask = Tensor::from_vec(&[t_len, t_len], mask_data);

        let positions: Vec<usize> = (0..t_len).collect();
        let tok_emb = self.embedding.gather_rows(tokens)?;
        let pos_emb = self.pos_embedding.gather_rows(&positions)?;
        let mut x = tok_emb.add(&pos_emb)?;

        let mut hidden = Vec::with_capacity(self.config.n_layers);
        let mut head_acts: Option<Vec<Vec<Vec<S>>>> = capture_heads.then(Vec::new);

        for layer in &self.layers {
            let normed = x.layer_norm(&layer.ln1_gamma, &layer.ln1_beta, eps)?;
            let q = normed.matmul(&layer.wq)?;
            let k = normed.matmul(&layer.wk)?;
            let v = normed.matmul(&layer.wv)?;
            let mut per_head = Vec::with_capacity(n_heads);
            let mut this_layer_acts = capture_heads.then(|| Vec::with_capacity(n_heads));
            for h in 0..n_heads {
                let (lo, hi) = (h * d_head, (h + 1) * d_head);
                let qh = q.slice_cols(lo, hi)?;
                let kh = k.slice_cols(lo, hi)?;
                let vh = v.slice_cols(lo, hi)?;
                let scores = qh
                    .matmul(&kh.transpose()?)?
                    .scale(inv_sqrt_dh)
                    .add(&causal_mask)?;
                let attn = scores.softmax_rows()?;
                let oh = attn.matmul(&vh)?;
                if let Some(acts) = this_layer_acts.as_mut() {
                    acts.push(oh.to_vec());
                }
                per_head.push(oh);
            }
            let concat = Tensor::concat_cols(&per_head)?;
            let attn_out = concat.matmul(&layer.wo)?;
            x = x.add(&attn_out)?;

            let normed2 = x.layer_norm(&layer.ln2_gamma, &layer.ln2_beta, eps)?;
            let mlp = normed2
                .matmul(&layer.mlp_w1)?
                .add_row_broadcast(&layer.mlp_b1)?
                .gelu()
                .matmul(&layer.mlp_w2)?
                .add_row_broadcast(&layer.mlp_b2)?;
            x = x.add(&mlp)?;

            hidden.push(x.clone());
            if let (Some(all), Some(acts)) = (head_acts.as_mut(), this_layer_acts) {
                all.push(acts);
            }
        }

        let final_norm = x.layer_norm(&self.lnf_gamma, &self.lnf_beta, eps)?;
        let logits = final_norm.matmul(&self.head)?;
        Ok(ForwardOutput {
            logits,
            hidden,
            head_activations: head_acts,
        })
    }

    /// Per-position log-probabilities of `targets` under the logits, still
    /// differentiable. `targets[i]` is scored by `logits[i]` (callers pass
    /// inputs shifted one position behind targets).
    pub fn token_logprobs(&self, out: &ForwardOutput<S>, targets: &[usize]) -> Result<Tensor<S>, ModelError> {
        let t_len = out.seq_len();
        if targets.len() != t_len {
            return Err(ModelError::TargetLengthMismatch {
                targets: targets.len(),
                seq: t_len,
            });
        }
        for &id in targets {
            if id >= self.config.vocab_size {
                return Err(ModelError::TokenOutOfVocab {
                    id,
                    vocab: self.config.vocab_size,
                });
            }
        }
        let logprobs = out.logits.log_softmax_rows()?;
        let idx: Vec<(usize, usize)> = targets.iter().enumerate().map(|(i, &t)| (i, t)).collect();
        Ok(logprobs.gather_row_cols(&idx)?)
    }

    /// Deterministic argmax continuation; stops after `max_new` tokens or
    /// at `eos`, whichever comes first. Never exceeds max_seq_len.
    pub fn greedy_decode(
        &self,
        prompt: &[usize],
        max_new: usize,
        eos: Option<usize>,
    ) -> Result<Vec<usize>, ModelError> {
        if prompt.is_empty() {
            return Err(ModelError::EmptyInput);
        }
        let mut tokens = prompt.to_vec();
        for _ in 0..max_new {
            if tokens.len() >= self.config.max_seq_len {
                break;
            }
            let out = self.forward(&tokens, false)?;
            let logits = out.logits;
            let t_len = logits.shape()[0];
            let v = logits.shape()[1];
            let data = logits.data();
            let last = &data[(t_len - 1) * v..t_len * v];
            let mut best = 0usize;
            for (j, &val) in last.iter().enumerate() {
                if val > last[best] {
                    best = j;
                }
            }
            drop(data);
            tokens.push(best);
            if Some(best) == eos {
                break;
            }
        }
        Ok(tokens)
    }
}

impl Model<f32> {
    pub fn save_checkpoint(&self, path: &Path) -> Result<(), CheckpointError> {
        checkpoint::save(path, &self.named_params())
    }

    pub fn load_checkpoint(&mut self, path: &Path) -> Result<(), CheckpointError> {
        let loaded = checkpoint::load(path)?;
        for (name, tensor) in self.named_params() {
            let (shape, values) = loaded.get(&name).ok_or_else(|| {
                CheckpointError::Malformed(format!("missing parameter {name}"))
            })?;
            if shape != tensor.shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name,
                    shape: shape.clone(),
                    len: values.len(),
                });
            }
            tensor.set_data(values);
        }
        Ok(())
    }

    /// Cast to f64 preserving exact values; used by the gradient oracle.
    pub fn to_f64(&self) -> Model<f64> {
        let cast = |t: &Tensor<f32>| {
            Tensor::param(t.shape(), t.data().iter().map(|&v| v as f64).collect())
        };
        Model {
            config: self.config.clone(),
            embedding: cast(&self.embedding),
            pos_embedding: cast(&self.pos_embedding),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    ln1_gamma: cast(&l.ln1_gamma),
                    ln1_beta: cast(&l.ln1_beta),
                    wq: cast(&l.wq),
                    wk: cast(&l.wk),
                    wv: cast(&l.wv),
                    wo: cast(&l.wo),
                    ln2_gamma: cast(&l.ln2_gamma),
                    ln2_beta: cast(&l.ln2_beta),
                    mlp_w1: cast(&l.mlp_w1),
                    mlp_b1: cast(&l.mlp_b1),
                    mlp_w2: cast(&l.mlp_w2),
                    mlp_b2: cast(&l.mlp_b2),
                })
                .collect(),
            lnf_gamma: cast(&self.lnf_gamma),
            lnf_beta: cast(&self.lnf_beta),
            head: cast(&self.head),
            trainable: self.trainable.clone(),
        }
    }
}
