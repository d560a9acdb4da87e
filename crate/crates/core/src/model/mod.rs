//! A tiny decoder-only transformer with LoRA attach points on the
//! attention Q/K/V projections.
//!
//! The base network is deterministic from its seed and stays frozen under
//! LoRA training; only the low-rank factors move. Inference merges the
//! adapter delta into the projection weights, training keeps the adapter
//! as a separate branch so dropout and gradients can target it alone.

pub mod tokenizer;

mod net;
mod train;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::{apply_delta, delta_weight, AdapterError, LoraAdapter};
use crate::rng::Rng;
use crate::tensor::{Matrix, TensorError};

pub use train::{gradient_check, train_lora, TrainRun};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("invalid train config: {0}")]
    InvalidTrainConfig(String),
    #[error("character {0:?} is outside the model alphabet")]
    UntokenizableChar(char),
    #[error("token {token} out of vocabulary (size {vocab})")]
    OutOfVocab { token: usize, vocab: usize },
    #[error("sequence length {len} exceeds max_seq_len {max}")]
    TooLong { len: usize, max: usize },
    #[error("empty token sequence")]
    EmptyInput,
    #[error("example too short to train on after tokenization")]
    ExampleTooShort,
    #[error("adapter targets unknown module {0}")]
    UnknownModule(String),
    #[error("adapter delta for {module} has shape {delta:?} but weight has shape {weight:?}")]
    DeltaShape {
        module: String,
        delta: (usize, usize),
        weight: (usize, usize),
    },
    #[error("logits have {rows} rows but {targets} targets were given")]
    TargetArity { rows: usize, targets: usize },
    #[error("training data is empty")]
    EmptyData,
    #[error("training diverged: loss became non-finite at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("weight map is missing tensor {0}")]
    MissingTensor(String),
    #[error("tensor {id} has shape {got:?}, expected {expected:?}")]
    TensorShape {
        id: String,
        got: (usize, usize),
        expected: (usize, usize),
    },
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Architecture of the toy transformer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: tokenizer::VOCAB_SIZE,
            d_model: 32,
            n_heads: 4,
            n_layers: 2,
            max_seq_len: 128,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.vocab_size == 0 || self.vocab_size > 512 {
            return err(format!("vocab_size must be in 1..=512, got {}", self.vocab_size));
        }
        if self.d_model == 0 || self.d_model > 64 {
            return err(format!("d_model must be in 1..=64, got {}", self.d_model));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return err(format!(
                "n_heads ({}) must divide d_model ({})",
                self.n_heads, self.d_model
            ));
        }
        if self.n_layers == 0 || self.n_layers > 4 {
            return err(format!("n_layers must be in 1..=4, got {}", self.n_layers));
        }
        if self.max_seq_len == 0 || self.max_seq_len > 128 {
            return err(format!("max_seq_len must be in 1..=128, got {}", self.max_seq_len));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn d_ff(&self) -> usize {
        4 * self.d_model
    }

    /// Module ids of the LoRA attach points, in layer order.
    pub fn attn_module_ids(&self) -> Vec<String> {
        let mut ids = Vec::new();
        for layer in 0..self.n_layers {
            for proj in ["q_proj", "k_proj", "v_proj"] {
                ids.push(format!("layer{layer}.attn.{proj}"));
            }
        }
        ids
    }

    /// Every tensor id and shape of a model with this config.
    fn tensor_layout(&self) -> Vec<(String, usize, usize)> {
        let d = self.d_model;
        let mut layout = vec![
            ("embed.tok".to_string(), self.vocab_size, d),
            ("embed.pos".to_string(), self.max_seq_len, d),
        ];
        for layer in 0..self.n_layers {
            for proj in ["q_proj", "k_proj", "v_proj", "o_proj"] {
                layout.push((format!("layer{layer}.attn.{proj}"), d, d));
            }
            layout.push((format!("layer{layer}.mlp.fc1"), self.d_ff(), d));
            layout.push((format!("layer{layer}.mlp.fc2"), d, self.d_ff()));
            layout.push((format!("layer{layer}.norm.attn"), 1, d));
            layout.push((format!("layer{layer}.norm.mlp"), 1, d));
        }
        layout.push(("norm.final".to_string(), 1, d));
        layout.push(("unembed".to_string(), self.vocab_size, d));
        layout
    }
}

/// Frozen base weights keyed by tensor id. Projection weights are stored
/// as d_out x d_in; activations multiply them transposed.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    config: ModelConfig,
    tensors: BTreeMap<String, Matrix>,
}

impl ModelWeights {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &BTreeMap<String, Matrix> {
        &self.tensors
    }

    pub fn tensor(&self, id: &str) -> &Matrix {
        &self.tensors[id]
    }

    /// Rebuild weights from a tensor map, checking ids and shapes.
    pub fn from_tensor_map(
        config: ModelConfig,
        tensors: BTreeMap<String, Matrix>,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = config.tensor_layout();
        if tensors.len() != layout.len() {
            let expected: Vec<&String> = layout.iter().map(|(id, _, _)| id).collect();
            for id in tensors.keys() {
                if !expected.contains(&id) {
                    return Err(ModelError::InvalidConfig(format!("unexpected tensor {id}")));
                }
            }
        }
        for (id, rows, cols) in &layout {
            let t = tensors
                .get(id)
                .ok_or_else(|| ModelError::MissingTensor(id.clone()))?;
            if t.shape() != (*rows, *cols) {
                return Err(ModelError::TensorShape {
                    id: id.clone(),
                    got: t.shape(),
                    expected: (*rows, *cols),
                });
            }
        }
        Ok(ModelWeights { config, tensors })
    }

    /// The attention projection weights, keyed by module id; this is the
    /// base map that adapter deltas merge into.
    pub fn attn_weight_map(&self) -> BTreeMap<String, Matrix> {
        self.config
            .attn_module_ids()
            .into_iter()
            .map(|id| {
                let t = self.tensors[&id].clone();
                (id, t)
            })
            .collect()
    }

    /// Replace attention projections with already-merged ones.
    pub fn with_attn_weights(
        &self,
        merged: &BTreeMap<String, Matrix>,
    ) -> Result<Self, ModelError> {
        let mut tensors = self.tensors.clone();
        for (id, weight) in merged {
            let slot = tensors
                .get_mut(id)
                .ok_or_else(|| ModelError::UnknownModule(id.clone()))?;
            if slot.shape() != weight.shape() {
                return Err(ModelError::TensorShape {
                    id: id.clone(),
                    got: weight.shape(),
                    expected: slot.shape(),
                });
            }
            *slot = weight.clone();
        }
        Ok(ModelWeights {
            config: self.config.clone(),
            tensors,
        })
    }

    /// Stable digest of all tensor bits; used to assert the base stayed
    /// frozen.
    pub fn checksum(&self) -> u64 {
        let mut acc: u64 = 0xcbf2_9ce4_8422_2325;
        for (id, tensor) in &self.tensors {
            for b in id.as_bytes() {
                acc = (acc ^ *b as u64).wrapping_mul(0x100_0000_01b3);
            }
            for v in tensor.data() {
                acc = (acc ^ v.to_bits()).wrapping_mul(0x100_0000_01b3);
            }
        }
        acc
    }
}

/// LoRA training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            epochs: 10,
            batch_size: 1,
            rank: 8,
            alpha: 32.0,
            dropout: 0.05,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |msg: String| Err(ModelError::InvalidTrainConfig(msg));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return err(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.rank == 0 {
            return err("rank must be at least 1".to_string());
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return err(format!("alpha must be positive, got {}", self.alpha));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.batch_size == 0 {
            return err("batch_size must be at least 1".to_string());
        }
        Ok(())
    }
}

/// Deterministically initialize base weights from the config seed.
pub fn init_model(config: &ModelConfig) -> Result<ModelWeights, ModelError> {
    config.validate()?;
    let mut rng = Rng::new(config.seed);
    let d = config.d_model;
    let proj_std = 1.0 / (d as f64).sqrt();
    let mut tensors = BTreeMap::new();
    for (id, rows, cols) in config.tensor_layout() {
        let tensor = if id.contains("norm") {
            Matrix::new(rows, cols, vec![1.0; rows * cols])?
        } else if id.starts_with("embed.") {
            Matrix::gaussian(rows, cols, 0.1, &mut rng)
        } else if id.ends_with("mlp.fc2") {
            Matrix::gaussian(rows, cols, 1.0 / (config.d_ff() as f64).sqrt(), &mut rng)
        } else {
            Matrix::gaussian(rows, cols, proj_std, &mut rng)
        };
        tensors.insert(id, tensor);
    }
    Ok(ModelWeights { config: config.clone(), tensors })
}

fn validate_tokens(config: &ModelConfig, tokens: &[usize]) -> Result<(), ModelError> {
    if tokens.is_empty() {
        return Err(ModelError::EmptyInput);
    }
    if tokens.len() > config.max_seq_len {
        return Err(ModelError::TooLong {
            len: tokens.len(),
            max: config.max_seq_len,
        });
    }
    if let Some(&token) = tokens.iter().find(|&&t| t >= config.vocab_size) {
        return Err(ModelError::OutOfVocab {
            token,
            vocab: config.vocab_size,
        });
    }
    Ok(())
}

/// Merge the adapter delta into each targeted projection, leaving the
/// base untouched. Inference and generation run on this view.
fn effective_tensors(
    weights: &ModelWeights,
    adapter: Option<&LoraAdapter>,
) -> Result<BTreeMap<String, Matrix>, ModelError> {
    let mut tensors = weights.tensors.clone();
    if let Some(adapter) = adapter {
        for (module, layer) in &adapter.layers {
            let base = tensors
                .get_mut(module)
                .ok_or_else(|| ModelError::UnknownModule(module.clone()))?;
            let delta = delta_weight(layer)?;
            if delta.shape() != base.shape() {
                return Err(ModelError::DeltaShape {
                    module: module.clone(),
                    delta: delta.shape(),
                    weight: base.shape(),
                });
            }
            *base = apply_delta(base, &delta)?;
        }
    }
    Ok(tensors)
}

/// Causal forward pass. Returns seq_len x vocab_size logits. When an
/// adapter is given, the effective Q/K/V are base plus adapter delta.
/// Inference applies no dropout.
pub fn forward(
    weights: &ModelWeights,
    adapter: Option<&LoraAdapter>,
    tokens: &[usize],
) -> Result<Matrix, ModelError> {
    validate_tokens(&weights.config, tokens)?;
    let tensors = effective_tensors(weights, adapter)?;
    Ok(net::forward_logits(&weights.config, &tensors, tokens))
}

/// Mean next-token negative log-likelihood of `targets` under `logits`.
pub fn cross_entropy_loss(logits: &Matrix, targets: &[usize]) -> Result<f64, ModelError> {
    if logits.rows() != targets.len() {
        return Err(ModelError::TargetArity {
            rows: logits.rows(),
            targets: targets.len(),
        });
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= logits.cols()) {
        return Err(ModelError::OutOfVocab {
            token: t,
            vocab: logits.cols(),
        });
    }
    let mut total = 0.0;
    for (row, &target) in targets.iter().enumerate() {
        total += net::row_nll(logits.row(row), target);
    }
    Ok(total / targets.len() as f64)
}

/// Highest-logit token id; exact ties break to the lowest id.
pub fn greedy_argmax(logits_row: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, &v) in logits_row.iter().enumerate() {
        // strict > keeps the earlier (lower) id on ties
        if v > logits_row[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding: argmax next token, ties to the lowest id, stopping
/// after `max_new` tokens, at the end-of-sequence token, or when the
/// context window fills up.
pub fn generate(
    weights: &ModelWeights,
    adapter: Option<&LoraAdapter>,
    prompt: &[usize],
    max_new: usize,
) -> Result<Vec<usize>, ModelError> {
    validate_tokens(&weights.config, prompt)?;
    let tensors = effective_tensors(weights, adapter)?;
    let mut tokens = prompt.to_vec();
    for _ in 0..max_new {
        if tokens.len() >= weights.config.max_seq_len {
            break;
        }
        let logits = net::forward_logits(&weights.config, &tensors, &tokens);
        let best = greedy_argmax(logits.row(logits.rows() - 1));
        tokens.push(best);
        if best == tokenizer::EOS {
            break;
        }
    }
    Ok(tokens)
}
