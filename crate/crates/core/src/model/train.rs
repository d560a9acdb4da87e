//! LoRA-only training on the frozen base, and the finite-difference
//! gradient check that keeps the backward pass honest.

use std::collections::BTreeMap;

use crate::adapter::{LoraAdapter, LoraLayer};
use crate::dataset::{format_aoa, InstructionExample};
use crate::rng::Rng;
use crate::tensor::Matrix;

use super::net::{self, LoraFactors, LoraTensors};
use super::{ModelConfig, ModelError, ModelWeights, TrainConfig};

/// Outcome of a training run: the adapter plus the loss curve that the
/// CLI writes out as CSV.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub adapter: LoraAdapter,
    /// Mean training loss per epoch, in epoch order.
    pub epoch_losses: Vec<f64>,
}

/// Gaussian std for the A-factor init. Large enough that plain SGD at the
/// default learning rate moves the model within the default epoch budget;
/// B starts at zero either way, so the initial delta is still zero.
const A_INIT_STD: f64 = 2.0;

fn init_lora(config: &ModelConfig, cfg: &TrainConfig, rng: &mut Rng) -> LoraTensors {
    let d = config.d_model;
    let scaling = cfg.alpha / cfg.rank as f64;
    let mut modules = BTreeMap::new();
    for module in config.attn_module_ids() {
        modules.insert(
            module,
            LoraFactors {
                a: Matrix::gaussian(d, cfg.rank, A_INIT_STD, rng),
                // B starts at zero so the initial delta vanishes and the
                // model begins from base behavior
                b: Matrix::zeros(cfg.rank, d),
                scaling,
            },
        );
    }
    LoraTensors { modules }
}

fn lora_to_adapter(name: &str, lora: &LoraTensors, cfg: &TrainConfig) -> LoraAdapter {
    let mut adapter = LoraAdapter::new(name);
    for (module, factors) in &lora.modules {
        let layer = LoraLayer::new(factors.a.clone(), factors.b.clone(), cfg.rank, cfg.alpha)
            .expect("trained factors satisfy layer invariants");
        adapter
            .insert(module.clone(), layer)
            .expect("module ids are unique");
    }
    adapter
}

fn adapter_to_lora(
    config: &ModelConfig,
    adapter: &LoraAdapter,
) -> Result<LoraTensors, ModelError> {
    let valid_ids = config.attn_module_ids();
    let mut modules = BTreeMap::new();
    for (module, layer) in &adapter.layers {
        if !valid_ids.contains(module) {
            return Err(ModelError::UnknownModule(module.clone()));
        }
        let d = config.d_model;
        if layer.a.rows() != d || layer.b.cols() != d {
            return Err(ModelError::DeltaShape {
                module: module.clone(),
                delta: (layer.a.rows(), layer.b.cols()),
                weight: (d, d),
            });
        }
        modules.insert(
            module.clone(),
            LoraFactors {
                a: layer.a.clone(),
                b: layer.b.clone(),
                scaling: layer.scaling(),
            },
        );
    }
    Ok(LoraTensors { modules })
}

fn tokenize_examples(
    config: &ModelConfig,
    data: &[InstructionExample],
) -> Result<Vec<Vec<usize>>, ModelError> {
    data.iter()
        .map(|example| net::lm_tokens(config, &format_aoa(example)))
        .collect()
}

/// Gradient descent on the A/B factors only; the base stays bitwise
/// frozen. A is seeded Gaussian, B starts at zero, so `epochs = 0`
/// returns an adapter with zero delta. Deterministic given the config
/// seed.
pub fn train_lora(
    base: &ModelWeights,
    data: &[InstructionExample],
    cfg: &TrainConfig,
) -> Result<TrainRun, ModelError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(ModelError::EmptyData);
    }
    let config = base.config();
    let sequences = tokenize_examples(config, data)?;

    let mut rng = Rng::new(cfg.seed);
    let mut lora = init_lora(config, cfg, &mut rng);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        for batch in sequences.chunks(cfg.batch_size) {
            let mut batch_grads: BTreeMap<String, (Matrix, Matrix)> = BTreeMap::new();
            for tokens in batch {
                let dropout = (cfg.dropout > 0.0).then_some((cfg.dropout, &mut rng));
                let (loss, grads) =
                    net::train_pass(config, base.tensors(), &lora, tokens, dropout, true);
                if !loss.is_finite() {
                    return Err(ModelError::Diverged { epoch });
                }
                loss_sum += loss;
                for (module, (ga, gb)) in grads.modules {
                    match batch_grads.get_mut(&module) {
                        Some((acc_a, acc_b)) => {
                            *acc_a = crate::tensor::axpy(1.0, &ga, acc_a)?;
                            *acc_b = crate::tensor::axpy(1.0, &gb, acc_b)?;
                        }
                        None => {
                            batch_grads.insert(module, (ga, gb));
                        }
                    }
                }
            }
            let step = cfg.learning_rate / batch.len() as f64;
            for (module, (ga, gb)) in &batch_grads {
                let factors = lora.modules.get_mut(module).expect("module tracked");
                factors.a = crate::tensor::axpy(-step, ga, &factors.a)?;
                factors.b = crate::tensor::axpy(-step, gb, &factors.b)?;
            }
        }
        epoch_losses.push(loss_sum / sequences.len() as f64);
    }

    Ok(TrainRun {
        adapter: lora_to_adapter(&format!("lora(seed={})", cfg.seed), &lora, cfg),
        epoch_losses,
    })
}

/// Compare the analytic A/B gradients against central finite differences
/// on `samples` randomly chosen coordinates (dropout off) and return the
/// worst relative error, measured against the finite-difference value
/// with a small floor so near-zero coordinates do not dominate.
pub fn gradient_check(
    weights: &ModelWeights,
    adapter: &LoraAdapter,
    datum: &InstructionExample,
    epsilon: f64,
) -> Result<f64, ModelError> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(ModelError::InvalidTrainConfig(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    let config = weights.config();
    let tokens = net::lm_tokens(config, &format_aoa(datum))?;
    let lora = adapter_to_lora(config, adapter)?;

    let (_, grads) = net::train_pass(config, weights.tensors(), &lora, &tokens, None, true);

    let modules: Vec<String> = lora.modules.keys().cloned().collect();
    let mut rng = Rng::new(config.seed ^ 0x6772_6164);
    let samples = 48usize;
    let mut max_rel = 0.0f64;
    for _ in 0..samples {
        let module = &modules[rng.next_below(modules.len())];
        let factors = &lora.modules[module];
        let pick_a = rng.next_f64() < 0.5;
        let (rows, cols) = if pick_a {
            factors.a.shape()
        } else {
            factors.b.shape()
        };
        let r = rng.next_below(rows);
        let c = rng.next_below(cols);

        let analytic = {
            let (ga, gb) = &grads.modules[module];
            if pick_a {
                ga.get(r, c)
            } else {
                gb.get(r, c)
            }
        };

        let eval_at = |offset: f64| -> f64 {
            let mut bumped = lora.clone();
            let target = bumped.modules.get_mut(module).expect("module exists");
            let m = if pick_a { &mut target.a } else { &mut target.b };
            let old = m.get(r, c);
            m.set(r, c, old + offset);
            let (loss, _) =
                net::train_pass(config, weights.tensors(), &bumped, &tokens, None, false);
            loss
        };
        let fd = (eval_at(epsilon) - eval_at(-epsilon)) / (2.0 * epsilon);
        let rel = (analytic - fd).abs() / fd.abs().max(1e-3);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}
