//! LoRA adapters: per-module low-rank factor pairs, dense delta
//! materialization, and validation.
//!
//! A layer holds factors `a` (d_out x r) and `b` (r x d_in); its dense
//! update is `(alpha/rank) * a * b`. The scale is folded into the `a`
//! factor before the product so that a fused adapter built by column/row
//! concatenation reproduces the single-adapter product bit for bit at the
//! endpoint weights.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::tensor::{axpy, matmul, Matrix, TensorError};
use crate::{Finding, Severity};

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("layer {module}: {problem}")]
    InvalidLayer { module: String, problem: String },
    #[error("duplicate target module id {0}")]
    DuplicateModule(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// One low-rank factor pair targeting a single weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraLayer {
    /// d_out x r factor.
    pub a: Matrix,
    /// r x d_in factor.
    pub b: Matrix,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraLayer {
    pub fn new(a: Matrix, b: Matrix, rank: usize, alpha: f64) -> Result<Self, AdapterError> {
        let layer = LoraLayer { a, b, rank, alpha };
        if let Some(problem) = layer.invariant_violation() {
            return Err(AdapterError::InvalidLayer {
                module: "<unattached>".into(),
                problem,
            });
        }
        Ok(layer)
    }

    fn invariant_violation(&self) -> Option<String> {
        if self.rank == 0 {
            return Some("rank must be positive".into());
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Some(format!("alpha must be positive and finite, got {}", self.alpha));
        }
        if self.a.cols() != self.rank {
            return Some(format!(
                "a has {} columns but rank is {}",
                self.a.cols(),
                self.rank
            ));
        }
        if self.b.rows() != self.rank {
            return Some(format!(
                "b has {} rows but rank is {}",
                self.b.rows(),
                self.rank
            ));
        }
        None
    }

    /// Effective multiplier applied to `a * b`.
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// Output/input dimensions of the dense update this layer produces.
    pub fn delta_shape(&self) -> (usize, usize) {
        (self.a.rows(), self.b.cols())
    }
}

/// Dense update of one layer: `(alpha/rank) * a * b`, computed by scaling
/// the columns of `a` first and then taking the product.
pub fn delta_weight(layer: &LoraLayer) -> Result<Matrix, AdapterError> {
    let scaled_a = layer.a.scale(layer.scaling());
    Ok(matmul(&scaled_a, &layer.b)?)
}

/// `base + delta`, elementwise. Shapes must agree.
pub fn apply_delta(base: &Matrix, delta: &Matrix) -> Result<Matrix, TensorError> {
    axpy(1.0, delta, base)
}

/// A named set of LoRA layers keyed by target module id
/// (e.g. `layer0.attn.k_proj`).
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub name: String,
    pub layers: BTreeMap<String, LoraLayer>,
}

impl LoraAdapter {
    pub fn new(name: impl Into<String>) -> Self {
        LoraAdapter {
            name: name.into(),
            layers: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, module: impl Into<String>, layer: LoraLayer) -> Result<(), AdapterError> {
        let module = module.into();
        if self.layers.contains_key(&module) {
            return Err(AdapterError::DuplicateModule(module));
        }
        self.layers.insert(module, layer);
        Ok(())
    }

    pub fn module_ids(&self) -> impl Iterator<Item = &str> {
        self.layers.keys().map(String::as_str)
    }

    /// Dense per-module updates for the whole adapter.
    pub fn dense_deltas(&self) -> Result<DeltaSet, AdapterError> {
        let mut deltas = BTreeMap::new();
        for (module, layer) in &self.layers {
            deltas.insert(module.clone(), delta_weight(layer)?);
        }
        Ok(DeltaSet { deltas })
    }

    /// The shared rank, or None when the adapter is empty or mixes ranks.
    pub fn uniform_rank(&self) -> Option<usize> {
        let mut ranks = self.layers.values().map(|l| l.rank);
        let first = ranks.next()?;
        ranks.all(|r| r == first).then_some(first)
    }
}

/// Dense per-module updates, keyed like the adapter that produced them.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DeltaSet {
    pub deltas: BTreeMap<String, Matrix>,
}

impl DeltaSet {
    pub fn get(&self, module: &str) -> Option<&Matrix> {
        self.deltas.get(module)
    }
}

/// Check every adapter invariant; an empty result means the adapter is
/// consistent. Mixed ranks across layers are reported as a warning, not an
/// error, because fusion by concatenation still works on them.
pub fn validate_adapter(adapter: &LoraAdapter) -> Vec<Finding> {
    let mut findings = Vec::new();
    for (module, layer) in &adapter.layers {
        if let Some(problem) = layer.invariant_violation() {
            findings.push(Finding {
                severity: Severity::Error,
                context: Some(module.clone()),
                message: problem,
            });
        }
    }
    let ranks: Vec<usize> = adapter.layers.values().map(|l| l.rank).collect();
    if ranks.windows(2).any(|w| w[0] != w[1]) {
        let mut distinct = ranks.clone();
        distinct.sort_unstable();
        distinct.dedup();
        findings.push(Finding {
            severity: Severity::Warning,
            context: None,
            message: format!("layers mix ranks {distinct:?}"),
        });
    }
    findings
}
