//! Weighted fusion of LoRA adapters.
//!
//! Two strategies are provided and kept algebraically interchangeable:
//!
//! * concatenation — per module, the weighted-and-scaled `a` factors are
//!   stacked along columns and the `b` factors along rows, producing one
//!   adapter whose rank is the sum of the input ranks;
//! * linear — the dense per-adapter updates are summed with the same
//!   weights.
//!
//! The fusion weight multiplies the `a` side, so the dense form of the
//! concatenated adapter equals the weighted sum of the individual dense
//! updates. For the two-adapter safety setup the weights are
//! `[1 - lambda, lambda]` with `lambda` allocated to the safety adapter.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::adapter::{delta_weight, AdapterError, DeltaSet, LoraAdapter, LoraLayer};
use crate::tensor::{axpy, concat, Axis, Matrix, TensorError};

/// Sum-to-one slack for normalized weight vectors.
pub const NORMALIZED_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("expected {expected} weights for {expected} adapters, got {got}")]
    WeightArity { expected: usize, got: usize },
    #[error("weights cannot be normalized: {reason}")]
    Normalization { reason: String },
    #[error("normalized spec invalid: {reason}")]
    InvalidSpec { reason: String },
    #[error("strategy mismatch: operation requires {required:?}")]
    WrongStrategy { required: FusionStrategy },
    #[error("adapters target different module sets; asymmetric modules: {modules:?}")]
    ModuleSetMismatch { modules: Vec<String> },
    #[error("no adapters to fuse")]
    NoAdapters,
    #[error("module {module}: incompatible dense shapes {lhs:?} vs {rhs:?}")]
    IncompatibleShapes {
        module: String,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("merge: delta targets module {module} absent from the base weights")]
    MissingModule { module: String },
    #[error("merge: module {module} has base shape {base:?} but delta shape {delta:?}")]
    MergeShape {
        module: String,
        base: (usize, usize),
        delta: (usize, usize),
    },
    #[error("lambda {lambda} outside [0, 1]")]
    LambdaOutOfRange { lambda: f64 },
    #[error("lambda grid must be strictly increasing")]
    GridNotIncreasing,
    #[error("loss returned NaN at lambda {lambda}")]
    NanLoss { lambda: f64 },
    #[error("optimizer tolerance must be positive, got {0}")]
    BadTolerance(f64),
    #[error("optimizer budget must be at least 8, got {0}")]
    BadBudget(usize),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionStrategy {
    Concatenation,
    Linear,
}

/// How to combine a list of adapters: strategy, one weight per adapter,
/// and whether the weights are constrained to the normalized regime.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionSpec {
    pub strategy: FusionStrategy,
    pub weights: Vec<f64>,
    pub normalized: bool,
}

impl FusionSpec {
    /// Normalized spec; weights must already lie in [0, 1] and sum to 1.
    pub fn normalized(strategy: FusionStrategy, weights: Vec<f64>) -> Result<Self, FusionError> {
        let spec = FusionSpec {
            strategy,
            weights,
            normalized: true,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Un-normalized spec; weights only need to be finite and non-negative.
    pub fn unnormalized(strategy: FusionStrategy, weights: Vec<f64>) -> Result<Self, FusionError> {
        let spec = FusionSpec {
            strategy,
            weights,
            normalized: false,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// The two-adapter safety setup: weights `[1 - lambda, lambda]` in
    /// `[task, safety]` order.
    pub fn task_safety(strategy: FusionStrategy, lambda: f64) -> Result<Self, FusionError> {
        if !(0.0..=1.0).contains(&lambda) || lambda.is_nan() {
            return Err(FusionError::LambdaOutOfRange { lambda });
        }
        FusionSpec::normalized(strategy, vec![1.0 - lambda, lambda])
    }

    pub fn validate(&self) -> Result<(), FusionError> {
        if self.weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(FusionError::InvalidSpec {
                reason: format!("weights must be finite and non-negative, got {:?}", self.weights),
            });
        }
        if self.normalized {
            if self.weights.iter().any(|w| *w > 1.0) {
                return Err(FusionError::InvalidSpec {
                    reason: format!("normalized weights must lie in [0, 1], got {:?}", self.weights),
                });
            }
            let sum: f64 = self.weights.iter().sum();
            if (sum - 1.0).abs() > NORMALIZED_SUM_TOL {
                return Err(FusionError::InvalidSpec {
                    reason: format!("normalized weights must sum to 1, got {sum}"),
                });
            }
        }
        Ok(())
    }
}

/// Rescale non-negative weights to sum to 1, preserving proportions.
/// Inputs already within [`NORMALIZED_SUM_TOL`] of sum 1 are returned
/// unchanged, which makes the operation idempotent.
pub fn normalize_weights(weights: &[f64]) -> Result<Vec<f64>, FusionError> {
    if weights.is_empty() {
        return Err(FusionError::Normalization {
            reason: "empty weight list".into(),
        });
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(FusionError::Normalization {
            reason: format!("weights must be finite and non-negative, got {weights:?}"),
        });
    }
    let sum: f64 = weights.iter().sum();
    if sum <= 0.0 {
        return Err(FusionError::Normalization {
            reason: "weights sum to zero".into(),
        });
    }
    if (sum - 1.0).abs() <= NORMALIZED_SUM_TOL {
        return Ok(weights.to_vec());
    }
    Ok(weights.iter().map(|w| w / sum).collect())
}

fn check_arity(adapters: &[LoraAdapter], spec: &FusionSpec) -> Result<(), FusionError> {
    if adapters.is_empty() {
        return Err(FusionError::NoAdapters);
    }
    if spec.weights.len() != adapters.len() {
        return Err(FusionError::WeightArity {
            expected: adapters.len(),
            got: spec.weights.len(),
        });
    }
    Ok(())
}

fn check_module_sets(adapters: &[LoraAdapter]) -> Result<Vec<String>, FusionError> {
    let reference: Vec<String> = adapters[0].layers.keys().cloned().collect();
    let mut asymmetric = Vec::new();
    for other in &adapters[1..] {
        for id in adapters[0].layers.keys() {
            if !other.layers.contains_key(id) {
                asymmetric.push(id.clone());
            }
        }
        for id in other.layers.keys() {
            if !adapters[0].layers.contains_key(id) {
                asymmetric.push(id.clone());
            }
        }
    }
    if !asymmetric.is_empty() {
        asymmetric.sort();
        asymmetric.dedup();
        return Err(FusionError::ModuleSetMismatch { modules: asymmetric });
    }
    Ok(reference)
}

fn check_dense_shapes(module: &str, layers: &[&LoraLayer]) -> Result<(), FusionError> {
    let first = layers[0].delta_shape();
    for layer in &layers[1..] {
        if layer.delta_shape() != first {
            return Err(FusionError::IncompatibleShapes {
                module: module.to_string(),
                lhs: first,
                rhs: layer.delta_shape(),
            });
        }
    }
    Ok(())
}

/// Fuse by factor concatenation. Per module the output factors are
/// `a = [w_0*s_0*a_0 | ... | w_n*s_n*a_n]` and `b = [b_0; ...; b_n]` with
/// `s_i = alpha_i / rank_i`. The output layer carries rank `sum(rank_i)`
/// and alpha equal to that rank, so its own effective scale is 1 and the
/// stored factors already hold all of the weighting.
pub fn fuse_concat(adapters: &[LoraAdapter], spec: &FusionSpec) -> Result<LoraAdapter, FusionError> {
    if spec.strategy != FusionStrategy::Concatenation {
        return Err(FusionError::WrongStrategy {
            required: FusionStrategy::Concatenation,
        });
    }
    spec.validate()?;
    check_arity(adapters, spec)?;
    let modules = check_module_sets(adapters)?;

    let name = format!(
        "fused({})",
        adapters.iter().map(|a| a.name.as_str()).collect::<Vec<_>>().join("+")
    );
    let mut fused = LoraAdapter::new(name);
    for module in &modules {
        let layers: Vec<&LoraLayer> = adapters.iter().map(|a| &a.layers[module]).collect();
        check_dense_shapes(module, &layers)?;

        let scaled_a: Vec<Matrix> = layers
            .iter()
            .zip(&spec.weights)
            .map(|(layer, w)| layer.a.scale(w * layer.scaling()))
            .collect();
        let a_parts: Vec<&Matrix> = scaled_a.iter().collect();
        let b_parts: Vec<&Matrix> = layers.iter().map(|l| &l.b).collect();
        let a = concat(&a_parts, Axis::Cols)?;
        let b = concat(&b_parts, Axis::Rows)?;
        let rank: usize = layers.iter().map(|l| l.rank).sum();
        fused.insert(module, LoraLayer::new(a, b, rank, rank as f64)?)?;
    }
    Ok(fused)
}

/// Reference fusion: per module, the dense weighted sum of the individual
/// updates.
pub fn fuse_linear(adapters: &[LoraAdapter], spec: &FusionSpec) -> Result<DeltaSet, FusionError> {
    if spec.strategy != FusionStrategy::Linear {
        return Err(FusionError::WrongStrategy {
            required: FusionStrategy::Linear,
        });
    }
    spec.validate()?;
    check_arity(adapters, spec)?;
    let modules = check_module_sets(adapters)?;

    let mut deltas = BTreeMap::new();
    for module in &modules {
        let layers: Vec<&LoraLayer> = adapters.iter().map(|a| &a.layers[module]).collect();
        check_dense_shapes(module, &layers)?;

        let mut acc = Matrix::zeros(layers[0].delta_shape().0, layers[0].delta_shape().1);
        for (layer, w) in layers.iter().zip(&spec.weights) {
            acc = axpy(*w, &delta_weight(layer)?, &acc)?;
        }
        deltas.insert(module.clone(), acc);
    }
    Ok(DeltaSet { deltas })
}

/// `W_fusion = W_base + delta` per targeted module. Modules the delta set
/// does not target pass through unchanged; a delta targeting a module the
/// base lacks is an error. The base map is never mutated.
pub fn merge_into_base(
    base: &BTreeMap<String, Matrix>,
    deltas: &DeltaSet,
) -> Result<BTreeMap<String, Matrix>, FusionError> {
    for (module, delta) in &deltas.deltas {
        let weight = base
            .get(module)
            .ok_or_else(|| FusionError::MissingModule {
                module: module.clone(),
            })?;
        if weight.shape() != delta.shape() {
            return Err(FusionError::MergeShape {
                module: module.clone(),
                base: weight.shape(),
                delta: delta.shape(),
            });
        }
    }
    let mut merged = BTreeMap::new();
    for (module, weight) in base {
        let updated = match deltas.get(module) {
            Some(delta) => axpy(1.0, delta, weight)?,
            None => weight.clone(),
        };
        merged.insert(module.clone(), updated);
    }
    Ok(merged)
}

/// Convenience: materialize an adapter's dense deltas and merge them.
pub fn merge_adapter_into_base(
    base: &BTreeMap<String, Matrix>,
    adapter: &LoraAdapter,
) -> Result<BTreeMap<String, Matrix>, FusionError> {
    merge_into_base(base, &adapter.dense_deltas()?)
}

/// One evaluated grid point of a lambda sweep.
#[derive(Debug, Clone)]
pub struct LambdaSweepRow<T> {
    pub lambda: f64,
    pub metrics: T,
}

/// Evaluate a callback over a strictly increasing lambda grid in [0, 1].
/// The grid is validated before any evaluation runs; rows come back in
/// input order.
pub fn sweep_lambda<T>(
    grid: &[f64],
    mut evaluate: impl FnMut(f64) -> T,
) -> Result<Vec<LambdaSweepRow<T>>, FusionError> {
    for &lambda in grid {
        if !(0.0..=1.0).contains(&lambda) || lambda.is_nan() {
            return Err(FusionError::LambdaOutOfRange { lambda });
        }
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(FusionError::GridNotIncreasing);
    }
    Ok(grid
        .iter()
        .map(|&lambda| LambdaSweepRow {
            lambda,
            metrics: evaluate(lambda),
        })
        .collect())
}

/// Minimize a scalar loss over lambda in [0, 1]: an 11-point coarse grid
/// picks the best bracket, then golden-section search refines it until the
/// bracket width drops to `tol` or the evaluation budget runs out. Grid
/// ties break toward the smaller lambda. Returns the best
/// `(lambda, loss)` pair seen.
pub fn optimize_lambda(
    mut loss: impl FnMut(f64) -> f64,
    tol: f64,
    budget: usize,
) -> Result<(f64, f64), FusionError> {
    if tol <= 0.0 {
        return Err(FusionError::BadTolerance(tol));
    }
    if budget < 8 {
        return Err(FusionError::BadBudget(budget));
    }

    let mut evals = 0usize;
    let mut eval = |lambda: f64, evals: &mut usize| -> Result<f64, FusionError> {
        let value = loss(lambda);
        *evals += 1;
        if value.is_nan() {
            return Err(FusionError::NanLoss { lambda });
        }
        Ok(value)
    };

    // coarse grid: 0.0, 0.1, ..., 1.0
    let grid_points = 11usize.min(budget);
    let mut best_idx = 0usize;
    let mut best_val = f64::INFINITY;
    let mut grid_vals = Vec::with_capacity(grid_points);
    for i in 0..grid_points {
        let lambda = i as f64 / 10.0;
        let value = eval(lambda, &mut evals)?;
        grid_vals.push(value);
        // strict < keeps the smaller lambda on ties
        if value < best_val {
            best_val = value;
            best_idx = i;
        }
    }
    let mut best_lambda = best_idx as f64 / 10.0;

    // golden-section refinement on the bracket around the grid minimum
    let mut lo = if best_idx == 0 { 0.0 } else { (best_idx - 1) as f64 / 10.0 };
    let mut hi = if best_idx + 1 >= grid_points {
        (grid_points - 1) as f64 / 10.0
    } else {
        (best_idx + 1) as f64 / 10.0
    };
    const INV_PHI: f64 = 0.618_033_988_749_894_8;

    if hi - lo > tol && evals + 2 <= budget {
        let mut x1 = hi - INV_PHI * (hi - lo);
        let mut x2 = lo + INV_PHI * (hi - lo);
        let mut f1 = eval(x1, &mut evals)?;
        let mut f2 = eval(x2, &mut evals)?;
        while hi - lo > tol && evals < budget {
            if f1 <= f2 {
                hi = x2;
                x2 = x1;
                f2 = f1;
                x1 = hi - INV_PHI * (hi - lo);
                f1 = eval(x1, &mut evals)?;
            } else {
                lo = x1;
                x1 = x2;
                f1 = f2;
                x2 = lo + INV_PHI * (hi - lo);
                f2 = eval(x2, &mut evals)?;
            }
        }
        let (x_in, f_in) = if f1 <= f2 { (x1, f1) } else { (x2, f2) };
        if f_in < best_val {
            best_val = f_in;
            best_lambda = x_in;
        }
    }

    Ok((best_lambda, best_val))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::numerical_rank;

    fn random_adapter(name: &str, modules: &[&str], d: usize, r: usize, alpha: f64, seed: u64) -> LoraAdapter {
        let mut rng = Rng::new(seed);
        let mut adapter = LoraAdapter::new(name);
        for module in modules {
            adapter
                .insert(
                    *module,
                    LoraLayer::new(
                        Matrix::gaussian(d, r, 1.0, &mut rng),
                        Matrix::gaussian(r, d, 1.0, &mut rng),
                        r,
                        alpha,
                    )
                    .unwrap(),
                )
                .unwrap();
        }
        adapter
    }

    const MODULES: &[&str] = &["layer0.attn.k_proj", "layer0.attn.q_proj"];

    #[test]
    fn normalize_symmetric() {
        assert_eq!(normalize_weights(&[2.0, 2.0]).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn normalize_already_normalized_is_unchanged() {
        assert_eq!(normalize_weights(&[1.0, 0.0]).unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn normalize_rejects_all_zero() {
        assert!(matches!(
            normalize_weights(&[0.0, 0.0]),
            Err(FusionError::Normalization { .. })
        ));
    }

    #[test]
    fn normalize_rejects_negative() {
        assert!(matches!(
            normalize_weights(&[1.0, -0.5]),
            Err(FusionError::Normalization { .. })
        ));
    }

    #[test]
    fn normalize_idempotent_and_scale_invariant() {
        let cases: &[&[f64]] = &[&[1.0, 1.0, 1.0], &[0.3, 0.2], &[5.0, 1.0, 3.0, 7.0]];
        for w in cases {
            let once = normalize_weights(w).unwrap();
            let twice = normalize_weights(&once).unwrap();
            assert_eq!(once, twice, "not idempotent for {w:?}");
            for c in [0.5, 2.0, 137.0] {
                let scaled: Vec<f64> = w.iter().map(|v| c * v).collect();
                let ns = normalize_weights(&scaled).unwrap();
                for (a, b) in ns.iter().zip(&once) {
                    assert!((a - b).abs() < 1e-12, "scale {c} broke invariance: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn concat_weight_one_zero_matches_task_delta_exactly() {
        let task = random_adapter("task", MODULES, 8, 3, 6.0, 1);
        let safety = random_adapter("safety", MODULES, 8, 5, 10.0, 2);
        let spec = FusionSpec::task_safety(FusionStrategy::Concatenation, 0.0).unwrap();
        let fused = fuse_concat(&[task.clone(), safety], &spec).unwrap();
        let fused_dense = fused.dense_deltas().unwrap();
        let task_dense = task.dense_deltas().unwrap();
        for module in MODULES {
            assert!(
                fused_dense.get(module).unwrap().bits_eq(task_dense.get(module).unwrap()),
                "module {module} not bitwise equal at lambda=0"
            );
        }
    }

    #[test]
    fn concat_weight_zero_one_matches_safety_delta_exactly() {
        let task = random_adapter("task", MODULES, 8, 3, 6.0, 3);
        let safety = random_adapter("safety", MODULES, 8, 5, 10.0, 4);
        let spec = FusionSpec::task_safety(FusionStrategy::Concatenation, 1.0).unwrap();
        let fused = fuse_concat(&[task, safety.clone()], &spec).unwrap();
        let fused_dense = fused.dense_deltas().unwrap();
        let safety_dense = safety.dense_deltas().unwrap();
        for module in MODULES {
            assert!(fused_dense.get(module).unwrap().bits_eq(safety_dense.get(module).unwrap()));
        }
    }

    #[test]
    fn concat_half_half_hand_oracle() {
        // task delta [[2,0],[0,0]], safety delta [[0,0],[0,4]]
        let mut task = LoraAdapter::new("task");
        task.insert(
            "layer0.attn.k_proj",
            LoraLayer::new(
                Matrix::new(2, 1, vec![1.0, 0.0]).unwrap(),
                Matrix::new(1, 2, vec![2.0, 0.0]).unwrap(),
                1,
                1.0,
            )
            .unwrap(),
        )
        .unwrap();
        let mut safety = LoraAdapter::new("safety");
        safety
            .insert(
                "layer0.attn.k_proj",
                LoraLayer::new(
                    Matrix::new(2, 1, vec![0.0, 1.0]).unwrap(),
                    Matrix::new(1, 2, vec![0.0, 4.0]).unwrap(),
                    1,
                    1.0,
                )
                .unwrap(),
            )
            .unwrap();
        let spec = FusionSpec::task_safety(FusionStrategy::Concatenation, 0.5).unwrap();
        let fused = fuse_concat(&[task.clone(), safety.clone()], &spec).unwrap();
        let dense = fused.dense_deltas().unwrap();
        let expected = Matrix::new(2, 2, vec![1.0, 0.0, 0.0, 2.0]).unwrap();
        assert_eq!(dense.get("layer0.attn.k_proj").unwrap(), &expected);

        // the linear route agrees
        let spec_linear = FusionSpec::task_safety(FusionStrategy::Linear, 0.5).unwrap();
        let linear = fuse_linear(&[task, safety], &spec_linear).unwrap();
        assert_eq!(linear.get("layer0.attn.k_proj").unwrap(), &expected);
    }

    #[test]
    fn fused_output_rank_and_alpha() {
        let task = random_adapter("task", MODULES, 8, 3, 6.0, 5);
        let safety = random_adapter("safety", MODULES, 8, 5, 10.0, 6);
        let spec = FusionSpec::task_safety(FusionStrategy::Concatenation, 0.25).unwrap();
        let fused = fuse_concat(&[task, safety], &spec).unwrap();
        for layer in fused.layers.values() {
            assert_eq!(layer.rank, 8);
            assert_eq!(layer.alpha, 8.0);
            assert_eq!(layer.scaling(), 1.0);
        }
    }

    #[test]
    fn concat_equals_linear_within_tolerance() {
        for seed in 0..50u64 {
            let mut rng = Rng::new(seed ^ 0xabcd);
            let d = 4 + rng.next_below(61);
            let r1 = 1 + rng.next_below(8);
            let r2 = 1 + rng.next_below(8);
            let lambda = rng.next_f64();
            let task = random_adapter("task", MODULES, d, r1, 2.0 * r1 as f64, seed * 2 + 1);
            let safety = random_adapter("safety", MODULES, d, r2, 3.0 * r2 as f64, seed * 2 + 2);
            let cat = fuse_concat(
                &[task.clone(), safety.clone()],
                &FusionSpec::task_safety(FusionStrategy::Concatenation, lambda).unwrap(),
            )
            .unwrap()
            .dense_deltas()
            .unwrap();
            let lin = fuse_linear(
                &[task, safety],
                &FusionSpec::task_safety(FusionStrategy::Linear, lambda).unwrap(),
            )
            .unwrap();
            for module in MODULES {
                let c = cat.get(module).unwrap();
                let l = lin.get(module).unwrap();
                let rel = axpy(-1.0, c, l).unwrap().frobenius_norm()
                    / c.frobenius_norm().max(1e-300);
                assert!(rel < 1e-9, "seed {seed} module {module}: rel {rel}");
            }
        }
    }

    #[test]
    fn fused_rank_bounded_by_rank_sum() {
        for seed in 0..25u64 {
            let mut rng = Rng::new(seed ^ 0x77);
            let d = 8 + rng.next_below(57);
            let r1 = 1 + rng.next_below(8);
            let r2 = 1 + rng.next_below(8);
            let lambda = rng.next_f64();
            let task = random_adapter("task", MODULES, d, r1, r1 as f64, seed * 3 + 1);
            let safety = random_adapter("safety", MODULES, d, r2, r2 as f64, seed * 3 + 2);
            let fused = fuse_concat(
                &[task, safety],
                &FusionSpec::task_safety(FusionStrategy::Concatenation, lambda).unwrap(),
            )
            .unwrap();
            for (module, layer) in &fused.layers {
                let dense = delta_weight(layer).unwrap();
                let rank = numerical_rank(&dense, 1e-9).unwrap();
                assert!(rank <= r1 + r2, "seed {seed} {module}: rank {rank} > {}", r1 + r2);
            }
        }
    }

    #[test]
    fn dense_delta_affine_in_lambda() {
        let task = random_adapter("task", MODULES, 16, 4, 8.0, 11);
        let safety = random_adapter("safety", MODULES, 16, 4, 8.0, 12);
        let dense_at = |lambda: f64| {
            fuse_concat(
                &[task.clone(), safety.clone()],
                &FusionSpec::task_safety(FusionStrategy::Concatenation, lambda).unwrap(),
            )
            .unwrap()
            .dense_deltas()
            .unwrap()
        };
        let d0 = dense_at(0.0);
        let d1 = dense_at(1.0);
        let mut rng = Rng::new(13);
        for _ in 0..100 {
            let lambda = rng.next_f64();
            let actual = dense_at(lambda);
            for module in MODULES {
                let a = actual.get(module).unwrap();
                let lo = d0.get(module).unwrap();
                let hi = d1.get(module).unwrap();
                // lo + lambda * (hi - lo)
                let span = axpy(-1.0, lo, hi).unwrap();
                let expected = axpy(lambda, &span, lo).unwrap();
                let rel = axpy(-1.0, a, &expected).unwrap().frobenius_norm()
                    / a.frobenius_norm().max(1e-300);
                assert!(rel < 1e-9, "lambda {lambda}: rel {rel}");
            }
        }
    }

    #[test]
    fn linear_single_adapter_weight_one_is_identity() {
        let task = random_adapter("only", MODULES, 8, 4, 8.0, 20);
        let spec = FusionSpec::normalized(FusionStrategy::Linear, vec![1.0]).unwrap();
        let lin = fuse_linear(std::slice::from_ref(&task), &spec).unwrap();
        let own = task.dense_deltas().unwrap();
        for module in MODULES {
            let rel = axpy(-1.0, lin.get(module).unwrap(), own.get(module).unwrap())
                .unwrap()
                .frobenius_norm();
            assert!(rel < 1e-15);
        }
    }

    #[test]
    fn linear_zero_adapters_give_zero_deltas() {
        let mut zero1 = LoraAdapter::new("z1");
        let mut zero2 = LoraAdapter::new("z2");
        for module in MODULES {
            for ad in [&mut zero1, &mut zero2] {
                ad.insert(
                    *module,
                    LoraLayer::new(Matrix::zeros(4, 2), Matrix::zeros(2, 4), 2, 4.0).unwrap(),
                )
                .unwrap();
            }
        }
        let spec = FusionSpec::unnormalized(FusionStrategy::Linear, vec![0.3, 0.7]).unwrap();
        let lin = fuse_linear(&[zero1, zero2], &spec).unwrap();
        for module in MODULES {
            assert!(lin.get(module).unwrap().data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn three_adapter_fusion_matches_weighted_sum() {
        let a = random_adapter("a", MODULES, 12, 2, 4.0, 70);
        let b = random_adapter("b", MODULES, 12, 3, 6.0, 71);
        let c = random_adapter("c", MODULES, 12, 4, 8.0, 72);
        let weights = vec![0.2, 0.3, 0.5];
        let cat = fuse_concat(
            &[a.clone(), b.clone(), c.clone()],
            &FusionSpec::normalized(FusionStrategy::Concatenation, weights.clone()).unwrap(),
        )
        .unwrap();
        let lin = fuse_linear(
            &[a, b, c],
            &FusionSpec::normalized(FusionStrategy::Linear, weights).unwrap(),
        )
        .unwrap();
        let dense = cat.dense_deltas().unwrap();
        for module in MODULES {
            let rel = axpy(-1.0, dense.get(module).unwrap(), lin.get(module).unwrap())
                .unwrap()
                .frobenius_norm()
                / dense.get(module).unwrap().frobenius_norm();
            assert!(rel < 1e-9, "module {module}: rel {rel}");
        }
        for layer in cat.layers.values() {
            assert_eq!(layer.rank, 9);
        }
    }

    #[test]
    fn module_set_mismatch_lists_asymmetric_modules() {
        let task = random_adapter("task", &["layer0.attn.k_proj"], 4, 2, 4.0, 30);
        let safety = random_adapter("safety", &["layer0.attn.v_proj"], 4, 2, 4.0, 31);
        let spec = FusionSpec::task_safety(FusionStrategy::Concatenation, 0.5).unwrap();
        match fuse_concat(&[task, safety], &spec) {
            Err(FusionError::ModuleSetMismatch { modules }) => {
                assert_eq!(modules, vec!["layer0.attn.k_proj", "layer0.attn.v_proj"]);
            }
            other => panic!("expected module set mismatch, got {other:?}"),
        }
    }

    #[test]
    fn weight_arity_error() {
        let task = random_adapter("task", MODULES, 4, 2, 4.0, 32);
        let safety = random_adapter("safety", MODULES, 4, 2, 4.0, 33);
        let spec = FusionSpec {
            strategy: FusionStrategy::Concatenation,
            weights: vec![1.0],
            normalized: true,
        };
        assert!(matches!(
            fuse_concat(&[task, safety], &spec),
            Err(FusionError::WeightArity { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn merge_zero_delta_is_bitwise_identity() {
        let mut rng = Rng::new(40);
        let mut base = BTreeMap::new();
        base.insert("layer0.attn.k_proj".to_string(), Matrix::gaussian(4, 4, 1.0, &mut rng));
        let mut deltas = BTreeMap::new();
        deltas.insert("layer0.attn.k_proj".to_string(), Matrix::zeros(4, 4));
        let merged = merge_into_base(&base, &DeltaSet { deltas }).unwrap();
        assert!(merged["layer0.attn.k_proj"].bits_eq(&base["layer0.attn.k_proj"]));
    }

    #[test]
    fn merge_zero_base_returns_delta() {
        let mut base = BTreeMap::new();
        base.insert("m".to_string(), Matrix::zeros(2, 2));
        let d = Matrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut deltas = BTreeMap::new();
        deltas.insert("m".to_string(), d.clone());
        let merged = merge_into_base(&base, &DeltaSet { deltas }).unwrap();
        assert_eq!(merged["m"], d);
    }

    #[test]
    fn merge_hand_oracle() {
        let mut base = BTreeMap::new();
        base.insert("m".to_string(), Matrix::new(2, 2, vec![1.0; 4]).unwrap());
        let mut deltas = BTreeMap::new();
        deltas.insert("m".to_string(), Matrix::new(2, 2, vec![1.0, 0.0, 0.0, 2.0]).unwrap());
        let merged = merge_into_base(&base, &DeltaSet { deltas }).unwrap();
        assert_eq!(merged["m"], Matrix::new(2, 2, vec![2.0, 1.0, 1.0, 3.0]).unwrap());
    }

    #[test]
    fn merge_never_mutates_inputs() {
        let mut rng = Rng::new(41);
        let mut base = BTreeMap::new();
        base.insert("m".to_string(), Matrix::gaussian(3, 3, 1.0, &mut rng));
        let snapshot = base.clone();
        let mut deltas = BTreeMap::new();
        deltas.insert("m".to_string(), Matrix::gaussian(3, 3, 1.0, &mut rng));
        let deltas = DeltaSet { deltas };
        let delta_snapshot = deltas.clone();
        let _ = merge_into_base(&base, &deltas).unwrap();
        assert!(base["m"].bits_eq(&snapshot["m"]));
        assert!(deltas.get("m").unwrap().bits_eq(delta_snapshot.get("m").unwrap()));
    }

    #[test]
    fn merge_missing_module_errors() {
        let base = BTreeMap::new();
        let mut deltas = BTreeMap::new();
        deltas.insert("ghost".to_string(), Matrix::zeros(2, 2));
        assert!(matches!(
            merge_into_base(&base, &DeltaSet { deltas }),
            Err(FusionError::MissingModule { .. })
        ));
    }

    #[test]
    fn sweep_rows_in_input_order() {
        let rows = sweep_lambda(&[0.0, 0.1, 0.2, 0.3, 0.4], |l| l * 10.0).unwrap();
        assert_eq!(rows.len(), 5);
        for (row, expect) in rows.iter().zip([0.0, 1.0, 2.0, 3.0, 4.0]) {
            assert_eq!(row.metrics, expect);
        }
    }

    #[test]
    fn sweep_empty_grid() {
        let rows = sweep_lambda(&[], |_| 0).unwrap();
        assert!(rows.is_empty());
    }

    #[test]
    fn sweep_single_point() {
        let rows = sweep_lambda(&[0.0], |_| 42).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].metrics, 42);
    }

    #[test]
    fn sweep_validates_before_evaluating() {
        let mut calls = 0;
        let result = sweep_lambda(&[0.0, 1.5], |_| {
            calls += 1;
        });
        assert!(matches!(result, Err(FusionError::LambdaOutOfRange { .. })));
        assert_eq!(calls, 0);
    }

    #[test]
    fn sweep_rejects_non_increasing() {
        assert!(matches!(
            sweep_lambda(&[0.4, 0.4], |_| 0),
            Err(FusionError::GridNotIncreasing)
        ));
    }

    #[test]
    fn optimize_quadratic_minimum() {
        let mut evals = 0;
        let (lambda, _) = optimize_lambda(
            |l| {
                evals += 1;
                (l - 0.4) * (l - 0.4)
            },
            1e-3,
            60,
        )
        .unwrap();
        assert!((lambda - 0.4).abs() <= 1e-3, "lambda {lambda}");
        assert!(evals <= 60, "used {evals} evaluations");
    }

    #[test]
    fn optimize_monotone_returns_boundary() {
        let (lambda, value) = optimize_lambda(|l| l, 1e-3, 60).unwrap();
        assert!(lambda <= 1e-3, "lambda {lambda}");
        assert!(value <= 1e-3);
        let (lambda_hi, _) = optimize_lambda(|l| -l, 1e-3, 60).unwrap();
        assert!(lambda_hi >= 1.0 - 1e-3, "lambda {lambda_hi}");
    }

    #[test]
    fn optimize_ties_break_toward_smaller_lambda() {
        // constant loss: every grid point ties
        let (lambda, value) = optimize_lambda(|_| 1.0, 1e-3, 60).unwrap();
        assert_eq!(value, 1.0);
        assert!(lambda <= 0.1, "tie should stay near the smallest lambda, got {lambda}");
    }

    #[test]
    fn optimize_piecewise_table_minimum() {
        // piecewise-linear interpolation of a harmfulness column against
        // a utility penalty, shaped so the true minimum sits at 0.3
        let knots = [3.16, 3.12, 2.97, 2.64, 2.80, 3.10, 3.40, 3.70, 4.00, 4.30, 4.60];
        let loss = |lambda: f64| {
            let x = lambda * 10.0;
            let i = (x.floor() as usize).min(9);
            let t = x - i as f64;
            knots[i] * (1.0 - t) + knots[i + 1] * t
        };
        // independent oracle: exhaustive 1e-4 grid
        let mut oracle = (0.0, f64::INFINITY);
        for step in 0..=10_000 {
            let lambda = step as f64 * 1e-4;
            let value = loss(lambda);
            if value < oracle.1 {
                oracle = (lambda, value);
            }
        }
        assert!((oracle.0 - 0.3).abs() < 1e-12, "oracle minimum at {}", oracle.0);

        let (best, value) = optimize_lambda(loss, 1e-3, 60).unwrap();
        assert!((best - oracle.0).abs() <= 1e-3, "optimizer found {best}");
        assert!((value - oracle.1).abs() <= 1e-2);
    }

    #[test]
    fn normalized_spec_rejects_bad_weights() {
        let sum_off = FusionSpec::normalized(FusionStrategy::Concatenation, vec![0.6, 0.3]);
        assert!(matches!(sum_off, Err(FusionError::InvalidSpec { .. })));
        let above_one = FusionSpec::normalized(FusionStrategy::Concatenation, vec![1.5, -0.5]);
        assert!(matches!(above_one, Err(FusionError::InvalidSpec { .. })));
        let negative = FusionSpec::unnormalized(FusionStrategy::Linear, vec![1.0, -0.1]);
        assert!(matches!(negative, Err(FusionError::InvalidSpec { .. })));
        let ok = FusionSpec::normalized(FusionStrategy::Concatenation, vec![0.6, 0.4]);
        assert!(ok.is_ok());
    }

    #[test]
    fn optimize_reports_nan_lambda() {
        let result = optimize_lambda(|l| if l > 0.25 { f64::NAN } else { 0.0 }, 1e-3, 60);
        match result {
            Err(FusionError::NanLoss { lambda }) => assert!(lambda > 0.25),
            other => panic!("expected NanLoss, got {other:?}"),
        }
    }

    #[test]
    fn optimize_rejects_bad_budget() {
        assert!(matches!(
            optimize_lambda(|l| l, 1e-3, 7),
            Err(FusionError::BadBudget(7))
        ));
    }

    #[test]
    fn optimize_is_deterministic() {
        let f = |l: f64| (l - 0.3).powi(2) + 0.1 * (7.0 * l).sin();
        let a = optimize_lambda(f, 1e-4, 60).unwrap();
        let b = optimize_lambda(f, 1e-4, 60).unwrap();
        assert_eq!(a.0.to_bits(), b.0.to_bits());
        assert_eq!(a.1.to_bits(), b.1.to_bits());
    }
}
