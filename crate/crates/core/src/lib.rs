// Numeric kernels index rows/columns directly; iterator rewrites hurt
// clarity there.
#![allow(clippy::needless_range_loop)]

//! Core library: dense matrix math, LoRA adapters, weighted adapter
//! fusion, a tiny trainable transformer, instruction/safety datasets, and
//! the evaluation metrics used to study how fusing a task adapter with a
//! safety adapter trades task capability against refusal behavior.

pub mod adapter;
pub mod container;
pub mod dataset;
pub mod eval;
pub mod fusion;
pub mod model;
pub mod rng;
pub mod tensor;

use serde::{Deserialize, Serialize};

/// Severity of a validation finding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Warning,
    Error,
}

/// One validation finding: a broken invariant or a suspicious-but-legal
/// condition, with optional context (module id, line number, ...).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    pub severity: Severity,
    pub context: Option<String>,
    pub message: String,
}

impl std::fmt::Display for Finding {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = match self.severity {
            Severity::Warning => "warning",
            Severity::Error => "error",
        };
        match &self.context {
            Some(ctx) => write!(f, "{tag} [{ctx}]: {}", self.message),
            None => write!(f, "{tag}: {}", self.message),
        }
    }
}
