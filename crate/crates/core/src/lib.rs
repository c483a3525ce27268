//! Stage-of-decay (SOD) image classification and interrater reliability.
//!
//! The crate covers the whole pipeline: label schemas for the Megyesi and
//! Gelderman scoring methods, dataset manifests, two-step transfer-learning
//! training, evaluation with per-class and macro-averaged F1, and interrater
//! studies scored with Fleiss' kappa. An HTTP service and the `sodkit` CLI sit
//! on top.

pub mod dataset;
pub mod error;
pub mod evaluator;
pub mod imaging;
pub mod interrater;
pub mod labelspec;
pub mod service;
pub mod trainer;

pub use error::{Error, Result};
pub use labelspec::{ClassLabel, LabelSchema, Region, ScoringMethod};
