//! Differentially private conditional GAN training engine.
//!
//! The crate trains a two-layer conditional GAN under (ε, δ)-differential
//! privacy: per-example discriminator gradients are clipped (real and fake
//! contributions separately, or jointly for the baseline mode), summed, and
//! perturbed with Gaussian noise, while a Rényi-DP accountant tracks the
//! spend and halts training when the budget is exhausted. Synthetic data is
//! persisted in MNIST's IDX container and scored by downstream classifiers
//! (logistic regression / MLP) with macro one-vs-rest AuROC.

pub mod accountant;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod dp;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod nn;
pub mod rng;
pub mod train;

pub use accountant::{AccountantState, MechanismParams, PrivacySpend};
pub use checkpoint::Checkpoint;
pub use config::{LrSchedule, RunManifest, TrainConfig};
pub use data::LabeledDataset;
pub use dp::{AdamState, ClipNorm, DpMode};
pub use error::{Error, Result};
pub use eval::{ClassifierKind, ClassifierSpec, EvalRow, EvalTable, RocResult};
pub use linalg::Matrix;
pub use nn::{ForwardTrace, MlpParams, PerExampleGradSet};
pub use rng::{RngStream, StreamState};
pub use train::{GanPair, HaltReason, LossSample, StreamStates, TrainReport};
