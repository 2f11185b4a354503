//! Zero-shot classification with generative, attribute-gated class models.
//!
//! Each class is represented by an exponential-family distribution over
//! feature vectors. The distribution parameters of a class are not estimated
//! from that class's data alone: a ridge regressor (linear or kernelized)
//! maps class attribute vectors to distribution parameters, so classes that
//! were never observed at training time still receive a full generative
//! model. On top of the inductive fit, the crate provides transductive EM
//! refinement over unlabeled data and conjugate few-shot posterior updates.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod expfam;
pub mod fewshot;
mod linalg;
pub mod model;
pub mod persist;
pub mod regression;
pub mod synthgen;
pub mod transductive;

pub use dataset::{ClassId, UNLABELED};
pub use error::{Error, Result};
pub use model::{GfzslConfig, GfzslModel, RegressorKind};
