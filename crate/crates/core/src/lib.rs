//! Attribution-driven refinement of a small attention text classifier.
//!
//! Each training epoch is followed by an extraction step: tokens whose
//! attributions drive validation errors on the target corpus are collected
//! and then penalized during the next epoch, either by masking them or by
//! regularizing their attributions toward zero.

pub mod attribution;
pub mod autodiff;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod extraction;
pub mod model;
pub mod refine;

pub use error::{Error, Result};
