//! Personalized attractive selling-point prediction for sponsored search.
//!
//! The crate contains the basic, multi-task and augmented neural models with
//! hand-derived gradients, the training strategies that interleave or chain the
//! SF-click (main) and ad-click (auxiliary) tasks, a planted-preference synthetic
//! world that stands in for real search logs, offline and A/B evaluation, and the
//! serving path that rewrites ad titles with the top-scoring selling points.

pub mod cli;
pub mod data_model;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod gradcheck;
pub mod network;
pub mod numeric;
pub mod serving;
pub mod training;
pub mod world;

pub use error::{Error, Result};
