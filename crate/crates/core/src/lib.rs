//! Stratified expert cloning for retention-oriented recommendation.
//!
//! Expert users are selected by a retention score and split into quantile
//! levels ([`stratify`]); a shared state encoder with one action head per level
//! is fit by behavior cloning plus an action-diversity regularizer
//! ([`policy`], [`train`]); at inference a per-level centroid bank routes each
//! user to an expert level ([`select`]). A synthetic retention simulator
//! ([`simenv`]) produces training trajectories and scores policies, and
//! [`harness`] wires everything into reproducible experiments.

pub mod harness;
pub mod numcore;
pub mod policy;
pub mod rng;
pub mod select;
pub mod simenv;
pub mod stratify;
pub mod train;

pub use numcore::Matrix;
