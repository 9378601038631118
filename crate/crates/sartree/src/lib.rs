//! A desk-scale draft-and-verify decoding engine: a frozen toy transformer
//! is adapted with trainable mask embeddings and prompt prefixes so that
//! one forward pass verifies the previous pass's draft tokens and drafts
//! the next batch, while the greedy output stays token-for-token identical
//! to plain autoregressive decoding.
//!
//! Module map:
//! - [`plan`]: flattened input layouts and attention matrices
//! - [`tree`]: draft candidate token trees and the verification walk
//! - [`model`]: the f64 transformer, forward/backward, base training
//! - [`decode`]: AR baseline and streamlined decoding loops with stats
//! - [`tune`]: self-generated data, sample slicing, soft-parameter tuning
//! - [`store`]: JSON checkpoints with checksums
//! - [`grammar`]: the synthetic byte-level demo corpus
//! - [`harness`]: CLI subcommands and artifact emission

pub mod decode;
pub mod grammar;
pub mod harness;
pub mod model;
pub mod plan;
pub mod store;
pub mod tree;
pub mod tune;
