//! Circuit discovery over an edge-gated transformer: edge attribution
//! patching, hard-concrete edge pruning, and the hybrid pipeline that seeds
//! pruning from attribution scores.

pub mod autodiff;
pub mod datagen;
pub mod eap;
pub mod error;
pub mod eval;
pub mod graph;
pub mod hap;
pub mod io;
pub mod model;
pub mod optim;
pub mod prune;

pub use error::{Error, Result};
