//! Engine for training and evaluating recommenders that reason over a user's
//! interaction history with learned NOT/AND/OR neural modules.
//!
//! A user's history compiles into a logical expression; the expression is
//! assembled into a differentiable network; truth is cosine proximity of the
//! final event vector to a fixed anchor. Training pairs a ranking loss with
//! logical-law regularizers; evaluation ranks each held-out item against 100
//! sampled candidates.

pub mod adam;
pub mod batch;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod expr;
pub mod gradcheck;
pub mod manifest;
pub mod modules;
pub mod params;
pub mod reg;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{NcrError, Result};
