//! Multi-type-attribute conversational recommendation: a simulated
//! environment and a hierarchical option-critic agent that asks and
//! recommends through chains of choices.

pub mod agent;
pub mod catalog;
pub mod env;
pub mod error;
pub mod eval;
pub mod graph_state;
pub mod kg_embed;
pub mod neural;
pub mod pipeline;
pub mod training;

pub use error::{Error, Result};
