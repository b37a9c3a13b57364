//! Interaction-guided reinforced fine-tuning for flow-matching action policies.
//!
//! The crate bundles a seeded 2D long-horizon manipulation simulator, automatic
//! interaction and reward annotation, a flow-matching policy whose sampling
//! noise is modulated by predicted interaction probability, a multi-head
//! critic, and the three training stages (supervised warm-up, offline
//! advantage-weighted regression, human-in-the-loop refinement).

pub mod checkpoint;
pub mod config;
pub mod critic;
pub mod demos;
pub mod episode;
pub mod error;
pub mod eval;
pub mod hil;
pub mod interaction;
pub mod nn;
pub mod plot;
pub mod policy;
pub mod reward;
pub mod sim;
pub mod store;
pub mod trainer;

pub use config::Config;
pub use error::{Error, Result};
