//! Dual-branch composed image retrieval at desk scale.
//!
//! A detail-oriented branch and a global matching branch encode a
//! (reference image, modification text) query; an adaptive compositor fuses
//! the two. Everything needed to train and evaluate the model on procedural
//! data lives here: data generation, encoders, contrastive losses, the
//! compositor, the three-stage trainer and the retrieval harness.

pub mod compositor;
pub mod data;
pub mod encoders;
pub mod error;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod retrieval;
pub mod training;

pub use error::{Error, Result};
