//! Cluster-guided consistent-subject generation on a toy latent world.
//!
//! A small conditional denoiser is trained on a hierarchical Gaussian-mixture
//! world. A projector is then tuned from a single chosen sample so that
//! guided sampling concentrates in that sample's identity sub-cluster. The
//! world has closed-form densities, so every guidance formula can be checked
//! against exact scores.

pub mod diffusion;
pub mod error;
pub mod eval;
pub mod infer;
pub mod io;
pub mod numcore;
pub mod par;
pub mod rng;
pub mod semantics;
pub mod tune;
pub mod world;

pub use error::{Error, Result};
