//! Multifractal-guided masked autoencoder.
//!
//! Patches are scored by the Renyi entropy of their intensity histograms,
//! the highest-entropy patches are fed to a ViT encoder, and a mirrored
//! decoder reconstructs the rest. The pretrained encoder is then fine-tuned
//! for classification.

pub mod dataio;
pub mod error;
pub mod mae;
pub mod masker;
pub mod mfcore;
pub mod numerics;
pub mod patching;
pub mod pipeline;
pub mod selfcheck;

pub use error::{Error, Result};
pub use masker::{MaskPlan, MaskPolicy, PatchScores};
pub use patching::{ImageBuffer, PatchGrid};
