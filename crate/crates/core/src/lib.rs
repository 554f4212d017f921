//! Class-conditional adversarial domain adaptation for semantic segmentation.
//!
//! The crate is organised bottom-up:
//!
//! - [`datagen`]: procedurally generated source/target shape worlds and their on-disk format;
//! - [`labels`]: patch presence labels, pseudo-labels and uncertainty masks;
//! - [`losses`]: every segmentation and adaptation loss, with analytic gradients;
//! - [`nets`]: encoder, segmentation head and the two-branch discriminator;
//! - [`trainer`]: the alternating encoder/decoder vs. discriminator optimisation;
//! - [`eval`]: confusion matrices, IoU reports and the ablation ladder;
//! - [`gradcheck`]: finite-difference verification of the loss gradients.

pub mod datagen;
pub mod eval;
pub mod gradcheck;
pub mod labels;
pub mod losses;
pub mod nets;
pub mod trainer;
