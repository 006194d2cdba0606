//! Contrastive unpaired image-to-image translation in which the negatives
//! of the patch-wise contrastive loss come from noise-conditioned negative
//! generators trained adversarially against the encoder.
//!
//! Modules, bottom-up: [`losses`] holds every scalar objective,
//! [`networks`] the four parameter groups, [`sampling`] builds queries,
//! positives and negative banks, [`training`] runs the alternating
//! discriminator / negative-generator / encoder updates, [`data`] provides
//! unpaired datasets and [`eval`] the Fréchet distance, correspondence
//! score and similarity maps.

pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod networks;
pub mod plot;
pub mod sampling;
pub mod tensor_ext;
pub mod training;

pub use error::{Error, Result};
