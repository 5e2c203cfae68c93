//! Unpaired photo-to-caricature translation with a pair of cycle-consistent
//! generators, coarse and fine patch discriminators per domain, a frozen
//! perceptual feature loss, and auxiliary-noise input mixing.
//!
//! Everything runs on a small `f64` reverse-mode tape ([`diffcore`]) so that
//! every gradient can be checked against central finite differences.

pub mod data;
pub mod diffcore;
pub mod error;
pub mod eval;
pub mod losses;
pub mod networks;
pub mod noisemix;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
