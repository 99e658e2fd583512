//! Detection of material categories in a room from a single acoustic impulse
//! response (AIR).
//!
//! The pipeline:
//!
//! ```text
//! material list -> k-means categories -> shoebox AIR simulation -> framed log-power
//!              -> CRNN multi-label detector (and a Prony-IIR + linear SVM baseline)
//!              -> per-category precision / recall / F1
//! ```
//!
//! Hot loops run through [`par`], which uses rayon when the `parallel`
//! feature is enabled (the default) and plain iterators otherwise.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baseline;
pub mod clustering;
pub mod detector;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod features;
pub mod material_db;
pub mod nn;
pub mod par;
pub mod pipeline;
pub mod room_sim;
mod util;

pub use error::{Error, Result};
pub use util::derive_seed;
