//! Single-shot fair representation learning.
//!
//! One encoder maps data to a bitplane code whose visible precision is set
//! at test time by a scalar `β ∈ [0, 1]`: larger `β` hides more trailing
//! bits, lowering both the rate of the code and the information it keeps
//! about a sensitive attribute. The crate contains the quantizer, a
//! β-conditioned mixture-of-logistics rate model, the encoder/decoder and
//! its trainer, exact finite-alphabet information oracles, dataset loaders,
//! and the evaluation harness (adversarial MI audits, unfairness-distortion
//! curves, AUFDC, bit disparity).

mod binio;
pub mod data;
pub mod entropy_model;
pub mod error;
pub mod evaluation;
pub mod info;
pub mod model;
pub mod nn;
pub mod quantizer;
pub mod rng;

pub use error::{Error, Result};
