//! Joint rain generation and removal via disentangled image translation.
//!
//! A rainy image is modeled as `O = B + R` (clean background plus additive
//! rain layer). Two removal networks (`F_s`, `F_r`) decompose rainy images
//! into backgrounds, two generation networks (`G_s`, `G_r`) translate rain
//! layers between a "synthetic" and a "real" rain domain, and three PatchGAN
//! discriminators keep backgrounds and generated rainy images on-distribution.
//! The S2R/R2S translation modules chain disentangle -> translate -> entangle
//! so that every intermediate obeys the additive model exactly.
//!
//! The crate ships a procedural two-domain rain synthesizer so the whole
//! domain-gap experiment (training, ablations, t-SNE rain-layer analysis)
//! runs in minutes on a CPU. See the `cli` module for the command-line entry
//! points: `synth | train | derain | generate | analyze`.

pub mod autodiff;
pub mod cli;
pub mod datasets;
pub mod error;
pub mod eval;
pub mod networks;
pub mod pipeline;
pub mod rainsynth;
pub mod imaging;
pub mod losses;
pub mod seed;
pub mod trainer;
pub mod tsne;

pub use error::{Error, Result};
