//! Information-gain READ/WRITE policies for simultaneous translation, trained
//! and evaluated against a synthetic oracle whose probabilities are known in
//! closed form.
//!
//! The pipeline is: [`synth`] generates utterances and the oracle, [`trainer`]
//! fits a [`policy`] head with the objectives in [`losses`], [`stream`] runs
//! chunked streaming inference, and [`metrics`] scores the emission logs.
//! [`experiment`] ties the stages to files on disk for the CLI.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod experiment;
pub mod losses;
pub mod math;
pub mod metrics;
pub mod policy;
pub mod stream;
pub mod synth;
pub mod trainer;

pub use error::{LabError, Result};
pub use losses::{LabeledExample, LossWeights, Objective};
pub use policy::{PolicyConfig, PolicyInput, PolicyParams, PolicyVariant};
pub use synth::{OracleModel, SynthConfig, Utterance};
