//! Desk-scale laboratory for studying unlearning versus obfuscation in
//! language models.
//!
//! The pipeline generates a synthetic persona world ([`worldgen`]), trains a
//! small language model on it ([`lm`]), removes knowledge about target persons
//! with distribution flattening over multiple-choice questions or one of the
//! obfuscation baselines ([`unlearn`]), and probes the result with open-ended,
//! Yes-No and multiple-choice questions ([`probes`], [`metrics`]).
//! [`harness`] wires the stages into a CLI with run directories and reports.

pub mod harness;
pub mod lm;
pub mod metrics;
pub mod probes;
pub mod seeds;
pub mod unlearn;
pub mod vocab;
pub mod worldgen;
