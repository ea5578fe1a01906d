//! peft-forge: a parameter-efficient fine-tuning workbench.
//!
//! The crate mounts a zoo of PEFT modules — bottleneck adapters, a
//! hypernetwork that generates adapter weights, Kronecker-factored (PHM/LPHM)
//! adapters, LoRA deltas, and a soft-prompt network — on a small frozen
//! encoder-decoder transformer, and verifies their mechanics end to end:
//! finite-difference gradient checks, exact parameter accounting against a
//! BART-base-like reference descriptor, weight-sharing across tasks, and
//! multi-task training on a synthetic scene benchmark.
//!
//! Start with the runnable examples (`cargo run --example audit_table1`,
//! `cargo run --example train_single_adapter`) or the `peft-forge` binary.

pub mod backbone;
pub mod cli;
pub mod error;
pub mod multitask;
pub mod numerics;
pub mod peft;
pub mod rng;
pub mod sharing;

pub use error::{Error, Result};
