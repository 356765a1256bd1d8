//! Intermediate-domain mixing for unsupervised domain adaptive retrieval.
//!
//! The crate is `no_std` (with `alloc`): it holds the differentiation tape,
//! the staged network, the intermediate domain module, every loss, pseudo
//! labelling, the cross-batch memory, synthetic data, retrieval metrics and
//! the joint training loop. File formats and the command line live in the
//! `idm-cli` crate.
#![no_std]

extern crate alloc;

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod idm;
pub mod losses;
pub mod memory;
pub mod network;
pub mod optim;
pub mod params;
pub mod pseudo_label;
pub mod rng;
pub mod trainer;

pub use autodiff::{Tape, Tensor, Var};
pub use error::{Error, Result};
