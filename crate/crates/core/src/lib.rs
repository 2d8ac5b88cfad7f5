//! Core of the targeted downstream-agnostic attack lab.
//!
//! Everything here is pure computation over in-memory values: a small
//! reverse-mode differentiation engine ([`graph`]), the procedural Shapes10
//! dataset and augmentation ([`data`]), the fixed encoder / generator / head
//! architectures ([`models`]), encoder pretraining ([`pretrain`]), the
//! perturbation-generator attack ([`attack`]) and downstream measurement
//! ([`eval`]).
//!
//! The crate is `no_std` + `alloc` unless the `std` feature is enabled. The
//! `parallel` feature spreads per-sample work over rayon; results are
//! bit-identical with and without it because every reduction happens in a
//! fixed order over fixed-size sample groups.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod adam;
pub mod attack;
pub mod data;
pub mod error;
pub mod eval;
pub mod graph;
pub mod models;
pub mod pretrain;
pub mod rng;
pub mod scalar;
pub mod tensor;

mod conv;
mod par;

pub use adam::{Adam, AdamConfig};
pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use rng::SplitMix64;
pub use scalar::Scalar;
pub use tensor::Tensor;
