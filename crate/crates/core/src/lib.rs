//! Head-shoulder adaptive attention (HAA) person re-identification.
//!
//! A self-contained pipeline: a small reverse-mode autodiff engine
//! ([`tensor`]), the network layers ([`nn`]) and model ([`model`]), training
//! losses ([`losses`]), a procedural dataset generator ([`data`]), the staged
//! training procedure ([`train`]) and single-query retrieval evaluation
//! ([`eval`]), plus a finite-difference gradient suite ([`verify`]).

pub mod error;
pub mod tensor;
pub mod nn;
pub mod model;
pub mod losses;
pub mod data;
pub mod rng;
pub mod train;
pub mod eval;
pub mod verify;

pub use error::{Error, Result};
