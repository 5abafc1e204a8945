//! Adaptive nonlinear latent transformation at desk scale.
//!
//! This crate implements step-wise conditional editing of latent codes: a
//! transformer network emits a unit direction and a step size per step,
//! conditioned on target attributes; a RealNVP flow scores the trajectory
//! against the latent density; a frozen classifier ties edited codes to the
//! requested attributes through a mutual-information objective. A fully
//! synthetic differentiable world provides the latent prior, ground-truth
//! attribute oracles, and an identity-embedding analog, so every metric has
//! an exact reference.
//!
//! The crate is `no_std` (with `alloc`); all floating-point transcendentals
//! go through `libm`, which keeps results bit-identical across platforms and
//! build modes. IO, file formats, and the command-line driver live in the
//! companion `adatrans-cli` crate.

#![no_std]
#![deny(unsafe_code)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod error;
pub mod eval;
pub mod flow;
pub mod graph;
pub mod nn;
pub mod rng;
pub mod train;
pub mod transformer;
pub mod world;

pub use error::{Error, Result};
pub use graph::{grad_check, grad_check_sampled, Graph, Op, Tensor, TensorId};
pub use nn::{bind, Activation, Array, BoundParams, Linear, Mlp2, ParamId, ParamSet};
pub use rng::{Rng, Stream};
