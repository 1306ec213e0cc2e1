//! Deterministic, IO-free core for training one small convolutional network
//! under two paradigms (dueling Q-learning in raycast 3D worlds, supervised
//! image classification) and scoring its layer activations against neuron
//! response matrices with a cross-validated linear map.
//!
//! Everything in this crate is a pure function of its inputs and seeds:
//! same seed, same bytes. File formats, image codecs and the CLI live in the
//! companion `nprl` crate; this crate only produces and consumes in-memory
//! buffers so it stays `no_std`-compatible (`alloc` required).

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod checkpoint;
pub mod dataset;
pub mod dqn;
pub mod elem;
pub mod env;
pub mod graph;
pub mod linalg;
pub mod mathx;
pub mod model;
pub mod ops;
pub mod optim;
pub mod predictivity;
pub mod reference;
pub mod rng;
pub mod supervised;
pub mod synth;
pub mod tensor;

pub use elem::Elem;
pub use graph::{Graph, VarId};
pub use tensor::Tensor;
