//! Dual-branch federated spatial-temporal forecasting.
//!
//! This crate holds everything that is pure computation: the dense matrix
//! type and its reverse-mode tape, the adaptive graph recurrent encoder, the
//! personalized/global pattern banks with the CLUB mutual-information bound,
//! server-side pattern sharing and prototype-guided parameter fusion, and the
//! wire codec for client/server messages. It is `no_std` (with `alloc`);
//! file IO, configuration and the command line live in `feddis-lab`.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod data;
pub mod disentangle;
pub mod encoder;
pub mod error;
pub mod init;
mod math;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod protocol;
pub mod tensor;
pub mod wire;

pub use error::{Error, Result};
pub use params::{ParamSet, Role};
pub use tensor::Matrix;
