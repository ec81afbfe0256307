//! Capsule routing by pairwise agreement.
//!
//! The crate is `no_std` (it needs `alloc`) and carries the numeric side of the
//! project: a small dense [`tensor`], the agreement mechanisms in [`routing`]
//! (linearized pairwise agreement, its O(n²) pair-enumeration oracle and the
//! iterative dynamic-routing baseline), the capsule-layer machinery in
//! [`capsnet`], a fixed-graph reverse-mode [`autodiff`] tape with a
//! finite-difference checker, synthetic instance generators in [`data`] and the
//! property suites in [`verify`].
//!
//! File formats, timing and the command-line front end live in the companion
//! `capsroute` crate.
#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod capsnet;
pub mod data;
pub mod optim;
pub mod routing;
pub mod tensor;
pub mod verify;

mod math;

pub use capsnet::{CapsuleSet, MarginLossParams, TransformWeights};
pub use routing::{DynamicRoutingConfig, PredictionTensor, RoutingResult};
pub use tensor::Tensor;
