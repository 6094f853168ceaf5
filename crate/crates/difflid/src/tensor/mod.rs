//! Tensors, reverse-mode autodiff, optimizers, RNG, and tensor/checkpoint IO.

pub mod core;
pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod layers;
pub mod optim;
pub mod rng;

mod attention;
mod conv;
mod norm;
mod ops;

pub use core::Tensor;
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use layers::{Conv2dLayer, GroupNormLayer, Linear, Parameter};
pub use optim::Adam;
pub use rng::{derive_seed, Rng};
