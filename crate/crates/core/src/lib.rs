//! Deep linear networks and the rank-constrained least-squares problem they
//! reduce to.
//!
//! The crate is organised bottom-up:
//!
//! - [`linalg`]: SVD, pseudo-inverse, numerical rank, principal angles, the
//!   Wedin check and Procrustes-aligned decompositions.
//! - [`model`]: the deep objective `1/2 ||W_H ... W_1 X - Y||_F^2`, its
//!   gradient and dense Hessian.
//! - [`shallow`]: the rank-constrained shallow objective, its reduction to a
//!   diagonal target, closed-form optima, block-spectrum analysis of
//!   candidate minima and the rank-preserving descent path.
//! - [`constructors`]: full-rank repair of layers, rank-restoring sweeps and
//!   factorisation of perturbed products into perturbed layers.
//! - [`harness`]: instance generation, gradient descent, critical-point
//!   classification and the landscape experiments.
//! - [`io`]: the plain-text matrix and weight-stack formats.

pub mod constructors;
mod error;
pub mod harness;
pub mod io;
pub mod linalg;
pub mod model;
pub mod shallow;

pub use error::{Error, Result};
pub use linalg::Matrix;
pub use model::{Dataset, NetworkDims, WeightStack};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub struct Introduction;
    #[doc = include_str!("../../../book/src/model.md")]
    pub struct Model;
    #[doc = include_str!("../../../book/src/shallow.md")]
    pub struct Shallow;
    #[doc = include_str!("../../../book/src/constructors.md")]
    pub struct Constructors;
    #[doc = include_str!("../../../book/src/experiments.md")]
    pub struct Experiments;
    #[doc = include_str!("../../../book/src/numerics.md")]
    pub struct Numerics;
    #[doc = include_str!("../../../book/src/cli.md")]
    pub struct Cli;
}
