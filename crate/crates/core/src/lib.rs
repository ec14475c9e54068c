//! Stochastic calculus on the space of real n×n matrices.
//!
//! The matrix space carries the Hilbert–Schmidt inner product
//! `⟨A, B⟩ = trace(AᵀB)`. On top of it this crate provides:
//!
//! * [`matspace`]: dense square matrices, block matrices and the products
//!   used by the matrix Itô formula.
//! * [`brownian`]: reproducible sampling of matrix Brownian motion, one
//!   scalar Brownian motion per entry.
//! * [`integrator`]: Itô integrals `∫ V dB` with left matrix multiplication,
//!   quadratic variation and the isometry `E‖∫V dB‖² = n ∫ E‖V‖² dt`.
//! * [`sde`]: Euler–Maruyama and Picard solvers for
//!   `dX = b(t, X) dt + σ(t, X) dB`, coefficient truncation and moment bounds.
//! * [`calculus`]: gradients, block Hessians, Taylor remainders and the Itô
//!   generator of scalar fields on matrices.
//! * [`fxmarket`]: bid/ask exchange-rate matrices, CSV ingestion, estimation
//!   and simulation.

pub mod brownian;
pub mod calculus;
pub mod error;
pub mod fxmarket;
pub mod integrator;
pub mod matspace;
pub mod sde;
pub mod stats;

pub use error::{Error, Result};
pub use matspace::{BlockMatrix, SquareMatrix};
