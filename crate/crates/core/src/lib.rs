//! Numerical toolkit for Hamiltonians on co-rank-one distributions.
//!
//! The crate covers symbolic input ([`expr`]), horizontal curves and their
//! regularity ([`geometry`]), Hamiltonian flows ([`dynamics`]), symplectic
//! normal forms along orbits ([`normal_form`]), the linearized transition map
//! and its controllability ([`variational`], [`mane`]), closed-form matrix
//! identities for the bracket computations ([`formulas`]) and covector lifts
//! of horizontal curves ([`lifts`]).

// Index loops mirror the matrix formulas; `!(x > 0.0)` deliberately rejects NaN.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity)]

pub mod curve;
pub mod dynamics;
pub mod error;
pub mod expr;
pub mod formulas;
pub mod geometry;
pub mod lifts;
pub mod linalg;
pub mod mane;
pub mod normal_form;
pub mod ode;
pub mod series;
pub mod variational;

pub use error::{Error, Result};
