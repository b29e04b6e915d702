//! Free-streaming transport on bounded phase spaces with abstract boundary
//! operators.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN

pub mod boundary;
pub mod criterion;
pub mod error;
pub mod geometry;
pub mod grid;
pub mod population;
pub mod quadrature;
pub mod resolvent;
pub mod scenario;
pub mod semigroup;
pub mod spectral;

pub use error::{Error, Result};
pub use geometry::{PhaseSpace, Vec3};
