//! The guide's chapters as modules, so `cargo test` runs every snippet.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/phase-space.md")]
pub mod phase_space {}

#[doc = include_str!("../../../book/src/boundary-operators.md")]
pub mod boundary_operators {}

#[doc = include_str!("../../../book/src/criterion.md")]
pub mod criterion {}

#[doc = include_str!("../../../book/src/semigroup.md")]
pub mod semigroup {}

#[doc = include_str!("../../../book/src/resolvent.md")]
pub mod resolvent {}

#[doc = include_str!("../../../book/src/spectral.md")]
pub mod spectral {}

#[doc = include_str!("../../../book/src/population.md")]
pub mod population {}

#[doc = include_str!("../../../book/src/scenarios.md")]
pub mod scenarios {}

#[doc = include_str!("../../../README.md")]
pub mod readme {}
