//! The chapters of `book/`, included as documentation so that `cargo test`
//! runs every example in the book.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/configurations.md")]
pub mod configurations {}

#[doc = include_str!("../../../book/src/measures.md")]
pub mod measures {}

#[doc = include_str!("../../../book/src/dynamics.md")]
pub mod dynamics {}

#[doc = include_str!("../../../book/src/fields.md")]
pub mod fields {}

#[doc = include_str!("../../../book/src/exact.md")]
pub mod exact {}

#[doc = include_str!("../../../book/src/hydro.md")]
pub mod hydro {}

#[doc = include_str!("../../../book/src/experiments.md")]
pub mod experiments {}
