//! Simulation and verification toolkit for the one-dimensional facilitated
//! exclusion process.

pub mod dynamics;
pub mod error;
pub mod exact;
pub mod fenwick;
pub mod harness;
pub mod hydro;
pub mod lattice;
pub mod measures;
pub mod observables;
pub mod quad;
pub mod stats;
pub mod testfn;

pub use dynamics::{simulate, Base, Observer, Path, RateModel, SimOptions};
pub use error::{FepError, Result};
pub use lattice::Configuration;
pub use measures::{CanonicalWindow, GrandCanonical, LocalFunction, PerturbedMeasure};
pub use testfn::{Embedding, Profile, TestFunction, TimeFactor};
