//! A framework-free implementation of the Espresso fixed-length video
//! projector together with baseline projectors, a synthetic
//! needle-in-a-haystack benchmark, an analytic cost model and the
//! correlation statistics used to study compression rates.

pub mod attention;
pub mod cli;
pub mod costmodel;
pub mod error;
pub mod files;
pub mod params;
pub mod projectors;
pub mod synthbench;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
