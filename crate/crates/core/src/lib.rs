//! Data mixing for removing spurious correlations from linear heads, with the
//! synthetic regression theory and the verification harness built on it.

pub mod dataset;
pub mod error;
pub mod experiments;
pub mod groupeval;
pub mod io;
pub mod linmodel;
pub mod llr;
pub mod mixer;
pub mod rng;
pub mod synthdata;
pub mod theory;

pub use dataset::{Dataset, GroupId};
pub use error::{Error, Result};
