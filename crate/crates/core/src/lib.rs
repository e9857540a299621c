//! Numerical toolkit for non-reversible Finsler geometry with a focus on
//! Randers metrics and the Fermat metric of standard stationary spacetimes.

pub mod causality;
pub mod cli;
pub mod config;
pub mod error;
pub mod expr;
pub mod fields;
pub mod fermat;
pub mod finsler;
pub mod variational;

pub use error::{Error, Result};
