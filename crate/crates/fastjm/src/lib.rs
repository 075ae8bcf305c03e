//! Joint modeling of longitudinal and competing-risk survival data.

pub mod bench;
pub mod em;
pub mod error;
pub mod inference;
pub mod io;
pub mod linalg;
pub mod lmm;
pub mod model;
pub mod naive;
pub mod quadrature;
pub mod scan;
pub mod simulate;

pub use error::{Error, Result};
