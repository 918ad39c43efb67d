//! Joint selection of fixed and random effects in high-dimensional linear
//! mixed models via l1-penalized multicycle ECM.

pub mod blup;
pub mod cli;
pub mod ecm;
pub mod error;
pub mod io;
pub mod linalg;
pub mod model;
pub mod oracle;
pub mod penalized_ls;
pub mod simgen;
pub mod tuning;

pub use error::{Error, Result};
