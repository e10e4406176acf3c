pub mod covariates;
pub mod error;
pub mod grid;
pub mod krige;
pub mod laplace;
pub mod mesh;
pub mod model;
pub mod optim;
pub mod priors;
pub mod sim;
pub mod sparse;
pub mod spde;
pub mod vario;

pub use error::{Error, Result};
