//! Matrix-free maximum-likelihood exploratory factor analysis.

pub mod data;
pub mod em;
pub mod error;
pub mod fad;
pub mod lanczos;
pub mod lbfgsb;
mod linalg;
pub mod operator;
pub mod profile;
pub mod report;
pub mod selection;
pub mod sim;

pub use data::{DataSet, FileFormat};
pub use error::{FadError, Result};
pub use lanczos::{partial_svd, SingularTriplets, SvdConfig};
pub use operator::{diag_s, DenseOperator, ImplicitW, LinearOperator, ScaleMode};
