//! B-spline copulas fitted by a SCAD-penalized pseudo-likelihood EM algorithm.
//!
//! The copula density is `c(u) = sum_c r_c prod_j phi_{j,c_j}(u_j)` where each
//! `phi_{j,k}` is a B-spline basis function normalized to integrate to one.
//! The parameter tensor `R` is nonnegative and its sums along every axis
//! equal the basis integrals `q` of that axis, which makes `c` a proper
//! copula density.

pub mod basis;
pub mod copula;
pub mod em;
pub mod error;
pub mod fixtures;
pub mod margins;
pub mod quadrature;
pub mod sample;
pub mod select;
pub mod study;
mod par;

pub use basis::BasisSystem;
pub use copula::{CopulaModel, ParamTensor};
pub use em::{fit, fit_nd, FitConfig, FitReport, ScadParams};
pub use error::{Error, Result};
pub use margins::{pseudo_observations, MarginalModel, PseudoSample};
pub use sample::{rejection_sample, SamplerConfig};
