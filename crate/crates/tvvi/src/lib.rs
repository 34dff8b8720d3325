//! Variational inequalities of the second kind with a discrete total-variation
//! term: lower-level solvers, sensitivity analysis (directional derivatives,
//! Bouligand and Clarke elements), stationarity diagnostics and a nonsmooth
//! trust-region method for optimal control, plus the Bingham pipe-flow
//! experiment built on top of them.

pub mod bingham;
pub mod control_tr;
pub mod error;
pub mod io;
pub mod linalg;
pub mod sensitivity;
pub mod solvers;
pub mod stationarity;
pub mod vi_core;

pub use error::{Error, Result};
pub use linalg::CsrMatrix;
pub use vi_core::{ComplementarityResiduals, ConeMode, ConeSpec, IndexSets, VIProblem, VISolution};
