//! Certifiably correct estimation over factor graphs.
//!
//! Pose-graph, landmark and range-aided SLAM problems are posed as factor
//! graphs whose variables live on rotation, translation and unit-bearing
//! domains. Their convex (Shor) relaxation is solved by locally optimizing
//! the rank-`p` Burer–Monteiro factorization, which is itself a factor graph
//! with the same connectivity and *lifted* variables (Stiefel, sphere and
//! Euclidean). Each local solution is either certified globally optimal from
//! block-separable Lagrange multipliers, or escaped along a negative
//! curvature direction of the certificate matrix at rank `p + 1`.
//!
//! The pipeline, in order of data flow:
//!
//! * [`graph`]: variables, factors, validation, lifting and initialization.
//! * [`objective`]: the sparse data matrix `Q`, objective evaluation and the
//!   residual/Jacobian structure used by the optimizer.
//! * [`optimizer`]: Riemannian Levenberg–Marquardt on the lifted graph.
//! * [`certifier`]: multipliers, certificate matrix and minimum eigenpair.
//! * [`staircase`]: the rank-incrementing driver, rounding and refinement.
//! * [`io`]: g2o datasets, synthetic problems and solve reports.

pub mod certifier;
pub mod error;
pub mod graph;
pub mod io;
mod linsolve;
pub mod manifolds;
pub mod objective;
pub mod optimizer;
pub mod par;
pub mod sparse;
pub mod staircase;

pub use error::{Error, Result};
