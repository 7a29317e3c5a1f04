//! Shared numerical machinery: dense and sparse matrices, a reverse-mode
//! tape over a fixed operation set, the Adam optimizer, gradient checking,
//! k-means and Hungarian matching.
//!
//! Everything is double precision. Losses assembled on the [`tape::Tape`]
//! are validated against central finite differences via
//! [`gradcheck::finite_diff_check`].

pub mod dense;
pub mod gradcheck;
pub mod hungarian;
pub mod kmeans;
pub mod params;
pub mod rng;
pub mod sparse;
pub mod tape;

pub use dense::{softmax_rows, DenseMatrix};
pub use gradcheck::finite_diff_check;
pub use hungarian::hungarian;
pub use kmeans::{kmeans, KmeansResult};
pub use params::{adam_step, AdamConfig, ParameterSet};
pub use sparse::CsrMatrix;
pub use tape::{bind_params, sharpen_target, soft_assign_forward, BoundParams, Tape, Var};

/// Floor for every `log(x)` evaluated inside a loss; `log(1 - x)` uses the
/// same floor on `1 - x`.
pub const LOG_CLAMP: f64 = 1e-12;
