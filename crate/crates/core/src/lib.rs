//! Honest, double-sample, local-linear random forests for varying-coefficient
//! models `E[Y | X, Z] = Xᵀβ(Z)`.
//!
//! Each tree splits its subsample into a structure half, which picks the
//! partition of `Z`, and an estimation half, which fits OLS of `Y` on `X`
//! inside every leaf. The forest averages the leaf fits and supplies
//! pointwise sandwich covariances, confidence intervals and homogeneity
//! tests.

pub mod cli;
pub mod data;
pub mod error;
pub mod forest;
pub mod inference;
pub mod linalg;
pub mod seeding;
pub mod simulation;
pub mod tree;

pub use data::{load_csv, prepare, Dataset, Schema, TestPoint, ZKind};
pub use error::{Error, Result};
pub use forest::{fit_forest, BreadMatrix, Forest, ForestConfig, KRule, LambdaScale};
pub use inference::{glrt_test, lm_test, GlrtOptions};
pub use simulation::{generate, run_monte_carlo, DgpSpec, Model, Preset};

/// Runs `f` on a dedicated pool of `threads` workers, or on the global pool
/// when `threads` is `None`.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(0) => Err(Error::Config("thread count must be positive".into())),
        Some(t) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .map_err(|e| Error::Config(e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}
