//! Error type shared by all modules.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("rank mismatch: expected {expected}, got {found}")]
    RankMismatch { expected: usize, found: usize },

    #[error("invalid lattice: {0}")]
    InvalidLattice(String),

    #[error("invalid stability data: {0}")]
    InvalidStability(String),

    #[error("singular Kontsevich-Soibelman transformation: X_gamma = 1 for charge {0:?}")]
    SingularTransform(Vec<i64>),

    #[error("singular form: {0}")]
    SingularForm(String),

    #[error("finite-difference stencil left the domain at {0:?}")]
    Stencil(Vec<f64>),

    #[error("point lies on a wall of marginal stability: {0}")]
    Wall(String),

    #[error("evaluation point too close to a BPS ray (relative distance {0:.3e})")]
    RayProximity(f64),

    #[error("TBA iteration diverged: |X| = {0} at a ray node")]
    Divergence(f64),

    #[error("TBA did not converge after {} iterations (last residual {:.3e})", .history.len(), .history.last().copied().unwrap_or(f64::NAN))]
    NonConvergence { history: Vec<f64> },

    #[error("singular point: {0}")]
    SingularPoint(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("I/O error at {path}: {message}")]
    Io { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;
