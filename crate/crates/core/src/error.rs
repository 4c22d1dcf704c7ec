use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Configuration is missing a field or has an ill-typed one.
    #[error("configuration schema error: {0}")]
    Schema(String),
    /// Configuration parses but describes an impossible world.
    #[error("infeasible scenario: {0}")]
    Infeasible(String),
    #[error("ground point is below the satellite's horizon (elevation {elevation_deg:.3} deg)")]
    Horizon { elevation_deg: f64 },
    #[error("argument out of domain: {0}")]
    Domain(String),
    #[error("cell {0} is not illuminated by any beam")]
    NotServed(usize),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("length mismatch: {0}")]
    Length(String),
    #[error("episode is over (slot {slot} of {horizon})")]
    EpisodeDone { slot: usize, horizon: usize },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
