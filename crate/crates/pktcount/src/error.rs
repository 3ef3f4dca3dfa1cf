use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown beacon id {0}")]
    UnknownBeacon(u32),

    #[error("aisle index {aisle} out of range (num_aisles = {num_aisles})")]
    UnknownAisle { aisle: usize, num_aisles: usize },

    #[error("stratum {0}: {1}")]
    Stratum(usize, String),

    #[error("design matrix is rank deficient (rank {rank} < {cols} columns)")]
    RankDeficient { rank: usize, cols: usize },

    #[error("sampler diagnostic: {0}")]
    Sampler(String),

    #[error("layout error: {0}")]
    Layout(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("malformed input at line {line}: {msg}")]
    Malformed { line: usize, msg: String },
}

pub type Result<T> = std::result::Result<T, Error>;
