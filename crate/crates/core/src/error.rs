use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("non-finite value produced by {0}")]
    Numeric(String),
    #[error("degenerate batch: {op} needs at least 2 rows, got {rows}")]
    DegenerateBatch { op: &'static str, rows: usize },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("division guard tripped in {0}: total weight is zero")]
    DivisionGuard(&'static str),
    #[error("degenerate target: {0}")]
    DegenerateTarget(String),
    #[error("storage error: {0}")]
    Storage(#[from] std::io::Error),
    #[error("format error: {0}")]
    Format(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("training diverged at step {step} (epoch {epoch}, batch {batch}): {cause}; components {components:?}; views {views:?}")]
    Diverged {
        step: u64,
        epoch: usize,
        batch: usize,
        views: Vec<usize>,
        components: Option<crate::objective::LossBreakdown>,
        cause: String,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
