use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("non-finite input: {0}")]
    NonFinite(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("invalid measure: {0}")]
    InvalidMeasure(String),
    #[error("rebirth loop exceeded {cap} attempts (step {step}, slot {slot})")]
    RebirthLoopCap { cap: u64, step: u64, slot: u64 },
    #[error("grid kernel undersampled: sigma {sigma} < 2 * cell width {cell_width}")]
    Undersampled { sigma: f64, cell_width: f64 },
    #[error("surviving mass {0:e} below underflow threshold")]
    MassUnderflow(f64),
    #[error("problem size {size} exceeds solver limit {limit}")]
    SizeGuard { size: usize, limit: usize },
    #[error("rate fit refused: {0}")]
    FitRefused(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
