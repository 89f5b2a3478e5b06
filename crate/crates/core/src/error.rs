use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("vessel velocity {velocity} m/s exceeds the Nyquist limit {nyquist} m/s")]
    AboveNyquist { velocity: f64, nyquist: f64 },

    #[error("cannot split a cube with {0} angle(s) into a pair")]
    TooFewAngles(usize),

    #[error("SVD did not converge on a {rows}x{cols} Casorati matrix")]
    SvdNoConvergence { rows: usize, cols: usize },

    #[error("metric undefined: {0}")]
    MetricUndefined(&'static str),

    #[error("empty region of interest: {0}")]
    EmptyRoi(&'static str),

    #[error("batch norm has no running statistics (parameter {0}); train before inference")]
    Untrained(String),

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u8),

    #[error("truncated file: needed {needed} bytes, {available} available")]
    Truncated { needed: usize, available: usize },

    #[error("dimension overflow in header: {0:?}")]
    DimOverflow(Vec<u32>),

    #[error("config parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}
