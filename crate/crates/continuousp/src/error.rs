use thiserror::Error;

/// Crate-wide error type. Variants carry enough context to diagnose a failure
/// without a debugger; file loaders report 1-based line numbers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate lattice: |det L| = {det:.3e} A^3 is at or below {limit:.1e}")]
    DegenerateLattice { det: f64, limit: f64 },

    #[error("species list is empty")]
    EmptySpecies,

    #[error("atomic number {z} out of range 1..={max} at index {index}")]
    SpeciesOutOfRange { index: usize, z: u32, max: u32 },

    #[error("species and coordinate counts differ: {species} vs {coords}")]
    LengthMismatch { species: usize, coords: usize },

    #[error("invalid expansion multiplier {0}; must be >= 1")]
    InvalidMultiplier(u32),

    #[error("basis-change matrix is singular")]
    SingularTransform,

    #[error("lattice reduction did not converge within {0} iterations")]
    ReductionFailed(usize),

    #[error("non-finite energy: {0}")]
    NonFiniteEnergy(String),

    #[error("non-finite gradient: {0}")]
    NonFiniteGradient(String),

    #[error("chain initialization failed after {0} lattice draws")]
    InitFailed(usize),

    #[error("image enumeration box too large ({candidates} candidates); lattice is nearly degenerate")]
    ImageBoxOverflow { candidates: u64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid unit: {0}")]
    InvalidUnit(String),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("line {line}: invalid unit: {reason}")]
    Validation { line: usize, reason: String },

    #[error("unknown element symbol {0:?}")]
    UnknownElement(String),

    #[error("unsupported checkpoint format version {0}")]
    VersionMismatch(u32),

    #[error("tensor {name}: expected {expected}, found {found}")]
    ShapeMismatch {
        name: String,
        expected: String,
        found: String,
    },

    #[error("corrupt file {path}: {msg}")]
    CorruptFile { path: String, msg: String },

    #[error("training aborted: {0}")]
    TrainAborted(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
