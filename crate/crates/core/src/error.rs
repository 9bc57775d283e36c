use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum Error {
    #[error("bit width {0} outside [1, 64]")]
    WidthOutOfRange(u32),

    #[error("metadata mismatch: {0}")]
    MetaMismatch(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("both shares belong to the same party")]
    SameParty,

    #[error("mixed parties in a local operation")]
    MixedParties,

    #[error("invalid conversion: {0}")]
    InvalidConversion(String),

    #[error("accumulator of {have} bits cannot hold products needing {need} bits")]
    AccumulatorOverflow { have: u32, need: u32 },

    #[error("OT messages differ in length ({0} vs {1})")]
    OtLengthMismatch(usize, usize),

    #[error("session is closed")]
    SessionClosed,

    #[error("negative charge of {0} bits")]
    NegativeCharge(i64),

    #[error("unsupported Winograd configuration F({m}x{m}, {r}x{r})")]
    UnsupportedTile { m: usize, r: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("runtime invariant violated: {0}")]
    Invariant(String),

    #[error("budget {budget} infeasible; the minimum feasible budget is {min_budget}")]
    Infeasible { budget: u64, min_budget: u64 },

    #[error("schema version {found} not supported (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
