use thiserror::Error;

/// Errors raised anywhere in the market model, the solver or scenario loading.
///
/// The variants are grouped by the exit code the command-line tool maps them to;
/// see [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed network topology (self-loop, duplicate line, unknown bus, ...).
    #[error("invalid network structure: {0}")]
    Structure(String),

    /// Vector or matrix sizes that do not agree.
    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    /// Input file or field that does not follow the documented schema.
    #[error("schema violation: {0}")]
    Schema(String),

    /// Cross reference that points at something that does not exist.
    #[error("dangling reference: {0}")]
    Reference(String),

    /// A game-theoretic precondition (slope bound, step-size rule, N >= 2) does not hold.
    #[error("game condition violated: {0}")]
    GameCondition(String),

    /// Argument outside the domain where a function is defined.
    #[error("domain error: {0}")]
    Domain(String),

    /// Instance for which a ratio or bound is undefined.
    #[error("degenerate instance: {0}")]
    Degenerate(String),

    /// Convex program that cannot be satisfied; `block` names the constraint group.
    #[error("infeasible problem: {block}")]
    Infeasible { block: String },

    /// The numerical solver stopped without a certified optimum.
    #[error("solver failure in {block}: {detail}")]
    Solver { block: String, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code used by the `flexmarket` binary.
    ///
    /// 2 schema, 3 reference, 4 game condition, 5 solver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Schema(_)
            | Error::Structure(_)
            | Error::Dimension { .. }
            | Error::Csv(_)
            | Error::Json(_)
            | Error::Io(_) => 2,
            Error::Reference(_) => 3,
            Error::GameCondition(_) | Error::Domain(_) => 4,
            Error::Degenerate(_) | Error::Infeasible { .. } | Error::Solver { .. } => 5,
        }
    }

    pub(crate) fn dim(what: &'static str, expected: usize, got: usize) -> Self {
        Error::Dimension {
            what,
            expected,
            got,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
