use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("objective is not finite at the starting point {0:?}")]
    InfeasibleStart(Vec<f64>),

    #[error("bracket [{lo}, {hi}] does not straddle a sign change (g(lo) = {g_lo}, g(hi) = {g_hi})")]
    NoSignChange { lo: f64, hi: f64, g_lo: f64, g_hi: f64 },

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("shooting did not converge: {0}")]
    ShootingFailed(String),

    #[error("no steady state: discriminant {discriminant:.6e} > 0")]
    NoSteadyState { discriminant: f64 },

    #[error(
        "infeasible natural parameters (mu = {mu}, lambda = {lambda}): mu*R_tot - lambda*|sigma0|_1 = {margin:.6e}"
    )]
    Infeasible { mu: f64, lambda: f64, margin: f64 },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("optimizer did not converge: {0}")]
    NotConverged(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("tube {tube_id}: {source}")]
    Tube {
        tube_id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: line {line}: {message}")]
    Parse { path: String, line: u64, message: String },

    #[error("too few replicates: {0}")]
    TooFewReplicates(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn in_tube(self, tube_id: &str) -> Error {
        Error::Tube { tube_id: tube_id.to_string(), source: Box::new(self) }
    }
}
