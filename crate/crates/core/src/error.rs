use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("grid mismatch: {left} nodes vs {right} nodes")]
    GridMismatch { left: usize, right: usize },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("point {point:?} lies outside the box")]
    Domain { point: Vec<f64> },

    #[error("integration failed at t = {time}: step size underflow")]
    Integration { time: f64, last_state: Vec<f64> },

    #[error("dataset sample {sample}: {reason}")]
    Dataset { sample: usize, reason: String },

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("principal selection needs {needed} eigenpairs, only candidates {candidates:?} survive")]
    Selection { needed: usize, candidates: Vec<usize> },

    #[error("singular rho estimate: |boundary derivative * u0| = {denominator:e}; try another eigenpair")]
    SingularEstimate { denominator: f64 },

    #[error("(Lambda, b) is not controllable: controllability rank {rank} < {n}")]
    Uncontrollable { rank: usize, n: usize },

    #[error("resonance in component {component} at exponents {exponents:?}: divisor {divisor:e}")]
    Resonance {
        component: usize,
        exponents: Vec<u32>,
        divisor: f64,
    },

    #[error("unsupported structure: {0}")]
    UnsupportedStructure(String),

    #[error("singular Gramian: {0}")]
    SingularGramian(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Wraps an error with the name of the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    /// The innermost error, skipping stage wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }
}
