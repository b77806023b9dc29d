use thiserror::Error;

pub type Result<T, E = FepError> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FepError {
    #[error("window of half-width {half_width} does not fit in a ring of {len} sites")]
    WindowTooLarge { half_width: usize, len: usize },
    #[error("density {0} is outside the supercritical range (1/2, 1)")]
    InvalidDensity(f64),
    #[error("word {0} contains two adjacent empty sites")]
    NonErgodicWord(String),
    #[error("no ergodic word of length {len} with {particles} particles fits boundaries ({left}, {right})")]
    EmptySupport {
        len: usize,
        particles: usize,
        left: u8,
        right: u8,
    },
    #[error("perturbed density leaves (1/2, 1): {0}")]
    DensityOutOfRange(String),
    #[error("local function support half-width {0} exceeds the exact enumeration limit")]
    SupportTooWide(usize),
    #[error("initial configuration is not in the ergodic component")]
    NonErgodicStart,
    #[error("configuration left the ergodic component after {0} events")]
    ErgodicityLost(u64),
    #[error("time horizon must be positive, got {0}")]
    HorizonNonPositive(f64),
    #[error("test function support spans {sites} sites, ring has {len}")]
    SupportExceedsRing { sites: usize, len: usize },
    #[error("no ergodic state with {particles} particles on a ring of {len} sites")]
    EmptyStateSpace { len: usize, particles: usize },
    #[error("generator is reducible: {closed_classes} closed classes among {classes} communicating classes")]
    Reducible { classes: usize, closed_classes: usize },
    #[error("ring size {0} is beyond the exact enumeration limit")]
    RingTooLarge(usize),
    #[error("unstable grid: {0}")]
    UnstableGrid(String),
    #[error("coefficient cross-check failed for {name}: closed form {closed}, enumeration {enumerated}")]
    CoefficientMismatch {
        name: &'static str,
        closed: f64,
        enumerated: f64,
    },
    #[error("invalid configuration text: {0}")]
    Parse(String),
    #[error("invalid experiment configuration: {}", .0.join("; "))]
    ConfigInvalid(Vec<String>),
    #[error("i/o: {0}")]
    Io(String),
}

impl From<std::io::Error> for FepError {
    fn from(e: std::io::Error) -> Self {
        FepError::Io(e.to_string())
    }
}

impl From<csv::Error> for FepError {
    fn from(e: csv::Error) -> Self {
        FepError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for FepError {
    fn from(e: serde_json::Error) -> Self {
        FepError::Io(e.to_string())
    }
}
