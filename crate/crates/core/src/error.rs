use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    Grid(String),

    #[error("invalid shock model: {0}")]
    Shock(String),

    #[error("shock value {0} is not in the support")]
    UnknownShock(f64),

    #[error("period {period} outside 1..={horizon}")]
    Period { period: usize, horizon: usize },

    #[error("agent {agent} outside 0..{agents}")]
    Agent { agent: usize, agents: usize },

    #[error("history has {got} records, expected {expected}")]
    HistoryLength { expected: usize, got: usize },

    #[error("action profile has {got} slots, the game has {expected} agents")]
    ProfileDimension { expected: usize, got: usize },

    #[error("agent {agent} does not participate in the supplied profile")]
    NotParticipating { agent: usize },

    #[error("task policy image {value} outside [{lo}, {hi}] (agent {agent}, period {period})")]
    ActionOutOfRange {
        agent: usize,
        period: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("action index {index} not in the menu of agent {agent} (menu size {size})")]
    NotInMenu {
        agent: usize,
        index: usize,
        size: usize,
    },

    #[error("invalid boundary profile: {0}")]
    Boundary(String),

    #[error("the jump transform needs a partition covering the whole grid")]
    NotFullCover,

    #[error("support sets are only comparable when the full-support check passes")]
    NoFullSupport,

    #[error("state derivative unavailable and finite differences are disabled")]
    NoDerivative,

    #[error("history tree would exceed {limit} nodes in exact mode; use --mode mc or shrink the instance")]
    TreeTooLarge { limit: usize },

    #[error("indifference solver failed: {0}")]
    Solver(String),

    #[error("scenario: {0}")]
    Scenario(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
