//! Desk-scale laboratory for cooperative multi-agent deterministic policy
//! gradients.
//!
//! The crate trains ensembles of actor/critic pairs on a goal-conditioned
//! in-hand rotation task. Three algorithm families are supported:
//!
//! - `magcla`: every critic observes the full joint action, every actor
//!   additionally observes its neighbors' lagged actions,
//! - `maddpg`: full-joint-action critics, state-only actors,
//! - `ddpg`: a single agent controlling the whole action vector,
//!
//! each combined with either independent hindsight replay (`her`) or
//! synchronized hindsight replay (`sher`), where all agents update from one
//! shared sampled-and-relabeled minibatch per iteration.
//!
//! Everything is plain `f64` with hand-written forward/backward passes, so a
//! full training run is deterministic for a fixed seed.

pub mod agents;
pub mod env;
pub mod eval;
pub mod nn;
pub mod replay;
pub mod trainer;

pub use agents::{AgentPartition, Algo, AlgorithmVariant, Ensemble, ReplayMode, Role};
pub use env::{
    EnvConfig, Environment, MalfunctionMask, Observation, ReachConfig, ReachEnv, RotationEnv,
    SimState, StepOutcome, TerminalReason, Trial,
};
pub use nn::{AdamState, Gradients, MlpParams, OutputActivation};
pub use replay::{BatchRow, Episode, JointTransition, MinibatchSpec, ReplayBuffer, SampleConfig};
pub use trainer::{TrainConfig, TrainLog, TrainLogRow};

/// The crate-wide seedable rng. ChaCha keeps seeded streams identical
/// across platforms and releases, which the determinism contract relies on.
pub fn rng_from_seed(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}

/// Errors shared across the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("replay buffer is empty")]
    EmptyBuffer,
    #[error("minibatch spec is stale: episode {0} has been evicted")]
    StaleSpec(u64),
    #[error("inconsistent episode: {0}")]
    InconsistentEpisode(String),
    #[error("unknown agent id {0}")]
    UnknownAgent(usize),
    #[error("step on a terminal state")]
    TerminalState,
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
