pub mod demos;
pub mod env;
pub mod error;
pub mod policy;
pub mod rng;
pub mod rollout;
pub mod schedule;
pub mod steering;
pub mod verifier;

pub use demos::{generate_expert_demos, DemoConfig};
pub use env::{Door, EnvConfig, EnvState, NavEnv, Outcome};
pub use error::{CoreError, Result};
pub use policy::{
    sample_chunk, sample_n_chunks, train_policy, DiffusionPolicy, NoiseModel, PolicyArch, PolicySpec,
    PolicyTrainConfig, PolicyTrainReport,
};
pub use rollout::{
    collect_rollouts, is_success, run_episode, ChunkSource, ContrastiveSampler, RolloutDataset, Split, Trajectory, TrajectoryMeta, Transition,
    TransitionRef,
};
pub use schedule::{NoiseSchedule, ScheduleParams};
pub use verifier::{
    compute_q_target, train_verifier, Verifier, VerifierKind, VerifierNet, VerifierTrainConfig,
    VerifierTrainReport,
};
pub use steering::{
    bon_select, cg_sample, steered_rollout, BonChoice, SteeredPolicy, SteeringConfig, SteeringMode,
};
