//! Social-force crowd simulation and the prediction-aware navigation benchmark.

pub mod benchmark;
pub mod episode;
pub mod social_force;

pub use benchmark::{benchmark, crossing_scenario, crossing_suite, write_episode_csv, BenchmarkOutcome, BenchmarkSummary, EpisodeRow, NavigatorSummary};
pub use episode::{
    run_episode, AgentSpec, ConstantVelocityPredictor, EpisodeConfig, EpisodeResult, ModelPredictor, Navigator, Scenario,
    TrajectoryPredictor,
};
pub use social_force::{predictor_force, sf_step, SFParams, SimAgent};
