pub mod drtts;
pub mod hypersearch;
pub mod modelclient;
pub mod prompts;
pub mod protocol;
pub mod reward;
pub mod scalar;
pub mod toolserver;
pub mod vector;

/// Reward settings in double precision.
pub type RewardConfig64 = reward::RewardConfig<f64>;
pub type ScoredRollout64 = reward::ScoredRollout<f64>;
pub type RolloutGroup64 = reward::RolloutGroup<f64>;
pub type TokenLogProbs64 = reward::TokenLogProbs<f64>;
pub type GrpoOutput64 = reward::GrpoOutput<f64>;
/// Stored embedding rows.
pub type Embedding = Vec<f32>;
