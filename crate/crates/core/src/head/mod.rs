//! Set-prediction head and its losses.

pub mod decoder;
pub mod hungarian;
pub mod loss;

pub use decoder::{decode_memory, level_positions, DetectionHead, HeadConfig};
pub use hungarian::{hungarian_match, MatchResult};
pub use loss::{
    box_loss, cost_matrix, hungarian_loss, hungarian_loss_graph, match_cost, DetectionSet,
    GroundTruth, LossWeights,
};
