//! Small query-based detector: convolutional backbone, variant-specific
//! encoder, cross-attention decoder, Hungarian matching and set loss.

mod backbone;
mod config;
mod loss;
mod matching;
mod model;

pub use backbone::{backbone_forward, BackboneParams, FeatureMap, STAGES};
pub use config::{AuxInput, DetectorConfig, LossWeights, Variant};
pub use loss::{detection_loss, mean_giou, LossTerms};
pub use matching::{hungarian_match, match_costs, solve_assignment, MatchResult};
pub use model::{
    aux_image, decode, encode, encode_with_weather, tokens, DetectionOutput, Detector, Forward, QueryPrediction,
    SampleLoss, PIXEL_MEAN,
};
