//! Feature ingestion, color features, synthetic data and persistence.

pub mod checkpoint;
pub mod codebook;
pub mod export;
pub mod features;
pub mod synth;

pub use checkpoint::{load_model, save_model};
pub use export::{load_heatmaps, save_heatmaps, HeatMapRecord, StateRecord};
pub use features::{load_feature_bags, save_feature_bags};
pub use synth::{synth_generate, SyntheticData, SyntheticSpec, SyntheticTruth};
