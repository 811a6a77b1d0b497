//! Latent attribute inference with an MRF-coupled Indian Buffet Process.
//!
//! Factorial appearance models are trained by Gibbs sampling on annotated
//! auxiliary data, adapted to an unlabeled target set through a conjugate
//! prior, and summarized per image as heat maps and grid descriptors for
//! re-identification and attribute search.

pub mod data;
pub mod error;
pub mod gibbs;
pub mod linalg;
pub mod model;
pub mod parallel;
pub mod representation;
pub mod retrieval;
pub mod rng;
pub mod transfer;

pub use error::{Error, Result};
pub use gibbs::{infer_states, train_auxiliary, AuxiliaryFit, SweepConfig};
pub use model::{
    log_joint, validate_bag, AppearanceModel, Dataset, FactorState, FeatureBag, Hyperparams,
    LabeledBag, Patch, PixelMask, SupervisionLabels,
};
pub use parallel::Schedule;
pub use representation::{GridDescriptor, HeatMapStack, PatchMarginals};
pub use retrieval::{QueryGroup, QueryTerm, SearchIndex};
pub use transfer::{adapt_target, adapt_target_with, extend_prior, Adaptation, TargetFit};
