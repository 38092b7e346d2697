//! Synthetic malware corpus, sparse binary features, projected MLP detectors,
//! Jacobian-guided feature-flipping attacks, defenses and low-FPR evaluation.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the default `f64` instantiation.

pub mod attack;
pub mod classifier;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod features;
pub mod model;
pub mod pipeline;
pub mod scalar;
pub mod seed;
pub mod train;

pub use attack::{craft, run_campaign, AttackTrace, Campaign, Strategy, SuccessTable};
pub use classifier::Classifier;
pub use corpus::{generate_corpus, BehaviorLog, CorpusSpec, BENIGN, MALWARE};
pub use error::{Error, Result};
pub use eval::{roc, test_error, RocCurve};
pub use features::{Dataset, FeatureVocabulary, SparseBinaryVector, SplitDataset};
pub use model::{Arch, MlpModel, ProjectionMatrix};
pub use scalar::Scalar;
pub use train::TrainConfig;

pub type Model = MlpModel<f64>;
pub type Model32 = MlpModel<f32>;
pub type Roc = RocCurve<f64>;
pub type Roc32 = RocCurve<f32>;
