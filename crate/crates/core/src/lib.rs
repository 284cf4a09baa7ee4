//! Continual learning for a softmax head over frozen features.
//!
//! Exemplars are chosen per class by the change in Fisher information their
//! removal would cause, and retraining on new classes adds a consolidation
//! penalty whose weight is re-derived every step from the ratio of the
//! cross-entropy to the penalty term.
//!
//! The numeric core is generic over [`Scalar`]; the aliases below fix it to
//! `f64`, which is what the checkpoint format and the harness use.

pub mod checkpoint;
pub mod classifier;
pub mod consolidation;
pub mod data;
pub mod error;
pub mod fisher;
pub mod linalg;
pub mod rng;
pub mod scalar;

pub use classifier::{
    adam_step, adam_step_columns, extend_classes, train, train_epoch, AdamConfig, AdamState, ClassId, ClassRegistry,
    HasLabel, LabeledExample, SoftmaxHead, TrainConfig, TrainReport, NEW_COLUMN_STD,
};
pub use consolidation::{
    batch_split, consolidation_gradient, consolidation_term, dynamic_lambda, refresh_anchor_and_table, retrain_loss,
    AnchorWeights, CeNormalization, ContinualState, LambdaCadence, LambdaMode, LambdaPolicy, Lifecycle, RetrainConfig,
    RetrainLoss, RetrainObjective, RetrainSession, StepDiagnostics,
};
pub use data::{gen_synthetic, split, EmbeddingFormat, FrozenExtractor, RawExample, Space, SplitSpec};
pub use error::{Error, Result};
pub use fisher::{
    empirical_fisher, exemplar_count, fisher_diff, fisher_scores, select, select_exemplars, select_random,
    ClassExemplars, ExemplarStore, ParameterInfoTable, ScoredExample, SelectionConfig, Selector,
};
pub use linalg::Matrix;
pub use rng::{derive_seed, Rng, Stream};
pub use scalar::Scalar;

pub type Head = SoftmaxHead<f64>;
pub type Example = LabeledExample<f64>;
pub type Adam = AdamState<f64>;
pub type Table = ParameterInfoTable<f64>;
pub type Anchor = AnchorWeights<f64>;
pub type Store = ExemplarStore<f64>;
pub type State = ContinualState<f64>;
pub type Weights = Matrix<f64>;
