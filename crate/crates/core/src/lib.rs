//! Audio-visual fusion classifiers over pre-extracted 768-d clip features,
//! with the data format, autodiff engine, training loop and metrics they
//! need.

pub mod diff_engine;
pub mod evaluation;
pub mod feature_store;
pub mod model_zoo;
mod seed;
pub mod training;

pub use diff_engine::{DiffError, Mode, Tensor};
pub use evaluation::{EvalError, EvalReport};
pub use feature_store::{ClipRecord, DataError, Dataset, FoldPlan, Label, FEATURE_DIM};
pub use model_zoo::{FusionKind, Model, ModelConfig, ModelError};
pub use seed::mix_seed;
pub use training::{CvOptions, CvResult, RunRecord, TrainConfig, TrainError};
