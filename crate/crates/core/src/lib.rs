//! A desk-scale failure-prediction laboratory: a reverse-mode autodiff tape,
//! small MLP classifiers, and a training recipe combining mixup
//! regularization, a correctness ranking loss, a cosine classifier head,
//! sharpness-aware updates, and weight averaging — plus the evaluation
//! machinery (risk–coverage curves, ranking metrics, corruption ladders,
//! long-tail re-weighting) needed to measure whether any of it helps.

pub mod ablation;
pub mod config;
pub mod data;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod report;
pub mod reweight;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use ablation::{run_ablation_grid, AblationRow, AblationTable, ComponentToggles};
pub use config::{DatasetKind, ExperimentConfig, SwaLr};
pub use data::{CorruptionKind, Dataset, NoiseSpec, SplitKind};
pub use error::{Error, Result};
pub use loss::{CorrectnessHistory, LossWeights, MixupConfig};
pub use metrics::{EvalRecord, MetricReport};
pub use model::{HeadKind, MLPSpec, Model, ParamMap, Parameter};
pub use optim::{LRSchedule, SAMConfig, SGDConfig, SWAState};
pub use report::emit_report;
pub use reweight::{ReweightMap, UncertaintyScores};
pub use tape::{GradMap, NodeId, Tape};
pub use tensor::Tensor;
pub use train::{run_eval, run_training, RunManifest, TrainOutcome};
