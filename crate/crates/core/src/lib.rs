//! Few-shot detection with class pre-selection on synthetic correlation maps.
//!
//! A small filter scores each candidate class from its L4 correlation map;
//! only the top classes go through fusion and detection.

pub mod checkpoint;
pub mod cost;
pub mod episode;
pub mod metrics;
pub mod selector;
pub mod tensor;
pub mod tpf;

pub use checkpoint::{Checkpoint, CheckpointError};
pub use cost::{measure, CostError, CostProfile, FittedProfile, TimingRecord};
pub use episode::{BoundingBox, ClassId, Episode, EpisodeError, SynthConfig};
pub use metrics::{evaluate, omission_rate, tpf_recall, EvalParams, EvalReport, MetricsError};
pub use selector::{run_inference, Detection, InferenceOutput, InferenceParams, SelectionStrategy};
pub use tensor::{FeatureMap, Level, TensorError};
pub use tpf::{train, Phase, TpfError, TpfModel, TrainConfig, TrainReport};
