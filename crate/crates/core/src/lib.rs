//! Searchable low-bit weights.
//!
//! Each quantized weight is a softmax distribution over a small value grid.
//! Training runs on the expectation of that distribution while a temperature
//! schedule sharpens it; inference uses the argmax. State batch normalization
//! keeps separate statistics for the two weight states. A straight-through
//! estimator baseline, bit-packed model export and an xnor-popcount
//! convolution for 1-bit layers are included.

pub mod checkpoint;
pub(crate) mod codec;
pub mod config;
pub mod data;
pub mod deploy;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod model;
pub mod optim;
pub mod param;
pub mod quant;
pub mod sbn;
pub mod schedule;
pub mod search;
pub mod tensor;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use data::{Dataset, DatasetName, DatasetSpec, Split};
pub use deploy::{InferenceModel, PackedWeights};
pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use model::{Arch, Network, WeightMode, WeightState, build};
pub use optim::{OptimConfig, Optimizer, OptimizerKind};
pub use quant::{QuantGrid, SteWeight};
pub use sbn::{SbnLayer, Track};
pub use schedule::{ScheduleKind, Temperature, TemperatureSchedule};
pub use search::{FreezeReport, SearchableWeight};
pub use tensor::Tensor;
pub use train::{ReportRow, TrainConfig, TrainReport, Trainer};
