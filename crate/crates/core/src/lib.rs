//! Linear-complexity bidirectional weighted key-value attention, the VRWKV
//! spatio-temporal block built on it, quadratic reference mechanisms, a
//! desk-scale diffusion training loop, and a benchmark harness that turns the
//! linear-versus-quadratic cost claims into measured scaling properties.

pub mod arena;
pub mod attention;
pub mod autodiff;
pub mod bench;
pub mod block;
pub mod config;
pub mod dataset;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod fdcheck;
pub mod rng;
pub mod serialize;
pub mod tensor;
pub mod wkv;

pub use attention::{AttentionConfig, AttentionMechanism};
pub use bench::{BenchRecord, Mechanism, ReportFormat, ScalingReport, SuiteConfig};
pub use block::{BlockConfig, PatchGrid, VrwkvBlockParams};
pub use dataset::{Clip, FrameSequence, ShapeClass};
pub use denoiser::{Denoiser, DenoiserConfig, DenoiserParams, TrainOptions};
pub use diffusion::{ConditionEmbedding, NoisePredictor, NoiseSchedule};
pub use error::{Error, Result};
pub use serialize::Checkpoint;
pub use tensor::{map_reduce, MapReduce, Tensor};
pub use wkv::{ScanState, WkvGrads, WkvParams};
