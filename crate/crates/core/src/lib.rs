pub mod ar;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod flow;
pub mod gmm;
pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod numeric;
pub mod real;
pub mod sampler;
pub mod tensor;
pub mod train;

pub use ar::{ArConfig, ArModel, DimSplit, RedundantPrior};
pub use checkpoint::Checkpoint;
pub use config::TrainConfig;
pub use data::{Image, PatchGeometry, SynthKind};
pub use distill::DistillStats;
pub use error::{Error, Result};
pub use eval::{EvalReport, GaussianBaseline, RoundtripReport};
pub use flow::{Flow, FlowConfig, StudentFlow};
pub use gmm::GmmParams;
pub use real::Real;
pub use sampler::{CfgConfig, Inverter};
pub use tensor::Tensor;
pub use train::{StepStats, Trainer};
