//! Multi-task stereo matching: a disparity network built from a context
//! pyramid and a one-stage residual pyramid, cooperating with an edge
//! detection sub-network, on top of a small reverse-mode tensor engine.

pub mod checkpoint;
pub mod context;
pub mod data;
pub mod edge;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod loss;
pub mod model;
pub mod nn;
pub mod ops;
pub mod params;
pub mod pyramid;
pub mod stereo;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use ops::conv::ConvParams;
pub use params::{GradMode, GroupId, ParamGroup, ParamId, ParamStore, Session};
pub use tensor::{Scalar, Tensor};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use data::{Batch, Dataset, GeneratorConfig, StereoSample};
pub use loss::{EvalReport, LossBreakdown};
pub use model::{EdgeStereo, ModelConfig, ModelOutput, Prediction};
pub use train::{Adam, AdamConfig, LrSchedule, Phase, PhasePlan, TrainHooks, TrainState};
