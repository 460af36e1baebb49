//! Hierarchical video autoencoder: a frame codec, spectral band splitting,
//! attention-based global and detailed motion encoders, a flow-matching
//! decoder, staged training, a motion generator, and evaluation tools.

pub mod autograd;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod dataio;
pub mod decoder;
pub mod error;
pub mod evalkit;
pub mod generator;
pub mod model;
pub mod motion;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod plot;
pub mod scalar;
pub mod spectral;
pub mod tensor;
pub mod training;

pub use checkpoint::Checkpoint;
pub use codec::{LatentTensor, VideoTensor};
pub use config::RunConfig;
pub use error::{Error, Result};
pub use model::{HiVae, ModelConfig};
pub use params::ParamStore;
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Video32 = VideoTensor<f32>;
pub type Video64 = VideoTensor<f64>;
pub type Params32 = ParamStore<f32>;
pub type Params64 = ParamStore<f64>;
pub type Checkpoint32 = Checkpoint<f32>;
pub type Checkpoint64 = Checkpoint<f64>;
pub type TrainState32 = training::TrainState<f32>;
pub type TrainState64 = training::TrainState<f64>;
