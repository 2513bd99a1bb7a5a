pub mod boxes;
pub mod checkpoint;
pub mod data;
pub mod engine;
pub mod error;
pub mod eval;
pub mod head;
pub mod inception;
pub mod loss;
pub mod matching;
pub mod network;
pub mod optim;
pub mod params;
pub mod ppm;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use engine::{Reduction, Tape, Var};
pub use error::{Error, Result};
pub use optim::SgdState;
pub use params::{ConvParams, ParamId, ParamStore};
pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Tape32 = engine::Tape<f32>;
pub type Tape64 = engine::Tape<f64>;
pub type Model32 = network::Model<f32>;
pub type Model64 = network::Model<f64>;
pub type Trainer32 = train::Trainer<f32>;
pub type Trainer64 = train::Trainer<f64>;
