pub mod diffcore;
pub mod envs;
pub mod gradsuite;
pub mod learner;
pub mod nn;
pub mod orchestrator;
pub mod replay;
pub mod scalar;
pub mod trajencoder;

pub use scalar::Real;

pub type Tensor32 = diffcore::Tensor<f32>;
pub type Tensor64 = diffcore::Tensor<f64>;
pub type Agent32 = learner::Agent<f32>;
pub type Agent64 = learner::Agent<f64>;
pub type Trainer32 = orchestrator::Trainer<f32>;
pub type Trainer64 = orchestrator::Trainer<f64>;
pub type Checkpoint32 = orchestrator::Checkpoint<f32>;
