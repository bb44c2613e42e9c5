//! Split-aggregation sequence models for meta-reinforcement learning: a
//! reverse-mode tape, aggregators, recurrent and aggregating encoders, a
//! hypernetwork policy, benchmark environments, an actor-critic trainer and
//! gradient probes.

pub mod aggregators;
pub mod envs;
pub mod error;
pub mod gradcore;
pub mod oracle;
pub mod permute;
pub mod policy;
pub mod probes;
pub mod scalar;
pub mod seqmodel;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Matrix;

pub type Matrix64 = Matrix<f64>;
pub type Matrix32 = Matrix<f32>;
pub type Tape64 = gradcore::Tape<f64>;
pub type Tape32 = gradcore::Tape<f32>;
pub type ParamStore64 = seqmodel::ParamStore<f64>;
pub type ParamStore32 = seqmodel::ParamStore<f32>;
pub type Agent64 = trainer::Agent<f64>;
pub type Agent32 = trainer::Agent<f32>;
