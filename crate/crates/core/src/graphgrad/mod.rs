//! Dense-tensor reverse-mode differentiation with the optimizer, schedule,
//! target averaging and quantizer used by every training stage.

mod checkpoint;
mod fsq;
mod graph;
pub mod nn;
mod optim;
mod tensor;

pub use checkpoint::{load_params, save_params};
pub use fsq::FsqConfig;
pub use graph::{Gradients, Graph, NodeId};
pub use nn::{Bind, Linear, ResMlp};
pub use optim::{
    cosine_warmup_lr, ema_update, EmaConfig, ParamStore, Schedule, ADAM_BETA1, ADAM_BETA2,
    ADAM_EPS,
};
pub use tensor::Tensor;
