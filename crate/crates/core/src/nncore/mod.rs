//! Minimal dense-tensor kernel: forward operators and their hand-written
//! vector-Jacobian products.

pub mod attention;
pub mod batchnorm;
pub mod conv;
pub mod init;
pub mod ops;
pub mod params;
pub mod tensor;
pub mod weights;

pub use attention::{
    local_attention, local_attention_vjp, multi_head_attention, multi_head_attention_vjp, AttnProj, AttnProjGrads,
    ScoreBias,
};
pub use batchnorm::{batchnorm2d, batchnorm2d_vjp, BnMode, RunningStats};
pub use conv::{conv2d, conv2d_vjp, Conv2dSpec};
pub use ops::*;
pub use params::{Gradients, ParamStore};
pub use tensor::{Real, Tensor};
pub use weights::{load_weights, read_weights, save_weights, write_weights};
