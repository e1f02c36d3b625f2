//! Dense arithmetic, the velocity network with hand-written reverse and
//! forward mode, AdamW, EMA, and the checkpoint container.

pub mod checkpoint;
mod dual;
pub mod layers;
mod net;
mod optim;
mod params;
mod tensor;

pub use checkpoint::Checkpoint;
pub use dual::DualTensor;
pub use net::{ForwardCache, NetConfig, VelocityNet};
pub use optim::{ema_update, AdamW, AdamWConfig, TrainState};
pub use params::ParamSet;
pub use tensor::Tensor;
