//! Data, the straight interpolation path, Euler sampling, and the Gaussian oracle.

mod data;
mod euler;
mod oracle;
mod path;
mod sampler;
mod teacher;

pub use data::{make_dataset, make_dataset_stream, DatasetKind, DatasetSpec, Example, ToySample};
pub use euler::{euler_integrate, euler_sample, euler_to, sample_many, EulerSchedule};
pub use oracle::{gaussian_oracle_velocity, GaussianOracle};
pub use path::{consistency_fn, fm_loss, fm_loss_value, interpolate, FnField, LossGrad, VelocityField};
pub use sampler::{SamplerKind, TimestepSampler, T_EPS};
pub use teacher::{draw_minibatch, train_teacher, Minibatch, TeacherConfig};
