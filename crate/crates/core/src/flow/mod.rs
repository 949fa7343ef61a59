//! Rectified flow matching with a step-size-conditioned shortcut network.

mod net;
mod objective;
mod sampler;
mod train;

pub use net::{embed_batch, embed_time, NetConfig, ParamSet, VelocityModel, VelocityNet, TIME_SCALE};
pub(crate) use net::init_matrix;
pub use objective::{
    anc_loss, anc_loss_at, anc_loss_split, consistency_target, draw_pair, fm_loss, fm_loss_at, interpolate, noisy_states,
    shortcut_step, shortcut_update, AncLoss, AncSettings, ConsistencyPair,
};
pub use sampler::{integrate, sample_euler, sample_fewstep};
pub use train::{
    train_alternating, train_step, BatchSource, LossRecord, Objective, Phase, TensorSource, TrainConfig,
    TrainState,
};
