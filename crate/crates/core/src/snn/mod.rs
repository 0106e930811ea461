//! Leaky integrate-and-fire networks trained with surrogate-gradient BPTT.

mod lif;
mod net;
mod train;

pub use lif::{
    lif_backward, lif_run, lif_step, lif_step_slice, surrogate_grad, LifParams, LifState, SpikeFn,
    SpikeTrain,
};
pub use net::{SnnConfig, SnnTrace, SpikingConv, SpikingDense, SpikingNet, N_CLASSES};
pub use train::{
    bptt_train_step, count_loss_terms, decide, mse_count_loss, predict_cycle, sample_gradients,
    EncodedSample, TargetRates,
};
