//! Networks and their optimizers.

mod checkpoint;
mod heads;
mod mlp;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint, write_atomic, CheckpointMeta};
pub use heads::{accel_batch, accel_partials_batch, metric_batch, packed_index, state_input, AccelNet, SymMatrixHead};
pub use mlp::{Activation, BoundMlp, Dense, Jet, MlpParams};
pub use optim::{clip_grad_norm, grad_norm, LrSchedule, RAdam};

/// Default hidden widths for the acceleration network.
pub const F_HIDDEN: [usize; 1] = [16];
/// Default hidden widths for the metric network.
pub const G_HIDDEN: [usize; 2] = [64, 64];
/// Default hidden widths for the initial-velocity network.
pub const V0_HIDDEN: [usize; 3] = [16, 16, 16];

/// `[input, hidden..., output]`
pub fn layer_widths(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut w = Vec::with_capacity(hidden.len() + 2);
    w.push(input);
    w.extend_from_slice(hidden);
    w.push(output);
    w
}
