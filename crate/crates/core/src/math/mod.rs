//! Dense matrices, reverse-mode differentiation, checkpoints and optimisation.

mod gradcheck;
mod graph;
mod matrix;
mod optim;
mod params;

use std::sync::atomic::{AtomicU8, Ordering};

pub use gradcheck::{grad_check, grad_check_store};
pub(crate) use graph::dense_matmul;
pub use graph::{AttnBlock, Graph, NodeId};
pub use matrix::{dot, sigmoid, stable_log_sigmoid, DenseMatrix};
pub(crate) use matrix::{gelu, layer_norm_rows, softmax_in_place};
pub use optim::{cosine_lr, Adam};
pub use params::{Gradients, ParamId, ParamStore};

static DETERMINISTIC: AtomicU8 = AtomicU8::new(0);

/// Whether deterministic mode is on: `GQS_DETERMINISTIC=1` in the environment,
/// or forced with [`set_deterministic`]. In deterministic mode no work is
/// spread across threads.
pub fn deterministic() -> bool {
    match DETERMINISTIC.load(Ordering::Relaxed) {
        1 => true,
        2 => false,
        _ => std::env::var("GQS_DETERMINISTIC").is_ok_and(|v| v == "1"),
    }
}

pub fn set_deterministic(on: bool) {
    DETERMINISTIC.store(if on { 1 } else { 2 }, Ordering::Relaxed);
}
