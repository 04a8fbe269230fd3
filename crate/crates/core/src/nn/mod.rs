//! Trainable layers, losses, and optimizers shared by every branch.

mod layers;
mod loss;
mod optim;
mod params;

pub use layers::{Conv2d, Dense, LayerNorm};
pub use loss::{check_one_hot, cross_entropy, one_hot, PROB_CLAMP};
pub use optim::{Optimizer, OptimizerKind};
pub use params::{Bound, Init, ParamId, ParamSet};
