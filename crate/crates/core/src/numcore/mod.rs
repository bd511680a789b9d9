//! Deterministic dense-array math: tensors, a seeded RNG, layer stacks
//! with hand-written forward/backward, an Adam optimizer, and the
//! `.wts` weight file format.
//!
//! Everything is 64-bit and single-threaded by contract; values are
//! immutable after construction unless explicitly mutated through
//! `&mut`. Any computation here is a pure function of (inputs, seed).

mod adam;
mod net;
mod rng;
mod tensor;
mod wts;

pub use adam::{adam_step, AdamState, CheckMode};
pub use net::{
    backward, backward_into, forward, param_tensors, param_tensors_mut, zero_like_params,
    BackwardResult, ForwardCache, LayerKind, LayerSpec, ParamGrads,
};
pub use rng::Rng;
pub use tensor::Tensor;
pub use wts::{load_net, read_layer, save_net, write_layer, WTS_MAGIC};
