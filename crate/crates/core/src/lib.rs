//! Desk-scale controllable multi-object 3D generation.
//!
//! The pipeline trains small conditional denoisers on a procedural
//! multi-object world, then optimizes an explicit voxel scene from a
//! structured prompt and 2D bounding boxes by score distillation:
//! a layout-conditioned term, a multi-view term anchored to a sampled
//! 2D prior image, and a unified term against an online fine-tuned
//! copy of the layout denoiser (a chain of periodically merged
//! low-rank adapters).
//!
//! Module map:
//! - [`numcore`]: tensors, seeded RNG, layer stacks with explicit
//!   forward/backward, Adam, and the `.wts` weight format.
//! - [`render`]: differentiable volume rendering over a voxel grid.
//! - [`world`]: procedural scenes, prompts, boxes, and the two
//!   training datasets.
//! - [`diffusion`]: noise schedule, forward noising, denoiser
//!   training, and ancestral sampling.
//! - [`teachers`]: the layout and multi-view denoisers plus the
//!   evaluation critic.
//! - [`distill`]: the score-distillation gradient operators, the
//!   adapter chain, and the end-to-end generation loop.
//! - [`metrics`]: layout IoU, object count, critic score, view
//!   consistency, and the ablation runner.

pub mod diffusion;
pub mod distill;
mod error;
pub mod metrics;
pub mod numcore;
pub mod render;
pub mod teachers;
pub mod world;

pub use error::{Error, Result};
