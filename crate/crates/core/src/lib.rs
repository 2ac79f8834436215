//! Routed low-rank Key/Value-projection experts inside multimodal attention
//! blocks, trained through an expert-growing curriculum with usage-targeted
//! routing supervision, on synthetic grid-scene tasks.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`] / [`tape`] — dense f64 tensors and reverse-mode autodiff
//! - [`gradcheck`] — the finite-difference oracle for every analytic gradient
//! - [`expert`] / [`router`] / [`attention`] / [`model`] — the routed
//!   attention block (noisy top-1 router, adaptive KV residual, two-stage
//!   attention over the three token streams)
//! - [`supervision`] — expert usage ratio and the veteran routing loss
//! - [`optim`] / [`trainer`] / [`checkpoint`] — staged training loop with
//!   expert growth, veteran freezing, and bit-exact checkpoints
//! - [`scene`] / [`mask`] / [`tasks`] / [`dataset`] — synthetic grid scenes,
//!   the inpainting mask pipeline, grounding/editing task generators, and
//!   the line-delimited dataset dump format
//! - [`config`] / [`metrics`] / [`eval`] — run configuration, metrics
//!   records, held-out evaluation, and the staged-vs-co-training study

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod expert;
pub mod gradcheck;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod router;
pub mod rng;
pub mod sampler;
pub mod scene;
pub mod supervision;
pub mod tape;
pub mod tasks;
pub mod tensor;
pub mod trainer;
