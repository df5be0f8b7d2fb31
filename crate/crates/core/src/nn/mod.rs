//! Dense network primitives with hand-written reverse-mode gradients.
//!
//! Every op has a per-sample form (`forward`/`backward` on slices) and a
//! batched form operating on row-major `(batch, features)` matrices. The
//! batched forms are what training uses; the per-sample forms define the
//! contract and are what the gradient checks exercise.

mod adam;
mod layernorm;
mod linear;
mod mlp;

pub use adam::{check_finite, AdamConfig, AdamState};
pub use layernorm::{LayerNorm, LnBatchCache, LnCache, LnGrads};
pub use linear::{LinearGrads, LinearLayer};
pub use mlp::{Activation, Mlp, MlpBatchCache, MlpCache, MlpGrads};
