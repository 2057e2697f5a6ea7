//! Video-guided goal-conditioned exploration at desk scale.
//!
//! An agent learns a goal-conditioned action-chunk policy without action
//! labels or rewards. A frozen subgoal oracle proposes a sequence of
//! observations toward task completion, the agent tries to follow them, and
//! every rollout is relabeled in hindsight so that the observation actually
//! reached becomes the goal for the actions actually taken. Chunked random
//! exploration seeds and periodically refreshes the replay buffer.
//!
//! Module map:
//!
//! - [`types`], [`rng`], [`codec`]: shared domain types, deterministic random
//!   streams and the `VGE1` episode format.
//! - [`envs`]: the two toy environments, `TableSim` and `GridNav`.
//! - [`oracle`]: scripted experts, subgoal plans and plan corruptions.
//! - [`nn`]: dense networks with analytic backprop, Adam and the `VGP1`
//!   checkpoint format.
//! - [`policy`]: regression and diffusion chunk heads.
//! - [`explore`]: replay buffer, window sampling, rollouts and the training
//!   loop.
//! - [`baselines`]: BC and GCBC trained on expert demonstrations.
//! - [`harness`]: evaluation, ablations, sweeps, plots and run configuration.
//!
//! Data-parallel inner loops go through [`par::Exec`]; with the default
//! `parallel` feature they run on rayon, otherwise sequentially. Both modes
//! produce bit-identical results.

// `!(x > 0.0)` style checks reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod codec;
pub mod envs;
pub mod error;
pub mod explore;
pub mod harness;
pub mod nn;
pub mod oracle;
pub mod par;
pub mod policy;
pub mod rng;
pub mod types;

pub use error::{Error, Result};
pub use rng::RngStream;
pub use types::{
    clamp_action, Action, ActionBounds, ActionChunk, Episode, EpisodeSource, Observation, Task,
};
