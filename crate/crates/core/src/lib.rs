//! Head-wise KV cache management for block-wise autoregressive video
//! attention, on a small seeded attention stack.
//!
//! Heads are profiled by where their attention mass lands (first frame,
//! middle history, current block) and classified as anchor, local or memory
//! heads. Each role gets its own cache layout; memory heads additionally
//! share an episodic store of scene key-frames with prompt-guided
//! compression. The [`assembler`] turns per-head histories into one packed
//! variable-length buffer with contiguous temporal positions.

pub mod assembler;
pub mod episodic;
pub mod error;
pub mod harness;
pub mod headcache;
pub mod model;
pub mod oracle;
pub mod par;
pub mod profiler;
pub mod rope;
pub mod rollout;
pub mod tensor;

pub use error::{Error, Result};
pub use model::{init_model, ModelConfig, ModelWeights};
pub use par::Parallelism;
pub use profiler::{HeadId, HeadRole, HeadRoleMap};
pub use rollout::{generate_rollout, MemoryParams, Rollout, Strategy};
