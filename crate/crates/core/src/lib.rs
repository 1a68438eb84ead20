//! Keyframe/delta streaming of discrete token-grid states over lossy, budget-limited links.
//!
//! A sender holds a grid of codebook token ids per timestep and ships either full keyframes or
//! budgeted deltas whose positions are ranked by cosine change in codebook embedding space.
//! Keyframes fire on a fixed period or when the Hamming drift against the sender's optimistic
//! reference crosses a threshold. The [`eval`] module drives end-to-end simulations and sweeps;
//! [`utility`] scores reconstructions with a count-based next-token probe.

pub mod channel;
pub mod cli;
pub mod codebook;
pub mod config;
pub mod error;
pub mod eval;
pub mod grid;
pub mod metrics;
pub mod protocol;
pub mod report;
pub mod rng;
pub mod streams;
pub mod utility;

pub use channel::{Channel, ChannelConfig};
pub use codebook::{gen_clustered_codebook, normalize_rows, ChangeCache, Codebook};
pub use error::{Error, Result};
pub use eval::{
    bitrate_mbps, rate_match, run_clip, sweep, win_rates, Aggregation, ClipTrace, RunConfig, SweepResult, SweepRow,
    SweepSpec, UtilityProbe, WinRateSpec,
};
pub use grid::{Clip, TokenGrid, TokenId};
pub use metrics::{dyn_embedding_distortion, dynamic_mask, hamming_drift, mismatch_rate, DynamicMask};
pub use protocol::{
    budget_capacity, message_bytes, select_deltas, BudgetModel, KeyframePolicy, Message, ReceiverState, SenderState,
    Update,
};
pub use utility::{eval_perplexity, predict, train, CountModel, PositionFilter, PredictorConfig, SampleSpec};
