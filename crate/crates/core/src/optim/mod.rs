//! Adam with partial state pruning and the jagged cosine schedule.

mod adam;
mod prune;
mod schedule;

pub use adam::{adam_step, clip_grad_norm, AdamConfig, AdamState, Moments};
pub use prune::{
    prune_count, prune_optimizer_state, prune_optimizer_state_with, prune_smallest, PruneCoupling, PruneEntry,
    PruneOptions, PruneReport, PruneScope,
};
pub use schedule::{lr_at, JaggedSchedule};
