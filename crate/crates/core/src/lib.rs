//! Core of the gauntlet challenge-hosting platform.
//!
//! Organizers publish challenges from competition bundles ([`model`]);
//! participants submit prediction files or agents ([`api`]); submissions are
//! routed per challenge through an at-least-once [`queue`] to warm-started,
//! chunk-parallel [`worker`]s or to organizer-operated [`remote`] workers;
//! results land on per-phase, per-split [`leaderboard`]s. Agents are run
//! against hidden environments by [`agent`], and live human evaluation
//! sessions are brokered by [`hitl`].

pub mod agent;
pub mod api;
pub mod archive;
pub mod blob;
pub mod clock;
pub mod hitl;
pub mod ids;
pub mod journal;
pub mod leaderboard;
pub mod model;
pub mod queue;
pub mod remote;
pub mod sandbox;
pub mod worker;

#[cfg(any(test, feature = "fixtures"))]
pub mod fixtures;

pub use blob::{BlobKind, BlobRef, BlobStore, MemoryBlobStore};
pub use clock::{Clock, ManualClock, SystemClock, Timestamp};
pub use ids::*;
pub use model::ChallengeConfig;
