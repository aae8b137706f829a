//! Parallel-leader byzantine fault-tolerant state machine replication, plus a
//! deterministic discrete-event harness for exercising it under adversarial
//! schedules and for auditing its authenticator budget.
//!
//! All `n = 3f + 1` replicas lead simultaneously: client traffic is hashed
//! into buckets, buckets are assigned to leaders per epoch, and each leader
//! drives its own requests through a three-phase commit with threshold
//! signatures while acting as a backup for everyone else's. Epochs are
//! bounded by pre-assigned capacities and a timer; a designated primary
//! performs the epoch change and hands out the next configuration.
//!
//! The crate is organized bottom-up:
//!
//! * [`types`] — protocol messages and the canonical byte encoding.
//! * [`crypto`] — the deterministic threshold-signature mock and the
//!   per-replica authenticator meter.
//! * [`partition`] — bucket maps, sequence-number distribution, watermarks.
//! * [`rotation`] — primary selection with exploration and re-evaluation.
//! * [`replica`] — the replica state machine (epoch operation and change).
//! * [`client`] — closed-loop clients with watermark windows.
//! * [`adversary`] — byzantine strategy filters applied to corrupted nodes.
//! * [`simnet`] — the discrete-event network, clocks, and the safety auditor.
//! * [`metrics`] — throughput / utilization / complexity reductions.
//! * [`config`] + [`experiment`] — run configuration and orchestration.

pub mod adversary;
pub mod client;
pub mod config;
pub mod crypto;
pub mod experiment;
pub mod metrics;
pub mod partition;
pub mod replica;
pub mod rotation;
pub mod simnet;
pub mod types;
