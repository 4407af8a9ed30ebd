//! Deterministic discrete-event simulator comparing two connected-vehicle
//! radio stacks — a DSRC-style contention broadcast stack and a mm-wave
//! cellular stack — under safety-warning and traffic-data-collection
//! workloads.
//!
//! The crate is organized bottom-up:
//!
//! * [`engine`] — simulation clock, event queue, seeded RNG streams
//! * [`mobility`] — trace ingestion, interpolation, synthetic corridors
//! * [`channel`] — path loss, fading, blockage, SINR, decode decisions
//! * [`dsrc`] — CSMA/CA broadcast MAC with beaconing and on-demand routing
//! * [`mmwave`] — base-station association, TDMA scheduling, HARQ
//! * [`flowmon`] — per-flow measurement ledger and derived metrics
//! * [`apps`] — forward-collision warning and data-collection scenarios
//! * [`scenario`] — run configuration, presets, validation
//! * [`sim`] — world assembly and the event dispatch loop
//! * [`runner`] — run/sweep orchestration and artifact files

pub mod apps;
pub mod channel;
pub mod dsrc;
pub mod engine;
pub mod flowmon;
pub mod mmwave;
pub mod mobility;
pub mod runner;
pub mod scenario;
pub mod sim;
