//! Deterministic Δ-slotted network simulator with a scripted adversary.

mod adversary;
mod world;

pub use adversary::{adversary_act, AdversaryCtx, Outbound, Recipients, FORGED_DEMAND};
pub use world::{run_scenario, run_scenario_traced, OmniscientLedger, SimEnv, SimError, World};
