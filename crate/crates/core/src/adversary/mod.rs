// SPDX-License-Identifier: Apache-2.0

//! Simulated deployments, host-controlled channels and the attack
//! scenario generators.

mod attacks;
mod network;
mod scenario;
mod world;

pub use network::{Delivery, Endpoint, LinkModel, Message, TamperHook};
pub use scenario::{
    relevant, run_attack, run_honest, run_scenario, ScenarioId, ScenarioRun, ScenarioSpec,
    StackSpec,
};
pub use world::{
    Deployment, Mirror, QuotingKey, TpmRef, World, WorldConfig, WorldError, PROVIDER, REGION,
    SECOND_PLATFORM, TARGET_PLATFORM, TENANT_TD,
};
