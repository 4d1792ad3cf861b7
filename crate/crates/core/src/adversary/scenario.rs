// SPDX-License-Identifier: Apache-2.0

//! Scenario descriptions, expectations and the single-run harness.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::attacks;
use super::world::{Deployment, World, WorldConfig, WorldError};
use crate::evidence::EvidenceBundle;
use crate::platform::HostStack;
use crate::td::BindingChannel;
use crate::verifier::{
    appraise, AkRegistry, AttackId, Challenge, ChallengeStatus, CheckId, Verdict, Verifier,
    VerifierPolicy,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ScenarioId {
    #[serde(rename = "honest")]
    Honest,
    #[serde(rename = "a1")]
    A1,
    #[serde(rename = "a2-mixmatch")]
    A2MixMatch,
    #[serde(rename = "a2-frankenstein")]
    A2Frankenstein,
    #[serde(rename = "a3")]
    A3,
    #[serde(rename = "a4")]
    A4,
    #[serde(rename = "a5")]
    A5,
    #[serde(rename = "a6")]
    A6,
}

impl ScenarioId {
    pub const ALL: [ScenarioId; 8] = [
        ScenarioId::Honest,
        ScenarioId::A1,
        ScenarioId::A2MixMatch,
        ScenarioId::A2Frankenstein,
        ScenarioId::A3,
        ScenarioId::A4,
        ScenarioId::A5,
        ScenarioId::A6,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioId::Honest => "honest",
            ScenarioId::A1 => "a1",
            ScenarioId::A2MixMatch => "a2-mixmatch",
            ScenarioId::A2Frankenstein => "a2-frankenstein",
            ScenarioId::A3 => "a3",
            ScenarioId::A4 => "a4",
            ScenarioId::A5 => "a5",
            ScenarioId::A6 => "a6",
        }
    }

    pub fn parse(s: &str) -> Result<Self, WorldError> {
        Self::ALL
            .into_iter()
            .find(|id| id.as_str() == s)
            .ok_or_else(|| WorldError::UnknownScenario(s.to_owned()))
    }

    pub fn attack(self) -> Option<AttackId> {
        match self {
            ScenarioId::Honest => None,
            ScenarioId::A1 => Some(AttackId::A1),
            ScenarioId::A2MixMatch | ScenarioId::A2Frankenstein => Some(AttackId::A2),
            ScenarioId::A3 => Some(AttackId::A3),
            ScenarioId::A4 => Some(AttackId::A4),
            ScenarioId::A5 => Some(AttackId::A5),
            ScenarioId::A6 => Some(AttackId::A6),
        }
    }

    /// Variants runnable under `deployment`, default first.
    pub fn variants(self, deployment: Deployment) -> &'static [&'static str] {
        match (self, deployment) {
            (ScenarioId::Honest, _) => &["honest"],
            (ScenarioId::A1, _) => &["forge_quote", "forge_report", "falsify_pcrs"],
            (ScenarioId::A2MixMatch, _) => &["naive"],
            (ScenarioId::A2Frankenstein, _) => &["relay"],
            (ScenarioId::A3, _) => &["drop_pcr", "inject_pcr"],
            (ScenarioId::A4, _) => &["replay", "tamper"],
            (ScenarioId::A5, Deployment::S1) => &["replace_ak", "spoof_ek", "clone_ak"],
            (ScenarioId::A5, Deployment::S2) => &["replace_ak", "spoof_ek"],
            (ScenarioId::A6, _) => &["reprovision_ak", "spoofed_ak"],
        }
    }

    pub fn default_variant(self) -> &'static str {
        self.variants(Deployment::S2)[0]
    }

    /// The checks a run of this variant is expected to fail, and nothing
    /// else.
    pub fn targeted_checks(self, variant: &str) -> BTreeSet<CheckId> {
        use CheckId::*;
        let set: &[CheckId] = match (self, variant) {
            (ScenarioId::Honest, _) => &[],
            (ScenarioId::A1, "forge_report") => &[C1],
            (ScenarioId::A1, "falsify_pcrs") => &[C2, C5],
            (ScenarioId::A1, _) => &[C2],
            (ScenarioId::A2MixMatch, _) => &[C3, C5],
            (ScenarioId::A2Frankenstein, _) => &[C7],
            (ScenarioId::A3, _) => &[C5],
            (ScenarioId::A4, "tamper") => &[C2],
            (ScenarioId::A4, _) => &[C4],
            (ScenarioId::A5, "spoof_ek") => &[C2],
            (ScenarioId::A5, "clone_ak") => &[C8],
            (ScenarioId::A5, _) => &[C3],
            (ScenarioId::A6, "spoofed_ak") => &[C2, C6],
            (ScenarioId::A6, _) => &[C6],
        };
        set.iter().copied().collect()
    }
}

impl fmt::Display for ScenarioId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Whether an attack class applies to a deployment. With a trusted
/// provider stack (S1) only forgery and measurement inconsistency remain.
pub fn relevant(attack: AttackId, deployment: Deployment) -> bool {
    match deployment {
        Deployment::S1 => matches!(attack, AttackId::A1 | AttackId::A3),
        Deployment::S2 => true,
    }
}

/// Host images given as label strings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackSpec {
    pub firmware: String,
    pub acm: String,
    pub seamldr: String,
    pub kernel: String,
    pub hypervisor: String,
    pub vtpm: String,
}

impl StackSpec {
    pub fn to_stack(&self) -> HostStack {
        HostStack::from_labels(
            &self.firmware,
            &self.acm,
            &self.seamldr,
            &self.kernel,
            &self.hypervisor,
            &self.vtpm,
        )
    }
}

fn default_network_delay() -> u64 {
    40
}

fn default_relay_delay() -> u64 {
    30
}

/// A scenario config file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub scenario: ScenarioId,
    pub deployment: Deployment,
    #[serde(default)]
    pub variant: Option<String>,
    #[serde(default = "default_network_delay")]
    pub network_delay_ms: u64,
    #[serde(default = "default_relay_delay")]
    pub relay_delay_ms: u64,
    #[serde(default)]
    pub binding_channel: BindingChannel,
    #[serde(default)]
    pub in_td_check: bool,
    #[serde(default)]
    pub stack: Option<StackSpec>,
    #[serde(default)]
    pub guest_events: Option<usize>,
    #[serde(default)]
    pub params: BTreeMap<String, u64>,
}

impl ScenarioSpec {
    pub fn new(scenario: ScenarioId, deployment: Deployment) -> Self {
        Self {
            scenario,
            deployment,
            variant: None,
            network_delay_ms: default_network_delay(),
            relay_delay_ms: default_relay_delay(),
            binding_channel: BindingChannel::default(),
            in_td_check: false,
            stack: None,
            guest_events: None,
            params: BTreeMap::new(),
        }
    }

    pub fn with_variant(mut self, v: &str) -> Self {
        self.variant = Some(v.to_owned());
        self
    }

    pub fn param(&self, key: &str) -> Option<u64> {
        self.params.get(key).copied()
    }

    pub fn resolved_variant(&self) -> Result<String, WorldError> {
        let allowed = self.scenario.variants(self.deployment);
        match &self.variant {
            None => Ok(allowed[0].to_owned()),
            Some(v) if allowed.contains(&v.as_str()) => Ok(v.clone()),
            Some(v) => Err(WorldError::UnsupportedVariant {
                scenario: self.scenario.as_str().to_owned(),
                variant: v.clone(),
                deployment: self.deployment,
            }),
        }
    }

    pub fn world_config(&self) -> WorldConfig {
        WorldConfig {
            deployment: self.deployment,
            network_delay_ms: self.network_delay_ms,
            relay_delay_ms: self.relay_delay_ms,
            binding_channel: self.binding_channel,
            in_td_check: self.in_td_check,
            stack: self.stack.as_ref().map(StackSpec::to_stack),
            guest_events: self.guest_events,
        }
    }
}

/// Everything one run produced, enough to re-appraise the bundle offline.
#[derive(Debug, Clone)]
pub struct ScenarioRun {
    pub spec: ScenarioSpec,
    pub variant: String,
    pub seed: u64,
    pub bundle: EvidenceBundle,
    pub challenge: Challenge,
    pub policy: VerifierPolicy,
    /// Verifier registry just before the final appraisal.
    pub registry: AkRegistry,
    pub verdict: Verdict,
    pub elapsed_virtual_ms: u64,
}

impl ScenarioRun {
    /// Honest runs must be accepted; attack runs rejected with the
    /// scenario's attack class among the flags.
    pub fn expectation_met(&self) -> bool {
        match self.spec.scenario.attack() {
            None => self.verdict.accepted,
            Some(a) => !self.verdict.accepted && self.verdict.attack_flags.contains(&a),
        }
    }

    pub fn targeted_checks(&self) -> BTreeSet<CheckId> {
        self.spec.scenario.targeted_checks(&self.variant)
    }

    /// Appraises the final bundle again from the pre-appraisal state with
    /// `disabled` checks switched off.
    pub fn reappraise(&self, disabled: &BTreeSet<CheckId>) -> Verdict {
        let mut policy = self.policy.clone();
        policy.disabled_checks.extend(disabled.iter().copied());
        let mut registry = self.registry.clone();
        appraise(
            &self.bundle,
            &policy,
            &self.challenge,
            ChallengeStatus::Outstanding,
            &mut registry,
        )
    }
}

/// Verifier RNG seed derived from the world seed.
fn verifier_seed(seed: u64) -> u64 {
    seed.rotate_left(17) ^ 0x9e37_79b9_7f4a_7c15
}

pub fn run_scenario(spec: &ScenarioSpec, seed: u64) -> Result<ScenarioRun, WorldError> {
    let variant = spec.resolved_variant()?;
    let mut world = World::new(spec.world_config(), seed)?;
    let policy = world.policy();
    let verifier = Verifier::new(policy.clone(), verifier_seed(seed))
        .expect("world policies carry roots and a positive threshold");
    let start = world.now();
    let out = attacks::run(spec, &variant, &mut world, &verifier)?;
    let mut bundle = out.bundle;
    bundle.scenario_meta.extend(out.meta);
    bundle
        .scenario_meta
        .insert("deployment".into(), format!("{:?}", spec.deployment));
    bundle
        .scenario_meta
        .insert("scenario".into(), spec.scenario.as_str().into());
    bundle.scenario_meta.insert("seed".into(), seed.to_string());
    bundle.scenario_meta.insert("variant".into(), variant.clone());
    let registry = verifier.registry();
    let verdict = verifier.verify_bundle(&bundle, &out.challenge);
    Ok(ScenarioRun {
        spec: spec.clone(),
        variant,
        seed,
        bundle,
        challenge: out.challenge,
        policy,
        registry,
        verdict,
        elapsed_virtual_ms: world.now() - start,
    })
}

/// Runs the honest flow of `deployment` and returns only the bundle.
pub fn run_honest(deployment: Deployment, seed: u64) -> Result<ScenarioRun, WorldError> {
    run_scenario(&ScenarioSpec::new(ScenarioId::Honest, deployment), seed)
}

/// Runs an attack scenario.
pub fn run_attack(spec: &ScenarioSpec, seed: u64) -> Result<ScenarioRun, WorldError> {
    if spec.scenario == ScenarioId::Honest {
        return Err(WorldError::UnknownScenario("honest is not an attack".into()));
    }
    run_scenario(spec, seed)
}
