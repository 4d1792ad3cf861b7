// SPDX-License-Identifier: Apache-2.0

//! The external verifier: challenges, composite-evidence appraisal and the
//! AK registry.

mod checks;
mod policy;
mod registry;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::sync::Mutex;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

pub use checks::appraise;
pub use policy::{
    default_rtt_threshold, PolicyError, VerifierPolicy, DISCRETE_QUOTE_LATENCY_MS,
    VTPM_QUOTE_LATENCY_MS,
};
pub use registry::{
    registry_lookup, registry_register, AkRegistry, Conflict, Registration, RegistryEntry,
};

use crate::crypto::Nonce;
use crate::evidence::{self, EvidenceBundle, ParseError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CheckId {
    C1,
    C2,
    C3,
    C4,
    C5,
    C6,
    C7,
    C8,
}

impl CheckId {
    pub const ALL: [CheckId; 8] = [
        CheckId::C1,
        CheckId::C2,
        CheckId::C3,
        CheckId::C4,
        CheckId::C5,
        CheckId::C6,
        CheckId::C7,
        CheckId::C8,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CheckId::C1 => "qe_signature_and_tee_chain",
            CheckId::C2 => "quote_signature_and_ak_provenance",
            CheckId::C3 => "ak_binding",
            CheckId::C4 => "nonce_freshness",
            CheckId::C5 => "rtmr_pcr_consistency",
            CheckId::C6 => "launch_anchors_and_seal_policy",
            CheckId::C7 => "round_trip_time",
            CheckId::C8 => "ak_registry_uniqueness",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.to_string() == s)
    }
}

impl fmt::Display for CheckId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AttackId {
    A1,
    A2,
    A3,
    A4,
    A5,
    A6,
}

impl AttackId {
    pub const ALL: [AttackId; 6] = [
        AttackId::A1,
        AttackId::A2,
        AttackId::A3,
        AttackId::A4,
        AttackId::A5,
        AttackId::A6,
    ];

    /// Security goals an attack of this class undermines.
    pub fn goals(self) -> &'static [Goal] {
        use Goal::*;
        match self {
            AttackId::A1 => &[AB, MC],
            AttackId::A2 => &[AB, F, CV, PO],
            AttackId::A3 => &[MC, AB],
            AttackId::A4 => &[CV, F],
            AttackId::A5 => &[AB, PO],
            AttackId::A6 => &[AB, MC],
        }
    }
}

impl fmt::Display for AttackId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

/// Verifier security goals: authenticity and binding, freshness,
/// measurement consistency, channel verifiability, platform origin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Goal {
    AB,
    F,
    MC,
    CV,
    PO,
}

impl Goal {
    pub const ALL: [Goal; 5] = [Goal::AB, Goal::F, Goal::MC, Goal::CV, Goal::PO];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GoalStatus {
    Pass,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckResult {
    pub check_id: CheckId,
    pub name: String,
    pub passed: bool,
    pub detail: String,
    /// Attacks this result points to; empty when passed.
    pub flags: BTreeSet<AttackId>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub disabled: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub accepted: bool,
    pub checks: Vec<CheckResult>,
    pub attack_flags: BTreeSet<AttackId>,
    pub goals: BTreeMap<Goal, GoalStatus>,
}

impl Verdict {
    pub(crate) fn from_checks(checks: Vec<CheckResult>) -> Self {
        let attack_flags: BTreeSet<AttackId> =
            checks.iter().flat_map(|c| c.flags.iter().copied()).collect();
        let failed_goals: BTreeSet<Goal> = attack_flags
            .iter()
            .flat_map(|a| a.goals().iter().copied())
            .collect();
        let goals = Goal::ALL
            .into_iter()
            .map(|g| {
                let s = if failed_goals.contains(&g) {
                    GoalStatus::Fail
                } else {
                    GoalStatus::Pass
                };
                (g, s)
            })
            .collect();
        Self {
            accepted: checks.iter().all(|c| c.passed),
            checks,
            attack_flags,
            goals,
        }
    }

    pub fn check(&self, id: CheckId) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.check_id == id)
    }

    pub fn failed_checks(&self) -> BTreeSet<CheckId> {
        self.checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.check_id)
            .collect()
    }

    pub fn to_json(&self) -> Vec<u8> {
        evidence::to_canonical_json(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Challenge {
    pub td_nonce: Nonce,
    pub tpm_nonce: Nonce,
    pub issued_at: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChallengeStatus {
    Outstanding,
    Consumed,
    Unknown,
}

struct Ledger {
    rng: ChaCha20Rng,
    clock_ms: u64,
    issued: HashMap<(Nonce, Nonce), ChallengeStatus>,
    seen: BTreeSet<Nonce>,
}

/// A verifier instance. The nonce ledger and the registry are the only
/// mutable state; each sits behind its own lock, so bundles can be
/// verified from several threads.
pub struct Verifier {
    policy: VerifierPolicy,
    ledger: Mutex<Ledger>,
    registry: Mutex<AkRegistry>,
}

impl Verifier {
    pub fn new(policy: VerifierPolicy, seed: u64) -> Result<Self, PolicyError> {
        Self::with_registry(policy, seed, AkRegistry::new())
    }

    pub fn with_registry(
        policy: VerifierPolicy,
        seed: u64,
        registry: AkRegistry,
    ) -> Result<Self, PolicyError> {
        policy.validate()?;
        Ok(Self {
            policy,
            ledger: Mutex::new(Ledger {
                rng: ChaCha20Rng::seed_from_u64(seed),
                clock_ms: 0,
                issued: HashMap::new(),
                seen: BTreeSet::new(),
            }),
            registry: Mutex::new(registry),
        })
    }

    pub fn policy(&self) -> &VerifierPolicy {
        &self.policy
    }

    /// Moves the verifier's clock forward to `now_ms`; earlier values are
    /// ignored.
    pub fn observe_clock(&self, now_ms: u64) {
        let mut l = self.ledger.lock().expect("ledger lock");
        l.clock_ms = l.clock_ms.max(now_ms);
    }

    /// Two fresh independent nonces. Neither value is ever handed out
    /// twice by this instance.
    pub fn challenge(&self) -> Challenge {
        let mut l = self.ledger.lock().expect("ledger lock");
        let fresh = |l: &mut Ledger| loop {
            let mut n = [0u8; 32];
            l.rng.fill_bytes(&mut n);
            if l.seen.insert(Nonce(n)) {
                return Nonce(n);
            }
        };
        let td_nonce = fresh(&mut l);
        let tpm_nonce = fresh(&mut l);
        l.issued
            .insert((td_nonce, tpm_nonce), ChallengeStatus::Outstanding);
        Challenge {
            td_nonce,
            tpm_nonce,
            issued_at: l.clock_ms,
        }
    }

    pub fn challenge_status(&self, c: &Challenge) -> ChallengeStatus {
        let l = self.ledger.lock().expect("ledger lock");
        l.issued
            .get(&(c.td_nonce, c.tpm_nonce))
            .copied()
            .unwrap_or(ChallengeStatus::Unknown)
    }

    /// Appraises `bundle` as the answer to `challenge`, consuming the
    /// challenge whatever the outcome.
    pub fn verify_bundle(&self, bundle: &EvidenceBundle, challenge: &Challenge) -> Verdict {
        let status = {
            let mut l = self.ledger.lock().expect("ledger lock");
            l.clock_ms = l.clock_ms.max(bundle.timing.quote_received);
            match l.issued.get_mut(&(challenge.td_nonce, challenge.tpm_nonce)) {
                Some(s) => std::mem::replace(s, ChallengeStatus::Consumed),
                None => ChallengeStatus::Unknown,
            }
        };
        let mut registry = self.registry.lock().expect("registry lock");
        appraise(bundle, &self.policy, challenge, status, &mut registry)
    }

    pub fn verify_bytes(&self, bytes: &[u8], challenge: &Challenge) -> Result<Verdict, ParseError> {
        let bundle = evidence::deserialize(bytes)?;
        Ok(self.verify_bundle(&bundle, challenge))
    }

    pub fn registry(&self) -> AkRegistry {
        self.registry.lock().expect("registry lock").clone()
    }

    pub fn registry_register(&self, ak: crate::crypto::PublicKey, meta: RegistryEntry) -> Registration {
        self.registry.lock().expect("registry lock").register(ak, meta)
    }
}
