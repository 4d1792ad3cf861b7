// SPDX-License-Identifier: Apache-2.0

use std::path::Path;

use serde::{Deserialize, Serialize};

use dcea_core::crypto::Nonce;
use dcea_core::evidence::{self, from_json};
use dcea_core::verifier::{appraise, AkRegistry, Challenge, ChallengeStatus, Verdict, VerifierPolicy};

use crate::error::{read, CliError};

/// Verifier state for offline appraisal: the policy, the challenge the
/// bundle answers and the AK registry as it stood before the bundle
/// arrived. Without a challenge, freshness cannot be established.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyFile {
    pub policy: VerifierPolicy,
    #[serde(default)]
    pub challenge: Option<Challenge>,
    #[serde(default)]
    pub registry: AkRegistry,
}

impl PolicyFile {
    pub fn to_json(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec_pretty(self).expect("policy file serializes");
        out.push(b'\n');
        out
    }
}

pub fn cmd_verify(bundle_path: &Path, policy_path: &Path) -> Result<Verdict, CliError> {
    let bundle = evidence::deserialize(&read(bundle_path)?)
        .map_err(|e| CliError::parse(bundle_path, e))?;
    let file: PolicyFile =
        from_json(&read(policy_path)?).map_err(|e| CliError::parse(policy_path, e))?;
    file.policy
        .validate()
        .map_err(|e| CliError::Usage(format!("{}: {e}", policy_path.display())))?;
    let (challenge, status) = match file.challenge {
        Some(c) => (c, ChallengeStatus::Outstanding),
        None => (
            Challenge {
                td_nonce: Nonce([0; 32]),
                tpm_nonce: Nonce([0; 32]),
                issued_at: 0,
            },
            ChallengeStatus::Unknown,
        ),
    };
    let mut registry = file.registry;
    Ok(appraise(&bundle, &file.policy, &challenge, status, &mut registry))
}
