// SPDX-License-Identifier: Apache-2.0

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::CheckId;
use crate::crypto::{Certificate, Digest};
use crate::td::BindingChannel;

/// Honest quote latency of a discrete TPM, in milliseconds.
pub const DISCRETE_QUOTE_LATENCY_MS: u64 = 550;
/// Honest quote latency of a provider vTPM, in milliseconds.
pub const VTPM_QUOTE_LATENCY_MS: u64 = 300;

/// RTT bound for a single challenge: one quote plus a network round trip.
pub fn default_rtt_threshold(quote_latency_ms: u64, one_way_delay_ms: u64) -> u64 {
    quote_latency_ms + 2 * one_way_delay_ms
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PolicyError {
    #[error("rtt_threshold_ms must be positive")]
    ZeroThreshold,
    #[error("policy trusts no TEE root")]
    NoTeeRoots,
    #[error("policy trusts no provider root")]
    NoProviderRoots,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifierPolicy {
    pub trusted_tee_roots: Vec<Certificate>,
    pub trusted_provider_roots: Vec<Certificate>,
    /// Values of the `provider` claim accepted on EK certificates.
    pub allowed_providers: BTreeSet<String>,
    pub expected_pcr17_18: Option<BTreeMap<u8, Digest>>,
    pub rtt_threshold_ms: u64,
    pub require_ak_registry_uniqueness: bool,
    pub binding_channel: BindingChannel,
    #[doc(hidden)]
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub disabled_checks: BTreeSet<CheckId>,
}

impl VerifierPolicy {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.rtt_threshold_ms == 0 {
            return Err(PolicyError::ZeroThreshold);
        }
        if self.trusted_tee_roots.is_empty() {
            return Err(PolicyError::NoTeeRoots);
        }
        if self.trusted_provider_roots.is_empty() {
            return Err(PolicyError::NoProviderRoots);
        }
        Ok(())
    }

    /// Test hook: the named check is still evaluated and reported, but
    /// its failure no longer rejects or raises flags.
    #[doc(hidden)]
    pub fn with_disabled(mut self, check: CheckId) -> Self {
        self.disabled_checks.insert(check);
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_formula() {
        assert_eq!(default_rtt_threshold(DISCRETE_QUOTE_LATENCY_MS, 40), 630);
        assert_eq!(default_rtt_threshold(VTPM_QUOTE_LATENCY_MS, 0), 300);
    }

    #[test]
    fn zero_threshold_rejected() {
        let p = VerifierPolicy {
            trusted_tee_roots: Vec::new(),
            trusted_provider_roots: Vec::new(),
            allowed_providers: BTreeSet::new(),
            expected_pcr17_18: None,
            rtt_threshold_ms: 0,
            require_ak_registry_uniqueness: false,
            binding_channel: BindingChannel::Mrconfigid,
            disabled_checks: BTreeSet::new(),
        };
        assert_eq!(p.validate().unwrap_err(), PolicyError::ZeroThreshold);
    }
}
