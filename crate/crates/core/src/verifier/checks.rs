// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeSet;

use super::{
    AkRegistry, AttackId, Challenge, ChallengeStatus, CheckId, CheckResult, Registration,
    RegistryEntry, Verdict, VerifierPolicy,
};
use crate::crypto::{digest, verify_chain, ChainVerdict, Certificate};
use crate::evidence::{check_rtmr_pcr_consistency, EvidenceBundle};
use crate::td::{BindingChannel, InTdCheck, REPORT_DATA_BINDING_LEN};

struct Outcome {
    passed: bool,
    detail: String,
    flags: BTreeSet<AttackId>,
}

impl Outcome {
    fn pass(detail: impl Into<String>) -> Self {
        Self {
            passed: true,
            detail: detail.into(),
            flags: BTreeSet::new(),
        }
    }

    fn fail(detail: impl Into<String>, flags: &[AttackId]) -> Self {
        Self {
            passed: false,
            detail: detail.into(),
            flags: flags.iter().copied().collect(),
        }
    }
}

/// Runs every check against `bundle` and folds the results into a
/// verdict. `status` is the ledger state of `challenge` before this
/// appraisal. When uniqueness is required, an AK with established
/// provenance is registered in `registry`.
pub fn appraise(
    bundle: &EvidenceBundle,
    policy: &VerifierPolicy,
    challenge: &Challenge,
    status: ChallengeStatus,
    registry: &mut AkRegistry,
) -> Verdict {
    let provenance = ak_provenance(bundle, policy, registry);
    let outcomes = [
        (CheckId::C1, c1_tee(bundle, policy)),
        (CheckId::C2, c2_quote(bundle, &provenance)),
        (CheckId::C3, c3_binding(bundle, policy)),
        (CheckId::C4, c4_freshness(bundle, challenge, status)),
        (CheckId::C5, c5_consistency(bundle, policy)),
        (CheckId::C6, c6_anchors(bundle, policy)),
        (CheckId::C7, c7_rtt(bundle, policy)),
        (CheckId::C8, c8_uniqueness(bundle, policy, provenance.is_ok(), registry)),
    ];
    let checks = outcomes
        .into_iter()
        .map(|(id, o)| {
            let disabled = policy.disabled_checks.contains(&id);
            CheckResult {
                check_id: id,
                name: id.name().to_owned(),
                passed: o.passed || disabled,
                detail: if disabled && !o.passed {
                    format!("disabled; would fail: {}", o.detail)
                } else {
                    o.detail
                },
                flags: if disabled { BTreeSet::new() } else { o.flags },
                disabled,
            }
        })
        .collect();
    Verdict::from_checks(checks)
}

fn c1_tee(b: &EvidenceBundle, policy: &VerifierPolicy) -> Outcome {
    let chain = match verify_chain(&b.td_report.qe_chain, &policy.trusted_tee_roots) {
        Ok(v) => v,
        Err(e) => return Outcome::fail(format!("QE chain: {e}"), &[AttackId::A1]),
    };
    if chain != ChainVerdict::Valid {
        return Outcome::fail(format!("QE chain: {chain:?}"), &[AttackId::A1]);
    }
    if !b.td_report.signature_valid() {
        return Outcome::fail("TD report signature does not verify under the QE key", &[AttackId::A1]);
    }
    Outcome::pass("QE chain reaches a trusted TEE root; report signature valid")
}

/// Establishes that the quoting AK lives on a TPM whose EK chains to a
/// trusted provider root. Returns the EK public key as hex.
fn ak_provenance(
    b: &EvidenceBundle,
    policy: &VerifierPolicy,
    registry: &AkRegistry,
) -> Result<String, String> {
    let ek = b.ek_cert_chain.leaf().ok_or("EK chain is empty")?;
    match verify_chain(&b.ek_cert_chain, &policy.trusted_provider_roots) {
        Ok(ChainVerdict::Valid) => {}
        Ok(v) => return Err(format!("EK chain: {v:?}")),
        Err(e) => return Err(format!("EK chain: {e}")),
    }
    match ek.claim("provider") {
        Some(p) if policy.allowed_providers.contains(p) => {}
        other => return Err(format!("EK provider {other:?} not allowed")),
    }
    let ek_hex = ek.subject_public.to_hex();
    let ak = &b.tpm_quote.ak_public;
    let cert_ok = b.ak_cert.as_ref().is_some_and(|c: &Certificate| {
        c.subject_public == *ak
            && c.claim("ek") == Some(ek_hex.as_str())
            && b.ek_cert_chain
                .certs
                .iter()
                .any(|issuer| c.is_signed_by(&issuer.subject_public))
    });
    let registry_ok = registry.lookup(ak).is_some_and(|e| e.issuer == ek_hex);
    if cert_ok || registry_ok {
        Ok(ek_hex)
    } else {
        Err("no AK certificate or registry entry ties the AK to the EK".into())
    }
}

fn c2_quote(b: &EvidenceBundle, provenance: &Result<String, String>) -> Outcome {
    let sig = b.tpm_quote.signature_valid();
    match (sig, provenance) {
        (true, Ok(_)) => Outcome::pass("quote signature valid; AK anchored to a trusted EK"),
        (false, Ok(_)) => Outcome::fail(
            "quote signature does not verify under the AK",
            &[AttackId::A1, AttackId::A4],
        ),
        (true, Err(why)) => Outcome::fail(format!("AK provenance: {why}"), &[AttackId::A1, AttackId::A5]),
        (false, Err(why)) => Outcome::fail(
            format!("quote signature invalid; AK provenance: {why}"),
            &[AttackId::A1, AttackId::A4, AttackId::A5],
        ),
    }
}

fn c3_binding(b: &EvidenceBundle, policy: &VerifierPolicy) -> Outcome {
    let ak_digest = digest(&b.tpm_quote.ak_public.0);
    let (bound, channel) = match policy.binding_channel {
        BindingChannel::Mrconfigid => (b.td_report.body.mrconfigid == ak_digest, "MRCONFIGID"),
        BindingChannel::ReportData => (
            b.td_report.report_data.binding() == &ak_digest.0[..REPORT_DATA_BINDING_LEN],
            "report_data",
        ),
    };
    if bound {
        return Outcome::pass(format!("{channel} carries digest(AK_pub)"));
    }
    let ek_ppid = b.ek_cert_chain.leaf().and_then(|c| c.claim("ppid"));
    let flags: &[AttackId] = match ek_ppid {
        Some(p) if p != b.td_report.body.ppid => &[AttackId::A2],
        Some(_) => &[AttackId::A5],
        None => &[AttackId::A2, AttackId::A5],
    };
    Outcome::fail(
        format!("{channel} does not carry digest(AK_pub) of the quoting key"),
        flags,
    )
}

fn c4_freshness(b: &EvidenceBundle, c: &Challenge, status: ChallengeStatus) -> Outcome {
    let mut problems = Vec::new();
    if status != ChallengeStatus::Outstanding {
        problems.push(format!("challenge is {status:?}"));
    }
    if b.nonces.td_nonce != c.td_nonce || b.nonces.tpm_nonce != c.tpm_nonce {
        problems.push("bundle nonces differ from the challenge".to_owned());
    }
    if b.td_report.report_data.nonce() != c.td_nonce {
        problems.push("report_data nonce differs from the TD challenge".to_owned());
    }
    if b.tpm_quote.nonce != c.tpm_nonce {
        problems.push("quote nonce differs from the TPM challenge".to_owned());
    }
    if problems.is_empty() {
        Outcome::pass("both nonces match an outstanding challenge")
    } else {
        Outcome::fail(problems.join("; "), &[AttackId::A1, AttackId::A4])
    }
}

fn c5_consistency(b: &EvidenceBundle, policy: &VerifierPolicy) -> Outcome {
    let result = check_rtmr_pcr_consistency(&b.td_report, &b.tpm_quote, &b.event_log);
    let mut problems: Vec<String> = result
        .mismatched()
        .map(|r| match r.tdx_register {
            Some(reg) => format!("{} row mismatched", reg.label()),
            None => format!("PCRs {:?} mismatched", r.pcr_set),
        })
        .collect();
    if let Some(e) = &result.log_error {
        problems.insert(0, format!("event log: {e}"));
    }
    if policy.binding_channel == BindingChannel::Mrconfigid
        && b.td_report.report_data.in_td_check() == Some(InTdCheck::Inconsistent)
    {
        problems.push("TD reported an inconsistent comparison".to_owned());
    }
    if problems.is_empty() {
        Outcome::pass("TD registers and quoted PCRs equal the event-log replay")
    } else {
        Outcome::fail(problems.join("; "), &[AttackId::A3])
    }
}

fn c6_anchors(b: &EvidenceBundle, policy: &VerifierPolicy) -> Outcome {
    let mut problems = Vec::new();
    let mut checked = Vec::new();
    if let Some(pins) = &policy.expected_pcr17_18 {
        for (&i, want) in pins {
            if b.tpm_quote.pcr(i) != Some(want) {
                problems.push(format!("PCR {i} differs from the pinned value"));
            }
        }
        checked.push("pinned anchors");
    }
    if let Some(cert) = &b.ak_cert {
        let listed: Vec<u8> = cert
            .claim("policy.pcrs")
            .unwrap_or_default()
            .split(',')
            .filter_map(|s| s.parse().ok())
            .collect();
        if listed.is_empty() {
            problems.push("AK certificate names no seal policy".to_owned());
        }
        for i in listed {
            let sealed = cert.claim(&format!("policy.pcr{i}"));
            let quoted = b.tpm_quote.pcr(i).map(|d| d.to_hex());
            if sealed.is_none() || sealed != quoted.as_deref() {
                problems.push(format!("quoted PCR {i} outside the AK seal policy"));
            }
        }
        checked.push("seal policy");
    }
    if problems.is_empty() {
        if checked.is_empty() {
            Outcome::pass("no anchors pinned and no AK certificate")
        } else {
            Outcome::pass(format!("{} satisfied", checked.join(" and ")))
        }
    } else {
        Outcome::fail(problems.join("; "), &[AttackId::A6])
    }
}

fn c7_rtt(b: &EvidenceBundle, policy: &VerifierPolicy) -> Outcome {
    let t = &b.timing;
    if t.quote_received < t.challenge_sent {
        return Outcome::fail("quote received before the challenge was sent", &[AttackId::A2]);
    }
    let rtt = t.rtt();
    if rtt <= policy.rtt_threshold_ms {
        Outcome::pass(format!("RTT {rtt} ms <= {} ms", policy.rtt_threshold_ms))
    } else {
        Outcome::fail(
            format!("RTT {rtt} ms exceeds {} ms", policy.rtt_threshold_ms),
            &[AttackId::A2],
        )
    }
}

fn c8_uniqueness(
    b: &EvidenceBundle,
    policy: &VerifierPolicy,
    provenance_ok: bool,
    registry: &mut AkRegistry,
) -> Outcome {
    if !policy.require_ak_registry_uniqueness {
        return Outcome::pass("uniqueness not required");
    }
    let ak = b.tpm_quote.ak_public;
    let platform_id = b.td_report.body.ppid.clone();
    let conflict = if provenance_ok {
        let meta = RegistryEntry {
            issuer: b.ek_cert_chain.leaf().map(|c| c.subject_public.to_hex()).unwrap_or_default(),
            timestamp: b.timing.quote_received,
            platform_id,
        };
        match registry.register(ak, meta) {
            Registration::Registered => None,
            Registration::Duplicate(existing) => Some(existing),
        }
    } else {
        registry
            .lookup(&ak)
            .filter(|e| e.platform_id != platform_id)
            .cloned()
    };
    match conflict {
        None => Outcome::pass("AK has no conflicting registration"),
        Some(e) => Outcome::fail(
            format!("AK already registered on platform `{}`", e.platform_id),
            &[AttackId::A5],
        ),
    }
}
