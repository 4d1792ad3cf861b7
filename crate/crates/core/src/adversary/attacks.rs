// SPDX-License-Identifier: Apache-2.0

//! Scenario generators. Everything here acts through the host
//! capabilities [`World`] exposes, plus keys the attacker mints itself.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;

use super::network::{Endpoint, Message};
use super::scenario::{ScenarioId, ScenarioSpec};
use super::world::{
    Mirror, QuotingKey, TpmRef, World, WorldError, PROVIDER, SECOND_PLATFORM, TARGET_PLATFORM,
    TENANT_TD,
};
use crate::crypto::{claims, digest, issue_cert, keygen, CertChain, Certificate, Digest, KeyKind, KeyPair, Nonce};
use crate::evidence::{combined_event_log, BundleBuilder, EvidenceBundle, Nonces, Timing};
use crate::platform::measured_launch;
use crate::td::{sign_report_body, InTdCheck, TdReport};
use crate::crypto::SIGNATURE_ALGORITHM;
use crate::tpm::{default_policy_pcrs, default_quote_selection, QuotedPcr, TpmKind, TpmQuote, TpmState};
use crate::verifier::{Challenge, Verifier};

pub(super) struct AttackOutput {
    pub bundle: EvidenceBundle,
    pub challenge: Challenge,
    pub meta: BTreeMap<String, String>,
}

impl AttackOutput {
    fn new(bundle: EvidenceBundle, challenge: Challenge) -> Self {
        Self {
            bundle,
            challenge,
            meta: BTreeMap::new(),
        }
    }

    fn note(mut self, k: &str, v: impl Into<String>) -> Self {
        self.meta.insert(k.to_owned(), v.into());
        self
    }
}

type Outcome = Result<AttackOutput, WorldError>;

pub(super) fn run(spec: &ScenarioSpec, variant: &str, w: &mut World, v: &Verifier) -> Outcome {
    match (spec.scenario, variant) {
        (ScenarioId::Honest, _) => honest(w, v),
        (ScenarioId::A1, "forge_quote") => a1_forge_quote(w, v, false),
        (ScenarioId::A1, "falsify_pcrs") => a1_forge_quote(w, v, true),
        (ScenarioId::A1, "forge_report") => a1_forge_report(w, v),
        (ScenarioId::A2MixMatch, _) => a2_mixmatch(w, v, spec.param("decoy_delay_ms").unwrap_or(0)),
        (ScenarioId::A2Frankenstein, _) => a2_frankenstein(w, v),
        (ScenarioId::A3, "drop_pcr") => a3_drop(w, v),
        (ScenarioId::A3, "inject_pcr") => a3_inject(w, v),
        (ScenarioId::A4, "replay") => a4_replay(w, v),
        (ScenarioId::A4, "tamper") => a4_tamper(w, v),
        (ScenarioId::A5, "replace_ak") => a5_replace_ak(w, v),
        (ScenarioId::A5, "spoof_ek") => a5_spoof_ek(w, v),
        (ScenarioId::A5, "clone_ak") => a5_clone_ak(w, v),
        (ScenarioId::A6, "reprovision_ak") => a6_tampered_host(w, v, false),
        (ScenarioId::A6, "spoofed_ak") => a6_tampered_host(w, v, true),
        (id, other) => Err(WorldError::UnsupportedVariant {
            scenario: id.as_str().to_owned(),
            variant: other.to_owned(),
            deployment: w.config().deployment,
        }),
    }
}

fn challenge(w: &World, v: &Verifier) -> Challenge {
    v.observe_clock(w.now());
    v.challenge()
}

fn mirror_all(w: &mut World, td: &str, target: &TpmRef) -> Result<(), WorldError> {
    w.run_workload(td, |_, _| Mirror::To(target.clone()))
}

/// Launched platforms, the deployment's quoting AK on the target host and
/// the tenant TD bound to it with its workload mirrored.
fn honest_setup(w: &mut World) -> Result<QuotingKey, WorldError> {
    w.launch_all()?;
    let key = w.provision_quoting(TARGET_PLATFORM)?;
    w.launch_td(TENANT_TD, TARGET_PLATFORM, &key.public)?;
    mirror_all(w, TENANT_TD, &key.tpm)?;
    Ok(key)
}

fn honest_round(w: &mut World, v: &Verifier, td: &str, key: &QuotingKey) -> Result<(EvidenceBundle, Challenge), WorldError> {
    let c = challenge(w, v);
    let b = w.exchange(&c, |w, c, at| w.honest_evidence(td, key, c, at))?;
    Ok((b, c))
}

fn honest(w: &mut World, v: &Verifier) -> Outcome {
    let key = honest_setup(w)?;
    let (b, c) = honest_round(w, v, TENANT_TD, &key)?;
    Ok(AttackOutput::new(b, c))
}

fn attacker_key(w: &World, label: &str, kind: KeyKind) -> Result<KeyPair, WorldError> {
    Ok(keygen(format!("attacker:{}:{label}", w.seed()).as_bytes(), kind)?)
}

/// A quote produced in software with a key the attacker holds.
fn software_quote(key: &KeyPair, pcrs: BTreeMap<u8, Digest>, nonce: &Nonce) -> TpmQuote {
    let pcrs: Vec<QuotedPcr> = pcrs
        .into_iter()
        .map(|(index, digest)| QuotedPcr { index, digest })
        .collect();
    let signature = key.sign(&TpmQuote::signed_bytes(key.public(), &pcrs, nonce));
    TpmQuote {
        ak_public: *key.public(),
        algorithm: SIGNATURE_ALGORITHM.into(),
        nonce: *nonce,
        pcrs,
        signature,
    }
}

fn assemble(
    report: TdReport,
    quote: TpmQuote,
    ek_chain: CertChain,
    ak_cert: Option<Certificate>,
    log: Vec<crate::evidence::LogEntry>,
    c: &Challenge,
) -> Result<EvidenceBundle, WorldError> {
    Ok(BundleBuilder::new()
        .td_report(report)
        .tpm_quote(quote)
        .ek_cert_chain(ek_chain)
        .ak_cert(ak_cert)
        .event_log(log)
        .nonces(Nonces {
            td_nonce: c.td_nonce,
            tpm_nonce: c.tpm_nonce,
        })
        .timing(Timing::default())
        .build()?)
}

/// Signs the real TPM's PCR values (optionally with one register
/// falsified) with an attacker key the TD was launched against.
fn a1_forge_quote(w: &mut World, v: &Verifier, falsify: bool) -> Outcome {
    w.launch_all()?;
    let real = w.provision_quoting(TARGET_PLATFORM)?;
    let fake = attacker_key(w, "quote-key", KeyKind::Ak)?;
    w.launch_td(TENANT_TD, TARGET_PLATFORM, fake.public())?;
    mirror_all(w, TENANT_TD, &real.tpm)?;
    let falsified = falsify.then(|| {
        let rng = w.rng();
        let mut d = [0u8; 48];
        rng.fill(&mut d[..]);
        (rng.gen_range(0u8..=15), Digest(d))
    });
    let c = challenge(w, v);
    let b = w.exchange(&c, |w, c, at| {
        let tpm = w.tpm(&real.tpm)?;
        let mut pcrs = tpm.read_pcrs(&default_quote_selection())?;
        if let Some((i, d)) = falsified {
            pcrs.insert(i, d);
        }
        let quote = software_quote(&fake, pcrs, &c.tpm_nonce);
        let log = combined_event_log(tpm.log(), w.td(TENANT_TD)?.guest_log());
        let report = w.td_report(TENANT_TD, &c.td_nonce, InTdCheck::NotEvaluated)?;
        let b = assemble(report, quote, tpm.ek_chain(), None, log, c)?;
        Ok((b, at + w.quote_latency(&real.tpm)?))
    })?;
    let out = AttackOutput::new(b, c);
    Ok(match falsified {
        Some((i, _)) => out.note("falsified_pcr", i.to_string()),
        None => out,
    })
}

/// Re-signs the honest report body under a look-alike QE chain.
fn a1_forge_report(w: &mut World, v: &Verifier) -> Outcome {
    let key = honest_setup(w)?;
    let root_key = attacker_key(w, "tee-root", KeyKind::Ca)?;
    let qe = attacker_key(w, "qe", KeyKind::Qe)?;
    let c = challenge(w, v);
    let b = w.exchange(&c, |w, c, at| {
        let (mut b, ready) = w.honest_evidence(TENANT_TD, &key, c, at)?;
        let genuine = &b.td_report.qe_chain;
        let root_claims = genuine.root().map(|r| r.claims.clone()).unwrap_or_default();
        let leaf_claims = genuine.leaf().map(|l| l.claims.clone()).unwrap_or_default();
        let root = issue_cert(&root_key, root_key.public(), root_claims);
        let leaf = issue_cert(&root_key, qe.public(), leaf_claims);
        let chain = CertChain::new(vec![leaf, root]);
        b.td_report = sign_report_body(b.td_report.body.clone(), b.td_report.report_data, &qe, &chain);
        Ok((b, ready))
    })?;
    Ok(AttackOutput::new(b, c))
}

/// TD evidence from X, bound to X's AK; quote obtained from the decoy Y
/// the verifier believes it is talking to.
fn a2_mixmatch(w: &mut World, v: &Verifier, decoy_delay: u64) -> Outcome {
    w.launch_all()?;
    let decoy = w.provision_quoting(TARGET_PLATFORM)?;
    let local = w.provision_quoting(SECOND_PLATFORM)?;
    w.launch_td(TENANT_TD, SECOND_PLATFORM, &local.public)?;
    mirror_all(w, TENANT_TD, &local.tpm)?;
    w.link_mut(Endpoint::Host, Endpoint::Remote).one_way_delay_ms = decoy_delay;
    w.link_mut(Endpoint::Remote, Endpoint::Host).one_way_delay_ms = decoy_delay;
    let c = challenge(w, v);
    let b = w.exchange(&c, |w, c, at| {
        let back = w.relay_round_trip(at, w.quote_latency(&decoy.tpm)?, c.tpm_nonce)?;
        let y = w.tpm(&decoy.tpm)?;
        let quote = y.tpm_quote(decoy.handle, &default_quote_selection(), &c.tpm_nonce)?;
        let log = combined_event_log(y.log(), w.td(TENANT_TD)?.guest_log());
        let report = w.td_report(TENANT_TD, &c.td_nonce, InTdCheck::NotEvaluated)?;
        let ak_cert = y.ak(decoy.handle)?.ak_cert().cloned();
        Ok((assemble(report, quote, y.ek_chain(), ak_cert, log, c)?, back))
    })?;
    Ok(AttackOutput::new(b, c).note("decoy_delay_ms", decoy_delay.to_string()))
}

/// TD on attacker machine X bound to honest host Y's AK; all TPM traffic,
/// guest mirrors included, is relayed to Y.
fn a2_frankenstein(w: &mut World, v: &Verifier) -> Outcome {
    w.launch_all()?;
    let remote = w.provision_quoting(TARGET_PLATFORM)?;
    w.launch_td(TENANT_TD, SECOND_PLATFORM, &remote.public)?;
    mirror_all(w, TENANT_TD, &remote.tpm)?;
    let c = challenge(w, v);
    let b = w.exchange(&c, |w, c, at| {
        let back = w.relay_round_trip(at, w.quote_latency(&remote.tpm)?, c.tpm_nonce)?;
        let (b, _) = w.honest_evidence(TENANT_TD, &remote, c, at)?;
        Ok((b, back))
    })?;
    let r = w.config().relay_delay_ms;
    Ok(AttackOutput::new(b, c).note("relay_delay_ms", r.to_string()))
}

fn a3_drop(w: &mut World, v: &Verifier) -> Outcome {
    w.launch_all()?;
    let key = w.provision_quoting(TARGET_PLATFORM)?;
    w.launch_td(TENANT_TD, TARGET_PLATFORM, &key.public)?;
    let mirrored: Vec<usize> = std::iter::once(0)
        .chain(
            w.workload()
                .iter()
                .enumerate()
                .filter(|(_, e)| e.pcr_index.is_some())
                .map(|(j, _)| j + 1),
        )
        .collect();
    let drop = mirrored[w.rng().gen_range(0..mirrored.len())];
    let target = key.tpm.clone();
    w.run_workload(TENANT_TD, |i, _| {
        if i == drop {
            Mirror::Skip
        } else {
            Mirror::To(target.clone())
        }
    })?;
    let (b, c) = honest_round(w, v, TENANT_TD, &key)?;
    Ok(AttackOutput::new(b, c).note("dropped_entry", drop.to_string()))
}

fn a3_inject(w: &mut World, v: &Verifier) -> Outcome {
    let key = honest_setup(w)?;
    const MAPPED: [u8; 15] = [0, 1, 2, 3, 4, 5, 7, 8, 9, 10, 11, 12, 13, 14, 15];
    let pcr = MAPPED[w.rng().gen_range(0..MAPPED.len())];
    let mut junk = [0u8; 16];
    w.rng().fill(&mut junk);
    w.tpm_mut(&key.tpm)?
        .extend_measurement(pcr, digest(&junk), "unlogged", crate::tpm::Scope::Guest)?;
    let (b, c) = honest_round(w, v, TENANT_TD, &key)?;
    Ok(AttackOutput::new(b, c).note("injected_pcr", pcr.to_string()))
}

/// An earlier accepted bundle, captured on the wire, answers a new
/// challenge.
fn a4_replay(w: &mut World, v: &Verifier) -> Outcome {
    let key = honest_setup(w)?;
    let (first, first_challenge) = honest_round(w, v, TENANT_TD, &key)?;
    let prior = v.verify_bundle(&first, &first_challenge);
    w.advance_clock(1_000);
    let stale = w
        .link_mut(Endpoint::Host, Endpoint::Verifier)
        .replay_buffer
        .iter()
        .rev()
        .find_map(|m| match m {
            Message::Evidence(b) => Some((**b).clone()),
            _ => None,
        })
        .expect("first round recorded its evidence");
    let c = challenge(w, v);
    let b = w.exchange(&c, move |_, _, at| Ok((stale, at)))?;
    Ok(AttackOutput::new(b, c).note("prior_round_accepted", prior.accepted.to_string()))
}

/// Flips one byte of the quote signature in flight.
fn a4_tamper(w: &mut World, v: &Verifier) -> Outcome {
    let key = honest_setup(w)?;
    let byte = w.rng().gen_range(0..64usize);
    w.link_mut(Endpoint::Host, Endpoint::Verifier).tamper_hook = Some(Arc::new(move |m| match m {
        Message::Evidence(mut b) => {
            b.tpm_quote.signature.0[byte] ^= 0x01;
            Some(Message::Evidence(b))
        }
        other => Some(other),
    }));
    let (b, c) = honest_round(w, v, TENANT_TD, &key)?;
    Ok(AttackOutput::new(b, c).note("flipped_signature_byte", byte.to_string()))
}

/// Quotes with a second, genuinely certified AK of the same TPM instead of
/// the one the TD embeds.
fn a5_replace_ak(w: &mut World, v: &Verifier) -> Outcome {
    let key = honest_setup(w)?;
    let substitute = w.provision_ak(&key.tpm, "substitute")?;
    let c = challenge(w, v);
    let b = w.exchange(&c, |w, c, at| w.honest_evidence(TENANT_TD, &substitute, c, at))?;
    Ok(AttackOutput::new(b, c))
}

/// A software TPM with a look-alike provider chain, replaying the real
/// host launch so every measurement is plausible.
fn a5_spoof_ek(w: &mut World, v: &Verifier) -> Outcome {
    w.launch_all()?;
    let real = w.platform(TARGET_PLATFORM)?;
    let ek_claims = real.tpm().ek_cert().claims.clone();
    let stack = real.stack().clone();
    let fake_ca = attacker_key(w, "provider-ca", KeyKind::Ca)?;
    let fake_root = issue_cert(
        &fake_ca,
        fake_ca.public(),
        claims([("provider", PROVIDER), ("role", "provider-root")]),
    );
    let mut ek_claims = ek_claims;
    ek_claims.remove("role");
    ek_claims.remove("tpm");
    let mut fake = TpmState::init(
        format!("attacker:{}:ek", w.seed()).as_bytes(),
        &fake_ca,
        ek_claims,
        TpmKind::Discrete,
    )?
    .with_issuer_root(fake_root);
    measured_launch(&stack, &mut fake)?;
    let handle = fake.create_sealed_ak(
        format!("attacker:{}:ak", w.seed()).as_bytes(),
        &default_policy_pcrs(),
        Some(&fake_ca),
    )?;
    let ak_pub = *fake.ak(handle)?.public();
    w.launch_td(TENANT_TD, TARGET_PLATFORM, &ak_pub)?;
    // Mirrors go to the software TPM instead of any world TPM.
    let mut mirrors = Vec::new();
    w.run_workload(TENANT_TD, |_, e| {
        mirrors.push(e.clone());
        Mirror::Skip
    })?;
    for e in &mirrors {
        if let Some(p) = e.pcr_index {
            fake.extend_measurement(p, e.event_digest, &e.description, crate::tpm::Scope::Guest)?;
        }
    }
    // A software TPM answers no slower than the deployment's own.
    let latency = w.config().deployment.quote_latency_ms();
    let c = challenge(w, v);
    let b = w.exchange(&c, |w, c, at| {
        let quote = fake.tpm_quote(handle, &default_quote_selection(), &c.tpm_nonce)?;
        let log = combined_event_log(fake.log(), w.td(TENANT_TD)?.guest_log());
        let report = w.td_report(TENANT_TD, &c.td_nonce, InTdCheck::NotEvaluated)?;
        let ak_cert = fake.ak(handle)?.ak_cert().cloned();
        let b = assemble(report, quote, fake.ek_chain(), ak_cert, log, c)?;
        Ok((b, at + latency))
    })?;
    Ok(AttackOutput::new(b, c))
}

/// The provider's vTPM state, AK included, copied to a second machine
/// after the original AK was already attested from the first.
fn a5_clone_ak(w: &mut World, v: &Verifier) -> Outcome {
    let key = honest_setup(w)?;
    let TpmRef::Vtpm(vtpm_id) = key.tpm.clone() else {
        return Err(WorldError::UnsupportedVariant {
            scenario: ScenarioId::A5.as_str().into(),
            variant: "clone_ak".into(),
            deployment: w.config().deployment,
        });
    };
    let (first, first_challenge) = honest_round(w, v, TENANT_TD, &key)?;
    let prior = v.verify_bundle(&first, &first_challenge);
    w.clone_vtpm(&vtpm_id, SECOND_PLATFORM, "vtpm-clone")?;
    let clone = QuotingKey {
        tpm: TpmRef::Vtpm("vtpm-clone".into()),
        ..key.clone()
    };
    w.launch_td("td-clone", SECOND_PLATFORM, &key.public)?;
    mirror_all(w, "td-clone", &clone.tpm)?;
    let (b, c) = honest_round(w, v, "td-clone", &clone)?;
    Ok(AttackOutput::new(b, c).note("prior_round_accepted", prior.accepted.to_string()))
}

/// Host relaunched with a modified vTPM binary. The original AK refuses to
/// quote; the attacker then either gets a fresh AK provisioned on the
/// tampered state or signs quotes with its own key.
fn a6_tampered_host(w: &mut World, v: &Verifier, spoof: bool) -> Outcome {
    w.launch_all()?;
    let original = w.provision_quoting(TARGET_PLATFORM)?;
    let mut tampered = w.reference_stack().clone();
    let at = w.rng().gen_range(0..tampered.vtpm_binary.len());
    tampered.vtpm_binary[at] ^= 0x5a;
    w.platform_mut(TARGET_PLATFORM)?.reboot_with(tampered)?;
    if let TpmRef::Vtpm(id) = &original.tpm {
        w.clone_vtpm(id, TARGET_PLATFORM, id)?;
    }
    let old_quote = w
        .tpm(&original.tpm)?
        .tpm_quote(original.handle, &default_quote_selection(), &Nonce([0; 32]));
    let old_outcome = match old_quote {
        Ok(_) => "quoted".to_owned(),
        Err(e) => e.to_string(),
    };
    let out = if spoof {
        let fake = attacker_key(w, "spoofed-ak", KeyKind::Ak)?;
        w.launch_td(TENANT_TD, TARGET_PLATFORM, fake.public())?;
        mirror_all(w, TENANT_TD, &original.tpm)?;
        let c = challenge(w, v);
        let target = original.tpm.clone();
        let b = w.exchange(&c, |w, c, at| {
            let tpm = w.tpm(&target)?;
            let quote = software_quote(&fake, tpm.read_pcrs(&default_quote_selection())?, &c.tpm_nonce);
            let log = combined_event_log(tpm.log(), w.td(TENANT_TD)?.guest_log());
            let report = w.td_report(TENANT_TD, &c.td_nonce, InTdCheck::NotEvaluated)?;
            let b = assemble(report, quote, tpm.ek_chain(), None, log, c)?;
            Ok((b, at + w.quote_latency(&target)?))
        })?;
        AttackOutput::new(b, c)
    } else {
        let fresh = w.provision_ak(&original.tpm, "reprovisioned")?;
        w.launch_td(TENANT_TD, TARGET_PLATFORM, &fresh.public)?;
        mirror_all(w, TENANT_TD, &fresh.tpm)?;
        let (b, c) = honest_round(w, v, TENANT_TD, &fresh)?;
        AttackOutput::new(b, c)
    };
    Ok(out
        .note("original_ak_quote", old_outcome)
        .note("mutated_vtpm_byte", at.to_string()))
}
