// SPDX-License-Identifier: Apache-2.0

//! Simulated TPM / vTPM.
//!
//! One implementation serves both the discrete chip and the provider's
//! vTPM; they differ only in [`TpmKind`] and in who issued the EK
//! certificate. Attestation keys are sealed to a snapshot of selected PCR
//! values and refuse to quote once the live registers drift from it.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{
    self, digest, extend, issue_cert, CertChain, Certificate, CryptoError, Digest, KeyKind,
    KeyPair, Nonce, PublicKey, Signature, SIGNATURE_ALGORITHM,
};
use crate::encoding::CanonicalWriter;

pub const PCR_COUNT: usize = 24;

/// PCRs the attestation key is sealed to unless configured otherwise.
pub const DEFAULT_POLICY_PCRS: [u8; 2] = [17, 18];

/// PCRs included in a protocol quote: the guest-mirrored range 0..=15 and
/// the measured-launch anchors 17 and 18.
pub fn default_quote_selection() -> BTreeSet<u8> {
    (0u8..=15).chain(DEFAULT_POLICY_PCRS).collect()
}

pub fn default_policy_pcrs() -> BTreeSet<u8> {
    DEFAULT_POLICY_PCRS.into_iter().collect()
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TpmError {
    #[error("PCR index {0} out of range")]
    InvalidPcrIndex(u8),
    #[error("AK policy must name at least one PCR")]
    EmptyPolicy,
    #[error("PCR values no longer satisfy the AK seal policy (PCR {pcr})")]
    PolicyViolation { pcr: u8 },
    #[error("unknown AK handle {0:?}")]
    UnknownAk(AkHandle),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

fn check_index(index: u8) -> Result<usize, TpmError> {
    let i = usize::from(index);
    if i < PCR_COUNT {
        Ok(i)
    } else {
        Err(TpmError::InvalidPcrIndex(index))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PcrBank {
    registers: [Digest; PCR_COUNT],
}

impl Default for PcrBank {
    fn default() -> Self {
        Self {
            registers: [Digest::ZERO; PCR_COUNT],
        }
    }
}

impl PcrBank {
    pub fn get(&self, index: u8) -> Option<&Digest> {
        self.registers.get(usize::from(index))
    }

    pub fn registers(&self) -> &[Digest; PCR_COUNT] {
        &self.registers
    }
}

/// Which party caused an extension: the host platform (measured launch,
/// launch anchors mirrored into a vTPM) or a guest TD mirroring its own
/// runtime measurements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Host,
    Guest,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventLogEntry {
    pub pcr_index: u8,
    pub event_digest: Digest,
    pub description: String,
    pub scope: Scope,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TpmKind {
    Discrete,
    Virtual,
}

impl TpmKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TpmKind::Discrete => "discrete",
            TpmKind::Virtual => "virtual",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AkHandle(pub u32);

/// An attestation key resident in the TPM, usable only while the live PCRs
/// match `policy`.
#[derive(Debug, Clone)]
pub struct SealedAk {
    keypair: KeyPair,
    policy: BTreeMap<u8, Digest>,
    ak_cert: Option<Certificate>,
}

impl SealedAk {
    pub fn public(&self) -> &PublicKey {
        self.keypair.public()
    }

    pub fn policy(&self) -> &BTreeMap<u8, Digest> {
        &self.policy
    }

    pub fn ak_cert(&self) -> Option<&Certificate> {
        self.ak_cert.as_ref()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuotedPcr {
    pub index: u8,
    pub digest: Digest,
}

/// AK-signed statement over selected PCR values and a nonce.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TpmQuote {
    pub ak_public: PublicKey,
    pub algorithm: String,
    pub nonce: Nonce,
    pub pcrs: Vec<QuotedPcr>,
    pub signature: Signature,
}

impl TpmQuote {
    pub fn signed_bytes(ak_public: &PublicKey, pcrs: &[QuotedPcr], nonce: &Nonce) -> Vec<u8> {
        let mut w = CanonicalWriter::new("dcea.tpm-quote.v1");
        w.bytes(&ak_public.0).count(pcrs.len());
        for p in pcrs {
            w.u64(u64::from(p.index)).bytes(&p.digest.0);
        }
        w.bytes(&nonce.0);
        w.finish()
    }

    /// Signature check under the embedded AK. Malformed keys count as
    /// invalid.
    pub fn signature_valid(&self) -> bool {
        self.algorithm == SIGNATURE_ALGORITHM
            && crypto::verify(
                &self.ak_public,
                &Self::signed_bytes(&self.ak_public, &self.pcrs, &self.nonce),
                &self.signature,
            )
            .unwrap_or(false)
    }

    pub fn pcr(&self, index: u8) -> Option<&Digest> {
        self.pcrs
            .iter()
            .find(|p| p.index == index)
            .map(|p| &p.digest)
    }
}

#[derive(Debug, Clone)]
pub struct TpmState {
    pcrs: PcrBank,
    log: Vec<EventLogEntry>,
    ek: KeyPair,
    ek_cert: Certificate,
    issuer_root: Option<Certificate>,
    aks: BTreeMap<AkHandle, SealedAk>,
    kind: TpmKind,
    next_handle: u32,
}

impl TpmState {
    /// Manufactures a TPM: EK derived from `ek_seed`, EK certificate issued
    /// by `issuer` with the given claims plus `kind`/`role` markers.
    pub fn init(
        ek_seed: &[u8],
        issuer: &KeyPair,
        claims: BTreeMap<String, String>,
        kind: TpmKind,
    ) -> Result<Self, TpmError> {
        let ek = crypto::keygen(ek_seed, KeyKind::Ek)?;
        let mut claims = claims;
        claims.insert("role".into(), "EK".into());
        claims.insert("tpm".into(), kind.as_str().into());
        let ek_cert = issue_cert(issuer, ek.public(), claims);
        Ok(Self {
            pcrs: PcrBank::default(),
            log: Vec::new(),
            ek,
            ek_cert,
            issuer_root: None,
            aks: BTreeMap::new(),
            kind,
            next_handle: 1,
        })
    }

    /// Attaches the issuer's root certificate so [`Self::ek_chain`] can
    /// return a complete chain.
    pub fn with_issuer_root(mut self, root: Certificate) -> Self {
        self.issuer_root = Some(root);
        self
    }

    pub fn kind(&self) -> TpmKind {
        self.kind
    }

    pub fn pcrs(&self) -> &PcrBank {
        &self.pcrs
    }

    pub fn log(&self) -> &[EventLogEntry] {
        &self.log
    }

    pub fn ek_public(&self) -> &PublicKey {
        self.ek.public()
    }

    pub fn ek_cert(&self) -> &Certificate {
        &self.ek_cert
    }

    pub fn ek_chain(&self) -> CertChain {
        let mut certs = vec![self.ek_cert.clone()];
        certs.extend(self.issuer_root.clone());
        CertChain::new(certs)
    }

    pub fn ak(&self, handle: AkHandle) -> Result<&SealedAk, TpmError> {
        self.aks.get(&handle).ok_or(TpmError::UnknownAk(handle))
    }

    pub fn ak_handles(&self) -> impl Iterator<Item = AkHandle> + '_ {
        self.aks.keys().copied()
    }

    pub fn pcr_extend(
        &mut self,
        index: u8,
        event: &[u8],
        description: &str,
    ) -> Result<Digest, TpmError> {
        self.extend_measurement(index, digest(event), description, Scope::Host)
    }

    /// Extends with an already-computed event digest.
    pub fn extend_measurement(
        &mut self,
        index: u8,
        event_digest: Digest,
        description: &str,
        scope: Scope,
    ) -> Result<Digest, TpmError> {
        let i = check_index(index)?;
        let next = extend(&self.pcrs.registers[i], &event_digest);
        self.pcrs.registers[i] = next;
        self.log.push(EventLogEntry {
            pcr_index: index,
            event_digest,
            description: description.to_owned(),
            scope,
        });
        Ok(next)
    }

    pub fn read_pcrs(&self, selection: &BTreeSet<u8>) -> Result<BTreeMap<u8, Digest>, TpmError> {
        selection
            .iter()
            .map(|&i| Ok((i, self.pcrs.registers[check_index(i)?])))
            .collect()
    }

    /// Creates an AK sealed to the current values of `policy_pcrs`. With an
    /// issuer, also issues an AK certificate naming this TPM's EK and the
    /// sealed values.
    pub fn create_sealed_ak(
        &mut self,
        seed: &[u8],
        policy_pcrs: &BTreeSet<u8>,
        issuer: Option<&KeyPair>,
    ) -> Result<AkHandle, TpmError> {
        if policy_pcrs.is_empty() {
            return Err(TpmError::EmptyPolicy);
        }
        let policy = self.read_pcrs(policy_pcrs)?;
        let keypair = crypto::keygen(seed, KeyKind::Ak)?;
        let ak_cert = issuer.map(|ca| issue_cert(ca, keypair.public(), self.ak_claims(&policy)));
        let handle = AkHandle(self.next_handle);
        self.next_handle += 1;
        self.aks.insert(
            handle,
            SealedAk {
                keypair,
                policy,
                ak_cert,
            },
        );
        Ok(handle)
    }

    fn ak_claims(&self, policy: &BTreeMap<u8, Digest>) -> BTreeMap<String, String> {
        let mut claims = BTreeMap::new();
        claims.insert("role".into(), "AK".into());
        claims.insert("ek".into(), self.ek.public().to_hex());
        let pcrs: Vec<String> = policy.keys().map(u8::to_string).collect();
        claims.insert("policy.pcrs".into(), pcrs.join(","));
        for (i, d) in policy {
            claims.insert(format!("policy.pcr{i}"), d.to_hex());
        }
        for key in ["platform_id", "ppid", "provider", "region"] {
            if let Some(v) = self.ek_cert.claim(key) {
                claims.insert(key.into(), v.into());
            }
        }
        claims
    }

    /// Signs the selected PCRs and `nonce` with the AK, provided the live
    /// registers still equal the AK's sealed policy.
    pub fn tpm_quote(
        &self,
        handle: AkHandle,
        selection: &BTreeSet<u8>,
        nonce: &Nonce,
    ) -> Result<TpmQuote, TpmError> {
        let ak = self.ak(handle)?;
        for (&i, sealed) in &ak.policy {
            if self.pcrs.registers[usize::from(i)] != *sealed {
                return Err(TpmError::PolicyViolation { pcr: i });
            }
        }
        let pcrs: Vec<QuotedPcr> = self
            .read_pcrs(selection)?
            .into_iter()
            .map(|(index, digest)| QuotedPcr { index, digest })
            .collect();
        let ak_public = *ak.public();
        let signature = ak
            .keypair
            .sign(&TpmQuote::signed_bytes(&ak_public, &pcrs, nonce));
        Ok(TpmQuote {
            ak_public,
            algorithm: SIGNATURE_ALGORITHM.into(),
            nonce: *nonce,
            pcrs,
            signature,
        })
    }

    /// Power cycle: PCRs back to zero and the log cleared. The EK and the
    /// sealed AK objects persist.
    pub fn reboot(&self) -> Self {
        Self {
            pcrs: PcrBank::default(),
            log: Vec::new(),
            ..self.clone()
        }
    }
}

/// Folds a TPM event log from reset.
pub fn replay_tpm_log(log: &[EventLogEntry]) -> Result<PcrBank, TpmError> {
    let mut bank = PcrBank::default();
    for e in log {
        let i = check_index(e.pcr_index)?;
        bank.registers[i] = extend(&bank.registers[i], &e.event_digest);
    }
    Ok(bank)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{claims, keygen, verify_chain, ChainVerdict};

    fn provider() -> (KeyPair, Certificate) {
        let k = keygen(b"provider-ca", KeyKind::Ca).unwrap();
        let root = issue_cert(&k, k.public(), claims([("provider", "acme")]));
        (k, root)
    }

    fn fresh(seed: &[u8]) -> TpmState {
        let (ca, root) = provider();
        TpmState::init(seed, &ca, claims([("provider", "acme")]), TpmKind::Discrete)
            .unwrap()
            .with_issuer_root(root)
    }

    fn set(items: &[u8]) -> BTreeSet<u8> {
        items.iter().copied().collect()
    }

    #[test]
    fn ek_chain_verifies_against_provider_root() {
        let (_, root) = provider();
        let tpm = fresh(b"ek-1");
        assert_eq!(tpm.ek_cert().subject_public, *tpm.ek_public());
        assert_eq!(
            verify_chain(&tpm.ek_chain(), &[root]).unwrap(),
            ChainVerdict::Valid
        );
    }

    #[test]
    fn distinct_seeds_give_distinct_eks() {
        assert_ne!(fresh(b"a").ek_public(), fresh(b"b").ek_public());
    }

    #[test]
    fn reset_state_is_all_zero() {
        let tpm = fresh(b"ek");
        let all: BTreeSet<u8> = (0..24).collect();
        let values = tpm.read_pcrs(&all).unwrap();
        assert_eq!(values.len(), 24);
        assert!(values.values().all(Digest::is_zero));
        assert!(tpm.read_pcrs(&BTreeSet::new()).unwrap().is_empty());
    }

    #[test]
    fn single_extend_matches_crypto_oracle() {
        let mut tpm = fresh(b"ek");
        tpm.pcr_extend(17, b"acm", "acm").unwrap();
        assert_eq!(
            tpm.pcrs().get(17).unwrap(),
            &extend(&Digest::ZERO, &digest(b"acm"))
        );
        assert_eq!(tpm.log().len(), 1);
        assert_eq!(tpm.log()[0].pcr_index, 17);
    }

    #[test]
    fn extend_order_matters() {
        let mut ab = fresh(b"ek");
        ab.pcr_extend(18, b"a", "").unwrap();
        ab.pcr_extend(18, b"b", "").unwrap();
        let mut ba = fresh(b"ek");
        ba.pcr_extend(18, b"b", "").unwrap();
        ba.pcr_extend(18, b"a", "").unwrap();
        assert_ne!(ab.pcrs().get(18), ba.pcrs().get(18));
    }

    #[test]
    fn out_of_range_index_rejected() {
        let mut tpm = fresh(b"ek");
        assert_eq!(
            tpm.pcr_extend(24, b"x", "").unwrap_err(),
            TpmError::InvalidPcrIndex(24)
        );
        assert_eq!(
            tpm.read_pcrs(&set(&[3, 30])).unwrap_err(),
            TpmError::InvalidPcrIndex(30)
        );
    }

    #[test]
    fn log_replay_reproduces_bank() {
        let mut tpm = fresh(b"ek");
        for (i, pcr) in [0u8, 17, 18, 17, 4].into_iter().enumerate() {
            tpm.pcr_extend(pcr, format!("event-{i}").as_bytes(), "")
                .unwrap();
        }
        assert_eq!(&replay_tpm_log(tpm.log()).unwrap(), tpm.pcrs());
    }

    #[test]
    fn empty_policy_rejected() {
        let mut tpm = fresh(b"ek");
        assert_eq!(
            tpm.create_sealed_ak(b"ak", &BTreeSet::new(), None)
                .unwrap_err(),
            TpmError::EmptyPolicy
        );
    }

    #[test]
    fn sealed_ak_snapshots_policy_pcrs_and_gets_cert() {
        let (ca, root) = provider();
        let mut tpm = fresh(b"ek");
        tpm.pcr_extend(17, b"acm", "").unwrap();
        tpm.pcr_extend(18, b"kernel", "").unwrap();
        let h = tpm
            .create_sealed_ak(b"ak", &default_policy_pcrs(), Some(&ca))
            .unwrap();
        let ak = tpm.ak(h).unwrap();
        assert_eq!(ak.policy()[&17], *tpm.pcrs().get(17).unwrap());
        assert_eq!(ak.policy()[&18], *tpm.pcrs().get(18).unwrap());
        let cert = ak.ak_cert().unwrap();
        assert_eq!(cert.claim("ek"), Some(tpm.ek_public().to_hex().as_str()));
        let chain = CertChain::new(vec![cert.clone(), root.clone()]);
        assert_eq!(verify_chain(&chain, &[root]).unwrap(), ChainVerdict::Valid);
    }

    #[test]
    fn quote_verifies_and_echoes_nonce() {
        let mut tpm = fresh(b"ek");
        tpm.pcr_extend(17, b"acm", "").unwrap();
        let h = tpm
            .create_sealed_ak(b"ak", &default_policy_pcrs(), None)
            .unwrap();
        let nonce = Nonce([7; 32]);
        let q = tpm.tpm_quote(h, &default_quote_selection(), &nonce).unwrap();
        assert!(q.signature_valid());
        assert_eq!(q.nonce, nonce);
        assert_eq!(q.pcrs.len(), 18);
        assert_eq!(q.pcr(17), tpm.pcrs().get(17));
    }

    #[test]
    fn policy_pcr_mutation_blocks_quote() {
        let mut tpm = fresh(b"ek");
        tpm.pcr_extend(18, b"vtpm", "").unwrap();
        let h = tpm
            .create_sealed_ak(b"ak", &default_policy_pcrs(), None)
            .unwrap();
        tpm.pcr_extend(18, b"malicious vtpm", "").unwrap();
        assert_eq!(
            tpm.tpm_quote(h, &default_quote_selection(), &Nonce([0; 32]))
                .unwrap_err(),
            TpmError::PolicyViolation { pcr: 18 }
        );
    }

    #[test]
    fn non_policy_pcr_mutation_keeps_quoting() {
        let mut tpm = fresh(b"ek");
        let h = tpm
            .create_sealed_ak(b"ak", &default_policy_pcrs(), None)
            .unwrap();
        tpm.pcr_extend(4, b"guest kernel", "").unwrap();
        assert!(tpm
            .tpm_quote(h, &default_quote_selection(), &Nonce([0; 32]))
            .is_ok());
    }

    #[test]
    fn unknown_handle() {
        let tpm = fresh(b"ek");
        assert_eq!(
            tpm.tpm_quote(AkHandle(9), &BTreeSet::new(), &Nonce([0; 32]))
                .unwrap_err(),
            TpmError::UnknownAk(AkHandle(9))
        );
    }

    #[test]
    fn forged_quote_with_fresh_key_fails_under_real_ak() {
        let mut tpm = fresh(b"ek");
        let h = tpm
            .create_sealed_ak(b"ak", &default_policy_pcrs(), None)
            .unwrap();
        let honest = tpm
            .tpm_quote(h, &default_quote_selection(), &Nonce([1; 32]))
            .unwrap();
        let forger = keygen(b"forger", KeyKind::Ak).unwrap();
        let mut forged = honest.clone();
        forged.signature = forger.sign(&TpmQuote::signed_bytes(
            &honest.ak_public,
            &honest.pcrs,
            &honest.nonce,
        ));
        assert!(!forged.signature_valid());
    }

    #[test]
    fn reboot_keeps_keys_and_clears_pcrs() {
        let mut tpm = fresh(b"ek");
        tpm.pcr_extend(18, b"vtpm", "").unwrap();
        let h = tpm
            .create_sealed_ak(b"ak", &default_policy_pcrs(), None)
            .unwrap();
        let rebooted = tpm.reboot();
        assert!(rebooted.log().is_empty());
        assert!(rebooted.pcrs().get(18).unwrap().is_zero());
        assert_eq!(rebooted.ak(h).unwrap().public(), tpm.ak(h).unwrap().public());
        assert_eq!(rebooted.ek_public(), tpm.ek_public());
    }
}
