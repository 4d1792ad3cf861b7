// SPDX-License-Identifier: Apache-2.0

//! Hashing, signatures and minimal claims certificates.
//!
//! All measurement registers hold SHA-384 values. Signatures are Ed25519
//! (deterministic, 128-bit security); bundles carry the algorithm id
//! [`SIGNATURE_ALGORITHM`] so other implementations can tell what to
//! expect. Certificates are a claims map signed over the canonical
//! encoding from [`crate::encoding`], not X.509.

use std::collections::BTreeMap;

use ed25519_dalek::{Signer, SigningKey, VerifyingKey};
use serde::{Deserialize, Serialize};
use sha2::{Sha384, Sha512};
use thiserror::Error;

use crate::encoding::CanonicalWriter;
use crate::hexbytes::hex_newtype;

pub const DIGEST_LEN: usize = 48;
pub const SIGNATURE_ALGORITHM: &str = "ed25519";

hex_newtype!(
    /// A SHA-384 sized measurement value.
    Digest,
    DIGEST_LEN
);
hex_newtype!(
    /// Ed25519 verification key bytes.
    PublicKey,
    32
);
hex_newtype!(Signature, 64);
hex_newtype!(
    /// A 32-byte challenge nonce.
    Nonce,
    32
);

impl Digest {
    pub const ZERO: Digest = Digest([0; DIGEST_LEN]);

    pub fn is_zero(&self) -> bool {
        self.0 == [0; DIGEST_LEN]
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("key seed must not be empty")]
    InvalidSeed,
    #[error("malformed verification key")]
    InvalidKey,
    #[error("certificate chain is empty")]
    EmptyChain,
}

pub fn digest(data: &[u8]) -> Digest {
    use sha2::Digest as _;
    let out = Sha384::digest(data);
    Digest(out.into())
}

/// TCG-style register extension: `H(old || event_digest)`.
pub fn extend(old: &Digest, event_digest: &Digest) -> Digest {
    use sha2::Digest as _;
    let mut h = Sha384::new();
    h.update(old.0);
    h.update(event_digest.0);
    Digest(h.finalize().into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum KeyKind {
    Ek,
    Ak,
    Qe,
    Ca,
}

impl KeyKind {
    fn tag(self) -> &'static str {
        match self {
            KeyKind::Ek => "EK",
            KeyKind::Ak => "AK",
            KeyKind::Qe => "QE",
            KeyKind::Ca => "CA",
        }
    }
}

/// A signing keypair. The private half never leaves this type; callers
/// can only ask it to sign.
#[derive(Clone)]
pub struct KeyPair {
    kind: KeyKind,
    public: PublicKey,
    signing: SigningKey,
}

impl std::fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KeyPair")
            .field("kind", &self.kind)
            .field("public", &self.public)
            .finish_non_exhaustive()
    }
}

impl KeyPair {
    pub(crate) fn from_secret(secret: [u8; 32], kind: KeyKind) -> Self {
        let signing = SigningKey::from_bytes(&secret);
        let public = PublicKey(signing.verifying_key().to_bytes());
        Self {
            kind,
            public,
            signing,
        }
    }

    pub fn kind(&self) -> KeyKind {
        self.kind
    }

    pub fn public(&self) -> &PublicKey {
        &self.public
    }

    pub fn sign(&self, message: &[u8]) -> Signature {
        Signature(self.signing.sign(message).to_bytes())
    }
}

/// Derives a keypair from `seed`. The key kind is mixed into the
/// derivation, so the same seed yields unrelated EK and AK keys.
pub fn keygen(seed: &[u8], kind: KeyKind) -> Result<KeyPair, CryptoError> {
    use sha2::Digest as _;
    if seed.is_empty() {
        return Err(CryptoError::InvalidSeed);
    }
    let mut w = CanonicalWriter::new("dcea.keygen.v1");
    w.str(kind.tag()).bytes(seed);
    let wide = Sha512::digest(w.finish());
    let mut secret = [0u8; 32];
    secret.copy_from_slice(&wide[..32]);
    Ok(KeyPair::from_secret(secret, kind))
}

pub fn sign(key: &KeyPair, message: &[u8]) -> Signature {
    key.sign(message)
}

/// Returns `Ok(false)` for a bad signature and `Err(InvalidKey)` when the
/// key bytes are not a valid curve point.
pub fn verify(public: &PublicKey, message: &[u8], sig: &Signature) -> Result<bool, CryptoError> {
    let vk = VerifyingKey::from_bytes(&public.0).map_err(|_| CryptoError::InvalidKey)?;
    let sig = ed25519_dalek::Signature::from_bytes(&sig.0);
    Ok(vk.verify_strict(message, &sig).is_ok())
}

/// Short identifier for a verification key, used as a certificate's
/// `issuer_id`.
pub fn key_id(public: &PublicKey) -> String {
    let d = digest(&public.0);
    format!("key:{}", hex::encode(&d.0[..8]))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Certificate {
    pub claims: BTreeMap<String, String>,
    pub issuer_id: String,
    pub signature: Signature,
    pub subject_public: PublicKey,
}

impl Certificate {
    /// The bytes covered by the issuer signature.
    pub fn tbs_bytes(&self) -> Vec<u8> {
        tbs(&self.subject_public, &self.issuer_id, &self.claims)
    }

    pub fn claim(&self, key: &str) -> Option<&str> {
        self.claims.get(key).map(String::as_str)
    }

    /// Whether this certificate's signature verifies under `issuer`.
    pub fn is_signed_by(&self, issuer: &PublicKey) -> bool {
        self.issuer_id == key_id(issuer)
            && verify(issuer, &self.tbs_bytes(), &self.signature).unwrap_or(false)
    }
}

fn tbs(subject: &PublicKey, issuer_id: &str, claims: &BTreeMap<String, String>) -> Vec<u8> {
    let mut w = CanonicalWriter::new("dcea.cert.v1");
    w.bytes(&subject.0).str(issuer_id).str_map(claims);
    w.finish()
}

pub fn issue_cert(
    issuer: &KeyPair,
    subject_public: &PublicKey,
    claims: BTreeMap<String, String>,
) -> Certificate {
    let issuer_id = key_id(issuer.public());
    let signature = issuer.sign(&tbs(subject_public, &issuer_id, &claims));
    Certificate {
        claims,
        issuer_id,
        signature,
        subject_public: *subject_public,
    }
}

/// Ordered leaf to root.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CertChain {
    pub certs: Vec<Certificate>,
}

impl CertChain {
    pub fn new(certs: Vec<Certificate>) -> Self {
        Self { certs }
    }

    pub fn leaf(&self) -> Option<&Certificate> {
        self.certs.first()
    }

    pub fn root(&self) -> Option<&Certificate> {
        self.certs.last()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChainVerdict {
    Valid,
    UntrustedRoot,
    /// The certificate at this position does not verify under its parent
    /// (or, for the last one, under itself).
    BrokenLink(usize),
}

pub fn verify_chain(
    chain: &CertChain,
    trusted_roots: &[Certificate],
) -> Result<ChainVerdict, CryptoError> {
    let certs = &chain.certs;
    if certs.is_empty() {
        return Err(CryptoError::EmptyChain);
    }
    for (i, cert) in certs.iter().enumerate() {
        let parent = certs.get(i + 1).unwrap_or(cert);
        if !cert.is_signed_by(&parent.subject_public) {
            return Ok(ChainVerdict::BrokenLink(i));
        }
    }
    let root = &certs[certs.len() - 1];
    if trusted_roots.iter().any(|r| r == root) {
        Ok(ChainVerdict::Valid)
    } else {
        Ok(ChainVerdict::UntrustedRoot)
    }
}

/// Builds `{k: v}` claims from string pairs.
pub fn claims<I, K, V>(pairs: I) -> BTreeMap<String, String>
where
    I: IntoIterator<Item = (K, V)>,
    K: Into<String>,
    V: Into<String>,
{
    pairs
        .into_iter()
        .map(|(k, v)| (k.into(), v.into()))
        .collect()
}
