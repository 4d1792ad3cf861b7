// SPDX-License-Identifier: Apache-2.0

//! Append-only registry of attestation keys seen by a verifier.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::crypto::PublicKey;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistryEntry {
    /// Hex of the EK public key the AK was attested under.
    pub issuer: String,
    pub timestamp: u64,
    pub platform_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Registration {
    Registered,
    Duplicate(RegistryEntry),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conflict {
    pub ak_public: PublicKey,
    pub existing: RegistryEntry,
    pub attempted: RegistryEntry,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AkRegistry {
    entries: BTreeMap<PublicKey, RegistryEntry>,
    #[serde(default)]
    conflicts: Vec<Conflict>,
}

impl AkRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records `ak` on first sight. A later registration from the same
    /// platform is a no-op; one from a different platform is a
    /// [`Registration::Duplicate`] and is kept as a conflict.
    pub fn register(&mut self, ak: PublicKey, meta: RegistryEntry) -> Registration {
        match self.entries.get(&ak) {
            None => {
                self.entries.insert(ak, meta);
                Registration::Registered
            }
            Some(existing) if existing.platform_id == meta.platform_id => Registration::Registered,
            Some(existing) => {
                let existing = existing.clone();
                self.conflicts.push(Conflict {
                    ak_public: ak,
                    existing: existing.clone(),
                    attempted: meta,
                });
                Registration::Duplicate(existing)
            }
        }
    }

    pub fn lookup(&self, ak: &PublicKey) -> Option<&RegistryEntry> {
        self.entries.get(ak)
    }

    pub fn conflicts(&self) -> &[Conflict] {
        &self.conflicts
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn registry_register(reg: &mut AkRegistry, ak: PublicKey, meta: RegistryEntry) -> Registration {
    reg.register(ak, meta)
}

pub fn registry_lookup<'a>(reg: &'a AkRegistry, ak: &PublicKey) -> Option<&'a RegistryEntry> {
    reg.lookup(ak)
}
