// SPDX-License-Identifier: Apache-2.0

//! Simulation world: platforms, TPMs, TDs, the provider and TEE vendor
//! authorities, links and a virtual clock.
//!
//! Authority keys (provider CA, TEE vendor CA) and every TPM or QE private
//! key stay inside this module or the hardware types. Attack code gets the
//! host's capabilities through the public methods: drive TPMs, launch and
//! reboot platforms, launch TDs with a chosen MRCONFIGID, route guest
//! mirror traffic and control links.

use std::collections::BTreeMap;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::network::{Delivery, Endpoint, LinkModel, Message};
use crate::crypto::{claims, issue_cert, keygen, CertChain, Certificate, CryptoError, Digest, KeyKind, KeyPair, PublicKey};
use crate::evidence::{
    combined_event_log, in_td_evaluate, BundleBuilder, EvidenceBundle, EvidenceError, Nonces, Timing,
};
use crate::platform::{self, expected_launch_pcrs, HostStack, Platform, PlatformError, TcbInfo, TdxModule};
use crate::td::{
    compose_report_data, td_launch, BindingChannel, GuestEvent, GuestLogEntry, InTdCheck, TdError,
    TdReport, TdState,
};
use crate::tpm::{default_policy_pcrs, default_quote_selection, AkHandle, Scope, TpmError, TpmKind, TpmState};
use crate::verifier::{
    default_rtt_threshold, Challenge, VerifierPolicy, DISCRETE_QUOTE_LATENCY_MS, VTPM_QUOTE_LATENCY_MS,
};

pub const PROVIDER: &str = "acme-cloud";
pub const REGION: &str = "eu-west";
pub const TARGET_PLATFORM: &str = "host-a";
pub const SECOND_PLATFORM: &str = "host-b";
pub const TENANT_TD: &str = "td-tenant";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WorldError {
    #[error("no {kind} with id `{id}`")]
    Missing { kind: &'static str, id: String },
    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),
    #[error("scenario `{scenario}` has no variant `{variant}` under {deployment:?}")]
    UnsupportedVariant {
        scenario: String,
        variant: String,
        deployment: Deployment,
    },
    #[error("message dropped on link {0:?} -> {1:?}")]
    Dropped(Endpoint, Endpoint),
    #[error("unexpected message on link {0:?} -> {1:?}")]
    UnexpectedMessage(Endpoint, Endpoint),
    #[error(transparent)]
    Platform(#[from] PlatformError),
    #[error(transparent)]
    Tpm(#[from] TpmError),
    #[error(transparent)]
    Td(#[from] TdError),
    #[error(transparent)]
    Evidence(#[from] EvidenceError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

fn missing(kind: &'static str, id: &str) -> WorldError {
    WorldError::Missing {
        kind,
        id: id.to_owned(),
    }
}

/// S1: provider vTPM backs the TD. S2: bare metal with the discrete TPM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Deployment {
    S1,
    S2,
}

impl Deployment {
    pub const ALL: [Deployment; 2] = [Deployment::S1, Deployment::S2];

    pub fn quote_latency_ms(self) -> u64 {
        match self {
            Deployment::S1 => VTPM_QUOTE_LATENCY_MS,
            Deployment::S2 => DISCRETE_QUOTE_LATENCY_MS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TpmRef {
    Host(String),
    Vtpm(String),
}

/// An AK as the host sees it: where it lives and its public half.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuotingKey {
    pub tpm: TpmRef,
    pub handle: AkHandle,
    pub public: PublicKey,
}

/// What the host does with a guest event's PCR mirror request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Mirror {
    To(TpmRef),
    Skip,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorldConfig {
    pub deployment: Deployment,
    pub network_delay_ms: u64,
    pub relay_delay_ms: u64,
    pub binding_channel: BindingChannel,
    pub in_td_check: bool,
    /// Provider host image; random from the seed when absent.
    pub stack: Option<HostStack>,
    /// Number of guest workload events; random from the seed when absent.
    pub guest_events: Option<usize>,
}

impl WorldConfig {
    pub fn new(deployment: Deployment) -> Self {
        Self {
            deployment,
            network_delay_ms: 40,
            relay_delay_ms: 30,
            binding_channel: BindingChannel::Mrconfigid,
            in_td_check: false,
            stack: None,
            guest_events: None,
        }
    }
}

pub struct World {
    config: WorldConfig,
    seed: u64,
    rng: ChaCha20Rng,
    clock_ms: u64,
    provider_ca: KeyPair,
    provider_root: Certificate,
    vendor_ca: KeyPair,
    vendor_root: Certificate,
    reference_stack: HostStack,
    td_firmware: Vec<u8>,
    workload: Vec<GuestEvent>,
    platforms: BTreeMap<String, Platform>,
    vtpms: BTreeMap<String, TpmState>,
    tds: BTreeMap<String, TdState>,
    links: BTreeMap<(Endpoint, Endpoint), LinkModel>,
}

fn random_bytes(rng: &mut ChaCha20Rng, min: usize, max: usize) -> Vec<u8> {
    let mut v = vec![0u8; rng.gen_range(min..max)];
    rng.fill_bytes(&mut v);
    v
}

/// A random workload covering the mirrored RTMRs and, sometimes, RTMR3.
fn random_workload(rng: &mut ChaCha20Rng, count: usize) -> Vec<GuestEvent> {
    (0..count)
        .map(|i| {
            let rtmr = rng.gen_range(0u8..4);
            let pcr = match rtmr {
                0 => Some(if rng.gen_bool(0.5) { 1 } else { 7 }),
                1 => Some(rng.gen_range(2u8..=5)),
                2 => Some(rng.gen_range(8u8..=15)),
                _ => None,
            };
            let data = random_bytes(rng, 8, 64);
            GuestEvent::new(rtmr, pcr, &data, &format!("guest event {i}"))
                .expect("generated pairing follows the register mapping")
        })
        .collect()
}

impl World {
    pub fn new(config: WorldConfig, seed: u64) -> Result<Self, WorldError> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let key = |label: &str, kind| keygen(format!("world:{seed}:{label}").as_bytes(), kind);
        let provider_ca = key("provider-ca", KeyKind::Ca)?;
        let provider_root = issue_cert(
            &provider_ca,
            provider_ca.public(),
            claims([("provider", PROVIDER), ("role", "provider-root")]),
        );
        let vendor_ca = key("tee-vendor", KeyKind::Ca)?;
        let vendor_root = issue_cert(
            &vendor_ca,
            vendor_ca.public(),
            claims([("role", "tee-root"), ("vendor", "tee-vendor")]),
        );
        let reference_stack = match &config.stack {
            Some(s) => s.clone(),
            None => HostStack::random(&mut rng),
        };
        let td_firmware = random_bytes(&mut rng, 32, 128);
        let count = config.guest_events.unwrap_or_else(|| rng.gen_range(3..=10));
        let workload = random_workload(&mut rng, count);
        let mut links = BTreeMap::new();
        let d = config.network_delay_ms;
        let r = config.relay_delay_ms;
        links.insert((Endpoint::Verifier, Endpoint::Host), LinkModel::new(d));
        links.insert((Endpoint::Host, Endpoint::Verifier), LinkModel::new(d));
        links.insert((Endpoint::Host, Endpoint::Remote), LinkModel::new(r));
        links.insert((Endpoint::Remote, Endpoint::Host), LinkModel::new(r));
        let mut world = Self {
            config,
            seed,
            rng,
            clock_ms: 1_000,
            provider_ca,
            provider_root,
            vendor_ca,
            vendor_root,
            reference_stack: reference_stack.clone(),
            td_firmware,
            workload,
            platforms: BTreeMap::new(),
            vtpms: BTreeMap::new(),
            tds: BTreeMap::new(),
            links,
        };
        for id in [TARGET_PLATFORM, SECOND_PLATFORM] {
            world.add_platform(id, reference_stack.clone())?;
        }
        Ok(world)
    }

    /// Racks a new provider machine running `stack`, not yet launched.
    pub fn add_platform(&mut self, id: &str, stack: HostStack) -> Result<(), WorldError> {
        let ppid = format!("ppid-{}", crate::crypto::digest(format!("{}:{id}", self.seed).as_bytes()).to_hex().get(..16).unwrap_or_default());
        let ek_claims = claims([
            ("platform_id", id),
            ("ppid", ppid.as_str()),
            ("provider", PROVIDER),
            ("region", REGION),
        ]);
        let tpm = TpmState::init(
            format!("world:{}:ek:{id}", self.seed).as_bytes(),
            &self.provider_ca,
            ek_claims,
            TpmKind::Discrete,
        )?
        .with_issuer_root(self.provider_root.clone());
        let qe = keygen(format!("world:{}:qe:{id}", self.seed).as_bytes(), KeyKind::Qe)?;
        let qe_cert = issue_cert(
            &self.vendor_ca,
            qe.public(),
            claims([("platform_id", id), ("ppid", ppid.as_str()), ("role", "QE")]),
        );
        let chain = CertChain::new(vec![qe_cert, self.vendor_root.clone()]);
        let tdx = TdxModule::new(qe, chain, ppid, TcbInfo::for_platform(id));
        let provider_claims = claims([("provider", PROVIDER), ("region", REGION)]);
        self.platforms
            .insert(id.to_owned(), Platform::new(id, stack, tpm, provider_claims, tdx));
        Ok(())
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Seeded randomness for attack decisions.
    pub fn rng(&mut self) -> &mut ChaCha20Rng {
        &mut self.rng
    }

    pub fn reference_stack(&self) -> &HostStack {
        &self.reference_stack
    }

    pub fn workload(&self) -> &[GuestEvent] {
        &self.workload
    }

    pub fn platform(&self, id: &str) -> Result<&Platform, WorldError> {
        self.platforms.get(id).ok_or_else(|| missing("platform", id))
    }

    pub fn platform_mut(&mut self, id: &str) -> Result<&mut Platform, WorldError> {
        self.platforms.get_mut(id).ok_or_else(|| missing("platform", id))
    }

    pub fn launch(&mut self, id: &str) -> Result<(), WorldError> {
        Ok(self.platform_mut(id)?.launch()?)
    }

    pub fn launch_all(&mut self) -> Result<(), WorldError> {
        let ids: Vec<String> = self.platforms.keys().cloned().collect();
        for id in ids {
            self.launch(&id)?;
        }
        Ok(())
    }

    pub fn tpm(&self, r: &TpmRef) -> Result<&TpmState, WorldError> {
        match r {
            TpmRef::Host(id) => Ok(self.platform(id)?.tpm()),
            TpmRef::Vtpm(id) => self.vtpms.get(id).ok_or_else(|| missing("vtpm", id)),
        }
    }

    pub fn tpm_mut(&mut self, r: &TpmRef) -> Result<&mut TpmState, WorldError> {
        match r {
            TpmRef::Host(id) => Ok(self.platform_mut(id)?.tpm_mut()),
            TpmRef::Vtpm(id) => self.vtpms.get_mut(id).ok_or_else(|| missing("vtpm", id)),
        }
    }

    /// Provider service: a vTPM for a tenant on `platform_id`, with a
    /// certified AK sealed to the host's launch anchors.
    pub fn instantiate_vtpm(&mut self, platform_id: &str, vtpm_id: &str) -> Result<QuotingKey, WorldError> {
        let p = self.platform(platform_id)?;
        let seed = format!("world:{}:{vtpm_id}", self.seed);
        let (vtpm, handle) = platform::instantiate_vtpm(p, &self.provider_ca, seed.as_bytes())?;
        let vtpm = vtpm.with_issuer_root(self.provider_root.clone());
        let public = *vtpm.ak(handle)?.public();
        self.vtpms.insert(vtpm_id.to_owned(), vtpm);
        Ok(QuotingKey {
            tpm: TpmRef::Vtpm(vtpm_id.to_owned()),
            handle,
            public,
        })
    }

    /// Copies a persisted vTPM state, keys included, and starts it on
    /// another platform under `new_id`.
    pub fn clone_vtpm(&mut self, vtpm_id: &str, onto: &str, new_id: &str) -> Result<(), WorldError> {
        let persisted = self.vtpms.get(vtpm_id).ok_or_else(|| missing("vtpm", vtpm_id))?;
        let copy = platform::relaunch_vtpm(self.platform(onto)?, persisted)?;
        self.vtpms.insert(new_id.to_owned(), copy);
        Ok(())
    }

    /// Provider service: creates an AK inside `tpm`, sealed to its current
    /// launch anchors, and certifies it.
    pub fn provision_ak(&mut self, tpm: &TpmRef, label: &str) -> Result<QuotingKey, WorldError> {
        let seed = format!("world:{}:ak:{label}", self.seed);
        let ca = self.provider_ca.clone();
        let t = self.tpm_mut(tpm)?;
        let handle = t.create_sealed_ak(seed.as_bytes(), &default_policy_pcrs(), Some(&ca))?;
        let public = *t.ak(handle)?.public();
        Ok(QuotingKey {
            tpm: tpm.clone(),
            handle,
            public,
        })
    }

    /// The deployment's quoting AK for a tenant on `platform_id`.
    pub fn provision_quoting(&mut self, platform_id: &str) -> Result<QuotingKey, WorldError> {
        match self.config.deployment {
            Deployment::S1 => self.instantiate_vtpm(platform_id, &format!("vtpm-{platform_id}")),
            Deployment::S2 => self.provision_ak(&TpmRef::Host(platform_id.to_owned()), platform_id),
        }
    }

    /// Launches the tenant TD image on `platform_id`; the host chooses
    /// which AK goes into MRCONFIGID.
    pub fn launch_td(&mut self, td_id: &str, platform_id: &str, ak_pub: &PublicKey) -> Result<(), WorldError> {
        let td = td_launch(self.platform(platform_id)?, &self.td_firmware, ak_pub, b"tenant")?;
        self.tds.insert(td_id.to_owned(), td);
        Ok(())
    }

    pub fn td(&self, id: &str) -> Result<&TdState, WorldError> {
        self.tds.get(id).ok_or_else(|| missing("td", id))
    }

    /// Runs the tenant workload inside `td_id`. The TD extends its own
    /// RTMRs; each PCR mirror request (the launch MRTD first) passes
    /// through `route`, which stands for the host-controlled transport.
    pub fn run_workload<F>(&mut self, td_id: &str, mut route: F) -> Result<(), WorldError>
    where
        F: FnMut(usize, &GuestLogEntry) -> Mirror,
    {
        let launch = self.td(td_id)?.guest_log().to_vec();
        let mut pending: Vec<GuestLogEntry> = launch;
        for ev in self.workload.clone() {
            let td = self.tds.get_mut(td_id).ok_or_else(|| missing("td", td_id))?;
            td.rtmr_extend(&ev)?;
            pending.push(td.guest_log().last().cloned().expect("entry just appended"));
        }
        for (i, entry) in pending.iter().enumerate() {
            let Some(pcr) = entry.pcr_index else { continue };
            if let Mirror::To(target) = route(i, entry) {
                self.tpm_mut(&target)?
                    .extend_measurement(pcr, entry.event_digest, &entry.description, Scope::Guest)?;
            }
        }
        Ok(())
    }

    /// Asks the TD for a report over `td_nonce`, bound the way the world's
    /// binding channel prescribes.
    pub fn td_report(&self, td_id: &str, td_nonce: &crate::crypto::Nonce, in_td: InTdCheck) -> Result<TdReport, WorldError> {
        let td = self.td(td_id)?;
        let rd = compose_report_data(td_nonce, self.config.binding_channel, td.mrconfigid(), in_td);
        Ok(self.platform(td.host_platform_id())?.td_report(td, &rd.0)?)
    }

    pub fn quote_latency(&self, tpm: &TpmRef) -> Result<u64, WorldError> {
        Ok(match self.tpm(tpm)?.kind() {
            TpmKind::Discrete => DISCRETE_QUOTE_LATENCY_MS,
            TpmKind::Virtual => VTPM_QUOTE_LATENCY_MS,
        })
    }

    /// What an honest host and TD return for `challenge` received at `at`:
    /// the bundle and the time it is ready to send.
    pub fn honest_evidence(
        &self,
        td_id: &str,
        key: &QuotingKey,
        challenge: &Challenge,
        at: u64,
    ) -> Result<(EvidenceBundle, u64), WorldError> {
        let tpm = self.tpm(&key.tpm)?;
        let quote = tpm.tpm_quote(key.handle, &default_quote_selection(), &challenge.tpm_nonce)?;
        let td = self.td(td_id)?;
        let log = combined_event_log(tpm.log(), td.guest_log());
        let in_td = if self.config.in_td_check {
            in_td_evaluate(td, &quote, &log)
        } else {
            InTdCheck::NotEvaluated
        };
        let report = self.td_report(td_id, &challenge.td_nonce, in_td)?;
        let bundle = BundleBuilder::new()
            .td_report(report)
            .tpm_quote(quote)
            .ek_cert_chain(tpm.ek_chain())
            .ak_cert(tpm.ak(key.handle)?.ak_cert().cloned())
            .event_log(log)
            .nonces(Nonces {
                td_nonce: challenge.td_nonce,
                tpm_nonce: challenge.tpm_nonce,
            })
            .timing(Timing::default())
            .build()?;
        Ok((bundle, at + self.quote_latency(&key.tpm)?))
    }

    pub fn now(&self) -> u64 {
        self.clock_ms
    }

    pub fn advance_clock(&mut self, ms: u64) -> u64 {
        self.clock_ms += ms;
        self.clock_ms
    }

    fn advance_to(&mut self, t: u64) {
        self.clock_ms = self.clock_ms.max(t);
    }

    pub fn link_mut(&mut self, from: Endpoint, to: Endpoint) -> &mut LinkModel {
        self.links.entry((from, to)).or_default()
    }

    pub fn deliver(&mut self, from: Endpoint, to: Endpoint, message: Message, sent_at: u64) -> Delivery {
        let d = self.link_mut(from, to).deliver(message, sent_at);
        self.advance_to(d.arrived_at);
        d
    }

    /// Relays a quote request from the host to the remote machine and the
    /// answer back; returns when the answer reaches the host.
    pub fn relay_round_trip(&mut self, sent_at: u64, remote_latency: u64, nonce: crate::crypto::Nonce) -> Result<u64, WorldError> {
        let out = self.deliver(Endpoint::Host, Endpoint::Remote, Message::QuoteRequest { nonce }, sent_at);
        if out.message.is_none() {
            return Err(WorldError::Dropped(Endpoint::Host, Endpoint::Remote));
        }
        let back = self.deliver(
            Endpoint::Remote,
            Endpoint::Host,
            Message::QuoteRequest { nonce },
            out.arrived_at + remote_latency,
        );
        Ok(back.arrived_at)
    }

    /// One challenge/response over the verifier links. `respond` runs on
    /// the host side with the challenge as received and its arrival time,
    /// and returns the bundle plus the time it is sent back. Timing fields
    /// are stamped from the virtual clock.
    pub fn exchange<F>(&mut self, challenge: &Challenge, respond: F) -> Result<EvidenceBundle, WorldError>
    where
        F: FnOnce(&mut World, &Challenge, u64) -> Result<(EvidenceBundle, u64), WorldError>,
    {
        let sent = self.now().max(challenge.issued_at);
        let inbound = self.deliver(Endpoint::Verifier, Endpoint::Host, Message::Challenge(*challenge), sent);
        let received = match inbound.message {
            Some(Message::Challenge(c)) => c,
            Some(_) => return Err(WorldError::UnexpectedMessage(Endpoint::Verifier, Endpoint::Host)),
            None => return Err(WorldError::Dropped(Endpoint::Verifier, Endpoint::Host)),
        };
        let (bundle, ready) = respond(self, &received, inbound.arrived_at)?;
        let ready = ready.max(inbound.arrived_at);
        let outbound = self.deliver(Endpoint::Host, Endpoint::Verifier, Message::Evidence(Box::new(bundle)), ready);
        let mut bundle = match outbound.message {
            Some(Message::Evidence(b)) => *b,
            Some(_) => return Err(WorldError::UnexpectedMessage(Endpoint::Host, Endpoint::Verifier)),
            None => return Err(WorldError::Dropped(Endpoint::Host, Endpoint::Verifier)),
        };
        bundle.timing = Timing {
            challenge_sent: sent,
            td_received: inbound.arrived_at,
            quote_received: outbound.arrived_at,
        };
        Ok(bundle)
    }

    /// The policy a tenant verifier holds for this world: vendor and
    /// provider roots, anchors pinned from the reference image and the
    /// default RTT bound for the deployment.
    pub fn policy(&self) -> VerifierPolicy {
        VerifierPolicy {
            trusted_tee_roots: vec![self.vendor_root.clone()],
            trusted_provider_roots: vec![self.provider_root.clone()],
            allowed_providers: [PROVIDER.to_owned()].into(),
            expected_pcr17_18: Some(expected_launch_pcrs(&self.reference_stack)),
            rtt_threshold_ms: default_rtt_threshold(
                self.config.deployment.quote_latency_ms(),
                self.config.network_delay_ms,
            ),
            require_ak_registry_uniqueness: true,
            binding_channel: self.config.binding_channel,
            disabled_checks: Default::default(),
        }
    }

    pub fn pinned_anchors(&self) -> BTreeMap<u8, Digest> {
        expected_launch_pcrs(&self.reference_stack)
    }
}
