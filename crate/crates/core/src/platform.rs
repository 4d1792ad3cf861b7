// SPDX-License-Identifier: Apache-2.0

//! Physical host: measured launch into the host TPM and vTPM instantiation.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{digest, extend, CertChain, Digest, KeyPair};
use crate::hexbytes::hex_vec;
use crate::td::{self, TdError, TdReport, TdState};
use crate::tpm::{default_policy_pcrs, AkHandle, Scope, TpmError, TpmKind, TpmState};

pub const PCR_FIRMWARE: u8 = 0;
pub const PCR_DRTM_LOADERS: u8 = 17;
pub const PCR_HOST_STACK: u8 = 18;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PlatformError {
    #[error("host stack image `{0}` is empty")]
    EmptyImage(&'static str),
    #[error("static event targets PCR {0}; only PCRs 1-7 are allowed")]
    BadStaticPcr(u8),
    #[error("TPM already carries a measured launch (PCR 17 is non-zero)")]
    DoubleLaunch,
    #[error("platform `{0}` has not completed a measured launch")]
    NotLaunched(String),
    #[error(transparent)]
    Tpm(#[from] TpmError),
}

/// A static-chain measurement (PCRs 1-7) recorded during firmware boot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StaticEvent {
    pub pcr_index: u8,
    #[serde(with = "hex_vec")]
    pub data: Vec<u8>,
    pub description: String,
}

impl StaticEvent {
    pub fn new(pcr_index: u8, data: impl Into<Vec<u8>>, description: &str) -> Self {
        Self {
            pcr_index,
            data: data.into(),
            description: description.to_owned(),
        }
    }
}

pub fn default_static_events() -> Vec<StaticEvent> {
    [
        (1, "platform configuration"),
        (2, "option ROM code"),
        (3, "option ROM configuration"),
        (4, "boot manager"),
        (5, "boot manager configuration"),
        (6, "platform manufacturer events"),
        (7, "secure boot policy"),
    ]
    .into_iter()
    .map(|(pcr, what)| StaticEvent::new(pcr, format!("default {what}"), what))
    .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HostStack {
    #[serde(with = "hex_vec")]
    pub firmware_image: Vec<u8>,
    #[serde(with = "hex_vec")]
    pub acm_image: Vec<u8>,
    #[serde(with = "hex_vec")]
    pub seamldr_image: Vec<u8>,
    #[serde(with = "hex_vec")]
    pub kernel_image: Vec<u8>,
    #[serde(with = "hex_vec")]
    pub hypervisor_image: Vec<u8>,
    #[serde(with = "hex_vec")]
    pub vtpm_binary: Vec<u8>,
    pub static_events: Vec<StaticEvent>,
}

impl HostStack {
    /// A stack whose images are the given labels' bytes, with the default
    /// static chain.
    pub fn from_labels(
        firmware: &str,
        acm: &str,
        seamldr: &str,
        kernel: &str,
        hypervisor: &str,
        vtpm: &str,
    ) -> Self {
        Self {
            firmware_image: firmware.as_bytes().to_vec(),
            acm_image: acm.as_bytes().to_vec(),
            seamldr_image: seamldr.as_bytes().to_vec(),
            kernel_image: kernel.as_bytes().to_vec(),
            hypervisor_image: hypervisor.as_bytes().to_vec(),
            vtpm_binary: vtpm.as_bytes().to_vec(),
            static_events: default_static_events(),
        }
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let image = |rng: &mut R| {
            let len = rng.gen_range(16..256);
            (0..len).map(|_| rng.gen::<u8>()).collect::<Vec<u8>>()
        };
        let mut static_events = Vec::new();
        for pcr in 1u8..=7 {
            if rng.gen_bool(0.8) {
                static_events.push(StaticEvent::new(pcr, image(rng), "static chain event"));
            }
        }
        Self {
            firmware_image: image(rng),
            acm_image: image(rng),
            seamldr_image: image(rng),
            kernel_image: image(rng),
            hypervisor_image: image(rng),
            vtpm_binary: image(rng),
            static_events,
        }
    }

    pub fn validate(&self) -> Result<(), PlatformError> {
        for (name, img) in [
            ("firmware", &self.firmware_image),
            ("acm", &self.acm_image),
            ("seamldr", &self.seamldr_image),
            ("kernel", &self.kernel_image),
            ("hypervisor", &self.hypervisor_image),
            ("vtpm", &self.vtpm_binary),
        ] {
            if img.is_empty() {
                return Err(PlatformError::EmptyImage(name));
            }
        }
        if let Some(e) = self
            .static_events
            .iter()
            .find(|e| !(1..=7).contains(&e.pcr_index))
        {
            return Err(PlatformError::BadStaticPcr(e.pcr_index));
        }
        Ok(())
    }

    /// Ordered (pcr, image, description) measurements of a launch.
    fn measurements(&self) -> Vec<(u8, &[u8], &str)> {
        let mut out = vec![(PCR_FIRMWARE, self.firmware_image.as_slice(), "host firmware")];
        for e in &self.static_events {
            out.push((e.pcr_index, e.data.as_slice(), e.description.as_str()));
        }
        out.extend([
            (PCR_DRTM_LOADERS, self.acm_image.as_slice(), "SINIT ACM"),
            (PCR_DRTM_LOADERS, self.seamldr_image.as_slice(), "SEAMLDR"),
            (PCR_HOST_STACK, self.kernel_image.as_slice(), "host kernel"),
            (PCR_HOST_STACK, self.hypervisor_image.as_slice(), "hypervisor"),
            (PCR_HOST_STACK, self.vtpm_binary.as_slice(), "vTPM binary"),
        ]);
        out
    }
}

/// Measures `stack` into a freshly reset TPM: firmware and static chain
/// into PCRs 0-7, ACM then SEAMLDR into PCR 17, kernel, hypervisor and
/// vTPM binary into PCR 18.
pub fn measured_launch(stack: &HostStack, tpm: &mut TpmState) -> Result<(), PlatformError> {
    stack.validate()?;
    if !tpm.pcrs().get(PCR_DRTM_LOADERS).is_some_and(Digest::is_zero) {
        return Err(PlatformError::DoubleLaunch);
    }
    for (pcr, image, what) in stack.measurements() {
        tpm.pcr_extend(pcr, image, what)?;
    }
    Ok(())
}

/// PCR 17 and 18 values a correct launch of `stack` produces, computed
/// without a TPM. This is what a verifier pins from a reproducible build.
pub fn expected_launch_pcrs(stack: &HostStack) -> BTreeMap<u8, Digest> {
    let mut out = BTreeMap::from([
        (PCR_DRTM_LOADERS, Digest::ZERO),
        (PCR_HOST_STACK, Digest::ZERO),
    ]);
    for (pcr, image, _) in stack.measurements() {
        if let Some(reg) = out.get_mut(&pcr) {
            *reg = extend(reg, &digest(image));
        }
    }
    out
}

/// TCB fields a TD report carries verbatim. No verifier policy reads
/// them by default.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TcbInfo {
    pub mrseam: Digest,
    #[serde(with = "hex_vec")]
    pub seam_attributes: Vec<u8>,
    #[serde(with = "hex_vec")]
    pub td_attributes: Vec<u8>,
    #[serde(with = "hex_vec")]
    pub tee_tcb_svn: Vec<u8>,
}

impl TcbInfo {
    pub fn for_platform(platform_id: &str) -> Self {
        Self {
            mrseam: digest(format!("tdx-module:{platform_id}").as_bytes()),
            seam_attributes: vec![0; 8],
            td_attributes: vec![0; 8],
            tee_tcb_svn: vec![3, 0, 5, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0],
        }
    }
}

/// The platform's TDX quoting identity: a QE key with its vendor chain.
#[derive(Debug, Clone)]
pub struct TdxModule {
    qe: KeyPair,
    qe_chain: CertChain,
    ppid: String,
    tcb: TcbInfo,
}

impl TdxModule {
    pub fn new(qe: KeyPair, qe_chain: CertChain, ppid: String, tcb: TcbInfo) -> Self {
        Self {
            qe,
            qe_chain,
            ppid,
            tcb,
        }
    }

    pub fn qe_chain(&self) -> &CertChain {
        &self.qe_chain
    }

    pub fn ppid(&self) -> &str {
        &self.ppid
    }

    pub fn tcb(&self) -> &TcbInfo {
        &self.tcb
    }
}

#[derive(Debug, Clone)]
pub struct Platform {
    id: String,
    tpm: TpmState,
    stack: HostStack,
    provider_claims: BTreeMap<String, String>,
    launched: bool,
    tdx: TdxModule,
}

impl Platform {
    pub fn new(
        id: &str,
        stack: HostStack,
        tpm: TpmState,
        provider_claims: BTreeMap<String, String>,
        tdx: TdxModule,
    ) -> Self {
        Self {
            id: id.to_owned(),
            tpm,
            stack,
            provider_claims,
            launched: false,
            tdx,
        }
    }

    pub fn launch(&mut self) -> Result<(), PlatformError> {
        measured_launch(&self.stack, &mut self.tpm)?;
        self.launched = true;
        Ok(())
    }

    /// Power-cycles the host TPM and relaunches with `stack`.
    pub fn reboot_with(&mut self, stack: HostStack) -> Result<(), PlatformError> {
        self.tpm = self.tpm.reboot();
        self.stack = stack;
        self.launched = false;
        self.launch()
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn tpm(&self) -> &TpmState {
        &self.tpm
    }

    /// Host software can drive its TPM freely (extend, create keys, quote);
    /// only the seal policy constrains what it gets back.
    pub fn tpm_mut(&mut self) -> &mut TpmState {
        &mut self.tpm
    }

    pub fn stack(&self) -> &HostStack {
        &self.stack
    }

    pub fn provider_claims(&self) -> &BTreeMap<String, String> {
        &self.provider_claims
    }

    pub fn is_launched(&self) -> bool {
        self.launched
    }

    pub fn tdx(&self) -> &TdxModule {
        &self.tdx
    }

    /// Has this platform's QE sign a report for a TD running on it.
    pub fn td_report(&self, td: &TdState, report_data: &[u8]) -> Result<TdReport, TdError> {
        if td.host_platform_id() != self.id {
            return Err(TdError::WrongPlatform {
                td: td.host_platform_id().to_owned(),
                platform: self.id.clone(),
            });
        }
        td::td_report(td, report_data, &self.tdx.qe, &self.tdx.qe_chain)
    }

    fn require_launched(&self) -> Result<(), PlatformError> {
        if self.launched {
            Ok(())
        } else {
            Err(PlatformError::NotLaunched(self.id.clone()))
        }
    }

    fn mirror_anchors_into(&self, vtpm: &mut TpmState) -> Result<(), PlatformError> {
        for e in self.tpm.log() {
            if e.pcr_index == PCR_DRTM_LOADERS || e.pcr_index == PCR_HOST_STACK {
                vtpm.extend_measurement(e.pcr_index, e.event_digest, &e.description, Scope::Host)?;
            }
        }
        Ok(())
    }
}

/// Creates a provider vTPM on a launched host. The host's PCR 17/18
/// events are replayed into the vTPM so its anchors equal the host's, and
/// the vTPM's AK is sealed to that snapshot and certified by `provider_ca`.
pub fn instantiate_vtpm(
    platform: &Platform,
    provider_ca: &KeyPair,
    vtpm_seed: &[u8],
) -> Result<(TpmState, AkHandle), PlatformError> {
    platform.require_launched()?;
    let mut claims = platform.provider_claims.clone();
    claims.insert("platform_id".into(), platform.id.clone());
    claims.insert("ppid".into(), platform.tdx.ppid.clone());
    let mut ek_seed = b"vtpm-ek:".to_vec();
    ek_seed.extend_from_slice(vtpm_seed);
    let mut vtpm = TpmState::init(&ek_seed, provider_ca, claims, TpmKind::Virtual)?;
    platform.mirror_anchors_into(&mut vtpm)?;
    let mut ak_seed = b"vtpm-ak:".to_vec();
    ak_seed.extend_from_slice(vtpm_seed);
    let handle = vtpm.create_sealed_ak(&ak_seed, &default_policy_pcrs(), Some(provider_ca))?;
    Ok((vtpm, handle))
}

/// Restarts a persisted vTPM on `platform` after a host reboot: fresh
/// registers, same keys, anchors mirrored from the current host launch.
pub fn relaunch_vtpm(platform: &Platform, persisted: &TpmState) -> Result<TpmState, PlatformError> {
    platform.require_launched()?;
    let mut vtpm = persisted.reboot();
    platform.mirror_anchors_into(&mut vtpm)?;
    Ok(vtpm)
}

pub fn launch_pcr_selection() -> BTreeSet<u8> {
    [PCR_DRTM_LOADERS, PCR_HOST_STACK].into_iter().collect()
}
