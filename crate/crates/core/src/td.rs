// SPDX-License-Identifier: Apache-2.0

//! Trust Domain model: launch measurement, RTMRs, the MRCONFIGID /
//! report_data binding, and QE-signed reports.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{self, digest, extend, CertChain, Digest, KeyPair, Nonce, PublicKey, Signature};
use crate::encoding::CanonicalWriter;
use crate::hexbytes::hex_newtype;
use crate::platform::{Platform, PlatformError, TcbInfo};

pub const RTMR_COUNT: usize = 4;
pub const REPORT_DATA_LEN: usize = 64;

hex_newtype!(
    /// The 64-byte report_data field of a TD report.
    ReportData,
    REPORT_DATA_LEN
);

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TdError {
    #[error("RTMR index {0} out of range")]
    InvalidRtmr(u8),
    #[error("RTMR{rtmr} cannot be mirrored into PCR {pcr:?}")]
    InvalidMapping { rtmr: u8, pcr: Option<u8> },
    #[error("report_data must be exactly 64 bytes, got {0}")]
    BadReportData(usize),
    #[error("TD belongs to platform `{td}`, not `{platform}`")]
    WrongPlatform { td: String, platform: String },
    #[error(transparent)]
    Platform(#[from] PlatformError),
}

/// A TD measurement register.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TdRegister {
    Mrtd,
    Rtmr(u8),
}

impl TdRegister {
    /// PCRs holding the same measurements on the (v)TPM side. RTMR3 is
    /// reserved and has no PCR counterpart.
    pub fn mirrored_pcrs(self) -> &'static [u8] {
        match self {
            TdRegister::Mrtd => &[0],
            TdRegister::Rtmr(0) => &[1, 7],
            TdRegister::Rtmr(1) => &[2, 3, 4, 5],
            TdRegister::Rtmr(2) => &[8, 9, 10, 11, 12, 13, 14, 15],
            TdRegister::Rtmr(_) => &[],
        }
    }

    /// Whether a guest measurement in this register may carry `pcr` as its
    /// (v)TPM mirror target.
    pub fn accepts_mirror(self, pcr: Option<u8>) -> bool {
        match (self, pcr) {
            (TdRegister::Rtmr(3), None) => true,
            (_, None) => false,
            (r, Some(p)) => r.mirrored_pcrs().contains(&p),
        }
    }

    pub fn label(self) -> String {
        match self {
            TdRegister::Mrtd => "MRTD".into(),
            TdRegister::Rtmr(i) => format!("RTMR{i}"),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "MRTD" => Some(TdRegister::Mrtd),
            _ => {
                let i: u8 = s.strip_prefix("RTMR")?.parse().ok()?;
                (usize::from(i) < RTMR_COUNT).then_some(TdRegister::Rtmr(i))
            }
        }
    }
}

impl Serialize for TdRegister {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.label())
    }
}

impl<'de> Deserialize<'de> for TdRegister {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = <std::borrow::Cow<'de, str>>::deserialize(d)?;
        TdRegister::parse(&s)
            .ok_or_else(|| serde::de::Error::custom(format!("unknown TD register `{s}`")))
    }
}

/// A runtime measurement the guest records in an RTMR and mirrors into a
/// (v)TPM PCR according to the register mapping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GuestEvent {
    pub rtmr: u8,
    pub pcr_index: Option<u8>,
    pub event_digest: Digest,
    pub description: String,
}

impl GuestEvent {
    pub fn new(rtmr: u8, pcr_index: Option<u8>, data: &[u8], description: &str) -> Result<Self, TdError> {
        let ev = Self {
            rtmr,
            pcr_index,
            event_digest: digest(data),
            description: description.to_owned(),
        };
        ev.validate()?;
        Ok(ev)
    }

    pub fn validate(&self) -> Result<(), TdError> {
        if usize::from(self.rtmr) >= RTMR_COUNT {
            return Err(TdError::InvalidRtmr(self.rtmr));
        }
        if !TdRegister::Rtmr(self.rtmr).accepts_mirror(self.pcr_index) {
            return Err(TdError::InvalidMapping {
                rtmr: self.rtmr,
                pcr: self.pcr_index,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuestLogEntry {
    pub register: TdRegister,
    pub pcr_index: Option<u8>,
    pub event_digest: Digest,
    pub description: String,
}

/// Live TD state. Measurement fields are private: after launch they
/// change only through [`TdState::rtmr_extend`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TdState {
    mrtd: Digest,
    rtmrs: [Digest; RTMR_COUNT],
    mrconfigid: Digest,
    mrowner: Digest,
    mrownerconfig: Digest,
    host_platform_id: String,
    ppid: String,
    tcb: TcbInfo,
    guest_log: Vec<GuestLogEntry>,
}

/// Launches a TD on `platform`. The host supplies `ak_pub`, whose digest
/// becomes MRCONFIGID; the firmware digest becomes MRTD and is logged
/// as the PCR 0 mirror.
pub fn td_launch(
    platform: &Platform,
    firmware: &[u8],
    ak_pub: &PublicKey,
    owner: &[u8],
) -> Result<TdState, TdError> {
    if !platform.is_launched() {
        return Err(PlatformError::NotLaunched(platform.id().to_owned()).into());
    }
    let mrtd = digest(firmware);
    Ok(TdState {
        mrtd,
        rtmrs: [Digest::ZERO; RTMR_COUNT],
        mrconfigid: digest(&ak_pub.0),
        mrowner: digest(owner),
        mrownerconfig: Digest::ZERO,
        host_platform_id: platform.id().to_owned(),
        ppid: platform.tdx().ppid().to_owned(),
        tcb: platform.tdx().tcb().clone(),
        guest_log: vec![GuestLogEntry {
            register: TdRegister::Mrtd,
            pcr_index: Some(0),
            event_digest: mrtd,
            description: "TD virtual firmware".into(),
        }],
    })
}

impl TdState {
    pub fn rtmr_extend(&mut self, event: &GuestEvent) -> Result<(), TdError> {
        event.validate()?;
        let i = usize::from(event.rtmr);
        self.rtmrs[i] = extend(&self.rtmrs[i], &event.event_digest);
        self.guest_log.push(GuestLogEntry {
            register: TdRegister::Rtmr(event.rtmr),
            pcr_index: event.pcr_index,
            event_digest: event.event_digest,
            description: event.description.clone(),
        });
        Ok(())
    }

    pub fn mrtd(&self) -> &Digest {
        &self.mrtd
    }

    pub fn rtmrs(&self) -> &[Digest; RTMR_COUNT] {
        &self.rtmrs
    }

    pub fn mrconfigid(&self) -> &Digest {
        &self.mrconfigid
    }

    pub fn host_platform_id(&self) -> &str {
        &self.host_platform_id
    }

    pub fn guest_log(&self) -> &[GuestLogEntry] {
        &self.guest_log
    }

    pub fn body(&self) -> TdReportBody {
        TdReportBody {
            mrtd: self.mrtd,
            rtmrs: self.rtmrs,
            mrconfigid: self.mrconfigid,
            mrowner: self.mrowner,
            mrownerconfig: self.mrownerconfig,
            ppid: self.ppid.clone(),
            tcb: self.tcb.clone(),
        }
    }
}

/// Measurement fields of a TD report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TdReportBody {
    pub mrconfigid: Digest,
    pub mrowner: Digest,
    pub mrownerconfig: Digest,
    pub mrtd: Digest,
    pub ppid: String,
    pub rtmrs: [Digest; RTMR_COUNT],
    pub tcb: TcbInfo,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TdReport {
    pub body: TdReportBody,
    pub qe_chain: CertChain,
    pub qe_signature: Signature,
    pub report_data: ReportData,
}

impl TdReport {
    pub fn signed_bytes(body: &TdReportBody, report_data: &ReportData) -> Vec<u8> {
        let mut w = CanonicalWriter::new("dcea.td-report.v1");
        w.bytes(&body.mrtd.0);
        for r in &body.rtmrs {
            w.bytes(&r.0);
        }
        w.bytes(&body.mrconfigid.0)
            .bytes(&body.mrowner.0)
            .bytes(&body.mrownerconfig.0)
            .str(&body.ppid)
            .bytes(&body.tcb.tee_tcb_svn)
            .bytes(&body.tcb.mrseam.0)
            .bytes(&body.tcb.seam_attributes)
            .bytes(&body.tcb.td_attributes)
            .bytes(&report_data.0);
        w.finish()
    }

    /// Signature check under the QE chain leaf. Does not judge the chain.
    pub fn signature_valid(&self) -> bool {
        let Some(leaf) = self.qe_chain.leaf() else {
            return false;
        };
        crypto::verify(
            &leaf.subject_public,
            &Self::signed_bytes(&self.body, &self.report_data),
            &self.qe_signature,
        )
        .unwrap_or(false)
    }
}

/// Signs arbitrary report contents. Honest reports go through
/// [`td_report`]; this is also what a forger with its own QE key uses.
pub fn sign_report_body(
    body: TdReportBody,
    report_data: ReportData,
    qe: &KeyPair,
    qe_chain: &CertChain,
) -> TdReport {
    let qe_signature = qe.sign(&TdReport::signed_bytes(&body, &report_data));
    TdReport {
        body,
        qe_chain: qe_chain.clone(),
        qe_signature,
        report_data,
    }
}

pub fn td_report(
    td: &TdState,
    report_data: &[u8],
    qe: &KeyPair,
    qe_chain: &CertChain,
) -> Result<TdReport, TdError> {
    let rd = ReportData::from_slice(report_data).ok_or(TdError::BadReportData(report_data.len()))?;
    Ok(sign_report_body(td.body(), rd, qe, qe_chain))
}

/// Where the AK binding digest lives in TD evidence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum BindingChannel {
    #[default]
    #[serde(rename = "MRCONFIGID")]
    Mrconfigid,
    #[serde(rename = "REPORT_DATA")]
    ReportData,
}

/// Width of the AK digest prefix carried in report_data.
pub const REPORT_DATA_BINDING_LEN: usize = 32;

/// Result of the optional in-TD consistency check, carried in byte 32 of
/// report_data when the MRCONFIGID channel leaves that half free.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InTdCheck {
    NotEvaluated = 0,
    Consistent = 1,
    Inconsistent = 2,
}

/// report_data layout: bytes 0..32 hold the TD nonce. Bytes 32..64 hold
/// the first 32 bytes of digest(AK_pub) on the report_data channel;
/// on the MRCONFIGID channel byte 32 carries the [`InTdCheck`] outcome
/// and the rest is zero.
pub fn compose_report_data(
    td_nonce: &Nonce,
    channel: BindingChannel,
    ak_digest: &Digest,
    in_td: InTdCheck,
) -> ReportData {
    let mut out = [0u8; REPORT_DATA_LEN];
    out[..32].copy_from_slice(&td_nonce.0);
    match channel {
        BindingChannel::ReportData => {
            out[32..].copy_from_slice(&ak_digest.0[..REPORT_DATA_BINDING_LEN]);
        }
        BindingChannel::Mrconfigid => out[32] = in_td as u8,
    }
    ReportData(out)
}

impl ReportData {
    pub fn nonce(&self) -> Nonce {
        Nonce::from_slice(&self.0[..32]).expect("32-byte prefix")
    }

    pub fn binding(&self) -> &[u8] {
        &self.0[32..]
    }

    pub fn in_td_check(&self) -> Option<InTdCheck> {
        match self.0[32] {
            0 => Some(InTdCheck::NotEvaluated),
            1 => Some(InTdCheck::Consistent),
            2 => Some(InTdCheck::Inconsistent),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{claims, issue_cert, keygen, verify_chain, ChainVerdict, KeyKind};
    use crate::platform::{HostStack, TdxModule};
    use crate::tpm::{TpmKind, TpmState};

    struct Fixture {
        platform: Platform,
        vendor_root: crate::crypto::Certificate,
        qe: KeyPair,
    }

    fn fixture() -> Fixture {
        let ca = keygen(b"provider", KeyKind::Ca).unwrap();
        let vendor = keygen(b"vendor", KeyKind::Ca).unwrap();
        let vendor_root = issue_cert(&vendor, vendor.public(), claims([("vendor", "chipco")]));
        let qe = keygen(b"qe", KeyKind::Qe).unwrap();
        let qe_cert = issue_cert(&vendor, qe.public(), claims([("role", "QE")]));
        let chain = CertChain::new(vec![qe_cert, vendor_root.clone()]);
        let tpm = TpmState::init(b"ek", &ca, claims([("provider", "acme")]), TpmKind::Discrete).unwrap();
        let tdx = TdxModule::new(qe.clone(), chain, "ppid-h".into(), TcbInfo::for_platform("h"));
        let stack = HostStack::from_labels("fw", "acm", "ldr", "k", "hv", "vtpm");
        let mut platform = Platform::new("h", stack, tpm, claims([("provider", "acme")]), tdx);
        platform.launch().unwrap();
        Fixture {
            platform,
            vendor_root,
            qe,
        }
    }

    fn ak(seed: &[u8]) -> PublicKey {
        *keygen(seed, KeyKind::Ak).unwrap().public()
    }

    #[test]
    fn mrtd_is_firmware_digest_and_mrconfigid_is_ak_digest() {
        let f = fixture();
        let td = td_launch(&f.platform, b"tdvf", &ak(b"ak"), b"owner").unwrap();
        assert_eq!(*td.mrtd(), digest(b"tdvf"));
        use sha2::Digest as _;
        let independent: [u8; 48] = sha2::Sha384::digest(ak(b"ak").0).into();
        assert_eq!(td.mrconfigid().0, independent);
        assert!(td.rtmrs().iter().all(Digest::is_zero));
    }

    #[test]
    fn same_firmware_different_ak() {
        let f = fixture();
        let a = td_launch(&f.platform, b"tdvf", &ak(b"a"), b"o").unwrap();
        let b = td_launch(&f.platform, b"tdvf", &ak(b"b"), b"o").unwrap();
        assert_eq!(a.mrtd(), b.mrtd());
        assert_ne!(a.mrconfigid(), b.mrconfigid());
    }

    #[test]
    fn unlaunched_platform_rejected() {
        let ca = keygen(b"provider", KeyKind::Ca).unwrap();
        let tpm = TpmState::init(b"ek", &ca, Default::default(), TpmKind::Discrete).unwrap();
        let tdx = TdxModule::new(
            keygen(b"qe", KeyKind::Qe).unwrap(),
            CertChain::default(),
            "p".into(),
            TcbInfo::for_platform("x"),
        );
        let p = Platform::new("x", HostStack::from_labels("a", "b", "c", "d", "e", "f"), tpm, Default::default(), tdx);
        assert!(matches!(
            td_launch(&p, b"fw", &ak(b"a"), b"o").unwrap_err(),
            TdError::Platform(PlatformError::NotLaunched(_))
        ));
    }

    #[test]
    fn kernel_event_goes_to_rtmr1_with_pcr_2_to_5_mirror() {
        assert!(GuestEvent::new(1, Some(4), b"vmlinuz", "kernel").is_ok());
        assert_eq!(
            GuestEvent::new(1, Some(8), b"vmlinuz", "kernel").unwrap_err(),
            TdError::InvalidMapping { rtmr: 1, pcr: Some(8) }
        );
        assert_eq!(TdRegister::Rtmr(1).mirrored_pcrs(), &[2, 3, 4, 5]);
        assert_eq!(TdRegister::Rtmr(0).mirrored_pcrs(), &[1, 7]);
        assert_eq!(TdRegister::Mrtd.mirrored_pcrs(), &[0]);
        assert!(TdRegister::Rtmr(3).mirrored_pcrs().is_empty());
    }

    #[test]
    fn invalid_rtmr_index() {
        let f = fixture();
        let mut td = td_launch(&f.platform, b"fw", &ak(b"a"), b"o").unwrap();
        let bad = GuestEvent {
            rtmr: 4,
            pcr_index: None,
            event_digest: digest(b"x"),
            description: String::new(),
        };
        assert_eq!(td.rtmr_extend(&bad).unwrap_err(), TdError::InvalidRtmr(4));
    }

    #[test]
    fn guest_log_replay_reproduces_rtmrs() {
        let f = fixture();
        let mut td = td_launch(&f.platform, b"fw", &ak(b"a"), b"o").unwrap();
        for ev in [
            GuestEvent::new(0, Some(1), b"cfg", "cfg").unwrap(),
            GuestEvent::new(1, Some(4), b"kernel", "kernel").unwrap(),
            GuestEvent::new(2, Some(10), b"app", "app").unwrap(),
            GuestEvent::new(1, Some(5), b"initrd", "initrd").unwrap(),
            GuestEvent::new(3, None, b"rt", "runtime").unwrap(),
        ] {
            td.rtmr_extend(&ev).unwrap();
        }
        let mut replay = [Digest::ZERO; RTMR_COUNT];
        for e in td.guest_log() {
            if let TdRegister::Rtmr(i) = e.register {
                replay[usize::from(i)] = extend(&replay[usize::from(i)], &e.event_digest);
            }
        }
        assert_eq!(&replay, td.rtmrs());
    }

    #[test]
    fn report_verifies_under_vendor_root_and_detects_tamper() {
        let f = fixture();
        let mut td = td_launch(&f.platform, b"fw", &ak(b"a"), b"o").unwrap();
        td.rtmr_extend(&GuestEvent::new(1, Some(4), b"k", "kernel").unwrap()).unwrap();
        let nonce = Nonce([9; 32]);
        let rd = compose_report_data(&nonce, BindingChannel::Mrconfigid, td.mrconfigid(), InTdCheck::NotEvaluated);
        let report = f.platform.td_report(&td, &rd.0).unwrap();
        assert!(report.signature_valid());
        assert_eq!(verify_chain(&report.qe_chain, std::slice::from_ref(&f.vendor_root)).unwrap(), ChainVerdict::Valid);
        assert_eq!(report.report_data.nonce(), nonce);

        let mut tampered = report.clone();
        tampered.body.rtmrs[1] = digest(b"other");
        assert!(!tampered.signature_valid());
    }

    #[test]
    fn bad_report_data_length() {
        let f = fixture();
        let td = td_launch(&f.platform, b"fw", &ak(b"a"), b"o").unwrap();
        assert_eq!(
            td_report(&td, &[0; 32], &f.qe, f.platform.tdx().qe_chain()).unwrap_err(),
            TdError::BadReportData(32)
        );
    }

    #[test]
    fn report_data_channel_carries_ak_prefix() {
        let d = digest(b"ak");
        let rd = compose_report_data(&Nonce([1; 32]), BindingChannel::ReportData, &d, InTdCheck::NotEvaluated);
        assert_eq!(rd.binding(), &d.0[..32]);
        assert_eq!(rd.nonce(), Nonce([1; 32]));
    }

    #[test]
    fn register_labels_roundtrip() {
        for r in [TdRegister::Mrtd, TdRegister::Rtmr(0), TdRegister::Rtmr(3)] {
            assert_eq!(TdRegister::parse(&r.label()), Some(r));
        }
        assert_eq!(TdRegister::parse("RTMR4"), None);
    }
}
