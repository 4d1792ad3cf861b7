// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{CertChain, Certificate, Digest, Nonce};
use crate::td::{GuestLogEntry, TdRegister, TdReport};
use crate::tpm::{EventLogEntry, Scope, TpmQuote};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EvidenceError {
    #[error("bundle is missing mandatory component `{0}`")]
    IncompleteBundle(&'static str),
    #[error("invalid event log entry {index}: {reason}")]
    InvalidEntry { index: usize, reason: String },
}

/// Decoding failure with the byte offset where the decoder stopped.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("parse error at byte {offset}: {message}")]
pub struct ParseError {
    pub offset: usize,
    pub message: String,
}

/// One measurement in the combined log. Host entries name a PCR; guest
/// entries name a TD register and, per the register mapping, the PCR they
/// mirror into.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogEntry {
    pub description: String,
    pub digest: Digest,
    pub pcr: Option<u8>,
    pub scope: Scope,
    pub td_register: Option<TdRegister>,
}

impl LogEntry {
    pub fn host(pcr: u8, digest: Digest, description: &str) -> Self {
        Self {
            description: description.to_owned(),
            digest,
            pcr: Some(pcr),
            scope: Scope::Host,
            td_register: None,
        }
    }
}

impl From<&GuestLogEntry> for LogEntry {
    fn from(e: &GuestLogEntry) -> Self {
        Self {
            description: e.description.clone(),
            digest: e.event_digest,
            pcr: e.pcr_index,
            scope: Scope::Guest,
            td_register: Some(e.register),
        }
    }
}

/// The quoting TPM's host-scope entries in order, then the TD's guest log.
/// Guest entries the TPM recorded itself are left out; the TD log is the
/// authoritative copy of those events.
pub fn combined_event_log(tpm_log: &[EventLogEntry], guest_log: &[GuestLogEntry]) -> Vec<LogEntry> {
    tpm_log
        .iter()
        .filter(|e| e.scope == Scope::Host)
        .map(|e| LogEntry::host(e.pcr_index, e.event_digest, &e.description))
        .chain(guest_log.iter().map(LogEntry::from))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Nonces {
    pub td_nonce: Nonce,
    pub tpm_nonce: Nonce,
}

/// Virtual-clock timestamps in milliseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Timing {
    pub challenge_sent: u64,
    pub quote_received: u64,
    pub td_received: u64,
}

impl Timing {
    pub fn rtt(&self) -> u64 {
        self.quote_received.saturating_sub(self.challenge_sent)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvidenceBundle {
    pub ak_cert: Option<Certificate>,
    pub ek_cert_chain: CertChain,
    pub event_log: Vec<LogEntry>,
    pub format_version: u32,
    pub nonces: Nonces,
    pub scenario_meta: BTreeMap<String, String>,
    pub td_report: TdReport,
    pub timing: Timing,
    pub tpm_quote: TpmQuote,
}

#[derive(Debug, Clone, Default)]
pub struct BundleBuilder {
    td_report: Option<TdReport>,
    tpm_quote: Option<TpmQuote>,
    ek_cert_chain: Option<CertChain>,
    ak_cert: Option<Certificate>,
    event_log: Option<Vec<LogEntry>>,
    nonces: Option<Nonces>,
    timing: Option<Timing>,
    scenario_meta: BTreeMap<String, String>,
}

impl BundleBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn td_report(mut self, r: TdReport) -> Self {
        self.td_report = Some(r);
        self
    }

    pub fn tpm_quote(mut self, q: TpmQuote) -> Self {
        self.tpm_quote = Some(q);
        self
    }

    pub fn ek_cert_chain(mut self, c: CertChain) -> Self {
        self.ek_cert_chain = Some(c);
        self
    }

    pub fn ak_cert(mut self, c: Option<Certificate>) -> Self {
        self.ak_cert = c;
        self
    }

    pub fn event_log(mut self, log: Vec<LogEntry>) -> Self {
        self.event_log = Some(log);
        self
    }

    pub fn nonces(mut self, n: Nonces) -> Self {
        self.nonces = Some(n);
        self
    }

    pub fn timing(mut self, t: Timing) -> Self {
        self.timing = Some(t);
        self
    }

    pub fn meta(mut self, key: &str, value: impl Into<String>) -> Self {
        self.scenario_meta.insert(key.to_owned(), value.into());
        self
    }

    pub fn build(self) -> Result<EvidenceBundle, EvidenceError> {
        use EvidenceError::IncompleteBundle as Missing;
        let ek_cert_chain = self.ek_cert_chain.ok_or(Missing("ek_cert_chain"))?;
        if ek_cert_chain.certs.is_empty() {
            return Err(Missing("ek_cert_chain"));
        }
        Ok(EvidenceBundle {
            ak_cert: self.ak_cert,
            ek_cert_chain,
            event_log: self.event_log.ok_or(Missing("event_log"))?,
            format_version: FORMAT_VERSION,
            nonces: self.nonces.ok_or(Missing("nonces"))?,
            scenario_meta: self.scenario_meta,
            td_report: self.td_report.ok_or(Missing("td_report"))?,
            timing: self.timing.ok_or(Missing("timing"))?,
            tpm_quote: self.tpm_quote.ok_or(Missing("tpm_quote"))?,
        })
    }
}

/// Canonical encoding: pretty-printed JSON with every object's keys in
/// sorted order, hex for byte fields and a trailing newline.
pub fn serialize(bundle: &EvidenceBundle) -> Vec<u8> {
    to_canonical_json(bundle)
}

pub(crate) fn to_canonical_json<T: Serialize>(value: &T) -> Vec<u8> {
    // `serde_json::Value` objects are BTreeMaps, so going through a Value
    // sorts keys at every depth.
    let v = serde_json::to_value(value).expect("bundle types serialize infallibly");
    let mut out = serde_json::to_vec_pretty(&v).expect("Value serializes infallibly");
    out.push(b'\n');
    out
}

pub fn deserialize(bytes: &[u8]) -> Result<EvidenceBundle, ParseError> {
    let bundle: EvidenceBundle = from_json(bytes)?;
    if bundle.format_version != FORMAT_VERSION {
        return Err(ParseError {
            offset: 0,
            message: format!("unsupported format_version {}", bundle.format_version),
        });
    }
    Ok(bundle)
}

/// Decodes any JSON document, reporting failures with a byte offset.
pub fn from_json<T: serde::de::DeserializeOwned>(bytes: &[u8]) -> Result<T, ParseError> {
    serde_json::from_slice(bytes).map_err(|e| ParseError {
        offset: byte_offset(bytes, e.line(), e.column()),
        message: e.to_string(),
    })
}

/// Converts serde_json's 1-based line/column into a byte offset.
fn byte_offset(bytes: &[u8], line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let line_start = bytes
        .iter()
        .enumerate()
        .filter(|(_, &b)| b == b'\n')
        .nth(line.saturating_sub(2))
        .map_or(0, |(i, _)| i + 1);
    let line_start = if line == 1 { 0 } else { line_start };
    (line_start + column.saturating_sub(1)).min(bytes.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offset_single_line() {
        let input = br#"{"a": }"#;
        let err = serde_json::from_slice::<serde_json::Value>(input).unwrap_err();
        let off = byte_offset(input, err.line(), err.column());
        assert_eq!(input[off], b'}');
    }

    #[test]
    fn offset_multi_line() {
        let input = b"{\n  \"a\": 1,\n  \"b\": ]\n}";
        let err = serde_json::from_slice::<serde_json::Value>(input).unwrap_err();
        let off = byte_offset(input, err.line(), err.column());
        assert_eq!(input[off], b']');
    }

    #[test]
    fn truncated_reports_offset_in_last_token() {
        let input = b"{\n  \"ak_cert\": nu";
        let err = from_json::<serde_json::Value>(input).unwrap_err();
        assert!((input.len() - 2..=input.len()).contains(&err.offset), "{err}");
    }

    #[test]
    fn incomplete_builder() {
        assert_eq!(
            BundleBuilder::new().build().unwrap_err(),
            EvidenceError::IncompleteBundle("ek_cert_chain")
        );
    }

    #[test]
    fn rtt_is_quote_minus_challenge() {
        let t = Timing {
            challenge_sent: 100,
            td_received: 140,
            quote_received: 730,
        };
        assert_eq!(t.rtt(), 630);
    }
}
