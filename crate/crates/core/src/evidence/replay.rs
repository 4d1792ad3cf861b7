// SPDX-License-Identifier: Apache-2.0

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::bundle::{EvidenceError, LogEntry};
use crate::crypto::{extend, Digest};
use crate::td::{InTdCheck, TdRegister, TdReport, TdReportBody, TdState, RTMR_COUNT};
use crate::tpm::{Scope, TpmQuote, PCR_COUNT};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogFilter {
    Host,
    Guest,
    Both,
}

impl LogFilter {
    fn admits(self, scope: Scope) -> bool {
        matches!(
            (self, scope),
            (LogFilter::Both, _) | (LogFilter::Host, Scope::Host) | (LogFilter::Guest, Scope::Guest)
        )
    }
}

/// Register values reconstructed from a log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Replayed {
    pub pcrs: [Digest; PCR_COUNT],
    pub rtmrs: [Digest; RTMR_COUNT],
    pub mrtd: Option<Digest>,
}

impl Default for Replayed {
    fn default() -> Self {
        Self {
            pcrs: [Digest::ZERO; PCR_COUNT],
            rtmrs: [Digest::ZERO; RTMR_COUNT],
            mrtd: None,
        }
    }
}

fn invalid(index: usize, reason: impl Into<String>) -> EvidenceError {
    EvidenceError::InvalidEntry {
        index,
        reason: reason.into(),
    }
}

fn validate(index: usize, e: &LogEntry) -> Result<(), EvidenceError> {
    if let Some(p) = e.pcr {
        if usize::from(p) >= PCR_COUNT {
            return Err(invalid(index, format!("PCR index {p} out of range")));
        }
    }
    match (e.scope, e.td_register) {
        (Scope::Host, Some(_)) => Err(invalid(index, "host entry names a TD register")),
        (Scope::Host, None) if e.pcr.is_none() => Err(invalid(index, "host entry without a PCR")),
        (Scope::Guest, None) => Err(invalid(index, "guest entry without a TD register")),
        (Scope::Guest, Some(TdRegister::Rtmr(i))) if usize::from(i) >= RTMR_COUNT => {
            Err(invalid(index, format!("RTMR index {i} out of range")))
        }
        (Scope::Guest, Some(r)) if !r.accepts_mirror(e.pcr) => Err(invalid(
            index,
            format!("{} cannot mirror into PCR {:?}", r.label(), e.pcr),
        )),
        _ => Ok(()),
    }
}

/// Folds `extend` per register from zero in log order. Guest entries
/// update both their TD register and their mirrored PCR.
pub fn replay_event_log(log: &[LogEntry], filter: LogFilter) -> Result<Replayed, EvidenceError> {
    let mut out = Replayed::default();
    for (index, e) in log.iter().enumerate() {
        validate(index, e)?;
        if !filter.admits(e.scope) {
            continue;
        }
        if let Some(p) = e.pcr {
            let p = usize::from(p);
            out.pcrs[p] = extend(&out.pcrs[p], &e.digest);
        }
        match e.td_register {
            Some(TdRegister::Mrtd) => {
                if out.mrtd.replace(e.digest).is_some() {
                    return Err(invalid(index, "second MRTD entry"));
                }
            }
            Some(TdRegister::Rtmr(i)) => {
                let i = usize::from(i);
                out.rtmrs[i] = extend(&out.rtmrs[i], &e.digest);
            }
            None => {}
        }
    }
    Ok(out)
}

/// One side of a consistency row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowValues {
    pub register: Option<Digest>,
    pub pcrs: BTreeMap<u8, Option<Digest>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsistencyRow {
    /// `None` for the row collecting quoted PCRs outside the mapping.
    pub tdx_register: Option<TdRegister>,
    pub pcr_set: Vec<u8>,
    pub matched: bool,
    pub expected: RowValues,
    pub actual: RowValues,
    /// Whether this is one of the four register-mapping rows.
    pub mapped: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsistencyResult {
    pub per_mapping: Vec<ConsistencyRow>,
    /// Set when the log itself could not be replayed; every row is then
    /// unmatched.
    pub log_error: Option<String>,
}

impl ConsistencyResult {
    pub fn all_matched(&self) -> bool {
        self.per_mapping.iter().all(|r| r.matched)
    }

    pub fn mapping_rows(&self) -> impl Iterator<Item = &ConsistencyRow> {
        self.per_mapping.iter().filter(|r| r.mapped)
    }

    pub fn row(&self, register: TdRegister) -> Option<&ConsistencyRow> {
        self.per_mapping
            .iter()
            .find(|r| r.tdx_register == Some(register))
    }

    pub fn mismatched(&self) -> impl Iterator<Item = &ConsistencyRow> {
        self.per_mapping.iter().filter(|r| !r.matched)
    }
}

const REGISTER_MAP: [TdRegister; 4] = [
    TdRegister::Mrtd,
    TdRegister::Rtmr(0),
    TdRegister::Rtmr(1),
    TdRegister::Rtmr(2),
];

fn live_register(body: &TdReportBody, r: TdRegister) -> Digest {
    match r {
        TdRegister::Mrtd => body.mrtd,
        TdRegister::Rtmr(i) => body.rtmrs[usize::from(i)],
    }
}

fn replayed_register(rep: &Replayed, r: TdRegister) -> Option<Digest> {
    match r {
        TdRegister::Mrtd => rep.mrtd,
        TdRegister::Rtmr(i) => Some(rep.rtmrs[usize::from(i)]),
    }
}

fn make_row(
    register: Option<TdRegister>,
    pcr_set: Vec<u8>,
    body: &TdReportBody,
    quote: &TpmQuote,
    rep: Option<&Replayed>,
    mapped: bool,
) -> ConsistencyRow {
    let expected = RowValues {
        register: register.and_then(|r| rep.and_then(|rep| replayed_register(rep, r))),
        pcrs: pcr_set
            .iter()
            .map(|&p| (p, rep.map(|rep| rep.pcrs[usize::from(p)])))
            .collect(),
    };
    let actual = RowValues {
        register: register.map(|r| live_register(body, r)),
        pcrs: pcr_set.iter().map(|&p| (p, quote.pcr(p).copied())).collect(),
    };
    let matched = rep.is_some()
        && expected.register == actual.register
        && expected.pcrs.values().all(Option::is_some)
        && expected.pcrs == actual.pcrs;
    ConsistencyRow {
        tdx_register: register,
        pcr_set,
        matched,
        expected,
        actual,
        mapped,
    }
}

/// Compares the live TD registers and quoted PCRs against a replay of the
/// shared log. A row matches when both live views equal their replayed
/// values.
///
/// Besides the four mapping rows there are two auxiliary rows: RTMR3,
/// which has no PCR mirror, and the quoted PCRs no mapping row covers
/// (host static chain and launch anchors). Together they make every log
/// entry visible in some row.
pub fn check_consistency_with_body(
    body: &TdReportBody,
    quote: &TpmQuote,
    log: &[LogEntry],
) -> ConsistencyResult {
    let replay = replay_event_log(log, LogFilter::Both);
    let rep = replay.as_ref().ok();
    let mut rows: Vec<ConsistencyRow> = REGISTER_MAP
        .iter()
        .map(|&r| make_row(Some(r), r.mirrored_pcrs().to_vec(), body, quote, rep, true))
        .collect();
    rows.push(make_row(Some(TdRegister::Rtmr(3)), Vec::new(), body, quote, rep, false));
    let mapped: BTreeSet<u8> = REGISTER_MAP
        .iter()
        .flat_map(|r| r.mirrored_pcrs().iter().copied())
        .collect();
    let others: Vec<u8> = quote
        .pcrs
        .iter()
        .map(|p| p.index)
        .filter(|i| !mapped.contains(i))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    rows.push(make_row(None, others, body, quote, rep, false));
    ConsistencyResult {
        per_mapping: rows,
        log_error: replay.err().map(|e| e.to_string()),
    }
}

pub fn check_rtmr_pcr_consistency(
    td_report: &TdReport,
    tpm_quote: &TpmQuote,
    event_log: &[LogEntry],
) -> ConsistencyResult {
    check_consistency_with_body(&td_report.body, tpm_quote, event_log)
}

/// The comparison run inside the TD before it requests its report, so
/// only the outcome leaves the guest.
pub fn in_td_evaluate(td: &TdState, quote: &TpmQuote, log: &[LogEntry]) -> InTdCheck {
    if check_consistency_with_body(&td.body(), quote, log).all_matched() {
        InTdCheck::Consistent
    } else {
        InTdCheck::Inconsistent
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::digest;

    fn guest(r: TdRegister, pcr: Option<u8>, data: &[u8]) -> LogEntry {
        LogEntry {
            description: String::new(),
            digest: digest(data),
            pcr,
            scope: Scope::Guest,
            td_register: Some(r),
        }
    }

    #[test]
    fn empty_log_replays_to_zero() {
        let r = replay_event_log(&[], LogFilter::Both).unwrap();
        assert_eq!(r, Replayed::default());
        assert!(r.pcrs.iter().chain(r.rtmrs.iter()).all(Digest::is_zero));
    }

    #[test]
    fn guest_entry_updates_both_views() {
        let log = [guest(TdRegister::Rtmr(1), Some(4), b"k")];
        let r = replay_event_log(&log, LogFilter::Both).unwrap();
        let want = extend(&Digest::ZERO, &digest(b"k"));
        assert_eq!(r.pcrs[4], want);
        assert_eq!(r.rtmrs[1], want);
        let host_only = replay_event_log(&log, LogFilter::Host).unwrap();
        assert!(host_only.pcrs[4].is_zero());
    }

    #[test]
    fn rejects_out_of_range_and_bad_pairing() {
        let mut bad = LogEntry::host(24, digest(b"x"), "");
        assert!(matches!(
            replay_event_log(&[bad.clone()], LogFilter::Both),
            Err(EvidenceError::InvalidEntry { index: 0, .. })
        ));
        bad.pcr = Some(3);
        bad.td_register = Some(TdRegister::Rtmr(0));
        assert!(replay_event_log(&[bad], LogFilter::Both).is_err());
        let pairing = guest(TdRegister::Rtmr(2), Some(4), b"x");
        assert!(replay_event_log(&[pairing], LogFilter::Both).is_err());
        let rtmr9 = guest(TdRegister::Rtmr(9), None, b"x");
        assert!(replay_event_log(&[rtmr9], LogFilter::Guest).is_err());
    }

    #[test]
    fn duplicate_mrtd_rejected() {
        let log = [
            guest(TdRegister::Mrtd, Some(0), b"a"),
            guest(TdRegister::Mrtd, Some(0), b"b"),
        ];
        assert!(matches!(
            replay_event_log(&log, LogFilter::Both),
            Err(EvidenceError::InvalidEntry { index: 1, .. })
        ));
    }
}
