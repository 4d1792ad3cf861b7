// SPDX-License-Identifier: Apache-2.0

//! Composite evidence: the bundle a verifier appraises, its canonical file
//! encoding, event-log replay and the RTMR/PCR consistency rows.

mod bundle;
mod replay;

pub use bundle::{
    combined_event_log, deserialize, serialize, BundleBuilder, EvidenceBundle, EvidenceError,
    LogEntry, Nonces, ParseError, Timing, FORMAT_VERSION,
};
pub use replay::{
    check_consistency_with_body, check_rtmr_pcr_consistency, in_td_evaluate, replay_event_log,
    ConsistencyResult, ConsistencyRow, LogFilter, Replayed, RowValues,
};

pub use bundle::from_json;
pub(crate) use bundle::to_canonical_json;
