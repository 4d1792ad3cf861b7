// SPDX-License-Identifier: Apache-2.0

//! Host-controlled links with virtual-time delivery.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::evidence::EvidenceBundle;
use crate::tpm::TpmQuote;
use crate::verifier::Challenge;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Endpoint {
    Verifier,
    /// The machine the verifier believes it is talking to.
    Host,
    /// A second machine reachable only through the host.
    Remote,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    Challenge(Challenge),
    QuoteRequest { nonce: crate::crypto::Nonce },
    Quote(Box<TpmQuote>),
    Evidence(Box<EvidenceBundle>),
}

pub type TamperHook = Arc<dyn Fn(Message) -> Option<Message> + Send + Sync>;

/// A one-directional channel. The hook sees every message and may
/// rewrite or drop it; every message that leaves the link is also
/// recorded for later replay.
#[derive(Clone, Default)]
pub struct LinkModel {
    pub one_way_delay_ms: u64,
    pub tamper_hook: Option<TamperHook>,
    pub replay_buffer: Vec<Message>,
}

impl fmt::Debug for LinkModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LinkModel")
            .field("one_way_delay_ms", &self.one_way_delay_ms)
            .field("tamper_hook", &self.tamper_hook.as_ref().map(|_| "<hook>"))
            .field("replay_buffer", &self.replay_buffer.len())
            .finish()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    pub message: Option<Message>,
    pub arrived_at: u64,
}

impl LinkModel {
    pub fn new(one_way_delay_ms: u64) -> Self {
        Self {
            one_way_delay_ms,
            ..Self::default()
        }
    }

    pub fn with_hook(mut self, hook: TamperHook) -> Self {
        self.tamper_hook = Some(hook);
        self
    }

    pub fn deliver(&mut self, message: Message, sent_at: u64) -> Delivery {
        let message = match &self.tamper_hook {
            Some(hook) => hook(message),
            None => Some(message),
        };
        if let Some(m) = &message {
            self.replay_buffer.push(m.clone());
        }
        Delivery {
            message,
            arrived_at: sent_at + self.one_way_delay_ms,
        }
    }
}
