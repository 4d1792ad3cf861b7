// SPDX-License-Identifier: Apache-2.0

//! Canonical byte encoding used for everything that gets signed.
//!
//! Every field is written as a 4-byte big-endian length followed by the
//! field bytes. Integers are encoded as 8-byte big-endian values (so they
//! appear as a field of length 8). Lists are a count field followed by
//! their elements; maps are a count field followed by key/value pairs in
//! ascending key order. Each signed structure starts with a domain tag
//! field (for example `dcea.cert.v1`). The layout of every signed
//! structure is listed in `FORMAT.md` at the repository root.

use std::collections::BTreeMap;

#[derive(Debug, Default, Clone)]
pub struct CanonicalWriter {
    buf: Vec<u8>,
}

impl CanonicalWriter {
    pub fn new(tag: &str) -> Self {
        let mut w = Self::default();
        w.bytes(tag.as_bytes());
        w
    }

    pub fn bytes(&mut self, field: &[u8]) -> &mut Self {
        let len = u32::try_from(field.len()).expect("field longer than 4 GiB");
        self.buf.extend_from_slice(&len.to_be_bytes());
        self.buf.extend_from_slice(field);
        self
    }

    pub fn str(&mut self, field: &str) -> &mut Self {
        self.bytes(field.as_bytes())
    }

    pub fn u64(&mut self, value: u64) -> &mut Self {
        self.bytes(&value.to_be_bytes())
    }

    pub fn count(&mut self, n: usize) -> &mut Self {
        self.u64(n as u64)
    }

    pub fn str_map(&mut self, map: &BTreeMap<String, String>) -> &mut Self {
        self.count(map.len());
        for (k, v) in map {
            self.str(k).str(v);
        }
        self
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}
