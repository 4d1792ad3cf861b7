// SPDX-License-Identifier: Apache-2.0

//! Composite attestation of a Trust Domain together with the TPM anchoring
//! its host: simulated hardware roots, evidence bundles, an appraisal
//! engine and an adversary harness.

pub mod adversary;
pub mod crypto;
pub mod encoding;
pub mod evidence;
mod hexbytes;
pub mod platform;
pub mod td;
pub mod tpm;
pub mod verifier;

pub use hexbytes::hex_vec;
