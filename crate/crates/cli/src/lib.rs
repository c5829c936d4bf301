//! Config-driven driver behind the `3tf` binary: dataset generation,
//! two-stage training, evaluation and report tables.

pub mod commands;
pub mod config;

use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
