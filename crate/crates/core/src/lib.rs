pub mod afm;
pub mod autograd;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dai;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod models;
pub mod registry;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// SHA-256 over a list of strings, each length-prefixed.
pub(crate) fn checksum_strings(parts: &[String]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
