//! Content hashing for provenance stamps on grids, bases, and artifacts.

use sha2::{Digest, Sha256};

/// Incremental hasher with a canonical little-endian encoding for numbers.
pub struct ContentHasher {
    inner: Sha256,
}

impl ContentHasher {
    pub fn new(label: &str) -> Self {
        let mut inner = Sha256::new();
        inner.update(label.as_bytes());
        inner.update([0u8]);
        Self { inner }
    }

    pub fn push_bytes(&mut self, bytes: &[u8]) {
        self.inner.update(bytes);
    }

    pub fn push_str(&mut self, s: &str) {
        self.inner.update(s.as_bytes());
        self.inner.update([0u8]);
    }

    pub fn push_u64(&mut self, v: u64) {
        self.inner.update(v.to_le_bytes());
    }

    pub fn push_f64(&mut self, v: f64) {
        self.inner.update(v.to_le_bytes());
    }

    pub fn push_f64_slice(&mut self, vs: &[f64]) {
        self.push_u64(vs.len() as u64);
        for v in vs {
            self.push_f64(*v);
        }
    }

    pub fn finish_hex(self) -> String {
        let digest = self.inner.finalize();
        let mut out = String::with_capacity(64);
        for byte in digest {
            use std::fmt::Write;
            let _ = write!(out, "{byte:02x}");
        }
        out
    }
}

/// One-shot hash of a byte buffer, hex-encoded.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = ContentHasher::new("raw");
    h.push_bytes(bytes);
    h.finish_hex()
}
