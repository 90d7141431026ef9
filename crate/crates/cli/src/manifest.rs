//! `manifest.txt`: everything needed to rerun a generation bit for bit.

use std::fmt::Write as _;

use chrono::{DateTime, Utc};
use sha2::{Digest, Sha256};
use vpgen_core::config::ConfigSources;
use vpgen_core::{EmitStats, GenerationParams};

pub const MANIFEST_FILE: &str = "manifest.txt";

pub struct RunManifest<'a> {
    pub config_dir: Option<&'a str>,
    pub sources: &'a ConfigSources,
    /// Effective parameters after flag overrides.
    pub params: &'a GenerationParams,
    pub workers: usize,
    pub gzip: bool,
    pub started: DateTime<Utc>,
    pub finished: DateTime<Utc>,
    pub stats: &'a EmitStats,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl RunManifest<'_> {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "tool=vpgen");
        let _ = writeln!(s, "version={}", env!("CARGO_PKG_VERSION"));
        let _ = writeln!(s, "seed={}", self.params.master_seed);
        let _ = writeln!(s, "n_patients={}", self.params.n_patients);
        let _ = writeln!(
            s,
            "config={}",
            self.config_dir.unwrap_or("embedded defaults")
        );
        for (name, text) in self.sources.files() {
            let _ = writeln!(s, "config_sha256.{name}={}", sha256_hex(text.as_bytes()));
        }
        for line in self.params.to_cfg().lines() {
            if let Some((key, value)) = line.split_once('=') {
                let _ = writeln!(s, "param.{}={}", key.trim(), value.trim());
            }
        }
        let _ = writeln!(s, "workers={}", self.workers);
        let _ = writeln!(s, "gzip={}", self.gzip);
        let _ = writeln!(s, "started={}", self.started.to_rfc3339());
        let _ = writeln!(s, "finished={}", self.finished.to_rfc3339());
        let _ = writeln!(s, "patients_written={}", self.stats.patients);
        let _ = writeln!(s, "dropped_admissions={}", self.stats.dropped_admissions);
        for file in &self.stats.files {
            let _ = writeln!(s, "rows.{}={}", file.name, file.rows);
            let _ = writeln!(s, "bytes.{}={}", file.name, file.bytes);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_of_empty_input() {
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }
}
