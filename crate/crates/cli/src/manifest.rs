use std::path::{Path, PathBuf};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InputFile {
    pub path: PathBuf,
    pub sha256: String,
}

/// Provenance of one output directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub seed: u64,
    /// SHA-256 over the effective config and every input file digest.
    pub input_hash: String,
    pub inputs: Vec<InputFile>,
    pub output_dir: PathBuf,
    pub outputs: Vec<String>,
    pub started_at: String,
    pub finished_at: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn timestamp(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Millis, true)
}

/// Hash of the effective config followed by each input's path and digest.
pub fn input_hash(config_json: &[u8], inputs: &[InputFile]) -> String {
    let mut h = Sha256::new();
    h.update(b"config\0");
    h.update(config_json);
    for i in inputs {
        h.update(b"\0input\0");
        h.update(i.path.to_string_lossy().as_bytes());
        h.update(b"\0");
        h.update(i.sha256.as_bytes());
    }
    hex::encode(h.finalize())
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes") + "\n";
        std::fs::write(dir.join(MANIFEST_FILE), text)
    }
}
