use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use grpo_forge::trainer::TrainerConfig;

pub const MANIFEST: &str = "manifest.json";

/// Provenance of a run directory. Timestamps live only here, so every other
/// output file is byte-identical across reruns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    pub tool_version: String,
    pub config: TrainerConfig,
    /// `sha256("blob <len>\0" ++ resolved config JSON)`.
    pub input_hash: String,
    pub started_at_unix: u64,
    pub finished_at_unix: Option<u64>,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

impl RunManifest {
    pub fn begin(command: &str, config: &TrainerConfig) -> Self {
        let input_hash = content_hash(config.to_json().as_bytes());
        Self {
            run_id: format!("{command}-{}", &input_hash[..12]),
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config: config.clone(),
            input_hash,
            started_at_unix: now(),
            finished_at_unix: None,
        }
    }

    pub fn finish(&mut self) {
        self.finished_at_unix = Some(now());
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST);
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n").with_context(|| format!("writing {}", path.display()))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn git_style_hash() {
        // `printf 'hello\n' | git hash-object --object-format=sha256 --stdin`
        assert_eq!(
            content_hash(b"hello\n"),
            "2cf8d83d9ee29543b34a87727421fdecb7e3f3a183d337639025de576db9ebb4"
        );
    }

    #[test]
    fn identity_ignores_time() {
        let cfg = TrainerConfig::default();
        let a = RunManifest::begin("train", &cfg);
        let b = RunManifest::begin("train", &cfg);
        assert_eq!(a.run_id, b.run_id);
        assert_eq!(a.input_hash, b.input_hash);
        let dir = tempfile::tempdir().unwrap();
        a.write(dir.path()).unwrap();
        assert_eq!(RunManifest::read(dir.path()).unwrap(), a);
    }
}
