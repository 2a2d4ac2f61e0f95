//! Plain-text run manifests.

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use sha2::{Digest, Sha256};

/// Git-style object hash: `sha256("blob <len>\0" ++ bytes)`.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    format!("sha256:{}", hex::encode(h.finalize()))
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(content_hash(&bytes))
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

#[derive(Debug)]
pub struct RunManifest {
    command: String,
    started: u64,
    fields: Vec<(String, String)>,
    artifacts: Vec<String>,
    config: String,
}

impl RunManifest {
    pub fn start(command: &str) -> Self {
        RunManifest {
            command: command.to_string(),
            started: now(),
            fields: Vec::new(),
            artifacts: Vec::new(),
            config: String::new(),
        }
    }

    pub fn field(&mut self, key: &str, value: impl ToString) {
        self.fields.push((key.to_string(), value.to_string()));
    }

    pub fn artifact(&mut self, name: impl Into<String>) {
        let name = name.into();
        if !self.artifacts.contains(&name) {
            self.artifacts.push(name);
        }
    }

    pub fn config(&mut self, text: &str) {
        self.config = text.to_string();
    }

    /// Writes `<command>_manifest.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let args: Vec<String> = std::env::args().collect();
        let mut s = format!(
            "command = {}\ncommand_line = {}\nstarted_unix = {}\nfinished_unix = {}\n",
            self.command,
            args.join(" "),
            self.started,
            now()
        );
        for (k, v) in &self.fields {
            s += &format!("{k} = {v}\n");
        }
        s += "\n[artifacts]\n";
        for a in &self.artifacts {
            s += a;
            s.push('\n');
        }
        if !self.config.is_empty() {
            s += "\n[config]\n";
            s += &self.config;
        }
        let path = dir.join(format!("{}_manifest.txt", self.command));
        std::fs::write(&path, s).with_context(|| format!("writing {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_git_sha256_blob_format() {
        // Independent construction of the same preimage.
        let mut pre = b"blob 5\0".to_vec();
        pre.extend_from_slice(b"hello");
        let want = hex::encode(Sha256::digest(&pre));
        assert_eq!(content_hash(b"hello"), format!("sha256:{want}"));
        assert_ne!(content_hash(b"hello"), content_hash(b"hellp"));
    }
}
