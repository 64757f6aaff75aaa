use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Git-style object hash: SHA-256 over `blob <len>\0<content>`.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Serialize)]
struct Artifact {
    path: String,
    sha256: String,
}

/// Provenance for one invocation, written as `manifest.json`.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub seed: Option<u64>,
    pub output_dir: PathBuf,
    pub config_hash: String,
    pub created_unix: u64,
    artifacts: Vec<Artifact>,
}

/// Output directory whose artifacts are tagged with the config hash.
pub struct Run {
    pub manifest: RunManifest,
}

impl Run {
    pub fn start(command: &str, out: &Path, config_path: Option<&Path>, config: &[u8], seed: Option<u64>) -> Result<Self> {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        let created_unix = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        Ok(Self {
            manifest: RunManifest {
                command: command.to_string(),
                config_path: config_path.map(Path::to_path_buf),
                seed,
                output_dir: out.to_path_buf(),
                config_hash: content_hash(config),
                created_unix,
                artifacts: Vec::new(),
            },
        })
    }

    pub fn hash(&self) -> &str {
        &self.manifest.config_hash
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.manifest.output_dir.join(name)
    }

    /// First line of a CSV or text artifact.
    pub fn tag_line(&self) -> String {
        format!("# config-hash: {}\n", self.hash())
    }

    /// Writes `content` under the output directory with a hash tag in the
    /// format's comment syntax.
    pub fn write(&mut self, name: &str, content: &str) -> Result<()> {
        let tagged = if name.ends_with(".svg") {
            match content.split_once('\n') {
                Some((first, rest)) => format!("{first}\n<!-- config-hash: {} -->\n{rest}", self.hash()),
                None => content.to_string(),
            }
        } else if name.ends_with(".json") {
            content.to_string()
        } else {
            format!("{}{content}", self.tag_line())
        };
        let path = self.path(name);
        fs::write(&path, &tagged).with_context(|| format!("writing {}", path.display()))?;
        self.register(name)
    }

    /// Records an artifact written by other means.
    pub fn register(&mut self, name: &str) -> Result<()> {
        let path = self.path(name);
        let bytes = fs::read(&path).with_context(|| format!("reading back {}", path.display()))?;
        self.manifest.artifacts.retain(|a| a.path != name);
        self.manifest.artifacts.push(Artifact { path: name.to_string(), sha256: content_hash(&bytes) });
        Ok(())
    }

    pub fn finish(self) -> Result<()> {
        let path = self.path("manifest.json");
        let json = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(&path, json + "\n").with_context(|| format!("writing {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_matches_git_sha256_objects() {
        // `printf '' | git hash-object --object-format=sha256 --stdin`
        assert_eq!(content_hash(b""), "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813");
        assert_ne!(content_hash(b"a"), content_hash(b"b"));
    }

    #[test]
    fn artifacts_carry_the_hash() {
        let dir = tempfile::tempdir().unwrap();
        let mut run = Run::start("test", dir.path(), None, b"{}", Some(3)).unwrap();
        run.write("a.csv", "x\n1\n").unwrap();
        run.write("b.svg", "<svg>\n</svg>\n").unwrap();
        let hash = run.hash().to_string();
        run.finish().unwrap();
        assert!(fs::read_to_string(dir.path().join("a.csv")).unwrap().starts_with(&format!("# config-hash: {hash}\nx")));
        assert!(fs::read_to_string(dir.path().join("b.svg")).unwrap().contains(&hash));
        let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
        assert_eq!(m["config_hash"], hash.as_str());
        assert_eq!(m["artifacts"].as_array().unwrap().len(), 2);
    }
}
