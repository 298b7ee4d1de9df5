use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const RUN_ROOT_ENV: &str = "CONTRASTDEF_RUN_ROOT";
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Serialize)]
pub struct InputFile {
    pub path: String,
    pub sha256: String,
}

/// Written last into every run directory.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: &'static str,
    pub argv: Vec<String>,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<InputFile>,
    pub outputs: Vec<String>,
    pub started_at: String,
    pub finished_at: String,
}

impl InputFile {
    pub fn new(path: &Path, bytes: &[u8]) -> Self {
        Self { path: path.display().to_string(), sha256: sha256_hex(bytes) }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

static STARTED: std::sync::OnceLock<String> = std::sync::OnceLock::new();

/// Records the process start time used by every manifest.
pub fn mark_start() {
    STARTED.get_or_init(now);
}

pub fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// Keeps track of what a command read and wrote while it runs.
pub struct Run {
    pub dir: PathBuf,
    command: String,
    config: serde_json::Value,
    config_hash: String,
    seed: Option<u64>,
    inputs: Vec<InputFile>,
    outputs: Vec<String>,
    started_at: String,
}

impl Run {
    /// Uses `out` when given, otherwise `$CONTRASTDEF_RUN_ROOT/<command>-<hash>`
    /// (the root defaults to `runs`).
    pub fn create<C: Serialize>(
        command: &str,
        out: Option<&Path>,
        config: &C,
        seed: Option<u64>,
        inputs: Vec<InputFile>,
    ) -> Result<Self> {
        let config = serde_json::to_value(config)?;
        let config_hash = sha256_hex(serde_json::to_string(&config)?.as_bytes());
        let dir = match out {
            Some(p) => p.to_path_buf(),
            None => {
                let root = std::env::var_os(RUN_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
                root.join(format!("{command}-{}", &config_hash[..12]))
            }
        };
        std::fs::create_dir_all(&dir).with_context(|| format!("cannot create run directory {}", dir.display()))?;
        Ok(Self {
            dir,
            command: command.into(),
            config,
            config_hash,
            seed,
            inputs,
            outputs: Vec::new(),
            started_at: STARTED.get_or_init(now).clone(),
        })
    }

    pub fn path(&mut self, name: &str) -> PathBuf {
        if !self.outputs.iter().any(|o| o == name) {
            self.outputs.push(name.into());
        }
        self.dir.join(name)
    }

    pub fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = self.path(name);
        std::fs::write(&path, contents).with_context(|| format!("cannot write {}", path.display()))?;
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text)
    }

    pub fn finish(self) -> Result<PathBuf> {
        let manifest = RunManifest {
            command: self.command,
            version: env!("CARGO_PKG_VERSION"),
            argv: std::env::args().collect(),
            config_hash: self.config_hash,
            config: self.config,
            seed: self.seed,
            inputs: self.inputs,
            outputs: self.outputs,
            started_at: self.started_at,
            finished_at: now(),
        };
        let path = self.dir.join(MANIFEST);
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        std::fs::write(&path, text).with_context(|| format!("cannot write {}", path.display()))?;
        Ok(self.dir)
    }
}
