//! Run manifests: a flat-text record of what a command ran with and what it
//! produced, with SHA-256 digests so a rerun (or a reviewer) can check that
//! inputs and artifacts are byte-identical.

use std::fmt::Write as _;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use customttt::{Error, Result};
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        let _ = write!(out, "{b:02x}");
    }
    out
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = fs::File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        let _ = write!(out, "{b:02x}");
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub build: String,
    pub config_sha256: String,
    pub wall_clock_secs: f64,
    /// (label, path, sha256) for every input file the command read.
    pub inputs: Vec<(String, String, String)>,
    /// (out-dir-relative path, sha256) for every artifact the command wrote.
    pub artifacts: Vec<(String, String)>,
}

fn build_id() -> String {
    let profile = if cfg!(debug_assertions) {
        "debug"
    } else {
        "release"
    };
    format!(
        "{} {} ({profile})",
        env!("CARGO_PKG_NAME"),
        env!("CARGO_PKG_VERSION")
    )
}

impl RunManifest {
    pub fn new(command: &str, config_sha256: String) -> Self {
        Self {
            command: command.to_string(),
            build: build_id(),
            config_sha256,
            wall_clock_secs: 0.0,
            inputs: Vec::new(),
            artifacts: Vec::new(),
        }
    }

    pub fn add_input(&mut self, label: &str, path: &Path) -> Result<()> {
        self.inputs.push((
            label.to_string(),
            path.display().to_string(),
            sha256_file(path)?,
        ));
        Ok(())
    }

    pub fn add_artifact(&mut self, out_dir: &Path, rel: &str) -> Result<()> {
        self.artifacts
            .push((rel.to_string(), sha256_file(&out_dir.join(rel))?));
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "command = {}", self.command);
        let _ = writeln!(s, "build = {}", self.build);
        let _ = writeln!(s, "config_sha256 = {}", self.config_sha256);
        let _ = writeln!(s, "wall_clock_secs = {:.3}", self.wall_clock_secs);
        for (label, path, hash) in &self.inputs {
            let _ = writeln!(s, "input.{label} = {path} sha256={hash}");
        }
        for (rel, hash) in &self.artifacts {
            let _ = writeln!(s, "artifact.{rel} = sha256={hash}");
        }
        s
    }

    /// Write `manifest.txt` into the out directory via a temp file + rename,
    /// so a crash can never leave a half-written manifest behind.
    pub fn save(&self, out_dir: &Path) -> Result<()> {
        let tmp = out_dir.join("manifest.tmp");
        fs::write(&tmp, self.to_text())?;
        fs::rename(&tmp, out_dir.join("manifest.txt"))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut m = Self {
            command: String::new(),
            build: String::new(),
            config_sha256: String::new(),
            wall_clock_secs: 0.0,
            inputs: Vec::new(),
            artifacts: Vec::new(),
        };
        for raw in text.lines() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::data(format!("malformed manifest line {line:?}")))?;
            if let Some(label) = key.strip_prefix("input.") {
                let (path, hash) = value
                    .rsplit_once(" sha256=")
                    .ok_or_else(|| Error::data(format!("malformed input line {line:?}")))?;
                m.inputs
                    .push((label.to_string(), path.to_string(), hash.to_string()));
            } else if let Some(rel) = key.strip_prefix("artifact.") {
                let hash = value
                    .strip_prefix("sha256=")
                    .ok_or_else(|| Error::data(format!("malformed artifact line {line:?}")))?;
                m.artifacts.push((rel.to_string(), hash.to_string()));
            } else {
                match key {
                    "command" => m.command = value.to_string(),
                    "build" => m.build = value.to_string(),
                    "config_sha256" => m.config_sha256 = value.to_string(),
                    "wall_clock_secs" => {
                        m.wall_clock_secs = value.parse().map_err(|_| {
                            Error::data(format!("malformed wall_clock_secs {value:?}"))
                        })?
                    }
                    _ => return Err(Error::data(format!("unknown manifest key {key:?}"))),
                }
            }
        }
        Ok(m)
    }

    /// Recompute every artifact digest against the files on disk and return
    /// the relative paths that are missing or changed.
    pub fn verify(&self, out_dir: &Path) -> Result<Vec<String>> {
        let mut bad = Vec::new();
        for (rel, hash) in &self.artifacts {
            let path: PathBuf = out_dir.join(rel);
            if !path.is_file() || &sha256_file(&path)? != hash {
                bad.push(rel.clone());
            }
        }
        Ok(bad)
    }
}
