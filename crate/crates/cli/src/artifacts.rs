//! Output directories: files are written atomically, and a manifest of
//! SHA-256 hashes is written last.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use sha2::{Digest, Sha256};

use crate::error::CliResult;

pub const MANIFEST: &str = "manifest.sha256";

pub struct ArtifactDir {
    root: PathBuf,
    files: Vec<String>,
}

impl ArtifactDir {
    pub fn create(root: &Path) -> CliResult<Self> {
        fs::create_dir_all(root)?;
        Ok(ArtifactDir {
            root: root.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Writes `name` through a temporary file and a rename.
    pub fn write(&mut self, name: &str, bytes: &[u8]) -> CliResult<()> {
        write_atomic(&self.root.join(name), bytes)?;
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
        Ok(())
    }

    /// Records the resolved config, seeds and version, then the manifest of
    /// every file written so far plus the config.
    pub fn finish(mut self, resolved_config: &str, seeds: &[(&str, u64)]) -> CliResult<PathBuf> {
        self.write("config.toml", resolved_config.as_bytes())?;
        let seed_text: String = seeds.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        self.write("seeds.txt", seed_text.as_bytes())?;
        write_atomic(&self.root.join("version.txt"), format!("{}\n", version_string()).as_bytes())?;
        let mut names = self.files.clone();
        names.sort();
        let mut manifest = String::new();
        for name in names {
            let bytes = fs::read(self.root.join(&name))?;
            manifest.push_str(&format!("{}  {name}\n", hex(&Sha256::digest(&bytes))));
        }
        write_atomic(&self.root.join(MANIFEST), manifest.as_bytes())?;
        Ok(self.root)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Package version plus `git describe` of the working tree when available.
pub fn version_string() -> String {
    let git = Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".into());
    format!("ntc {} ({git})", env!("CARGO_PKG_VERSION"))
}
