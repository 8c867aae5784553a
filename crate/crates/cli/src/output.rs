//! Atomic result files and run manifests.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

/// Writes `bytes` to `dir/name` through a temporary file in the same directory.
pub fn write_atomic(dir: &Path, name: &str, bytes: &[u8]) -> std::io::Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let target = dir.join(name);
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(&target).map_err(|e| e.error)?;
    Ok(target)
}

pub fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("results serialize");
    out.push(b'\n');
    out
}

#[derive(Debug, Serialize)]
pub struct Manifest<'a, C: Serialize> {
    pub tool: &'static str,
    pub cli_version: &'static str,
    pub core_version: &'static str,
    pub subcommand: &'a str,
    pub seed: Option<u64>,
    pub workers: usize,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub config: &'a C,
    pub created_unix_seconds: u64,
}

impl<'a, C: Serialize> Manifest<'a, C> {
    pub fn new(subcommand: &'a str, config: &'a C, seed: Option<u64>, workers: usize) -> Self {
        Self {
            tool: "spanel",
            cli_version: env!("CARGO_PKG_VERSION"),
            core_version: spanel::VERSION,
            subcommand,
            seed,
            workers,
            inputs: Vec::new(),
            outputs: Vec::new(),
            config,
            created_unix_seconds: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        }
    }

    /// Writes the manifest as `<subcommand>.manifest.json` next to the results.
    pub fn write(&self, dir: &Path) -> std::io::Result<PathBuf> {
        write_atomic(dir, &format!("{}.manifest.json", self.subcommand), &to_json(self))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_and_leaves_no_temporaries() {
        let dir = tempfile::tempdir().unwrap();
        write_atomic(dir.path(), "a.txt", b"one").unwrap();
        write_atomic(dir.path(), "a.txt", b"two").unwrap();
        assert_eq!(std::fs::read(dir.path().join("a.txt")).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
