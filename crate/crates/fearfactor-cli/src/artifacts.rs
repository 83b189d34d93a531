//! Artifact bookkeeping: atomic output staging and per-stage manifests.
//!
//! Data files never contain timestamps, so identical inputs reproduce them
//! byte for byte; the manifest is the one place that records when a stage
//! ran, along with hashes of what it read and wrote. Outputs are written to
//! temporary names and renamed into place only after the whole stage
//! succeeds, so a failing stage leaves no partial artifacts behind.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::errors::{runtime, CliError};

/// Hex SHA-256 of a file's contents.
pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let mut file = std::fs::File::open(path)
        .map_err(|e| runtime(format!("cannot open {}: {e}", path.display())))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = file
            .read(&mut buf)
            .map_err(|e| runtime(format!("cannot read {}: {e}", path.display())))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(format!("{:x}", hasher.finalize()))
}

/// Staged output files: writers target temporary paths, and `commit`
/// renames everything into place. If the stage fails before committing,
/// the drop handler removes the temporaries.
#[derive(Default)]
pub struct Staging {
    files: Vec<(PathBuf, PathBuf)>,
    committed: bool,
}

impl Staging {
    /// Register `final_path` as a stage output and return the temporary
    /// path to write it to.
    pub fn stage(&mut self, final_path: &Path) -> Result<PathBuf, CliError> {
        if let Some(parent) = final_path.parent() {
            std::fs::create_dir_all(parent)
                .map_err(|e| runtime(format!("cannot create {}: {e}", parent.display())))?;
        }
        let file_name = final_path
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| runtime(format!("bad output path {}", final_path.display())))?;
        let tmp = final_path.with_file_name(format!(".{file_name}.tmp"));
        self.files.push((tmp.clone(), final_path.to_path_buf()));
        Ok(tmp)
    }

    /// Rename every staged file into place.
    pub fn commit(mut self) -> Result<(), CliError> {
        for (tmp, final_path) in &self.files {
            std::fs::rename(tmp, final_path).map_err(|e| {
                runtime(format!(
                    "cannot move {} into place: {e}",
                    final_path.display()
                ))
            })?;
        }
        self.committed = true;
        Ok(())
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for (tmp, _) in &self.files {
            let _ = std::fs::remove_file(tmp);
        }
    }
}

/// A stage manifest: flat key=value lines, sorted by key. Records the
/// stage name, code version, wall-clock time, the full effective
/// configuration, and SHA-256 hashes of inputs and outputs.
pub struct Manifest {
    stage: String,
    entries: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(stage: &str, cfg: &RunConfig) -> Self {
        let mut entries = BTreeMap::new();
        entries.insert("stage".to_string(), stage.to_string());
        entries.insert(
            "version".to_string(),
            env!("CARGO_PKG_VERSION").to_string(),
        );
        entries.insert(
            "created_utc".to_string(),
            chrono::Utc::now().format("%Y-%m-%dT%H:%M:%SZ").to_string(),
        );
        for (key, value) in cfg.echo() {
            entries.insert(format!("config.{key}"), value);
        }
        Manifest {
            stage: stage.to_string(),
            entries,
        }
    }

    pub fn input(&mut self, name: &str, path: &Path) -> Result<(), CliError> {
        self.entries
            .insert(format!("input.{name}.path"), path.display().to_string());
        self.entries
            .insert(format!("input.{name}.sha256"), sha256_file(path)?);
        Ok(())
    }

    pub fn output(&mut self, name: &str, path: &Path) -> Result<(), CliError> {
        self.entries
            .insert(format!("output.{name}.path"), path.display().to_string());
        self.entries
            .insert(format!("output.{name}.sha256"), sha256_file(path)?);
        Ok(())
    }

    pub fn note(&mut self, key: &str, value: impl ToString) {
        self.entries
            .insert(format!("note.{key}"), value.to_string());
    }

    /// Write `<out>/<stage>.manifest` atomically.
    pub fn write(&self, out_dir: &Path) -> Result<(), CliError> {
        let path = out_dir.join(format!("{}.manifest", self.stage));
        let mut body = String::new();
        for (key, value) in &self.entries {
            body.push_str(key);
            body.push('=');
            body.push_str(value);
            body.push('\n');
        }
        let tmp = path.with_file_name(format!(".{}.manifest.tmp", self.stage));
        std::fs::write(&tmp, body)
            .map_err(|e| runtime(format!("cannot write {}: {e}", tmp.display())))?;
        std::fs::rename(&tmp, &path)
            .map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ConfigFlags;

    #[test]
    fn staging_cleans_up_on_drop_and_commits_on_success() {
        let dir = tempfile::tempdir().unwrap();
        let final_path = dir.path().join("data.csv");
        {
            let mut staging = Staging::default();
            let tmp = staging.stage(&final_path).unwrap();
            std::fs::write(&tmp, "abandoned").unwrap();
            assert!(tmp.exists());
        }
        assert!(!final_path.exists());
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);

        let mut staging = Staging::default();
        let tmp = staging.stage(&final_path).unwrap();
        std::fs::write(&tmp, "kept").unwrap();
        staging.commit().unwrap();
        assert_eq!(std::fs::read_to_string(&final_path).unwrap(), "kept");
    }

    #[test]
    fn manifest_hashes_and_sorted_keys() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("input.csv");
        std::fs::write(&input, "a,b\n1,2\n").unwrap();
        let cfg = RunConfig::resolve(&ConfigFlags {
            out: Some(dir.path().to_path_buf()),
            ..ConfigFlags::default()
        })
        .unwrap();
        let mut manifest = Manifest::new("demo", &cfg);
        manifest.input("raw", &input).unwrap();
        manifest.note("rows", 1);
        manifest.write(dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("demo.manifest")).unwrap();
        assert!(text.contains("stage=demo\n"));
        assert!(text.contains("note.rows=1\n"));
        assert!(text.contains(&format!("input.raw.sha256={}\n", sha256_file(&input).unwrap())));
        // Keys arrive sorted.
        let keys: Vec<&str> = text.lines().filter_map(|l| l.split('=').next()).collect();
        let mut sorted = keys.clone();
        sorted.sort_unstable();
        assert_eq!(keys, sorted);
    }
}
