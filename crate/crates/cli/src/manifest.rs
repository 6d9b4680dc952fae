//! Run directories and their manifests.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use ranger_core::checkpoint::sha256_hex;
use ranger_core::RunConfig;

pub const MANIFEST: &str = "run_manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Display name of an ablation child run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub config_path: Option<PathBuf>,
    /// Resolved configuration in canonical TOML form.
    pub config: Option<String>,
    pub config_hash: Option<String>,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    /// SHA-256 over the relative path and bytes of every input file.
    pub input_hash: String,
    /// Files written by the run, relative to the run directory.
    pub outputs: Vec<String>,
    pub wall_clock_s: f64,
    pub finished_unix_s: u64,
}

impl RunManifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn resolved_config(&self) -> Result<Option<RunConfig>> {
        self.config
            .as_deref()
            .map(|t| RunConfig::from_resolved(t).context("manifest configuration"))
            .transpose()
    }
}

/// Creates `dir`, refusing to reuse a non-empty directory unless `force`.
pub fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        if !dir.is_dir() {
            bail!("{} exists and is not a directory", dir.display());
        }
        let occupied = fs::read_dir(dir)?.next().is_some();
        if occupied && !force {
            bail!("{} already exists and is not empty; pass --force to overwrite", dir.display());
        }
        if occupied {
            fs::remove_dir_all(dir).with_context(|| format!("clearing {}", dir.display()))?;
        }
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<(String, PathBuf)>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else {
            let rel = p.strip_prefix(root).unwrap_or(&p).to_string_lossy().replace('\\', "/");
            out.push((rel, p));
        }
    }
    Ok(())
}

/// Content hash of files and directory trees, independent of their location.
pub fn hash_inputs(inputs: &[&Path]) -> Result<String> {
    let mut buf = Vec::new();
    for input in inputs {
        let mut files = Vec::new();
        if input.is_dir() {
            collect_files(input, input, &mut files)?;
        } else {
            let name = input.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            files.push((name, input.to_path_buf()));
        }
        for (rel, path) in files {
            let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
            buf.extend_from_slice(rel.as_bytes());
            buf.push(0);
            buf.extend_from_slice(sha256_hex(&bytes).as_bytes());
            buf.push(b'\n');
        }
    }
    Ok(sha256_hex(&buf))
}

/// Collects what a command did and writes the manifest last.
pub struct Recorder {
    command: String,
    label: Option<String>,
    config_path: Option<PathBuf>,
    config: Option<RunConfig>,
    inputs: Vec<PathBuf>,
    outputs: Vec<String>,
    started: Instant,
}

impl Recorder {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            label: None,
            config_path: None,
            config: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started: Instant::now(),
        }
    }

    pub fn label(mut self, label: &str) -> Self {
        self.label = Some(label.to_string());
        self
    }

    pub fn config(mut self, path: Option<&Path>, config: &RunConfig) -> Self {
        self.config_path = path.map(Path::to_path_buf);
        self.config = Some(config.clone());
        self
    }

    pub fn input(mut self, path: &Path) -> Self {
        self.inputs.push(path.to_path_buf());
        self
    }

    pub fn output(&mut self, name: &str) {
        self.outputs.push(name.to_string());
    }

    pub fn finish(self, dir: &Path) -> Result<RunManifest> {
        let inputs: Vec<&Path> = self.inputs.iter().map(PathBuf::as_path).collect();
        let manifest = RunManifest {
            command: self.command,
            label: self.label,
            config_path: self.config_path,
            config: self.config.as_ref().map(RunConfig::to_toml),
            config_hash: self.config.as_ref().map(RunConfig::hash),
            seed: self.config.as_ref().map(|c| c.seed),
            input_hash: hash_inputs(&inputs)?,
            inputs: self.inputs,
            outputs: self.outputs,
            wall_clock_s: self.started.elapsed().as_secs_f64(),
            finished_unix_s: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(dir.join(MANIFEST), text)?;
        Ok(manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn guard_refuses_non_empty_directories() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("run");
        prepare_out_dir(&dir, false).unwrap();
        prepare_out_dir(&dir, false).unwrap();
        fs::write(dir.join("x"), "1").unwrap();
        let err = prepare_out_dir(&dir, false).unwrap_err();
        assert!(err.to_string().contains("--force"));
        prepare_out_dir(&dir, true).unwrap();
        assert!(!dir.join("x").exists());
    }

    #[test]
    fn input_hash_ignores_location_but_not_content() {
        let tmp = tempfile::tempdir().unwrap();
        let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
        for d in [&a, &b] {
            fs::create_dir_all(d.join("sub")).unwrap();
            fs::write(d.join("sub/f.bin"), [1u8, 2, 3]).unwrap();
            fs::write(d.join("g.txt"), "g").unwrap();
        }
        assert_eq!(hash_inputs(&[&a]).unwrap(), hash_inputs(&[&b]).unwrap());
        fs::write(b.join("g.txt"), "h").unwrap();
        assert_ne!(hash_inputs(&[&a]).unwrap(), hash_inputs(&[&b]).unwrap());
    }

    #[test]
    fn manifest_round_trips() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = RunConfig::parse("seed = 3").unwrap();
        let mut rec = Recorder::new("train").config(None, &cfg).label("x");
        rec.output("a.bin");
        let written = rec.finish(tmp.path()).unwrap();
        let read = RunManifest::read(tmp.path()).unwrap();
        assert_eq!(read, written);
        assert_eq!(read.seed, Some(3));
        assert_eq!(read.resolved_config().unwrap().unwrap(), cfg);
    }
}
