pub mod count;
pub mod eval;
pub mod export;
pub mod synth;
pub mod train;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use fbkws_core::data::manifest::NO_NOISE;
use fbkws_core::data::{ClassMap, Condition, DiskSource, LabeledSet, Manifest, NoiseBank, Split};

use crate::config::DataConfig;
use crate::error::{CliError, Result};

pub const RECORD_FILE: &str = "record.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.fbkws";
pub const CONFIG_FILE: &str = "config.toml";

pub fn seed_dir(run_dir: &Path, seed: u64) -> PathBuf {
    run_dir.join(format!("seed{seed}"))
}

/// Seed directories of a run holding a checkpoint, in increasing seed order.
pub fn completed_seeds(run_dir: &Path) -> Result<Vec<(u64, PathBuf)>> {
    let mut out = Vec::new();
    let entries = std::fs::read_dir(run_dir).map_err(CliError::io(run_dir))?;
    for e in entries {
        let p = e.map_err(CliError::io(run_dir))?.path();
        let Some(seed) = p
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("seed"))
            .and_then(|s| s.parse::<u64>().ok())
        else {
            continue;
        };
        if p.join(CHECKPOINT_FILE).is_file() && p.join(RECORD_FILE).is_file() {
            out.push((seed, p));
        }
    }
    out.sort();
    Ok(out)
}

/// A manifest with the audio and noise it refers to.
pub struct Corpus {
    pub manifest: Manifest,
    pub source: DiskSource,
    pub bank: NoiseBank,
    pub classes: ClassMap,
}

impl Corpus {
    /// Checks that every file the manifest needs is present; nothing is decoded
    /// except the noise recordings.
    pub fn open(data: &DataConfig, manifest_path: Option<&Path>) -> Result<Self> {
        let path = manifest_path.map(Path::to_path_buf).unwrap_or_else(|| data.manifest_path());
        if !data.root.is_dir() {
            return Err(CliError::Invalid(format!(
                "dataset root `{}` not found (run `fbkws synth` first)",
                data.root.display()
            )));
        }
        if !path.is_file() {
            return Err(CliError::Invalid(format!(
                "manifest `{}` not found (run `fbkws synth` first)",
                path.display()
            )));
        }
        let manifest = Manifest::read(&path)?;
        if let Some(e) = manifest.entries.iter().find(|e| !data.root.join(&e.path).is_file()) {
            return Err(CliError::Invalid(format!(
                "clip `{}` listed in `{}` is missing under `{}`",
                e.path,
                path.display(),
                data.root.display()
            )));
        }
        let needed: BTreeSet<&str> = manifest
            .entries
            .iter()
            .map(|e| e.noise.as_str())
            .filter(|n| *n != NO_NOISE)
            .collect();
        let bank = if needed.is_empty() {
            NoiseBank::new()
        } else {
            let dir = data.noise_path();
            if !dir.is_dir() {
                return Err(CliError::Invalid(format!("noise directory `{}` not found", dir.display())));
            }
            let unseen: BTreeSet<String> = manifest
                .entries
                .iter()
                .filter(|e| e.seen == Condition::Unseen)
                .map(|e| e.noise.clone())
                .collect();
            let bank = NoiseBank::load_dir(&dir, &unseen)?;
            if let Some(n) = needed.iter().find(|n| bank.get(n).is_none()) {
                return Err(CliError::Invalid(format!("noise `{n}` has no recording in `{}`", dir.display())));
            }
            bank
        };
        let classes = data.class_map(manifest.entries.iter().map(|e| e.label.as_str()))?;
        Ok(Corpus {
            manifest,
            source: DiskSource::new(&data.root),
            bank,
            classes,
        })
    }

    pub fn split(&self, split: Split) -> Result<LabeledSet> {
        let set = LabeledSet::build(&self.manifest, split, &self.source, &self.bank, &self.classes)?;
        if set.is_empty() {
            return Err(CliError::Invalid(format!("manifest has no {} entries", split.name())));
        }
        Ok(set)
    }
}

pub fn write_file(path: &Path, text: &str) -> Result<()> {
    Ok(fbkws_core::atomic::write_atomic(path, text.as_bytes())?)
}
