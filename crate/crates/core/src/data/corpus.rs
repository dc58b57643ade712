//! Turning manifest rows into labelled power spectrograms.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::manifest::{Manifest, ManifestEntry, NoiseBank, Split};
use super::mix::{mix_at_snr, Snr};
use super::wav::load_wav;
use crate::dsp::{AudioClip, PowerSpectrogram, Stft};
use crate::error::{Error, Result};
use crate::NUM_CLASSES;

/// Label of the non-keyword class.
pub const FILLER_LABEL: &str = "filler";

/// Keyword names map to ids `0..n`; every other label maps to the filler id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassMap {
    keywords: Vec<String>,
}

impl ClassMap {
    pub const FILLER: usize = NUM_CLASSES - 1;

    pub fn new(keywords: Vec<String>) -> Result<Self> {
        if keywords.len() > Self::FILLER {
            return Err(Error::Spec(format!(
                "{} keywords, at most {} supported",
                keywords.len(),
                Self::FILLER
            )));
        }
        for (i, k) in keywords.iter().enumerate() {
            if k == FILLER_LABEL || keywords[..i].contains(k) {
                return Err(Error::Spec(format!("keyword `{k}` is reserved or repeated")));
            }
        }
        Ok(ClassMap { keywords })
    }

    pub fn keywords(&self) -> &[String] {
        &self.keywords
    }

    pub fn id(&self, label: &str) -> usize {
        self.keywords
            .iter()
            .position(|k| k == label)
            .unwrap_or(Self::FILLER)
    }

    pub fn name(&self, id: usize) -> &str {
        self.keywords.get(id).map_or(FILLER_LABEL, String::as_str)
    }
}

/// Where speech clips come from.
pub trait ClipSource {
    fn clip(&self, path: &str) -> Result<AudioClip>;
}

impl ClipSource for BTreeMap<String, AudioClip> {
    fn clip(&self, path: &str) -> Result<AudioClip> {
        self.get(path)
            .cloned()
            .ok_or_else(|| Error::Manifest(format!("clip `{path}` not in the dataset")))
    }
}

/// Clips stored under a dataset root.
#[derive(Debug, Clone)]
pub struct DiskSource {
    pub root: PathBuf,
}

impl DiskSource {
    pub fn new(root: &Path) -> Self {
        DiskSource {
            root: root.to_path_buf(),
        }
    }
}

impl ClipSource for DiskSource {
    fn clip(&self, path: &str) -> Result<AudioClip> {
        load_wav(&self.root.join(path))
    }
}

/// The noisy clip described by one manifest row.
pub fn render(entry: &ManifestEntry, source: &dyn ClipSource, bank: &NoiseBank) -> Result<AudioClip> {
    let speech = source.clip(&entry.path)?;
    match entry.snr_db {
        Snr::Clean => Ok(speech),
        snr => mix_at_snr(&speech, bank.segment(&entry.noise, entry.seed)?, snr),
    }
}

/// Spectrograms and class ids of one split, in manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub specs: Vec<PowerSpectrogram>,
    pub labels: Vec<usize>,
    pub entries: Vec<ManifestEntry>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn build(
        manifest: &Manifest,
        split: Split,
        source: &dyn ClipSource,
        bank: &NoiseBank,
        classes: &ClassMap,
    ) -> Result<Self> {
        let stft = Stft::new();
        let mut set = LabeledSet {
            specs: Vec::new(),
            labels: Vec::new(),
            entries: Vec::new(),
        };
        for e in manifest.split(split) {
            let clip = render(e, source, bank)?;
            set.specs.push(stft.clip_power(&clip)?);
            set.labels.push(classes.id(&e.label));
            set.entries.push(e.clone());
        }
        Ok(set)
    }
}
