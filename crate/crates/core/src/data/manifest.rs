//! Noisy-corpus manifests: which utterance is mixed with which noise, at
//! which SNR, with which seed.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mix::Snr;
use super::wav::read_wav_samples;
use crate::error::{Error, Result};
use crate::CLIP_LEN;

/// SNRs allowed in the training and validation splits.
pub const TRAIN_SNRS: [i32; 5] = [0, 5, 10, 15, 20];
/// SNRs allowed in the test split.
pub const TEST_SNRS: [i32; 7] = [-10, -5, 0, 5, 10, 15, 20];
/// Placeholder noise name of clean entries.
pub const NO_NOISE: &str = "none";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn allows(self, snr: Snr) -> bool {
        match snr {
            Snr::Clean => true,
            Snr::Db(v) => match self {
                Split::Train | Split::Val => TRAIN_SNRS.contains(&v),
                Split::Test => TEST_SNRS.contains(&v),
            },
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Whether an entry's noise was available during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Seen,
    Unseen,
    Clean,
}

impl Condition {
    pub fn name(self) -> &'static str {
        match self {
            Condition::Seen => "seen",
            Condition::Unseen => "unseen",
            Condition::Clean => "clean",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Speech clip, relative to the dataset root.
    pub path: String,
    pub label: String,
    pub split: Split,
    pub noise: String,
    pub seen: Condition,
    pub snr_db: Snr,
    pub seed: u64,
}

impl ManifestEntry {
    pub fn validate(&self) -> Result<()> {
        if !self.split.allows(self.snr_db) {
            return Err(Error::Manifest(format!(
                "SNR {} dB is not part of the {} protocol ({})",
                self.snr_db, self.split, self.path
            )));
        }
        if self.seen == Condition::Unseen && self.split != Split::Test {
            return Err(Error::Manifest(format!(
                "unseen noise `{}` in the {} split",
                self.noise, self.split
            )));
        }
        if (self.seen == Condition::Clean) != (self.snr_db == Snr::Clean) {
            return Err(Error::Manifest(format!(
                "entry {} mixes condition `{}` with SNR `{}`",
                self.path, self.seen, self.snr_db
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        for e in &entries {
            e.validate()?;
        }
        Ok(Manifest { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for e in &self.entries {
            w.serialize(e)?;
        }
        if self.entries.is_empty() {
            w.write_record(["path", "label", "split", "noise", "seen", "snr_db", "seed"])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let headers = r.headers()?.clone();
        if headers != vec!["path", "label", "split", "noise", "seen", "snr_db", "seed"] {
            return Err(Error::Parse(format!("unexpected manifest header {headers:?}")));
        }
        let entries = r.deserialize().collect::<std::result::Result<Vec<_>, _>>()?;
        Self::new(entries)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}

/// One speech file of the corpus and the split it belongs to.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Utterance {
    pub path: String,
    pub label: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseRecording {
    pub name: String,
    pub samples: Vec<f32>,
    /// Present in the training and validation splits.
    pub seen: bool,
}

/// Named long noise recordings.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NoiseBank {
    noises: BTreeMap<String, NoiseRecording>,
}

impl NoiseBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, samples: Vec<f32>, seen: bool) -> Result<()> {
        if samples.len() < CLIP_LEN {
            return Err(Error::Degenerate(format!(
                "noise `{name}` has {} samples, needs at least {CLIP_LEN}",
                samples.len()
            )));
        }
        self.noises.insert(
            name.to_string(),
            NoiseRecording {
                name: name.to_string(),
                samples,
                seen,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&NoiseRecording> {
        self.noises.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.noises.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = &NoiseRecording> {
        self.noises.values()
    }

    /// One second of `name` starting at an offset drawn from `seed`.
    pub fn segment(&self, name: &str, seed: u64) -> Result<&[f32]> {
        let rec = self
            .get(name)
            .ok_or_else(|| Error::Manifest(format!("noise `{name}` not in the noise bank")))?;
        let max_offset = rec.samples.len() - CLIP_LEN;
        let offset = ChaCha8Rng::seed_from_u64(seed).random_range(0..=max_offset);
        Ok(&rec.samples[offset..offset + CLIP_LEN])
    }

    /// Loads `<dir>/<name>.wav` files; names in `unseen` are marked unseen.
    pub fn load_dir(dir: &Path, unseen: &BTreeSet<String>) -> Result<Self> {
        let mut bank = NoiseBank::new();
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "wav"))
            .collect();
        files.sort();
        for f in files {
            let name = f.file_stem().unwrap_or_default().to_string_lossy().to_string();
            let seen = !unseen.contains(&name);
            bank.insert(&name, read_wav_samples(&f)?, seen)?;
        }
        Ok(bank)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitProtocol {
    pub utts_per_cell: usize,
    pub snrs: Vec<i32>,
    pub noises: Vec<String>,
    #[serde(default = "yes")]
    pub include_clean: bool,
}

fn yes() -> bool {
    true
}

/// How utterances are spread over the `(noise, SNR)` cells of a split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Assignment {
    /// The same utterances appear in every cell.
    #[default]
    Cross,
    /// Every cell receives its own disjoint utterances.
    Partition,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    pub train: SplitProtocol,
    pub val: SplitProtocol,
    pub test: SplitProtocol,
    #[serde(default)]
    pub assignment: Assignment,
    #[serde(default)]
    pub seed: u64,
    /// Labels that must have at least one utterance in every split.
    #[serde(default)]
    pub required_labels: Vec<String>,
}

fn names(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

pub const SEEN_NOISES: [&str; 4] = ["vehicle_interior", "factory1", "bus", "pedestrian_street"];
pub const TRAIN_ONLY_NOISES: [&str; 4] = ["white", "babble", "machine_gun", "f16_cockpit"];
pub const UNSEEN_NOISES: [&str; 4] = ["factory2", "buccaneer_cockpit", "cafe", "street_junction"];

impl ProtocolConfig {
    /// Full noisy-corpus protocol: 3,699 / 427 / 497 utterances per cell.
    pub fn paper() -> Self {
        let train_noises: Vec<String> = SEEN_NOISES.iter().chain(&TRAIN_ONLY_NOISES).map(|s| s.to_string()).collect();
        let test_noises: Vec<String> = SEEN_NOISES.iter().chain(&UNSEEN_NOISES).map(|s| s.to_string()).collect();
        ProtocolConfig {
            train: SplitProtocol {
                utts_per_cell: 3699,
                snrs: TRAIN_SNRS.to_vec(),
                noises: train_noises.clone(),
                include_clean: true,
            },
            val: SplitProtocol {
                utts_per_cell: 427,
                snrs: TRAIN_SNRS.to_vec(),
                noises: train_noises,
                include_clean: true,
            },
            test: SplitProtocol {
                utts_per_cell: 497,
                snrs: TEST_SNRS.to_vec(),
                noises: test_noises,
                include_clean: true,
            },
            assignment: Assignment::Cross,
            seed: 0,
            required_labels: names(&[]),
        }
    }

    pub fn split(&self, split: Split) -> &SplitProtocol {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Noise names that appear only in the test split.
    pub fn unseen_noises(&self) -> BTreeSet<String> {
        let seen: BTreeSet<&String> = self.train.noises.iter().chain(&self.val.noises).collect();
        self.test
            .noises
            .iter()
            .filter(|n| !seen.contains(n))
            .cloned()
            .collect()
    }
}

/// Deterministic 64-bit mixing of several integers.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}

/// Expands the protocol over the available utterances and noises.
/// The result depends only on the inputs and `protocol.seed`.
pub fn build_manifest(
    utterances: &[Utterance],
    bank: &NoiseBank,
    protocol: &ProtocolConfig,
) -> Result<Manifest> {
    let mut missing = Vec::new();
    for split in Split::ALL {
        for noise in &protocol.split(split).noises {
            if bank.get(noise).is_none() && !missing.contains(noise) {
                missing.push(noise.clone());
            }
        }
    }
    for label in &protocol.required_labels {
        for split in Split::ALL {
            if !utterances.iter().any(|u| &u.label == label && u.split == split) {
                missing.push(format!("{label} ({split})"));
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::Manifest(format!("missing: {}", missing.join(", "))));
    }

    let mut entries = Vec::new();
    for split in Split::ALL {
        let sp = protocol.split(split);
        for &snr in &sp.snrs {
            if !split.allows(Snr::Db(snr)) {
                return Err(Error::Manifest(format!("SNR {snr} dB not allowed in {split}")));
            }
        }
        let mut cells: Vec<(String, Condition, Snr)> = Vec::new();
        for noise in &sp.noises {
            let rec = bank.get(noise).expect("checked above");
            if !rec.seen && split != Split::Test {
                return Err(Error::Manifest(format!(
                    "unseen noise `{noise}` requested in the {split} split"
                )));
            }
            let cond = if rec.seen {
                Condition::Seen
            } else {
                Condition::Unseen
            };
            for &snr in &sp.snrs {
                cells.push((noise.clone(), cond, Snr::Db(snr)));
            }
        }
        if sp.include_clean {
            cells.push((NO_NOISE.to_string(), Condition::Clean, Snr::Clean));
        }

        let mut pool: Vec<&Utterance> = utterances.iter().filter(|u| u.split == split).collect();
        pool.sort();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[protocol.seed, split as u64]));
        pool.shuffle(&mut rng);
        let n = sp.utts_per_cell;
        let needed = match protocol.assignment {
            Assignment::Cross => n,
            Assignment::Partition => n * cells.len(),
        };
        if pool.len() < needed {
            return Err(Error::Manifest(format!(
                "{split} split needs {needed} utterances, found {}",
                pool.len()
            )));
        }
        for (c, (noise, cond, snr)) in cells.iter().enumerate() {
            let chosen = match protocol.assignment {
                Assignment::Cross => &pool[..n],
                Assignment::Partition => &pool[c * n..(c + 1) * n],
            };
            for (i, u) in chosen.iter().enumerate() {
                let entry = ManifestEntry {
                    path: u.path.clone(),
                    label: u.label.clone(),
                    split,
                    noise: noise.clone(),
                    seen: *cond,
                    snr_db: *snr,
                    seed: mix_seed(&[protocol.seed, split as u64, c as u64, i as u64]),
                };
                entry.validate()?;
                entries.push(entry);
            }
        }
    }
    Ok(Manifest { entries })
}

/// Lists `<root>/<label>/<file>.wav`. Directories starting with `_` or `.`
/// are skipped. Splits come from `validation_list.txt` / `testing_list.txt`
/// when present; otherwise a stable hash of the path sends about 10% of the
/// files to validation and 10% to test.
pub fn scan_root(root: &Path) -> Result<Vec<Utterance>> {
    let read_list = |name: &str| -> Result<BTreeSet<String>> {
        let p = root.join(name);
        if !p.exists() {
            return Ok(BTreeSet::new());
        }
        Ok(std::fs::read_to_string(p)?
            .lines()
            .map(|l| l.trim().to_string())
            .filter(|l| !l.is_empty())
            .collect())
    };
    let val = read_list("validation_list.txt")?;
    let test = read_list("testing_list.txt")?;
    let have_lists = !val.is_empty() || !test.is_empty();

    let mut labels: Vec<PathBuf> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .filter(|p| {
            let n = p.file_name().unwrap_or_default().to_string_lossy();
            !n.starts_with('_') && !n.starts_with('.')
        })
        .collect();
    labels.sort();
    let mut out = Vec::new();
    for dir in labels {
        let label = dir.file_name().unwrap_or_default().to_string_lossy().to_string();
        let mut files: Vec<String> = std::fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "wav"))
            .map(|p| format!("{label}/{}", p.file_name().unwrap_or_default().to_string_lossy()))
            .collect();
        files.sort();
        for path in files {
            let split = if have_lists {
                if test.contains(&path) {
                    Split::Test
                } else if val.contains(&path) {
                    Split::Val
                } else {
                    Split::Train
                }
            } else {
                let h = mix_seed(&path.bytes().map(u64::from).collect::<Vec<_>>());
                match h % 10 {
                    0 => Split::Test,
                    1 => Split::Val,
                    _ => Split::Train,
                }
            };
            out.push(Utterance {
                path,
                label: label.clone(),
                split,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bank(names: &[(&str, bool)]) -> NoiseBank {
        let mut b = NoiseBank::new();
        for (i, (n, seen)) in names.iter().enumerate() {
            let samples = (0..2 * CLIP_LEN).map(|k| ((k + i) as f32 * 0.1).sin()).collect();
            b.insert(n, samples, *seen).unwrap();
        }
        b
    }

    fn utts(split: Split, n: usize) -> Vec<Utterance> {
        (0..n)
            .map(|i| Utterance {
                path: format!("{}/{i}.wav", ["yes", "no"][i % 2]),
                label: ["yes", "no"][i % 2].to_string(),
                split,
            })
            .collect()
    }

    fn desk_split(noises: &[&str], snrs: &[i32]) -> SplitProtocol {
        SplitProtocol {
            utts_per_cell: 10,
            snrs: snrs.to_vec(),
            noises: names(noises),
            include_clean: false,
        }
    }

    fn desk_protocol() -> ProtocolConfig {
        ProtocolConfig {
            train: desk_split(&["a", "b"], &[0, 10]),
            val: desk_split(&["a", "b"], &[0, 10]),
            test: desk_split(&["a", "c"], &[-5, 10]),
            assignment: Assignment::Cross,
            seed: 3,
            required_labels: vec![],
        }
    }

    fn desk_utts() -> Vec<Utterance> {
        let mut u = utts(Split::Train, 30);
        u.extend(utts(Split::Val, 12));
        u.extend(utts(Split::Test, 12));
        u.iter_mut()
            .enumerate()
            .for_each(|(i, x)| x.path = format!("{}/{}_{i}.wav", x.label, x.split));
        u
    }

    #[test]
    fn desk_protocol_counts() {
        let b = bank(&[("a", true), ("b", true), ("c", false)]);
        let m = build_manifest(&desk_utts(), &b, &desk_protocol()).unwrap();
        assert_eq!(m.split(Split::Train).count(), 40);
        assert_eq!(m.split(Split::Test).filter(|e| e.seen == Condition::Unseen).count(), 20);
        let mut p = desk_protocol();
        p.train.include_clean = true;
        let m = build_manifest(&desk_utts(), &b, &p).unwrap();
        assert_eq!(m.split(Split::Train).count(), 50);
        assert_eq!(m.split(Split::Train).filter(|e| e.snr_db == Snr::Clean).count(), 10);
    }

    #[test]
    fn paper_protocol_cell_counts() {
        let p = ProtocolConfig::paper();
        let all: Vec<(&str, bool)> = SEEN_NOISES
            .iter()
            .chain(&TRAIN_ONLY_NOISES)
            .map(|n| (*n, true))
            .chain(UNSEEN_NOISES.iter().map(|n| (*n, false)))
            .collect();
        let b = bank(&all);
        let mut u = utts(Split::Train, 3699);
        u.extend(utts(Split::Val, 427));
        u.extend(utts(Split::Test, 497));
        let m = build_manifest(&u, &b, &p).unwrap();
        let cell = |split: Split, noise: &str, snr: Snr| {
            m.split(split).filter(|e| e.noise == noise && e.snr_db == snr).count()
        };
        assert_eq!(cell(Split::Train, "f16_cockpit", Snr::Db(5)), 3699);
        assert_eq!(cell(Split::Val, "babble", Snr::Db(20)), 427);
        assert_eq!(cell(Split::Test, "cafe", Snr::Db(-10)), 497);
        assert_eq!(cell(Split::Test, NO_NOISE, Snr::Clean), 497);
        assert_eq!(m.split(Split::Train).count(), 3699 * (8 * 5 + 1));
        assert_eq!(m.split(Split::Test).count(), 497 * (8 * 7 + 1));
        assert_eq!(p.unseen_noises().len(), 4);
    }

    #[test]
    fn unseen_noise_in_training_is_rejected() {
        let b = bank(&[("a", true), ("b", true), ("c", false)]);
        let mut p = desk_protocol();
        p.train.noises.push("c".into());
        match build_manifest(&desk_utts(), &b, &p) {
            Err(Error::Manifest(msg)) => assert!(msg.contains("unseen")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_items_are_listed() {
        let b = bank(&[("a", true)]);
        let mut p = desk_protocol();
        p.required_labels = vec!["up".into()];
        match build_manifest(&desk_utts(), &b, &p) {
            Err(Error::Manifest(msg)) => {
                assert!(msg.contains('b') && msg.contains("c") && msg.contains("up"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn manifest_is_deterministic_and_round_trips() {
        let b = bank(&[("a", true), ("b", true), ("c", false)]);
        let m1 = build_manifest(&desk_utts(), &b, &desk_protocol()).unwrap();
        let m2 = build_manifest(&desk_utts(), &b, &desk_protocol()).unwrap();
        assert_eq!(m1, m2);
        let text = m1.to_csv().unwrap();
        assert!(text.starts_with("path,label,split,noise,seen,snr_db,seed\n"));
        assert_eq!(Manifest::from_csv(&text).unwrap(), m1);
    }

    #[test]
    fn partition_mode_uses_disjoint_utterances() {
        let b = bank(&[("a", true), ("b", true), ("c", false)]);
        let mut p = desk_protocol();
        p.assignment = Assignment::Partition;
        p.train.utts_per_cell = 7;
        p.val.utts_per_cell = 3;
        p.test.utts_per_cell = 3;
        let m = build_manifest(&desk_utts(), &b, &p).unwrap();
        let paths: BTreeSet<&str> = m.split(Split::Train).map(|e| e.path.as_str()).collect();
        assert_eq!(paths.len(), 28);
        p.train.utts_per_cell = 8;
        assert!(build_manifest(&desk_utts(), &b, &p).is_err());
    }

    #[test]
    fn entry_invariants() {
        let ok = ManifestEntry {
            path: "x.wav".into(),
            label: "yes".into(),
            split: Split::Train,
            noise: "a".into(),
            seen: Condition::Seen,
            snr_db: Snr::Db(5),
            seed: 0,
        };
        assert!(ok.validate().is_ok());
        assert!(ManifestEntry { snr_db: Snr::Db(-5), ..ok.clone() }.validate().is_err());
        assert!(ManifestEntry { split: Split::Test, snr_db: Snr::Db(-5), ..ok.clone() }.validate().is_ok());
        assert!(ManifestEntry { seen: Condition::Unseen, ..ok.clone() }.validate().is_err());
        assert!(ManifestEntry { seen: Condition::Clean, ..ok }.validate().is_err());
    }

    #[test]
    fn noise_segments_are_reproducible() {
        let b = bank(&[("a", true)]);
        assert_eq!(b.segment("a", 5).unwrap(), b.segment("a", 5).unwrap());
        assert_eq!(b.segment("a", 5).unwrap().len(), CLIP_LEN);
        assert!(b.segment("zzz", 5).is_err());
        let mut short = NoiseBank::new();
        assert!(short.insert("s", vec![0.0; 100], true).is_err());
    }
}
