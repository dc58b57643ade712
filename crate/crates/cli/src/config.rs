//! Experiment and dataset files.
//!
//! Experiment files are TOML merged over a profile's defaults: tables merge
//! key by key, anything else in the file replaces the default. The merged tree
//! is then checked against the schema, so unknown keys are rejected wherever
//! they appear.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use fbkws_core::data::corpus::FILLER_LABEL;
use fbkws_core::data::synth::SplitCounts;
use fbkws_core::data::{ClassMap, ProtocolConfig, SynthSpec};
use fbkws_core::dsp::{HOP_LEN, WINDOW_LEN};
use fbkws_core::eval::Band;
use fbkws_core::frontend::FILTERBANK_DROPOUT;
use fbkws_core::model::Variant;
use fbkws_core::train::{Arm, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Environment variable holding the first training seed.
pub const SEED_ENV: &str = "FBKWS_SEED";

/// The ten command words of the speech-commands corpus.
pub const GSCD_KEYWORDS: [&str; 10] = ["yes", "no", "up", "down", "left", "right", "on", "off", "stop", "go"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum Profile {
    /// Synthetic corpus, res8-narrow-like, 30 epochs.
    Desk,
    /// Full noisy speech-commands protocol, res15-like, K = 40.
    #[default]
    Paper,
}

/// Framing and compression constants. They are fixed by the implementation
/// and listed so a config file states them explicitly; any other value is
/// rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalConfig {
    #[serde(default = "d_window")]
    pub window_len: usize,
    #[serde(default = "d_hop")]
    pub hop_len: usize,
    /// `ln` of the floor inside the log compression.
    #[serde(default = "d_log_floor")]
    pub log_floor_exponent: f64,
    /// Dropout on the filterbank output for arm `learned+dropout`.
    #[serde(default = "d_dropout")]
    pub dropout_rate: f64,
}

fn d_window() -> usize {
    WINDOW_LEN
}
fn d_hop() -> usize {
    HOP_LEN
}
fn d_log_floor() -> f64 {
    -50.0
}
fn d_dropout() -> f64 {
    FILTERBANK_DROPOUT as f64
}

impl Default for SignalConfig {
    fn default() -> Self {
        SignalConfig {
            window_len: d_window(),
            hop_len: d_hop(),
            log_floor_exponent: d_log_floor(),
            dropout_rate: d_dropout(),
        }
    }
}

impl SignalConfig {
    fn validate(&self) -> Result<()> {
        let d = SignalConfig::default();
        let fixed = [
            ("window_len", self.window_len as f64, d.window_len as f64),
            ("hop_len", self.hop_len as f64, d.hop_len as f64),
            ("log_floor_exponent", self.log_floor_exponent, d.log_floor_exponent),
            ("dropout_rate", self.dropout_rate, d.dropout_rate),
        ];
        for (name, got, want) in fixed {
            if got != want {
                return Err(CliError::Invalid(format!("signal.{name} is fixed at {want}, got {got}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Directory holding `<label>/<clip>.wav`.
    pub root: PathBuf,
    /// Defaults to `<root>/manifest.csv`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    /// Defaults to `<root>/_noise`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_dir: Option<PathBuf>,
    /// Keyword labels in class order; other labels are filler. Defaults to
    /// the sorted non-filler labels of the manifest.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keywords: Option<Vec<String>>,
}

impl DataConfig {
    pub fn manifest_path(&self) -> PathBuf {
        self.manifest.clone().unwrap_or_else(|| self.root.join("manifest.csv"))
    }

    pub fn noise_path(&self) -> PathBuf {
        self.noise_dir.clone().unwrap_or_else(|| self.root.join("_noise"))
    }

    /// Class map from the configured keywords, or from `labels` sorted.
    pub fn class_map<'a>(&self, labels: impl Iterator<Item = &'a str>) -> Result<ClassMap> {
        let keywords = match &self.keywords {
            Some(k) => k.clone(),
            None => labels
                .filter(|l| *l != FILLER_LABEL)
                .map(str::to_string)
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect(),
        };
        Ok(ClassMap::new(keywords)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "d_eval_batch")]
    pub batch_size: usize,
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    /// Further run names under `<out>/runs` evaluated with this one.
    #[serde(default)]
    pub compare: Vec<String>,
    /// Bands summarized in the filterbank reports.
    #[serde(default = "d_bands")]
    pub bands: Vec<Band>,
}

fn d_eval_batch() -> usize {
    64
}
fn d_alpha() -> f64 {
    0.05
}
fn d_bands() -> Vec<Band> {
    vec![Band::new("2.6-2.8kHz", 2600.0, 2800.0)]
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            batch_size: d_eval_batch(),
            alpha: d_alpha(),
            compare: Vec::new(),
            bands: d_bands(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Run directory under `<out>/runs`; defaults to `<arm>_K<filters>`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default = "d_out")]
    pub out: PathBuf,
    #[serde(default = "d_jobs")]
    pub jobs: usize,
    #[serde(default)]
    pub signal: SignalConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn d_out() -> PathBuf {
    PathBuf::from("work")
}
fn d_jobs() -> usize {
    1
}

impl ExperimentConfig {
    pub fn profile(profile: Profile) -> Self {
        match profile {
            Profile::Paper => ExperimentConfig {
                name: None,
                out: d_out(),
                jobs: d_jobs(),
                signal: SignalConfig::default(),
                data: DataConfig {
                    root: PathBuf::from("data/gscd"),
                    manifest: None,
                    noise_dir: None,
                    keywords: Some(GSCD_KEYWORDS.iter().map(|s| s.to_string()).collect()),
                },
                train: TrainConfig::new(Arm::Learned, 40, Variant::Res15Like),
                eval: EvalConfig::default(),
            },
            Profile::Desk => {
                let mut train = TrainConfig::new(Arm::LogMel, 8, Variant::Res8NarrowLike);
                train.batch_size = 16;
                train.max_epochs = 30;
                ExperimentConfig {
                    name: None,
                    out: d_out(),
                    jobs: d_jobs(),
                    signal: SignalConfig::default(),
                    data: DataConfig {
                        root: PathBuf::from("work/data/desk"),
                        manifest: None,
                        noise_dir: None,
                        keywords: None,
                    },
                    train,
                    eval: EvalConfig::default(),
                }
            }
        }
    }

    pub fn run_name(&self) -> String {
        self.name
            .clone()
            .unwrap_or_else(|| format!("{}_K{}", self.train.arm, self.train.filters))
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out.join("runs").join(self.run_name())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.signal.validate()?;
        let name = self.run_name();
        if name.is_empty() || name.contains(['/', '\\']) || name.starts_with('.') {
            return Err(CliError::Invalid(format!("run name `{name}` is not a plain directory name")));
        }
        if self.jobs < 1 {
            return Err(CliError::Invalid("jobs must be >= 1".into()));
        }
        if self.eval.batch_size < 1 {
            return Err(CliError::Invalid("eval.batch_size must be >= 1".into()));
        }
        if !(self.eval.alpha > 0.0 && self.eval.alpha < 1.0) {
            return Err(CliError::Invalid(format!("eval.alpha must lie in (0, 1), got {}", self.eval.alpha)));
        }
        for b in &self.eval.bands {
            if !(b.lo_hz <= b.hi_hz) {
                return Err(CliError::Invalid(format!("band `{}` has lo_hz > hi_hz", b.name)));
            }
        }
        if let Some(k) = &self.data.keywords {
            ClassMap::new(k.clone())?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CliError::Invalid(format!("cannot serialize config: {e}")))
    }

    pub fn from_toml(path: &Path, text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn read_table(path: &Path) -> Result<toml::Value> {
    let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
    let table: toml::Table = toml::from_str(&text).map_err(|e| CliError::Config {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    Ok(toml::Value::Table(table))
}

/// `base, base + 1, ...`, one per configured seed.
pub fn override_seeds(seeds: &mut Vec<u64>, base: &str) -> Result<()> {
    let s: u64 = base
        .trim()
        .parse()
        .map_err(|_| CliError::Invalid(format!("{SEED_ENV} must be an unsigned integer, got `{base}`")))?;
    let n = seeds.len() as u64;
    *seeds = (0..n)
        .map(|i| {
            s.checked_add(i)
                .ok_or_else(|| CliError::Invalid(format!("{SEED_ENV}={s} overflows with {n} seeds")))
        })
        .collect::<Result<_>>()?;
    Ok(())
}

/// Profile defaults, merged with `path` if given, with the seed override
/// from the environment applied and everything validated.
pub fn load_experiment(path: Option<&Path>, profile: Profile) -> Result<ExperimentConfig> {
    let defaults = ExperimentConfig::profile(profile);
    let mut tree = toml::Value::try_from(&defaults)
        .map_err(|e| CliError::Invalid(format!("cannot serialize profile defaults: {e}")))?;
    let origin = path.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("<profile>"));
    if let Some(p) = path {
        merge(&mut tree, read_table(p)?);
    }
    let mut cfg: ExperimentConfig = tree.try_into().map_err(|e: toml::de::Error| CliError::Config {
        path: origin,
        detail: e.to_string(),
    })?;
    if let Ok(base) = std::env::var(SEED_ENV) {
        override_seeds(&mut cfg.train.seeds, &base)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Ingestion of an on-disk corpus into a manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestConfig {
    pub speech_root: PathBuf,
    pub noise_dir: PathBuf,
    #[serde(default = "ProtocolConfig::paper")]
    pub protocol: ProtocolConfig,
}

/// A dataset file: either a synthetic corpus or an ingestion request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    #[serde(default = "d_synth_seed")]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ingest: Option<IngestConfig>,
}

fn d_synth_seed() -> u64 {
    1
}

impl DatasetConfig {
    pub fn profile(profile: Profile) -> Self {
        match profile {
            Profile::Desk => {
                let counts = SplitCounts {
                    train: 40,
                    val: 10,
                    test: 10,
                };
                DatasetConfig {
                    seed: d_synth_seed(),
                    synth: Some(SynthSpec::clean(&[300.0, 800.0, 1900.0], counts)),
                    ingest: None,
                }
            }
            Profile::Paper => DatasetConfig {
                seed: d_synth_seed(),
                synth: None,
                ingest: Some(IngestConfig {
                    speech_root: PathBuf::from("data/gscd"),
                    noise_dir: PathBuf::from("data/gscd/_noise"),
                    protocol: ProtocolConfig::paper(),
                }),
            },
        }
    }

    /// Where the dataset lands when `--out` is not given.
    pub fn default_out(&self, profile: Profile) -> PathBuf {
        match (&self.ingest, profile) {
            (Some(i), _) => i.speech_root.clone(),
            (None, Profile::Desk) => PathBuf::from("work/data/desk"),
            (None, Profile::Paper) => PathBuf::from("work/data/synth"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.synth, &self.ingest) {
            (Some(s), None) => Ok(s.validate()?),
            (None, Some(_)) => Ok(()),
            _ => Err(CliError::Invalid(
                "a dataset file needs exactly one of [synth] or [ingest]".into(),
            )),
        }
    }
}

/// The file as written, or the profile's dataset when there is none.
pub fn load_dataset(path: Option<&Path>, profile: Profile) -> Result<DatasetConfig> {
    let cfg = match path {
        Some(p) => read_table(p)?.try_into().map_err(|e: toml::de::Error| CliError::Config {
            path: p.to_path_buf(),
            detail: e.to_string(),
        })?,
        None => DatasetConfig::profile(profile),
    };
    cfg.validate()?;
    Ok(cfg)
}
