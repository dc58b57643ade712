//! Hermetic stand-in corpus: keyword classes are harmonic stacks, the filler
//! class is broadband noise bursts, and the noise bank holds a narrowband and
//! a pink-like recording.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::corpus::{ClassMap, FILLER_LABEL};
use super::manifest::{
    build_manifest, mix_seed, Assignment, Manifest, NoiseBank, ProtocolConfig, Split,
    SplitProtocol, Utterance,
};
use super::wav::write_wav;
use crate::atomic::write_atomic;
use crate::dsp::{AudioClip, MAX_HZ};
use crate::error::{Error, Result};
use crate::{CLIP_LEN, SAMPLE_RATE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub name: String,
    pub base_hz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum NoiseKind {
    /// Band-limited noise around `center_hz` with a slow random envelope.
    Narrowband {
        center_hz: f64,
        #[serde(default = "default_bandwidth")]
        bandwidth_hz: f64,
        /// Depth of the log-amplitude modulation; 0 keeps the level steady.
        #[serde(default = "default_modulation")]
        modulation: f64,
    },
    /// Broadband noise with power falling as 1/f.
    PinkLike,
}

fn default_bandwidth() -> f64 {
    200.0
}

fn default_modulation() -> f64 {
    0.8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawNoiseSpec")]
pub struct NoiseSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: NoiseKind,
    pub seconds: f64,
}

fn default_noise_seconds() -> f64 {
    10.0
}

/// Flat form of [`NoiseSpec`]; serde cannot reject unknown keys next to a
/// flattened enum, so parsing goes through this.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNoiseSpec {
    name: String,
    kind: String,
    center_hz: Option<f64>,
    bandwidth_hz: Option<f64>,
    modulation: Option<f64>,
    #[serde(default = "default_noise_seconds")]
    seconds: f64,
}

impl TryFrom<RawNoiseSpec> for NoiseSpec {
    type Error = String;

    fn try_from(r: RawNoiseSpec) -> std::result::Result<Self, String> {
        let kind = match r.kind.as_str() {
            "narrowband" => NoiseKind::Narrowband {
                center_hz: r
                    .center_hz
                    .ok_or_else(|| format!("noise `{}`: narrowband needs center_hz", r.name))?,
                bandwidth_hz: r.bandwidth_hz.unwrap_or_else(default_bandwidth),
                modulation: r.modulation.unwrap_or_else(default_modulation),
            },
            "pink-like" => {
                if r.center_hz.is_some() || r.bandwidth_hz.is_some() || r.modulation.is_some() {
                    return Err(format!("noise `{}`: pink-like takes no band parameters", r.name));
                }
                NoiseKind::PinkLike
            }
            other => return Err(format!("noise `{}`: unknown kind `{other}`", r.name)),
        };
        Ok(NoiseSpec {
            name: r.name,
            kind,
            seconds: r.seconds,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

/// Noise conditions applied to one split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitMix {
    #[serde(default)]
    pub noises: Vec<String>,
    #[serde(default)]
    pub snrs: Vec<i32>,
    #[serde(default = "yes")]
    pub include_clean: bool,
}

fn yes() -> bool {
    true
}

impl Default for SplitMix {
    fn default() -> Self {
        SplitMix {
            noises: Vec::new(),
            snrs: Vec::new(),
            include_clean: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub classes: Vec<ClassSpec>,
    #[serde(default = "yes")]
    pub filler: bool,
    /// Utterances per class (filler included) in each split.
    pub per_class: SplitCounts,
    #[serde(default = "default_harmonics")]
    pub harmonics: usize,
    /// Relative sweep of the base frequency across an utterance.
    #[serde(default)]
    pub chirp: f64,
    /// Relative per-utterance jitter of the base frequency.
    #[serde(default = "default_jitter")]
    pub jitter: f64,
    #[serde(default = "default_separation")]
    pub min_separation_hz: f64,
    #[serde(default)]
    pub noises: Vec<NoiseSpec>,
    #[serde(default)]
    pub train: SplitMix,
    #[serde(default)]
    pub val: SplitMix,
    #[serde(default)]
    pub test: SplitMix,
    /// Noise names withheld from training.
    #[serde(default)]
    pub unseen: Vec<String>,
    #[serde(default = "default_assignment")]
    pub assignment: Assignment,
}

fn default_harmonics() -> usize {
    4
}

fn default_jitter() -> f64 {
    0.02
}

fn default_separation() -> f64 {
    50.0
}

fn default_assignment() -> Assignment {
    Assignment::Partition
}

impl SynthSpec {
    /// Clean-only spec with the given keyword base frequencies.
    pub fn clean(base_hz: &[f64], per_class: SplitCounts) -> Self {
        SynthSpec {
            classes: base_hz
                .iter()
                .enumerate()
                .map(|(i, &f)| ClassSpec {
                    name: format!("kw{i}"),
                    base_hz: f,
                })
                .collect(),
            filler: true,
            per_class,
            harmonics: default_harmonics(),
            chirp: 0.0,
            jitter: default_jitter(),
            min_separation_hz: default_separation(),
            noises: Vec::new(),
            train: SplitMix::default(),
            val: SplitMix::default(),
            test: SplitMix::default(),
            unseen: Vec::new(),
            assignment: Assignment::Partition,
        }
    }

    pub fn mix(&self, split: Split) -> &SplitMix {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn class_map(&self) -> Result<ClassMap> {
        ClassMap::new(self.classes.iter().map(|c| c.name.clone()).collect())
    }

    pub fn validate(&self) -> Result<()> {
        let total = self.classes.len() + usize::from(self.filler);
        if total < 2 {
            return Err(Error::Spec(format!("need at least 2 classes, got {total}")));
        }
        self.class_map()?;
        for c in &self.classes {
            if !(c.base_hz > 0.0 && c.base_hz < MAX_HZ) {
                return Err(Error::Spec(format!(
                    "class `{}` base frequency {} Hz outside (0, {MAX_HZ})",
                    c.name, c.base_hz
                )));
            }
        }
        for (i, a) in self.classes.iter().enumerate() {
            for b in &self.classes[i + 1..] {
                if (a.base_hz - b.base_hz).abs() < self.min_separation_hz {
                    return Err(Error::Spec(format!(
                        "classes `{}` ({} Hz) and `{}` ({} Hz) overlap",
                        a.name, a.base_hz, b.name, b.base_hz
                    )));
                }
            }
        }
        if self.harmonics == 0 {
            return Err(Error::Spec("harmonics must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.jitter) || !(-1.0..1.0).contains(&self.chirp) {
            return Err(Error::Spec("jitter must lie in [0, 1) and chirp in (-1, 1)".into()));
        }
        for n in &self.noises {
            if n.seconds * (SAMPLE_RATE as f64) < CLIP_LEN as f64 {
                return Err(Error::Spec(format!("noise `{}` shorter than one second", n.name)));
            }
            if let NoiseKind::Narrowband {
                center_hz,
                bandwidth_hz,
                ..
            } = n.kind
            {
                if !(center_hz > 0.0 && center_hz < MAX_HZ && bandwidth_hz > 0.0) {
                    return Err(Error::Spec(format!("noise `{}` has an invalid band", n.name)));
                }
            }
        }
        for split in Split::ALL {
            for name in &self.mix(split).noises {
                if !self.noises.iter().any(|n| &n.name == name) {
                    return Err(Error::Spec(format!("{split} uses undefined noise `{name}`")));
                }
            }
        }
        Ok(())
    }

    fn protocol(&self, seed: u64) -> ProtocolConfig {
        let split = |s: Split| {
            let mix = self.mix(s);
            let cells = mix.noises.len() * mix.snrs.len() + usize::from(mix.include_clean);
            let pool = self.per_class.get(s) * (self.classes.len() + usize::from(self.filler));
            let per_cell = match self.assignment {
                Assignment::Cross => pool,
                Assignment::Partition => pool / cells.max(1),
            };
            SplitProtocol {
                utts_per_cell: per_cell,
                snrs: mix.snrs.clone(),
                noises: mix.noises.clone(),
                include_clean: mix.include_clean,
            }
        };
        ProtocolConfig {
            train: split(Split::Train),
            val: split(Split::Val),
            test: split(Split::Test),
            assignment: self.assignment,
            seed,
            required_labels: Vec::new(),
        }
    }
}

/// Generated corpus held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub clips: BTreeMap<String, AudioClip>,
    pub utterances: Vec<Utterance>,
    pub noises: NoiseBank,
    pub manifest: Manifest,
    pub classes: ClassMap,
}

impl SynthDataset {
    /// Writes `<root>/<label>/<file>.wav`, `<root>/_noise/<name>.wav`, the
    /// split lists and `manifest.csv`.
    pub fn write(&self, root: &Path) -> Result<()> {
        for (path, clip) in &self.clips {
            write_wav(&root.join(path), clip.samples())?;
        }
        for rec in self.noises.iter() {
            write_wav(&root.join("_noise").join(format!("{}.wav", rec.name)), &rec.samples)?;
        }
        for (split, file) in [(Split::Val, "validation_list.txt"), (Split::Test, "testing_list.txt")] {
            let mut list = String::new();
            for u in self.utterances.iter().filter(|u| u.split == split) {
                list.push_str(&u.path);
                list.push('\n');
            }
            write_atomic(&root.join(file), list.as_bytes())?;
        }
        write_atomic(&root.join("manifest.csv"), self.manifest.to_csv()?.as_bytes())
    }
}

const MAX_TONE_HZ: f64 = 7600.0;

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Raised-cosine fade of `ramp` samples at both ends of `len`.
fn fade(i: usize, len: usize, ramp: usize) -> f64 {
    let ramp = ramp.min(len / 2).max(1);
    let edge = i.min(len - 1 - i);
    if edge >= ramp {
        1.0
    } else {
        0.5 - 0.5 * (PI * edge as f64 / ramp as f64).cos()
    }
}

fn keyword_clip(spec: &SynthSpec, base_hz: f64, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let sr = SAMPLE_RATE as f64;
    let len = (rng.random_range(0.5..0.8) * sr) as usize;
    let onset = rng.random_range(0..=CLIP_LEN - len);
    let f0 = base_hz * (1.0 + rng.random_range(-1.0..=1.0) * spec.jitter);
    let top = f0 * (1.0 + spec.chirp.abs() / 2.0);
    let amps: Vec<f64> = (1..=spec.harmonics)
        .filter(|&h| h as f64 * top < MAX_TONE_HZ)
        .map(|h| rng.random_range(0.8..1.2) / h as f64)
        .collect();
    let mut phases: Vec<f64> = amps.iter().map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    let gain = rng.random_range(0.05..0.3) / amps.iter().sum::<f64>().max(1e-9);
    let mut out = vec![0.0f32; CLIP_LEN];
    for i in 0..len {
        let progress = i as f64 / len as f64;
        let f = f0 * (1.0 + spec.chirp * (progress - 0.5));
        let mut v = 0.0;
        for (h, (a, ph)) in amps.iter().zip(phases.iter_mut()).enumerate() {
            v += a * ph.sin();
            *ph += 2.0 * PI * (h + 1) as f64 * f / sr;
        }
        out[onset + i] = (gain * fade(i, len, 480) * v) as f32;
    }
    add_floor(&mut out, rng);
    out
}

fn filler_clip(rng: &mut ChaCha8Rng) -> Vec<f32> {
    let sr = SAMPLE_RATE as f64;
    let mut out = vec![0.0f32; CLIP_LEN];
    for _ in 0..rng.random_range(1..=3) {
        let len = (rng.random_range(0.1..0.3) * sr) as usize;
        let onset = rng.random_range(0..=CLIP_LEN - len);
        let amp = rng.random_range(0.02..0.2);
        for i in 0..len {
            out[onset + i] += (amp * fade(i, len, 160) * gaussian(rng)) as f32;
        }
    }
    add_floor(&mut out, rng);
    out
}

/// Faint white floor so no clip is digitally silent.
fn add_floor(x: &mut [f32], rng: &mut ChaCha8Rng) {
    for v in x {
        *v += (1e-4 * gaussian(rng)) as f32;
    }
}

/// Shapes white noise in the frequency domain with `gain(hz)`, then
/// normalizes the RMS to 0.1.
fn shaped_noise(len: usize, rng: &mut ChaCha8Rng, gain: impl Fn(f64) -> f64) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = (0..len).map(|_| Complex::new(gaussian(rng), 0.0)).collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(len).process(&mut buf);
    let hz_per_bin = SAMPLE_RATE as f64 / len as f64;
    for (i, c) in buf.iter_mut().enumerate() {
        let k = i.min(len - i);
        *c *= gain(k as f64 * hz_per_bin);
    }
    planner.plan_fft_inverse(len).process(&mut buf);
    let mut out: Vec<f64> = buf.iter().map(|c| c.re).collect();
    normalize_rms(&mut out, 0.1);
    out
}

fn normalize_rms(x: &mut [f64], target: f64) {
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt();
    if rms > 0.0 {
        x.iter_mut().for_each(|v| *v *= target / rms);
    }
}

pub fn synth_noise(spec: &NoiseSpec, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = ((spec.seconds * SAMPLE_RATE as f64) as usize).max(CLIP_LEN);
    let out = match spec.kind {
        NoiseKind::Narrowband {
            center_hz,
            bandwidth_hz,
            modulation,
        } => {
            let half = bandwidth_hz / 2.0;
            let mut x = shaped_noise(len, &mut rng, |f| {
                if (f - center_hz).abs() <= half {
                    1.0
                } else {
                    0.0
                }
            });
            let tones: Vec<(f64, f64)> = (0..3)
                .map(|_| (rng.random_range(0.5..4.0), rng.random_range(0.0..2.0 * PI)))
                .collect();
            for (i, v) in x.iter_mut().enumerate() {
                let t = i as f64 / SAMPLE_RATE as f64;
                let s: f64 = tones.iter().map(|(f, p)| (2.0 * PI * f * t + p).sin()).sum();
                *v *= (modulation * s / 1.5f64.sqrt()).exp();
            }
            normalize_rms(&mut x, 0.1);
            x
        }
        NoiseKind::PinkLike => shaped_noise(len, &mut rng, |f| 1.0 / f.max(20.0).sqrt()),
    };
    out.into_iter().map(|v| v as f32).collect()
}

const TAG_CLIP: u64 = 1;
const TAG_NOISE: u64 = 2;

/// Generates the corpus and its manifest. Every clip and noise draws from its
/// own seed, so the output depends only on `(spec, seed)`.
pub fn synth_dataset(spec: &SynthSpec, seed: u64) -> Result<SynthDataset> {
    spec.validate()?;
    let classes = spec.class_map()?;
    let mut labels: Vec<(String, Option<f64>)> = spec
        .classes
        .iter()
        .map(|c| (c.name.clone(), Some(c.base_hz)))
        .collect();
    if spec.filler {
        labels.push((FILLER_LABEL.to_string(), None));
    }
    let mut clips = BTreeMap::new();
    let mut utterances = Vec::new();
    for split in Split::ALL {
        for (ci, (label, base)) in labels.iter().enumerate() {
            for i in 0..spec.per_class.get(split) {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(mix_seed(&[seed, TAG_CLIP, split as u64, ci as u64, i as u64]));
                let samples = match base {
                    Some(f) => keyword_clip(spec, *f, &mut rng),
                    None => filler_clip(&mut rng),
                };
                let path = format!("{label}/{split}_{i:05}.wav");
                clips.insert(path.clone(), AudioClip::from_exact(samples)?);
                utterances.push(Utterance {
                    path,
                    label: label.clone(),
                    split,
                });
            }
        }
    }
    let mut noises = NoiseBank::new();
    for (ni, n) in spec.noises.iter().enumerate() {
        let samples = synth_noise(n, mix_seed(&[seed, TAG_NOISE, ni as u64]));
        noises.insert(&n.name, samples, !spec.unseen.contains(&n.name))?;
    }
    let manifest = build_manifest(&utterances, &noises, &spec.protocol(seed))?;
    Ok(SynthDataset {
        clips,
        utterances,
        noises,
        manifest,
        classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::manifest::Condition;
    use crate::dsp::{bin_hz, Stft};

    fn counts(train: usize, val: usize, test: usize) -> SplitCounts {
        SplitCounts { train, val, test }
    }

    #[test]
    fn noise_specs_parse_strictly() {
        let nb: NoiseSpec =
            serde_json::from_str(r#"{"name":"nb","kind":"narrowband","center_hz":2700.0}"#).unwrap();
        assert_eq!(
            nb.kind,
            NoiseKind::Narrowband {
                center_hz: 2700.0,
                bandwidth_hz: 200.0,
                modulation: 0.8
            }
        );
        assert_eq!(nb.seconds, 10.0);
        let back: NoiseSpec = serde_json::from_str(&serde_json::to_string(&nb).unwrap()).unwrap();
        assert_eq!(back, nb);
        for bad in [
            r#"{"name":"nb","kind":"narrowband","center_hz":1.0,"q":2}"#,
            r#"{"name":"nb","kind":"narrowband"}"#,
            r#"{"name":"p","kind":"pink-like","center_hz":1.0}"#,
            r#"{"name":"p","kind":"brown"}"#,
        ] {
            assert!(serde_json::from_str::<NoiseSpec>(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn three_classes_fifty_each() {
        let mut spec = SynthSpec::clean(&[600.0, 1100.0, 1700.0], counts(50, 0, 0));
        spec.filler = false;
        spec.val.include_clean = false;
        spec.test.include_clean = false;
        let ds = synth_dataset(&spec, 1).unwrap();
        assert_eq!(ds.clips.len(), 150);
        assert_eq!(ds.manifest.len(), 150);
        let mut per: BTreeMap<&str, usize> = BTreeMap::new();
        for e in &ds.manifest.entries {
            *per.entry(e.label.as_str()).or_default() += 1;
        }
        assert!(per.values().all(|&c| c == 50));
    }

    #[test]
    fn same_seed_same_clips() {
        let spec = SynthSpec::clean(&[500.0, 900.0], counts(3, 2, 2));
        let a = synth_dataset(&spec, 9).unwrap();
        let b = synth_dataset(&spec, 9).unwrap();
        assert_eq!(a, b);
        let c = synth_dataset(&spec, 10).unwrap();
        assert_ne!(a.clips, c.clips);
    }

    #[test]
    fn overlapping_frequencies_are_a_spec_error() {
        let spec = SynthSpec::clean(&[500.0, 520.0], counts(1, 1, 1));
        assert!(matches!(synth_dataset(&spec, 0), Err(Error::Spec(_))));
        let mut single = SynthSpec::clean(&[500.0], counts(1, 1, 1));
        single.filler = false;
        assert!(matches!(single.validate(), Err(Error::Spec(_))));
    }

    #[test]
    fn narrowband_noise_peaks_at_its_center() {
        let spec = NoiseSpec {
            name: "nb".into(),
            kind: NoiseKind::Narrowband {
                center_hz: 2700.0,
                bandwidth_hz: 200.0,
                modulation: 0.8,
            },
            seconds: 4.0,
        };
        let x = synth_noise(&spec, 3);
        let p = Stft::new().power(&x).unwrap();
        let mut mean = vec![0.0f64; p.bins()];
        for t in 0..p.frames() {
            for (m, v) in mean.iter_mut().zip(p.frame(t)) {
                *m += *v as f64;
            }
        }
        let peak = (0..mean.len()).max_by(|&a, &b| mean[a].total_cmp(&mean[b])).unwrap();
        assert!((peak as i64 - 81).abs() <= 3, "peak at bin {peak}");
        let inside: f64 = (0..mean.len()).filter(|&f| (bin_hz(f) - 2700.0).abs() < 200.0).map(|f| mean[f]).sum();
        assert!(inside / mean.iter().sum::<f64>() > 0.95);
    }

    #[test]
    fn noisy_manifest_has_conditions() {
        let mut spec = SynthSpec::clean(&[500.0, 900.0, 1400.0], counts(12, 4, 4));
        spec.noises = vec![
            NoiseSpec {
                name: "nb".into(),
                kind: NoiseKind::Narrowband {
                    center_hz: 2700.0,
                    bandwidth_hz: 200.0,
                    modulation: 0.8,
                },
                seconds: 2.0,
            },
            NoiseSpec {
                name: "pink".into(),
                kind: NoiseKind::PinkLike,
                seconds: 2.0,
            },
        ];
        spec.unseen = vec!["pink".into()];
        spec.train = SplitMix {
            noises: vec!["nb".into()],
            snrs: vec![0, 5, 10],
            include_clean: false,
        };
        spec.test = SplitMix {
            noises: vec!["nb".into(), "pink".into()],
            snrs: vec![-5, 0],
            include_clean: true,
        };
        let ds = synth_dataset(&spec, 4).unwrap();
        assert_eq!(ds.manifest.split(Split::Train).count(), 48);
        assert!(ds.manifest.split(Split::Test).any(|e| e.seen == Condition::Unseen));
        spec.train.noises.push("pink".into());
        assert!(synth_dataset(&spec, 4).is_err());
    }
}
