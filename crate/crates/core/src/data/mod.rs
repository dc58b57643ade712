//! Audio ingestion, noise mixing, manifests and the synthetic corpus.

pub mod corpus;
pub mod manifest;
pub mod mix;
pub mod synth;
pub mod wav;

pub use corpus::{render, ClassMap, ClipSource, DiskSource, LabeledSet, FILLER_LABEL};
pub use manifest::{
    build_manifest, scan_root, Assignment, Condition, Manifest, ManifestEntry, NoiseBank,
    ProtocolConfig, Split, SplitProtocol, Utterance,
};
pub use mix::{measure_snr, mix_at_snr, Snr};
pub use wav::{load_wav, read_wav_samples, write_wav};
pub use synth::{synth_dataset, SynthDataset, SynthSpec};
