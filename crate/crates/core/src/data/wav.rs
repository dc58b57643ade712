//! WAV ingestion: mono, 16 kHz, 16-bit PCM or 32-bit float.

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::atomic::write_atomic;
use crate::dsp::AudioClip;
use crate::error::{Error, Result};
use crate::SAMPLE_RATE;

fn parse_error(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) if io.kind() == std::io::ErrorKind::NotFound => Error::Io(io),
        other => Error::Parse(format!("{}: {other}", path.display())),
    }
}

/// All samples of a mono 16 kHz file, scaled to `[-1, 1]`.
pub fn read_wav_samples(path: &Path) -> Result<Vec<f32>> {
    let mut reader = WavReader::open(path).map_err(|e| parse_error(path, e))?;
    let spec = reader.spec();
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::Format(format!(
            "{}: sample rate {} Hz, expected {SAMPLE_RATE} Hz",
            path.display(),
            spec.sample_rate
        )));
    }
    if spec.channels != 1 {
        return Err(Error::Format(format!(
            "{}: {} channels, expected mono",
            path.display(),
            spec.channels
        )));
    }
    match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0).map_err(|e| parse_error(path, e)))
            .collect(),
        (SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map_err(|e| parse_error(path, e)))
            .collect(),
        (fmt, bits) => Err(Error::Format(format!(
            "{}: bit depth {bits} ({fmt:?}), expected 16-bit PCM or 32-bit float",
            path.display()
        ))),
    }
}

/// Loads a clip and normalizes it to one second (see [`AudioClip::new`]).
pub fn load_wav(path: &Path) -> Result<AudioClip> {
    AudioClip::new(read_wav_samples(path)?, SAMPLE_RATE)
}

/// Writes mono 16 kHz 32-bit float samples, atomically.
pub fn write_wav(path: &Path, samples: &[f32]) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 32,
        sample_format: SampleFormat::Float,
    };
    let io = |e: hound::Error| Error::Parse(format!("{}: {e}", path.display()));
    let mut buf = std::io::Cursor::new(Vec::with_capacity(44 + 4 * samples.len()));
    let mut writer = WavWriter::new(&mut buf, spec).map_err(io)?;
    for &s in samples {
        writer.write_sample(s).map_err(io)?;
    }
    writer.finalize().map_err(io)?;
    write_atomic(path, buf.get_ref())
}
