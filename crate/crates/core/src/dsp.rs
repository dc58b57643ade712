//! Power spectrograms, Mel filterbanks and log compression.
//!
//! Frames are 480 samples (30 ms at 16 kHz) with a 160-sample hop, windowed
//! with a periodic Hann window and transformed with a 480-point DFT. Only
//! the one-sided bins `0..=240` are kept and no bins are doubled, so each
//! entry is exactly `|X(t, f)|²` of the windowed frame.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::graph::LOG_FLOOR;
use crate::{CLIP_LEN, SAMPLE_RATE};

pub const WINDOW_LEN: usize = 480;
pub const HOP_LEN: usize = 160;
/// One-sided bin count, `WINDOW_LEN / 2 + 1`.
pub const NUM_BINS: usize = WINDOW_LEN / 2 + 1;
/// Frames in a one-second clip.
pub const NUM_FRAMES: usize = 1 + (CLIP_LEN - WINDOW_LEN) / HOP_LEN;
/// Upper edge of the Mel filterbank (Nyquist).
pub const MAX_HZ: f64 = SAMPLE_RATE as f64 / 2.0;

/// Centre frequency of bin `f` in Hz.
pub fn bin_hz(f: usize) -> f64 {
    f as f64 * SAMPLE_RATE as f64 / WINDOW_LEN as f64
}

/// One second of mono 16 kHz audio.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f32>,
}

impl AudioClip {
    /// Normalizes `samples` to exactly one second: shorter input is
    /// zero-padded with the original centred, longer input is trimmed
    /// symmetrically around its centre.
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate != SAMPLE_RATE {
            return Err(Error::Format(format!(
                "sample rate {sample_rate} Hz, expected {SAMPLE_RATE} Hz"
            )));
        }
        Ok(AudioClip {
            samples: fit_length(&samples, CLIP_LEN),
        })
    }

    /// Wraps samples that are already exactly one second long.
    pub fn from_exact(samples: Vec<f32>) -> Result<Self> {
        if samples.len() != CLIP_LEN {
            return Err(Error::Contract(format!(
                "clip must hold {CLIP_LEN} samples, got {}",
                samples.len()
            )));
        }
        Ok(AudioClip { samples })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    /// Mean squared amplitude.
    pub fn power(&self) -> f64 {
        mean_power(&self.samples)
    }
}

pub(crate) fn mean_power(x: &[f32]) -> f64 {
    x.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / x.len().max(1) as f64
}

fn fit_length(samples: &[f32], len: usize) -> Vec<f32> {
    use std::cmp::Ordering;
    match samples.len().cmp(&len) {
        Ordering::Equal => samples.to_vec(),
        Ordering::Greater => {
            let start = (samples.len() - len) / 2;
            samples[start..start + len].to_vec()
        }
        Ordering::Less => {
            let mut out = vec![0.0; len];
            let start = (len - samples.len()) / 2;
            out[start..start + samples.len()].copy_from_slice(samples);
            out
        }
    }
}

/// `frames × bins` matrix of linear-power values.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerSpectrogram {
    values: Vec<f32>,
    frames: usize,
    bins: usize,
}

impl PowerSpectrogram {
    /// Wraps a `frames × bins` matrix. The STFT always produces 241 bins;
    /// other widths exist for reduced test instances.
    pub fn new(values: Vec<f32>, frames: usize, bins: usize) -> Result<Self> {
        if values.len() != frames * bins {
            return Err(Error::Contract(format!(
                "spectrogram of {frames}×{bins} needs {} values, got {}",
                frames * bins,
                values.len()
            )));
        }
        if values.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Contract("power spectrogram entries must be >= 0".into()));
        }
        Ok(PowerSpectrogram {
            values,
            frames,
            bins,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.values[t * self.bins..(t + 1) * self.bins]
    }
}

/// Periodic Hann window of length `WINDOW_LEN`.
pub fn hann_window() -> Vec<f64> {
    (0..WINDOW_LEN)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / WINDOW_LEN as f64).cos())
        .collect()
}

/// Reusable STFT plan.
#[derive(Clone)]
pub struct Stft {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
}

impl std::fmt::Debug for Stft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stft").field("len", &WINDOW_LEN).finish()
    }
}

impl Default for Stft {
    fn default() -> Self {
        Self::new()
    }
}

impl Stft {
    pub fn new() -> Self {
        let fft = FftPlanner::new().plan_fft_forward(WINDOW_LEN);
        Stft {
            fft,
            window: hann_window(),
        }
    }

    /// Power spectrum of one windowed frame.
    pub fn frame_power(&self, frame: &[f32], out: &mut [f32]) {
        let mut buf: Vec<Complex<f64>> = frame
            .iter()
            .zip(&self.window)
            .map(|(&x, &w)| Complex::new(x as f64 * w, 0.0))
            .collect();
        self.fft.process(&mut buf);
        for (o, c) in out.iter_mut().zip(&buf[..NUM_BINS]) {
            *o = c.norm_sqr() as f32;
        }
    }

    /// Power spectrogram of an arbitrary-length signal (no centring or padding).
    pub fn power(&self, samples: &[f32]) -> Result<PowerSpectrogram> {
        if samples.len() < WINDOW_LEN {
            return Err(Error::Contract(format!(
                "signal of {} samples is shorter than one {WINDOW_LEN}-sample window",
                samples.len()
            )));
        }
        let frames = 1 + (samples.len() - WINDOW_LEN) / HOP_LEN;
        let mut values = vec![0.0f32; frames * NUM_BINS];
        for (t, out) in values.chunks_mut(NUM_BINS).enumerate() {
            let start = t * HOP_LEN;
            self.frame_power(&samples[start..start + WINDOW_LEN], out);
        }
        PowerSpectrogram::new(values, frames, NUM_BINS)
    }

    pub fn clip_power(&self, clip: &AudioClip) -> Result<PowerSpectrogram> {
        self.power(clip.samples())
    }
}

/// Power spectrogram of a one-second clip: 98 frames × 241 bins.
pub fn stft_power(clip: &AudioClip) -> Result<PowerSpectrogram> {
    Stft::new().clip_power(clip)
}

/// HTK Mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters equally spaced on the Mel scale between 0 Hz and Nyquist.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    /// Row-major `bins × channels`.
    weights: Vec<f32>,
    bins: usize,
    channels: usize,
    /// `channels + 2` band edges in Hz; channel `k` spans `edges[k]..edges[k + 2]`.
    edges_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn edges_hz(&self) -> &[f64] {
        &self.edges_hz
    }

    pub fn center_hz(&self, k: usize) -> f64 {
        self.edges_hz[k + 1]
    }

    pub fn column(&self, k: usize) -> Vec<f32> {
        (0..self.bins).map(|f| self.weights[f * self.channels + k]).collect()
    }

    /// Bin index where column `k` attains its peak.
    pub fn center_bin(&self, k: usize) -> usize {
        let col = self.column(k);
        let max = col.iter().cloned().fold(f32::MIN, f32::max);
        col.iter().position(|&v| v == max).unwrap_or(0)
    }
}

/// `K` triangular Mel filters over `bins` linear bins, each scaled to peak at 1.0.
///
/// A filter too narrow to cover any bin degenerates to a single unit weight
/// at the bin nearest its centre, so every column stays nonzero.
pub fn mel_filterbank(channels: usize, bins: usize, sample_rate: u32) -> Result<MelFilterbank> {
    if channels < 1 || channels > bins {
        return Err(Error::Config(format!(
            "Mel channel count must be in 1..={bins}, got {channels}"
        )));
    }
    if bins < 2 {
        return Err(Error::Config(format!("need at least 2 bins, got {bins}")));
    }
    let nyquist = sample_rate as f64 / 2.0;
    let bin_step = nyquist / (bins - 1) as f64;
    let top = hz_to_mel(nyquist);
    let mut edges_hz: Vec<f64> = (0..channels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (channels + 1) as f64))
        .collect();
    edges_hz[0] = 0.0;
    edges_hz[channels + 1] = nyquist;
    let mut weights = vec![0.0f32; bins * channels];
    for k in 0..channels {
        let (lo, c, hi) = (edges_hz[k], edges_hz[k + 1], edges_hz[k + 2]);
        let mut col: Vec<f64> = (0..bins)
            .map(|f| {
                let hz = f as f64 * bin_step;
                let rise = (hz - lo) / (c - lo);
                let fall = (hi - hz) / (hi - c);
                rise.min(fall).max(0.0)
            })
            .collect();
        let peak = col.iter().cloned().fold(0.0, f64::max);
        if peak > 0.0 {
            col.iter_mut().for_each(|v| *v /= peak);
        } else {
            let nearest = ((c / bin_step).round() as usize).min(bins - 1);
            col[nearest] = 1.0;
        }
        for (f, v) in col.into_iter().enumerate() {
            weights[f * channels + k] = v as f32;
        }
    }
    Ok(MelFilterbank {
        weights,
        bins,
        channels,
        edges_hz,
    })
}

/// `ln(max(y, e^-50))` element-wise over a nonnegative matrix.
pub fn log_compress(values: &[f32]) -> Result<Vec<f32>> {
    if let Some(bad) = values.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::Contract(format!(
            "log compression requires nonnegative input, found {bad}"
        )));
    }
    Ok(values
        .iter()
        .map(|&v| (v as f64).max(LOG_FLOOR).ln() as f32)
        .collect())
}
