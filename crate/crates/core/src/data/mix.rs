//! Additive noise at a controlled signal-to-noise ratio.
//!
//! Power is the mean squared amplitude over the whole clip. The mixture is
//! not renormalized afterwards, so samples may leave `[-1, 1]`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::dsp::{mean_power, AudioClip};
use crate::error::{Error, Result};

/// Mixing condition: an SNR in dB, or no noise at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Snr {
    Db(i32),
    Clean,
}

impl fmt::Display for Snr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Snr::Db(v) => write!(f, "{v}"),
            Snr::Clean => f.write_str("clean"),
        }
    }
}

impl FromStr for Snr {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "clean" => Ok(Snr::Clean),
            v => v
                .parse()
                .map(Snr::Db)
                .map_err(|_| Error::Parse(format!("bad SNR `{s}`"))),
        }
    }
}

impl Serialize for Snr {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Snr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Noise gain that puts `noise` at `snr_db` below `speech`.
pub fn noise_gain(speech_power: f64, noise_power: f64, snr_db: f64) -> f64 {
    (speech_power / (noise_power * 10f64.powf(snr_db / 10.0))).sqrt()
}

/// `10 · log10(P_signal / P_noise)`.
pub fn measure_snr(signal: &[f32], noise: &[f32]) -> f64 {
    10.0 * (mean_power(signal) / mean_power(noise)).log10()
}

/// `speech + α · noise` with `α` chosen so the scaled noise sits exactly
/// `snr` dB below the speech. [`Snr::Clean`] returns the speech unchanged.
pub fn mix_at_snr(speech: &AudioClip, noise: &[f32], snr: Snr) -> Result<AudioClip> {
    let snr_db = match snr {
        Snr::Clean => return Ok(speech.clone()),
        Snr::Db(v) => v as f64,
    };
    mix_at_snr_db(speech, noise, snr_db)
}

pub fn mix_at_snr_db(speech: &AudioClip, noise: &[f32], snr_db: f64) -> Result<AudioClip> {
    let s = speech.samples();
    if noise.len() != s.len() {
        return Err(Error::Contract(format!(
            "noise segment has {} samples, speech has {}",
            noise.len(),
            s.len()
        )));
    }
    let (ps, pn) = (speech.power(), mean_power(noise));
    if ps == 0.0 {
        return Err(Error::Degenerate("speech has zero power".into()));
    }
    if pn == 0.0 {
        return Err(Error::Degenerate("noise has zero power".into()));
    }
    let alpha = noise_gain(ps, pn, snr_db);
    let mixed = s
        .iter()
        .zip(noise)
        .map(|(&x, &n)| (x as f64 + alpha * n as f64) as f32)
        .collect();
    AudioClip::from_exact(mixed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::CLIP_LEN;

    fn tone(freq: f32, amp: f32) -> Vec<f32> {
        (0..CLIP_LEN)
            .map(|n| amp * (2.0 * std::f32::consts::PI * freq * n as f32 / 16000.0).sin())
            .collect()
    }

    #[test]
    fn gain_closed_form() {
        assert!((noise_gain(1.0, 4.0, 10.0) - (1.0f64 / 40.0).sqrt()).abs() < 1e-15);
        assert!((noise_gain(1.0, 4.0, 10.0) - 0.15811).abs() < 1e-5);
    }

    #[test]
    fn zero_db_equalizes_power() {
        let speech = AudioClip::from_exact(tone(300.0, 0.5)).unwrap();
        let noise = tone(2000.0, 0.1);
        let mixed = mix_at_snr(&speech, &noise, Snr::Db(0)).unwrap();
        let scaled: Vec<f32> = mixed.samples().iter().zip(speech.samples()).map(|(m, s)| m - s).collect();
        assert!((mean_power(&scaled) / speech.power() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn clean_returns_speech() {
        let speech = AudioClip::from_exact(tone(300.0, 0.5)).unwrap();
        let mixed = mix_at_snr(&speech, &[], Snr::Clean).unwrap();
        assert_eq!(mixed, speech);
    }

    #[test]
    fn degenerate_inputs() {
        let silent = AudioClip::from_exact(vec![0.0; CLIP_LEN]).unwrap();
        let speech = AudioClip::from_exact(tone(300.0, 0.5)).unwrap();
        assert!(matches!(
            mix_at_snr(&silent, &tone(100.0, 1.0), Snr::Db(5)),
            Err(Error::Degenerate(_))
        ));
        assert!(matches!(
            mix_at_snr(&speech, &vec![0.0; CLIP_LEN], Snr::Db(5)),
            Err(Error::Degenerate(_))
        ));
        assert!(mix_at_snr(&speech, &[1.0; 10], Snr::Db(5)).is_err());
    }

    #[test]
    fn snr_text_form() {
        assert_eq!("clean".parse::<Snr>().unwrap(), Snr::Clean);
        assert_eq!("-10".parse::<Snr>().unwrap(), Snr::Db(-10));
        assert_eq!(Snr::Db(-5).to_string(), "-5");
        assert!("loud".parse::<Snr>().is_err());
    }
}
