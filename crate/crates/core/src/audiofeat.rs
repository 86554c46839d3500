//! 80-channel log-mel front end with pad-to-30 s semantics, plus the two
//! waveform augmentations used when training the audio branch.
//!
//! Constants: 16 kHz input, 25 ms Hann window (400 samples, also the FFT
//! size) with centered reflection padding, 10 ms hop, 80 Slaney-scale
//! triangular filters with area normalization over 0 to 8 kHz, and
//! `log10(power + 1e-10)` compression. There is no dynamic-range
//! normalization, so scaling the input by `g` shifts every entry well
//! above the floor by exactly `log10(g^2)`.

use std::fs;
use std::ops::Range;
use std::path::Path;
use std::sync::{Arc, OnceLock};

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{AudioClip, SAMPLE_RATE};

pub const N_MELS: usize = 80;
pub const N_FFT: usize = 400;
pub const HOP: usize = 160;
pub const CHUNK_SECONDS: usize = 30;
pub const CHUNK_SAMPLES: usize = CHUNK_SECONDS * SAMPLE_RATE as usize;
pub const N_COLUMNS: usize = CHUNK_SAMPLES / HOP;
pub const LOG_FLOOR: f64 = 1e-10;
pub const FRAME_HOP_S: f64 = HOP as f64 / SAMPLE_RATE as f64;

#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    /// `N_MELS x columns`.
    pub values: Array2<f64>,
    pub frame_hop_s: f64,
}

impl MelSpectrogram {
    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    /// Debug dump: one CSV row per mel channel.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for row in self.values.outer_iter() {
            let line: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

struct Frontend {
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    /// Per mel channel: first FFT bin and the nonzero filter weights.
    filters: Vec<(usize, Vec<f64>)>,
}

fn frontend() -> &'static Frontend {
    static FRONTEND: OnceLock<Frontend> = OnceLock::new();
    FRONTEND.get_or_init(|| {
        // periodic Hann
        let window = (0..N_FFT)
            .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / N_FFT as f64).cos())
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(N_FFT);
        let dense = mel_filterbank(SAMPLE_RATE as f64, N_FFT, N_MELS, 0.0, SAMPLE_RATE as f64 / 2.0);
        let filters = dense
            .into_iter()
            .map(|row| {
                let first = row.iter().position(|&w| w > 0.0).unwrap_or(0);
                let last = row.iter().rposition(|&w| w > 0.0).unwrap_or(0);
                (first, row[first..=last].to_vec())
            })
            .collect();
        Frontend {
            window,
            fft,
            filters,
        }
    })
}

/// Slaney mel scale: linear below 1 kHz, logarithmic above.
fn hz_to_mel(hz: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if hz >= MIN_LOG_HZ {
        min_log_mel + (hz / MIN_LOG_HZ).ln() / logstep
    } else {
        hz / F_SP
    }
}

fn mel_to_hz(mel: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if mel >= min_log_mel {
        MIN_LOG_HZ * (logstep * (mel - min_log_mel)).exp()
    } else {
        F_SP * mel
    }
}

/// Dense `n_mels x (n_fft/2 + 1)` triangular filterbank, area-normalized.
pub fn mel_filterbank(sr: f64, n_fft: usize, n_mels: usize, fmin: f64, fmax: f64) -> Vec<Vec<f64>> {
    let n_bins = n_fft / 2 + 1;
    let fft_freqs: Vec<f64> = (0..n_bins).map(|k| k as f64 * sr / n_fft as f64).collect();
    let (mmin, mmax) = (hz_to_mel(fmin), hz_to_mel(fmax));
    let pts: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mmin + (mmax - mmin) * i as f64 / (n_mels + 1) as f64))
        .collect();
    (0..n_mels)
        .map(|m| {
            let (lo, mid, hi) = (pts[m], pts[m + 1], pts[m + 2]);
            let norm = 2.0 / (hi - lo);
            fft_freqs
                .iter()
                .map(|&f| {
                    let up = (f - lo) / (mid - lo);
                    let down = (hi - f) / (hi - mid);
                    norm * up.min(down).max(0.0)
                })
                .collect()
        })
        .collect()
}

/// Right-pad with zeros or truncate to exactly 30 s.
pub fn pad_or_trim(clip: &AudioClip) -> AudioClip {
    let mut samples = clip.samples.clone();
    samples.resize(CHUNK_SAMPLES, 0.0);
    AudioClip {
        samples,
        sample_rate: clip.sample_rate,
    }
}

/// Log-mel spectrogram of the clip padded or trimmed to 30 s; always
/// `80 x 3000`.
pub fn log_mel(clip: &AudioClip) -> Result<MelSpectrogram> {
    if clip.sample_rate != SAMPLE_RATE {
        return Err(Error::Audio(format!(
            "expected {SAMPLE_RATE} Hz audio, got {} Hz",
            clip.sample_rate
        )));
    }
    let fe = frontend();
    let padded = pad_or_trim(clip);
    let x: Vec<f64> = padded.samples.iter().map(|&s| f64::from(s)).collect();
    let n = x.len();
    let half = N_FFT / 2;
    // reflect without repeating the edge sample
    let sample_at = |i: isize| -> f64 {
        let len = n as isize;
        let mut j = i;
        if j < 0 {
            j = -j;
        }
        if j >= len {
            j = 2 * (len - 1) - j;
        }
        x[j as usize]
    };

    let floor = LOG_FLOOR.log10();
    let mut values = Array2::from_elem((N_MELS, N_COLUMNS), floor);
    let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
    let mut scratch = vec![Complex::new(0.0, 0.0); fe.fft.get_inplace_scratch_len()];
    let mut power = vec![0.0; N_FFT / 2 + 1];
    for col in 0..N_COLUMNS {
        let start = (col * HOP) as isize - half as isize;
        let mut silent = true;
        for (k, b) in buf.iter_mut().enumerate() {
            let s = sample_at(start + k as isize);
            silent &= s == 0.0;
            *b = Complex::new(s * fe.window[k], 0.0);
        }
        if silent {
            continue;
        }
        fe.fft.process_with_scratch(&mut buf, &mut scratch);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        for (m, (first, weights)) in fe.filters.iter().enumerate() {
            let e: f64 = weights
                .iter()
                .zip(&power[*first..])
                .map(|(w, p)| w * p)
                .sum();
            values[[m, col]] = (e + LOG_FLOOR).log10();
        }
    }
    Ok(MelSpectrogram {
        values,
        frame_hop_s: FRAME_HOP_S,
    })
}

fn mean_power(x: impl Iterator<Item = f64>) -> (f64, usize) {
    let (sum, n) = x.fold((0.0, 0usize), |(s, n), v| (s + v * v, n + 1));
    (sum / n.max(1) as f64, n)
}

/// Result of one noise draw, kept for inspection.
#[derive(Debug, Clone)]
pub struct NoiseDraw {
    pub clip: AudioClip,
    pub snr_db: f64,
    /// The scaled noise exactly as added, before clipping.
    pub noise: Vec<f64>,
}

/// White Gaussian noise at an SNR drawn uniformly (in dB) from `snr_db`.
pub fn add_noise(clip: &AudioClip, snr_db: (f64, f64), rng: &mut impl Rng) -> Result<AudioClip> {
    add_noise_detailed(clip, snr_db, rng).map(|d| d.clip)
}

pub fn add_noise_detailed(
    clip: &AudioClip,
    snr_db: (f64, f64),
    rng: &mut impl Rng,
) -> Result<NoiseDraw> {
    let (lo, hi) = snr_db;
    if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
        return Err(Error::Config(format!("invalid SNR range [{lo}, {hi}]")));
    }
    let (p_signal, _) = mean_power(clip.samples.iter().map(|&s| f64::from(s)));
    if p_signal == 0.0 {
        return Err(Error::Audio("cannot set an SNR on a silent clip".into()));
    }
    let snr = if lo == hi { lo } else { rng.random_range(lo..=hi) };
    let raw: Vec<f64> = (0..clip.samples.len())
        .map(|_| StandardNormal.sample(rng))
        .collect();
    let (p_raw, _) = mean_power(raw.iter().copied());
    let gain = (p_signal / (p_raw * 10f64.powf(snr / 10.0))).sqrt();
    let noise: Vec<f64> = raw.into_iter().map(|v| v * gain).collect();
    let samples = clip
        .samples
        .iter()
        .zip(&noise)
        .map(|(&s, &n)| (f64::from(s) + n).clamp(-1.0, 1.0) as f32)
        .collect();
    Ok(NoiseDraw {
        clip: AudioClip {
            samples,
            sample_rate: clip.sample_rate,
        },
        snr_db: snr,
        noise,
    })
}

/// Sample range kept by a random crop of an `n_samples` clip: with
/// probability `p`, a length drawn uniformly from `[min_len_s, duration]`
/// at a uniformly drawn offset; otherwise the full range.
pub fn crop_span(
    n_samples: usize,
    sample_rate: u32,
    p: f64,
    min_len_s: f64,
    rng: &mut impl Rng,
) -> Result<Range<usize>> {
    let duration = n_samples as f64 / f64::from(sample_rate);
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("crop probability {p} outside [0, 1]")));
    }
    if min_len_s > duration || min_len_s < 0.0 {
        return Err(Error::Config(format!(
            "minimum crop length {min_len_s} s exceeds clip duration {duration} s"
        )));
    }
    if !rng.random_bool(p) {
        return Ok(0..n_samples);
    }
    let min_len = ((min_len_s * f64::from(sample_rate)).ceil() as usize).clamp(1, n_samples);
    let len = rng.random_range(min_len..=n_samples);
    let start = rng.random_range(0..=n_samples - len);
    Ok(start..start + len)
}

pub fn random_crop(
    clip: &AudioClip,
    p: f64,
    min_len_s: f64,
    rng: &mut impl Rng,
) -> Result<AudioClip> {
    let span = crop_span(clip.samples.len(), clip.sample_rate, p, min_len_s, rng)?;
    Ok(AudioClip {
        samples: clip.samples[span].to_vec(),
        sample_rate: clip.sample_rate,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub noise_p: f64,
    pub snr_min_db: f64,
    pub snr_max_db: f64,
    pub crop_p: f64,
    pub crop_min_s: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            noise_p: 0.0,
            snr_min_db: 3.0,
            snr_max_db: 20.0,
            crop_p: 0.9,
            crop_min_s: 3.0,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            noise_p: 0.0,
            crop_p: 0.0,
            ..Self::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tone(seconds: f64, hz: f64, amp: f64) -> AudioClip {
        let n = (seconds * SAMPLE_RATE as f64) as usize;
        let samples = (0..n)
            .map(|i| (amp * (2.0 * std::f64::consts::PI * hz * i as f64 / SAMPLE_RATE as f64).sin()) as f32)
            .collect();
        AudioClip::new(samples, SAMPLE_RATE).unwrap()
    }

    #[test]
    fn pad_and_trim_lengths() {
        let short = pad_or_trim(&tone(10.0, 440.0, 0.5));
        assert_eq!(short.samples.len(), CHUNK_SAMPLES);
        assert!(short.samples[160_000..].iter().all(|&s| s == 0.0));
        let exact = tone(30.0, 440.0, 0.5);
        assert_eq!(pad_or_trim(&exact), exact);
        let long = tone(45.0, 440.0, 0.5);
        assert_eq!(pad_or_trim(&long).samples[..], long.samples[..CHUNK_SAMPLES]);
    }

    #[test]
    fn wrong_sample_rate_is_rejected() {
        let clip = AudioClip::new(vec![0.1; 8000], 8000).unwrap();
        assert!(log_mel(&clip).is_err());
    }

    #[test]
    fn filterbank_covers_band() {
        let fb = mel_filterbank(16000.0, 400, 80, 0.0, 8000.0);
        assert_eq!(fb.len(), 80);
        assert!(fb.iter().all(|row| row.iter().any(|&w| w > 0.0)));
    }

    #[test]
    fn degenerate_snr_range_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = add_noise_detailed(&tone(1.0, 300.0, 0.1), (20.0, 20.0), &mut rng).unwrap();
        assert_eq!(d.snr_db, 20.0);
    }

    #[test]
    fn silent_clip_noise_is_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let clip = AudioClip::new(vec![0.0; 100], SAMPLE_RATE).unwrap();
        assert!(add_noise(&clip, (3.0, 20.0), &mut rng).is_err());
    }

    #[test]
    fn crop_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let clip = tone(5.0, 200.0, 0.3);
        for _ in 0..20 {
            assert_eq!(random_crop(&clip, 0.0, 3.0, &mut rng).unwrap(), clip);
            assert_eq!(random_crop(&clip, 1.0, 5.0, &mut rng).unwrap(), clip);
        }
        assert!(random_crop(&clip, 1.0, 6.0, &mut rng).is_err());
    }
}
