//! Mono audio: WAV io, short-time band-energy analysis, and onset
//! strength. The analysis hop equals one motion frame so features align
//! 1:1 with clip frames.

use crate::error::{Error, Result};
use std::path::Path;

/// Log-energy floor; applied before taking the logarithm so silence maps
/// to a finite documented value.
pub const ENERGY_FLOOR: f64 = 1e-12;
pub const LOG_FLOOR: f64 = -27.631021115928547; // ln(1e-12)

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

pub fn write_wav(path: &Path, wave: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)
        .map_err(|e| Error::Format(format!("wav create: {e}")))?;
    for &x in &wave.samples {
        let v = (x.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer.write_sample(v).map_err(|e| Error::Format(format!("wav write: {e}")))?;
    }
    writer.finalize().map_err(|e| Error::Format(format!("wav finalize: {e}")))?;
    Ok(())
}

pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut reader =
        hound::WavReader::open(path).map_err(|e| Error::Format(format!("wav open: {e}")))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Format(format!("expected mono wav, got {} channels", spec.channels)));
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32767.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format(format!("wav read: {e}")))?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format(format!("wav read: {e}")))?,
        (f, b) => {
            return Err(Error::Format(format!("unsupported wav format {f:?}/{b} bits")));
        }
    };
    Ok(Waveform { samples, sample_rate: spec.sample_rate })
}

/// Number of analysis frames covering the waveform at the given rate.
pub fn frame_count(wave: &Waveform, fps: f64) -> usize {
    (wave.duration() * fps).ceil() as usize
}

/// Per-frame log triangular-band energies plus frame RMS:
/// `n_bands + 1` values per frame. Windows are one frame long (hop =
/// window = sample_rate / fps), Hann weighted, zero padded at the tail.
pub fn band_energies(wave: &Waveform, fps: f64, n_bands: usize) -> Result<Vec<Vec<f64>>> {
    if wave.samples.is_empty() {
        return Err(Error::EmptyAudio);
    }
    let sr = wave.sample_rate as f64;
    let win = (sr / fps).round() as usize;
    let n_frames = frame_count(wave, fps);
    let n_bins = win / 2 + 1;
    let bank = triangular_bank(n_bands, n_bins, sr, win);
    let hann: Vec<f64> = (0..win)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / win as f64).cos())
        .collect();

    let mut out = Vec::with_capacity(n_frames);
    let mut windowed = vec![0.0; win];
    for k in 0..n_frames {
        let start = (k as f64 * sr / fps).floor() as usize;
        let mut sq = 0.0;
        for i in 0..win {
            let s = wave.samples.get(start + i).copied().unwrap_or(0.0);
            sq += s * s;
            windowed[i] = s * hann[i];
        }
        let power = power_spectrum(&windowed);
        let mut feats = Vec::with_capacity(n_bands + 1);
        for weights in &bank {
            let mut e = 0.0;
            for (w, p) in weights.iter().zip(&power) {
                e += w * p;
            }
            feats.push(e.max(ENERGY_FLOOR).ln());
        }
        feats.push((sq / win as f64).sqrt());
        out.push(feats);
    }
    Ok(out)
}

/// Direct DFT power spectrum: |X_k|^2 / n for k = 0..n/2.
fn power_spectrum(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let n_bins = n / 2 + 1;
    let mut out = vec![0.0; n_bins];
    for (k, o) in out.iter_mut().enumerate() {
        let w = -2.0 * std::f64::consts::PI * k as f64 / n as f64;
        let mut re = 0.0;
        let mut im = 0.0;
        for (i, &xi) in x.iter().enumerate() {
            let (s, c) = (w * i as f64).sin_cos();
            re += xi * c;
            im += xi * s;
        }
        *o = (re * re + im * im) / n as f64;
    }
    out
}

/// Triangular filters linear in Hz from 0 to Nyquist; band i is centered
/// at (i+1) * nyquist / (n_bands + 1).
fn triangular_bank(n_bands: usize, n_bins: usize, sr: f64, win: usize) -> Vec<Vec<f64>> {
    let nyquist = sr / 2.0;
    let spacing = nyquist / (n_bands + 1) as f64;
    let bin_hz = sr / win as f64;
    (0..n_bands)
        .map(|b| {
            let center = (b + 1) as f64 * spacing;
            (0..n_bins)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    (1.0 - (f - center).abs() / spacing).max(0.0)
                })
                .collect()
        })
        .collect()
}

/// Center frequency of each triangular band.
pub fn band_centers(n_bands: usize, sample_rate: u32) -> Vec<f64> {
    let spacing = sample_rate as f64 / 2.0 / (n_bands + 1) as f64;
    (0..n_bands).map(|b| (b + 1) as f64 * spacing).collect()
}

/// Per-frame onset strength: positive log band-energy flux summed over
/// bands. Frame 0 has zero flux.
pub fn onset_strength(wave: &Waveform, fps: f64, n_bands: usize) -> Result<Vec<f64>> {
    let feats = band_energies(wave, fps, n_bands)?;
    let mut out = vec![0.0; feats.len()];
    for k in 1..feats.len() {
        let mut flux = 0.0;
        for b in 0..n_bands {
            flux += (feats[k][b] - feats[k - 1][b]).max(0.0);
        }
        out[k] = flux;
    }
    Ok(out)
}

/// Times (seconds) of local maxima of `values` that exceed
/// `threshold_mult` times the median value. Frame k maps to time k / fps.
pub fn peak_times(values: &[f64], fps: f64, threshold_mult: f64) -> Vec<f64> {
    if values.len() < 3 {
        return Vec::new();
    }
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = sorted[sorted.len() / 2];
    let thresh = threshold_mult * median;
    let mut out = Vec::new();
    for k in 1..values.len() - 1 {
        if values[k] > values[k - 1] && values[k] >= values[k + 1] && values[k] > thresh {
            out.push(k as f64 / fps);
        }
    }
    out
}
