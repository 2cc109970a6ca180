//! Spectral-flux novelty curve.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::AudioBuffer;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoveltyConfig {
    pub window: usize,
    pub hop: usize,
    /// Log-compression factor in `log(1 + gamma * |X|)`.
    pub gamma: f64,
}

impl Default for NoveltyConfig {
    fn default() -> Self {
        Self {
            window: 2048,
            hop: 512,
            gamma: 100.0,
        }
    }
}

impl NoveltyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 || self.window <= self.hop {
            return Err(Error::config(format!(
                "need window > hop > 0, got window={} hop={}",
                self.window, self.hop
            )));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::config(format!(
                "gamma must be positive, got {}",
                self.gamma
            )));
        }
        Ok(())
    }
}

/// Magnitude STFT, frames along rows.
#[derive(Debug, Clone)]
pub struct Spectrogram {
    pub magnitudes: Array2<f64>,
    pub sample_rate: u32,
    pub hop: usize,
}

impl Spectrogram {
    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / self.hop as f64
    }
}

/// Onset-strength signal, one value per STFT frame, scaled into `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoveltyCurve {
    pub values: Vec<f64>,
    pub frame_rate: f64,
}

impl NoveltyCurve {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["frame_index", "value"])?;
        for (i, v) in self.values.iter().enumerate() {
            w.write_record([i.to_string(), v.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn periodic_hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Hann-windowed magnitude STFT with centered frames.
///
/// The signal is reflect-padded by `window / 2` on both sides so that frame
/// `f` is centered on sample `f * hop`. Produces `ceil(len / hop)` frames of
/// `window / 2 + 1` bins.
pub fn stft_magnitude(audio: &AudioBuffer, cfg: &NoveltyConfig) -> Result<Spectrogram> {
    cfg.validate()?;
    let len = audio.samples.len();
    if len < cfg.window {
        return Err(Error::data(format!(
            "audio has {len} samples, shorter than one {}-sample window",
            cfg.window
        )));
    }
    let pad = cfg.window / 2;
    let mut padded = Vec::with_capacity(len + 2 * pad);
    padded.extend((1..=pad).rev().map(|i| audio.samples[i] as f64));
    padded.extend(audio.samples.iter().map(|&s| s as f64));
    padded.extend((0..pad).map(|i| audio.samples[len - 2 - i] as f64));

    let n_frames = len.div_ceil(cfg.hop);
    let n_bins = cfg.window / 2 + 1;
    let window = periodic_hann(cfg.window);
    let fft = FftPlanner::new().plan_fft_forward(cfg.window);
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.window];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];

    let mut magnitudes = Array2::zeros((n_frames, n_bins));
    for (f, mut row) in magnitudes.rows_mut().into_iter().enumerate() {
        let start = f * cfg.hop;
        for ((b, &x), &w) in buf
            .iter_mut()
            .zip(&padded[start..start + cfg.window])
            .zip(&window)
        {
            *b = Complex::new(x * w, 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (m, c) in row.iter_mut().zip(&buf) {
            *m = c.norm();
        }
    }
    Ok(Spectrogram {
        magnitudes,
        sample_rate: audio.sample_rate,
        hop: cfg.hop,
    })
}

/// Half-wave rectified frame difference of the log-compressed spectrogram,
/// summed over all bins and divided by its global maximum.
pub fn spectral_flux(spec: &Spectrogram, cfg: &NoveltyConfig) -> Result<NoveltyCurve> {
    cfg.validate()?;
    if spec.magnitudes.iter().any(|&m| !(m >= 0.0)) {
        return Err(Error::data("spectrogram must be nonnegative and finite"));
    }
    let compressed = spec.magnitudes.mapv(|m| (cfg.gamma * m).ln_1p());
    let n = compressed.nrows();
    let mut values = vec![0.0; n];
    for f in 1..n {
        values[f] = compressed
            .row(f)
            .iter()
            .zip(compressed.row(f - 1))
            .map(|(cur, prev)| (cur - prev).max(0.0))
            .sum();
    }
    let peak = values.iter().cloned().fold(0.0, f64::max);
    if peak > 0.0 {
        values.iter_mut().for_each(|v| *v /= peak);
    }
    Ok(NoveltyCurve {
        values,
        frame_rate: spec.frame_rate(),
    })
}

/// `stft_magnitude` followed by `spectral_flux`.
pub fn novelty(audio: &AudioBuffer, cfg: &NoveltyConfig) -> Result<NoveltyCurve> {
    spectral_flux(&stft_magnitude(audio, cfg)?, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synth_click_track, ANALYSIS_RATE};

    fn tone(freq: f64, seconds: f64) -> AudioBuffer {
        let n = (seconds * ANALYSIS_RATE as f64) as usize;
        let s = (0..n)
            .map(|i| (2.0 * PI * freq * i as f64 / ANALYSIS_RATE as f64).sin() as f32 * 0.5)
            .collect();
        AudioBuffer::new(s, ANALYSIS_RATE).unwrap()
    }

    #[test]
    fn silence_gives_zero_spectrum_and_flux() {
        let cfg = NoveltyConfig::default();
        let audio = AudioBuffer::new(vec![0.0; ANALYSIS_RATE as usize], ANALYSIS_RATE).unwrap();
        let spec = stft_magnitude(&audio, &cfg).unwrap();
        assert!(spec.magnitudes.iter().all(|&m| m == 0.0));
        assert_eq!(
            spec.magnitudes.nrows(),
            (ANALYSIS_RATE as usize).div_ceil(512)
        );
        assert_eq!(spec.magnitudes.ncols(), 1025);
        let nov = spectral_flux(&spec, &cfg).unwrap();
        assert!(nov.values.iter().all(|&v| v == 0.0));
        assert_eq!(nov.len(), spec.magnitudes.nrows());
    }

    #[test]
    fn sine_peaks_in_expected_bin() {
        let cfg = NoveltyConfig::default();
        let spec = stft_magnitude(&tone(1000.0, 1.0), &cfg).unwrap();
        let expected = (1000.0f64 * 2048.0 / 22050.0).round() as usize;
        assert_eq!(expected, 93);
        let n = spec.magnitudes.nrows();
        for row in spec.magnitudes.rows().into_iter().skip(3).take(n - 6) {
            let arg = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(arg, expected);
        }
    }

    #[test]
    fn impulse_train_is_broadband_at_impulses() {
        let cfg = NoveltyConfig::default();
        let n = 2 * ANALYSIS_RATE as usize;
        let mut s = vec![0.0f32; n];
        // 2 Hz impulse train, placed on frame centers.
        for k in 0..4 {
            s[k * 11 * 512] = 1.0;
        }
        let audio = AudioBuffer::new(s, ANALYSIS_RATE).unwrap();
        let spec = stft_magnitude(&audio, &cfg).unwrap();
        for k in 0..4usize {
            let row = spec.magnitudes.row(k * 11);
            // A centered impulse has a flat spectrum equal to the window peak.
            assert!(row.iter().all(|&m| m > 0.5), "frame {}", k * 11);
        }
        // Frames far from any impulse are silent.
        assert!(spec.magnitudes.row(5).iter().all(|&m| m < 1e-12));
    }

    #[test]
    fn constant_spectrogram_has_no_flux() {
        let cfg = NoveltyConfig::default();
        let spec = Spectrogram {
            magnitudes: Array2::from_elem((20, 1025), 0.7),
            sample_rate: ANALYSIS_RATE,
            hop: 512,
        };
        let nov = spectral_flux(&spec, &cfg).unwrap();
        assert!(nov.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_flux_peaks_at_its_frame() {
        let cfg = NoveltyConfig::default();
        let mut m = Array2::zeros((30, 16));
        m.row_mut(12).fill(1.0);
        let spec = Spectrogram {
            magnitudes: m,
            sample_rate: ANALYSIS_RATE,
            hop: 512,
        };
        let nov = spectral_flux(&spec, &cfg).unwrap();
        assert_eq!(nov.values[12], 1.0);
        assert!(nov
            .values
            .iter()
            .enumerate()
            .all(|(i, &v)| i == 12 || v == 0.0));
        assert!((nov.frame_rate - 22050.0 / 512.0).abs() < 1e-12);
    }

    #[test]
    fn short_audio_rejected() {
        let audio = AudioBuffer::new(vec![0.1; 1000], ANALYSIS_RATE).unwrap();
        assert!(matches!(
            stft_magnitude(&audio, &NoveltyConfig::default()),
            Err(Error::Data(_))
        ));
    }

    fn strongest_lag(values: &[f64], max_lag: usize) -> usize {
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let c: Vec<f64> = values.iter().map(|v| v - mean).collect();
        let acf = |lag: usize| -> f64 { c.iter().zip(&c[lag..]).map(|(a, b)| a * b).sum() };
        (5..=max_lag)
            .max_by(|&a, &b| acf(a).partial_cmp(&acf(b)).unwrap())
            .unwrap()
    }

    #[test]
    fn click_track_novelty_period() {
        let cfg = NoveltyConfig::default();
        for bpm in [120.0, 90.0, 150.0] {
            let audio = synth_click_track(bpm, 20.0, ANALYSIS_RATE).unwrap();
            let nov = novelty(&audio, &cfg).unwrap();
            assert!(nov.values.iter().all(|v| (0.0..=1.0).contains(v)));
            let expected = nov.frame_rate * 60.0 / bpm;
            let lag = strongest_lag(&nov.values, (expected * 1.5) as usize);
            assert!(
                (lag as f64 - expected).abs() <= 1.0,
                "bpm {bpm}: lag {lag} vs {expected}"
            );
        }
    }

    #[test]
    fn scaled_input_stays_normalized() {
        let cfg = NoveltyConfig::default();
        let audio = synth_click_track(100.0, 5.0, ANALYSIS_RATE).unwrap();
        let spec = stft_magnitude(&audio, &cfg).unwrap();
        let base = spectral_flux(&spec, &cfg).unwrap();
        let same = spectral_flux(
            &Spectrogram {
                magnitudes: spec.magnitudes.mapv(|m| m * 1.0),
                ..spec.clone()
            },
            &cfg,
        )
        .unwrap();
        assert_eq!(base, same);
        for c in [0.01, 3.0, 50.0] {
            let scaled = Spectrogram {
                magnitudes: spec.magnitudes.mapv(|m| m * c),
                ..spec.clone()
            };
            let nov = spectral_flux(&scaled, &cfg).unwrap();
            assert!(nov.values.iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(nov.values.iter().cloned().fold(0.0, f64::max), 1.0);
        }
    }
}
