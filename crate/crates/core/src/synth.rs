//! Synthetic metronome data and audio ingestion.
//!
//! Tempo draws come from a [`TempoDistribution`]; each draw becomes one click
//! track of constant tempo. Real recordings can be brought in through
//! [`load_wav`], which downmixes, resamples to [`ANALYSIS_RATE`] and
//! peak-normalizes.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sample rate every analysis stage works at.
pub const ANALYSIS_RATE: u32 = 22050;

/// Click waveform: decaying 1 kHz burst.
const CLICK_SECONDS: f64 = 0.010;
const CLICK_FREQ_HZ: f64 = 1000.0;
const CLICK_AMPLITUDE: f64 = 0.9;
const CLICK_DECAY_SECONDS: f64 = 0.002;

/// Half-width of the resampling kernel, in zero crossings of the sinc.
const RESAMPLE_ZEROS: f64 = 16.0;
const KAISER_BETA: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistributionKind {
    LogNormal,
    LogUniform,
}

/// Distribution of per-track tempi, in BPM.
///
/// `mu` and `sigma` only matter for [`DistributionKind::LogNormal`]; there the
/// draw is `2^N(log2(mu), sigma^2)`. `t_min`/`t_max` bound the log-uniform
/// support and double as the nominal training range for either kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TempoDistribution {
    pub kind: DistributionKind,
    #[serde(default = "default_mu")]
    pub mu: f64,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default = "default_t_min")]
    pub t_min: f64,
    #[serde(default = "default_t_max")]
    pub t_max: f64,
}

fn default_mu() -> f64 {
    120.0
}
fn default_sigma() -> f64 {
    0.25
}
fn default_t_min() -> f64 {
    30.0
}
fn default_t_max() -> f64 {
    240.0
}

impl TempoDistribution {
    pub fn log_normal(mu: f64, sigma: f64) -> Self {
        Self {
            kind: DistributionKind::LogNormal,
            mu,
            sigma,
            t_min: default_t_min(),
            t_max: default_t_max(),
        }
    }

    pub fn log_uniform(t_min: f64, t_max: f64) -> Self {
        Self {
            kind: DistributionKind::LogUniform,
            mu: (t_min * t_max).sqrt(),
            sigma: default_sigma(),
            t_min,
            t_max,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.mu, self.sigma, self.t_min, self.t_max]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::config(
                "tempo distribution has non-finite parameters",
            ));
        }
        if self.t_min <= 0.0 || self.t_max <= self.t_min {
            return Err(Error::config(format!(
                "tempo range must satisfy 0 < t_min < t_max, got [{}, {}]",
                self.t_min, self.t_max
            )));
        }
        if self.kind == DistributionKind::LogNormal && (self.sigma <= 0.0 || self.mu <= 0.0) {
            return Err(Error::config(format!(
                "log-normal needs mu > 0 and sigma > 0, got mu={} sigma={}",
                self.mu, self.sigma
            )));
        }
        Ok(())
    }

    /// Short identifier without commas, used in manifests and file names.
    pub fn label(&self) -> String {
        match self.kind {
            DistributionKind::LogNormal => format!("lognormal-mu{}-s{}", self.mu, self.sigma),
            DistributionKind::LogUniform => format!("loguniform-{}-{}", self.t_min, self.t_max),
        }
    }
}

impl fmt::Display for TempoDistribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// Geometric interpolation between `t_min` and `t_max` at position `i` in `[0, 1)`.
pub fn log_uniform_at(t_min: f64, t_max: f64, i: f64) -> f64 {
    t_min * (t_max / t_min).powf(i)
}

/// Draws `n` tempi from `dist`. Deterministic for a fixed seed.
pub fn sample_tempi(dist: &TempoDistribution, n: usize, seed: u64) -> Result<Vec<f64>> {
    dist.validate()?;
    if n == 0 {
        return Err(Error::config("cannot sample zero tempi"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tempi = match dist.kind {
        DistributionKind::LogNormal => {
            let normal = Normal::new(dist.mu.log2(), dist.sigma)
                .map_err(|e| Error::config(format!("log-normal: {e}")))?;
            (0..n).map(|_| normal.sample(&mut rng).exp2()).collect()
        }
        DistributionKind::LogUniform => (0..n)
            .map(|_| log_uniform_at(dist.t_min, dist.t_max, rng.random::<f64>()))
            .collect(),
    };
    Ok(tempi)
}

/// Mono audio at a fixed sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::config("sample rate must be positive"));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::data("audio contains non-finite samples"));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Sample indices of every click onset in a track of the given length.
pub fn click_onsets(bpm: f64, duration_s: f64, sample_rate: u32) -> Vec<usize> {
    let period = 60.0 / bpm;
    let n_samples = (duration_s * sample_rate as f64).round() as usize;
    (0..)
        .map(|k| k as f64 * period)
        .take_while(|t| *t < duration_s)
        .map(|t| (t * sample_rate as f64).round() as usize)
        .filter(|&i| i < n_samples)
        .collect()
}

/// Renders a constant-tempo metronome: one click at every multiple of `60/bpm` seconds.
pub fn synth_click_track(bpm: f64, duration_s: f64, sample_rate: u32) -> Result<AudioBuffer> {
    if !(bpm > 0.0 && bpm.is_finite()) {
        return Err(Error::config(format!("bpm must be positive, got {bpm}")));
    }
    if !(duration_s > 0.0 && duration_s.is_finite()) {
        return Err(Error::config(format!(
            "duration must be positive, got {duration_s}"
        )));
    }
    if sample_rate == 0 {
        return Err(Error::config("sample rate must be positive"));
    }
    if 60.0 / bpm < CLICK_SECONDS {
        return Err(Error::config(format!(
            "{bpm} BPM leaves less than one click length between onsets"
        )));
    }

    let sr = sample_rate as f64;
    let click: Vec<f32> = (0..(CLICK_SECONDS * sr).round() as usize)
        .map(|i| {
            let t = i as f64 / sr;
            (CLICK_AMPLITUDE
                * (-t / CLICK_DECAY_SECONDS).exp()
                * (2.0 * PI * CLICK_FREQ_HZ * t).sin()) as f32
        })
        .collect();

    let n_samples = (duration_s * sr).round() as usize;
    let mut samples = vec![0.0f32; n_samples];
    for onset in click_onsets(bpm, duration_s, sample_rate) {
        for (dst, &c) in samples[onset..].iter_mut().zip(&click) {
            *dst = c;
        }
    }
    AudioBuffer::new(samples, sample_rate)
}

/// Reads a PCM WAV (16-bit int or 32-bit float, mono or stereo), downmixes,
/// resamples to [`ANALYSIS_RATE`] and scales the peak to 1.
pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioBuffer> {
    let path = path.as_ref();
    let mut reader = hound::WavReader::open(path).map_err(|e| wav_error(path, e))?;
    let spec = reader.spec();
    if spec.channels == 0 || spec.channels > 2 {
        return Err(Error::format(
            path,
            format!("unsupported channel count {}", spec.channels),
        ));
    }
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_error(path, e))?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_error(path, e))?,
        (fmt, bits) => {
            return Err(Error::format(
                path,
                format!("unsupported sample format {fmt:?} with {bits} bits"),
            ))
        }
    };
    if interleaved.is_empty() {
        return Err(Error::data(format!("{} contains no audio", path.display())));
    }
    let mono: Vec<f32> = if spec.channels == 2 {
        interleaved
            .chunks_exact(2)
            .map(|ch| 0.5 * (ch[0] + ch[1]))
            .collect()
    } else {
        interleaved
    };
    if mono.iter().any(|s| !s.is_finite()) {
        return Err(Error::data(format!(
            "{} contains non-finite samples",
            path.display()
        )));
    }

    let mut samples = if spec.sample_rate == ANALYSIS_RATE {
        mono
    } else {
        resample(&mono, spec.sample_rate, ANALYSIS_RATE)
    };
    peak_normalize(&mut samples);
    AudioBuffer::new(samples, ANALYSIS_RATE)
}

fn wav_error(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    }
}

/// Scales so the largest absolute sample is 1. Silence is left untouched.
pub fn peak_normalize(samples: &mut [f32]) {
    let peak = samples.iter().fold(0.0f32, |m, s| m.max(s.abs()));
    if peak > 0.0 {
        for s in samples.iter_mut() {
            *s /= peak;
        }
    }
}

/// Writes 16-bit PCM mono.
pub fn write_wav(path: impl AsRef<Path>, audio: &AudioBuffer) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: audio.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| wav_error(path, e))?;
    for &s in &audio.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer.write_sample(v).map_err(|e| wav_error(path, e))?;
    }
    writer.finalize().map_err(|e| wav_error(path, e))
}

/// Band-limited resampling with a Kaiser-windowed sinc kernel.
pub fn resample(input: &[f32], from_rate: u32, to_rate: u32) -> Vec<f32> {
    if from_rate == to_rate || input.is_empty() {
        return input.to_vec();
    }
    let ratio = to_rate as f64 / from_rate as f64;
    let cutoff = ratio.min(1.0);
    let half_width = RESAMPLE_ZEROS / cutoff;
    let i0_beta = bessel_i0(KAISER_BETA);
    let out_len = ((input.len() as f64) * ratio).round() as usize;

    (0..out_len)
        .map(|n| {
            let center = n as f64 / ratio;
            let lo = (center - half_width).ceil().max(0.0) as usize;
            let hi = ((center + half_width).floor() as usize).min(input.len() - 1);
            let mut acc = 0.0;
            for (k, &x) in input.iter().enumerate().take(hi + 1).skip(lo) {
                let d = center - k as f64;
                let u = d / half_width;
                let window = bessel_i0(KAISER_BETA * (1.0 - u * u).max(0.0).sqrt()) / i0_beta;
                acc += x as f64 * cutoff * sinc(cutoff * d) * window;
            }
            acc as f32
        })
        .collect()
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = PI * x;
        px.sin() / px
    }
}

/// Modified Bessel function of the first kind, order zero (power series).
fn bessel_i0(x: f64) -> f64 {
    let half_sq = 0.25 * x * x;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..64 {
        term *= half_sq / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

/// One dataset manifest row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub path: String,
    pub bpm: f64,
    pub distribution: String,
    pub seed: u64,
}

pub fn write_manifest(path: impl AsRef<Path>, rows: &[ManifestRow]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRow>> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

/// Tempi plus rendered tracks for a whole synthetic dataset.
///
/// Track `i` uses tempo `tempi[i]`; the per-track seed recorded in the
/// manifest is `seed + i`.
pub fn synth_dataset(
    dist: &TempoDistribution,
    n_tracks: usize,
    seconds: f64,
    seed: u64,
) -> Result<Vec<(f64, AudioBuffer)>> {
    sample_tempi(dist, n_tracks, seed)?
        .into_iter()
        .map(|bpm| synth_click_track(bpm, seconds, ANALYSIS_RATE).map(|a| (bpm, a)))
        .collect()
}
