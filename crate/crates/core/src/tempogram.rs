//! Fourier, autocorrelation and hybrid tempograms, and the logarithmic tempo axis.
//!
//! All tempograms are computed from a [`NoveltyCurve`] with a sliding window
//! (10 s by default) advanced by one novelty frame, so a tempogram has exactly
//! as many frames as its novelty curve. Linear tempograms share a common BPM
//! axis; [`to_log_axis`] then regroups that axis into bins centered at
//! `t0 * 2^(k / Q)`.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Zip};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::novelty::{novelty, NoveltyConfig, NoveltyCurve};
use crate::synth::AudioBuffer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TempogramKind {
    #[serde(rename = "acf", alias = "autocorrelation")]
    Autocorrelation,
    #[serde(rename = "fourier")]
    Fourier,
    #[serde(rename = "hybrid")]
    Hybrid,
}

impl TempogramKind {
    pub const ALL: [TempogramKind; 3] = [
        TempogramKind::Autocorrelation,
        TempogramKind::Fourier,
        TempogramKind::Hybrid,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            TempogramKind::Autocorrelation => "acf",
            TempogramKind::Fourier => "fourier",
            TempogramKind::Hybrid => "hybrid",
        }
    }
}

impl fmt::Display for TempogramKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TempogramKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "acf" | "autocorrelation" => Ok(TempogramKind::Autocorrelation),
            "fourier" => Ok(TempogramKind::Fourier),
            "hybrid" => Ok(TempogramKind::Hybrid),
            other => Err(Error::config(format!("unknown tempogram kind '{other}'"))),
        }
    }
}

/// Time × tempo salience on a linearly spaced BPM axis.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearTempogram {
    /// Frames along rows, tempo bins along columns.
    pub values: Array2<f64>,
    pub tempo_axis: Vec<f64>,
    pub frame_rate: f64,
    pub window_s: f64,
}

impl LinearTempogram {
    pub fn n_frames(&self) -> usize {
        self.values.nrows()
    }

    /// Salience at the axis bin nearest to `bpm`, averaged over frames.
    pub fn mean_salience_at(&self, bpm: f64) -> f64 {
        let idx = nearest_index(&self.tempo_axis, bpm);
        self.values.column(idx).mean().unwrap_or(0.0)
    }

    /// Divides by the global maximum so the largest value is 1. All-zero input is left as is.
    pub fn normalized(mut self) -> Self {
        let peak = self.values.iter().cloned().fold(0.0, f64::max);
        if peak > 0.0 {
            self.values.mapv_inplace(|v| v / peak);
        }
        self
    }
}

fn nearest_index(axis: &[f64], value: f64) -> usize {
    axis.iter()
        .enumerate()
        .min_by(|a, b| (a.1 - value).abs().total_cmp(&(b.1 - value).abs()))
        .map(|(i, _)| i)
        .unwrap_or(0)
}

/// `min..=max` in steps of `step` BPM.
pub fn linear_tempo_axis(min: f64, max: f64, step: f64) -> Vec<f64> {
    let n = ((max - min) / step + 1e-9).floor() as usize + 1;
    (0..n).map(|i| min + i as f64 * step).collect()
}

/// 25 to 320 BPM in 1-BPM steps.
pub fn default_tempo_axis() -> Vec<f64> {
    linear_tempo_axis(25.0, 320.0, 1.0)
}

fn window_frames(nov: &NoveltyCurve, window_s: f64) -> Result<usize> {
    if nov.is_empty() {
        return Err(Error::data("novelty curve is empty"));
    }
    if !(window_s > 0.0) || !(nov.frame_rate > 0.0) {
        return Err(Error::config(format!(
            "window ({window_s} s) and frame rate ({}) must be positive",
            nov.frame_rate
        )));
    }
    Ok(((window_s * nov.frame_rate).round() as usize).max(1))
}

fn check_axis(axis: &[f64]) -> Result<()> {
    if axis.is_empty() {
        return Err(Error::config("tempo axis is empty"));
    }
    if axis.iter().any(|t| !(*t > 0.0) || !t.is_finite()) {
        return Err(Error::config("tempo axis must be positive and finite"));
    }
    if axis.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::config("tempo axis must be strictly increasing"));
    }
    Ok(())
}

/// Symmetric Hann window of `n` points.
fn symmetric_hann(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Magnitude of the Hann-windowed correlation of the novelty curve with a
/// complex sinusoid at every axis tempo.
///
/// Each tempo row is a linear convolution of the demodulated novelty with the
/// window, done with FFTs; the novelty is implicitly zero outside its support.
pub fn fourier_tempogram(
    nov: &NoveltyCurve,
    window_s: f64,
    tempo_axis: &[f64],
) -> Result<LinearTempogram> {
    let n_win = window_frames(nov, window_s)?;
    check_axis(tempo_axis)?;
    let m = nov.len();
    let fft_len = (m + n_win - 1).next_power_of_two();
    let mut planner = FftPlanner::new();
    let forward = planner.plan_fft_forward(fft_len);
    let inverse = planner.plan_fft_inverse(fft_len);

    let mut window_spectrum = vec![Complex::new(0.0, 0.0); fft_len];
    for (dst, w) in window_spectrum.iter_mut().zip(symmetric_hann(n_win)) {
        *dst = Complex::new(w, 0.0);
    }
    forward.process(&mut window_spectrum);

    // Full-convolution index of output frame 0.
    let offset = n_win - 1 - n_win / 2;
    let scale = 1.0 / fft_len as f64;
    let mut values = Array2::zeros((m, tempo_axis.len()));
    let mut buf = vec![Complex::new(0.0, 0.0); fft_len];
    for (col, &bpm) in tempo_axis.iter().enumerate() {
        let omega = 2.0 * PI * (bpm / 60.0) / nov.frame_rate;
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for (n, (dst, &x)) in buf.iter_mut().zip(&nov.values).enumerate() {
            let phase = -omega * n as f64;
            *dst = Complex::new(x * phase.cos(), x * phase.sin());
        }
        forward.process(&mut buf);
        for (b, w) in buf.iter_mut().zip(&window_spectrum) {
            *b *= w;
        }
        inverse.process(&mut buf);
        for (frame, c) in buf[offset..offset + m].iter().enumerate() {
            values[[frame, col]] = c.norm() * scale;
        }
    }
    Ok(LinearTempogram {
        values,
        tempo_axis: tempo_axis.to_vec(),
        frame_rate: nov.frame_rate,
        window_s,
    })
}

/// Resamples one time-lag autocorrelation row onto a tempo axis.
///
/// `acf[lag]` is the value at lag `lag` (index 0 is the zero lag and is never
/// used). Lag `l` corresponds to `60 * frame_rate / l` BPM; the row is linearly
/// interpolated in the tempo domain between the two lags bracketing each axis
/// tempo. Axis tempi not bracketed by available lags get zero.
pub fn lag_row_to_tempo(acf: &[f64], frame_rate: f64, tempo_axis: &[f64]) -> Vec<f64> {
    let lag_tempo = |lag: usize| 60.0 * frame_rate / lag as f64;
    tempo_axis
        .iter()
        .map(|&bpm| {
            let exact_lag = 60.0 * frame_rate / bpm;
            let lo = exact_lag.floor() as usize;
            if lo < 1 || lo >= acf.len() {
                return 0.0;
            }
            if exact_lag == lo as f64 {
                return acf[lo];
            }
            if lo + 1 >= acf.len() {
                return 0.0;
            }
            let (t_hi, t_lo) = (lag_tempo(lo), lag_tempo(lo + 1));
            let w = (t_hi - bpm) / (t_hi - t_lo);
            (1.0 - w) * acf[lo] + w * acf[lo + 1]
        })
        .collect()
}

/// Short-time autocorrelation of the novelty curve, mapped from lag to tempo.
///
/// For every frame the rectangular-windowed segment centered on it is
/// autocorrelated, divided by its zero-lag value, and interpolated onto
/// `tempo_axis` with [`lag_row_to_tempo`]. Only the lags needed to bracket the
/// axis are evaluated; the others would be discarded.
pub fn autocorr_tempogram(
    nov: &NoveltyCurve,
    window_s: f64,
    tempo_axis: &[f64],
) -> Result<LinearTempogram> {
    let n_win = window_frames(nov, window_s)?;
    check_axis(tempo_axis)?;
    let m = nov.len();
    let slowest = tempo_axis[0];
    let max_lag = ((60.0 * nov.frame_rate / slowest).floor() as usize + 1).min(n_win - 1);

    // prefix[lag][i] = sum_{j < i} x[j] * x[j + lag]
    let x = &nov.values;
    let prefix: Vec<Vec<f64>> = (0..=max_lag)
        .map(|lag| {
            let mut p = Vec::with_capacity(m + 1);
            p.push(0.0);
            let mut acc = 0.0;
            for j in 0..m {
                if j + lag < m {
                    acc += x[j] * x[j + lag];
                }
                p.push(acc);
            }
            p
        })
        .collect();

    let half = n_win / 2;
    let mut values = Array2::zeros((m, tempo_axis.len()));
    let mut acf = vec![0.0; max_lag + 1];
    for frame in 0..m {
        // Window covers [start, start + n_win) in padded coordinates.
        let start = frame as isize - half as isize;
        let end = start + n_win as isize;
        for (lag, a) in acf.iter_mut().enumerate() {
            // Pairs (j, j + lag) with both inside the window and inside the signal.
            let lo = start.max(0) as usize;
            let hi = (end - lag as isize).min(m as isize - lag as isize);
            *a = if hi > lo as isize {
                prefix[lag][hi as usize] - prefix[lag][lo]
            } else {
                0.0
            };
        }
        let zero = acf[0];
        if zero > 0.0 {
            acf.iter_mut().for_each(|a| *a /= zero);
            let row = lag_row_to_tempo(&acf, nov.frame_rate, tempo_axis);
            for (dst, v) in values.row_mut(frame).iter_mut().zip(row) {
                *dst = v.max(0.0);
            }
        }
    }
    Ok(LinearTempogram {
        values,
        tempo_axis: tempo_axis.to_vec(),
        frame_rate: nov.frame_rate,
        window_s,
    })
}

/// Elementwise product of an autocorrelation and a Fourier tempogram.
pub fn hybrid_tempogram(ta: &LinearTempogram, tf: &LinearTempogram) -> Result<LinearTempogram> {
    if ta.values.dim() != tf.values.dim() {
        return Err(Error::contract(format!(
            "tempogram shapes differ: {:?} vs {:?}",
            ta.values.dim(),
            tf.values.dim()
        )));
    }
    let same_axis = ta.tempo_axis.len() == tf.tempo_axis.len()
        && ta
            .tempo_axis
            .iter()
            .zip(&tf.tempo_axis)
            .all(|(a, b)| a.to_bits() == b.to_bits());
    if !same_axis {
        return Err(Error::contract("tempogram axes differ"));
    }
    let mut values = Array2::zeros(ta.values.dim());
    Zip::from(&mut values)
        .and(&ta.values)
        .and(&tf.values)
        .for_each(|h, &a, &f| *h = a * f);
    Ok(LinearTempogram {
        values,
        tempo_axis: ta.tempo_axis.clone(),
        frame_rate: ta.frame_rate,
        window_s: ta.window_s,
    })
}

/// Logarithmic tempo axis: bin `k` centered at `t0 * 2^(k / q)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogAxis {
    pub t0: f64,
    pub q: f64,
    pub bins: usize,
}

impl Default for LogAxis {
    fn default() -> Self {
        Self {
            t0: 25.0,
            q: 40.0,
            bins: 146,
        }
    }
}

impl LogAxis {
    pub fn center(&self, k: f64) -> f64 {
        self.t0 * (k / self.q).exp2()
    }

    pub fn centers(&self) -> Vec<f64> {
        log_bin_centers(self.t0, self.q, self.bins)
    }

    /// Fractional bin position of a tempo.
    pub fn position(&self, bpm: f64) -> f64 {
        self.q * (bpm / self.t0).log2()
    }
}

pub fn log_bin_centers(t0: f64, q: f64, bins: usize) -> Vec<f64> {
    (0..bins).map(|k| t0 * (k as f64 / q).exp2()).collect()
}

/// Time × tempo salience on the logarithmic axis.
#[derive(Debug, Clone, PartialEq)]
pub struct LogTempogram {
    /// Frames along rows, log-tempo bins along columns.
    pub values: Array2<f64>,
    pub axis: LogAxis,
    pub frame_rate: f64,
}

impl LogTempogram {
    pub fn n_frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_bins(&self) -> usize {
        self.values.ncols()
    }

    /// Index of the strongest bin in `frame`.
    pub fn argmax_bin(&self, frame: usize) -> usize {
        self.values
            .row(frame)
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0)
    }
}

enum BinSource {
    Mean(Vec<usize>),
    Interp { lo: usize, w: f64 },
}

/// Regroups a linear tempogram onto `bins` logarithmic bins.
///
/// Bin `k` averages the linear bins whose tempo lies in
/// `[t0 * 2^((k - 0.5) / q), t0 * 2^((k + 0.5) / q))`. Where that interval holds
/// no linear bin, the linear row is interpolated at the bin center instead.
pub fn to_log_axis(lin: &LinearTempogram, t0: f64, q: f64, bins: usize) -> Result<LogTempogram> {
    if bins == 0 || !(t0 > 0.0) || !(q > 0.0) {
        return Err(Error::config(format!(
            "invalid log axis t0={t0} q={q} bins={bins}"
        )));
    }
    let axis = &lin.tempo_axis;
    check_axis(axis)?;
    let top = t0 * (bins as f64 / q).exp2();
    if axis[0] > t0 || *axis.last().unwrap() < top {
        return Err(Error::config(format!(
            "linear axis [{}, {}] does not cover [{t0}, {top:.2}]",
            axis[0],
            axis.last().unwrap()
        )));
    }

    let sources: Vec<BinSource> = (0..bins)
        .map(|k| {
            let lo = t0 * ((k as f64 - 0.5) / q).exp2();
            let hi = t0 * ((k as f64 + 0.5) / q).exp2();
            let members: Vec<usize> = axis
                .iter()
                .enumerate()
                .filter(|(_, &t)| t >= lo && t < hi)
                .map(|(i, _)| i)
                .collect();
            if !members.is_empty() {
                return BinSource::Mean(members);
            }
            let center = t0 * (k as f64 / q).exp2();
            // Largest index with axis[i] <= center; coverage check keeps it in range.
            let i = axis.partition_point(|&t| t <= center).saturating_sub(1);
            let i = i.min(axis.len() - 2);
            let w = (center - axis[i]) / (axis[i + 1] - axis[i]);
            BinSource::Interp { lo: i, w }
        })
        .collect();

    let mut values = Array2::zeros((lin.n_frames(), bins));
    for (mut out, row) in values.rows_mut().into_iter().zip(lin.values.rows()) {
        for (dst, src) in out.iter_mut().zip(&sources) {
            *dst = match src {
                BinSource::Mean(idx) => idx.iter().map(|&i| row[i]).sum::<f64>() / idx.len() as f64,
                BinSource::Interp { lo, w } => (1.0 - w) * row[*lo] + w * row[lo + 1],
            };
        }
    }
    Ok(LogTempogram {
        values,
        axis: LogAxis { t0, q, bins },
        frame_rate: lin.frame_rate,
    })
}

/// Everything needed to go from audio to a log tempogram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TempogramConfig {
    #[serde(default)]
    pub novelty: NoveltyConfig,
    #[serde(default = "default_window_s")]
    pub window_s: f64,
    #[serde(default = "default_tempo_axis")]
    pub tempo_axis: Vec<f64>,
    #[serde(default)]
    pub log_axis: LogAxis,
}

fn default_window_s() -> f64 {
    10.0
}

impl Default for TempogramConfig {
    fn default() -> Self {
        Self {
            novelty: NoveltyConfig::default(),
            window_s: default_window_s(),
            tempo_axis: default_tempo_axis(),
            log_axis: LogAxis::default(),
        }
    }
}

/// The three linear tempograms of one track, each peak-normalized before the
/// hybrid product is taken.
#[derive(Debug, Clone)]
pub struct TempogramSet {
    pub autocorrelation: LinearTempogram,
    pub fourier: LinearTempogram,
    pub hybrid: LinearTempogram,
}

impl TempogramSet {
    pub fn compute(nov: &NoveltyCurve, cfg: &TempogramConfig) -> Result<Self> {
        let autocorrelation = autocorr_tempogram(nov, cfg.window_s, &cfg.tempo_axis)?.normalized();
        let fourier = fourier_tempogram(nov, cfg.window_s, &cfg.tempo_axis)?.normalized();
        let hybrid = hybrid_tempogram(&autocorrelation, &fourier)?;
        Ok(Self {
            autocorrelation,
            fourier,
            hybrid,
        })
    }

    pub fn get(&self, kind: TempogramKind) -> &LinearTempogram {
        match kind {
            TempogramKind::Autocorrelation => &self.autocorrelation,
            TempogramKind::Fourier => &self.fourier,
            TempogramKind::Hybrid => &self.hybrid,
        }
    }
}

/// Peak-normalized linear tempogram of one kind. Computes only what `kind` needs.
pub fn linear_tempogram(
    nov: &NoveltyCurve,
    kind: TempogramKind,
    cfg: &TempogramConfig,
) -> Result<LinearTempogram> {
    match kind {
        TempogramKind::Fourier => {
            Ok(fourier_tempogram(nov, cfg.window_s, &cfg.tempo_axis)?.normalized())
        }
        TempogramKind::Autocorrelation => {
            Ok(autocorr_tempogram(nov, cfg.window_s, &cfg.tempo_axis)?.normalized())
        }
        TempogramKind::Hybrid => Ok(TempogramSet::compute(nov, cfg)?.hybrid),
    }
}

/// Audio → novelty → linear tempogram → log tempogram.
pub fn log_tempogram(
    audio: &AudioBuffer,
    kind: TempogramKind,
    cfg: &TempogramConfig,
) -> Result<LogTempogram> {
    let nov = novelty(audio, &cfg.novelty)?;
    let lin = linear_tempogram(&nov, kind, cfg)?;
    to_log_axis(&lin, cfg.log_axis.t0, cfg.log_axis.q, cfg.log_axis.bins)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synth_click_track, ANALYSIS_RATE};

    const FRAME_RATE: f64 = 22050.0 / 512.0;

    fn cosine_novelty(hz: f64, seconds: f64) -> NoveltyCurve {
        let n = (seconds * FRAME_RATE) as usize;
        NoveltyCurve {
            values: (0..n)
                .map(|i| 0.5 + 0.5 * (2.0 * PI * hz * i as f64 / FRAME_RATE).cos())
                .collect(),
            frame_rate: FRAME_RATE,
        }
    }

    fn click_novelty(bpm: f64, seconds: f64) -> NoveltyCurve {
        let audio = synth_click_track(bpm, seconds, ANALYSIS_RATE).unwrap();
        novelty(&audio, &NoveltyConfig::default()).unwrap()
    }

    fn interior(n: usize, window_s: f64) -> std::ops::Range<usize> {
        let half = (window_s * FRAME_RATE / 2.0).ceil() as usize;
        half..n - half
    }

    fn row_argmax(t: &LinearTempogram, frame: usize) -> f64 {
        let row = t.values.row(frame);
        let i = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        t.tempo_axis[i]
    }

    #[test]
    fn log_centers_golden() {
        assert_eq!(log_bin_centers(25.0, 40.0, 1), vec![25.0]);
        let c = log_bin_centers(25.0, 40.0, 146);
        assert_eq!(c[0], 25.0);
        // Published values are truncated to one decimal.
        let shown = |v: f64| (v * 10.0).floor() / 10.0;
        assert_eq!(shown(c[11]), 30.2);
        assert_eq!(shown(c[18]), 34.1);
        assert_eq!(shown(c[138]), 273.2);
        assert_eq!(shown(c[145]), 308.4);
        assert!((c[18] - 25.0 * (18.0f64 / 40.0).exp2()).abs() < 1e-12);
    }

    #[test]
    fn fourier_cosine_peaks_at_its_tempo() {
        let nov = cosine_novelty(2.0, 30.0);
        let t = fourier_tempogram(&nov, 10.0, &default_tempo_axis()).unwrap();
        assert_eq!(t.n_frames(), nov.len());
        for f in interior(nov.len(), 10.0) {
            assert_eq!(row_argmax(&t, f), 120.0, "frame {f}");
        }
    }

    #[test]
    fn zero_novelty_gives_zero_tempograms() {
        let nov = NoveltyCurve {
            values: vec![0.0; 500],
            frame_rate: FRAME_RATE,
        };
        let axis = default_tempo_axis();
        let f = fourier_tempogram(&nov, 10.0, &axis).unwrap();
        let a = autocorr_tempogram(&nov, 10.0, &axis).unwrap();
        assert!(f.values.iter().all(|&v| v == 0.0));
        assert!(a.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_novelty_is_data_error() {
        let nov = NoveltyCurve {
            values: vec![],
            frame_rate: FRAME_RATE,
        };
        assert!(matches!(
            fourier_tempogram(&nov, 10.0, &default_tempo_axis()),
            Err(Error::Data(_))
        ));
        assert!(matches!(
            autocorr_tempogram(&nov, 10.0, &default_tempo_axis()),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn lag_interpolation_peaks_at_nearest_bin() {
        let axis = default_tempo_axis();
        // Lags up to 50 are spaced more than 1 BPM apart, so every lag is
        // bracketed by axis bins; beyond that the axis undersamples the lags.
        for lag0 in 9usize..=50 {
            let mut acf = vec![0.0; 110];
            acf[lag0] = 1.0;
            let row = lag_row_to_tempo(&acf, FRAME_RATE, &axis);
            let best = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            let target = 60.0 * FRAME_RATE / lag0 as f64;
            // Near a tie the bin on the steeper side of the interpolant wins.
            assert!((axis[best] - target).abs() < 1.0, "lag {lag0}");
            assert!(
                best.abs_diff(nearest_index(&axis, target)) <= 1,
                "lag {lag0}"
            );
        }
    }

    #[test]
    fn autocorr_click_60_has_subharmonic() {
        let nov = click_novelty(60.0, 30.0);
        let t = autocorr_tempogram(&nov, 10.0, &default_tempo_axis()).unwrap();
        assert!(t.tempo_axis == default_tempo_axis());
        let range = interior(nov.len(), 10.0);
        let mean_at = |bpm: f64| -> f64 {
            let i = nearest_index(&t.tempo_axis, bpm);
            range.clone().map(|f| t.values[[f, i]]).sum::<f64>() / range.len() as f64
        };
        assert!(mean_at(30.0) > mean_at(90.0));
        for f in range.clone().step_by(50) {
            let peak = row_argmax(&t, f);
            // The 60 BPM lag and its multiples (30 BPM) tie closely; both are pulse periods.
            assert!(
                (peak - 60.0).abs() <= 1.0 || (peak - 30.0).abs() <= 1.0,
                "frame {f}: {peak}"
            );
        }
    }

    #[test]
    fn fourier_90_has_harmonic_not_subharmonic() {
        let nov = click_novelty(90.0, 30.0);
        let axis = default_tempo_axis();
        let f = fourier_tempogram(&nov, 10.0, &axis).unwrap();
        assert!(f.mean_salience_at(180.0) > f.mean_salience_at(45.0));
        let a = autocorr_tempogram(&nov, 10.0, &axis).unwrap();
        assert!(a.mean_salience_at(45.0) > a.mean_salience_at(180.0));
    }

    #[test]
    fn hybrid_suppresses_unshared_periodicities() {
        let nov = click_novelty(90.0, 30.0);
        let set = TempogramSet::compute(&nov, &TempogramConfig::default()).unwrap();
        let h = &set.hybrid;
        let ratio =
            |t: &LinearTempogram, bpm: f64| t.mean_salience_at(bpm) / t.mean_salience_at(90.0);
        assert!(ratio(h, 180.0) < ratio(&set.fourier, 180.0));
        assert!(ratio(h, 45.0) < ratio(&set.autocorrelation, 45.0));
        assert!(h.mean_salience_at(90.0) > h.mean_salience_at(180.0));
        assert!(h.mean_salience_at(90.0) > h.mean_salience_at(45.0));
    }

    #[test]
    fn hybrid_identity_and_zero() {
        let nov = cosine_novelty(1.5, 12.0);
        let axis = default_tempo_axis();
        let tf = fourier_tempogram(&nov, 10.0, &axis).unwrap();
        let ones = LinearTempogram {
            values: Array2::ones(tf.values.dim()),
            ..tf.clone()
        };
        assert_eq!(hybrid_tempogram(&ones, &tf).unwrap().values, tf.values);
        let zeros = LinearTempogram {
            values: Array2::zeros(tf.values.dim()),
            ..tf.clone()
        };
        assert!(hybrid_tempogram(&zeros, &tf)
            .unwrap()
            .values
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn hybrid_rejects_mismatch() {
        let nov = cosine_novelty(1.5, 12.0);
        let tf = fourier_tempogram(&nov, 10.0, &default_tempo_axis()).unwrap();
        let other = fourier_tempogram(&nov, 10.0, &linear_tempo_axis(25.0, 320.0, 0.5)).unwrap();
        assert!(matches!(
            hybrid_tempogram(&tf, &other),
            Err(Error::Contract(_))
        ));
        let mut shifted = tf.clone();
        shifted.tempo_axis[3] += 0.25;
        assert!(matches!(
            hybrid_tempogram(&tf, &shifted),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn log_axis_requires_coverage() {
        let nov = cosine_novelty(1.5, 12.0);
        let tf = fourier_tempogram(&nov, 10.0, &linear_tempo_axis(30.0, 320.0, 1.0)).unwrap();
        assert!(matches!(
            to_log_axis(&tf, 25.0, 40.0, 146),
            Err(Error::Config(_))
        ));
        let tf = fourier_tempogram(&nov, 10.0, &linear_tempo_axis(25.0, 300.0, 1.0)).unwrap();
        assert!(matches!(
            to_log_axis(&tf, 25.0, 40.0, 146),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn log_axis_mean_and_interpolation() {
        // A row that is linear in tempo is reproduced exactly at every log center
        // by interpolation; mean bins land on the mean tempo of their members.
        let axis = default_tempo_axis();
        let lin = LinearTempogram {
            values: Array2::from_shape_fn((2, axis.len()), |(_, j)| axis[j]),
            tempo_axis: axis.clone(),
            frame_rate: FRAME_RATE,
            window_s: 10.0,
        };
        let log = to_log_axis(&lin, 25.0, 40.0, 146).unwrap();
        let centers = log_bin_centers(25.0, 40.0, 146);
        for k in 0..146 {
            let v = log.values[[0, k]];
            let lo = 25.0 * ((k as f64 - 0.5) / 40.0).exp2();
            let hi = 25.0 * ((k as f64 + 0.5) / 40.0).exp2();
            let members: Vec<f64> = axis
                .iter()
                .cloned()
                .filter(|&t| t >= lo && t < hi)
                .collect();
            let expect = if members.is_empty() {
                centers[k]
            } else {
                members.iter().sum::<f64>() / members.len() as f64
            };
            assert!((v - expect).abs() < 1e-9, "bin {k}: {v} vs {expect}");
        }
    }

    #[test]
    fn fourier_log_argmax_tracks_tempo() {
        let cfg = TempogramConfig::default();
        for bpm in [60.0, 90.0, 150.0] {
            let audio = synth_click_track(bpm, 30.0, ANALYSIS_RATE).unwrap();
            let log = log_tempogram(&audio, TempogramKind::Fourier, &cfg).unwrap();
            let range = interior(log.n_frames(), 10.0);
            let hits = range
                .clone()
                .filter(|&f| {
                    let center = log.axis.center(log.argmax_bin(f) as f64);
                    (center / bpm).log2().abs() * 40.0 <= 1.0
                })
                .count();
            assert!(
                hits as f64 >= 0.9 * range.len() as f64,
                "bpm {bpm}: {hits}/{}",
                range.len()
            );
        }
    }

    #[test]
    fn stretching_novelty_shifts_log_argmax() {
        let cfg = TempogramConfig::default();
        let base_hz = 1.6;
        let base = cosine_novelty(base_hz, 30.0);
        let base_log = to_log_axis(
            &fourier_tempogram(&base, 10.0, &cfg.tempo_axis).unwrap(),
            25.0,
            40.0,
            146,
        )
        .unwrap();
        let mid = base.len() / 2;
        let b0 = base_log.argmax_bin(mid) as i64;
        for alpha in [0.8f64, 1.25, 1.5, 0.6] {
            // Stretch in time by alpha: frequency divides by alpha.
            let stretched = cosine_novelty(base_hz / alpha, 30.0);
            let lin = fourier_tempogram(&stretched, 10.0, &cfg.tempo_axis).unwrap();
            let log = to_log_axis(&lin, 25.0, 40.0, 146).unwrap();
            let shift = log.argmax_bin(mid) as i64 - b0;
            let expect = -(40.0 * alpha.log2()).round() as i64;
            assert!(
                (shift - expect).abs() <= 1,
                "alpha {alpha}: {shift} vs {expect}"
            );
        }
    }

    #[test]
    fn kind_parsing() {
        assert_eq!(
            "acf".parse::<TempogramKind>().unwrap(),
            TempogramKind::Autocorrelation
        );
        assert_eq!(
            "Fourier".parse::<TempogramKind>().unwrap(),
            TempogramKind::Fourier
        );
        assert!(matches!(
            "cqt".parse::<TempogramKind>(),
            Err(Error::Config(_))
        ));
    }
}
