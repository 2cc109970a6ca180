//! Mapping the model's scalar output to BPM, and inference on tempograms.

use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{encoder_forward, ModelParams};
use crate::pretext::{SHIFT_MAX, SHIFT_MIN};
use crate::synth::{synth_click_track, ANALYSIS_RATE};
use crate::tempogram::{log_tempogram, LogAxis, LogTempogram, TempogramConfig, TempogramKind};

pub const DEFAULT_K_INF: usize = 14;

/// Affine map `log2(bpm) = a * t + b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationMap {
    pub a: f64,
    pub b: f64,
    pub k_inf: usize,
    /// RMS residual of the fit, in log2 BPM.
    pub fit_residual: f64,
}

impl CalibrationMap {
    pub fn validate(&self) -> Result<()> {
        if !self.a.is_finite() || !self.b.is_finite() || !self.fit_residual.is_finite() {
            return Err(Error::numerical("calibration coefficients are not finite"));
        }
        check_k_inf(self.k_inf)
    }

    pub fn bpm(&self, t: f64) -> f64 {
        (self.a * t + self.b).exp2()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_calibration(path, self, None)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(load_calibration(path)?.0)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CalibrationFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kind: Option<TempogramKind>,
    #[serde(flatten)]
    map: CalibrationMap,
}

/// Writes the map as `key = value` lines, optionally tagged with the
/// tempogram kind it was fitted on.
pub fn save_calibration(
    path: impl AsRef<Path>,
    map: &CalibrationMap,
    kind: Option<TempogramKind>,
) -> Result<()> {
    let path = path.as_ref();
    let file = CalibrationFile { kind, map: *map };
    let text = toml::to_string(&file).map_err(|e| Error::config(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_calibration(path: impl AsRef<Path>) -> Result<(CalibrationMap, Option<TempogramKind>)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: CalibrationFile =
        toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    file.map.validate()?;
    Ok((file.map, file.kind))
}

fn check_k_inf(k_inf: usize) -> Result<()> {
    if !(SHIFT_MIN..=SHIFT_MAX).contains(&k_inf) {
        return Err(Error::config(format!(
            "k_inf must lie in {SHIFT_MIN}..={SHIFT_MAX}, got {k_inf}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPoint {
    pub true_bpm: f64,
    pub t: f64,
}

/// Median model output per calibration track, plus the tracks that failed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CalibrationCurve {
    pub points: Vec<CalibrationPoint>,
    pub skipped: Vec<(f64, String)>,
}

impl CalibrationCurve {
    pub fn from_points(points: Vec<CalibrationPoint>) -> Self {
        Self {
            points,
            skipped: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn sorted(mut self) -> Self {
        self.points
            .sort_by(|p, q| p.true_bpm.total_cmp(&q.true_bpm));
        self
    }

    /// Points with `lo <= true_bpm <= hi`.
    pub fn restricted(&self, lo: f64, hi: f64) -> Self {
        Self::from_points(
            self.points
                .iter()
                .copied()
                .filter(|p| p.true_bpm >= lo && p.true_bpm <= hi)
                .collect(),
        )
    }
}

/// `n` log-spaced tempi from `lo` to `hi` inclusive.
pub fn log_spaced_tempi(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => (0..n)
            .map(|i| lo * (hi / lo).powf(i as f64 / (n - 1) as f64))
            .collect(),
    }
}

/// The 50-point grid over [35, 300] BPM.
pub fn default_calibration_tempi() -> Vec<f64> {
    log_spaced_tempi(35.0, 300.0, 50)
}

/// Tempo span covered by some training slice: from the lowest bin of the
/// smallest offset to the highest bin of the largest.
pub fn representable_range(axis: &LogAxis, slice_len: usize) -> (f64, f64) {
    (
        axis.center(SHIFT_MIN as f64),
        axis.center((SHIFT_MAX + slice_len - 1) as f64),
    )
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Model output for the slice at `k_inf` of every frame.
pub fn frame_outputs(params: &ModelParams, logtg: &LogTempogram, k_inf: usize) -> Result<Vec<f64>> {
    check_k_inf(k_inf)?;
    let len = params.config.encoder.input_len;
    if logtg.n_bins() < k_inf + len {
        return Err(Error::config(format!(
            "log tempogram has {} bins, slice at {k_inf} needs {}",
            logtg.n_bins(),
            k_inf + len
        )));
    }
    if logtg.n_frames() == 0 {
        return Err(Error::data("log tempogram has no frames"));
    }
    const CHUNK: usize = 256;
    let mut out = Vec::with_capacity(logtg.n_frames());
    let slices = logtg.values.slice(ndarray::s![.., k_inf..k_inf + len]);
    for start in (0..logtg.n_frames()).step_by(CHUNK) {
        let end = (start + CHUNK).min(logtg.n_frames());
        let x: Array2<f64> = slices.slice(ndarray::s![start..end, ..]).to_owned();
        out.extend(encoder_forward(params, x.view())?.0);
    }
    Ok(out)
}

/// Median output over the frames of one synthetic click track.
pub fn click_track_output(
    params: &ModelParams,
    kind: TempogramKind,
    bpm: f64,
    seconds: f64,
    k_inf: usize,
    cfg: &TempogramConfig,
) -> Result<f64> {
    let audio = synth_click_track(bpm, seconds, ANALYSIS_RATE)?;
    let logtg = log_tempogram(&audio, kind, cfg)?;
    let outputs = frame_outputs(params, &logtg, k_inf)?;
    median(&outputs).ok_or_else(|| Error::data("no frames"))
}

/// Runs click tracks at `tempi` through the pipeline and the encoder.
///
/// Tracks that fail are listed in `skipped` instead of aborting the curve.
pub fn calibration_curve(
    params: &ModelParams,
    kind: TempogramKind,
    tempi: &[f64],
    k_inf: usize,
    seconds: f64,
    cfg: &TempogramConfig,
) -> Result<CalibrationCurve> {
    check_k_inf(k_inf)?;
    let (lo, hi) = representable_range(&cfg.log_axis, params.config.encoder.input_len);
    if let Some(&bad) = tempi.iter().find(|&&b| !(b >= lo && b <= hi)) {
        return Err(Error::config(format!(
            "calibration tempo {bad} outside representable range [{lo:.2}, {hi:.2}]"
        )));
    }
    let results: Vec<(f64, Result<f64>)> = tempi
        .par_iter()
        .map(|&bpm| {
            (
                bpm,
                click_track_output(params, kind, bpm, seconds, k_inf, cfg),
            )
        })
        .collect();
    let mut curve = CalibrationCurve::default();
    for (bpm, r) in results {
        match r {
            Ok(t) => curve.points.push(CalibrationPoint { true_bpm: bpm, t }),
            Err(e) => {
                log::warn!("calibration track at {bpm} BPM skipped: {e}");
                curve.skipped.push((bpm, e.to_string()));
            }
        }
    }
    Ok(curve)
}

/// Least-squares fit of `log2(bpm) = a * t + b`.
pub fn fit_calibration(curve: &CalibrationCurve, k_inf: usize) -> Result<CalibrationMap> {
    check_k_inf(k_inf)?;
    let n = curve.points.len();
    if n < 2 {
        return Err(Error::numerical("calibration needs at least two points"));
    }
    let nf = n as f64;
    let mean_t = curve.points.iter().map(|p| p.t).sum::<f64>() / nf;
    let mean_y = curve.points.iter().map(|p| p.true_bpm.log2()).sum::<f64>() / nf;
    let (mut stt, mut sty) = (0.0, 0.0);
    for p in &curve.points {
        let dt = p.t - mean_t;
        stt += dt * dt;
        sty += dt * (p.true_bpm.log2() - mean_y);
    }
    if !(stt > 1e-24 * nf) {
        return Err(Error::numerical(
            "calibration curve is constant in the model output",
        ));
    }
    let a = sty / stt;
    let b = mean_y - a * mean_t;
    let map = CalibrationMap {
        a,
        b,
        k_inf,
        fit_residual: fit_rms(curve, a, b),
    };
    map.validate()?;
    Ok(map)
}

/// RMS of `log2(bpm) - (a t + b)` over the curve.
pub fn fit_rms(curve: &CalibrationCurve, a: f64, b: f64) -> f64 {
    let ss: f64 = curve
        .points
        .iter()
        .map(|p| {
            let r = p.true_bpm.log2() - (a * p.t + b);
            r * r
        })
        .sum();
    (ss / curve.points.len() as f64).sqrt()
}

/// Per-frame BPM and their median.
pub fn predict_bpm(
    params: &ModelParams,
    cal: &CalibrationMap,
    logtg: &LogTempogram,
) -> Result<(Vec<f64>, f64)> {
    cal.validate()?;
    let per_frame: Vec<f64> = frame_outputs(params, logtg, cal.k_inf)?
        .into_iter()
        .map(|t| cal.bpm(t))
        .collect();
    if per_frame.iter().any(|b| !(b.is_finite() && *b > 0.0)) {
        return Err(Error::numerical(
            "calibrated tempo is not positive and finite",
        ));
    }
    let global = median(&per_frame).unwrap();
    Ok((per_frame, global))
}

#[derive(Debug, Serialize, Deserialize)]
struct CurveRow {
    true_bpm: f64,
    model_output: f64,
    predicted_bpm: f64,
}

pub fn write_curve_csv(
    path: impl AsRef<Path>,
    curve: &CalibrationCurve,
    cal: &CalibrationMap,
) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for p in &curve.points {
        w.serialize(CurveRow {
            true_bpm: p.true_bpm,
            model_output: p.t,
            predicted_bpm: cal.bpm(p.t),
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_curve_csv(path: impl AsRef<Path>) -> Result<CalibrationCurve> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    let points = r
        .deserialize::<CurveRow>()
        .map(|row| {
            row.map(|row| CalibrationPoint {
                true_bpm: row.true_bpm,
                t: row.model_output,
            })
            .map_err(Error::from)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CalibrationCurve::from_points(points))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ModelConfig;
    use proptest::prelude::*;

    fn line_curve(a: f64, b: f64, tempi: &[f64]) -> CalibrationCurve {
        CalibrationCurve::from_points(
            tempi
                .iter()
                .map(|&bpm| CalibrationPoint {
                    true_bpm: bpm,
                    t: (bpm.log2() - b) / a,
                })
                .collect(),
        )
    }

    #[test]
    fn default_grid() {
        let g = default_calibration_tempi();
        assert_eq!(g.len(), 50);
        assert!((g[0] - 35.0).abs() < 1e-12 && (g[49] - 300.0).abs() < 1e-9);
        let r = g[1] / g[0];
        assert!(g.windows(2).all(|w| (w[1] / w[0] - r).abs() < 1e-12));
        let (lo, hi) = representable_range(&LogAxis::default(), 128);
        assert!(lo <= 35.0 && hi >= 300.0, "{lo} {hi}");
    }

    #[test]
    fn exact_line_recovered() {
        let curve = line_curve(3.0, 5.0, &default_calibration_tempi());
        let map = fit_calibration(&curve, 14).unwrap();
        assert!((map.a - 3.0).abs() < 1e-9);
        assert!((map.b - 5.0).abs() < 1e-9);
        assert!(map.fit_residual < 1e-9);
    }

    #[test]
    fn two_points_interpolate() {
        let curve = CalibrationCurve::from_points(vec![
            CalibrationPoint {
                true_bpm: 60.0,
                t: 0.2,
            },
            CalibrationPoint {
                true_bpm: 180.0,
                t: 0.7,
            },
        ]);
        let map = fit_calibration(&curve, 14).unwrap();
        assert!(map.fit_residual < 1e-12);
        assert!((map.bpm(0.2) - 60.0).abs() < 1e-9);
        assert!((map.bpm(0.7) - 180.0).abs() < 1e-9);
    }

    #[test]
    fn alternating_perturbation_keeps_slope() {
        // The ±eps pattern is nearly orthogonal to t, so the slope moves by
        // O(eps / n) only.
        let eps = 1e-3;
        let mut curve = line_curve(2.5, 4.0, &default_calibration_tempi());
        for (i, p) in curve.points.iter_mut().enumerate() {
            p.t += if i % 2 == 0 { eps } else { -eps };
        }
        let map = fit_calibration(&curve, 14).unwrap();
        assert!((map.a - 2.5).abs() < 10.0 * eps, "{}", map.a);
    }

    #[test]
    fn constant_curve_is_degenerate() {
        let curve = CalibrationCurve::from_points(
            default_calibration_tempi()
                .into_iter()
                .map(|bpm| CalibrationPoint {
                    true_bpm: bpm,
                    t: 0.5,
                })
                .collect(),
        );
        assert!(matches!(
            fit_calibration(&curve, 14),
            Err(Error::Numerical(_))
        ));
        assert!(matches!(
            fit_calibration(&CalibrationCurve::default(), 14),
            Err(Error::Numerical(_))
        ));
        assert!(matches!(fit_calibration(&curve, 19), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn fit_is_least_squares(seed in 0u64..1000, da in -0.5f64..0.5, db in -0.5f64..0.5) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let curve = CalibrationCurve::from_points(
                default_calibration_tempi()
                    .into_iter()
                    .map(|bpm| CalibrationPoint { true_bpm: bpm, t: rng.random::<f64>() })
                    .collect(),
            );
            let map = fit_calibration(&curve, 14).unwrap();
            prop_assert!(fit_rms(&curve, map.a + da, map.b + db) >= map.fit_residual - 1e-12);
        }

        #[test]
        fn bpm_monotone_in_t(a in 0.1f64..10.0, b in 3.0f64..8.0, t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
            prop_assume!(t1 < t2);
            let map = CalibrationMap { a, b, k_inf: 14, fit_residual: 0.0 };
            prop_assert!(map.bpm(t1) < map.bpm(t2));
            prop_assert!(map.bpm(t1) > 0.0);
        }
    }

    #[test]
    fn zero_slope_predicts_constant() {
        let params = ModelParams::zeros(&ModelConfig::new(2, 16)).unwrap();
        let logtg = LogTempogram {
            values: Array2::from_shape_fn((5, 40), |(f, k)| ((f * k) % 7) as f64 / 7.0),
            axis: LogAxis {
                t0: 25.0,
                q: 40.0,
                bins: 40,
            },
            frame_rate: 43.0,
        };
        let map = CalibrationMap {
            a: 0.0,
            b: 7.0,
            k_inf: 14,
            fit_residual: 0.0,
        };
        let (frames, global) = predict_bpm(&params, &map, &logtg).unwrap();
        assert_eq!(frames, vec![128.0; 5]);
        assert_eq!(global, 128.0);
        let narrow = LogTempogram {
            values: Array2::zeros((5, 29)),
            axis: LogAxis {
                t0: 25.0,
                q: 40.0,
                bins: 29,
            },
            frame_rate: 43.0,
        };
        assert!(matches!(
            predict_bpm(&params, &map, &narrow),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn constant_model_gives_flat_curve() {
        let params = ModelParams::zeros(&ModelConfig::new(2, 128)).unwrap();
        let tempi = [60.0, 100.0, 200.0];
        let curve = calibration_curve(
            &params,
            TempogramKind::Fourier,
            &tempi,
            14,
            12.0,
            &TempogramConfig::default(),
        )
        .unwrap();
        assert_eq!(curve.len(), 3);
        assert!(curve.points.iter().all(|p| p.t == 0.5));
        assert!(curve.skipped.is_empty());
        assert!(matches!(
            calibration_curve(
                &params,
                TempogramKind::Fourier,
                &[20.0],
                14,
                12.0,
                &TempogramConfig::default()
            ),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn map_and_curve_files() {
        let dir = tempfile::tempdir().unwrap();
        let map = CalibrationMap {
            a: 3.25,
            b: 4.5,
            k_inf: 14,
            fit_residual: 0.01,
        };
        map.save(dir.path().join("cal.toml")).unwrap();
        assert_eq!(
            CalibrationMap::load(dir.path().join("cal.toml")).unwrap(),
            map
        );
        save_calibration(dir.path().join("k.toml"), &map, Some(TempogramKind::Hybrid)).unwrap();
        let text = std::fs::read_to_string(dir.path().join("k.toml")).unwrap();
        assert!(text.contains("kind = \"hybrid\""));
        assert_eq!(
            load_calibration(dir.path().join("k.toml")).unwrap(),
            (map, Some(TempogramKind::Hybrid))
        );

        let curve = line_curve(3.25, 4.5, &[40.0, 80.0, 160.0]);
        let p = dir.path().join("curve.csv");
        write_curve_csv(&p, &curve, &map).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("true_bpm,model_output,predicted_bpm\n"));
        let back = read_curve_csv(&p).unwrap();
        assert_eq!(back, curve);

        std::fs::write(
            dir.path().join("bad.toml"),
            "a = 1.0\nb = 2.0\nk_inf = 30\nfit_residual = 0.0\n",
        )
        .unwrap();
        assert!(matches!(
            CalibrationMap::load(dir.path().join("bad.toml")),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn median_values() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }
}
