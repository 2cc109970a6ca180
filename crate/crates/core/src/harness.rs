//! Experiment orchestration: synthetic data → tempograms → training →
//! calibration, for one configuration or a distribution × kind grid.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibrate::{
    calibration_curve, fit_calibration, fit_rms, log_spaced_tempi, read_curve_csv,
    save_calibration, write_curve_csv, CalibrationCurve, CalibrationMap, DEFAULT_K_INF,
};
use crate::error::{Error, Result};
use crate::io::{load_checkpoint, manifest_path, save_checkpoint};
use crate::nn::{init_params, AdamState, ModelConfig};
use crate::plot::{render_grid, write_svg, Panel};
use crate::pretext::{train, write_history, EpochStats, LossConfig, TrainConfig};
use crate::synth::{
    sample_tempi, synth_click_track, write_manifest, write_wav, ManifestRow, TempoDistribution,
    ANALYSIS_RATE,
};
use crate::tempogram::{log_tempogram, LogTempogram, TempogramConfig, TempogramKind};

/// Named scale presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// 50 × 30 s tracks, d = 16, every 8th frame: minutes on one core.
    Desk,
    /// 1000 × 60 s tracks, d = 64, every frame.
    Paper,
}

impl Profile {
    pub fn n_tracks(self) -> usize {
        match self {
            Profile::Desk => 50,
            Profile::Paper => 1000,
        }
    }

    pub fn track_seconds(self) -> f64 {
        match self {
            Profile::Desk => 30.0,
            Profile::Paper => 60.0,
        }
    }

    pub fn base_channels(self) -> usize {
        match self {
            Profile::Desk => 16,
            Profile::Paper => 64,
        }
    }

    pub fn frame_stride(self) -> usize {
        match self {
            Profile::Desk => 8,
            Profile::Paper => 1,
        }
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(Error::config(format!("unknown profile '{other}'"))),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Desk => "desk",
            Profile::Paper => "paper",
        })
    }
}

/// Optional overrides of the pretext loss; σ always follows the distribution's
/// tempo range and the log axis resolution.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossOverrides {
    pub delta: Option<f64>,
    pub w_t: Option<f64>,
    pub w_r: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSettings {
    #[serde(default = "default_k_inf")]
    pub k_inf: usize,
    #[serde(default = "default_cal_lo")]
    pub bpm_min: f64,
    #[serde(default = "default_cal_hi")]
    pub bpm_max: f64,
    #[serde(default = "default_cal_points")]
    pub points: usize,
    /// Click track length; defaults to the training track length.
    #[serde(default)]
    pub seconds: Option<f64>,
}

fn default_k_inf() -> usize {
    DEFAULT_K_INF
}
fn default_cal_lo() -> f64 {
    35.0
}
fn default_cal_hi() -> f64 {
    300.0
}
fn default_cal_points() -> usize {
    50
}

impl Default for CalibrationSettings {
    fn default() -> Self {
        Self {
            k_inf: default_k_inf(),
            bpm_min: default_cal_lo(),
            bpm_max: default_cal_hi(),
            points: default_cal_points(),
            seconds: None,
        }
    }
}

impl CalibrationSettings {
    pub fn tempi(&self) -> Vec<f64> {
        log_spaced_tempi(self.bpm_min, self.bpm_max, self.points)
    }
}

/// Everything needed to reproduce one trained and calibrated model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub name: String,
    pub output_dir: PathBuf,
    pub distribution: TempoDistribution,
    pub kind: TempogramKind,
    pub n_tracks: usize,
    pub track_seconds: f64,
    pub base_channels: usize,
    #[serde(default)]
    pub data_seed: u64,
    #[serde(default = "default_init_seed")]
    pub init_seed: u64,
    /// Also write every training track as WAV under `tracks/`.
    #[serde(default)]
    pub write_audio: bool,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub loss: LossOverrides,
    #[serde(default)]
    pub calibration: CalibrationSettings,
    #[serde(default)]
    pub tempogram: TempogramConfig,
}

fn default_init_seed() -> u64 {
    1
}

impl ExperimentSpec {
    /// Spec with the profile's scale and default hyperparameters.
    pub fn new(
        profile: Profile,
        distribution: TempoDistribution,
        kind: TempogramKind,
        output_dir: impl Into<PathBuf>,
        seed: u64,
    ) -> Self {
        Self {
            name: format!("{kind}_{}", distribution.label()),
            output_dir: output_dir.into(),
            distribution,
            kind,
            n_tracks: profile.n_tracks(),
            track_seconds: profile.track_seconds(),
            base_channels: profile.base_channels(),
            data_seed: seed,
            init_seed: seed.wrapping_add(1),
            write_audio: false,
            train: TrainConfig {
                seed: seed.wrapping_add(2),
                frame_stride: profile.frame_stride(),
                ..TrainConfig::default()
            },
            loss: LossOverrides::default(),
            calibration: CalibrationSettings::default(),
            tempogram: TempogramConfig::default(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: Self =
            toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = toml::to_string(self).map_err(|e| Error::config(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig::new(self.base_channels, 128)
    }

    pub fn loss_config(&self) -> Result<LossConfig> {
        let mut cfg = LossConfig::new(
            self.distribution.t_min,
            self.distribution.t_max,
            self.tempogram.log_axis.q,
        )?;
        if let Some(d) = self.loss.delta {
            cfg.delta = d;
        }
        if let Some(w) = self.loss.w_t {
            cfg.w_t = w;
        }
        if let Some(w) = self.loss.w_r {
            cfg.w_r = w;
        }
        Ok(cfg)
    }

    pub fn calibration_seconds(&self) -> f64 {
        self.calibration.seconds.unwrap_or(self.track_seconds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::config("experiment name is empty"));
        }
        self.distribution.validate()?;
        if self.n_tracks == 0 {
            return Err(Error::config("n_tracks must be positive"));
        }
        if !(self.track_seconds > self.tempogram.window_s / 2.0) || !self.track_seconds.is_finite()
        {
            return Err(Error::config(
                "track_seconds too short for the tempogram window",
            ));
        }
        self.model_config().validate()?;
        self.train.validate()?;
        self.loss_config()?.validate()?;
        if self.calibration.points < 2 {
            return Err(Error::config("calibration needs at least two tempi"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Ok,
    Failed,
}

/// Summary numbers, each recomputable from `curve.csv` and `calibration.toml`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Spearman ρ between true BPM and model output over [40, 240] BPM.
    pub spearman: f64,
    pub fit_residual: f64,
    pub saturation: Option<f64>,
    /// Saturation over the calibration tempi below 80 BPM.
    pub saturation_below_80: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedTrack {
    pub bpm: f64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub kind: TempogramKind,
    pub distribution: String,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed_stage: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// CLI exit code of the failure, 0 on success.
    pub exit_code: i32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration: Option<CalibrationMap>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<Metrics>,
    #[serde(default)]
    pub skipped_calibration_tracks: Vec<SkippedTrack>,
    /// Files written, relative to the output directory.
    pub files: Vec<String>,
    #[serde(skip)]
    pub spec: Option<ExperimentSpec>,
    #[serde(skip)]
    pub history: Vec<EpochStats>,
    #[serde(skip)]
    pub curve: Option<CalibrationCurve>,
}

pub const SPEC_FILE: &str = "spec.toml";
pub const TRACKS_FILE: &str = "tracks.csv";
pub const HISTORY_FILE: &str = "history.csv";
pub const CHECKPOINT_FILE: &str = "model.stem";
pub const CURVE_FILE: &str = "curve.csv";
pub const CALIBRATION_FILE: &str = "calibration.toml";
pub const REPORT_FILE: &str = "report.toml";

/// Fraction of adjacent pairs (sorted by BPM) whose outputs differ by less
/// than 1e-3.
pub fn saturation_metric(curve: &CalibrationCurve) -> Result<f64> {
    if curve.len() < 10 {
        return Err(Error::contract(format!(
            "saturation needs at least 10 points, got {}",
            curve.len()
        )));
    }
    let sorted = curve.clone().sorted();
    let flat = sorted
        .points
        .windows(2)
        .filter(|w| (w[1].t - w[0].t).abs() < 1e-3)
        .count();
    Ok(flat as f64 / (sorted.len() - 1) as f64)
}

/// Ranks starting at 1, ties sharing their average rank.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation; NaN when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::contract(
            "spearman needs two equal-length samples of size >= 2",
        ));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

pub fn curve_spearman(curve: &CalibrationCurve) -> Result<f64> {
    let x: Vec<f64> = curve.points.iter().map(|p| p.true_bpm).collect();
    let y: Vec<f64> = curve.points.iter().map(|p| p.t).collect();
    spearman(&x, &y)
}

pub fn compute_metrics(curve: &CalibrationCurve, map: &CalibrationMap) -> Result<Metrics> {
    Ok(Metrics {
        spearman: curve_spearman(&curve.restricted(40.0, 240.0))?,
        fit_residual: fit_rms(curve, map.a, map.b),
        saturation: saturation_metric(curve).ok(),
        saturation_below_80: saturation_metric(&curve.restricted(0.0, 80.0 - 1e-9)).ok(),
    })
}

/// Recomputes metrics from the persisted curve and calibration files.
pub fn metrics_from_artifacts(dir: impl AsRef<Path>) -> Result<Metrics> {
    let dir = dir.as_ref();
    let curve = read_curve_csv(dir.join(CURVE_FILE))?;
    let map = CalibrationMap::load(dir.join(CALIBRATION_FILE))?;
    compute_metrics(&curve, &map)
}

/// Keeps every `stride`-th frame.
fn subsample_frames(tg: LogTempogram, stride: usize) -> LogTempogram {
    if stride == 1 {
        return tg;
    }
    let values = tg.values.slice(ndarray::s![..;stride, ..]).to_owned();
    LogTempogram { values, ..tg }
}

struct StageError {
    stage: &'static str,
    error: Error,
}

fn stage<T>(name: &'static str, r: Result<T>) -> std::result::Result<T, StageError> {
    r.map_err(|error| StageError { stage: name, error })
}

fn run_stages(
    spec: &ExperimentSpec,
    report: &mut ExperimentReport,
) -> std::result::Result<(), StageError> {
    let dir = &spec.output_dir;

    let tempi = stage(
        "synth",
        sample_tempi(&spec.distribution, spec.n_tracks, spec.data_seed),
    )?;
    if spec.write_audio {
        stage(
            "synth",
            std::fs::create_dir_all(dir.join("tracks"))
                .map_err(|e| Error::io(dir.join("tracks"), e)),
        )?;
    }
    let manifest: Vec<ManifestRow> = tempi
        .iter()
        .enumerate()
        .map(|(i, &bpm)| ManifestRow {
            path: if spec.write_audio {
                format!("tracks/track_{i:04}.wav")
            } else {
                String::new()
            },
            bpm,
            distribution: spec.distribution.label(),
            seed: spec.data_seed.wrapping_add(i as u64),
        })
        .collect();
    stage("synth", write_manifest(dir.join(TRACKS_FILE), &manifest))?;

    let stride = spec.train.frame_stride;
    let dataset: Vec<LogTempogram> = stage(
        "tempogram",
        tempi
            .par_iter()
            .zip(manifest.par_iter())
            .map(|(&bpm, row)| {
                let audio = synth_click_track(bpm, spec.track_seconds, ANALYSIS_RATE)?;
                if spec.write_audio {
                    write_wav(dir.join(&row.path), &audio)?;
                }
                let tg = log_tempogram(&audio, spec.kind, &spec.tempogram)?;
                Ok(subsample_frames(tg, stride))
            })
            .collect::<Result<Vec<_>>>(),
    )?;

    let model_cfg = spec.model_config();
    let loss_cfg = stage("train", spec.loss_config())?;
    let mut params = stage("train", init_params(&model_cfg, spec.init_seed))?;
    let mut adam = AdamState::new(&params, spec.train.lr);
    // Frames were already subsampled above.
    let train_cfg = TrainConfig {
        frame_stride: 1,
        ..spec.train.clone()
    };
    let ckpt = dir.join(CHECKPOINT_FILE);
    let history_path = dir.join(HISTORY_FILE);
    let mut so_far = Vec::new();
    let trained = train(
        &dataset,
        &mut params,
        &mut adam,
        &loss_cfg,
        &train_cfg,
        |stats, p, a| {
            so_far.push(*stats);
            write_history(&history_path, &so_far)?;
            save_checkpoint(&ckpt, p, Some(a), stats.epoch)
        },
    );
    report.history = so_far;
    stage("train", trained)?;
    drop(dataset);

    // Calibrate the model as stored, so the CLI reproduces these numbers
    // from the checkpoint alone.
    let stored = stage("calibrate", load_checkpoint(&ckpt))?.params;
    let cal = &spec.calibration;
    let curve = stage(
        "calibrate",
        calibration_curve(
            &stored,
            spec.kind,
            &cal.tempi(),
            cal.k_inf,
            spec.calibration_seconds(),
            &spec.tempogram,
        ),
    )?;
    report.skipped_calibration_tracks = curve
        .skipped
        .iter()
        .map(|(bpm, reason)| SkippedTrack {
            bpm: *bpm,
            reason: reason.clone(),
        })
        .collect();
    let map = match fit_calibration(&curve, cal.k_inf) {
        Ok(m) => m,
        Err(e) => {
            report.curve = Some(curve);
            return Err(StageError {
                stage: "calibrate",
                error: e,
            });
        }
    };
    stage(
        "calibrate",
        write_curve_csv(dir.join(CURVE_FILE), &curve, &map),
    )?;
    stage(
        "calibrate",
        save_calibration(dir.join(CALIBRATION_FILE), &map, Some(spec.kind)),
    )?;
    report.metrics = Some(stage("metrics", compute_metrics(&curve, &map))?);
    report.calibration = Some(map);
    report.curve = Some(curve);
    Ok(())
}

/// Runs one experiment end to end, persisting every artifact in
/// `spec.output_dir`.
///
/// Stage failures do not return `Err`: the report is marked failed, keeps
/// whatever was produced, and is written to `report.toml`. `Err` means the
/// spec is invalid or the output directory is unusable.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentReport> {
    spec.validate()?;
    let dir = &spec.output_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    spec.save(dir.join(SPEC_FILE))?;
    log::info!("experiment {} → {}", spec.name, dir.display());

    let mut report = ExperimentReport {
        name: spec.name.clone(),
        kind: spec.kind,
        distribution: spec.distribution.label(),
        status: Status::Ok,
        failed_stage: None,
        error: None,
        exit_code: 0,
        calibration: None,
        metrics: None,
        skipped_calibration_tracks: Vec::new(),
        files: Vec::new(),
        spec: Some(spec.clone()),
        history: Vec::new(),
        curve: None,
    };
    if let Err(StageError { stage, error }) = run_stages(spec, &mut report) {
        log::error!("experiment {} failed during {stage}: {error}", spec.name);
        report.status = Status::Failed;
        report.failed_stage = Some(stage.to_string());
        report.exit_code = error.exit_code();
        report.error = Some(error.to_string());
    }
    let ckpt = dir.join(CHECKPOINT_FILE);
    let candidates = [
        SPEC_FILE.to_string(),
        TRACKS_FILE.to_string(),
        HISTORY_FILE.to_string(),
        CHECKPOINT_FILE.to_string(),
        manifest_path(&ckpt)
            .file_name()
            .unwrap()
            .to_string_lossy()
            .into_owned(),
        CURVE_FILE.to_string(),
        CALIBRATION_FILE.to_string(),
    ];
    report.files = candidates
        .into_iter()
        .filter(|f| dir.join(f).exists())
        .collect();
    if spec.write_audio && dir.join("tracks").is_dir() {
        report.files.push("tracks/".into());
    }
    report.files.push(REPORT_FILE.into());
    let text = toml::to_string(&report).map_err(|e| Error::config(e.to_string()))?;
    std::fs::write(dir.join(REPORT_FILE), text).map_err(|e| Error::io(dir.join(REPORT_FILE), e))?;
    Ok(report)
}

/// Grid description: every listed distribution crossed with every kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub output_dir: PathBuf,
    #[serde(default = "default_kinds")]
    pub kinds: Vec<TempogramKind>,
    pub distributions: Vec<TempoDistribution>,
    #[serde(default)]
    pub seed: u64,
    /// Overrides of the profile scale.
    #[serde(default)]
    pub n_tracks: Option<usize>,
    #[serde(default)]
    pub track_seconds: Option<f64>,
    #[serde(default)]
    pub base_channels: Option<usize>,
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default)]
    pub frame_stride: Option<usize>,
}

fn default_kinds() -> Vec<TempogramKind> {
    TempogramKind::ALL.to_vec()
}

impl GridConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    /// One spec per (kind, distribution), kinds outermost.
    pub fn specs(&self, profile: Profile) -> Vec<ExperimentSpec> {
        let mut out = Vec::new();
        for &kind in &self.kinds {
            for dist in &self.distributions {
                let name = format!("{kind}_{}", dist.label());
                let mut spec = ExperimentSpec::new(
                    profile,
                    *dist,
                    kind,
                    self.output_dir.join(&name),
                    self.seed,
                );
                if let Some(n) = self.n_tracks {
                    spec.n_tracks = n;
                }
                if let Some(s) = self.track_seconds {
                    spec.track_seconds = s;
                }
                if let Some(d) = self.base_channels {
                    spec.base_channels = d;
                }
                if let Some(e) = self.epochs {
                    spec.train.epochs = e;
                }
                if let Some(s) = self.frame_stride {
                    spec.train.frame_stride = s;
                }
                out.push(spec);
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct GridReport {
    pub reports: Vec<ExperimentReport>,
    pub svg: Option<PathBuf>,
    pub curves_csv: PathBuf,
    pub summary_csv: PathBuf,
}

impl GridReport {
    pub fn failures(&self) -> impl Iterator<Item = &ExperimentReport> {
        self.reports.iter().filter(|r| r.status == Status::Failed)
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GridCurveRow {
    pub experiment: String,
    pub kind: String,
    pub distribution: String,
    pub true_bpm: f64,
    pub model_output: f64,
    pub predicted_bpm: f64,
}

#[derive(Debug, Serialize)]
struct GridSummaryRow<'a> {
    experiment: &'a str,
    kind: &'a str,
    distribution: &'a str,
    status: &'a str,
    spearman: Option<f64>,
    fit_residual: Option<f64>,
    saturation: Option<f64>,
    saturation_below_80: Option<f64>,
    error: Option<&'a str>,
}

/// Panels (row = kind, column = distribution) from a combined curve CSV.
pub fn panels_from_rows(rows: &[GridCurveRow]) -> Vec<Panel> {
    let mut panels: Vec<Panel> = Vec::new();
    for r in rows {
        match panels
            .iter_mut()
            .find(|p| p.row == r.kind && p.col == r.distribution)
        {
            Some(p) => p.points.push((r.true_bpm, r.model_output)),
            None => panels.push(Panel {
                row: r.kind.clone(),
                col: r.distribution.clone(),
                points: vec![(r.true_bpm, r.model_output)],
            }),
        }
    }
    panels
}

pub fn read_grid_curves(path: impl AsRef<Path>) -> Result<Vec<GridCurveRow>> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

/// Runs every spec (in parallel), then writes `grid.svg`, `grid_curves.csv`
/// and `grid_summary.csv` into `output_dir`. Individual failures are
/// recorded, not propagated.
pub fn run_grid(specs: &[ExperimentSpec], output_dir: impl AsRef<Path>) -> Result<GridReport> {
    let out = output_dir.as_ref();
    if specs.is_empty() {
        return Err(Error::config("grid has no experiments"));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let reports: Vec<ExperimentReport> = specs
        .par_iter()
        .map(|spec| {
            run_experiment(spec).unwrap_or_else(|e| ExperimentReport {
                name: spec.name.clone(),
                kind: spec.kind,
                distribution: spec.distribution.label(),
                status: Status::Failed,
                failed_stage: Some("setup".into()),
                exit_code: e.exit_code(),
                error: Some(e.to_string()),
                calibration: None,
                metrics: None,
                skipped_calibration_tracks: Vec::new(),
                files: Vec::new(),
                spec: Some(spec.clone()),
                history: Vec::new(),
                curve: None,
            })
        })
        .collect();

    let curves_csv = out.join("grid_curves.csv");
    let mut rows = Vec::new();
    for r in &reports {
        if let (Some(curve), Some(map)) = (&r.curve, &r.calibration) {
            for p in &curve.points {
                rows.push(GridCurveRow {
                    experiment: r.name.clone(),
                    kind: r.kind.to_string(),
                    distribution: r.distribution.clone(),
                    true_bpm: p.true_bpm,
                    model_output: p.t,
                    predicted_bpm: map.bpm(p.t),
                });
            }
        }
    }
    let mut w = csv::Writer::from_path(&curves_csv)?;
    if rows.is_empty() {
        w.write_record([
            "experiment",
            "kind",
            "distribution",
            "true_bpm",
            "model_output",
            "predicted_bpm",
        ])?;
    }
    for row in &rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(&curves_csv, e))?;

    let summary_csv = out.join("grid_summary.csv");
    let mut w = csv::Writer::from_path(&summary_csv)?;
    for r in &reports {
        let kind = r.kind.to_string();
        w.serialize(GridSummaryRow {
            experiment: &r.name,
            kind: &kind,
            distribution: &r.distribution,
            status: match r.status {
                Status::Ok => "ok",
                Status::Failed => "failed",
            },
            spearman: r.metrics.map(|m| m.spearman),
            fit_residual: r.metrics.map(|m| m.fit_residual),
            saturation: r.metrics.and_then(|m| m.saturation),
            saturation_below_80: r.metrics.and_then(|m| m.saturation_below_80),
            error: r.error.as_deref(),
        })?;
    }
    w.flush().map_err(|e| Error::io(&summary_csv, e))?;

    let svg = if rows.is_empty() {
        None
    } else {
        let plot = render_grid(
            &panels_from_rows(&rows),
            "true tempo (BPM)",
            "model output t",
        )?;
        let path = out.join("grid.svg");
        write_svg(&path, &plot)?;
        Some(path)
    };
    Ok(GridReport {
        reports,
        svg,
        curves_csv,
        summary_csv,
    })
}
