use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use selftempo::calibrate::{
    calibration_curve, fit_calibration, load_calibration, log_spaced_tempi, predict_bpm,
    save_calibration, write_curve_csv, DEFAULT_K_INF,
};
use selftempo::harness::{
    panels_from_rows, read_grid_curves, run_experiment, run_grid, ExperimentSpec, GridConfig,
    Profile, Status,
};
use selftempo::io::{load_checkpoint, save_tempogram, write_tempogram_csv};
use selftempo::novelty::novelty;
use selftempo::plot::{render_grid, write_svg, Panel};
use selftempo::synth::{
    load_wav, sample_tempi, synth_click_track, write_manifest, write_wav, ManifestRow,
    TempoDistribution, ANALYSIS_RATE,
};
use selftempo::tempogram::{linear_tempogram, to_log_axis, TempogramConfig, TempogramKind};
use selftempo::{Error, Result};

#[derive(Parser)]
#[command(
    name = "selftempo",
    version,
    about = "Self-supervised tempo estimation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum DistArg {
    Lognormal,
    Loguniform,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Acf,
    Fourier,
    Hybrid,
}

impl From<KindArg> for TempogramKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Acf => TempogramKind::Autocorrelation,
            KindArg::Fourier => TempogramKind::Fourier,
            KindArg::Hybrid => TempogramKind::Hybrid,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Desk,
    Paper,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic click-track dataset as WAV files plus manifest.csv.
    Synth {
        #[arg(long, value_enum)]
        dist: DistArg,
        #[arg(long, default_value_t = 120.0)]
        mu: f64,
        #[arg(long, default_value_t = 0.25)]
        sigma: f64,
        #[arg(long, default_value_t = 30.0)]
        t_min: f64,
        #[arg(long, default_value_t = 240.0)]
        t_max: f64,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 60.0)]
        seconds: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compute tempograms for a WAV file or every WAV in a directory.
    Tempogram {
        #[arg(long, value_enum)]
        kind: KindArg,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Resample onto the logarithmic tempo axis.
        #[arg(long)]
        log_axis: bool,
        /// Also write a long-format CSV for plotting.
        #[arg(long)]
        csv: bool,
    },
    /// Run one experiment from a TOML spec: synthesize, train, calibrate.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the spec's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit a calibration map for a checkpoint on synthetic clicks.
    Calibrate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum)]
        kind: KindArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_K_INF)]
        k_inf: usize,
        #[arg(long, default_value_t = 30.0)]
        seconds: f64,
        #[arg(long, default_value_t = 50)]
        points: usize,
        #[arg(long, default_value_t = 35.0)]
        bpm_min: f64,
        #[arg(long, default_value_t = 300.0)]
        bpm_max: f64,
    },
    /// Estimate the tempo of a WAV file or every WAV in a directory.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        calib: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        /// Tempogram kind; defaults to the one recorded in the calibration file.
        #[arg(long, value_enum)]
        kind: Option<KindArg>,
    },
    /// Run the distribution × tempogram grid described by a TOML file.
    Grid {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value = "desk")]
        profile: ProfileArg,
    },
    /// Plot a curve CSV (single curve or combined grid) as SVG.
    Plot {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn wav_inputs(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(input)
            .map_err(|e| Error::Io {
                path: input.into(),
                source: e,
            })?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Data(format!("no .wav files in {}", input.display())));
        }
        Ok(files)
    } else {
        Ok(vec![input.to_path_buf()])
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.into(),
        source: e,
    })
}

fn synth(dist: TempoDistribution, n: usize, seconds: f64, out: &Path, seed: u64) -> Result<()> {
    let tempi = sample_tempi(&dist, n, seed)?;
    create_dir(out)?;
    let mut rows = Vec::with_capacity(n);
    for (i, bpm) in tempi.into_iter().enumerate() {
        let name = format!("track_{i:04}.wav");
        let audio = synth_click_track(bpm, seconds, ANALYSIS_RATE)?;
        write_wav(out.join(&name), &audio)?;
        rows.push(ManifestRow {
            path: name,
            bpm,
            distribution: dist.label(),
            seed: seed.wrapping_add(i as u64),
        });
    }
    write_manifest(out.join("manifest.csv"), &rows)?;
    println!("wrote {n} tracks to {}", out.display());
    Ok(())
}

fn tempogram(
    kind: TempogramKind,
    input: &Path,
    out: &Path,
    log_axis: bool,
    csv: bool,
) -> Result<()> {
    let cfg = TempogramConfig::default();
    create_dir(out)?;
    for wav in wav_inputs(input)? {
        let audio = load_wav(&wav)?;
        let nov = novelty(&audio, &cfg.novelty)?;
        let lin = linear_tempogram(&nov, kind, &cfg)?;
        let stem = wav
            .file_stem()
            .unwrap_or_default()
            .to_string_lossy()
            .into_owned();
        let (values, axis, rate) = if log_axis {
            let lg = to_log_axis(&lin, cfg.log_axis.t0, cfg.log_axis.q, cfg.log_axis.bins)?;
            let axis = lg.axis.centers();
            (lg.values, axis, lg.frame_rate)
        } else {
            (lin.values, lin.tempo_axis, lin.frame_rate)
        };
        let base = out.join(format!("{stem}.{kind}"));
        save_tempogram(base.with_extension(format!("{kind}.stem")), &values, &axis)?;
        if csv {
            write_tempogram_csv(
                base.with_extension(format!("{kind}.csv")),
                &values,
                &axis,
                rate,
            )?;
        }
        println!(
            "{}: {} frames x {} tempi",
            wav.display(),
            values.nrows(),
            values.ncols()
        );
    }
    Ok(())
}

fn train(config: &Path, out: Option<PathBuf>) -> Result<i32> {
    let mut spec = ExperimentSpec::load(config)?;
    if let Some(dir) = out {
        spec.output_dir = dir;
    }
    let report = run_experiment(&spec)?;
    match report.status {
        Status::Ok => {
            if let Some(m) = report.metrics {
                println!(
                    "{}: spearman {:.4}, fit residual {:.4} log2 BPM",
                    report.name, m.spearman, m.fit_residual
                );
            }
            println!("artifacts in {}", spec.output_dir.display());
            Ok(0)
        }
        Status::Failed => {
            eprintln!(
                "error: {} failed during {}: {}",
                report.name,
                report.failed_stage.as_deref().unwrap_or("?"),
                report.error.as_deref().unwrap_or("?")
            );
            Ok(report.exit_code)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn calibrate(
    model: &Path,
    kind: TempogramKind,
    out: &Path,
    k_inf: usize,
    seconds: f64,
    points: usize,
    bpm_min: f64,
    bpm_max: f64,
) -> Result<()> {
    let ck = load_checkpoint(model)?;
    let tempi = log_spaced_tempi(bpm_min, bpm_max, points);
    let curve = calibration_curve(
        &ck.params,
        kind,
        &tempi,
        k_inf,
        seconds,
        &TempogramConfig::default(),
    )?;
    for (bpm, why) in &curve.skipped {
        eprintln!("warning: skipped {bpm:.2} BPM: {why}");
    }
    let map = fit_calibration(&curve, k_inf)?;
    save_calibration(out, &map, Some(kind))?;
    let curve_path = out.with_extension("csv");
    write_curve_csv(&curve_path, &curve, &map)?;
    println!(
        "a = {}, b = {}, residual = {:.4} log2 BPM; curve in {}",
        map.a,
        map.b,
        map.fit_residual,
        curve_path.display()
    );
    Ok(())
}

fn predict(model: &Path, calib: &Path, input: &Path, kind: Option<TempogramKind>) -> Result<()> {
    let ck = load_checkpoint(model)?;
    let (map, stored) = load_calibration(calib)?;
    let kind = kind.or(stored).unwrap_or(TempogramKind::Fourier);
    let cfg = TempogramConfig::default();
    for wav in wav_inputs(input)? {
        let audio = load_wav(&wav)?;
        let logtg = selftempo::tempogram::log_tempogram(&audio, kind, &cfg)?;
        let (_, bpm) = predict_bpm(&ck.params, &map, &logtg)?;
        println!("{}\t{bpm:.2}", wav.display());
    }
    Ok(())
}

fn grid(config: &Path, profile: Profile) -> Result<i32> {
    let cfg = GridConfig::load(config)?;
    let specs = cfg.specs(profile);
    let report = run_grid(&specs, &cfg.output_dir)?;
    for r in &report.reports {
        match (&r.status, r.metrics) {
            (Status::Ok, Some(m)) => println!("{:<40} spearman {:.4}", r.name, m.spearman),
            _ => println!(
                "{:<40} FAILED ({})",
                r.name,
                r.error.as_deref().unwrap_or("unknown error")
            ),
        }
    }
    if let Some(svg) = &report.svg {
        println!("plot: {}", svg.display());
    }
    println!("summary: {}", report.summary_csv.display());
    Ok(report.failures().map(|r| r.exit_code).max().unwrap_or(0))
}

fn plot(input: &Path, out: &Path) -> Result<()> {
    let mut reader = csv::Reader::from_path(input).map_err(Error::from)?;
    let headers = reader.headers().map_err(Error::from)?.clone();
    let panels = if headers.iter().any(|h| h == "kind") {
        panels_from_rows(&read_grid_curves(input)?)
    } else {
        let curve = selftempo::calibrate::read_curve_csv(input)?;
        vec![Panel {
            row: String::new(),
            col: input
                .file_stem()
                .unwrap_or_default()
                .to_string_lossy()
                .into_owned(),
            points: curve.points.iter().map(|p| (p.true_bpm, p.t)).collect(),
        }]
    };
    let g = render_grid(&panels, "true tempo (BPM)", "model output t")?;
    write_svg(out, &g)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Synth {
            dist,
            mu,
            sigma,
            t_min,
            t_max,
            n,
            seconds,
            out,
            seed,
        } => {
            let dist = match dist {
                DistArg::Lognormal => TempoDistribution {
                    t_min,
                    t_max,
                    ..TempoDistribution::log_normal(mu, sigma)
                },
                DistArg::Loguniform => TempoDistribution::log_uniform(t_min, t_max),
            };
            synth(dist, n, seconds, &out, seed).map(|_| 0)
        }
        Command::Tempogram {
            kind,
            input,
            out,
            log_axis,
            csv,
        } => tempogram(kind.into(), &input, &out, log_axis, csv).map(|_| 0),
        Command::Train { config, out } => train(&config, out),
        Command::Calibrate {
            model,
            kind,
            out,
            k_inf,
            seconds,
            points,
            bpm_min,
            bpm_max,
        } => calibrate(
            &model,
            kind.into(),
            &out,
            k_inf,
            seconds,
            points,
            bpm_min,
            bpm_max,
        )
        .map(|_| 0),
        Command::Predict {
            model,
            calib,
            input,
            kind,
        } => predict(&model, &calib, &input, kind.map(Into::into)).map(|_| 0),
        Command::Grid { config, profile } => {
            let profile = match profile {
                ProfileArg::Desk => Profile::Desk,
                ProfileArg::Paper => Profile::Paper,
            };
            grid(&config, profile)
        }
        Command::Plot { input, out } => plot(&input, &out).map(|_| 0),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
