//! `imujoint` command-line interface.
//!
//! Exit status 0 on success, 2 on usage errors and 1 on data errors, the
//! latter with a single `error: kind=<kind> message=<text>` line on stderr.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::builder::PossibleValuesParser;
use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;

use crate::calib::{self, MountCalibration};
use crate::chain::ChainModel;
use crate::control::{find_gain_limit, run_tracking, GainAxis, Gains, TrackingSetup, VelocitySource};
use crate::error::{Error, Result};
use crate::estimator::{chain_accelerations, joint_velocities_constrained, joint_velocities_unconstrained, project_to_coordinates, LinkRates};
use crate::fusion::stream::{filter_stream, FilterMode};
use crate::imu_sim::{calibration_motion, Simulator};
use crate::io::frames::{calibration_log, estimate_records, frame_records, LoggedFrame};
use crate::io::{collect_frames, parse_log, read_calibration, write_calibration, ExperimentConfig, LogRecord, LogWriter, Quantity, RecordKind};
use crate::metrics::rms;
use crate::rng::{self, streams};
use crate::so3::Vec3;

#[derive(Debug, Parser)]
#[command(name = "imujoint", version, about = "Joint state estimation from link-mounted IMUs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a sensor log for the configured chain.
    Simulate(SimulateArgs),
    /// Estimate IMU mounting orientations from a locked-joint tumble log.
    CalibrateOrientation(CalibrateArgs),
    /// Estimate IMU mounting positions from a locked-joint tumble log.
    CalibratePosition(CalibrateArgs),
    /// Solve joint velocities from the gyroscopes of every frame.
    EstimateVelocity(EstimateVelocityArgs),
    /// Solve joint accelerations from accelerometer pairs.
    EstimateAcceleration(EstimateArgs),
    /// Run a state estimation filter over a log.
    Filter(FilterArgs),
    /// Run the closed-loop tracking scenarios and gain searches.
    ControlExperiment(ControlArgs),
    /// Aggregate control-experiment rows into a comparison table.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment configuration file (TOML).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Overrides the seed from the configuration.
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    /// Output log file.
    #[arg(long, value_name = "PATH")]
    output: PathBuf,
    /// `motion` follows the configured trajectory; `calibration` locks the
    /// joints at the calibration pose and tumbles the base.
    #[arg(long, value_name = "TAG", default_value = "motion", value_parser = PossibleValuesParser::new(["motion", "calibration"]))]
    mode: String,
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    #[command(flatten)]
    common: Common,
    /// Locked-joint tumble log.
    #[arg(long, value_name = "PATH")]
    input: PathBuf,
    /// Calibration result file to write.
    #[arg(long, value_name = "PATH")]
    output: PathBuf,
    /// Prior calibration (orientations are kept when calibrating positions).
    #[arg(long, value_name = "PATH")]
    calibration: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EstimateArgs {
    #[command(flatten)]
    common: Common,
    /// Sensor log.
    #[arg(long, value_name = "PATH")]
    input: PathBuf,
    /// Estimate log to write.
    #[arg(long, value_name = "PATH")]
    output: PathBuf,
    /// Mounting calibration; the configured mounts when absent.
    #[arg(long, value_name = "PATH")]
    calibration: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EstimateVelocityArgs {
    #[command(flatten)]
    inner: EstimateArgs,
    /// Velocity solve.
    #[arg(long, value_name = "TAG", default_value = "constrained", value_parser = PossibleValuesParser::new(["constrained", "unconstrained"]))]
    mode: String,
}

#[derive(Debug, Args)]
struct FilterArgs {
    #[command(flatten)]
    inner: EstimateArgs,
    /// Filter variant.
    #[arg(long, value_name = "TAG", default_value = "bias_ekf", value_parser = PossibleValuesParser::new(["bias_ekf", "kf_desired", "kf_accelerometer", "kf_zero"]))]
    mode: String,
}

#[derive(Debug, Args)]
struct ControlArgs {
    #[command(flatten)]
    common: Common,
    /// Result table (tab-separated).
    #[arg(long, value_name = "PATH")]
    output: PathBuf,
    /// Velocity feedback source, or `all`.
    #[arg(long, value_name = "TAG", default_value = "all", value_parser = PossibleValuesParser::new(["all", "butterworth_numeric", "gyro_direct", "kf_filtered"]))]
    mode: String,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Result table written by control-experiment.
    #[arg(long, value_name = "PATH")]
    input: PathBuf,
    /// Comparison table to write.
    #[arg(long, value_name = "PATH")]
    output: PathBuf,
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run_command<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(summary) => {
            print!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("error: kind={} message={}", e.kind(), e.to_string().replace('\n', " "));
            1
        }
    }
}

/// Help text of a subcommand (or the top level for `None`).
pub fn help_text(subcommand: Option<&str>) -> String {
    let mut cmd = <Cli as clap::CommandFactory>::command();
    cmd.build();
    match subcommand {
        None => cmd.render_help().to_string(),
        Some(name) => cmd.find_subcommand_mut(name).map(|c| c.render_help().to_string()).unwrap_or_default(),
    }
}

pub const SUBCOMMANDS: [&str; 8] = [
    "simulate",
    "calibrate-orientation",
    "calibrate-position",
    "estimate-velocity",
    "estimate-acceleration",
    "filter",
    "control-experiment",
    "report",
];

fn dispatch(command: Command) -> Result<String> {
    match command {
        Command::Simulate(a) => simulate(&a),
        Command::CalibrateOrientation(a) => calibrate_cmd(&a, false),
        Command::CalibratePosition(a) => calibrate_cmd(&a, true),
        Command::EstimateVelocity(a) => estimate_velocity(&a),
        Command::EstimateAcceleration(a) => estimate_acceleration(&a),
        Command::Filter(a) => filter_cmd(&a),
        Command::ControlExperiment(a) => control_experiment(&a),
        Command::Report(a) => report(&a),
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn load_frames(path: &Path, model: &ChainModel) -> Result<Vec<LoggedFrame>> {
    collect_frames(model, parse_log(path)?)
}

fn load_calibration(path: Option<&Path>, model: &ChainModel) -> Result<MountCalibration> {
    match path {
        Some(p) => read_calibration(p, model),
        None => Ok(MountCalibration::from_model(model)),
    }
}

/// Two-column `metric\tvalue` summary.
fn summary(rows: &[(&str, String)]) -> String {
    let mut out = String::from("metric\tvalue\n");
    for (k, v) in rows {
        let _ = writeln!(out, "{k}\t{v}");
    }
    out
}

fn simulate(a: &SimulateArgs) -> Result<String> {
    let cfg = load_config(&a.common)?;
    let model = cfg.model()?;
    let noise = cfg.noise();
    let traj = if a.mode == "calibration" {
        let mut rng = rng::stream(cfg.seed, streams::CALIBRATION_MOTION);
        calibration_motion(&model, &cfg.calibration_pose(&model), cfg.calibration.duration_s, &mut rng)
    } else {
        cfg.trajectory()
    };
    traj.validate(&model)?;
    let frames = Simulator::new(&model, noise).run(&traj);
    let mut w = LogWriter::create(&a.output)?;
    for f in &frames {
        for r in frame_records(&model, f) {
            w.write(&r)?;
        }
    }
    w.finish()?;
    Ok(summary(&[("frames", frames.len().to_string()), ("imus", model.mounts().len().to_string())]))
}

fn calibrate_cmd(a: &CalibrateArgs, positions: bool) -> Result<String> {
    let cfg = load_config(&a.common)?;
    let model = cfg.model()?;
    let frames = load_frames(&a.input, &model)?;
    let mut log = calibration_log(&frames, cfg.noise.sample_rate_hz)?;
    if cfg.calibration.startup_bias_samples > 0 && !log.is_empty() {
        let bias = log.startup_gyro_bias(cfg.calibration.startup_bias_samples);
        log.subtract_gyro_bias(&bias);
    }
    let cal = match (positions, &a.calibration) {
        (false, _) => calib::calibrate_orientations(&log, &model)?,
        (true, Some(prior)) => {
            let mut cal = read_calibration(prior, &model)?;
            let fits = calib::calibrate_position(&log, &model, &cal, cfg.calibration.cutoff_hz)?;
            calib::apply_positions(&mut cal, &fits);
            cal
        }
        (true, None) => calib::calibrate(&log, &model, cfg.calibration.cutoff_hz)?,
    };
    write_calibration(&a.output, &cal)?;
    let mut out = String::from("link\tslot\torientation_error_rad\tposition_error_m\torientation_residual_rad_s\tposition_residual_m_s2\tposition_condition\n");
    for (m, c) in model.mounts().iter().zip(&cal.imus) {
        let _ = writeln!(
            out,
            "{}\t{}\t{:e}\t{:e}\t{:e}\t{:e}\t{:e}",
            c.link,
            c.slot,
            c.orientation.geodesic(&m.orientation),
            (c.position - m.position).norm(),
            c.orientation_residual,
            c.position_residual,
            c.position_condition
        );
    }
    Ok(out)
}

fn write_estimates(path: &Path, frames: &[LoggedFrame], quantity: Quantity, values: &[DVector<f64>], first_index: usize) -> Result<()> {
    let mut w = LogWriter::create(path)?;
    for (f, v) in frames.iter().zip(values) {
        for (k, x) in v.iter().enumerate() {
            w.write(&LogRecord { time_us: f.time_us, kind: RecordKind::Estimate, index: first_index + k, sub: quantity.code(), values: vec![*x] })?;
        }
    }
    w.finish()?;
    Ok(())
}

/// Max and RMS error against logged truth over `range` of each frame's
/// generalized coordinates, skipping frames without truth.
fn truth_errors(frames: &[LoggedFrame], estimates: &[DVector<f64>], component: usize, range: std::ops::Range<usize>, skip_s: f64) -> Option<(f64, f64)> {
    let t0 = frames.first()?.time();
    let errs: Vec<f64> = frames
        .iter()
        .zip(estimates)
        .filter(|(f, _)| f.time() - t0 >= skip_s)
        .filter_map(|(f, e)| {
            let truth = f.truth_component(component)?;
            let offset = truth.len() - e.len();
            Some(range.clone().map(move |k| e[k] - truth[offset + k]))
        })
        .flatten()
        .collect();
    (!errs.is_empty()).then(|| (errs.iter().fold(0.0, |m: f64, e| m.max(e.abs())), rms(&errs)))
}

fn primary_gyros(model: &ChainModel, gyros: &[Vec3]) -> Vec<Vec3> {
    (0..model.link_count()).map(|l| gyros[model.mount_index(l, 0).expect("every link has an IMU")]).collect()
}

fn estimate_velocity(a: &EstimateVelocityArgs) -> Result<String> {
    let e = &a.inner;
    let cfg = load_config(&e.common)?;
    let model = cfg.model()?;
    let cal = load_calibration(e.calibration.as_deref(), &model)?;
    let frames = load_frames(&e.input, &model)?;
    let velocities = frames
        .iter()
        .enumerate()
        .map(|(k, f)| {
            let wrap = |err: Error| Error::Step { step: k, source: Box::new(err) };
            let q = f.measured_positions().map_err(wrap)?;
            let gyros = primary_gyros(&model, &f.gyro_readings().map_err(wrap)?);
            if a.mode == "unconstrained" {
                let rel = joint_velocities_unconstrained(&model, &q, &gyros, &cal).map_err(wrap)?;
                Ok(project_to_coordinates(&model, &q, &rel.velocities))
            } else {
                Ok(joint_velocities_constrained(&model, &q, &gyros, &cal).map_err(wrap)?.velocities)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    write_estimates(&e.output, &frames, Quantity::Velocity, &velocities, 0)?;
    let mut rows = vec![("frames", frames.len().to_string())];
    if let Some((max, rms)) = truth_errors(&frames, &velocities, 1, 0..model.velocity_dim(), 0.0) {
        rows.push(("max_velocity_error_rad_s", format!("{max:e}")));
        rows.push(("rms_velocity_error_rad_s", format!("{rms:e}")));
    }
    Ok(summary(&rows))
}

fn estimate_acceleration(a: &EstimateArgs) -> Result<String> {
    let cfg = load_config(&a.common)?;
    let model = cfg.model()?;
    let cal = load_calibration(a.calibration.as_deref(), &model)?;
    let frames = load_frames(&a.input, &model)?;
    let mut velocities = Vec::with_capacity(frames.len());
    for (k, f) in frames.iter().enumerate() {
        let wrap = |err: Error| Error::Step { step: k, source: Box::new(err) };
        let q = f.measured_positions().map_err(wrap)?;
        let gyros = primary_gyros(&model, &f.gyro_readings().map_err(wrap)?);
        velocities.push(joint_velocities_constrained(&model, &q, &gyros, &cal).map_err(wrap)?.velocities);
    }
    // The base angular acceleration is differentiated offline with a
    // zero-phase filter.
    let base_alpha = if model.floating_base() && frames.len() > 1 {
        let omega: Vec<Vec3> = velocities.iter().map(|v| Vec3::new(v[0], v[1], v[2])).collect();
        let fs = cfg.noise.sample_rate_hz;
        calib::numeric_angular_accel(&omega, fs, Some(cfg.calibration.cutoff_hz))?
    } else {
        vec![Vec3::zeros(); frames.len()]
    };
    let nb = model.base_dof();
    let accels = frames
        .iter()
        .enumerate()
        .map(|(k, f)| {
            let wrap = |err: Error| Error::Step { step: k, source: Box::new(err) };
            let v = &velocities[k];
            let base = model
                .floating_base()
                .then(|| LinkRates { angular_velocity: Vec3::new(v[0], v[1], v[2]), angular_acceleration: base_alpha[k] });
            let q = f.measured_positions().map_err(wrap)?;
            let accel = f.accel_readings().map_err(wrap)?;
            Ok(chain_accelerations(&model, &q, v, base, &accel, &cal).map_err(wrap)?.coordinates)
        })
        .collect::<Result<Vec<_>>>()?;
    write_estimates(&a.output, &frames, Quantity::Acceleration, &accels, nb)?;
    // Only joints carrying a second IMU on their child link are solved.
    let solved: Vec<usize> = (1..model.link_count()).filter(|&l| model.mount_index(l, 1).is_some()).flat_map(|l| model.joint_range(l)).collect();
    let mut rows = vec![("frames", frames.len().to_string()), ("solved_joint_coordinates", solved.len().to_string())];
    if !solved.is_empty() {
        let picked: Vec<DVector<f64>> = accels.iter().map(|a| DVector::from_iterator(solved.len(), solved.iter().map(|&k| a[k]))).collect();
        let truth_frames: Vec<LoggedFrame> = frames
            .iter()
            .map(|f| {
                let mut g = f.clone();
                g.truth = solved.iter().map(|&k| f.truth[nb + k]).collect();
                g
            })
            .collect();
        if let Some((max, rms)) = truth_errors(&truth_frames, &picked, 2, 0..solved.len(), 0.0) {
            rows.push(("max_acceleration_error_rad_s2", format!("{max:e}")));
            rows.push(("rms_acceleration_error_rad_s2", format!("{rms:e}")));
        }
    }
    Ok(summary(&rows))
}

fn filter_cmd(a: &FilterArgs) -> Result<String> {
    let e = &a.inner;
    let cfg = load_config(&e.common)?;
    let model = cfg.model()?;
    let cal = load_calibration(e.calibration.as_deref(), &model)?;
    let frames = load_frames(&e.input, &model)?;
    let samples = frames.iter().map(|f| f.stream_sample(&model)).collect::<Result<Vec<_>>>()?;
    let mode = FilterMode::from_tag(&a.mode).expect("validated by the parser");
    let estimates = filter_stream(&model, &cal, &samples, mode, &cfg.filter_config())?;
    let mut w = LogWriter::create(&e.output)?;
    for est in &estimates {
        for r in estimate_records(&model, est) {
            w.write(&r)?;
        }
    }
    w.finish()?;
    let nb = model.base_dof();
    let velocities: Vec<DVector<f64>> = estimates.iter().map(|e| e.velocities.clone()).collect();
    let mut rows = vec![("frames", frames.len().to_string()), ("mode", mode.tag().to_string())];
    let joint_frames: Vec<LoggedFrame> = frames
        .iter()
        .map(|f| {
            let mut g = f.clone();
            g.truth = f.truth[nb..].to_vec();
            g
        })
        .collect();
    if let Some((max, rms)) = truth_errors(&joint_frames, &velocities, 1, 0..model.joint_dof(), 1.0) {
        rows.push(("max_velocity_error_rad_s", format!("{max:e}")));
        rows.push(("rms_velocity_error_rad_s", format!("{rms:e}")));
    }
    Ok(summary(&rows))
}

const RESULT_HEADER: &str = "kind\tscenario\tsource\tp_n_m_rad\td_n_m_s_rad\tfrequency_hz\tposition_rms_rad\tvelocity_rms_rad_s\tstable";

enum Job {
    Track { scenario: String, setup: TrackingSetup, gains: Gains },
    Limit { axis: GainAxis, fixed: f64, search: crate::control::GainSearch },
}

fn control_experiment(a: &ControlArgs) -> Result<String> {
    let cfg = load_config(&a.common)?;
    let base = cfg.tracking_setup();
    let sources: Vec<VelocitySource> = match VelocitySource::from_tag(&a.mode) {
        Some(s) => vec![s],
        None => VelocitySource::ALL.to_vec(),
    };
    let mut jobs = Vec::new();
    for s in &cfg.control.scenarios {
        let mut setup = base.clone();
        if let Some(f) = s.frequency_hz {
            setup.reference.frequency_hz = f;
        }
        jobs.push(Job::Track { scenario: s.name.clone(), setup, gains: Gains { p: s.p_n_m_rad, d: s.d_n_m_s_rad } });
    }
    if let Some(s) = cfg.control.p_search {
        jobs.push(Job::Limit { axis: GainAxis::P, fixed: s.fixed, search: s.grid() });
    }
    if let Some(s) = cfg.control.d_search {
        jobs.push(Job::Limit { axis: GainAxis::D, fixed: s.fixed, search: s.grid() });
    }
    let tasks: Vec<(&Job, VelocitySource)> = jobs.iter().flat_map(|j| sources.iter().map(move |s| (j, *s))).collect();
    // Every run is seeded on its own, so the fan-out does not affect results.
    let lines: Vec<Result<String>> = std::thread::scope(|scope| {
        let base = &base;
        let handles: Vec<_> = tasks.iter().map(|&(job, source)| scope.spawn(move || result_line(job, source, base))).collect();
        handles.into_iter().map(|h| h.join().expect("control worker panicked")).collect()
    });
    let mut out = format!("{RESULT_HEADER}\n");
    for line in lines {
        out.push_str(&line?);
        out.push('\n');
    }
    std::fs::write(&a.output, &out)?;
    Ok(out)
}

fn result_line(job: &Job, source: VelocitySource, base: &TrackingSetup) -> Result<String> {
    match job {
        Job::Track { scenario, setup, gains } => {
            let r = run_tracking(setup, *gains, source)?;
            Ok(format!(
                "tracking\t{scenario}\t{}\t{}\t{}\t{}\t{:e}\t{:e}\t{}",
                source.tag(),
                gains.p,
                gains.d,
                setup.reference.frequency_hz,
                r.position_rms,
                r.velocity_rms,
                r.stable
            ))
        }
        Job::Limit { axis, fixed, search } => {
            let limit = find_gain_limit(base, *axis, *fixed, source, *search)?;
            let (kind, p, d) = match axis {
                GainAxis::P => ("p_limit", limit, *fixed),
                GainAxis::D => ("d_limit", *fixed, limit),
            };
            Ok(format!("{kind}\t{kind}\t{}\t{p}\t{d}\t{}\t-\t-\ttrue", source.tag(), base.reference.frequency_hz))
        }
    }
}

/// One parsed row of a control-experiment table.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub kind: String,
    pub scenario: String,
    pub source: String,
    pub p: f64,
    pub d: f64,
    pub frequency_hz: f64,
    pub position_rms: Option<f64>,
    pub velocity_rms: Option<f64>,
    pub stable: bool,
}

pub fn parse_results(text: &str) -> Result<Vec<ResultRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == RESULT_HEADER => {}
        _ => return Err(Error::MalformedLine { line: 1, reason: "unexpected result table header".into() }),
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let bad = |reason: String| Error::MalformedLine { line: i + 1, reason };
            let f: Vec<&str> = l.split('\t').collect();
            if f.len() != 9 {
                return Err(bad(format!("expected 9 columns, got {}", f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("{s:?}: {e}")));
            let opt = |s: &str| if s == "-" { Ok(None) } else { num(s).map(Some) };
            Ok(ResultRow {
                kind: f[0].to_string(),
                scenario: f[1].to_string(),
                source: f[2].to_string(),
                p: num(f[3])?,
                d: num(f[4])?,
                frequency_hz: num(f[5])?,
                position_rms: opt(f[6])?,
                velocity_rms: opt(f[7])?,
                stable: f[8].parse().map_err(|e| bad(format!("stable: {e}")))?,
            })
        })
        .collect()
}

/// Comparison table: one row per scenario and metric, one column per
/// velocity source, plus the change of gyro feedback relative to filtered
/// numeric differentiation in percent.
pub fn comparison_table(rows: &[ResultRow]) -> String {
    let sources = VelocitySource::ALL.map(|s| s.tag());
    let mut out = String::from("scenario\tmetric");
    for s in sources {
        let _ = write!(out, "\t{s}");
    }
    out.push_str("\tgyro_vs_numeric_pct\n");
    // Keyed by (first appearance, scenario, metric), values by source.
    let mut table: BTreeMap<(usize, String, &str), BTreeMap<&str, f64>> = BTreeMap::new();
    let mut order: Vec<String> = Vec::new();
    for r in rows {
        let key = format!("{}/{}", r.kind, r.scenario);
        let rank = order.iter().position(|o| *o == key).unwrap_or_else(|| {
            order.push(key);
            order.len() - 1
        });
        let mut put = |metric: &'static str, v: f64| {
            table.entry((rank, r.scenario.clone(), metric)).or_default().insert(
                sources.iter().copied().find(|s| *s == r.source).unwrap_or("unknown"),
                v,
            );
        };
        match r.kind.as_str() {
            "tracking" => {
                let unstable = if r.stable { 0.0 } else { f64::INFINITY };
                put("position_rms_rad", r.position_rms.unwrap_or(f64::NAN) + unstable);
                put("velocity_rms_rad_s", r.velocity_rms.unwrap_or(f64::NAN) + unstable);
            }
            "p_limit" => put("p_limit_n_m_rad", r.p),
            "d_limit" => put("d_limit_n_m_s_rad", r.d),
            _ => {}
        }
    }
    for ((_, scenario, metric), values) in &table {
        let _ = write!(out, "{scenario}\t{metric}");
        for s in sources {
            match values.get(s) {
                Some(v) => {
                    let _ = write!(out, "\t{v:e}");
                }
                None => out.push_str("\t-"),
            }
        }
        match (values.get("butterworth_numeric"), values.get("gyro_direct")) {
            (Some(n), Some(g)) if *n != 0.0 && n.is_finite() && g.is_finite() => {
                let _ = writeln!(out, "\t{:.2}", (g - n) / n * 100.0);
            }
            _ => out.push_str("\t-\n"),
        }
    }
    out
}

fn report(a: &ReportArgs) -> Result<String> {
    let rows = parse_results(&std::fs::read_to_string(&a.input)?)?;
    let table = comparison_table(&rows);
    std::fs::write(&a.output, &table)?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_subcommand_is_a_usage_error() {
        assert_eq!(run_command(["imujoint", "frobnicate"]), 2);
        assert_eq!(run_command(["imujoint", "simulate", "--config", "x.toml", "--output", "y", "--mode", "bogus"]), 2);
    }

    #[test]
    fn missing_config_is_a_data_error() {
        assert_eq!(run_command(["imujoint", "simulate", "--config", "/nonexistent/cfg.toml", "--output", "/nonexistent/out.log"]), 1);
    }

    #[test]
    fn every_subcommand_documents_its_flags() {
        for name in SUBCOMMANDS {
            let help = help_text(Some(name));
            assert!(help.contains("--"), "{name} help lacks flags");
        }
    }

    #[test]
    fn report_aggregates_rows() {
        let table = format!(
            "{RESULT_HEADER}\n\
             tracking\ts1\tbutterworth_numeric\t1000\t12\t0.5\t2e-3\t4e-3\ttrue\n\
             tracking\ts1\tgyro_direct\t1000\t12\t0.5\t1e-3\t3e-3\ttrue\n\
             p_limit\tp_limit\tbutterworth_numeric\t1000\t12\t0.5\t-\t-\ttrue\n\
             p_limit\tp_limit\tgyro_direct\t1600\t12\t0.5\t-\t-\ttrue\n"
        );
        let out = comparison_table(&parse_results(&table).unwrap());
        let lines: Vec<&str> = out.lines().collect();
        assert_eq!(lines[0], "scenario\tmetric\tbutterworth_numeric\tgyro_direct\tkf_filtered\tgyro_vs_numeric_pct");
        assert_eq!(lines[1], "s1\tposition_rms_rad\t2e-3\t1e-3\t-\t-50.00");
        assert_eq!(lines[2], "s1\tvelocity_rms_rad_s\t4e-3\t3e-3\t-\t-25.00");
        assert_eq!(lines[3], "p_limit\tp_limit_n_m_rad\t1e3\t1.6e3\t-\t60.00");
    }
}
