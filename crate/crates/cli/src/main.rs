use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use linecalib::pipeline::{calibrate, CalibrateOptions, Outcome, Report, RunStatus, Stage};
use linecalib::session::{
    load_session, save_session, session_dir, write_atomic, write_simulation, Config,
};
use linecalib::simulate::{evaluate, simulate, Metrics};
use linecalib::{CalibError, PenaltyMode, Quat, Rigid3};
use nalgebra::Vector3;
use serde_json::json;

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DEGENERATE: u8 = 3;
const EXIT_INSUFFICIENT: u8 = 4;

/// Targetless lidar-camera extrinsic calibration from motion and vertical lines.
#[derive(Parser)]
#[command(name = "linecalib", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic calibration session.
    Simulate {
        /// TOML configuration file; built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Session file to write; point clouds go to `<stem>.clouds/` beside it.
        #[arg(long)]
        out: PathBuf,
        /// Override a configuration value, e.g. `simulation.trajectory.n_poses=12`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Estimate the extrinsic of a session and write a report.
    Calibrate {
        #[arg(long)]
        session: PathBuf,
        /// Report file to write.
        #[arg(long)]
        out: PathBuf,
        /// Keep every motion pair instead of filtering by rotation angle.
        #[arg(long)]
        no_filter: bool,
        /// Stop after the motion-based initialization.
        #[arg(long)]
        no_refine: bool,
        #[arg(long, value_enum, default_value_t = Penalty::Huber)]
        penalty: Penalty,
        /// Override a value of the session's configuration snapshot (full dotted key).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Comma-separated calibration threshold overrides, e.g. `matching.dist_tol=10,refine.huber_m=2`.
        #[arg(long, value_name = "KEY=VALUE,...", value_delimiter = ',')]
        thresholds: Vec<String>,
        /// Also write the stage results and effective configuration back into the session.
        #[arg(long)]
        save_stages: bool,
    },
    /// Print the error of an estimate against a ground truth.
    Evaluate {
        /// Report produced by `calibrate`.
        #[arg(
            long,
            conflicts_with = "estimate",
            required_unless_present = "estimate"
        )]
        report: Option<PathBuf>,
        /// Inline estimate: `tx,ty,tz` or `qw,qx,qy,qz,tx,ty,tz`.
        #[arg(long, allow_hyphen_values = true)]
        estimate: Option<String>,
        /// Ground truth: inline vector as for `--estimate`, or a JSON file holding a
        /// transform, a session or a report. Defaults to the report's own.
        #[arg(long, allow_hyphen_values = true)]
        gt: Option<String>,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Penalty {
    Ols,
    Huber,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Json,
}

struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let code = match error.downcast_ref::<CalibError>() {
            Some(CalibError::Config(_)) => EXIT_CONFIG,
            _ => EXIT_FAILURE,
        };
        Self { code, error }
    }
}

impl From<CalibError> for Failure {
    fn from(error: CalibError) -> Self {
        anyhow::Error::from(error).into()
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate {
            config,
            out,
            overrides,
        } => cmd_simulate(config.as_deref(), &out, &overrides),
        Command::Calibrate {
            session,
            out,
            no_filter,
            no_refine,
            penalty,
            overrides,
            thresholds,
            save_stages,
        } => {
            let options = CalibrateOptions {
                filter: !no_filter,
                refine: !no_refine,
                penalty: match penalty {
                    Penalty::Ols => PenaltyMode::Ols,
                    Penalty::Huber => PenaltyMode::Huber,
                },
            };
            let mut all = overrides;
            all.extend(
                thresholds
                    .iter()
                    .map(|t| format!("calibration.{}", t.trim())),
            );
            cmd_calibrate(&session, &out, options, &all, save_stages)
        }
        Command::Evaluate {
            report,
            estimate,
            gt,
            format,
        } => cmd_evaluate(
            report.as_deref(),
            estimate.as_deref(),
            gt.as_deref(),
            format,
        ),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(Failure { code, error }) => {
            eprintln!("error: {error:#}");
            ExitCode::from(code)
        }
    }
}

fn cmd_simulate(config: Option<&Path>, out: &Path, overrides: &[String]) -> Result<u8, Failure> {
    let config = match config {
        Some(path) => Config::load(path, overrides)?,
        None => Config::default().with_overrides(overrides)?,
    };
    config.validate()?;
    let sim = simulate(&config.simulation)?;
    let session = write_simulation(&sim, &config, out)?;
    println!(
        "wrote {} ({} poses, {} motion pairs, {} observations)",
        out.display(),
        session.n_poses,
        session.motion_pairs.len(),
        session.observations.len()
    );
    Ok(0)
}

fn cmd_calibrate(
    session_path: &Path,
    out: &Path,
    options: CalibrateOptions,
    overrides: &[String],
    save_stages: bool,
) -> Result<u8, Failure> {
    let mut session = load_session(session_path)?;
    let config = session.config.with_overrides(overrides)?;
    let clouds = session.load_clouds(&session_dir(session_path))?;
    let Outcome { report, stages } = calibrate(&session, &clouds, &config.calibration, &options)?;
    let text = serde_json::to_string_pretty(&report).context("serializing report")?;
    write_atomic(out, text.as_bytes())?;
    if save_stages {
        session.config = config.clone();
        session.stages = stages;
        save_session(&session, session_path)?;
    }
    print_summary(&report);
    Ok(match report.status {
        RunStatus::Ok => 0,
        RunStatus::Degenerate => {
            eprintln!(
                "degenerate motion: pure translation {}, single axis {}",
                report.degeneracy.pure_translation, report.degeneracy.single_axis
            );
            EXIT_DEGENERATE
        }
        RunStatus::InsufficientMatches => {
            eprintln!(
                "only {} line matches, need {}",
                report.match_count, config.calibration.min_matches
            );
            EXIT_INSUFFICIENT
        }
    })
}

fn print_summary(report: &Report) {
    println!(
        "status {:?}: {}/{} pairs retained, {} candidates, {} matches",
        report.status,
        report.retained_pairs,
        report.total_pairs,
        report.candidate_count,
        report.match_count
    );
    if let Some(e) = &report.extrinsic {
        let q = e.rotation;
        let t = e.translation;
        println!(
            "extrinsic q = [{:.6}, {:.6}, {:.6}, {:.6}], t = [{:.4}, {:.4}, {:.4}] m",
            q.w, q.x, q.y, q.z, t.x, t.y, t.z
        );
    }
    if let Some(m) = &report.metrics {
        println!("{}", metrics_line(m));
    }
}

fn metrics_line(m: &Metrics) -> String {
    let ratio = m
        .translation_ratio
        .map_or_else(|| "n/a".to_string(), |r| format!("{:.2}%", 100.0 * r));
    format!(
        "rotation error {:.4} deg, translation error {:.4} m, {ratio}",
        m.rotation_error_deg, m.translation_error
    )
}

fn parse_vector(text: &str) -> anyhow::Result<Rigid3> {
    let values = text
        .split(',')
        .map(|v| v.trim().parse::<f64>())
        .collect::<Result<Vec<_>, _>>()
        .with_context(|| format!("{text:?} is not a comma-separated list of numbers"))?;
    match values[..] {
        [x, y, z] => Ok(Rigid3::new(Quat::identity(), Vector3::new(x, y, z))),
        [w, qx, qy, qz, x, y, z] => {
            let q = Quat::new(w, qx, qy, qz);
            if !(q.norm() > 0.0) {
                bail!("zero quaternion in {text:?}");
            }
            Ok(Rigid3::new(q.normalized(), Vector3::new(x, y, z)))
        }
        _ => bail!("expected 3 or 7 numbers, got {}", values.len()),
    }
}

/// Ground truth from an inline vector or a JSON document.
fn read_ground_truth(spec: &str) -> anyhow::Result<Rigid3> {
    let path = Path::new(spec);
    if !path.exists() {
        return parse_vector(spec)
            .with_context(|| format!("ground truth {spec:?} is neither a file nor a vector"));
    }
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let inner = match value.get("ground_truth") {
        Some(serde_json::Value::Null) | None if value.get("rotation").is_none() => {
            bail!("{} holds no ground truth", path.display())
        }
        Some(gt) => gt.clone(),
        None => value,
    };
    serde_json::from_value(inner)
        .with_context(|| format!("reading ground truth from {}", path.display()))
}

fn cmd_evaluate(
    report_path: Option<&Path>,
    estimate: Option<&str>,
    gt: Option<&str>,
    format: Format,
) -> Result<u8, Failure> {
    let report: Option<Report> = match report_path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Some(
                serde_json::from_str(&text)
                    .with_context(|| format!("parsing report {}", p.display()))?,
            )
        }
        None => None,
    };
    let estimate = match (&report, estimate) {
        (Some(r), _) => r
            .extrinsic
            .ok_or_else(|| anyhow!("report has no estimate (status {:?})", r.status))?,
        (None, Some(text)) => parse_vector(text)?,
        (None, None) => unreachable!("clap requires --report or --estimate"),
    };
    let gt = match gt {
        Some(spec) => read_ground_truth(spec)?,
        None => report
            .as_ref()
            .and_then(|r| r.ground_truth)
            .ok_or_else(|| {
                Failure::from(CalibError::Config("no ground truth: pass --gt".into()))
            })?,
    };
    if !(gt.translation.norm() > 0.0) {
        return Err(CalibError::ZeroGroundTruth.into());
    }
    let metrics = evaluate(&estimate, &gt);
    let stages: Vec<(&str, Metrics)> = report
        .as_ref()
        .map(|r| {
            let s = &r.stages;
            [
                ("initial_unfiltered", s.initial_unfiltered),
                ("initial_filtered", s.initial_filtered),
                ("refined_ols", s.refined_ols),
                ("refined_huber", s.refined_huber),
            ]
            .into_iter()
            .filter_map(|(name, st): (&str, Option<Stage>)| {
                st.map(|st| (name, evaluate(&st.extrinsic, &gt)))
            })
            .collect()
        })
        .unwrap_or_default();
    match format {
        Format::Text => {
            println!("{}", metrics_line(&metrics));
            for (name, m) in &stages {
                println!("  {name:<20} {}", metrics_line(m));
            }
        }
        Format::Json => {
            let entry = |m: &Metrics| {
                json!({
                    "rotation_error": m.rotation_error,
                    "rotation_error_deg": m.rotation_error_deg,
                    "translation_error": m.translation_error,
                    "translation_ratio": m.translation_ratio,
                    "translation_ratio_percent": m.translation_ratio.map(|r| 100.0 * r),
                })
            };
            let mut doc = entry(&metrics);
            let by_stage: serde_json::Map<String, serde_json::Value> = stages
                .iter()
                .map(|(n, m)| (n.to_string(), entry(m)))
                .collect();
            if !by_stage.is_empty() {
                doc["stages"] = serde_json::Value::Object(by_stage);
            }
            println!(
                "{}",
                serde_json::to_string_pretty(&doc).context("serializing metrics")?
            );
        }
    }
    Ok(0)
}
