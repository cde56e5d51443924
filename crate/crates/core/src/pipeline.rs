//! End-to-end calibration of a session: motion-based initialization, line
//! extraction, matching and refinement, summarized as a [`Report`].

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CalibError, Result};
use crate::geom::{Rigid3, VerticalLine3D};
use crate::handeye::{check_degeneracy, init_calibrate, DegeneracyReport, InitConfig, InitResult};
use crate::lines::{detect_vertical_lines, project_to_floor, LineExtractionConfig, PointCloud};
use crate::refine::{
    match_lines, refine_translation, LineMatch, MatchConfig, PenaltyMode, RefineConfig,
    RefineResult,
};
use crate::session::{
    session_from_simulation, CalibrationSession, Config, StageResults, SCHEMA_VERSION,
};
use crate::simulate::{evaluate, Metrics, SimOutput};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub init: InitConfig,
    pub lines: LineExtractionConfig,
    pub matching: MatchConfig,
    pub refine: RefineConfig,
    /// Fewest line matches accepted for refinement.
    pub min_matches: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            init: InitConfig::default(),
            lines: LineExtractionConfig::default(),
            matching: MatchConfig::default(),
            refine: RefineConfig::default(),
            min_matches: 4,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let init = &self.init;
        if !(init.angle_tolerance > 0.0)
            || !(init.limits.rotation_floor >= 0.0)
            || !(init.limits.spread_floor >= 0.0)
        {
            return Err(CalibError::Config(format!("invalid init config {init:?}")));
        }
        let m = &self.matching;
        if !(m.angle_tol > 0.0) || !(m.dist_tol > 0.0) || !(m.fov_margin >= 0.0) {
            return Err(CalibError::Config(format!("invalid matching config {m:?}")));
        }
        if self.min_matches < 2 {
            return Err(CalibError::Config("min_matches must be at least 2".into()));
        }
        self.lines.validate()?;
        self.refine.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CalibrateOptions {
    pub filter: bool,
    pub refine: bool,
    pub penalty: PenaltyMode,
}

impl Default for CalibrateOptions {
    fn default() -> Self {
        Self {
            filter: true,
            refine: true,
            penalty: PenaltyMode::Huber,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    Ok,
    Degenerate,
    InsufficientMatches,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub extrinsic: Rigid3,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<Metrics>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Stages {
    pub initial_unfiltered: Option<Stage>,
    pub initial_filtered: Option<Stage>,
    pub refined_ols: Option<Stage>,
    pub refined_huber: Option<Stage>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefineSummary {
    pub iterations: usize,
    pub converged: bool,
    pub final_weighted_rms: f64,
    pub inlier_fraction: f64,
}

impl From<&RefineResult> for RefineSummary {
    fn from(r: &RefineResult) -> Self {
        Self {
            iterations: r.iterations,
            converged: r.converged,
            final_weighted_rms: r.final_weighted_rms,
            inlier_fraction: r.inlier_fraction,
        }
    }
}

/// Wall-clock milliseconds per phase.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub init_ms: f64,
    pub extraction_ms: f64,
    pub refine_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: String,
    pub status: RunStatus,
    /// Final estimate; absent when the motion is degenerate.
    pub extrinsic: Option<Rigid3>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<Metrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<Rigid3>,
    pub stages: Stages,
    pub options: CalibrateOptions,
    pub total_pairs: usize,
    pub retained_pairs: usize,
    pub candidate_count: usize,
    pub match_count: usize,
    pub refinement: Option<RefineSummary>,
    pub degeneracy: DegeneracyReport,
    pub timing: Timing,
}

impl Report {
    /// Copy with timing zeroed, for run-to-run comparisons.
    pub fn without_timing(&self) -> Self {
        Self {
            timing: Timing::default(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub report: Report,
    pub stages: StageResults,
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

/// Vertical line candidates of one cloud; empty clouds have none.
pub fn extract_candidates(
    cloud: &PointCloud,
    config: &LineExtractionConfig,
) -> Vec<VerticalLine3D> {
    match project_to_floor(cloud, config.cell_size) {
        Ok(grid) => detect_vertical_lines(&grid, cloud, config),
        Err(_) => Vec::new(),
    }
}

fn stage(extrinsic: Rigid3, gt: Option<&Rigid3>) -> Stage {
    Stage {
        extrinsic,
        metrics: gt.map(|g| evaluate(&extrinsic, g)),
    }
}

/// Runs every stage on `session`. `clouds` holds one cloud per observation.
///
/// Degenerate motion and too few matches are reported through
/// [`Report::status`]; other failures are errors.
pub fn calibrate(
    session: &CalibrationSession,
    clouds: &[PointCloud],
    config: &PipelineConfig,
    options: &CalibrateOptions,
) -> Result<Outcome> {
    config.validate()?;
    if clouds.len() != session.observations.len() {
        return Err(CalibError::LengthMismatch {
            lidar: clouds.len(),
            camera: session.observations.len(),
        });
    }
    let start = Instant::now();
    let gt = session.ground_truth.as_ref();
    let pairs = &session.motion_pairs;
    let mut report = Report {
        schema_version: SCHEMA_VERSION.to_string(),
        status: RunStatus::Ok,
        extrinsic: None,
        metrics: None,
        ground_truth: session.ground_truth,
        stages: Stages::default(),
        options: *options,
        total_pairs: pairs.len(),
        retained_pairs: 0,
        candidate_count: 0,
        match_count: 0,
        refinement: None,
        degeneracy: check_degeneracy(pairs, &config.init.limits),
        timing: Timing::default(),
    };
    let mut stages = StageResults::default();
    let finish = |mut report: Report, stages: StageResults| {
        report.metrics = match (report.extrinsic, gt) {
            (Some(e), Some(g)) => Some(evaluate(&e, g)),
            _ => None,
        };
        report.timing.total_ms = ms(start);
        Ok(Outcome { report, stages })
    };
    if report.degeneracy.is_degenerate() {
        report.status = RunStatus::Degenerate;
        return finish(report, stages);
    }

    let t_init = Instant::now();
    let run_init = |filter: bool| {
        init_calibrate(
            pairs,
            &InitConfig {
                filter,
                ..config.init
            },
        )
    };
    let (unfiltered, filtered) = rayon::join(|| run_init(false), || run_init(true));
    let (chosen, other) = if options.filter {
        (filtered, unfiltered)
    } else {
        (unfiltered, filtered)
    };
    let init: InitResult = match chosen {
        Ok(r) => r,
        Err(CalibError::Degenerate(d)) => {
            report.degeneracy = d;
            report.status = RunStatus::Degenerate;
            return finish(report, stages);
        }
        Err(e) => return Err(e),
    };
    let other = other.ok();
    let (unf, fil) = if options.filter {
        (other.as_ref(), Some(&init))
    } else {
        (Some(&init), other.as_ref())
    };
    report.stages.initial_unfiltered = unf.map(|r| stage(r.extrinsic, gt));
    report.stages.initial_filtered = fil.map(|r| stage(r.extrinsic, gt));
    report.retained_pairs = init.filtered_pair_ids.len();
    report.degeneracy = init.degeneracy;
    report.extrinsic = Some(init.extrinsic);
    report.timing.init_ms = ms(t_init);
    let ext0 = init.extrinsic;
    stages.init = Some(init);
    if !options.refine {
        return finish(report, stages);
    }

    let t_extract = Instant::now();
    let per_pose: Vec<(usize, Vec<LineMatch>)> = session
        .observations
        .par_iter()
        .zip(clouds.par_iter())
        .map(|(obs, cloud)| {
            let candidates = extract_candidates(cloud, &config.lines);
            let matches = match_lines(
                &candidates,
                &obs.segments,
                &ext0,
                &session.intrinsics,
                &config.matching,
                obs.pose_index,
            );
            (candidates.len(), matches)
        })
        .collect();
    report.candidate_count = per_pose.iter().map(|p| p.0).sum();
    let matches: Vec<LineMatch> = per_pose.into_iter().flat_map(|p| p.1).collect();
    report.match_count = matches.len();
    report.timing.extraction_ms = ms(t_extract);
    stages.matches = Some(matches.clone());
    if matches.len() < config.min_matches {
        report.status = RunStatus::InsufficientMatches;
        return finish(report, stages);
    }

    let t_refine = Instant::now();
    let run_refine = |penalty_mode: PenaltyMode| {
        refine_translation(
            &matches,
            &ext0.rotation,
            &ext0.translation,
            &session.intrinsics,
            &RefineConfig {
                penalty_mode,
                ..config.refine
            },
        )
    };
    let (ols, huber) = rayon::join(
        || run_refine(PenaltyMode::Ols),
        || run_refine(PenaltyMode::Huber),
    );
    let (chosen, other) = match options.penalty {
        PenaltyMode::Ols => (ols, huber),
        PenaltyMode::Huber => (huber, ols),
    };
    let refined = match chosen {
        Ok(r) => r,
        Err(CalibError::Geometry(_) | CalibError::RankDeficient(_)) => {
            report.status = RunStatus::InsufficientMatches;
            return finish(report, stages);
        }
        Err(e) => return Err(e),
    };
    let with_t = |r: &RefineResult| Rigid3::new(ext0.rotation, r.translation);
    let other = other.ok();
    let (ols, huber) = match options.penalty {
        PenaltyMode::Ols => (Some(&refined), other.as_ref()),
        PenaltyMode::Huber => (other.as_ref(), Some(&refined)),
    };
    report.stages.refined_ols = ols.map(|r| stage(with_t(r), gt));
    report.stages.refined_huber = huber.map(|r| stage(with_t(r), gt));
    report.extrinsic = Some(with_t(&refined));
    report.refinement = Some(RefineSummary::from(&refined));
    report.timing.refine_ms = ms(t_refine);
    stages.refined = Some(refined);
    finish(report, stages)
}

/// Calibrates a simulator run in memory with the given pipeline settings.
pub fn calibrate_simulation(
    sim: &SimOutput,
    config: &PipelineConfig,
    options: &CalibrateOptions,
) -> Result<Outcome> {
    let session = session_from_simulation(
        sim,
        &Config {
            simulation: sim.config.clone(),
            calibration: config.clone(),
        },
        "",
    );
    let clouds: Vec<PointCloud> = sim.observations.iter().map(|o| o.cloud.clone()).collect();
    calibrate(&session, &clouds, config, options)
}
