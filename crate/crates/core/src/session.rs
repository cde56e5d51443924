//! On-disk formats: TOML configuration with dotted-key overrides, the JSON
//! session document, and CSV point clouds.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CalibError, Result};
use crate::geom::{CameraIntrinsics, Rigid3, Segment2D};
use crate::handeye::{InitResult, MotionPair};
use crate::lines::PointCloud;
use crate::pipeline::PipelineConfig;
use crate::refine::{LineMatch, RefineResult};
use crate::simulate::{SegmentLabel, SimConfig, SimOutput};

pub const SCHEMA_VERSION: &str = "1";

/// Everything a run can be configured with. Angles are radians, lengths
/// meters, image quantities pixels.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub simulation: SimConfig,
    pub calibration: PipelineConfig,
}

fn parse_override(item: &str) -> Result<(&str, toml::Value)> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| CalibError::Config(format!("override {item:?} is not key=value")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(CalibError::Config(format!(
            "override {item:?} has an empty key"
        )));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((key, value))
}

fn set_dotted(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts = key.split('.').peekable();
    let mut table = root;
    while let Some(part) = parts.next() {
        if parts.peek().is_none() {
            table.insert(part.to_string(), value);
            return Ok(());
        }
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CalibError::Config(format!("{key}: {part} is not a table")))?;
    }
    Ok(())
}

impl Config {
    /// Parses a TOML document and applies `key=value` overrides, where keys
    /// are dotted paths such as `calibration.refine.huber_m`.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let table = text
            .parse::<toml::Table>()
            .map_err(|e| CalibError::Config(e.to_string()))?;
        Self::from_table(table, overrides)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CalibError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text, overrides)
    }

    /// Returns a copy with overrides applied.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let table = toml::Table::try_from(self).map_err(|e| CalibError::Config(e.to_string()))?;
        Self::from_table(table, overrides)
    }

    fn from_table(mut table: toml::Table, overrides: &[String]) -> Result<Self> {
        for item in overrides {
            let (key, value) = parse_override(item)?;
            set_dotted(&mut table, key, value)?;
        }
        let config: Config = table
            .try_into()
            .map_err(|e: toml::de::Error| CalibError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.simulation.validate()?;
        self.calibration.validate()
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| CalibError::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseObservation {
    pub pose_index: usize,
    /// CSV point cloud, relative to the session file's directory.
    pub cloud: String,
    pub segments: Vec<Segment2D>,
    /// Ground-truth correspondence of each segment, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<SegmentLabel>>,
}

/// Results of the stages already run on a session.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageResults {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<InitResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matches: Option<Vec<LineMatch>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refined: Option<RefineResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSession {
    pub schema_version: String,
    pub intrinsics: CameraIntrinsics,
    pub n_poses: usize,
    pub motion_pairs: Vec<MotionPair>,
    /// Ground-truth corruption flag of each motion pair, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corrupted_pairs: Option<Vec<bool>>,
    pub observations: Vec<PoseObservation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<Rigid3>,
    pub config: Config,
    #[serde(default)]
    pub stages: StageResults,
}

impl CalibrationSession {
    /// Reads every referenced point cloud; `base` is the session file's directory.
    pub fn load_clouds(&self, base: &Path) -> Result<Vec<PointCloud>> {
        self.observations
            .par_iter()
            .map(|o| read_cloud(&base.join(&o.cloud)))
            .collect()
    }
}

fn malformed(path: &Path, message: impl ToString) -> CalibError {
    CalibError::Malformed {
        path: path.display().to_string(),
        message: message.to_string(),
    }
}

/// Writes `bytes` next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

pub fn write_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut writer = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    for p in &cloud.points {
        writer
            .serialize((p.x, p.y, p.z))
            .map_err(|e| malformed(path, e))?;
    }
    let bytes = writer.into_inner().map_err(|e| malformed(path, e))?;
    write_atomic(path, &bytes)
}

pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    if !path.is_file() {
        return Err(CalibError::MissingCloud(path.display().to_string()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| malformed(path, e))?;
    let points = reader
        .deserialize::<(f64, f64, f64)>()
        .map(|row| row.map(|(x, y, z)| nalgebra::Vector3::new(x, y, z)))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| malformed(path, e))?;
    Ok(PointCloud::new(points))
}

pub fn save_session(session: &CalibrationSession, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(session).map_err(|e| malformed(path, e))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// Loads a session and checks that every referenced cloud file exists.
pub fn load_session(path: &Path) -> Result<CalibrationSession> {
    let text = fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| malformed(path, e))?;
    match value.get("schema_version") {
        Some(serde_json::Value::String(v)) if v == SCHEMA_VERSION => {}
        Some(serde_json::Value::String(v)) => return Err(CalibError::UnsupportedSchema(v.clone())),
        Some(other) => return Err(CalibError::UnsupportedSchema(other.to_string())),
        None => return Err(malformed(path, "missing schema_version")),
    }
    let session: CalibrationSession =
        serde_json::from_value(value).map_err(|e| malformed(path, e))?;
    let base = session_dir(path);
    for o in &session.observations {
        let cloud = base.join(&o.cloud);
        if !cloud.is_file() {
            return Err(CalibError::MissingCloud(cloud.display().to_string()));
        }
    }
    Ok(session)
}

/// Directory that relative cloud paths of the session at `path` resolve against.
pub fn session_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// Session document for a simulator run; cloud `i` is referenced as
/// `<cloud_dir>/pose_<index>.csv`.
pub fn session_from_simulation(
    sim: &SimOutput,
    config: &Config,
    cloud_dir: &str,
) -> CalibrationSession {
    CalibrationSession {
        schema_version: SCHEMA_VERSION.to_string(),
        intrinsics: sim.config.intrinsics,
        n_poses: sim.trajectory.poses.len(),
        motion_pairs: sim.motion_pairs.clone(),
        corrupted_pairs: Some(sim.corrupted.clone()),
        observations: sim
            .observations
            .iter()
            .map(|o| PoseObservation {
                pose_index: o.pose_index,
                cloud: format!("{cloud_dir}/pose_{:04}.csv", o.pose_index),
                segments: o.segments.iter().map(|s| s.segment).collect(),
                labels: Some(o.segments.iter().map(|s| s.label).collect()),
            })
            .collect(),
        ground_truth: Some(sim.config.extrinsic),
        config: Config {
            simulation: sim.config.clone(),
            calibration: config.calibration.clone(),
        },
        stages: StageResults::default(),
    }
}

/// Writes a simulator run as a session at `path` with clouds in a sibling
/// `<stem>.clouds/` directory.
pub fn write_simulation(
    sim: &SimOutput,
    config: &Config,
    path: &Path,
) -> Result<CalibrationSession> {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "session".into());
    let session = session_from_simulation(sim, config, &format!("{stem}.clouds"));
    let base = session_dir(path);
    session
        .observations
        .par_iter()
        .zip(sim.observations.par_iter())
        .try_for_each(|(o, s)| write_cloud(&base.join(&o.cloud), &s.cloud))?;
    save_session(&session, path)?;
    Ok(session)
}
