//! Deterministic synthetic ground truth: a room with walls and poles, a rig
//! trajectory, noisy per-pair motion estimates, lidar point clouds and image
//! line segments with correspondence labels.
//!
//! World coordinates put the lidar origin at `y = 0` with `+y` up and the
//! floor at `floor_y`. Even-indexed poses are level so the lidar vertical axis
//! is the world vertical there; odd-indexed poses are tilted to make the
//! motion excite all rotation axes. Sensor observations are only emitted for
//! level poses.

use nalgebra::{Vector2, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CalibError, Result};
use crate::geom::{
    project_point, rotation_angle, rotation_error, CameraIntrinsics, Quat, Rigid3, Segment2D,
};
use crate::handeye::{pair_indices, MotionPair};
use crate::lines::PointCloud;
use crate::refine::error_ratio;

const TRAJECTORY_STREAM: u64 = 0;
const PAIR_STREAM: u64 = 1;
const SCENE_STREAM: u64 = 2;
const POSE_STREAM_BASE: u64 = 1 << 16;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn normal(sigma: f64) -> Normal<f64> {
    Normal::new(0.0, sigma.max(0.0)).expect("finite sigma")
}

fn gaussian3(rng: &mut ChaCha8Rng, sigma: f64) -> Vector3<f64> {
    if sigma == 0.0 {
        return Vector3::zeros();
    }
    let n = normal(sigma);
    Vector3::new(n.sample(rng), n.sample(rng), n.sample(rng))
}

fn uniform(rng: &mut ChaCha8Rng, range: [f64; 2]) -> f64 {
    if range[1] > range[0] {
        rng.random_range(range[0]..range[1])
    } else {
        range[0]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub x_range: [f64; 2],
    pub z_range: [f64; 2],
    pub n_poles: usize,
    /// Floor-plane wall segments, each `[[x0, z0], [x1, z1]]`.
    pub wall_segments: Vec<[[f64; 2]; 2]>,
    pub wall_height: f64,
    pub floor_y: f64,
    pub pole_height_range: [f64; 2],
    /// Lidar samples per meter of pole height and per square meter of wall.
    pub points_per_meter: f64,
    /// Lidar samples per square meter of floor.
    pub floor_density: f64,
    /// Isotropic lidar range noise, meters.
    pub point_noise: f64,
    pub min_pole_separation: f64,
    /// Minimum pole distance from the room boundary, meters.
    pub wall_clearance: f64,
    pub rng_seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        let (a, b) = (-5.0, 5.0);
        Self {
            x_range: [a, b],
            z_range: [a, b],
            n_poles: 8,
            wall_segments: vec![
                [[a, a], [b, a]],
                [[b, a], [b, b]],
                [[b, b], [a, b]],
                [[a, b], [a, a]],
            ],
            wall_height: 3.0,
            floor_y: -0.8,
            pole_height_range: [2.0, 3.0],
            points_per_meter: 200.0,
            floor_density: 4.0,
            point_noise: 0.005,
            min_pole_separation: 1.0,
            wall_clearance: 1.0,
            rng_seed: 29,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CalibError::Config(m.to_string()));
        if !(self.x_range[1] > self.x_range[0]) || !(self.z_range[1] > self.z_range[0]) {
            return bad("scene extent is degenerate");
        }
        if !(self.points_per_meter > 0.0) || !(self.floor_density >= 0.0) {
            return bad("scene densities must be positive");
        }
        if !(self.point_noise >= 0.0) || !(self.wall_height > 0.0) {
            return bad("invalid wall height or point noise");
        }
        if !(self.pole_height_range[0] > 0.0
            && self.pole_height_range[1] >= self.pole_height_range[0])
        {
            return bad("invalid pole height range");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LineKind {
    Pole,
    WallEdge,
}

/// Ground-truth vertical line in world coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneLine {
    pub id: usize,
    pub kind: LineKind,
    pub x: f64,
    pub z: f64,
    pub y_min: f64,
    pub y_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub spec: SceneSpec,
    pub lines: Vec<SceneLine>,
}

/// Places poles and records every pole and wall end as a ground-truth line.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = rng_for(spec.rng_seed, SCENE_STREAM);
    let mut lines: Vec<SceneLine> = Vec::new();
    let top = spec.floor_y + spec.wall_height;
    for wall in &spec.wall_segments {
        for end in wall {
            let known = lines
                .iter()
                .any(|l| (l.x - end[0]).hypot(l.z - end[1]) < 1e-6);
            if !known {
                lines.push(SceneLine {
                    id: lines.len(),
                    kind: LineKind::WallEdge,
                    x: end[0],
                    z: end[1],
                    y_min: spec.floor_y,
                    y_max: top,
                });
            }
        }
    }
    let lo_x = spec.x_range[0] + spec.wall_clearance;
    let hi_x = spec.x_range[1] - spec.wall_clearance;
    let lo_z = spec.z_range[0] + spec.wall_clearance;
    let hi_z = spec.z_range[1] - spec.wall_clearance;
    if spec.n_poles > 0 && (hi_x <= lo_x || hi_z <= lo_z) {
        return Err(CalibError::Config(
            "no room for poles inside wall clearance".into(),
        ));
    }
    let mut poles: Vec<Vector2<f64>> = Vec::new();
    for _ in 0..spec.n_poles {
        let mut placed = false;
        for _ in 0..10_000 {
            let p = Vector2::new(rng.random_range(lo_x..hi_x), rng.random_range(lo_z..hi_z));
            if poles
                .iter()
                .all(|q| (q - p).norm() >= spec.min_pole_separation)
            {
                poles.push(p);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(CalibError::Config(format!(
                "cannot place {} poles {} m apart",
                spec.n_poles, spec.min_pole_separation
            )));
        }
        let p = poles[poles.len() - 1];
        let h = uniform(&mut rng, spec.pole_height_range);
        lines.push(SceneLine {
            id: lines.len(),
            kind: LineKind::Pole,
            x: p.x,
            z: p.y,
            y_min: spec.floor_y,
            y_max: spec.floor_y + h,
        });
    }
    Ok(Scene {
        spec: spec.clone(),
        lines,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DegenerateMode {
    None,
    PureTranslation,
    SingleAxis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrajectorySpec {
    pub n_poses: usize,
    /// Heading change between consecutive poses, radians (random sign).
    pub rotation_magnitude_range: [f64; 2],
    /// Tilt of the odd-indexed poses about a random horizontal axis, radians.
    pub tilt_range: [f64; 2],
    /// Horizontal displacement between consecutive poses, meters.
    pub translation_magnitude_range: [f64; 2],
    /// Region (x, z) the lidar origin stays in.
    pub region_x: [f64; 2],
    pub region_z: [f64; 2],
    /// Per-component σ of the lidar rotation error (rotation vector, radians).
    pub lidar_rot_noise: f64,
    /// Per-component σ of the lidar translation error, meters.
    pub lidar_trans_noise: f64,
    /// Multiplier applied to `lidar_trans_noise` on the vertical axis.
    pub vertical_noise_multiplier: f64,
    pub cam_rot_noise: f64,
    /// Per-component σ of the rotation perturbing the camera translation direction, radians.
    pub cam_trans_noise: f64,
    pub cam_corrupt_fraction: f64,
    /// Magnitude of a gross camera rotation corruption, radians.
    pub corrupt_angle_range: [f64; 2],
    /// Largest angle between a corruption's rotation axis and the pair's own axis, radians.
    pub corrupt_axis_lean: f64,
    pub degenerate_mode: DegenerateMode,
    pub rng_seed: u64,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        Self {
            n_poses: 20,
            rotation_magnitude_range: [15f64.to_radians(), 60f64.to_radians()],
            tilt_range: [30f64.to_radians(), 60f64.to_radians()],
            translation_magnitude_range: [0.3, 1.5],
            region_x: [-3.0, 3.0],
            region_z: [-3.0, 3.0],
            lidar_rot_noise: 0.0005,
            lidar_trans_noise: 0.005,
            vertical_noise_multiplier: 2.0,
            cam_rot_noise: 0.0005,
            cam_trans_noise: 0.06,
            cam_corrupt_fraction: 0.2,
            corrupt_angle_range: [3f64.to_radians(), 7f64.to_radians()],
            corrupt_axis_lean: 60f64.to_radians(),
            degenerate_mode: DegenerateMode::None,
            rng_seed: 28,
        }
    }
}

impl TrajectorySpec {
    /// Noise-free copy of this spec.
    pub fn noiseless(&self) -> Self {
        Self {
            lidar_rot_noise: 0.0,
            lidar_trans_noise: 0.0,
            cam_rot_noise: 0.0,
            cam_trans_noise: 0.0,
            cam_corrupt_fraction: 0.0,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CalibError::Config(m));
        if self.n_poses < 3 {
            return bad(format!(
                "n_poses = {} is below the minimum of 3",
                self.n_poses
            ));
        }
        let sigmas = [
            self.lidar_rot_noise,
            self.lidar_trans_noise,
            self.vertical_noise_multiplier,
            self.cam_rot_noise,
            self.cam_trans_noise,
        ];
        if sigmas.iter().any(|s| !(*s >= 0.0)) {
            return bad("noise levels must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.cam_corrupt_fraction) {
            return bad("cam_corrupt_fraction must lie in [0, 1]".into());
        }
        if !(self.region_x[1] >= self.region_x[0] && self.region_z[1] >= self.region_z[0]) {
            return bad("trajectory region is inverted".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// World-from-lidar poses.
    pub poses: Vec<Rigid3>,
    /// Whether each pose is level (lidar Y along world vertical).
    pub level: Vec<bool>,
    /// Exact consecutive motions `P_k⁻¹ P_{k+1}`.
    pub relative_motions: Vec<Rigid3>,
}

fn yaw(angle: f64) -> Quat {
    Quat::from_axis_angle(&Vector3::y(), angle)
}

/// Samples a random rig trajectory inside the configured region.
pub fn generate_trajectory(spec: &TrajectorySpec) -> Result<Trajectory> {
    spec.validate()?;
    let mut rng = rng_for(spec.rng_seed, TRAJECTORY_STREAM);
    let mut poses = Vec::with_capacity(spec.n_poses);
    let mut level = Vec::with_capacity(spec.n_poses);
    let mut heading = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    let mut pos = Vector2::new(
        uniform(&mut rng, spec.region_x),
        uniform(&mut rng, spec.region_z),
    );
    for k in 0..spec.n_poses {
        if k > 0 {
            if spec.degenerate_mode != DegenerateMode::PureTranslation {
                let step = uniform(&mut rng, spec.rotation_magnitude_range);
                heading += if rng.random_bool(0.5) { step } else { -step };
            }
            let mut next = pos;
            for _ in 0..1000 {
                let dir = rng.random_range(0.0..std::f64::consts::TAU);
                let d = uniform(&mut rng, spec.translation_magnitude_range);
                next = pos + Vector2::new(dir.cos(), dir.sin()) * d;
                if (spec.region_x[0]..=spec.region_x[1]).contains(&next.x)
                    && (spec.region_z[0]..=spec.region_z[1]).contains(&next.y)
                {
                    break;
                }
            }
            pos = Vector2::new(
                next.x.clamp(spec.region_x[0], spec.region_x[1]),
                next.y.clamp(spec.region_z[0], spec.region_z[1]),
            );
        }
        let tilted = spec.degenerate_mode == DegenerateMode::None && k % 2 == 1;
        let mut rotation = yaw(heading);
        if tilted {
            let axis_angle = rng.random_range(0.0..std::f64::consts::TAU);
            let axis = Vector3::new(axis_angle.cos(), 0.0, axis_angle.sin());
            let tilt = uniform(&mut rng, spec.tilt_range);
            rotation = Quat::from_axis_angle(&axis, tilt) * rotation;
        }
        poses.push(Rigid3::new(
            rotation.normalized(),
            Vector3::new(pos.x, 0.0, pos.y),
        ));
        level.push(!tilted);
    }
    let relative_motions = poses
        .windows(2)
        .map(|w| w[0].inverse().compose(&w[1]))
        .collect();
    Ok(Trajectory {
        poses,
        level,
        relative_motions,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPairs {
    pub pairs: Vec<MotionPair>,
    /// Whether the camera rotation of each pair was grossly corrupted.
    pub corrupted: Vec<bool>,
}

/// Per-pair motion estimates for every pose pair, each with independent noise.
///
/// The camera motion is the conjugate `T⁻¹ L T` of the exact lidar motion with
/// its translation reduced to a unit direction. Every pair is an independent
/// estimate, so each direction is usable for the translation solve. Corrupted
/// pairs get an extra rotation whose axis leans at most `corrupt_axis_lean`
/// from their own axis, so the camera rotation angle changes by at least half
/// the corruption magnitude; the same rotation skews their translation direction.
pub fn make_motion_pairs(
    poses: &[Rigid3],
    extrinsic: &Rigid3,
    spec: &TrajectorySpec,
) -> LabeledPairs {
    let mut rng = rng_for(spec.rng_seed, PAIR_STREAM);
    let inv_ext = extrinsic.inverse();
    let mut pairs = Vec::new();
    let mut corrupted = Vec::new();
    for (id, (i, j)) in pair_indices(poses.len()).into_iter().enumerate() {
        let exact = poses[i].inverse().compose(&poses[j]);
        let cam = inv_ext.compose(&exact).compose(extrinsic);

        let mut lidar_t_noise = gaussian3(&mut rng, spec.lidar_trans_noise);
        lidar_t_noise.y *= spec.vertical_noise_multiplier;
        let lidar = Rigid3::new(
            (Quat::from_rotation_vector(&gaussian3(&mut rng, spec.lidar_rot_noise))
                * exact.rotation)
                .normalized(),
            exact.translation + lidar_t_noise,
        );

        let mut cam_q = (Quat::from_rotation_vector(&gaussian3(&mut rng, spec.cam_rot_noise))
            * cam.rotation)
            .normalized();
        let corrupt = spec.cam_corrupt_fraction > 0.0 && rng.random_bool(spec.cam_corrupt_fraction);
        let mut corruption = Quat::identity();
        if corrupt {
            let delta = uniform(&mut rng, spec.corrupt_angle_range);
            let angle = rotation_angle(&cam_q).unwrap_or(0.0);
            let axis = {
                let q = if cam_q.w < 0.0 { -cam_q } else { cam_q };
                let v = q.vector();
                if v.norm() > 1e-9 {
                    v.normalize()
                } else {
                    Vector3::y()
                }
            };
            // lean the corruption axis away from the motion axis so it also biases
            // the axis, while keeping most of delta in the rotation angle
            let helper = if axis.x.abs() < 0.9 {
                Vector3::x()
            } else {
                Vector3::z()
            };
            let u = axis.cross(&helper).normalize();
            let w = axis.cross(&u);
            let lean = uniform(&mut rng, [0.0, spec.corrupt_axis_lean]);
            let azimuth = rng.random_range(0.0..std::f64::consts::TAU);
            let leaned = axis * lean.cos() + (u * azimuth.cos() + w * azimuth.sin()) * lean.sin();
            // shrinking a small rotation past zero would change its angle by less than delta
            let sign = if angle > delta + 1f64.to_radians() && rng.random_bool(0.5) {
                -1.0
            } else {
                1.0
            };
            corruption = Quat::from_axis_angle(&leaned, sign * delta);
            cam_q = (corruption * cam_q).normalized();
        }

        let n = cam.translation.norm();
        let dir = if n > 1e-12 {
            let noise = Quat::from_rotation_vector(&gaussian3(&mut rng, spec.cam_trans_noise));
            (corruption * noise)
                .rotate(&(cam.translation / n))
                .normalize()
        } else {
            Vector3::zeros()
        };
        pairs.push(MotionPair {
            id,
            pose_i: i,
            pose_j: j,
            lidar_motion: lidar,
            cam_rotation: cam_q,
            cam_translation_dir: dir,
            valid: n > 1e-12,
        });
        corrupted.push(corrupt);
    }
    LabeledPairs { pairs, corrupted }
}

/// Samples the scene's surfaces as seen by a lidar at `pose` (world-from-lidar).
pub fn observe_lidar(scene: &Scene, pose: &Rigid3, rng: &mut ChaCha8Rng) -> PointCloud {
    let spec = &scene.spec;
    let mut world = Vec::new();
    let noise = spec.point_noise;
    for line in scene.lines.iter().filter(|l| l.kind == LineKind::Pole) {
        let n = ((line.y_max - line.y_min) * spec.points_per_meter).round() as usize;
        for _ in 0..n {
            let y = rng.random_range(line.y_min..line.y_max);
            world.push(Vector3::new(line.x, y, line.z) + gaussian3(rng, noise));
        }
    }
    for wall in &spec.wall_segments {
        let a = Vector2::from(wall[0]);
        let b = Vector2::from(wall[1]);
        let len = (b - a).norm();
        let n = (len * spec.wall_height * spec.points_per_meter).round() as usize;
        for _ in 0..n {
            let s: f64 = rng.random();
            let p = a + (b - a) * s;
            let y = rng.random_range(spec.floor_y..spec.floor_y + spec.wall_height);
            world.push(Vector3::new(p.x, y, p.y) + gaussian3(rng, noise));
        }
    }
    let area = (spec.x_range[1] - spec.x_range[0]) * (spec.z_range[1] - spec.z_range[0]);
    let n_floor = (area * spec.floor_density).round() as usize;
    for _ in 0..n_floor {
        let x = rng.random_range(spec.x_range[0]..spec.x_range[1]);
        let z = rng.random_range(spec.z_range[0]..spec.z_range[1]);
        world.push(Vector3::new(x, spec.floor_y, z) + gaussian3(rng, noise));
    }
    PointCloud::new(
        world
            .iter()
            .map(|p| pose.inverse_transform_point(p))
            .collect(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraObsSpec {
    /// Per-coordinate σ of segment endpoint noise, pixels.
    pub noise_px: f64,
    /// Random clutter segments added anywhere in the image.
    pub outlier_count: usize,
    /// Fraction of visible lines whose detection is replaced by a parallel
    /// segment offset sideways, as produced by a nearby spurious edge.
    pub displaced_fraction: f64,
    pub displacement_px: [f64; 2],
    /// Shortest visible segment emitted, pixels.
    pub min_segment_px: f64,
}

impl Default for CameraObsSpec {
    fn default() -> Self {
        Self {
            noise_px: 0.5,
            outlier_count: 0,
            displaced_fraction: 0.2,
            displacement_px: [4.0, 12.0],
            min_segment_px: 20.0,
        }
    }
}

impl CameraObsSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_px >= 0.0) || !(0.0..=1.0).contains(&self.displaced_fraction) {
            return Err(CalibError::Config(format!("invalid camera spec {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "line")]
pub enum SegmentLabel {
    Line(usize),
    Outlier,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledSegment {
    pub segment: Segment2D,
    pub label: SegmentLabel,
}

/// Liang–Barsky clip of a segment to `[0, w] × [0, h]`.
fn clip_to_image(
    a: Vector2<f64>,
    b: Vector2<f64>,
    w: f64,
    h: f64,
) -> Option<(Vector2<f64>, Vector2<f64>)> {
    let d = b - a;
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    for (p, q) in [(-d.x, a.x), (d.x, w - a.x), (-d.y, a.y), (d.y, h - a.y)] {
        if p == 0.0 {
            if q < 0.0 {
                return None;
            }
        } else {
            let r = q / p;
            if p < 0.0 {
                t0 = t0.max(r);
            } else {
                t1 = t1.min(r);
            }
        }
    }
    (t0 < t1).then(|| (a + d * t0, a + d * t1))
}

/// Image segments of the scene lines visible from `pose`, plus labeled outliers.
pub fn observe_camera(
    scene: &Scene,
    pose: &Rigid3,
    extrinsic: &Rigid3,
    k: &CameraIntrinsics,
    spec: &CameraObsSpec,
    rng: &mut ChaCha8Rng,
) -> Vec<LabeledSegment> {
    let mut visible = Vec::new();
    for line in &scene.lines {
        let lo = pose.inverse_transform_point(&Vector3::new(line.x, line.y_min, line.z));
        let hi = pose.inverse_transform_point(&Vector3::new(line.x, line.y_max, line.z));
        let (Ok(a), Ok(b)) = (
            project_point(k, extrinsic, &lo),
            project_point(k, extrinsic, &hi),
        ) else {
            continue;
        };
        if a.depth < 0.1 || b.depth < 0.1 {
            continue;
        }
        if let Some((p, q)) = clip_to_image(a.pixel(), b.pixel(), k.width, k.height) {
            if (q - p).norm() >= spec.min_segment_px {
                visible.push((line.id, p, q));
            }
        }
    }
    let n_displaced = (spec.displaced_fraction * visible.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..visible.len()).collect();
    order.shuffle(rng);
    let mut displaced = vec![false; visible.len()];
    for &i in order.iter().take(n_displaced) {
        displaced[i] = true;
    }
    let noise = normal(spec.noise_px);
    let jitter = |p: Vector2<f64>, rng: &mut ChaCha8Rng| {
        if spec.noise_px > 0.0 {
            p + Vector2::new(noise.sample(rng), noise.sample(rng))
        } else {
            p
        }
    };
    let mut out = Vec::new();
    for (i, &(id, p, q)) in visible.iter().enumerate() {
        if displaced[i] {
            let dir = (q - p).normalize();
            let normal = Vector2::new(-dir.y, dir.x);
            let offset =
                uniform(rng, spec.displacement_px) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            out.push(LabeledSegment {
                segment: Segment2D::new(
                    jitter(p + normal * offset, rng),
                    jitter(q + normal * offset, rng),
                ),
                label: SegmentLabel::Outlier,
            });
        } else {
            out.push(LabeledSegment {
                segment: Segment2D::new(jitter(p, rng), jitter(q, rng)),
                label: SegmentLabel::Line(id),
            });
        }
    }
    for _ in 0..spec.outlier_count {
        let p = Vector2::new(
            rng.random_range(0.0..k.width),
            rng.random_range(0.0..k.height),
        );
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        let len = rng.random_range(30.0..200.0);
        let q = p + Vector2::new(angle.cos(), angle.sin()) * len;
        out.push(LabeledSegment {
            segment: Segment2D::new(p, q),
            label: SegmentLabel::Outlier,
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub scene: SceneSpec,
    pub trajectory: TrajectorySpec,
    pub camera: CameraObsSpec,
    pub intrinsics: CameraIntrinsics,
    /// Ground-truth extrinsic (camera to lidar).
    pub extrinsic: Rigid3,
}

/// A camera looking horizontally along lidar `+z` turned by `heading`, with
/// its image `y` axis pointing down the lidar vertical, slightly pitched and rolled.
pub fn default_extrinsic() -> Rigid3 {
    let upright = Quat::new(0.0, 0.0, 0.0, 1.0);
    let roll = Quat::from_axis_angle(&Vector3::z(), 3f64.to_radians());
    let pitch = Quat::from_axis_angle(&Vector3::x(), 5f64.to_radians());
    let heading = yaw(25f64.to_radians());
    Rigid3::new(
        (heading * pitch * roll * upright).normalized(),
        Vector3::new(0.4224, 0.6745, -0.4616),
    )
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            scene: SceneSpec::default(),
            trajectory: TrajectorySpec::default(),
            camera: CameraObsSpec::default(),
            intrinsics: CameraIntrinsics {
                fx: 400.0,
                fy: 400.0,
                ..CameraIntrinsics::default()
            },
            extrinsic: default_extrinsic(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.trajectory.validate()?;
        self.camera.validate()?;
        self.intrinsics.validate()?;
        if !self.extrinsic.rotation.is_unit() {
            return Err(CalibError::Config("extrinsic rotation is not unit".into()));
        }
        Ok(())
    }

    /// Same rig and scene with every noise source and outlier switched off.
    pub fn noiseless(&self) -> Self {
        Self {
            scene: SceneSpec {
                point_noise: 0.0,
                ..self.scene.clone()
            },
            trajectory: self.trajectory.noiseless(),
            camera: CameraObsSpec {
                noise_px: 0.0,
                outlier_count: 0,
                displaced_fraction: 0.0,
                ..self.camera.clone()
            },
            ..self.clone()
        }
    }

    /// Reseeds the scene and trajectory from one seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.scene.rng_seed = seed.wrapping_mul(2).wrapping_add(1);
        self.trajectory.rng_seed = seed.wrapping_mul(2);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimObservation {
    pub pose_index: usize,
    pub cloud: PointCloud,
    pub segments: Vec<LabeledSegment>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimOutput {
    pub config: SimConfig,
    pub scene: Scene,
    pub trajectory: Trajectory,
    pub motion_pairs: Vec<MotionPair>,
    pub corrupted: Vec<bool>,
    pub observations: Vec<SimObservation>,
}

impl SimOutput {
    pub fn ground_truth(&self) -> &Rigid3 {
        &self.config.extrinsic
    }

    pub fn intrinsics(&self) -> &CameraIntrinsics {
        &self.config.intrinsics
    }

    /// Ground-truth lines expressed in the lidar frame of `pose_index`.
    pub fn lines_in_pose(&self, pose_index: usize) -> Vec<(usize, Vector3<f64>, Vector3<f64>)> {
        let pose = &self.trajectory.poses[pose_index];
        self.scene
            .lines
            .iter()
            .map(|l| {
                (
                    l.id,
                    pose.inverse_transform_point(&Vector3::new(l.x, l.y_min, l.z)),
                    pose.inverse_transform_point(&Vector3::new(l.x, l.y_max, l.z)),
                )
            })
            .collect()
    }
}

/// Runs the whole generator. Identical configs give bit-identical output.
pub fn simulate(config: &SimConfig) -> Result<SimOutput> {
    config.validate()?;
    let scene = generate_scene(&config.scene)?;
    let trajectory = generate_trajectory(&config.trajectory)?;
    let labeled = make_motion_pairs(&trajectory.poses, &config.extrinsic, &config.trajectory);
    let seed = config.trajectory.rng_seed;
    let observations = trajectory
        .poses
        .par_iter()
        .enumerate()
        .filter(|(i, _)| trajectory.level[*i])
        .map(|(i, pose)| {
            let mut lidar_rng = rng_for(seed, POSE_STREAM_BASE + 2 * i as u64);
            let mut cam_rng = rng_for(seed, POSE_STREAM_BASE + 2 * i as u64 + 1);
            SimObservation {
                pose_index: i,
                cloud: observe_lidar(&scene, pose, &mut lidar_rng),
                segments: observe_camera(
                    &scene,
                    pose,
                    &config.extrinsic,
                    &config.intrinsics,
                    &config.camera,
                    &mut cam_rng,
                ),
            }
        })
        .collect();
    Ok(SimOutput {
        config: config.clone(),
        scene,
        trajectory,
        motion_pairs: labeled.pairs,
        corrupted: labeled.corrupted,
        observations,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Normalized rotation distance in `[0, 1]`.
    pub rotation_error: f64,
    /// The same distance scaled to degrees (`× 90`).
    pub rotation_error_deg: f64,
    pub translation_error: f64,
    /// `translation_error / |t_gt|`; absent for a zero ground-truth translation.
    pub translation_ratio: Option<f64>,
}

/// Compares an estimate with the ground truth.
pub fn evaluate(estimate: &Rigid3, gt: &Rigid3) -> Metrics {
    let rot = rotation_error(&estimate.rotation.normalized(), &gt.rotation.normalized())
        .expect("normalized quaternions");
    let (err, ratio) = match error_ratio(&estimate.translation, &gt.translation) {
        Ok((e, r)) => (e, Some(r)),
        Err(_) => ((estimate.translation - gt.translation).norm(), None),
    };
    Metrics {
        rotation_error: rot,
        rotation_error_deg: rot * 90.0,
        translation_error: err,
        translation_ratio: ratio,
    }
}
