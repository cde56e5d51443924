//! 3D/2D line association and robust translation refinement.
//!
//! A vertical line candidate sampled at height `h` projects to `(u, v)`; its
//! residual against an image line is the algebraic distance
//! `w0·u + w1·v + w2`, which is a signed pixel distance for normalized lines.
//!
//! The residual is linear-fractional in the translation. Freezing the depth
//! of every sample at the current estimate makes it affine, so each IRLS
//! iteration is one weighted linear least-squares solve.
//!
//! Points on a vertical line slide along its image when the camera moves
//! along the lidar vertical axis, so these residuals carry no information on
//! the Y component of the translation. Refinement updates X and Z only and
//! keeps Y from the initial estimate.

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{CalibError, Result};
use crate::geom::{
    project_point, segment_to_line, CameraIntrinsics, Line2D, Quat, Rigid3, Segment2D,
    VerticalLine3D,
};
use crate::lines::{in_fov, segment_agrees, vertical_direction_in_image};

/// Relative singular value below which the horizontal translation is unconstrained.
const RANK_TOLERANCE: f64 = 1e-9;

const MAX_HALVINGS: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineMatch {
    pub pose_id: usize,
    pub candidate_index: usize,
    pub segment_index: usize,
    pub candidate: VerticalLine3D,
    pub line: Line2D,
    /// Residual with the larger magnitude of the two sample heights, pixels.
    pub residual: f64,
    /// Residuals at `y_min` and `y_max`.
    pub residuals: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchConfig {
    /// Direction tolerance between a segment and the expected image direction, radians.
    pub angle_tol: f64,
    /// Largest accepted |residual| at either sample height, pixels.
    pub dist_tol: f64,
    /// Image border margin for the field-of-view test, pixels.
    pub fov_margin: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            angle_tol: 5f64.to_radians(),
            dist_tol: 15.0,
            fov_margin: 5.0,
        }
    }
}

/// Algebraic point-to-line distance of the candidate sampled at `sample_height`.
pub fn point_line_residual(
    line: &Line2D,
    candidate: &VerticalLine3D,
    sample_height: f64,
    extrinsic: &Rigid3,
    k: &CameraIntrinsics,
) -> Result<f64> {
    let p = project_point(k, extrinsic, &candidate.point_at(sample_height))?;
    Ok(line.eval(p.u, p.v))
}

/// Associates the candidates seen at one pose with that pose's image segments.
///
/// Candidates outside the field of view are dropped; for each remaining one
/// the segments whose direction agrees with the projected vertical direction
/// are scored at both sample heights. Pairings within `dist_tol` at both
/// heights are accepted greedily by ascending residual, each segment used at
/// most once.
pub fn match_lines(
    candidates: &[VerticalLine3D],
    segments: &[Segment2D],
    extrinsic: &Rigid3,
    k: &CameraIntrinsics,
    config: &MatchConfig,
    pose_id: usize,
) -> Vec<LineMatch> {
    let lines: Vec<Option<Line2D>> = segments.iter().map(|s| segment_to_line(s).ok()).collect();
    let mut feasible = Vec::new();
    for (ci, cand) in candidates.iter().enumerate() {
        if !in_fov(cand, k, extrinsic, config.fov_margin) {
            continue;
        }
        let Ok(dir) = vertical_direction_in_image(k, extrinsic, cand) else {
            continue;
        };
        for (si, seg) in segments.iter().enumerate() {
            let Some(line) = lines[si] else { continue };
            if !segment_agrees(seg, &dir, config.angle_tol) {
                continue;
            }
            let r0 = point_line_residual(&line, cand, cand.y_min, extrinsic, k);
            let r1 = point_line_residual(&line, cand, cand.y_max, extrinsic, k);
            let (Ok(r0), Ok(r1)) = (r0, r1) else { continue };
            let score = r0.abs().max(r1.abs());
            if score <= config.dist_tol {
                feasible.push((score, ci, si, [r0, r1]));
            }
        }
    }
    feasible.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut cand_used = vec![false; candidates.len()];
    let mut seg_used = vec![false; segments.len()];
    let mut out = Vec::new();
    for (_, ci, si, residuals) in feasible {
        if cand_used[ci] || seg_used[si] {
            continue;
        }
        cand_used[ci] = true;
        seg_used[si] = true;
        let residual = if residuals[0].abs() >= residuals[1].abs() {
            residuals[0]
        } else {
            residuals[1]
        };
        out.push(LineMatch {
            pose_id,
            candidate_index: ci,
            segment_index: si,
            candidate: candidates[ci],
            line: lines[si].expect("matched segment has a line"),
            residual,
            residuals,
        });
    }
    out.sort_by_key(|m| m.candidate_index);
    out
}

/// IRLS weight of the Huber penalty: 1 inside `[-m, m]`, `m/|u|` outside.
pub fn huber_weight(residual: f64, m: f64) -> f64 {
    let a = residual.abs();
    if a <= m {
        1.0
    } else {
        m / a
    }
}

/// Huber penalty whose IRLS weight is [`huber_weight`]: quadratic inside, linear outside.
pub fn huber_penalty(residual: f64, m: f64) -> f64 {
    let a = residual.abs();
    if a <= m {
        a * a
    } else {
        2.0 * m * a - m * m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PenaltyMode {
    Ols,
    Huber,
}

impl std::str::FromStr for PenaltyMode {
    type Err = CalibError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ols" => Ok(PenaltyMode::Ols),
            "huber" => Ok(PenaltyMode::Huber),
            other => Err(CalibError::Config(format!("unknown penalty {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    pub huber_m: f64,
    pub max_iterations: usize,
    pub step_tolerance: f64,
    pub penalty_mode: PenaltyMode,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            huber_m: 3.0,
            max_iterations: 50,
            step_tolerance: 1e-8,
            penalty_mode: PenaltyMode::Huber,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.huber_m > 0.0) || self.max_iterations < 1 || !(self.step_tolerance >= 0.0) {
            return Err(CalibError::Config(format!(
                "invalid refine config {self:?}"
            )));
        }
        Ok(())
    }

    fn weight(&self, r: f64) -> f64 {
        match self.penalty_mode {
            PenaltyMode::Ols => 1.0,
            PenaltyMode::Huber => huber_weight(r, self.huber_m),
        }
    }

    fn penalty(&self, r: f64) -> f64 {
        match self.penalty_mode {
            PenaltyMode::Ols => r * r,
            PenaltyMode::Huber => huber_penalty(r, self.huber_m),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineResult {
    pub translation: Vector3<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// `sqrt(Σ ω r² / Σ ω)` at the final estimate, pixels.
    pub final_weighted_rms: f64,
    /// Share of residual rows with weight at least 0.5.
    pub inlier_fraction: f64,
    /// Penalty `Σ φ(r)` at the initial estimate and after every iteration.
    pub objective_history: Vec<f64>,
}

/// One affine residual row `r(t) = a·t − b`, exact at the depth it was frozen at.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualRow {
    pub a: Vector3<f64>,
    pub b: f64,
    pub depth: f64,
}

/// Frozen-depth rows of one match at both sample heights, linearized at `translation`.
pub fn residual_rows(
    m: &LineMatch,
    rotation: &Quat,
    translation: &Vector3<f64>,
    k: &CameraIntrinsics,
) -> Result<[ResidualRow; 2]> {
    // w·K·Rᵀ(p − t) = g·(p − t) with g = R Kᵀ w
    let g = rotation.rotate(&(k.matrix().transpose() * m.line.coefficients()));
    let ext = Rigid3::new(*rotation, *translation);
    let row = |h: f64| -> Result<ResidualRow> {
        let p = m.candidate.point_at(h);
        let depth = project_point(k, &ext, &p)?.depth;
        Ok(ResidualRow {
            a: -g / depth,
            b: -g.dot(&p) / depth,
            depth,
        })
    };
    Ok([row(m.candidate.y_min)?, row(m.candidate.y_max)?])
}

fn residuals_at(
    matches: &[LineMatch],
    rotation: &Quat,
    t: &Vector3<f64>,
    k: &CameraIntrinsics,
) -> Result<Vec<ResidualRow>> {
    let mut rows = Vec::with_capacity(2 * matches.len());
    for m in matches {
        rows.extend(residual_rows(m, rotation, t, k)?);
    }
    Ok(rows)
}

/// IRLS refinement of the horizontal translation with the rotation held fixed.
pub fn refine_translation(
    matches: &[LineMatch],
    rotation: &Quat,
    t0: &Vector3<f64>,
    k: &CameraIntrinsics,
    config: &RefineConfig,
) -> Result<RefineResult> {
    config.validate()?;
    if matches.is_empty() {
        return Err(CalibError::Geometry("no line matches".into()));
    }
    let mut t = *t0;
    let mut rows = residuals_at(matches, rotation, &t, k)?;
    let residual = |rows: &[ResidualRow], t: &Vector3<f64>| -> Vec<f64> {
        rows.iter().map(|r| r.a.dot(t) - r.b).collect()
    };
    let mut r = residual(&rows, &t);
    let mut history = vec![r.iter().map(|&x| config.penalty(x)).sum::<f64>()];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < config.max_iterations {
        iterations += 1;
        let n = rows.len();
        let mut a = DMatrix::zeros(n, 2);
        let mut b = DVector::zeros(n);
        for (i, (row, ri)) in rows.iter().zip(&r).enumerate() {
            let s = config.weight(*ri).sqrt();
            a[(i, 0)] = s * row.a.x;
            a[(i, 1)] = s * row.a.z;
            b[i] = s * (row.b - row.a.y * t.y);
        }
        let sv = a.singular_values();
        let max_sv = sv.max();
        let min_sv = sv.min();
        if !(min_sv > RANK_TOLERANCE * max_sv) {
            return Err(CalibError::Geometry(format!(
                "horizontal translation unconstrained by {} matches",
                matches.len()
            )));
        }
        let qr = a.qr();
        let x = qr
            .r()
            .solve_upper_triangular(&(qr.q().transpose() * &b))
            .ok_or_else(|| CalibError::Geometry("singular IRLS system".into()))?;
        // Re-freezing the depths can push the exact objective up; halve the
        // step until it does not.
        let current = *history.last().unwrap();
        let mut next = Vector3::new(x[0], t.y, x[1]);
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let next_rows = residuals_at(matches, rotation, &next, k)?;
            let next_r = residual(&next_rows, &next);
            let objective: f64 = next_r.iter().map(|&x| config.penalty(x)).sum();
            if objective <= current {
                accepted = Some((next_rows, next_r, objective));
                break;
            }
            next = t + 0.5 * (next - t);
        }
        let Some((next_rows, next_r, objective)) = accepted else {
            converged = true;
            break;
        };
        let step = (next - t).norm();
        t = next;
        rows = next_rows;
        r = next_r;
        history.push(objective);
        if step < config.step_tolerance {
            converged = true;
            break;
        }
    }
    let weights: Vec<f64> = r.iter().map(|&x| config.weight(x)).collect();
    let wsum: f64 = weights.iter().sum();
    let wsq: f64 = weights.iter().zip(&r).map(|(w, x)| w * x * x).sum();
    Ok(RefineResult {
        translation: t,
        iterations,
        converged,
        final_weighted_rms: (wsq / wsum).sqrt(),
        inlier_fraction: weights.iter().filter(|&&w| w >= 0.5).count() as f64
            / weights.len() as f64,
        objective_history: history,
    })
}

/// Translation error norm and its ratio to the ground-truth norm.
pub fn error_ratio(t_est: &Vector3<f64>, t_gt: &Vector3<f64>) -> Result<(f64, f64)> {
    let gt_norm = t_gt.norm();
    if !(gt_norm > 0.0) {
        return Err(CalibError::ZeroGroundTruth);
    }
    let error = (t_est - t_gt).norm();
    Ok((error, error / gt_norm))
}
