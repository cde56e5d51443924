//! Initial extrinsic from paired sensor ego-motions.
//!
//! Every motion pair gives one quadrilateral constraint `L T = T C` between
//! the lidar motion `L`, the camera motion `C` and the unknown extrinsic `T`.
//! The rotation part `q_l ⊗ q = q ⊗ q_c` is linear in `q` and is solved over
//! all pairs at once by SVD. With the rotation fixed, the translation part
//! `(I − R_L) t + λ R d_c = t_L` is linear in `t` and one scale `λ` per pair,
//! since the camera only knows the direction `d_c` of its translation.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{CalibError, Result};
use crate::geom::{left_quat_matrix, right_quat_matrix, rotation_angle, Quat, Rigid3};

/// Relative singular-value threshold below which a linear system is rank deficient.
const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionPair {
    pub id: usize,
    pub pose_i: usize,
    pub pose_j: usize,
    /// Lidar motion mapping pose `j` coordinates into pose `i` coordinates.
    pub lidar_motion: Rigid3,
    pub cam_rotation: Quat,
    /// Unit camera translation direction, or zero for a pure rotation.
    pub cam_translation_dir: nalgebra::Vector3<f64>,
    /// Whether `cam_translation_dir` is a usable measurement. Rotations are
    /// always used; only valid pairs enter the translation system.
    pub valid: bool,
}

impl MotionPair {
    pub fn lidar_angle(&self) -> Result<f64> {
        rotation_angle(&self.lidar_motion.rotation)
    }

    pub fn camera_angle(&self) -> Result<f64> {
        rotation_angle(&self.cam_rotation)
    }
}

/// Pose index pairs in emission order: consecutive pairs first, then by
/// increasing baseline, each group ordered by the first pose.
pub fn pair_indices(n_poses: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(n_poses * n_poses.saturating_sub(1) / 2);
    for gap in 1..n_poses {
        for i in 0..n_poses - gap {
            out.push((i, i + gap));
        }
    }
    out
}

/// Builds every pose pair from consecutive motions.
///
/// `lidar_motions[k]` and `cam_motions[k]` describe the motion between poses
/// `k` and `k + 1`. Longer baselines compose the consecutive motions; their
/// camera direction is the composed unit-step direction and is marked invalid
/// because the per-step scales are unknown.
pub fn build_pairs(
    lidar_motions: &[Rigid3],
    cam_motions: &[(Quat, Vector3<f64>)],
) -> Result<Vec<MotionPair>> {
    if lidar_motions.len() != cam_motions.len() {
        return Err(CalibError::LengthMismatch {
            lidar: lidar_motions.len(),
            camera: cam_motions.len(),
        });
    }
    if lidar_motions.is_empty() {
        return Err(CalibError::Empty("motion sequence"));
    }
    let n_poses = lidar_motions.len() + 1;
    let pairs = pair_indices(n_poses)
        .into_iter()
        .enumerate()
        .map(|(id, (i, j))| {
            let mut lidar = Rigid3::identity();
            let mut cam = Rigid3::identity();
            for k in i..j {
                lidar = lidar.compose(&lidar_motions[k]);
                let (q, d) = cam_motions[k];
                cam = cam.compose(&Rigid3::new(q.normalized(), d));
            }
            let n = cam.translation.norm();
            let dir = if n > 1e-12 {
                cam.translation / n
            } else {
                Vector3::zeros()
            };
            MotionPair {
                id,
                pose_i: i,
                pose_j: j,
                lidar_motion: lidar,
                cam_rotation: cam.rotation,
                cam_translation_dir: dir,
                valid: j == i + 1 && n > 1e-12,
            }
        })
        .collect();
    Ok(pairs)
}

/// Scalar part below which a quaternion's sign is considered noise-dominated.
const SIGN_CLEARANCE: f64 = 0.05;

fn positive_scalar(q: &Quat) -> Quat {
    if q.w < 0.0 {
        -*q
    } else {
        *q
    }
}

/// Stacked `(4P)×4` matrix with blocks `T(q_l) − T*(q_c)`.
///
/// Both quaternions of a pair are taken with non-negative scalar part; the
/// scalar part is invariant under conjugation, so this picks the sign pair
/// for which the block annihilates the extrinsic.
pub fn rotation_design_matrix(pairs: &[MotionPair]) -> Result<DMatrix<f64>> {
    if pairs.is_empty() {
        return Err(CalibError::Empty("motion pairs"));
    }
    Ok(signed_design_matrix(pairs, &vec![false; pairs.len()]))
}

fn pair_block(pair: &MotionPair, flip: bool) -> Matrix4<f64> {
    let ql = positive_scalar(&pair.lidar_motion.rotation);
    let qc = positive_scalar(&pair.cam_rotation);
    let qc = if flip { -qc } else { qc };
    left_quat_matrix(&ql) - right_quat_matrix(&qc)
}

fn signed_design_matrix(pairs: &[MotionPair], flips: &[bool]) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(4 * pairs.len(), 4);
    for (k, (pair, &flip)) in pairs.iter().zip(flips).enumerate() {
        a.fixed_view_mut::<4, 4>(4 * k, 0)
            .copy_from(&pair_block(pair, flip));
    }
    a
}

fn smallest_right_singular(a: DMatrix<f64>) -> Result<(Quat, f64)> {
    let svd = a.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| CalibError::RankDeficient("SVD did not converge".into()))?;
    let (min_idx, &min_sv) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("four singular values");
    let row = v_t.row(min_idx);
    let q = Quat::new(row[0], row[1], row[2], row[3])
        .normalized()
        .canonical();
    Ok((q, min_sv))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DegeneracyLimits {
    /// Pairs rotating less than this (radians) carry no rotation information.
    pub rotation_floor: f64,
    /// Minimum RMS-normalized second singular value of the stacked rotation axes.
    pub spread_floor: f64,
}

impl Default for DegeneracyLimits {
    fn default() -> Self {
        Self {
            rotation_floor: 1f64.to_radians(),
            spread_floor: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegeneracyReport {
    pub pure_translation: bool,
    pub single_axis: bool,
    pub max_pair_angle: f64,
    pub axis_spread: f64,
}

impl DegeneracyReport {
    pub fn is_degenerate(&self) -> bool {
        self.pure_translation || self.single_axis
    }
}

/// Diagnoses the two motion regimes under which the rotation is unobservable.
///
/// `axis_spread` is the second singular value of the matrix of unit rotation
/// axes (one row per pair above the rotation floor), divided by the square
/// root of the row count so the threshold does not depend on how many pairs
/// were collected.
pub fn check_degeneracy(pairs: &[MotionPair], limits: &DegeneracyLimits) -> DegeneracyReport {
    let mut max_angle = 0.0f64;
    let mut axes = Vec::new();
    for pair in pairs {
        let q = positive_scalar(&pair.lidar_motion.rotation.normalized());
        let angle = 2.0 * q.vector().norm().atan2(q.w);
        max_angle = max_angle.max(angle);
        if angle >= limits.rotation_floor {
            axes.push(q.vector().normalize());
        }
    }
    let spread = if axes.is_empty() {
        0.0
    } else {
        let m = DMatrix::from_fn(axes.len(), 3, |r, c| axes[r][c]);
        let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        sv.get(1).copied().unwrap_or(0.0) / (axes.len() as f64).sqrt()
    };
    let pure_translation = max_angle < limits.rotation_floor;
    DegeneracyReport {
        pure_translation,
        single_axis: !pure_translation && spread < limits.spread_floor,
        max_pair_angle: max_angle,
        axis_spread: spread,
    }
}

/// Keeps pairs whose lidar and camera rotation angles agree within `angle_tolerance`.
///
/// The rotation angle is invariant under conjugation by the extrinsic, so a
/// disagreement can only come from a bad motion estimate.
pub fn filter_pairs(pairs: &[MotionPair], angle_tolerance: f64) -> Vec<MotionPair> {
    pairs
        .iter()
        .filter(|p| match (p.lidar_angle(), p.camera_angle()) {
            (Ok(l), Ok(c)) => (l - c).abs() <= angle_tolerance,
            _ => false,
        })
        .copied()
        .collect()
}

/// Extrinsic rotation as the right singular vector of the design matrix for
/// its smallest singular value. Returns the canonical quaternion and that
/// singular value.
pub fn solve_rotation(pairs: &[MotionPair], limits: &DegeneracyLimits) -> Result<(Quat, f64)> {
    if pairs.is_empty() {
        return Err(CalibError::Empty("motion pairs"));
    }
    let report = check_degeneracy(pairs, limits);
    if report.is_degenerate() {
        return Err(CalibError::Degenerate(report));
    }
    let (q, min_sv) = smallest_right_singular(rotation_design_matrix(pairs)?)?;
    // Near half-turn motions the scalar parts sit at zero and noise can
    // split the sign choice. Estimate from the unambiguous pairs, re-pick
    // every camera sign against that estimate and solve again.
    let clear: Vec<MotionPair> = pairs
        .iter()
        .filter(|p| p.lidar_motion.rotation.w.abs().min(p.cam_rotation.w.abs()) >= SIGN_CLEARANCE)
        .copied()
        .collect();
    let seed = if clear.len() < pairs.len()
        && !clear.is_empty()
        && !check_degeneracy(&clear, limits).is_degenerate()
    {
        smallest_right_singular(rotation_design_matrix(&clear)?)?.0
    } else {
        q
    };
    let qv = seed.to_vector();
    let flips: Vec<bool> = pairs
        .iter()
        .map(|p| (pair_block(p, true) * qv).norm() < (pair_block(p, false) * qv).norm())
        .collect();
    if flips.iter().any(|&f| f) {
        return smallest_right_singular(signed_design_matrix(pairs, &flips));
    }
    Ok((q, min_sv))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranslationSolution {
    pub translation: Vector3<f64>,
    /// One metric scale per entry of `pair_ids`.
    pub scales: Vec<f64>,
    pub pair_ids: Vec<usize>,
    /// Root mean square of the per-pair residual norms, meters.
    pub residual_rms: f64,
}

/// Least-squares solution of the stacked `(3P)×(3+P)` system in `t` and the
/// per-pair scales. Only pairs flagged `valid` contribute rows.
pub fn solve_translation_scale(
    pairs: &[MotionPair],
    rotation: &Quat,
) -> Result<TranslationSolution> {
    let used: Vec<&MotionPair> = pairs
        .iter()
        .filter(|p| p.valid && p.cam_translation_dir.norm() > 0.5)
        .collect();
    if used.is_empty() {
        return Err(CalibError::Empty("translation pairs"));
    }
    let n = used.len();
    let r = rotation.to_rotation_matrix();
    let mut m = DMatrix::zeros(3 * n, 3 + n);
    let mut b = DVector::zeros(3 * n);
    for (k, pair) in used.iter().enumerate() {
        let rl = pair.lidar_motion.rotation.to_rotation_matrix();
        m.fixed_view_mut::<3, 3>(3 * k, 0)
            .copy_from(&(Matrix3::identity() - rl));
        m.fixed_view_mut::<3, 1>(3 * k, 3 + k)
            .copy_from(&(r * pair.cam_translation_dir));
        b.fixed_rows_mut::<3>(3 * k)
            .copy_from(&pair.lidar_motion.translation);
    }
    if m.nrows() < m.ncols() {
        return Err(CalibError::RankDeficient(format!(
            "{} equations for {} unknowns",
            m.nrows(),
            m.ncols()
        )));
    }
    let sv = m.singular_values();
    let max_sv = sv.max();
    let min_sv = sv.min();
    if !(min_sv > RANK_TOLERANCE * max_sv) {
        return Err(CalibError::RankDeficient(format!(
            "translation system singular values span [{min_sv:e}, {max_sv:e}]"
        )));
    }
    // Householder QR: the iterative SVD solve drifts with row order on some inputs
    let qr = m.clone().qr();
    let x = qr
        .r()
        .solve_upper_triangular(&(qr.q().transpose() * &b))
        .ok_or_else(|| CalibError::RankDeficient("triangular factor is singular".into()))?;
    let residual = &m * &x - &b;
    let sq: f64 = (0..n)
        .map(|k| residual.fixed_rows::<3>(3 * k).norm_squared())
        .sum();
    Ok(TranslationSolution {
        translation: Vector3::new(x[0], x[1], x[2]),
        scales: x.iter().skip(3).copied().collect(),
        pair_ids: used.iter().map(|p| p.id).collect(),
        residual_rms: (sq / n as f64).sqrt(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitConfig {
    pub filter: bool,
    /// Maximum |θ_lidar − θ_camera| (radians) for a pair to survive filtration.
    pub angle_tolerance: f64,
    pub limits: DegeneracyLimits,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            filter: true,
            angle_tolerance: 1f64.to_radians(),
            limits: DegeneracyLimits::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitResult {
    pub extrinsic: Rigid3,
    pub scales: Vec<f64>,
    /// Pairs whose scale was estimated, aligned with `scales`.
    pub retained_pair_ids: Vec<usize>,
    /// Pairs surviving filtration; all of them constrain the rotation.
    pub filtered_pair_ids: Vec<usize>,
    pub rotation_residual: f64,
    pub translation_rms: f64,
    pub degeneracy: DegeneracyReport,
}

/// Filtration, degeneracy check, rotation solve, then translation and scales.
pub fn init_calibrate(pairs: &[MotionPair], config: &InitConfig) -> Result<InitResult> {
    let n_poses = pairs
        .iter()
        .map(|p| p.pose_i.max(p.pose_j) + 1)
        .max()
        .unwrap_or(0);
    if n_poses < 3 {
        return Err(CalibError::InsufficientPairs {
            retained: pairs.len(),
            required: 2,
        });
    }
    let retained = if config.filter {
        filter_pairs(pairs, config.angle_tolerance)
    } else {
        pairs.to_vec()
    };
    if retained.len() < 2 {
        return Err(CalibError::InsufficientPairs {
            retained: retained.len(),
            required: 2,
        });
    }
    let degeneracy = check_degeneracy(&retained, &config.limits);
    if degeneracy.is_degenerate() {
        return Err(CalibError::Degenerate(degeneracy));
    }
    let (rotation, rotation_residual) = solve_rotation(&retained, &config.limits)?;
    let translation = solve_translation_scale(&retained, &rotation)?;
    Ok(InitResult {
        extrinsic: Rigid3::new(rotation, translation.translation),
        scales: translation.scales,
        retained_pair_ids: translation.pair_ids,
        filtered_pair_ids: retained.iter().map(|p| p.id).collect(),
        rotation_residual,
        translation_rms: translation.residual_rms,
        degeneracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::rotation_error;
    use approx::assert_abs_diff_eq;

    fn extrinsic() -> Rigid3 {
        Rigid3::new(
            Quat::from_axis_angle(&Vector3::new(0.2, 1.0, -0.3), 2.1),
            Vector3::new(0.42, 0.67, -0.46),
        )
    }

    fn motion(axis: [f64; 3], deg: f64, t: [f64; 3]) -> Rigid3 {
        Rigid3::new(
            Quat::from_axis_angle(&Vector3::from(axis), deg.to_radians()),
            Vector3::from(t),
        )
    }

    fn exact_pair(id: usize, lidar: Rigid3, ext: &Rigid3) -> MotionPair {
        let cam = ext.inverse().compose(&lidar).compose(ext);
        let n = cam.translation.norm();
        MotionPair {
            id,
            pose_i: id,
            pose_j: id + 1,
            lidar_motion: lidar,
            cam_rotation: cam.rotation,
            cam_translation_dir: cam.translation / n,
            valid: true,
        }
    }

    fn varied_pairs(ext: &Rigid3) -> Vec<MotionPair> {
        [
            motion([1.0, 0.0, 0.0], 20.0, [0.5, 0.1, 0.0]),
            motion([0.0, 1.0, 0.0], 35.0, [0.0, 0.2, 1.0]),
            motion([0.3, 0.2, 1.0], -25.0, [1.0, -0.3, 0.4]),
            motion([1.0, 1.0, 0.0], 15.0, [-0.6, 0.0, 0.8]),
            motion([0.0, -0.4, 1.0], 40.0, [0.2, 0.9, -0.5]),
        ]
        .into_iter()
        .enumerate()
        .map(|(i, m)| exact_pair(i, m, ext))
        .collect()
    }

    #[test]
    fn pair_counts() {
        let id = Rigid3::identity();
        let cam = (Quat::identity(), Vector3::new(1.0, 0.0, 0.0));
        for (n, expected) in [(2, 1), (3, 3), (10, 45)] {
            let pairs = build_pairs(&vec![id; n - 1], &vec![cam; n - 1]).unwrap();
            assert_eq!(pairs.len(), expected);
        }
        let pairs = build_pairs(&[id; 2], &[cam; 2]).unwrap();
        let idx: Vec<_> = pairs.iter().map(|p| (p.pose_i, p.pose_j)).collect();
        assert_eq!(idx, vec![(0, 1), (1, 2), (0, 2)]);
        assert!(pairs[0].valid && pairs[1].valid && !pairs[2].valid);
        assert!(matches!(
            build_pairs(&[id; 2], &[cam; 3]),
            Err(CalibError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn build_pairs_composes_exact_motions() {
        let ext = extrinsic();
        let steps = [
            motion([1.0, 0.0, 0.0], 20.0, [0.5, 0.1, 0.0]),
            motion([0.0, 1.0, 0.0], 35.0, [0.0, 0.2, 1.0]),
        ];
        let cams: Vec<_> = steps
            .iter()
            .map(|l| {
                let c = ext.inverse().compose(l).compose(&ext);
                (c.rotation, c.translation.normalize())
            })
            .collect();
        let pairs = build_pairs(&steps, &cams).unwrap();
        let long = &pairs[2];
        let expected = steps[0].compose(&steps[1]);
        assert!(rotation_error(&long.lidar_motion.rotation, &expected.rotation).unwrap() < 1e-12);
        // composed camera rotation is still the conjugate of the lidar one
        let conj = ext.inverse().compose(&expected).compose(&ext);
        assert!(rotation_error(&long.cam_rotation, &conj.rotation).unwrap() < 1e-12);
        assert_abs_diff_eq!(long.cam_translation_dir.norm(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn identical_rotations_give_zero_block() {
        let m = motion([0.0, 0.0, 1.0], 30.0, [1.0, 0.0, 0.0]);
        let pair = MotionPair {
            id: 0,
            pose_i: 0,
            pose_j: 1,
            lidar_motion: m,
            cam_rotation: m.rotation,
            cam_translation_dir: Vector3::x(),
            valid: true,
        };
        // equal rotations only cancel in the scalar row/column; the remaining
        // cross-product block still annihilates the identity and the rotation itself
        let a = rotation_design_matrix(&[pair]).unwrap();
        assert_eq!(a.row(0).norm(), 0.0);
        assert_eq!(a.column(0).norm(), 0.0);
        let q = m.rotation;
        let qv = nalgebra::DVector::from_column_slice(&[q.w, q.x, q.y, q.z]);
        assert!((&a * qv).norm() < 1e-15);

        let still = MotionPair {
            lidar_motion: Rigid3::new(Quat::identity(), Vector3::x()),
            cam_rotation: Quat::identity(),
            ..pair
        };
        assert_eq!(
            rotation_design_matrix(&[still]).unwrap(),
            DMatrix::zeros(4, 4)
        );
        assert!(rotation_design_matrix(&[]).is_err());
    }

    #[test]
    fn design_matrix_annihilates_true_rotation() {
        let ext = extrinsic();
        let pairs = varied_pairs(&ext);
        let a = rotation_design_matrix(&pairs[..3]).unwrap();
        assert_eq!(a.shape(), (12, 4));
        let r = &a * ext.rotation.to_vector();
        assert!(r.norm() < 1e-12, "{}", r.norm());
    }

    #[test]
    fn sign_flipped_inputs_still_annihilate() {
        let ext = extrinsic();
        let mut pairs = varied_pairs(&ext);
        pairs[1].cam_rotation = -pairs[1].cam_rotation;
        pairs[2].lidar_motion.rotation = -pairs[2].lidar_motion.rotation;
        let a = rotation_design_matrix(&pairs).unwrap();
        assert!((&a * ext.rotation.to_vector()).norm() < 1e-12);
    }

    #[test]
    fn solve_rotation_recovers_extrinsic() {
        let ext = extrinsic();
        let pairs = varied_pairs(&ext);
        let (q, residual) = solve_rotation(&pairs, &DegeneracyLimits::default()).unwrap();
        assert!(rotation_error(&q, &ext.rotation).unwrap() < 1e-9);
        assert!(residual < 1e-12);
        assert_eq!(q, q.canonical());
    }

    #[test]
    fn half_turn_sign_split_is_resolved() {
        let ext = extrinsic();
        let mut pairs = varied_pairs(&ext);
        // a half-turn whose camera scalar part lands just below zero
        let mut half = exact_pair(5, motion([0.1, 1.0, 0.2], 180.0, [0.3, 0.0, 0.7]), &ext);
        let lidar = half.lidar_motion.rotation;
        half.lidar_motion.rotation = Quat::new(1e-4, lidar.x, lidar.y, lidar.z).normalized();
        let cam = half.cam_rotation;
        half.cam_rotation = Quat::new(-1e-4, cam.x, cam.y, cam.z).normalized();
        half.cam_rotation = if half.cam_rotation.w < 0.0 {
            half.cam_rotation
        } else {
            -half.cam_rotation
        };
        pairs.push(half);
        let (q, _) = solve_rotation(&pairs, &DegeneracyLimits::default()).unwrap();
        assert!(rotation_error(&q, &ext.rotation).unwrap() < 1e-3);
    }

    #[test]
    fn solve_rotation_is_order_invariant() {
        let ext = extrinsic();
        let pairs = varied_pairs(&ext);
        let mut rev = pairs.clone();
        rev.reverse();
        let limits = DegeneracyLimits::default();
        let (a, _) = solve_rotation(&pairs, &limits).unwrap();
        let (b, _) = solve_rotation(&rev, &limits).unwrap();
        assert!((a.to_vector() - b.to_vector()).norm() < 1e-10);
        let ta = solve_translation_scale(&pairs, &a).unwrap();
        let tb = solve_translation_scale(&rev, &a).unwrap();
        assert!((ta.translation - tb.translation).norm() < 1e-10);
    }

    #[test]
    fn pure_translation_is_degenerate() {
        let ext = extrinsic();
        let pairs: Vec<_> = (0..4)
            .map(|i| exact_pair(i, motion([0.0, 1.0, 0.0], 0.0, [1.0, i as f64, 0.5]), &ext))
            .collect();
        let report = check_degeneracy(&pairs, &DegeneracyLimits::default());
        assert!(report.pure_translation);
        assert!(!report.single_axis);
        assert!(matches!(
            solve_rotation(&pairs, &DegeneracyLimits::default()),
            Err(CalibError::Degenerate(r)) if r.pure_translation
        ));
    }

    #[test]
    fn single_axis_is_degenerate() {
        let ext = extrinsic();
        let pairs: Vec<_> = [10.0, 20.0, -30.0, 40.0]
            .into_iter()
            .enumerate()
            .map(|(i, deg)| exact_pair(i, motion([0.0, 1.0, 0.0], deg, [1.0, 0.0, 0.3]), &ext))
            .collect();
        let report = check_degeneracy(&pairs, &DegeneracyLimits::default());
        assert!(report.single_axis && !report.pure_translation);
        assert!(report.axis_spread < 1e-12);
        assert!(matches!(
            solve_rotation(&pairs, &DegeneracyLimits::default()),
            Err(CalibError::Degenerate(r)) if r.single_axis
        ));
    }

    #[test]
    fn two_orthogonal_axes_are_well_conditioned() {
        let ext = extrinsic();
        let pairs = vec![
            exact_pair(0, motion([1.0, 0.0, 0.0], 20.0, [1.0, 0.0, 0.0]), &ext),
            exact_pair(1, motion([0.0, 1.0, 0.0], 20.0, [0.0, 0.0, 1.0]), &ext),
        ];
        let report = check_degeneracy(&pairs, &DegeneracyLimits::default());
        assert!(!report.pure_translation && !report.single_axis);
        // σ₂ of two orthonormal rows is 1, divided by √2 rows
        assert_abs_diff_eq!(
            report.axis_spread,
            std::f64::consts::FRAC_1_SQRT_2,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(report.max_pair_angle, 20f64.to_radians(), epsilon = 1e-12);
    }

    #[test]
    fn filtration_examples() {
        let tol = 1f64.to_radians();
        let make = |cam_deg: f64| MotionPair {
            id: 0,
            pose_i: 0,
            pose_j: 1,
            lidar_motion: motion([0.0, 1.0, 0.0], 30.0, [1.0, 0.0, 0.0]),
            cam_rotation: Quat::from_axis_angle(&Vector3::new(0.3, 0.1, 1.0), cam_deg.to_radians()),
            cam_translation_dir: Vector3::x(),
            valid: true,
        };
        assert_eq!(filter_pairs(&[make(30.2)], tol).len(), 1);
        assert!(filter_pairs(&[make(37.0)], tol).is_empty());
        let ext = extrinsic();
        let pairs = varied_pairs(&ext);
        let kept = filter_pairs(&pairs, 1e-9);
        assert_eq!(kept, pairs);
    }

    #[test]
    fn minimal_translation_case_is_exact() {
        let ext = extrinsic();
        let lidar = [
            motion([1.0, 0.0, 0.0], 20.0, [0.5, 0.1, 0.0]),
            motion([0.0, 1.0, 0.0], 35.0, [0.0, 0.2, 1.0]),
        ];
        let pairs: Vec<_> = lidar
            .iter()
            .enumerate()
            .map(|(i, l)| exact_pair(i, *l, &ext))
            .collect();
        let sol = solve_translation_scale(&pairs, &ext.rotation).unwrap();
        assert!((sol.translation - ext.translation).norm() < 1e-9);
        for (pair, scale) in pairs.iter().zip(&sol.scales) {
            let cam = ext.inverse().compose(&pair.lidar_motion).compose(&ext);
            assert_abs_diff_eq!(*scale, cam.translation.norm(), epsilon = 1e-9);
        }
        assert!(sol.residual_rms < 1e-9);
        assert!(matches!(
            solve_translation_scale(&pairs[..1], &ext.rotation),
            Err(CalibError::RankDeficient(_))
        ));
    }

    #[test]
    fn identity_extrinsic_scales_are_lidar_norms() {
        let ext = Rigid3::identity();
        let pairs = varied_pairs(&ext);
        let sol = solve_translation_scale(&pairs, &Quat::identity()).unwrap();
        assert!(sol.translation.norm() < 1e-9);
        for (pair, scale) in pairs.iter().zip(&sol.scales) {
            assert_abs_diff_eq!(*scale, pair.lidar_motion.translation.norm(), epsilon = 1e-9);
        }
    }

    #[test]
    fn parallel_camera_directions_are_rank_deficient() {
        // pure translations along one direction: (I - R_L) vanishes
        let ext = Rigid3::identity();
        let pairs: Vec<_> = (0..3)
            .map(|i| {
                exact_pair(
                    i,
                    motion([0.0, 1.0, 0.0], 0.0, [1.0 + i as f64, 0.0, 0.0]),
                    &ext,
                )
            })
            .collect();
        assert!(matches!(
            solve_translation_scale(&pairs, &Quat::identity()),
            Err(CalibError::RankDeficient(_))
        ));
    }

    #[test]
    fn init_calibrate_end_to_end() {
        let ext = extrinsic();
        let pairs = varied_pairs(&ext);
        let res = init_calibrate(&pairs, &InitConfig::default()).unwrap();
        assert!(rotation_error(&res.extrinsic.rotation, &ext.rotation).unwrap() < 1e-9);
        assert!((res.extrinsic.translation - ext.translation).norm() < 1e-9);
        assert_eq!(res.scales.len(), res.retained_pair_ids.len());
        assert!(res.scales.iter().all(|s| *s > 0.0));
        assert!(matches!(
            init_calibrate(&pairs[..1], &InitConfig::default()),
            Err(CalibError::InsufficientPairs { .. })
        ));
    }
}
