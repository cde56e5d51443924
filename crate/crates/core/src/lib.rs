//! Targetless lidar-camera extrinsic calibration.
//!
//! The extrinsic is first estimated from paired ego-motions of the two
//! sensors (a hand-eye `AX = XB` problem with an up-to-scale camera), then the
//! horizontal part of its translation is refined by matching vertical lines
//! found in the point clouds against image line segments and minimizing a
//! Huber-weighted point-to-line reprojection error.
//!
//! [`simulate`] provides a deterministic synthetic scene and rig used to
//! validate the whole pipeline against known ground truth.

pub mod error;
pub mod geom;
pub mod handeye;
pub mod lines;
pub mod pipeline;
pub mod refine;
pub mod session;
pub mod simulate;

pub use error::{CalibError, Result};
pub use geom::{
    left_quat_matrix, project_point, right_quat_matrix, rotation_angle, rotation_error,
    segment_to_line, CameraIntrinsics, Line2D, Projection, Quat, Rigid3, Segment2D, VerticalLine3D,
};
pub use handeye::{
    build_pairs, check_degeneracy, filter_pairs, init_calibrate, rotation_design_matrix,
    solve_rotation, solve_translation_scale, DegeneracyLimits, DegeneracyReport, InitConfig,
    InitResult, MotionPair, TranslationSolution,
};
pub use lines::{
    detect_vertical_lines, filter_segments_2d, fov_filter, in_fov, project_to_floor,
    vertical_direction_in_image, DetectorMode, IntensityGrid, LineExtractionConfig, PointCloud,
};
pub use refine::{
    error_ratio, huber_weight, match_lines, point_line_residual, refine_translation, LineMatch,
    MatchConfig, PenaltyMode, RefineConfig, RefineResult,
};
