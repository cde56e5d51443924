//! Vertical line candidates from point clouds and image-side filtering.
//!
//! Points are binned onto the floor (x, z) plane; the per-cell point count is
//! an intensity image in which vertical structures stand out. Free-standing
//! poles appear as isolated peaks and walls as straight runs whose endpoints
//! are wall ends or corners.

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CalibError, Result};
use crate::geom::{project_point, CameraIntrinsics, Rigid3, Segment2D, VerticalLine3D};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Floor-plane histogram of a point cloud, row-major in `z` then `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityGrid {
    /// World (x, z) of the corner of cell (0, 0).
    pub origin: Vector2<f64>,
    pub cell_size: f64,
    pub nx: usize,
    pub nz: usize,
    pub counts: Vec<u32>,
}

impl IntensityGrid {
    pub fn cell_of(&self, x: f64, z: f64) -> Option<(usize, usize)> {
        let fx = ((x - self.origin.x) / self.cell_size).floor();
        let fz = ((z - self.origin.y) / self.cell_size).floor();
        if fx < 0.0 || fz < 0.0 || !fx.is_finite() || !fz.is_finite() {
            return None;
        }
        let (ix, iz) = (fx as usize, fz as usize);
        (ix < self.nx && iz < self.nz).then_some((ix, iz))
    }

    pub fn count(&self, ix: usize, iz: usize) -> u32 {
        self.counts[iz * self.nx + ix]
    }

    pub fn cell_center(&self, ix: usize, iz: usize) -> Vector2<f64> {
        self.origin + Vector2::new(ix as f64 + 0.5, iz as f64 + 0.5) * self.cell_size
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DetectorMode {
    SegmentEndpoints,
    Peaks,
    Both,
}

impl DetectorMode {
    fn runs(self) -> bool {
        matches!(self, DetectorMode::SegmentEndpoints | DetectorMode::Both)
    }

    fn peaks(self) -> bool {
        matches!(self, DetectorMode::Peaks | DetectorMode::Both)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LineExtractionConfig {
    pub cell_size: f64,
    pub min_support: usize,
    pub min_height_extent: f64,
    pub detector_mode: DetectorMode,
    /// Shortest straight run of occupied cells accepted as a wall, meters.
    pub min_run_length: f64,
}

impl Default for LineExtractionConfig {
    fn default() -> Self {
        Self {
            cell_size: 0.25,
            min_support: 15,
            min_height_extent: 0.5,
            detector_mode: DetectorMode::Both,
            min_run_length: 1.0,
        }
    }
}

impl LineExtractionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cell_size > 0.0) || self.min_support < 1 || !(self.min_height_extent >= 0.0) {
            return Err(CalibError::Config(format!(
                "invalid line extraction config {self:?}"
            )));
        }
        Ok(())
    }
}

/// Bins every point by its (x, z) coordinates; the grid spans the cloud's extent.
pub fn project_to_floor(cloud: &PointCloud, cell_size: f64) -> Result<IntensityGrid> {
    if cloud.is_empty() {
        return Err(CalibError::Empty("point cloud"));
    }
    if !(cell_size > 0.0) {
        return Err(CalibError::Config(format!("cell size {cell_size}")));
    }
    let (mut lo, mut hi) = (
        Vector2::repeat(f64::INFINITY),
        Vector2::repeat(f64::NEG_INFINITY),
    );
    for p in &cloud.points {
        lo = lo.inf(&Vector2::new(p.x, p.z));
        hi = hi.sup(&Vector2::new(p.x, p.z));
    }
    let nx = ((hi.x - lo.x) / cell_size).floor() as usize + 1;
    let nz = ((hi.y - lo.y) / cell_size).floor() as usize + 1;
    let index = |p: &Vector3<f64>| {
        let ix = (((p.x - lo.x) / cell_size).floor() as usize).min(nx - 1);
        let iz = (((p.z - lo.y) / cell_size).floor() as usize).min(nz - 1);
        iz * nx + ix
    };
    let counts = cloud
        .points
        .par_chunks(4096)
        .fold(
            || vec![0u32; nx * nz],
            |mut acc, chunk| {
                for p in chunk {
                    acc[index(p)] += 1;
                }
                acc
            },
        )
        .reduce(
            || vec![0u32; nx * nz],
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                a
            },
        );
    Ok(IntensityGrid {
        origin: lo,
        cell_size,
        nx,
        nz,
        counts,
    })
}

const NEIGHBORS: [(isize, isize); 8] = [
    (-1, -1),
    (0, -1),
    (1, -1),
    (-1, 0),
    (1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
];

fn neighbors(
    grid: &IntensityGrid,
    ix: usize,
    iz: usize,
) -> impl Iterator<Item = (usize, usize)> + '_ {
    NEIGHBORS.iter().filter_map(move |&(dx, dz)| {
        let x = ix as isize + dx;
        let z = iz as isize + dz;
        (x >= 0 && z >= 0 && (x as usize) < grid.nx && (z as usize) < grid.nz)
            .then_some((x as usize, z as usize))
    })
}

/// 8-connected components of the cells at or above `threshold`, in scan order.
fn components(grid: &IntensityGrid, threshold: u32) -> Vec<Vec<(usize, usize)>> {
    let mut seen = vec![false; grid.counts.len()];
    let mut out = Vec::new();
    for iz in 0..grid.nz {
        for ix in 0..grid.nx {
            let idx = iz * grid.nx + ix;
            if seen[idx] || grid.counts[idx] < threshold {
                continue;
            }
            seen[idx] = true;
            let mut comp = vec![(ix, iz)];
            let mut head = 0;
            while head < comp.len() {
                let (cx, cz) = comp[head];
                head += 1;
                for (nx, nz) in neighbors(grid, cx, cz) {
                    let n = nz * grid.nx + nx;
                    if !seen[n] && grid.counts[n] >= threshold {
                        seen[n] = true;
                        comp.push((nx, nz));
                    }
                }
            }
            out.push(comp);
        }
    }
    out
}

/// Strict local maximum; equal neighbours are broken by scan index.
fn is_peak(grid: &IntensityGrid, ix: usize, iz: usize) -> bool {
    let c = grid.count(ix, iz);
    let own = iz * grid.nx + ix;
    neighbors(grid, ix, iz).all(|(nx, nz)| {
        let n = grid.count(nx, nz);
        n < c || (n == c && nz * grid.nx + nx > own)
    })
}

fn floor_xz(p: &Vector3<f64>) -> Vector2<f64> {
    Vector2::new(p.x, p.z)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let idx = ((values.len() - 1) as f64 * q).round() as usize;
    values[idx]
}

/// A straight wall run fitted to its supporting points.
struct Run {
    point: Vector2<f64>,
    dir: Vector2<f64>,
    ends: [Vector2<f64>; 2],
}

impl Run {
    fn normal(&self) -> Vector2<f64> {
        Vector2::new(-self.dir.y, self.dir.x)
    }
}

/// Principal direction of a planar point set through its centroid.
fn fit_line(points: &[Vector2<f64>]) -> Option<(Vector2<f64>, Vector2<f64>)> {
    if points.len() < 2 {
        return None;
    }
    let c = points.iter().sum::<Vector2<f64>>() / points.len() as f64;
    let (mut sxx, mut sxz, mut szz) = (0.0, 0.0, 0.0);
    for p in points {
        let d = p - c;
        sxx += d.x * d.x;
        sxz += d.x * d.y;
        szz += d.y * d.y;
    }
    let angle = 0.5 * (2.0 * sxz).atan2(sxx - szz);
    Some((c, Vector2::new(angle.cos(), angle.sin())))
}

/// Greedy angular sweep: repeatedly take the direction and offset whose band
/// holds the most occupied cells, split the band into contiguous runs, and
/// remove the band from further consideration.
fn sweep_runs(
    grid: &IntensityGrid,
    cells: &[(usize, usize)],
    cloud_xz: &[Vector2<f64>],
    config: &LineExtractionConfig,
) -> Vec<Run> {
    let cell = grid.cell_size;
    let min_cells = (config.min_run_length / cell).ceil().max(2.0) as usize;
    let mut remaining: Vec<Vector2<f64>> =
        cells.iter().map(|&(x, z)| grid.cell_center(x, z)).collect();
    let mut runs = Vec::new();
    while remaining.len() >= min_cells {
        let mut best = (0usize, 0.0f64, 0i64);
        for step in 0..180 {
            let theta = (step as f64).to_radians();
            let n = Vector2::new(theta.cos(), theta.sin());
            let mut bins: Vec<i64> = remaining
                .iter()
                .map(|c| (n.dot(c) / cell).round() as i64)
                .collect();
            bins.sort_unstable();
            let mut i = 0;
            while i < bins.len() {
                let mut j = i;
                while j < bins.len() && bins[j] == bins[i] {
                    j += 1;
                }
                if j - i > best.0 {
                    best = (j - i, theta, bins[i]);
                }
                i = j;
            }
        }
        if best.0 < min_cells {
            break;
        }
        let n0 = Vector2::new(best.1.cos(), best.1.sin());
        let in_bin: Vec<Vector2<f64>> = remaining
            .iter()
            .filter(|c| (n0.dot(c) / cell).round() as i64 == best.2)
            .copied()
            .collect();
        let Some((mut origin, mut d)) = fit_line(&in_bin) else {
            break;
        };
        // the quantized bin can cut a slanted wall short; refit on a band around the fit
        for _ in 0..2 {
            let n = Vector2::new(-d.y, d.x);
            let band: Vec<Vector2<f64>> = remaining
                .iter()
                .filter(|c| n.dot(&(*c - origin)).abs() <= cell)
                .copied()
                .collect();
            if let Some((o, nd)) = fit_line(&band) {
                origin = o;
                d = nd;
            }
        }
        let n = Vector2::new(-d.y, d.x);
        let (band, rest): (Vec<_>, Vec<_>) = remaining
            .into_iter()
            .partition(|c| n.dot(&(c - origin)).abs() <= cell);
        remaining = rest;
        if band.is_empty() {
            break;
        }
        let mut along: Vec<f64> = band.iter().map(|c| d.dot(&(c - origin))).collect();
        along.sort_by(|a, b| a.total_cmp(b));
        let mut start = 0;
        for k in 1..=along.len() {
            if k == along.len() || along[k] - along[k - 1] > 1.5 * cell {
                let (s0, s1) = (along[start], along[k - 1]);
                if s1 - s0 + cell >= config.min_run_length {
                    if let Some(run) = fit_run(cloud_xz, origin, d, s0, s1, cell) {
                        runs.push(run);
                    }
                }
                start = k;
            }
        }
    }
    runs
}

/// Fits a wall line to the cloud points supporting a cell run and locates its
/// ends from the extreme points along the fitted direction.
fn fit_run(
    cloud_xz: &[Vector2<f64>],
    origin: Vector2<f64>,
    dir: Vector2<f64>,
    s0: f64,
    s1: f64,
    cell: f64,
) -> Option<Run> {
    let (mut c, mut d) = (origin, dir);
    let (mut lo, mut hi) = (s0 - cell, s1 + cell);
    let mut band = 0.75 * cell;
    let mut support = Vec::new();
    for _ in 0..3 {
        let n = Vector2::new(-d.y, d.x);
        support = cloud_xz
            .iter()
            .filter(|p| {
                let s = d.dot(&(*p - c));
                (n.dot(&(*p - c))).abs() <= band && s >= lo && s <= hi
            })
            .copied()
            .collect();
        let (nc, mut nd) = fit_line(&support)?;
        if nd.dot(&d) < 0.0 {
            nd = -nd;
        }
        lo -= d.dot(&(nc - c));
        hi -= d.dot(&(nc - c));
        c = nc;
        d = nd;
        band = 0.5 * cell;
    }
    // drop stray points (floor returns, clutter) far outside the wall's own spread
    for _ in 0..2 {
        let n = Vector2::new(-d.y, d.x);
        let mut abs_res: Vec<f64> = support.iter().map(|p| n.dot(&(p - c)).abs()).collect();
        let limit = 3.0 * 1.4826 * median(&mut abs_res) + 1e-12;
        let kept: Vec<Vector2<f64>> = support
            .iter()
            .filter(|p| n.dot(&(*p - c)).abs() <= limit)
            .copied()
            .collect();
        let Some((nc, mut nd)) = fit_line(&kept) else {
            break;
        };
        if nd.dot(&d) < 0.0 {
            nd = -nd;
        }
        c = nc;
        d = nd;
        support = kept;
    }
    let mut s: Vec<f64> = support.iter().map(|p| d.dot(&(p - c))).collect();
    let s_lo = percentile(&mut s, 0.005);
    let s_hi = percentile(&mut s, 0.995);
    Some(Run {
        point: c,
        dir: d,
        ends: [c + d * s_lo, c + d * s_hi],
    })
}

fn intersect(a: &Run, b: &Run) -> Option<Vector2<f64>> {
    // a.point + s a.dir on b's line: n_b · (a.point + s a.dir - b.point) = 0
    let nb = b.normal();
    let denom = nb.dot(&a.dir);
    if denom.abs() < 1e-9 {
        return None;
    }
    let s = nb.dot(&(b.point - a.point)) / denom;
    Some(a.point + a.dir * s)
}

/// Candidate floor positions from wall runs: ends of two non-parallel runs
/// that meet become their line intersection, other ends stand alone.
fn run_endpoints(runs: &[Run], cell: f64) -> Vec<Vector2<f64>> {
    let mut used = vec![[false; 2]; runs.len()];
    let mut out = Vec::new();
    let parallel = 20f64.to_radians().cos();
    for i in 0..runs.len() {
        for ei in 0..2 {
            if used[i][ei] {
                continue;
            }
            let e = runs[i].ends[ei];
            let mut partner = None;
            'search: for j in 0..runs.len() {
                if j == i || runs[i].dir.dot(&runs[j].dir).abs() > parallel {
                    continue;
                }
                for ej in 0..2 {
                    if !used[j][ej] && (runs[j].ends[ej] - e).norm() <= 2.0 * cell {
                        partner = Some((j, ej));
                        break 'search;
                    }
                }
            }
            used[i][ei] = true;
            match partner.and_then(|(j, ej)| intersect(&runs[i], &runs[j]).map(|p| (j, ej, p))) {
                Some((j, ej, p)) => {
                    used[j][ej] = true;
                    out.push(p);
                }
                None => out.push(e),
            }
        }
    }
    out
}

/// Points within `radius` of a floor position, with their heights.
fn support_near<'a>(
    cloud: &'a PointCloud,
    at: Vector2<f64>,
    radius: f64,
) -> impl Iterator<Item = &'a Vector3<f64>> + 'a {
    cloud
        .points
        .iter()
        .filter(move |p| (floor_xz(p) - at).norm() <= radius)
}

fn back_check(
    cloud: &PointCloud,
    at: Vector2<f64>,
    config: &LineExtractionConfig,
) -> Option<VerticalLine3D> {
    let pts: Vec<&Vector3<f64>> = support_near(cloud, at, config.cell_size).collect();
    if pts.len() < config.min_support {
        return None;
    }
    let y_min = pts.iter().map(|p| p.y).fold(f64::INFINITY, f64::min);
    let y_max = pts.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max);
    if !(y_max - y_min >= config.min_height_extent) || y_max <= y_min {
        return None;
    }
    Some(VerticalLine3D {
        x: at.x,
        z: at.y,
        y_min,
        y_max,
        support: pts.len(),
    })
}

/// Coordinate-wise median of the points near `at`, iterated with a shrinking radius.
fn refine_peak(cloud: &PointCloud, mut at: Vector2<f64>, cell: f64) -> Vector2<f64> {
    for radius in [cell, 0.5 * cell, 0.5 * cell] {
        let near: Vec<Vector2<f64>> = support_near(cloud, at, radius).map(floor_xz).collect();
        if near.is_empty() {
            break;
        }
        let mut xs: Vec<f64> = near.iter().map(|p| p.x).collect();
        let mut zs: Vec<f64> = near.iter().map(|p| p.y).collect();
        at = Vector2::new(median(&mut xs), median(&mut zs));
    }
    at
}

/// Vertical line candidates from a floor grid built from `cloud`.
///
/// Components of occupied cells no larger than three cells across are treated
/// as poles and contribute their local maxima; larger components are swept
/// for straight runs whose ends are wall edges. Every candidate is checked
/// against the cloud for support and height extent.
pub fn detect_vertical_lines(
    grid: &IntensityGrid,
    cloud: &PointCloud,
    config: &LineExtractionConfig,
) -> Vec<VerticalLine3D> {
    let cell = grid.cell_size;
    let threshold = config.min_support.min(u32::MAX as usize) as u32;
    let cloud_xz: Vec<Vector2<f64>> = cloud.points.iter().map(floor_xz).collect();
    let mut positions = Vec::new();
    for comp in components(grid, threshold) {
        let (min_x, max_x) = comp
            .iter()
            .fold((usize::MAX, 0), |(a, b), c| (a.min(c.0), b.max(c.0)));
        let (min_z, max_z) = comp
            .iter()
            .fold((usize::MAX, 0), |(a, b), c| (a.min(c.1), b.max(c.1)));
        let small = max_x - min_x < 3 && max_z - min_z < 3;
        if small {
            if config.detector_mode.peaks() {
                for &(ix, iz) in comp.iter().filter(|c| is_peak(grid, c.0, c.1)) {
                    positions.push(refine_peak(cloud, grid.cell_center(ix, iz), cell));
                }
            }
        } else if config.detector_mode.runs() {
            let runs = sweep_runs(grid, &comp, &cloud_xz, config);
            positions.extend(run_endpoints(&runs, cell));
        }
    }
    let mut out: Vec<VerticalLine3D> = Vec::new();
    for at in positions {
        if out
            .iter()
            .any(|c| (Vector2::new(c.x, c.z) - at).norm() < cell)
        {
            continue;
        }
        if let Some(line) = back_check(cloud, at, config) {
            out.push(line);
        }
    }
    out
}

/// Image direction of a vertical line, from its projections at `y_min` and `y_max`.
pub fn vertical_direction_in_image(
    k: &CameraIntrinsics,
    extrinsic: &Rigid3,
    candidate: &VerticalLine3D,
) -> Result<Vector2<f64>> {
    let a = project_point(k, extrinsic, &candidate.point_at(candidate.y_min))?;
    let b = project_point(k, extrinsic, &candidate.point_at(candidate.y_max))?;
    let d = b.pixel() - a.pixel();
    let n = d.norm();
    if n < 1e-12 {
        return Err(CalibError::Geometry(
            "vertical line projects to a point".into(),
        ));
    }
    Ok(d / n)
}

/// Whether the segment's direction is within `angle_tol` of `expected_dir`, ignoring orientation.
pub fn segment_agrees(segment: &Segment2D, expected_dir: &Vector2<f64>, angle_tol: f64) -> bool {
    match segment.direction() {
        Some(d) => d.dot(expected_dir).abs().min(1.0).acos() <= angle_tol,
        None => false,
    }
}

pub fn filter_segments_2d(
    segments: &[Segment2D],
    expected_dir: &Vector2<f64>,
    angle_tol: f64,
) -> Vec<Segment2D> {
    segments
        .iter()
        .filter(|s| segment_agrees(s, expected_dir, angle_tol))
        .copied()
        .collect()
}

/// Whether the mid-height sample of the candidate lands inside the image (with margin).
pub fn in_fov(
    candidate: &VerticalLine3D,
    k: &CameraIntrinsics,
    extrinsic: &Rigid3,
    margin: f64,
) -> bool {
    match project_point(k, extrinsic, &candidate.point_at(candidate.mid_height())) {
        Ok(p) => k.contains(p.u, p.v, margin),
        Err(_) => false,
    }
}

pub fn fov_filter(
    candidates: &[VerticalLine3D],
    k: &CameraIntrinsics,
    extrinsic: &Rigid3,
    margin: f64,
) -> Vec<VerticalLine3D> {
    candidates
        .iter()
        .filter(|c| in_fov(c, k, extrinsic, margin))
        .copied()
        .collect()
}
