//! 2D occupancy mapping from panoramic depth: local grids, ICP pose
//! correction against odometry, stitching into a global grid, a scripted
//! SLAM loop and map comparison metrics.
//!
//! Grids share one world lattice: cell `(i, j)` covers
//! `[i·r, (i+1)·r) × [j·r, (j+1)·r)` for resolution `r`, so grids built at
//! different times can be fused cell by cell.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use libm::{atan2, cos, floor, fmod, log10, sin, sqrt};
use rand_distr::{Distribution, Normal};

use crate::calibration::AgentAction;
use crate::error::{invalid, Error, Result};
use crate::geometry::{backproject, DepthMap, Panorama, Pose, Vec3};
use crate::kdtree::KdTree;
use crate::predictor::DepthPredictor;
use crate::rng;
use crate::scene::{render_panorama, Scene};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Cell {
    Unknown,
    Free,
    Occupied,
}

impl Cell {
    /// Occupied beats free beats unknown.
    pub fn fuse(self, other: Cell) -> Cell {
        self.max(other)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OccGrid {
    resolution: f64,
    /// Lattice index of cell `(0, 0)`.
    offset: [i64; 2],
    width: usize,
    height: usize,
    cells: Vec<Cell>,
}

impl OccGrid {
    pub fn new(resolution: f64, offset: [i64; 2], width: usize, height: usize) -> Result<Self> {
        if !(resolution > 0.0 && resolution.is_finite()) {
            return Err(invalid("grid resolution must be positive"));
        }
        Ok(OccGrid { resolution, offset, width, height, cells: vec![Cell::Unknown; width * height] })
    }

    /// A grid with no cells, ready to grow by stitching.
    pub fn empty(resolution: f64) -> Result<Self> {
        Self::new(resolution, [0, 0], 0, 0)
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn offset(&self) -> [i64; 2] {
        self.offset
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// World position of the lower-left corner of cell `(0, 0)`.
    pub fn origin(&self) -> [f64; 2] {
        [self.offset[0] as f64 * self.resolution, self.offset[1] as f64 * self.resolution]
    }

    /// Row-major cells, `j` (y) outer.
    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    /// Lattice index of the cell containing `(x, y)`.
    pub fn lattice_of(&self, x: f64, y: f64) -> [i64; 2] {
        [floor(x / self.resolution) as i64, floor(y / self.resolution) as i64]
    }

    pub fn center(&self, cell: [i64; 2]) -> [f64; 2] {
        [(cell[0] as f64 + 0.5) * self.resolution, (cell[1] as f64 + 0.5) * self.resolution]
    }

    fn slot(&self, cell: [i64; 2]) -> Option<usize> {
        let i = cell[0] - self.offset[0];
        let j = cell[1] - self.offset[1];
        (i >= 0 && j >= 0 && (i as usize) < self.width && (j as usize) < self.height)
            .then(|| j as usize * self.width + i as usize)
    }

    /// Cell at a lattice index; unknown outside the grid.
    pub fn get(&self, cell: [i64; 2]) -> Cell {
        self.slot(cell).map_or(Cell::Unknown, |s| self.cells[s])
    }

    /// Fuses `value` into a cell; returns false outside the grid.
    pub fn fuse(&mut self, cell: [i64; 2], value: Cell) -> bool {
        match self.slot(cell) {
            Some(s) => {
                self.cells[s] = self.cells[s].fuse(value);
                true
            }
            None => false,
        }
    }

    pub fn lattice(&self, slot: usize) -> [i64; 2] {
        [self.offset[0] + (slot % self.width) as i64, self.offset[1] + (slot / self.width) as i64]
    }

    pub fn count(&self, value: Cell) -> usize {
        self.cells.iter().filter(|c| **c == value).count()
    }

    /// Lattice indices of occupied cells, row-major.
    pub fn occupied(&self) -> Vec<[i64; 2]> {
        (0..self.cells.len()).filter(|s| self.cells[*s] == Cell::Occupied).map(|s| self.lattice(s)).collect()
    }

    pub fn occupied_centers(&self) -> Vec<[f64; 2]> {
        self.occupied().into_iter().map(|c| self.center(c)).collect()
    }

    /// Inclusive-exclusive lattice bounds, `None` for an empty grid.
    pub fn bounds(&self) -> Option<([i64; 2], [i64; 2])> {
        (self.width > 0 && self.height > 0).then(|| {
            (self.offset, [self.offset[0] + self.width as i64, self.offset[1] + self.height as i64])
        })
    }

    /// Copy covering at least `[lo, hi)` as well as the current extent.
    pub fn grown(&self, lo: [i64; 2], hi: [i64; 2]) -> OccGrid {
        let (lo, hi) = match self.bounds() {
            Some((a, b)) => ([lo[0].min(a[0]), lo[1].min(a[1])], [hi[0].max(b[0]), hi[1].max(b[1])]),
            None => (lo, hi),
        };
        if Some((lo, hi)) == self.bounds() {
            return self.clone();
        }
        let (w, h) = ((hi[0] - lo[0]).max(0) as usize, (hi[1] - lo[1]).max(0) as usize);
        let mut out = OccGrid { resolution: self.resolution, offset: lo, width: w, height: h, cells: vec![Cell::Unknown; w * h] };
        for s in 0..self.cells.len() {
            out.fuse(self.lattice(s), self.cells[s]);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GridConfig {
    pub resolution: f64,
    /// Height band relative to the camera for obstacle points.
    pub h_lo: f64,
    pub h_hi: f64,
    /// Points farther than this (horizontally) are ignored.
    pub max_range: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { resolution: 0.05, h_lo: -0.8, h_hi: 0.5, max_range: 8.0 }
    }
}

/// A local grid in the camera frame with the mean position of the points
/// that fell in each occupied cell.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalGrid {
    pub grid: OccGrid,
    /// One entry per occupied cell, in [`OccGrid::occupied`] order.
    pub centroids: Vec<[f64; 2]>,
}

impl LocalGrid {
    /// Uses cell centers as centroids.
    pub fn from_grid(grid: OccGrid) -> Self {
        let centroids = grid.occupied_centers();
        LocalGrid { grid, centroids }
    }
}

/// Visits the lattice cells a segment crosses from `a` to `b`, excluding the
/// cell containing `b` (2D DDA).
pub fn trace_cells(a: [f64; 2], b: [f64; 2], resolution: f64, mut visit: impl FnMut([i64; 2])) {
    let to_cell = |p: [f64; 2]| [floor(p[0] / resolution) as i64, floor(p[1] / resolution) as i64];
    let mut cell = to_cell(a);
    let end = to_cell(b);
    let d = [b[0] - a[0], b[1] - a[1]];
    let mut step = [0i64; 2];
    let mut t_max = [f64::INFINITY; 2];
    let mut t_delta = [f64::INFINITY; 2];
    for k in 0..2 {
        if d[k] > 0.0 {
            step[k] = 1;
            t_max[k] = ((cell[k] + 1) as f64 * resolution - a[k]) / d[k];
            t_delta[k] = resolution / d[k];
        } else if d[k] < 0.0 {
            step[k] = -1;
            t_max[k] = (cell[k] as f64 * resolution - a[k]) / d[k];
            t_delta[k] = -resolution / d[k];
        }
    }
    let limit = (end[0] - cell[0]).abs() + (end[1] - cell[1]).abs();
    for _ in 0..limit {
        if cell == end {
            return;
        }
        visit(cell);
        let k = if t_max[0] < t_max[1] { 0 } else { 1 };
        if t_max[k] > 1.0 {
            return;
        }
        cell[k] += step[k];
        t_max[k] += t_delta[k];
    }
}

/// Local occupancy grid in the camera frame: points inside the height band
/// mark their cells occupied; rays from the camera to every point at or
/// below the band top mark the cells they cross free.
pub fn depth_to_local_grid(depth: &DepthMap, cfg: &GridConfig) -> Result<LocalGrid> {
    let r = cfg.resolution;
    if !(r > 0.0) || !(cfg.h_lo < cfg.h_hi) {
        return Err(invalid("grid config needs resolution > 0 and h_lo < h_hi"));
    }
    let points = if depth.valid_count() == 0 { Vec::new() } else { backproject(depth)?.points };
    let in_range: Vec<&Vec3> =
        points.iter().filter(|p| p.z <= cfg.h_hi && sqrt(p.x * p.x + p.y * p.y) <= cfg.max_range).collect();
    let mut lo = [0i64, 0];
    let mut hi = [1i64, 1];
    for p in &in_range {
        let c = [floor(p.x / r) as i64, floor(p.y / r) as i64];
        for k in 0..2 {
            lo[k] = lo[k].min(c[k]);
            hi[k] = hi[k].max(c[k] + 1);
        }
    }
    let mut grid = OccGrid::new(r, lo, (hi[0] - lo[0]) as usize, (hi[1] - lo[1]) as usize)?;
    let n = grid.width * grid.height;
    let mut sum = vec![[0.0f64; 3]; n];
    let mut traced = vec![false; n];
    let mut endpoints = Vec::new();
    for p in &in_range {
        let cell = grid.lattice_of(p.x, p.y);
        let s = grid.slot(cell).expect("grid covers every kept point");
        if p.z >= cfg.h_lo {
            grid.cells[s] = Cell::Occupied;
            sum[s][0] += p.x;
            sum[s][1] += p.y;
            sum[s][2] += 1.0;
        }
        if !traced[s] {
            traced[s] = true;
            endpoints.push([p.x, p.y]);
        }
    }
    for e in endpoints {
        trace_cells([0.0, 0.0], e, r, |c| {
            grid.fuse(c, Cell::Free);
        });
    }
    let centroids = (0..n)
        .filter(|s| grid.cells[*s] == Cell::Occupied)
        .map(|s| [sum[s][0] / sum[s][2], sum[s][1] / sum[s][2]])
        .collect();
    Ok(LocalGrid { grid, centroids })
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Pose2D {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

/// Wraps to `(−π, π]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let mut t = fmod(theta, 2.0 * PI);
    if t > PI {
        t -= 2.0 * PI;
    } else if t <= -PI {
        t += 2.0 * PI;
    }
    t
}

impl Pose2D {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Pose2D { x, y, theta: wrap_angle(theta) }
    }

    pub fn identity() -> Self {
        Pose2D { x: 0.0, y: 0.0, theta: 0.0 }
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = (sin(self.theta), cos(self.theta));
        [self.x + c * p[0] - s * p[1], self.y + s * p[0] + c * p[1]]
    }

    /// `self ∘ other`: `other` is expressed in `self`'s frame.
    pub fn compose(&self, other: &Pose2D) -> Pose2D {
        let [x, y] = self.apply([other.x, other.y]);
        Pose2D::new(x, y, self.theta + other.theta)
    }

    pub fn inverse(&self) -> Pose2D {
        let (s, c) = (sin(self.theta), cos(self.theta));
        Pose2D::new(-(c * self.x + s * self.y), s * self.x - c * self.y, -self.theta)
    }

    /// `self⁻¹ ∘ other`.
    pub fn between(&self, other: &Pose2D) -> Pose2D {
        self.inverse().compose(other)
    }

    pub fn translation_error(&self, other: &Pose2D) -> f64 {
        sqrt((self.x - other.x) * (self.x - other.x) + (self.y - other.y) * (self.y - other.y))
    }

    pub fn angle_error(&self, other: &Pose2D) -> f64 {
        wrap_angle(self.theta - other.theta).abs()
    }

    /// Camera pose in the world with the camera `height` above the floor.
    pub fn to_pose(&self, height: f64) -> Pose {
        Pose::yaw(self.theta, Vec3::new(self.x, self.y, height))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OdomNoise {
    pub sigma_xy: f64,
    pub sigma_theta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdomReading {
    pub delta: Pose2D,
    pub noise: OdomNoise,
}

/// Odometry reading for a true increment with Gaussian noise per component.
pub fn simulate_odometry<R: rand::Rng + ?Sized>(truth: &Pose2D, noise: OdomNoise, rng: &mut R) -> Result<OdomReading> {
    if !(noise.sigma_xy >= 0.0 && noise.sigma_theta >= 0.0) {
        return Err(invalid("odometry noise must be non-negative"));
    }
    let mut draw = |s: f64| if s > 0.0 { Normal::new(0.0, s).expect("sigma > 0").sample(rng) } else { 0.0 };
    let delta = Pose2D::new(
        truth.x + draw(noise.sigma_xy),
        truth.y + draw(noise.sigma_xy),
        truth.theta + draw(noise.sigma_theta),
    );
    Ok(OdomReading { delta, noise })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum IcpMetric {
    PointToPoint,
    /// Residuals projected on line normals fitted to the previous grid.
    PointToLine,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct IcpConfig {
    pub metric: IcpMetric,
    /// Neighbors used to fit each line normal.
    pub line_neighbors: usize,
    /// Expected point-to-line residual, meters; weighs scan evidence
    /// against the odometry prior.
    pub residual_sigma: f64,
    pub max_iterations: usize,
    /// Pairs farther apart than this are not correspondences.
    pub max_correspondence: f64,
    /// Below this inlier fraction the odometry is used instead.
    pub min_inlier_fraction: f64,
    pub tolerance: f64,
}

impl Default for IcpConfig {
    fn default() -> Self {
        IcpConfig {
            metric: IcpMetric::PointToLine,
            line_neighbors: 6,
            residual_sigma: 0.02,
            max_iterations: 50,
            max_correspondence: 0.15,
            min_inlier_fraction: 0.3,
            tolerance: 1e-10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseEstimate {
    /// Current frame expressed in the previous frame.
    pub pose: Pose2D,
    pub inlier_fraction: f64,
    /// True when the odometry was returned unrefined.
    pub fallback: bool,
    pub iterations: usize,
}

/// Rigid 2D transform minimizing `Σ‖T(s) − q‖²` over matched pairs.
pub fn fit_rigid_2d(src: &[[f64; 2]], dst: &[[f64; 2]]) -> Option<Pose2D> {
    if src.len() < 2 || src.len() != dst.len() {
        return None;
    }
    let n = src.len() as f64;
    let ms = src.iter().fold([0.0, 0.0], |a, p| [a[0] + p[0] / n, a[1] + p[1] / n]);
    let md = dst.iter().fold([0.0, 0.0], |a, p| [a[0] + p[0] / n, a[1] + p[1] / n]);
    let (mut sc, mut ss) = (0.0, 0.0);
    for (s, d) in src.iter().zip(dst) {
        let a = [s[0] - ms[0], s[1] - ms[1]];
        let b = [d[0] - md[0], d[1] - md[1]];
        sc += a[0] * b[0] + a[1] * b[1];
        ss += a[0] * b[1] - a[1] * b[0];
    }
    let theta = atan2(ss, sc);
    let (s, c) = (sin(theta), cos(theta));
    Some(Pose2D::new(md[0] - (c * ms[0] - s * ms[1]), md[1] - (s * ms[0] + c * ms[1]), theta))
}

/// Unit normal of the line through `pts`, if they are not all coincident.
fn line_normal(pts: &[[f64; 2]]) -> Option<[f64; 2]> {
    let n = pts.len() as f64;
    let m = pts.iter().fold([0.0, 0.0], |a, p| [a[0] + p[0] / n, a[1] + p[1] / n]);
    let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
    for p in pts {
        let d = [p[0] - m[0], p[1] - m[1]];
        a += d[0] * d[0];
        b += d[0] * d[1];
        c += d[1] * d[1];
    }
    if a + c <= 1e-18 {
        return None;
    }
    let phi = 0.5 * atan2(2.0 * b, a - c);
    Some([-sin(phi), cos(phi)])
}

/// One Gauss-Newton step from `t` of the point-to-line objective plus the
/// odometry prior.
fn point_to_line_step(
    t: &Pose2D,
    pairs: (&[[f64; 2]], &[[f64; 2]], &[[f64; 2]]),
    odom: &OdomReading,
    residual_sigma: f64,
) -> Option<Pose2D> {
    let (src, dst, normals) = pairs;
    let (s, c) = (sin(t.theta), cos(t.theta));
    let w = 1.0 / (residual_sigma * residual_sigma);
    let mut h = nalgebra::Matrix3::<f64>::zeros();
    let mut g = nalgebra::Vector3::<f64>::zeros();
    for ((p, q), n) in src.iter().zip(dst).zip(normals) {
        let tp = t.apply(*p);
        let r = n[0] * (tp[0] - q[0]) + n[1] * (tp[1] - q[1]);
        let dtheta = n[0] * (-s * p[0] - c * p[1]) + n[1] * (c * p[0] - s * p[1]);
        let j = nalgebra::Vector3::new(n[0], n[1], dtheta);
        h += j * j.transpose() * w;
        g += j * (r * w);
    }
    let prior = [odom.noise.sigma_xy, odom.noise.sigma_xy, odom.noise.sigma_theta];
    let dev = [t.x - odom.delta.x, t.y - odom.delta.y, wrap_angle(t.theta - odom.delta.theta)];
    for k in 0..3 {
        // A zero sigma pins that component to the odometry.
        let pk = if prior[k] > 0.0 { 1.0 / (prior[k] * prior[k]) } else { 1e12 };
        h[(k, k)] += pk;
        g[k] += pk * dev[k];
    }
    let step = h.cholesky()?.solve(&g);
    Some(Pose2D::new(t.x - step[0], t.y - step[1], t.theta - step[2]))
}

/// Relative pose of `cur` in `prev`'s frame by ICP over occupied-cell
/// centroids, started at the odometry increment. The point-to-line variant
/// also weighs the odometry by its noise model; noise-free odometry is
/// returned as is.
pub fn estimate_pose(prev: &LocalGrid, cur: &LocalGrid, odom: &OdomReading, cfg: &IcpConfig) -> PoseEstimate {
    let fallback = PoseEstimate { pose: odom.delta, inlier_fraction: 0.0, fallback: true, iterations: 0 };
    if prev.centroids.is_empty() || cur.centroids.is_empty() {
        return fallback;
    }
    let exact_odom = odom.noise.sigma_xy == 0.0 && odom.noise.sigma_theta == 0.0;
    if cfg.metric == IcpMetric::PointToLine && exact_odom {
        return PoseEstimate { fallback: false, ..fallback };
    }
    let tree = KdTree::new(&prev.centroids);
    let normals: Vec<Option<[f64; 2]>> = match cfg.metric {
        IcpMetric::PointToPoint => Vec::new(),
        IcpMetric::PointToLine => prev
            .centroids
            .iter()
            .map(|p| {
                let nb: Vec<[f64; 2]> =
                    tree.knn(p, cfg.line_neighbors.max(2)).iter().map(|(j, _)| prev.centroids[*j]).collect();
                line_normal(&nb)
            })
            .collect(),
    };
    let gate = cfg.max_correspondence * cfg.max_correspondence;
    let matches = |t: &Pose2D| {
        let (mut src, mut dst, mut nrm) = (Vec::new(), Vec::new(), Vec::new());
        for s in &cur.centroids {
            let (j, d2) = tree.nearest(&t.apply(*s)).expect("nonempty");
            if d2 > gate {
                continue;
            }
            match cfg.metric {
                IcpMetric::PointToPoint => {}
                IcpMetric::PointToLine => match normals[j] {
                    Some(n) => nrm.push(n),
                    None => continue,
                },
            }
            src.push(*s);
            dst.push(prev.centroids[j]);
        }
        (src, dst, nrm)
    };
    let mut t = odom.delta;
    let mut iterations = 0;
    for _ in 0..cfg.max_iterations {
        let (src, dst, nrm) = matches(&t);
        let next = match cfg.metric {
            IcpMetric::PointToPoint => fit_rigid_2d(&src, &dst),
            IcpMetric::PointToLine if src.len() >= 3 => {
                point_to_line_step(&t, (&src, &dst, &nrm), odom, cfg.residual_sigma)
            }
            IcpMetric::PointToLine => None,
        };
        let Some(next) = next else {
            return fallback;
        };
        iterations += 1;
        let change = next.translation_error(&t) + next.angle_error(&t);
        t = next;
        if change <= cfg.tolerance {
            break;
        }
    }
    let inliers = matches(&t).0.len() as f64 / cur.centroids.len() as f64;
    if inliers < cfg.min_inlier_fraction {
        return PoseEstimate { inlier_fraction: inliers, ..fallback };
    }
    PoseEstimate { pose: t, inlier_fraction: inliers, fallback: false, iterations }
}

/// Fuses a local grid placed at `pose` into `global`, growing it as needed.
/// Occupied cells move forward through their centroids; free cells are
/// found by looking up each covered global cell center in the local grid.
pub fn stitch_local(global: &OccGrid, local: &LocalGrid, pose: &Pose2D) -> Result<OccGrid> {
    let l = &local.grid;
    if (l.resolution - global.resolution).abs() > 1e-12 {
        return Err(invalid("grids must share a resolution"));
    }
    let Some((llo, lhi)) = l.bounds() else {
        return Ok(global.clone());
    };
    let r = l.resolution;
    // Pull the exclusive corner inside so an identity pose adds no cells.
    let (x0, y0) = (llo[0] as f64 * r, llo[1] as f64 * r);
    let (x1, y1) = ((lhi[0] as f64 - 1e-9) * r, (lhi[1] as f64 - 1e-9) * r);
    let corners = [[x0, y0], [x1, y0], [x0, y1], [x1, y1]];
    let mut lo = [i64::MAX; 2];
    let mut hi = [i64::MIN; 2];
    for c in corners.iter().map(|c| pose.apply(*c)) {
        let cell = global.lattice_of(c[0], c[1]);
        for k in 0..2 {
            lo[k] = lo[k].min(cell[k]);
            hi[k] = hi[k].max(cell[k] + 1);
        }
    }
    let mut out = global.grown(lo, hi);
    let inv = pose.inverse();
    for j in lo[1]..hi[1] {
        for i in lo[0]..hi[0] {
            let p = inv.apply(out.center([i, j]));
            if l.get(l.lattice_of(p[0], p[1])) == Cell::Free {
                out.fuse([i, j], Cell::Free);
            }
        }
    }
    for c in &local.centroids {
        let p = pose.apply(*c);
        let cell = out.lattice_of(p[0], p[1]);
        out.fuse(cell, Cell::Occupied);
    }
    Ok(out)
}

/// [`stitch_local`] for a plain grid, using cell centers.
pub fn stitch_global(global: &OccGrid, local: &OccGrid, pose: &Pose2D) -> Result<OccGrid> {
    stitch_local(global, &LocalGrid::from_grid(local.clone()), pose)
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MapMetrics {
    pub chamfer2d: f64,
    pub mae: f64,
    /// `+∞` for identical rasters.
    pub psnr: f64,
    pub iou: f64,
}

fn mean_nn_distance(from: &[[f64; 2]], tree: &KdTree<2>) -> f64 {
    from.iter().map(|p| sqrt(tree.nearest(p).expect("nonempty").1)).sum::<f64>() / from.len() as f64
}

/// Compares two grids on the shared lattice over the union of their extents.
pub fn map_metrics(est: &OccGrid, gt: &OccGrid) -> Result<MapMetrics> {
    if (est.resolution - gt.resolution).abs() > 1e-12 {
        return Err(invalid("grids must share a resolution"));
    }
    let a = est.occupied_centers();
    let b = gt.occupied_centers();
    if a.is_empty() || b.is_empty() {
        return Err(Error::NoOccupiedCells);
    }
    let chamfer2d = 0.5 * (mean_nn_distance(&a, &KdTree::new(&b)) + mean_nn_distance(&b, &KdTree::new(&a)));
    let (alo, ahi) = est.bounds().expect("has occupied cells");
    let (blo, bhi) = gt.bounds().expect("has occupied cells");
    let lo = [alo[0].min(blo[0]), alo[1].min(blo[1])];
    let hi = [ahi[0].max(bhi[0]), ahi[1].max(bhi[1])];
    let (mut diff, mut inter, mut union) = (0usize, 0usize, 0usize);
    for j in lo[1]..hi[1] {
        for i in lo[0]..hi[0] {
            let x = est.get([i, j]) == Cell::Occupied;
            let y = gt.get([i, j]) == Cell::Occupied;
            diff += usize::from(x != y);
            inter += usize::from(x && y);
            union += usize::from(x || y);
        }
    }
    let total = ((hi[0] - lo[0]) * (hi[1] - lo[1])) as f64;
    let mae = diff as f64 / total;
    Ok(MapMetrics {
        chamfer2d,
        mae,
        psnr: if diff == 0 { f64::INFINITY } else { -10.0 * log10(mae) },
        iou: inter as f64 / union as f64,
    })
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrajectorySpec {
    pub actions: Vec<AgentAction>,
    /// Forward step, meters.
    pub step: f64,
    /// Turn increment, radians.
    pub turn: f64,
}

impl TrajectorySpec {
    pub fn new(actions: Vec<AgentAction>) -> Result<Self> {
        if actions.is_empty() {
            return Err(invalid("trajectory needs at least one action"));
        }
        Ok(TrajectorySpec { actions, step: 0.25, turn: 10f64.to_radians() })
    }

    /// Counter-clockwise square: `side` forwards then a 90° left turn,
    /// repeated and truncated to `total` actions.
    pub fn square_loop(side: usize, total: usize) -> Result<Self> {
        let mut leg = vec![AgentAction::Forward; side];
        leg.extend([AgentAction::TurnLeft; 9]);
        Self::new(leg.iter().copied().cycle().take(total).collect())
    }

    pub fn apply(&self, pose: &Pose2D, action: AgentAction) -> Pose2D {
        match action {
            AgentAction::Forward => pose.compose(&Pose2D::new(self.step, 0.0, 0.0)),
            AgentAction::TurnLeft => pose.compose(&Pose2D::new(0.0, 0.0, self.turn)),
            AgentAction::TurnRight => pose.compose(&Pose2D::new(0.0, 0.0, -self.turn)),
            AgentAction::Stop => *pose,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlamConfig {
    pub grid: GridConfig,
    pub icp: IcpConfig,
    pub odom_noise: OdomNoise,
    pub camera_height: f64,
    /// Free-space margin kept around the camera path.
    pub clearance: f64,
    pub width: usize,
    pub height: usize,
}

impl Default for SlamConfig {
    fn default() -> Self {
        SlamConfig {
            grid: GridConfig::default(),
            icp: IcpConfig::default(),
            odom_noise: OdomNoise::default(),
            camera_height: 1.0,
            clearance: 0.15,
            width: 128,
            height: 64,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SlamRun {
    pub grid: OccGrid,
    pub estimated: Vec<Pose2D>,
    pub truth: Vec<Pose2D>,
    pub collisions: usize,
    pub fallbacks: usize,
    /// Every rendered panorama with the action that led to it; the first
    /// frame carries `Stop`.
    pub log: Vec<(Panorama, AgentAction)>,
}

fn path_free(scene: &Scene, a: &Pose2D, b: &Pose2D, cfg: &SlamConfig) -> bool {
    [0.5, 1.0].iter().all(|f| {
        let z = cfg.camera_height * f;
        scene.segment_free(&Vec3::new(a.x, a.y, z), &Vec3::new(b.x, b.y, z), cfg.clearance)
    })
}

/// Runs the scripted trajectory: at each step render, predict depth, build a
/// local grid, correct the odometry by ICP and stitch. Actions that would
/// collide are counted and skipped.
pub fn run_fixed_trajectory_slam<P: DepthPredictor + ?Sized>(
    scene: &Arc<Scene>,
    start: Pose2D,
    traj: &TrajectorySpec,
    predictor: &P,
    cfg: &SlamConfig,
    seed: u64,
) -> Result<SlamRun> {
    if !path_free(scene, &start, &start, cfg) {
        return Err(Error::OutsideFreeSpace);
    }
    let mut odom_rng = rng::stream(seed, "odometry");
    let observe = |pose: &Pose2D| -> Result<(Panorama, LocalGrid)> {
        let (img, _) = render_panorama(scene, &pose.to_pose(cfg.camera_height), cfg.width, cfg.height)?;
        let depth = predictor.predict(&img)?;
        Ok((img, depth_to_local_grid(&depth, &cfg.grid)?))
    };
    let (img, mut prev) = observe(&start)?;
    let mut grid = stitch_local(&OccGrid::empty(cfg.grid.resolution)?, &prev, &start)?;
    let mut truth = vec![start];
    let mut estimated = vec![start];
    let mut log = vec![(img, AgentAction::Stop)];
    let (mut collisions, mut fallbacks) = (0, 0);
    for &action in &traj.actions {
        let last = *truth.last().expect("nonempty");
        let next = traj.apply(&last, action);
        if !path_free(scene, &last, &next, cfg) {
            collisions += 1;
            continue;
        }
        let odom = simulate_odometry(&last.between(&next), cfg.odom_noise, &mut odom_rng)?;
        let (img, cur) = observe(&next)?;
        let est = estimate_pose(&prev, &cur, &odom, &cfg.icp);
        fallbacks += usize::from(est.fallback);
        let pose = estimated.last().expect("nonempty").compose(&est.pose);
        grid = stitch_local(&grid, &cur, &pose)?;
        truth.push(next);
        estimated.push(pose);
        log.push((img, action));
        prev = cur;
    }
    Ok(SlamRun { grid, estimated, truth, collisions, fallbacks, log })
}

/// Reference map: ground-truth depth stitched at the ground-truth poses.
pub fn ground_truth_map(scene: &Scene, poses: &[Pose2D], cfg: &SlamConfig) -> Result<OccGrid> {
    let mut grid = OccGrid::empty(cfg.grid.resolution)?;
    for p in poses {
        let (_, depth) = render_panorama(scene, &p.to_pose(cfg.camera_height), cfg.width, cfg.height)?;
        grid = stitch_local(&grid, &depth_to_local_grid(&depth, &cfg.grid)?, p)?;
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{build_scene, SceneSpec};
    use proptest::prelude::*;

    fn room_depth(w: f64, d: f64, pose: &Pose2D) -> DepthMap {
        let s = build_scene(&SceneSpec::plain_room(w, d, 2.5), 0).unwrap();
        render_panorama(&s, &pose.to_pose(1.0), 256, 128).unwrap().1
    }

    fn wall_extent(g: &OccGrid) -> ([i64; 2], [i64; 2]) {
        let occ = g.occupied();
        let lo = [occ.iter().map(|c| c[0]).min().unwrap(), occ.iter().map(|c| c[1]).min().unwrap()];
        let hi = [occ.iter().map(|c| c[0]).max().unwrap(), occ.iter().map(|c| c[1]).max().unwrap()];
        (lo, hi)
    }

    #[test]
    fn room_walls_form_rectangle() {
        let g = depth_to_local_grid(&room_depth(4.0, 4.0, &Pose2D::identity()), &GridConfig::default()).unwrap().grid;
        let (lo, hi) = wall_extent(&g);
        // Walls at ±2 m: cells −40 and 39 hold the boundary.
        for k in 0..2 {
            assert!((lo[k] + 40).abs() <= 1 && (hi[k] - 39).abs() <= 1, "{lo:?} {hi:?}");
        }
        for c in g.occupied() {
            let x = c[0].abs().max(c[1].abs());
            assert!(x >= 38, "{c:?}");
        }
        assert_eq!(g.get([0, 0]), Cell::Free);
        assert_eq!(g.get([20, -20]), Cell::Free);
    }

    #[test]
    fn scaled_depth_moves_walls_out() {
        let d = room_depth(4.0, 4.0, &Pose2D::identity()).map(|_, x| x * 1.3);
        let g = depth_to_local_grid(&d, &GridConfig::default()).unwrap().grid;
        let (lo, hi) = wall_extent(&g);
        // ±2.6 m.
        for k in 0..2 {
            assert!((lo[k] + 52).abs() <= 1 && (hi[k] - 51).abs() <= 1, "{lo:?} {hi:?}");
        }
    }

    #[test]
    fn invalid_depth_gives_unknown_grid() {
        let d = DepthMap::from_depths(8, 4, vec![f64::NAN; 32]).unwrap();
        let g = depth_to_local_grid(&d, &GridConfig::default()).unwrap().grid;
        assert!(g.cells().iter().all(|c| *c == Cell::Unknown));
    }

    #[test]
    fn dda_visits_connected_cells() {
        let mut seen = Vec::new();
        trace_cells([0.01, 0.01], [0.42, 0.13], 0.1, |c| seen.push(c));
        assert_eq!(seen[0], [0, 0]);
        assert!(!seen.contains(&[4, 1]));
        for w in seen.windows(2) {
            assert_eq!((w[0][0] - w[1][0]).abs() + (w[0][1] - w[1][1]).abs(), 1);
        }
        assert_eq!(*seen.last().unwrap(), [3, 1]);
    }

    #[test]
    fn pose_algebra() {
        let a = Pose2D::new(1.0, 2.0, 0.3);
        let b = Pose2D::new(-0.5, 0.2, 2.9);
        let ab = a.compose(&b);
        assert!(a.between(&ab).translation_error(&b) < 1e-12);
        assert!(a.compose(&a.inverse()).translation_error(&Pose2D::identity()) < 1e-12);
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert!((wrap_angle(3.0 * PI + 0.1) - (-PI + 0.1)).abs() < 1e-12);
    }

    #[test]
    fn icp_recovers_constructed_translation() {
        let cfg = GridConfig::default();
        let prev = depth_to_local_grid(&room_depth(4.0, 4.0, &Pose2D::new(-0.3, 0.1, 0.0)), &cfg).unwrap();
        let cur = depth_to_local_grid(&room_depth(4.0, 4.0, &Pose2D::new(-0.05, 0.1, 0.0)), &cfg).unwrap();
        let truth = Pose2D::new(0.25, 0.0, 0.0);
        let exact = OdomReading { delta: truth, noise: OdomNoise::default() };
        let e = estimate_pose(&prev, &cur, &exact, &IcpConfig::default());
        assert!(!e.fallback);
        assert!(e.pose.translation_error(&truth) <= 0.01 && e.pose.angle_error(&truth) <= 0.5f64.to_radians(), "{e:?}");
        let noise = OdomNoise { sigma_xy: 0.05, sigma_theta: 0.0 };
        let mut r = rng::from_seed(9);
        for _ in 0..10 {
            let odom = simulate_odometry(&truth, noise, &mut r).unwrap();
            let e = estimate_pose(&prev, &cur, &odom, &IcpConfig::default());
            assert!(e.pose.translation_error(&truth) <= 0.02 && e.pose.angle_error(&truth) <= 1f64.to_radians(), "{e:?}");
        }
    }

    #[test]
    fn icp_identity_is_exact() {
        let l = depth_to_local_grid(&room_depth(4.0, 3.0, &Pose2D::new(0.2, 0.1, 0.4)), &GridConfig::default()).unwrap();
        let zero = OdomReading { delta: Pose2D::identity(), noise: OdomNoise::default() };
        let e = estimate_pose(&l, &l, &zero, &IcpConfig::default());
        assert!(e.pose.translation_error(&Pose2D::identity()) <= 1e-9 && e.pose.theta.abs() <= 1e-9);
        let empty = LocalGrid::from_grid(OccGrid::empty(0.05).unwrap());
        assert!(estimate_pose(&empty, &l, &zero, &IcpConfig::default()).fallback);
    }

    #[test]
    fn stitch_identity_and_idempotence() {
        let l = depth_to_local_grid(&room_depth(4.0, 3.0, &Pose2D::identity()), &GridConfig::default()).unwrap();
        let g = stitch_local(&OccGrid::empty(0.05).unwrap(), &l, &Pose2D::identity()).unwrap();
        assert_eq!(g, l.grid);
        let twice = stitch_local(&g, &l, &Pose2D::identity()).unwrap();
        assert_eq!(twice, g);
        let p = Pose2D::new(0.3, -0.2, 0.7);
        let a = stitch_local(&g, &l, &p).unwrap();
        assert_eq!(stitch_local(&a, &l, &p).unwrap(), a);
    }

    #[test]
    fn two_half_views_cover_room() {
        let s = build_scene(&SceneSpec::plain_room(6.0, 3.0, 2.5), 0).unwrap();
        let cfg = SlamConfig::default();
        let poses = [Pose2D::new(-1.5, 0.0, 0.0), Pose2D::new(1.5, 0.0, PI)];
        let g = ground_truth_map(&s, &poses, &cfg).unwrap();
        let occ = g.occupied();
        let (lo, hi) = wall_extent(&g);
        assert!((lo[0] + 60).abs() <= 1 && (hi[0] - 59).abs() <= 1 && (lo[1] + 30).abs() <= 1 && (hi[1] - 29).abs() <= 1);
        // Every boundary cell of the room rectangle has an occupied cell within one cell.
        for i in -60..60i64 {
            for j in [-30i64, 29] {
                assert!(occ.iter().any(|c| (c[0] - i).abs() <= 1 && (c[1] - j).abs() <= 1), "{i} {j}");
            }
        }
    }

    #[test]
    fn metric_examples() {
        let mut a = OccGrid::new(0.05, [0, 0], 10, 10).unwrap();
        a.fuse([3, 3], Cell::Occupied);
        let m = map_metrics(&a, &a).unwrap();
        assert_eq!((m.chamfer2d, m.mae, m.iou), (0.0, 0.0, 1.0));
        assert_eq!(m.psnr, f64::INFINITY);
        let mut b = OccGrid::new(0.05, [0, 0], 10, 10).unwrap();
        b.fuse([5, 3], Cell::Occupied);
        assert!((map_metrics(&a, &b).unwrap().chamfer2d - 0.10).abs() < 1e-12);
        assert!(matches!(map_metrics(&a, &OccGrid::new(0.05, [0, 0], 2, 2).unwrap()), Err(Error::NoOccupiedCells)));
    }

    proptest! {
        #[test]
        fn local_grid_free_cells_lie_on_rays(
            d in proptest::collection::vec(0.3f64..4.0, 32 * 16),
        ) {
            let depth = DepthMap::from_depths(32, 16, d).unwrap();
            let cfg = GridConfig::default();
            let l = depth_to_local_grid(&depth, &cfg).unwrap();
            let pts = backproject(&depth).unwrap().points;
            let mut on_ray = alloc::collections::BTreeSet::new();
            for p in pts.iter().filter(|p| p.z <= cfg.h_hi) {
                trace_cells([0.0, 0.0], [p.x, p.y], cfg.resolution, |c| { on_ray.insert(c); });
            }
            for s in 0..l.grid.cells().len() {
                if l.grid.cells()[s] == Cell::Free {
                    prop_assert!(on_ray.contains(&l.grid.lattice(s)));
                }
            }
            prop_assert_eq!(l.centroids.len(), l.grid.count(Cell::Occupied));
        }
    }
}
