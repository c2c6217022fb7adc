//! Equirectangular conventions, image/depth containers, poses and back-projection.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use libm::{atan2, cos, floor, sin, sqrt};
use nalgebra::{Matrix3, Vector3};

use crate::error::{domain, invalid, Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Provenance of a panorama: which scene it depicts and how the depicted
/// camera frame maps into that scene's world frame (`X = linear · x + center`).
///
/// Renders carry an orthonormal `linear`; stretching, flipping and rotation
/// shifts compose further linear maps onto it. Predictors that stand in for
/// a network read ground truth through this tag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Capture {
    pub scene: u64,
    pub linear: Mat3,
    pub center: Vec3,
}

impl Capture {
    pub fn from_pose(scene: u64, pose: &Pose) -> Self {
        Capture { scene, linear: pose.rotation, center: pose.translation }
    }

    /// Tag of a view rendered at `pose` relative to this capture's camera.
    pub fn then_pose(&self, pose: &Pose) -> Self {
        Capture {
            scene: self.scene,
            linear: self.linear * pose.rotation,
            center: self.center + self.linear * pose.translation,
        }
    }

    /// Tag after a resampling whose new camera coordinates `x'` relate to the
    /// old ones by `x = a · x'`.
    pub fn then_linear(&self, a: &Mat3) -> Self {
        Capture { scene: self.scene, linear: self.linear * a, center: self.center }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Panorama {
    width: usize,
    height: usize,
    rgb: Vec<[f32; 3]>,
    capture: Option<Capture>,
}

fn check_dims(width: usize, height: usize, len: usize) -> Result<()> {
    if height == 0 || width != 2 * height {
        return Err(invalid("panorama width must equal 2 × height and be nonzero"));
    }
    if len != width * height {
        return Err(invalid("buffer length does not match dimensions"));
    }
    Ok(())
}

impl Panorama {
    pub fn new(width: usize, height: usize, rgb: Vec<[f32; 3]>) -> Result<Self> {
        check_dims(width, height, rgb.len())?;
        if rgb.iter().flatten().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(invalid("color channels must lie in [0, 1]"));
        }
        Ok(Panorama { width, height, rgb, capture: None })
    }

    pub fn filled(width: usize, height: usize, color: [f32; 3]) -> Result<Self> {
        Panorama::new(width, height, vec![color; width * height])
    }

    /// Clamps channels into `[0, 1]`; NaN becomes 0.
    pub(crate) fn from_clamped(width: usize, height: usize, mut rgb: Vec<[f32; 3]>) -> Self {
        for c in rgb.iter_mut().flatten() {
            *c = if c.is_nan() { 0.0 } else { c.clamp(0.0, 1.0) };
        }
        Panorama { width, height, rgb, capture: None }
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn pixels(&self) -> &[[f32; 3]] {
        &self.rgb
    }
    pub fn get(&self, u: usize, v: usize) -> [f32; 3] {
        self.rgb[v * self.width + u]
    }
    pub fn capture(&self) -> Option<&Capture> {
        self.capture.as_ref()
    }
    pub fn with_capture(mut self, capture: Option<Capture>) -> Self {
        self.capture = capture;
        self
    }

    /// Bilinear sample at continuous pixel coordinates; columns wrap, rows clamp.
    pub fn sample(&self, u: f64, v: f64) -> [f32; 3] {
        let (w, h) = (self.width, self.height);
        let v = v.clamp(0.0, (h - 1) as f64);
        let v0 = floor(v);
        let fv = v - v0;
        let v0 = v0 as usize;
        let v1 = (v0 + 1).min(h - 1);
        let u0f = floor(u);
        let fu = u - u0f;
        let u0 = (u0f as i64).rem_euclid(w as i64) as usize;
        let u1 = (u0 + 1) % w;
        let mut out = [0.0f32; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let a = f64::from(self.rgb[v0 * w + u0][c]);
            let b = f64::from(self.rgb[v0 * w + u1][c]);
            let d = f64::from(self.rgb[v1 * w + u0][c]);
            let e = f64::from(self.rgb[v1 * w + u1][c]);
            let top = a + (b - a) * fu;
            let bot = d + (e - d) * fu;
            *o = (top + (bot - top) * fv) as f32;
        }
        out
    }

    /// Box-filtered copy at `1/factor` resolution, keeping the capture tag.
    pub fn downsample(&self, factor: usize) -> Result<Panorama> {
        if factor == 0 || self.height % factor != 0 {
            return Err(invalid("downsample factor must divide the height"));
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let norm = (factor * factor) as f32;
        let rgb = (0..w * h)
            .map(|i| {
                let (u, v) = (i % w, i / w);
                let mut acc = [0.0f32; 3];
                for dv in 0..factor {
                    for du in 0..factor {
                        let p = self.rgb[(v * factor + dv) * self.width + u * factor + du];
                        for c in 0..3 {
                            acc[c] += p[c];
                        }
                    }
                }
                acc.map(|x| x / norm)
            })
            .collect();
        Ok(Panorama::from_clamped(w, h, rgb).with_capture(self.capture))
    }

    /// Rec. 601 luma per pixel.
    pub fn luma(&self) -> Vec<f32> {
        self.rgb.iter().map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).collect()
    }
}

#[derive(Debug, Clone)]
pub struct DepthMap {
    width: usize,
    height: usize,
    depth: Vec<f64>,
    valid: Vec<bool>,
}

/// Equal when dimensions and masks agree and valid depths are equal; the
/// NaN placeholders of invalid pixels are ignored.
impl PartialEq for DepthMap {
    fn eq(&self, other: &Self) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.valid == other.valid
            && self.depth.iter().zip(&other.depth).zip(&self.valid).all(|((a, b), ok)| !ok || a == b)
    }
}

impl DepthMap {
    /// Every `valid` entry must hold a finite positive depth. Invalid entries
    /// are stored as NaN.
    pub fn new(width: usize, height: usize, mut depth: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        check_dims(width, height, depth.len())?;
        if valid.len() != depth.len() {
            return Err(invalid("mask length does not match dimensions"));
        }
        for (d, &ok) in depth.iter_mut().zip(&valid) {
            if ok && !(d.is_finite() && *d > 0.0) {
                return Err(invalid("valid depth must be finite and positive"));
            }
            if !ok {
                *d = f64::NAN;
            }
        }
        Ok(DepthMap { width, height, depth, valid })
    }

    /// Non-finite or non-positive entries become invalid.
    pub fn from_depths(width: usize, height: usize, depth: Vec<f64>) -> Result<Self> {
        check_dims(width, height, depth.len())?;
        Ok(Self::from_raw(width, height, depth))
    }

    pub(crate) fn from_raw(width: usize, height: usize, mut depth: Vec<f64>) -> Self {
        let valid: Vec<bool> = depth.iter().map(|d| d.is_finite() && *d > 0.0).collect();
        for (d, ok) in depth.iter_mut().zip(&valid) {
            if !ok {
                *d = f64::NAN;
            }
        }
        DepthMap { width, height, depth, valid }
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::from_depths(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    /// Raw values; invalid pixels hold NaN.
    pub fn values(&self) -> &[f64] {
        &self.depth
    }
    pub fn mask(&self) -> &[bool] {
        &self.valid
    }
    pub fn get(&self, u: usize, v: usize) -> Option<f64> {
        let i = v * self.width + u;
        self.valid[i].then(|| self.depth[i])
    }
    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Mean over valid pixels.
    pub fn mean(&self) -> Option<f64> {
        let n = self.valid_count();
        (n > 0).then(|| {
            let s: f64 = self.depth.iter().zip(&self.valid).filter(|(_, v)| **v).map(|(d, _)| d).sum();
            s / n as f64
        })
    }

    /// Applies `f` to every valid depth; results that are not finite and
    /// positive become invalid.
    pub fn map(&self, mut f: impl FnMut(usize, f64) -> f64) -> DepthMap {
        let depth = self
            .depth
            .iter()
            .zip(&self.valid)
            .enumerate()
            .map(|(i, (d, ok))| if *ok { f(i, *d) } else { f64::NAN })
            .collect();
        DepthMap::from_raw(self.width, self.height, depth)
    }

    /// Keeps only pixels where `keep` is true.
    pub fn masked(&self, keep: &[bool]) -> DepthMap {
        self.map(|i, d| if keep[i] { d } else { f64::NAN })
    }

    pub fn same_dims(&self, other_w: usize, other_h: usize) -> Result<()> {
        if self.width != other_w || self.height != other_h {
            return Err(Error::DimensionMismatch {
                expected: (self.width, self.height),
                got: (other_w, other_h),
            });
        }
        Ok(())
    }
}

/// Unit bearing vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphereDir(Vec3);

impl SphereDir {
    pub fn new(v: Vec3) -> Result<Self> {
        let n = v.norm();
        if !(n.is_finite() && n > 0.0) {
            return Err(domain("zero or non-finite direction"));
        }
        Ok(SphereDir(v / n))
    }
    pub fn vector(&self) -> Vec3 {
        self.0
    }
    pub fn x(&self) -> f64 {
        self.0.x
    }
    pub fn y(&self) -> f64 {
        self.0.y
    }
    pub fn z(&self) -> f64 {
        self.0.z
    }
}

pub fn longitude(u: f64, width: usize) -> f64 {
    2.0 * PI * (u + 0.5) / width as f64 - PI
}

pub fn colatitude(v: f64, height: usize) -> f64 {
    PI * (v + 0.5) / height as f64
}

fn dir_from_angles(phi: f64, psi: f64) -> Vec3 {
    let s = sin(psi);
    Vec3::new(s * cos(phi), s * sin(phi), cos(psi))
}

pub fn pixel_to_dir(u: f64, v: f64, width: usize, height: usize) -> Result<SphereDir> {
    if !(u >= 0.0 && u < width as f64 && v >= 0.0 && v < height as f64) {
        return Err(domain("pixel coordinate out of range"));
    }
    Ok(SphereDir(dir_from_angles(longitude(u, width), colatitude(v, height))))
}

/// Continuous pixel coordinates of a nonzero direction. `u` wraps into
/// `[0, W)`; `v` is clamped to `[0, H − 1]`, so pole directions land on the
/// first or last row. At an exact pole `u` is 0.
pub fn project(d: &Vec3, width: usize, height: usize) -> (f64, f64) {
    let (w, h) = (width as f64, height as f64);
    let rho = sqrt(d.x * d.x + d.y * d.y);
    let psi = atan2(rho, d.z);
    let v = (psi * h / PI - 0.5).clamp(0.0, h - 1.0);
    if rho == 0.0 {
        return (0.0, v);
    }
    let phi = atan2(d.y, d.x);
    let raw = (phi + PI) * w / (2.0 * PI) - 0.5;
    let mut u = raw - w * floor(raw / w);
    if u >= w {
        u -= w;
    }
    (u, v)
}

pub fn dir_to_pixel(d: &SphereDir, width: usize, height: usize) -> (f64, f64) {
    project(&d.0, width, height)
}

/// As [`dir_to_pixel`] for an arbitrary vector; rejects the zero vector.
pub fn vec_to_pixel(d: &Vec3, width: usize, height: usize) -> Result<(f64, f64)> {
    if !(d.norm() > 0.0) {
        return Err(domain("zero direction"));
    }
    Ok(project(d, width, height))
}

/// Nearest integer pixel of a direction.
pub(crate) fn project_nearest(d: &Vec3, width: usize, height: usize) -> (usize, usize) {
    let (u, v) = project(d, width, height);
    let iu = (floor(u + 0.5) as usize) % width;
    let iv = (floor(v + 0.5) as usize).min(height - 1);
    (iu, iv)
}

/// Precomputed pixel-center bearings for one resolution.
pub struct DirTable {
    width: usize,
    cos_phi: Vec<f64>,
    sin_phi: Vec<f64>,
    cos_psi: Vec<f64>,
    sin_psi: Vec<f64>,
}

impl DirTable {
    pub fn new(width: usize, height: usize) -> Self {
        let phis: Vec<f64> = (0..width).map(|u| longitude(u as f64, width)).collect();
        let psis: Vec<f64> = (0..height).map(|v| colatitude(v as f64, height)).collect();
        DirTable {
            width,
            cos_phi: phis.iter().map(|p| cos(*p)).collect(),
            sin_phi: phis.iter().map(|p| sin(*p)).collect(),
            cos_psi: psis.iter().map(|p| cos(*p)).collect(),
            sin_psi: psis.iter().map(|p| sin(*p)).collect(),
        }
    }

    pub fn dir(&self, u: usize, v: usize) -> Vec3 {
        let s = self.sin_psi[v];
        Vec3::new(s * self.cos_phi[u], s * self.sin_phi[u], self.cos_psi[v])
    }

    pub fn dir_index(&self, i: usize) -> Vec3 {
        self.dir(i % self.width, i / self.width)
    }

    pub fn cos_colatitude(&self, v: usize) -> f64 {
        self.cos_psi[v]
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    /// Per-point unit normal; `None` marks a degenerate neighborhood.
    pub normals: Option<Vec<Option<Vec3>>>,
    /// Pixel `(u, v)` each point came from.
    pub source_pixel: Option<Vec<(u32, u32)>>,
}

impl PointCloud {
    pub fn from_points(points: Vec<Vec3>) -> Self {
        PointCloud { points, normals: None, source_pixel: None }
    }
    pub fn len(&self) -> usize {
        self.points.len()
    }
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// `B(D)`: one point `D[u,v] · S[u,v]` per valid pixel, in raster order.
pub fn backproject(depth: &DepthMap) -> Result<PointCloud> {
    let table = DirTable::new(depth.width, depth.height);
    let mut points = Vec::with_capacity(depth.valid_count());
    let mut pix = Vec::with_capacity(points.capacity());
    for v in 0..depth.height {
        for u in 0..depth.width {
            if let Some(d) = depth.get(u, v) {
                points.push(table.dir(u, v) * d);
                pix.push((u as u32, v as u32));
            }
        }
    }
    if points.is_empty() {
        return Err(Error::EmptyCloud);
    }
    Ok(PointCloud { points, normals: None, source_pixel: Some(pix) })
}

/// Rigid transform placing a child frame in its parent: parent point
/// `p = R x + t` for child point `x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Pose {
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        let err = (rotation.transpose() * rotation - Mat3::identity()).abs().max();
        let det = rotation.determinant();
        if !(err <= 1e-9 && (det - 1.0).abs() <= 1e-9) || !translation.iter().all(|x| x.is_finite()) {
            return Err(invalid("rotation must be orthonormal with determinant +1"));
        }
        Ok(Pose { rotation, translation })
    }

    pub fn identity() -> Self {
        Pose { rotation: Mat3::identity(), translation: Vec3::zeros() }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Pose { rotation: Mat3::identity(), translation: t }
    }

    pub fn yaw(theta: f64, translation: Vec3) -> Self {
        Pose { rotation: rot_z(theta), translation }
    }

    pub fn compose(&self, child: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * child.rotation,
            translation: self.rotation * child.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose { rotation: rt, translation: -(rt * self.translation) }
    }

    /// Parent coordinates of a child point.
    pub fn to_parent(&self, x: &Vec3) -> Vec3 {
        self.rotation * x + self.translation
    }

    /// Child coordinates of a parent point: `Rᵀ(p − t)`.
    pub fn to_child(&self, p: &Vec3) -> Vec3 {
        self.rotation.tr_mul(&(p - self.translation))
    }
}

pub fn rot_z(theta: f64) -> Mat3 {
    let (s, c) = (sin(theta), cos(theta));
    Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

pub fn rot_x(theta: f64) -> Mat3 {
    let (s, c) = (sin(theta), cos(theta));
    Mat3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rot_y(theta: f64) -> Mat3 {
    let (s, c) = (sin(theta), cos(theta));
    Mat3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

/// Rotation angle of `R` in radians, stable near 0 and π.
pub fn rotation_angle(r: &Mat3) -> f64 {
    let w = Vec3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    let s = 0.5 * w.norm();
    let c = 0.5 * (r.trace() - 1.0);
    atan2(s, c)
}

/// Rodrigues exponential map.
pub fn exp_so3(w: &Vec3) -> Mat3 {
    let theta = w.norm();
    let k = Mat3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0);
    if theta < 1e-12 {
        return Mat3::identity() + k;
    }
    let a = sin(theta) / theta;
    let b = (1.0 - cos(theta)) / (theta * theta);
    Mat3::identity() + k * a + k * k * b
}

/// Mirror left-right: column `u` takes column `W − 1 − u` (longitude negated).
pub fn flip_panorama(image: &Panorama) -> Panorama {
    let (w, h) = (image.width, image.height);
    let rgb = (0..w * h).map(|i| image.rgb[(i / w) * w + (w - 1 - i % w)]).collect();
    let capture = image.capture.map(|c| c.then_linear(&Mat3::from_diagonal(&Vec3::new(1.0, -1.0, 1.0))));
    Panorama { width: w, height: h, rgb, capture }
}

pub fn flip_depth(depth: &DepthMap) -> DepthMap {
    let (w, h) = (depth.width, depth.height);
    let vals = (0..w * h).map(|i| depth.depth[(i / w) * w + (w - 1 - i % w)]).collect();
    DepthMap::from_raw(w, h, vals)
}

/// Yaw rotation by a whole number of columns: column `u` takes column
/// `u + shift` (longitude increased by `2π·shift/W`).
pub fn roll_panorama(image: &Panorama, shift: i64) -> Panorama {
    let (w, h) = (image.width, image.height);
    let rgb = (0..w * h)
        .map(|i| image.rgb[(i / w) * w + ((i % w) as i64 + shift).rem_euclid(w as i64) as usize])
        .collect();
    let theta = 2.0 * PI * shift as f64 / w as f64;
    let capture = image.capture.map(|c| c.then_linear(&rot_z(theta)));
    Panorama { width: w, height: h, rgb, capture }
}

pub fn roll_depth(depth: &DepthMap, shift: i64) -> DepthMap {
    let (w, h) = (depth.width, depth.height);
    let vals = (0..w * h)
        .map(|i| depth.depth[(i / w) * w + ((i % w) as i64 + shift).rem_euclid(w as i64) as usize])
        .collect();
    DepthMap::from_raw(w, h, vals)
}

/// Mean squared difference over mutually valid pixels.
pub fn depth_mse(a: &DepthMap, b: &DepthMap) -> Result<f64> {
    a.same_dims(b.width, b.height)?;
    let mut s = 0.0;
    let mut n = 0usize;
    for i in 0..a.depth.len() {
        if a.valid[i] && b.valid[i] {
            let d = a.depth[i] - b.depth[i];
            s += d * d;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::NoValidPixels);
    }
    Ok(s / n as f64)
}
