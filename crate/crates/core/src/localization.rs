//! Map-free localization against a single reference panorama.
//!
//! The reference depth is lifted to a cloud, a pool of synthetic views is
//! rendered by warping the reference image, and queries are registered by
//! descriptor retrieval, local matching and bearing-vector PnP-RANSAC. The
//! estimated pose places the query camera in the reference camera frame.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use libm::{atan2, floor, log, sqrt};
use nalgebra::{Matrix6, Vector6};
use rand::seq::index;
use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::geometry::{backproject, exp_so3, pixel_to_dir, roll_panorama, rot_z, rotation_angle, DepthMap, Mat3, Panorama, PointCloud, Pose, SphereDir, Vec3};
use crate::predictor::DepthPredictor;
use crate::rng;
use crate::scene::Scene;
use crate::synthesis::{warp_panorama_with, SynthView, WarpConfig};

pub const GLOBAL_ROWS: usize = 8;
pub const GLOBAL_COLS: usize = 16;
pub const ORIENTATION_BINS: usize = 4;
pub const GLOBAL_DIM: usize = GLOBAL_ROWS * GLOBAL_COLS * ORIENTATION_BINS;
/// Side of the square patch the binary descriptor samples from.
pub const PATCH: usize = 31;
const HALF: i64 = (PATCH / 2) as i64;
const BRIEF_SEED: u64 = 0x0b51_ef00;
pub const MAX_FEATURES: usize = 500;

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub min: Vec3,
    pub max: Vec3,
}

impl Bounds {
    pub fn of_points(points: &[Vec3]) -> Option<Bounds> {
        let first = points.first()?;
        let (mut min, mut max) = (*first, *first);
        for p in points {
            min = min.inf(p);
            max = max.sup(p);
        }
        Some(Bounds { min, max })
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    /// Each side pulled in by `fraction` of the extent.
    pub fn shrunk(&self, fraction: f64) -> Bounds {
        let e = (self.max - self.min) * fraction;
        Bounds { min: self.min + e, max: self.max - e }
    }
}

/// Unit-norm global descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalDesc {
    pub vector: Vec<f64>,
}

impl GlobalDesc {
    pub fn distance(&self, other: &GlobalDesc) -> f64 {
        sqrt(self.vector.iter().zip(&other.vector).map(|(a, b)| (a - b) * (a - b)).sum())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalFeature {
    /// Subpixel corner location.
    pub pixel: (f64, f64),
    pub bearing: SphereDir,
    pub descriptor: [u64; 4],
    pub response: f64,
    /// Reference-frame point behind the feature, for pool views.
    pub point3d: Option<Vec3>,
}

pub fn hamming(a: &[u64; 4], b: &[u64; 4]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

/// Swappable descriptor backend.
pub trait FeatureExtractor {
    fn extract(&self, image: &Panorama) -> (GlobalDesc, Vec<LocalFeature>);

    fn global(&self, image: &Panorama) -> GlobalDesc {
        self.extract(image).0
    }

    /// True when rolling the image by whole columns shifts the local
    /// features by the same columns and leaves descriptors unchanged.
    fn roll_equivariant(&self) -> bool {
        false
    }
}

/// Gradient-orientation grid for retrieval; Harris corners with binary
/// intensity-comparison descriptors for matching.
#[derive(Debug, Clone)]
pub struct ClassicalExtractor {
    pub max_features: usize,
    pub harris_k: f64,
    /// Corners below this fraction of the strongest response are dropped.
    pub relative_threshold: f64,
    pairs: Vec<[(i64, i64); 2]>,
}

impl Default for ClassicalExtractor {
    fn default() -> Self {
        ClassicalExtractor::new(MAX_FEATURES)
    }
}

impl ClassicalExtractor {
    pub fn new(max_features: usize) -> Self {
        let mut r = rng::from_seed(BRIEF_SEED);
        let sigma = PATCH as f64 / 5.0;
        let mut offset = || -> (i64, i64) {
            let mut one = || {
                let g: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut r);
                (libm::round(g * sigma) as i64).clamp(-HALF, HALF)
            };
            (one(), one())
        };
        let pairs = (0..256).map(|_| [offset(), offset()]).collect();
        ClassicalExtractor { max_features, harris_k: 0.04, relative_threshold: 0.01, pairs }
    }
}

struct Gray<'a> {
    w: usize,
    h: usize,
    px: &'a [f64],
}

impl Gray<'_> {
    fn at(&self, u: i64, v: i64) -> f64 {
        let u = u.rem_euclid(self.w as i64) as usize;
        let v = v.clamp(0, self.h as i64 - 1) as usize;
        self.px[v * self.w + u]
    }
}

fn gaussian_blur(px: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    let r = libm::ceil(3.0 * sigma) as usize;
    let raw: Vec<f64> = (0..=2 * r).map(|k| {
        let d = k as f64 - r as f64;
        libm::exp(-(d * d) / (2.0 * sigma * sigma))
    }).collect();
    let norm: f64 = raw.iter().sum();
    let kernel: Vec<f64> = raw.iter().map(|k| k / norm).collect();
    let mut tmp = vec![0.0; w * h];
    let mut padded = vec![0.0; w + 2 * r];
    for v in 0..h {
        let row = &px[v * w..(v + 1) * w];
        for (k, p) in padded.iter_mut().enumerate() {
            *p = row[(k + w * (r / w + 1) - r) % w];
        }
        for u in 0..w {
            tmp[v * w + u] = padded[u..u + 2 * r + 1].iter().zip(&kernel).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; w * h];
    for v in 0..h {
        let dst = &mut out[v * w..(v + 1) * w];
        for (k, kv) in kernel.iter().enumerate() {
            let sv = (v + k).saturating_sub(r).min(h - 1);
            let src = &tmp[sv * w..(sv + 1) * w];
            for (o, x) in dst.iter_mut().zip(src) {
                *o += kv * x;
            }
        }
    }
    out
}

/// Central-difference gradients; columns wrap, rows clamp.
fn gradients(g: &Gray) -> (Vec<f64>, Vec<f64>) {
    let (w, h) = (g.w, g.h);
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    for v in 0..h as i64 {
        for u in 0..w as i64 {
            let i = v as usize * w + u as usize;
            gx[i] = 0.5 * (g.at(u + 1, v) - g.at(u - 1, v));
            gy[i] = 0.5 * (g.at(u, v + 1) - g.at(u, v - 1));
        }
    }
    (gx, gy)
}

fn luma(image: &Panorama) -> Vec<f64> {
    image.luma().into_iter().map(f64::from).collect()
}

/// 8×16 grid of magnitude-weighted, unsigned 4-bin orientation histograms,
/// L2-normalized. A gradient-free image maps to the uniform unit vector.
pub fn global_descriptor(image: &Panorama) -> GlobalDesc {
    let (w, h) = (image.width(), image.height());
    let px = luma(image);
    let (gx, gy) = gradients(&Gray { w, h, px: &px });
    let mut hist = vec![0.0; GLOBAL_DIM];
    for v in 0..h {
        let row = v * GLOBAL_ROWS / h;
        for u in 0..w {
            let i = v * w + u;
            let m = sqrt(gx[i] * gx[i] + gy[i] * gy[i]);
            if m == 0.0 {
                continue;
            }
            let mut theta = atan2(gy[i], gx[i]);
            if theta < 0.0 {
                theta += PI;
            }
            let bin = ((theta / PI * ORIENTATION_BINS as f64) as usize).min(ORIENTATION_BINS - 1);
            let col = u * GLOBAL_COLS / w;
            hist[(row * GLOBAL_COLS + col) * ORIENTATION_BINS + bin] += m;
        }
    }
    let n = sqrt(hist.iter().map(|x| x * x).sum());
    if n > 0.0 {
        hist.iter_mut().for_each(|x| *x /= n);
    } else {
        hist.iter_mut().for_each(|x| *x = 1.0 / sqrt(GLOBAL_DIM as f64));
    }
    GlobalDesc { vector: hist }
}

/// Harris response map (structure tensor smoothed with σ = 1.5).
fn harris_response(g: &Gray, k: f64) -> Vec<f64> {
    let (w, h) = (g.w, g.h);
    let (gx, gy) = gradients(g);
    let xx: Vec<f64> = gx.iter().map(|x| x * x).collect();
    let yy: Vec<f64> = gy.iter().map(|y| y * y).collect();
    let xy: Vec<f64> = gx.iter().zip(&gy).map(|(x, y)| x * y).collect();
    let (a, b, c) = (gaussian_blur(&xx, w, h, 1.5), gaussian_blur(&yy, w, h, 1.5), gaussian_blur(&xy, w, h, 1.5));
    (0..w * h).map(|i| a[i] * b[i] - c[i] * c[i] - k * (a[i] + b[i]) * (a[i] + b[i])).collect()
}

fn parabola_offset(l: f64, c: f64, r: f64) -> f64 {
    let den = l - 2.0 * c + r;
    if den < 0.0 {
        (0.5 * (l - r) / den).clamp(-0.5, 0.5)
    } else {
        0.0
    }
}

impl ClassicalExtractor {
    /// Corners with descriptors, strongest first. Rows within half a patch
    /// of either pole are skipped.
    pub fn local_features(&self, image: &Panorama) -> Vec<LocalFeature> {
        let (w, h) = (image.width(), image.height());
        if h as i64 <= 2 * (HALF + 1) {
            return Vec::new();
        }
        let px = luma(image);
        let gray = Gray { w, h, px: &px };
        let resp = harris_response(&gray, self.harris_k);
        let r = Gray { w, h, px: &resp };
        let peak = resp.iter().cloned().fold(0.0, f64::max);
        if !(peak > 1e-12) {
            return Vec::new();
        }
        let floor_r = peak * self.relative_threshold;
        let mut corners: Vec<(f64, usize)> = Vec::new();
        for v in (HALF + 1)..(h as i64 - HALF - 1) {
            for u in 0..w as i64 {
                let c = r.at(u, v);
                if c <= floor_r {
                    continue;
                }
                let is_max = (-2..=2i64).all(|dv| {
                    (-2..=2i64).all(|du| {
                        let o = r.at(u + du, v + dv);
                        (du, dv) == (0, 0) || o < c || (o == c && (dv, du) > (0, 0))
                    })
                });
                if is_max {
                    corners.push((c, v as usize * w + u as usize));
                }
            }
        }
        corners.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        corners.truncate(self.max_features);

        let smooth = gaussian_blur(&px, w, h, 2.0);
        let s = Gray { w, h, px: &smooth };
        corners
            .into_iter()
            .map(|(c, i)| {
                let (u, v) = ((i % w) as i64, (i / w) as i64);
                let du = parabola_offset(r.at(u - 1, v), c, r.at(u + 1, v));
                let dv = parabola_offset(r.at(u, v - 1), c, r.at(u, v + 1));
                let fu = (u as f64 + du).rem_euclid(w as f64);
                let fu = if fu >= w as f64 { 0.0 } else { fu };
                let fv = v as f64 + dv;
                let mut descriptor = [0u64; 4];
                for (bit, [p, q]) in self.pairs.iter().enumerate() {
                    if s.at(u + p.0, v + p.1) < s.at(u + q.0, v + q.1) {
                        descriptor[bit / 64] |= 1 << (bit % 64);
                    }
                }
                LocalFeature {
                    pixel: (fu, fv),
                    bearing: pixel_to_dir(fu, fv, w, h).expect("corner lies inside the image"),
                    descriptor,
                    response: c,
                    point3d: None,
                }
            })
            .collect()
    }
}

impl FeatureExtractor for ClassicalExtractor {
    fn extract(&self, image: &Panorama) -> (GlobalDesc, Vec<LocalFeature>) {
        (global_descriptor(image), self.local_features(image))
    }

    fn global(&self, image: &Panorama) -> GlobalDesc {
        global_descriptor(image)
    }

    fn roll_equivariant(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacConfig {
    pub max_iterations: usize,
    /// Angular inlier threshold in radians.
    pub threshold: f64,
    pub min_inliers: usize,
    /// Target probability of drawing one all-inlier sample.
    pub confidence: f64,
    pub refine_iterations: usize,
}

impl Default for RansacConfig {
    fn default() -> Self {
        RansacConfig {
            max_iterations: 1000,
            threshold: 1f64.to_radians(),
            min_inliers: 6,
            confidence: 0.9999,
            refine_iterations: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizeConfig {
    pub n_t: usize,
    pub n_r: usize,
    pub top_k: usize,
    pub ratio: f64,
    pub ransac: RansacConfig,
    /// `(t_max m, r_max deg)` accuracy gates.
    pub thresholds: Vec<(f64, f64)>,
    /// Pool-view synthesis settings.
    pub warp: WarpConfig,
    /// Keep rendered pool views in the map (memory heavy).
    pub keep_views: bool,
}

impl Default for LocalizeConfig {
    fn default() -> Self {
        LocalizeConfig {
            n_t: 100,
            n_r: 8,
            top_k: 5,
            ratio: 0.85,
            ransac: RansacConfig::default(),
            thresholds: vec![(0.3, 5.0)],
            warp: WarpConfig { fill_radius: 2, supersample: 3 },
            keep_views: false,
        }
    }
}

impl LocalizeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_t == 0 || self.n_r == 0 || self.top_k == 0 {
            return Err(invalid("n_t, n_r and top_k must be at least 1"));
        }
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(invalid("ratio must lie in (0, 1]"));
        }
        if !(self.ransac.threshold > 0.0) || self.ransac.min_inliers < 3 {
            return Err(invalid("ransac needs a positive threshold and at least 3 inliers"));
        }
        Ok(())
    }
}

/// `n_t` translations uniform in `bbox` shrunk by 10% per side, each paired
/// with yaws `2πj/n_r`. Translation-major order.
pub fn sample_poses(bbox: &Bounds, n_t: usize, n_r: usize, seed: u64) -> Result<Vec<Pose>> {
    if !(0..3).all(|a| bbox.max[a] > bbox.min[a]) {
        return Err(invalid("bounding box is degenerate"));
    }
    let inner = bbox.shrunk(0.1);
    let mut r = rng::stream(seed, "pose-pool");
    let mut out = Vec::with_capacity(n_t * n_r);
    for _ in 0..n_t {
        let t = Vec3::from_fn(|a, _| r.random_range(inner.min[a]..=inner.max[a]));
        for j in 0..n_r {
            out.push(Pose::yaw(2.0 * PI * j as f64 / n_r as f64, t));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolView {
    pub pose: Pose,
    pub view: Option<SynthView>,
    pub global: GlobalDesc,
    pub features: Vec<LocalFeature>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceMap {
    pub cloud: PointCloud,
    pub views: Vec<PoolView>,
    pub bbox: Bounds,
}

/// Warps the reference into one pool view. Features whose descriptor patch
/// touches an empty pixel are dropped; the rest carry the reference-frame
/// point along their bearing at the splatted depth.
pub fn pool_view(
    image: &Panorama,
    depth: &DepthMap,
    pose: &Pose,
    extractor: &dyn FeatureExtractor,
    warp: &WarpConfig,
    keep_view: bool,
) -> Result<PoolView> {
    Ok(pool_view_filled(image, depth, pose, extractor, warp, keep_view)?.0)
}

fn pool_view_filled(
    image: &Panorama,
    depth: &DepthMap,
    pose: &Pose,
    extractor: &dyn FeatureExtractor,
    warp: &WarpConfig,
    keep_view: bool,
) -> Result<(PoolView, Panorama)> {
    let view = warp_panorama_with(image, depth, pose, warp)?;
    let filled = fill_rows(&view.image, &view.mask);
    let (global, features) = extractor.extract(&filled);
    let (w, h) = (image.width() as i64, image.height() as i64);
    let valid = |u: i64, v: i64| v >= 0 && v < h && view.mask[(v * w + u.rem_euclid(w)) as usize];
    let budget = (PATCH * PATCH) / 20;
    let features = features
        .into_iter()
        .filter_map(|mut f| {
            let u = floor(f.pixel.0 + 0.5) as i64;
            let v = floor(f.pixel.1 + 0.5) as i64;
            let holes = (-HALF..=HALF).flat_map(|dv| (-HALF..=HALF).map(move |du| (du, dv))).filter(|&(du, dv)| !valid(u + du, v + dv)).count();
            if holes > budget {
                return None;
            }
            let d = view.depth.get(u.rem_euclid(w) as usize, v as usize)?;
            f.point3d = Some(pose.to_parent(&(f.bearing.vector() * d)));
            Some(f)
        })
        .collect();
    Ok((PoolView { pose: *pose, view: keep_view.then_some(view), global, features }, filled))
}

/// Pool view at `base` turned by a further yaw of `shift` columns, derived
/// from the unturned view: pixels move left by `shift`, bearings rotate,
/// descriptors and 3D points are unchanged.
fn yawed_view(base: &PoolView, filled: &Panorama, shift: usize, extractor: &dyn FeatureExtractor) -> PoolView {
    let w = filled.width();
    let theta = 2.0 * PI * shift as f64 / w as f64;
    let rot = rot_z(theta);
    let features = base
        .features
        .iter()
        .map(|f| {
            let u = (f.pixel.0 - shift as f64).rem_euclid(w as f64);
            LocalFeature {
                pixel: (if u >= w as f64 { 0.0 } else { u }, f.pixel.1),
                bearing: SphereDir::new(rot.tr_mul(&f.bearing.vector())).expect("rotation keeps unit norm"),
                ..f.clone()
            }
        })
        .collect();
    PoolView {
        pose: Pose { rotation: base.pose.rotation * rot, translation: base.pose.translation },
        view: None,
        global: extractor.global(&roll_panorama(filled, shift as i64)),
        features,
    }
}

/// Empty pixels take the color of the nearest valid pixel in their row, so
/// hole borders do not read as texture.
fn fill_rows(image: &Panorama, mask: &[bool]) -> Panorama {
    let (w, h) = (image.width(), image.height());
    let mut rgb = image.pixels().to_vec();
    for v in 0..h {
        let row = &mask[v * w..(v + 1) * w];
        if row.iter().all(|m| !m) {
            continue;
        }
        for u in 0..w {
            if row[u] {
                continue;
            }
            let near = (1..=w / 2)
                .find_map(|d| [(u + w - d) % w, (u + d) % w].into_iter().find(|&k| row[k]))
                .expect("row has a valid pixel");
            rgb[v * w + u] = image.pixels()[v * w + near];
        }
    }
    Panorama::from_clamped(w, h, rgb).with_capture(image.capture().copied())
}

pub fn build_reference_map<P: DepthPredictor + ?Sized>(
    image: &Panorama,
    predictor: &P,
    cfg: &LocalizeConfig,
    seed: u64,
) -> Result<ReferenceMap> {
    build_reference_map_with(image, predictor, &ClassicalExtractor::default(), cfg, seed)
}

pub fn build_reference_map_with<P: DepthPredictor + ?Sized>(
    image: &Panorama,
    predictor: &P,
    extractor: &dyn FeatureExtractor,
    cfg: &LocalizeConfig,
    seed: u64,
) -> Result<ReferenceMap> {
    cfg.validate()?;
    let depth = predictor.predict(image)?;
    depth.same_dims(image.width(), image.height())?;
    let cloud = backproject(&depth)?;
    let bbox = Bounds::of_points(&cloud.points).ok_or(Error::EmptyCloud)?;
    let poses = sample_poses(&bbox, cfg.n_t, cfg.n_r, seed)?;
    let w = image.width();
    let share = extractor.roll_equivariant() && !cfg.keep_views && (w % cfg.n_r == 0);
    let mut views = Vec::with_capacity(poses.len());
    for group in poses.chunks(cfg.n_r) {
        if !share {
            for p in group {
                views.push(pool_view(image, &depth, p, extractor, &cfg.warp, cfg.keep_views)?);
            }
            continue;
        }
        // Yaw 2πj/n_r about the camera is an exact roll of j·W/n_r columns.
        let (base, filled) = pool_view_filled(image, &depth, &group[0], extractor, &cfg.warp, false)?;
        for j in 1..group.len() {
            views.push(yawed_view(&base, &filled, j * w / cfg.n_r, extractor));
        }
        views.insert(views.len() + 1 - group.len(), base);
    }
    Ok(ReferenceMap { cloud, views, bbox })
}

/// Mutual nearest neighbours by Hamming distance that also pass the ratio
/// test in the query-to-reference direction. Returns `(query, reference)`
/// index pairs in query order.
pub fn match_features(query: &[LocalFeature], reference: &[LocalFeature], ratio: f64) -> Vec<(usize, usize)> {
    if query.is_empty() || reference.is_empty() {
        return Vec::new();
    }
    let mut back = vec![(u32::MAX, usize::MAX); reference.len()];
    let mut forward = Vec::with_capacity(query.len());
    for (qi, q) in query.iter().enumerate() {
        let (mut best, mut second, mut arg) = (u32::MAX, u32::MAX, usize::MAX);
        for (ri, r) in reference.iter().enumerate() {
            let d = hamming(&q.descriptor, &r.descriptor);
            if d < best {
                second = best;
                best = d;
                arg = ri;
            } else if d < second {
                second = d;
            }
            if d < back[ri].0 {
                back[ri] = (d, qi);
            }
        }
        forward.push((arg, best, second));
    }
    forward
        .into_iter()
        .enumerate()
        .filter(|&(qi, (ri, best, second))| {
            back[ri].1 == qi && (second == u32::MAX || f64::from(best) < ratio * f64::from(second))
        })
        .map(|(qi, (ri, _, _))| (qi, ri))
        .collect()
}

/// Camera poses (camera-to-world) consistent with three bearings `f` and
/// world points `x`.
///
/// Depths are parametrized by `λ1`: the two side lengths through point 1 fix
/// `λ2`, `λ3` up to a sign branch each, and the remaining side gives a scalar
/// residual whose roots are bracketed on a grid and bisected. Each root is
/// turned into a pose by absolute orientation.
pub fn p3p(f: &[Vec3; 3], x: &[Vec3; 3]) -> Vec<Pose> {
    let f = f.map(|v| v.normalize());
    let d2 = |a: usize, b: usize| (x[a] - x[b]).norm_squared();
    let (d12, d13, d23) = (d2(0, 1), d2(0, 2), d2(1, 2));
    let (c12, c13) = (f[0].dot(&f[1]), f[0].dot(&f[2]));
    let (s12, s13) = (1.0 - c12 * c12, 1.0 - c13 * c13);
    if !(s12 > 1e-12 && s13 > 1e-12 && d12 > 1e-18 && d13 > 1e-18) {
        return Vec::new();
    }
    let l_max = sqrt(d12 / s12).min(sqrt(d13 / s13));
    let mut poses = Vec::new();
    for s2 in [1.0, -1.0] {
        for s3 in [1.0, -1.0] {
            let depths = |l1: f64| -> Option<(f64, f64, f64)> {
                let l2 = l1 * c12 + s2 * sqrt((d12 - l1 * l1 * s12).max(0.0));
                let l3 = l1 * c13 + s3 * sqrt((d13 - l1 * l1 * s13).max(0.0));
                (l2 > 0.0 && l3 > 0.0).then_some((l2, l3, (f[1] * l2 - f[2] * l3).norm_squared() - d23))
            };
            const N: usize = 400;
            let at = |k: usize| l_max * k as f64 / N as f64;
            let mut prev: Option<(f64, f64)> = None;
            for k in 1..=N {
                let l1 = at(k);
                let cur = depths(l1).map(|(_, _, g)| (l1, g));
                if let (Some((la, ga)), Some((lb, gb))) = (prev, cur) {
                    if ga == 0.0 || ga.signum() != gb.signum() {
                        let (mut lo, mut hi, mut glo) = (la, lb, ga);
                        for _ in 0..80 {
                            let mid = 0.5 * (lo + hi);
                            let Some((_, _, gm)) = depths(mid) else { break };
                            if gm.signum() == glo.signum() {
                                lo = mid;
                                glo = gm;
                            } else {
                                hi = mid;
                            }
                        }
                        let l1 = 0.5 * (lo + hi);
                        if let Some((l2, l3, _)) = depths(l1) {
                            if let Some(p) = absolute_orientation(&[f[0] * l1, f[1] * l2, f[2] * l3], x) {
                                poses.push(p);
                            }
                        }
                    }
                }
                prev = cur;
            }
        }
    }
    poses
}

/// Rigid `(R, t)` minimizing `Σ |R a_i + t − b_i|²` (Kabsch).
pub fn absolute_orientation(a: &[Vec3], b: &[Vec3]) -> Option<Pose> {
    if a.len() != b.len() || a.len() < 3 {
        return None;
    }
    let n = a.len() as f64;
    let ca = a.iter().sum::<Vec3>() / n;
    let cb = b.iter().sum::<Vec3>() / n;
    let mut hm = Mat3::zeros();
    for (p, q) in a.iter().zip(b) {
        hm += (p - ca) * (q - cb).transpose();
    }
    let svd = hm.svd(true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    let v = vt.transpose();
    let d = (v * u.transpose()).determinant();
    let r = v * Mat3::from_diagonal(&Vec3::new(1.0, 1.0, if d < 0.0 { -1.0 } else { 1.0 })) * u.transpose();
    if !r.iter().all(|x| x.is_finite()) {
        return None;
    }
    Some(Pose { rotation: r, translation: cb - r * ca })
}

/// Angle between bearing `f` and the direction to `x` seen from `pose`.
pub fn angular_error(pose: &Pose, f: &Vec3, x: &Vec3) -> f64 {
    let p = pose.to_child(x);
    atan2(p.cross(f).norm(), p.dot(f))
}

fn residuals(pose: &Pose, f: &[Vec3], x: &[Vec3], out: &mut Vec<f64>) {
    out.clear();
    for (fi, xi) in f.iter().zip(x) {
        let p = pose.to_child(xi);
        let n = p.norm();
        let d = if n > 0.0 { p / n - fi } else { -fi };
        out.extend_from_slice(d.as_slice());
    }
}

/// Gauss-Newton on unit-bearing differences (numerical Jacobian) over a
/// right-multiplied rotation update and a world translation update.
pub fn refine_pose(pose: &Pose, f: &[Vec3], x: &[Vec3], iterations: usize) -> Pose {
    let perturb = |p: &Pose, d: &Vector6<f64>| Pose {
        rotation: p.rotation * exp_so3(&Vec3::new(d[0], d[1], d[2])),
        translation: p.translation + Vec3::new(d[3], d[4], d[5]),
    };
    let cost = |p: &Pose, buf: &mut Vec<f64>| {
        residuals(p, f, x, buf);
        buf.iter().map(|r| r * r).sum::<f64>()
    };
    let mut cur = *pose;
    let (mut r0, mut r1) = (Vec::new(), Vec::new());
    let mut c0 = cost(&cur, &mut r0);
    let h = 1e-7;
    for _ in 0..iterations {
        residuals(&cur, f, x, &mut r0);
        let m = r0.len();
        let mut jac = vec![[0.0; 6]; m];
        for k in 0..6 {
            let mut d = Vector6::zeros();
            d[k] = h;
            residuals(&perturb(&cur, &d), f, x, &mut r1);
            for i in 0..m {
                jac[i][k] = (r1[i] - r0[i]) / h;
            }
        }
        let mut jtj = Matrix6::<f64>::zeros();
        let mut jtr = Vector6::<f64>::zeros();
        for i in 0..m {
            for a in 0..6 {
                jtr[a] += jac[i][a] * r0[i];
                for b in 0..6 {
                    jtj[(a, b)] += jac[i][a] * jac[i][b];
                }
            }
        }
        let Some(step) = jtj.lu().solve(&(-jtr)) else { break };
        let next = perturb(&cur, &step);
        let c1 = cost(&next, &mut r1);
        if !(c1 < c0) {
            break;
        }
        let done = c0 - c1 <= 1e-14 * c0.max(1e-300);
        cur = next;
        c0 = c1;
        if done {
            break;
        }
    }
    cur
}

#[derive(Debug, Clone, PartialEq)]
pub struct PnpSolution {
    pub pose: Pose,
    pub inliers: Vec<usize>,
}

/// RANSAC over minimal three-point solves with an angular inlier test,
/// followed by refinement on the inlier set.
pub fn pnp_ransac<R: Rng + ?Sized>(f: &[Vec3], x: &[Vec3], cfg: &RansacConfig, rng: &mut R) -> Option<PnpSolution> {
    let n = f.len().min(x.len());
    if n < 3 {
        return None;
    }
    let inliers_of = |p: &Pose| -> (Vec<usize>, f64) {
        let mut idx = Vec::new();
        let mut err = 0.0;
        for i in 0..n {
            let e = angular_error(p, &f[i], &x[i]);
            if e <= cfg.threshold {
                idx.push(i);
                err += e;
            }
        }
        (idx, err)
    };
    let mut best: Option<(Pose, Vec<usize>, f64)> = None;
    let mut budget = cfg.max_iterations;
    let mut it = 0;
    while it < budget {
        it += 1;
        let s = index::sample(rng, n, 3);
        let (a, b, c) = (s.index(0), s.index(1), s.index(2));
        if (x[b] - x[a]).cross(&(x[c] - x[a])).norm() < 1e-9 {
            continue;
        }
        for p in p3p(&[f[a], f[b], f[c]], &[x[a], x[b], x[c]]) {
            let (idx, err) = inliers_of(&p);
            let better = match &best {
                None => true,
                Some((_, bi, be)) => idx.len() > bi.len() || (idx.len() == bi.len() && err < *be),
            };
            if better {
                let w = idx.len() as f64 / n as f64;
                let miss = 1.0 - w * w * w;
                if miss <= 0.0 {
                    budget = it;
                } else if miss < 1.0 {
                    let need = log(1.0 - cfg.confidence) / log(miss);
                    if need.is_finite() && need >= 0.0 {
                        budget = budget.min(need as usize + 1);
                    }
                }
                best = Some((p, idx, err));
            }
        }
    }
    let (mut pose, mut idx, _) = best?;
    if idx.len() < cfg.min_inliers {
        return None;
    }
    for _ in 0..3 {
        let fi: Vec<Vec3> = idx.iter().map(|&i| f[i]).collect();
        let xi: Vec<Vec3> = idx.iter().map(|&i| x[i]).collect();
        pose = refine_pose(&pose, &fi, &xi, cfg.refine_iterations);
        let (next, _) = inliers_of(&pose);
        if next == idx || next.len() < cfg.min_inliers {
            break;
        }
        idx = next;
    }
    Some(PnpSolution { pose, inliers: idx })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum LocalizeStatus {
    Success,
    /// Fewer than three matches with a known 3D point.
    NoMatches,
    /// No pose reached the minimum inlier count.
    RansacDegenerate,
}

impl LocalizeStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            LocalizeStatus::Success => "success",
            LocalizeStatus::NoMatches => "no_matches",
            LocalizeStatus::RansacDegenerate => "ransac_degenerate",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizeResult {
    /// Query camera in the reference frame. On failure, the pose of the best
    /// retrieved pool view.
    pub pose: Pose,
    pub inliers: usize,
    pub matches: usize,
    pub status: LocalizeStatus,
    /// Pool index of the view used for matching.
    pub view: usize,
}

pub fn localize_query<R: Rng + ?Sized>(query: &Panorama, map: &ReferenceMap, cfg: &LocalizeConfig, rng: &mut R) -> Result<LocalizeResult> {
    localize_query_with(query, map, &ClassicalExtractor::default(), cfg, rng)
}

pub fn localize_query_with<R: Rng + ?Sized>(
    query: &Panorama,
    map: &ReferenceMap,
    extractor: &dyn FeatureExtractor,
    cfg: &LocalizeConfig,
    rng: &mut R,
) -> Result<LocalizeResult> {
    cfg.validate()?;
    if map.views.is_empty() {
        return Err(invalid("reference map has no views"));
    }
    let (global, features) = extractor.extract(query);
    let ranked = rank_views(&global, map);
    let mut best: Option<(usize, Vec<(usize, usize)>)> = None;
    for &vi in ranked.iter().take(cfg.top_k) {
        let refs = &map.views[vi].features;
        let m: Vec<(usize, usize)> = match_features(&features, refs, cfg.ratio)
            .into_iter()
            .filter(|&(_, r)| refs[r].point3d.is_some())
            .collect();
        if best.as_ref().is_none_or(|(_, b)| m.len() > b.len()) {
            best = Some((vi, m));
        }
    }
    let (view, matches) = best.expect("top_k ≥ 1 and the map is nonempty");
    let fallback = |status, inliers| LocalizeResult { pose: map.views[view].pose, inliers, matches: matches.len(), status, view };
    if matches.len() < 3 {
        return Ok(fallback(LocalizeStatus::NoMatches, 0));
    }
    let refs = &map.views[view].features;
    let f: Vec<Vec3> = matches.iter().map(|&(q, _)| features[q].bearing.vector()).collect();
    let x: Vec<Vec3> = matches.iter().map(|&(_, r)| refs[r].point3d.expect("filtered")).collect();
    match pnp_ransac(&f, &x, &cfg.ransac, rng) {
        Some(sol) => Ok(LocalizeResult { pose: sol.pose, inliers: sol.inliers.len(), matches: matches.len(), status: LocalizeStatus::Success, view }),
        None => Ok(fallback(LocalizeStatus::RansacDegenerate, 0)),
    }
}

/// Pool indices by increasing global-descriptor distance, ties by index.
pub fn rank_views(global: &GlobalDesc, map: &ReferenceMap) -> Vec<usize> {
    let mut d: Vec<(f64, usize)> = map.views.iter().enumerate().map(|(i, v)| (global.distance(&v.global), i)).collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    d.into_iter().map(|(_, i)| i).collect()
}

/// `(‖t_est − t_gt‖, angle of R_estᵀ R_gt in degrees)`.
pub fn pose_error(est: &Pose, gt: &Pose) -> (f64, f64) {
    let t = (est.translation - gt.translation).norm();
    let r = rotation_angle(&(est.rotation.transpose() * gt.rotation)).to_degrees();
    (t, r)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationSummary {
    pub median_t: f64,
    pub median_r: f64,
    /// `((t_max, r_max), fraction)` per gate.
    pub accuracy: Vec<((f64, f64), f64)>,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

pub fn summarize(errors: &[(f64, f64)], thresholds: &[(f64, f64)]) -> Option<LocalizationSummary> {
    let ts: Vec<f64> = errors.iter().map(|e| e.0).collect();
    let rs: Vec<f64> = errors.iter().map(|e| e.1).collect();
    let n = errors.len() as f64;
    Some(LocalizationSummary {
        median_t: median(&ts)?,
        median_r: median(&rs)?,
        accuracy: thresholds
            .iter()
            .map(|&(t, r)| ((t, r), errors.iter().filter(|e| e.0 <= t && e.1 <= r).count() as f64 / n))
            .collect(),
    })
}

/// World poses for `n` queries within `max_distance` of the reference
/// position in the floor plane, at the reference height, with uniform yaw
/// and at least `clearance` from any surface.
pub fn sample_query_poses(scene: &Scene, reference: &Pose, n: usize, max_distance: f64, clearance: f64, seed: u64) -> Result<Vec<Pose>> {
    if !(max_distance > 0.0) {
        return Err(invalid("max_distance must be positive"));
    }
    let mut r = rng::stream(seed, "queries");
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while out.len() < n {
        attempts += 1;
        if attempts > 1000 * n.max(1) {
            return Err(Error::UnsatisfiablePlacement { attempts });
        }
        let rad = max_distance * sqrt(r.random::<f64>());
        let ang = r.random_range(-PI..PI);
        let t = reference.translation + Vec3::new(rad * libm::cos(ang), rad * libm::sin(ang), 0.0);
        if !scene.is_free(&t, clearance) {
            continue;
        }
        out.push(Pose::yaw(r.random_range(-PI..PI), t));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{rot_x, rot_y};
    use crate::predictor::MockPredictor;
    use crate::scene::{build_scene, render_panorama, SceneSpec};
    use proptest::prelude::*;
    use rand::Rng;

    fn scene() -> alloc::sync::Arc<Scene> {
        build_scene(&SceneSpec::mosaic_room(5.0, 4.0, 3.0), 0).unwrap()
    }

    fn quat_angle_deg(a: &Mat3, b: &Mat3) -> f64 {
        let q = |m: &Mat3| nalgebra::UnitQuaternion::from_matrix(m);
        let (qa, qb) = (q(a), q(b));
        let dot = qa.coords.dot(&qb.coords).abs().min(1.0);
        (2.0 * libm::acos(dot)).to_degrees()
    }

    fn random_pose(r: &mut rng::Rng) -> Pose {
        let rot = rot_z(r.random_range(-PI..PI)) * rot_y(r.random_range(-1.0..1.0)) * rot_x(r.random_range(-1.0..1.0));
        Pose { rotation: rot, translation: Vec3::new(r.random_range(-2.0..2.0), r.random_range(-2.0..2.0), r.random_range(-1.0..1.0)) }
    }

    #[test]
    fn pose_pool_size_and_yaws() {
        let b = Bounds { min: Vec3::new(-2.0, -1.0, -1.0), max: Vec3::new(2.0, 1.0, 1.5) };
        assert_eq!(sample_poses(&b, 100, 8, 0).unwrap().len(), 800);
        let single = sample_poses(&b, 20, 1, 0).unwrap();
        assert!(single.iter().all(|p| p.rotation == Mat3::identity()));
        let flat = Bounds { max: Vec3::new(2.0, -1.0, 1.5), ..b };
        assert!(sample_poses(&flat, 1, 1, 0).is_err());
    }

    #[test]
    fn pool_translations_stay_in_shrunk_box() {
        let b = Bounds { min: Vec3::new(-3.0, -1.0, -1.4), max: Vec3::new(2.0, 4.0, 1.6) };
        let inner = b.shrunk(0.1);
        let poses = sample_poses(&b, 10_000, 1, 5).unwrap();
        assert!(poses.iter().all(|p| inner.contains(&p.translation)));
        assert_eq!(poses, sample_poses(&b, 10_000, 1, 5).unwrap());
    }

    #[test]
    fn pose_error_basics() {
        let p = Pose::yaw(0.3, Vec3::new(1.0, 2.0, 0.5));
        assert_eq!(pose_error(&p, &p), (0.0, 0.0));
        let q = Pose::yaw(0.3 + 10f64.to_radians(), p.translation);
        let (t, r) = pose_error(&q, &p);
        assert_eq!(t, 0.0);
        assert!((r - 10.0).abs() < 1e-9);
    }

    #[test]
    fn pose_error_matches_quaternion_oracle() {
        let mut r = rng::from_seed(11);
        for _ in 0..200 {
            let (a, b) = (random_pose(&mut r), random_pose(&mut r));
            let (_, deg) = pose_error(&a, &b);
            assert!((deg - quat_angle_deg(&a.rotation, &b.rotation)).abs() < 1e-9);
        }
    }

    #[test]
    fn p3p_recovers_exact_pose() {
        let mut r = rng::from_seed(2);
        for _ in 0..50 {
            let truth = random_pose(&mut r);
            let x: [Vec3; 3] = core::array::from_fn(|_| {
                let dir = Vec3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0));
                truth.to_parent(&(dir.normalize() * r.random_range(1.0..5.0)))
            });
            let f = x.map(|p| truth.to_child(&p).normalize());
            let sols = p3p(&f, &x);
            let best = sols.iter().map(|s| pose_error(s, &truth)).fold((f64::INFINITY, f64::INFINITY), |a, b| if b.0 < a.0 { b } else { a });
            assert!(best.0 < 1e-6 && best.1 < 1e-6, "{best:?} from {} solutions", sols.len());
        }
    }

    #[test]
    fn ransac_exact_correspondences() {
        let mut r = rng::from_seed(4);
        for _ in 0..20 {
            let truth = random_pose(&mut r);
            let x: Vec<Vec3> = (0..8)
                .map(|_| truth.to_parent(&(Vec3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)).normalize() * r.random_range(1.0..6.0))))
                .collect();
            let f: Vec<Vec3> = x.iter().map(|p| truth.to_child(p).normalize()).collect();
            let sol = pnp_ransac(&f, &x, &RansacConfig::default(), &mut r).unwrap();
            let (t, deg) = pose_error(&sol.pose, &truth);
            assert!(t < 1e-6 && deg < 1e-6, "{t} {deg}");
            assert_eq!(sol.inliers.len(), 8);
        }
    }

    #[test]
    fn ransac_rejects_outliers() {
        let mut r = rng::from_seed(9);
        let truth = random_pose(&mut r);
        let mut x = Vec::new();
        let mut f = Vec::new();
        for i in 0..60 {
            let p = truth.to_parent(&(Vec3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)).normalize() * r.random_range(1.0..6.0)));
            let mut b = truth.to_child(&p).normalize();
            if i % 3 == 0 {
                b = Vec3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)).normalize();
            }
            x.push(p);
            f.push(b);
        }
        let sol = pnp_ransac(&f, &x, &RansacConfig::default(), &mut r).unwrap();
        let (t, deg) = pose_error(&sol.pose, &truth);
        assert!(t < 1e-6 && deg < 1e-6);
        assert!(sol.inliers.iter().all(|i| i % 3 != 0));
    }

    #[test]
    fn identical_images_identical_descriptors() {
        let s = scene();
        let (img, _) = render_panorama(&s, &Pose::from_translation(Vec3::new(0.3, 0.2, 1.4)), 256, 128).unwrap();
        let ex = ClassicalExtractor::default();
        let (g1, f1) = ex.extract(&img);
        let (g2, f2) = ex.extract(&img.clone());
        assert_eq!(g1.distance(&g2), 0.0);
        assert_eq!(f1, f2);
        assert!((g1.vector.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn yaw_roll_shifts_features() {
        let s = scene();
        let (img, _) = render_panorama(&s, &Pose::from_translation(Vec3::new(-0.4, 0.5, 1.3)), 256, 128).unwrap();
        let ex = ClassicalExtractor::default();
        let a = ex.local_features(&img);
        let c = 37;
        let b = ex.local_features(&roll_panorama(&img, c));
        assert!(a.len() > 50);
        let w = img.width() as f64;
        let shifted = a
            .iter()
            .filter(|fa| {
                b.iter().any(|fb| {
                    let du = (fb.pixel.0 - fa.pixel.0 + c as f64).rem_euclid(w);
                    du.min(w - du) <= 1.0 && (fb.pixel.1 - fa.pixel.1).abs() <= 1.0
                })
            })
            .count();
        assert!(shifted as f64 >= 0.9 * a.len() as f64, "{shifted}/{}", a.len());
    }

    #[test]
    fn featureless_query_reports_no_matches() {
        let s = scene();
        let (img, _) = render_panorama(&s, &Pose::from_translation(Vec3::new(0.0, 0.0, 1.4)), 128, 64).unwrap();
        let cfg = LocalizeConfig { n_t: 2, n_r: 2, ..LocalizeConfig::default() };
        let map = build_reference_map(&img, &MockPredictor::ground_truth(s), &cfg, 0).unwrap();
        assert_eq!(map.views.len(), 4);
        assert!(map.views.iter().all(|v| map.bbox.contains(&v.pose.translation)));
        let flat = Panorama::filled(128, 64, [0.5; 3]).unwrap();
        let res = localize_query(&flat, &map, &cfg, &mut rng::from_seed(0)).unwrap();
        assert_eq!(res.status, LocalizeStatus::NoMatches);
    }

    #[test]
    fn reference_self_query_is_identity() {
        let s = scene();
        let (img, _) = render_panorama(&s, &Pose::yaw(0.4, Vec3::new(0.3, -0.2, 1.4)), 512, 256).unwrap();
        let cfg = LocalizeConfig { n_t: 4, n_r: 4, ..LocalizeConfig::default() };
        let map = build_reference_map(&img, &MockPredictor::ground_truth(s), &cfg, 1).unwrap();
        let res = localize_query(&img, &map, &cfg, &mut rng::from_seed(0)).unwrap();
        assert_eq!(res.status, LocalizeStatus::Success);
        let (t, r) = pose_error(&res.pose, &Pose::identity());
        assert!(t < 0.05 && r < 1.0, "{t} {r}");
    }

    #[test]
    fn shared_yaw_views_match_direct_warps() {
        let s = scene();
        let (img, _) = render_panorama(&s, &Pose::from_translation(Vec3::new(0.2, 0.1, 1.3)), 256, 128).unwrap();
        let gt = MockPredictor::ground_truth(s);
        let cfg = LocalizeConfig { n_t: 2, n_r: 4, ..LocalizeConfig::default() };
        let shared = build_reference_map(&img, &gt, &cfg, 3).unwrap();
        let direct = build_reference_map(&img, &gt, &LocalizeConfig { keep_views: true, ..cfg }, 3).unwrap();
        for (a, b) in shared.views.iter().zip(&direct.views) {
            assert!(pose_error(&a.pose, &b.pose).1 < 1e-9);
            assert!(a.global.distance(&b.global) < 1e-3);
            let same = a
                .features
                .iter()
                .filter(|fa| b.features.iter().any(|fb| fb.descriptor == fa.descriptor && (fb.pixel.0 - fa.pixel.0).abs() < 1e-6))
                .count();
            assert!(same as f64 >= 0.95 * a.features.len() as f64, "{same}/{}", a.features.len());
        }
    }

    #[test]
    fn median_and_summary() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
        let s = summarize(&[(0.1, 1.0), (0.5, 1.0), (0.2, 6.0)], &[(0.3, 5.0)]).unwrap();
        assert!((s.accuracy[0].1 - 1.0 / 3.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn hamming_is_a_metric(a in any::<[u64; 4]>(), b in any::<[u64; 4]>(), c in any::<[u64; 4]>()) {
            prop_assert_eq!(hamming(&a, &a), 0);
            prop_assert_eq!(hamming(&a, &b), hamming(&b, &a));
            prop_assert!(hamming(&a, &c) <= hamming(&a, &b) + hamming(&b, &c));
        }
    }
}
