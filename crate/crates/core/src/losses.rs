//! Self-consistency objectives: stretch, Chamfer and point-to-plane normal
//! losses, their sum, and the baseline self-supervision losses.
//!
//! All terms are means (per valid pixel or per sampled point) rather than
//! raw sums, so magnitudes do not depend on resolution.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::SymmetricEigen;
use rand::seq::index;
use rand::{Rng, RngCore};

use crate::error::{invalid, Error, Result};
use crate::geometry::{
    backproject, depth_mse, flip_depth, flip_panorama, roll_depth, roll_panorama, DepthMap, Mat3, Panorama,
    PointCloud, Pose, Vec3,
};
use crate::kdtree::KdTree;
use crate::predictor::DepthPredictor;
use crate::rng;
use crate::stretch::{stretch_depth, stretch_image, StretchFactor};
use crate::synthesis::{sample_perturb_pose, warp_panorama_with, PerturbConfig, SynthView, WarpConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Neighborhood {
    /// The `normal_neighbors` nearest points.
    Knn,
    /// Up to `normal_neighbors` nearest points within `radius`.
    Ball { radius: f64 },
}

/// Which warped-view pixels form the Chamfer target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum TargetMask {
    /// Every valid pixel of the prediction on the warped image.
    All,
    /// Pixels a splat landed on, including filled holes.
    Splatted,
    /// Direct splats only.
    PureSplats,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossWeights {
    pub stretch: f64,
    pub chamfer: f64,
    pub normal: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { stretch: 1.0, chamfer: 1.0, normal: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BaselineConfig {
    pub mask_ratio: f64,
    pub patch_rows: usize,
    pub patch_cols: usize,
    pub pseudo_k: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig { mask_ratio: 0.1, patch_rows: 4, patch_cols: 8, pseudo_k: 4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossConfig {
    pub delta1: f64,
    pub delta2: f64,
    pub sigma: f64,
    pub normal_neighbors: usize,
    pub neighborhood: Neighborhood,
    pub chamfer_samples: usize,
    pub perturb: PerturbConfig,
    pub weights: LossWeights,
    pub target: TargetMask,
    pub fill_radius: usize,
    pub baseline: BaselineConfig,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            delta1: 1.0,
            delta2: 2.5,
            sigma: 0.8,
            normal_neighbors: 15,
            neighborhood: Neighborhood::Knn,
            chamfer_samples: 8192,
            perturb: PerturbConfig::default(),
            weights: LossWeights::default(),
            target: TargetMask::PureSplats,
            fill_radius: 2,
            baseline: BaselineConfig::default(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.delta1 && self.delta1 < self.delta2) {
            return Err(invalid("need 0 < delta1 < delta2"));
        }
        if !(0.0 < self.sigma && self.sigma < 1.0) {
            return Err(invalid("need 0 < sigma < 1"));
        }
        if self.normal_neighbors < 3 || self.chamfer_samples == 0 {
            return Err(invalid("need normal_neighbors ≥ 3 and chamfer_samples ≥ 1"));
        }
        if !(self.perturb.max_translation >= 0.0) {
            return Err(invalid("max_translation must be non-negative"));
        }
        Ok(())
    }

    pub fn warp(&self) -> WarpConfig {
        WarpConfig { fill_radius: self.fill_radius, ..WarpConfig::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub stretch: f64,
    pub chamfer: f64,
    pub normal: f64,
    pub total: f64,
}

impl LossReport {
    /// Builds a report from weighted terms, so `total` is their exact sum.
    pub fn new(stretch: f64, chamfer: f64, normal: f64) -> Self {
        LossReport { stretch, chamfer, normal, total: stretch + chamfer + normal }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StretchBranch {
    /// Mean depth below `delta1`: enlarge with `k ∈ {1/σ, 1/σ²}`.
    Small,
    /// Mean depth in `[delta1, delta2]`: no stretch term.
    Middle,
    /// Mean depth above `delta2`: contract with `k ∈ {σ, σ²}`.
    Large,
}

pub fn stretch_branch(mean_depth: f64, cfg: &LossConfig) -> StretchBranch {
    if mean_depth < cfg.delta1 {
        StretchBranch::Small
    } else if mean_depth > cfg.delta2 {
        StretchBranch::Large
    } else {
        StretchBranch::Middle
    }
}

pub fn stretch_factors(branch: StretchBranch, sigma: f64) -> Vec<f64> {
    match branch {
        StretchBranch::Small => vec![1.0 / sigma, 1.0 / (sigma * sigma)],
        StretchBranch::Middle => Vec::new(),
        StretchBranch::Large => vec![sigma, sigma * sigma],
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StretchDetail {
    pub value: f64,
    pub branch: StretchBranch,
    pub factors: Vec<f64>,
}

pub fn stretch_loss<P: DepthPredictor + ?Sized>(predictor: &P, image: &Panorama, cfg: &LossConfig) -> Result<f64> {
    let d_hat = predictor.predict(image)?;
    Ok(stretch_loss_detail(predictor, image, &d_hat, cfg)?.value)
}

/// Stretch loss given the prediction `d_hat` for `image`.
pub fn stretch_loss_detail<P: DepthPredictor + ?Sized>(
    predictor: &P,
    image: &Panorama,
    d_hat: &DepthMap,
    cfg: &LossConfig,
) -> Result<StretchDetail> {
    let mean = d_hat.mean().ok_or(Error::NoValidPixels)?;
    let branch = stretch_branch(mean, cfg);
    let factors = stretch_factors(branch, cfg.sigma);
    let mut value = 0.0;
    for &k in &factors {
        let k = StretchFactor::new(k)?;
        let pred = predictor.predict(&stretch_image(image, k))?;
        let back = stretch_depth(&pred, k.inverse());
        value += depth_mse(d_hat, &back)?;
    }
    Ok(StretchDetail { value, branch, factors })
}

/// Indices of `samples` points drawn without replacement from `0..n`,
/// ascending; all of them when `samples ≥ n`.
pub fn sample_indices(n: usize, samples: usize, seed: u64) -> Vec<usize> {
    if samples >= n {
        return (0..n).collect();
    }
    let mut r = rng::from_seed(seed);
    let mut idx = index::sample(&mut r, n, samples).into_vec();
    idx.sort_unstable();
    idx
}

fn as_arrays(points: &[Vec3]) -> Vec<[f64; 3]> {
    points.iter().map(|p| [p.x, p.y, p.z]).collect()
}

/// Unit normal of the plane fitted to `neighbors`, or `None` when their
/// spread has rank below 2.
pub fn fit_normal(neighbors: &[Vec3]) -> Option<Vec3> {
    if neighbors.len() < 3 {
        return None;
    }
    let n = neighbors.len() as f64;
    let mean = neighbors.iter().fold(Vec3::zeros(), |a, p| a + p) / n;
    let mut cov = Mat3::zeros();
    for p in neighbors {
        let d = p - mean;
        cov += d * d.transpose();
    }
    cov /= n;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let (l1, l2) = (eig.eigenvalues[order[1]], eig.eigenvalues[order[2]]);
    if !(l2 > 0.0) || l1 <= 1e-12 * l2 {
        return None;
    }
    let v = eig.eigenvectors.column(order[0]).into_owned();
    let norm = v.norm();
    (norm > 0.0).then(|| v / norm)
}

fn normal_for(
    points: &[Vec3],
    tree: &KdTree<3>,
    i: usize,
    neighborhood: Neighborhood,
    k: usize,
) -> Option<Vec3> {
    let p = points[i];
    let q = [p.x, p.y, p.z];
    let found = tree.knn(&q, k);
    let pts: Vec<Vec3> = match neighborhood {
        Neighborhood::Knn => found.iter().map(|(j, _)| points[*j]).collect(),
        Neighborhood::Ball { radius } => {
            found.iter().filter(|(_, d2)| *d2 <= radius * radius).map(|(j, _)| points[*j]).collect()
        }
    };
    let n = fit_normal(&pts)?;
    // Orient toward the camera at the origin.
    Some(if n.dot(&p) > 0.0 { -n } else { n })
}

/// PCA normals from the `neighbors` nearest points, facing the origin.
pub fn estimate_normals(cloud: &PointCloud, neighbors: usize) -> Result<PointCloud> {
    estimate_normals_with(cloud, Neighborhood::Knn, neighbors)
}

pub fn estimate_normals_with(cloud: &PointCloud, neighborhood: Neighborhood, neighbors: usize) -> Result<PointCloud> {
    if cloud.len() < neighbors || neighbors < 3 {
        return Err(invalid("cloud has fewer points than the neighborhood size"));
    }
    let tree = KdTree::new(&as_arrays(&cloud.points));
    let normals = (0..cloud.len()).map(|i| normal_for(&cloud.points, &tree, i, neighborhood, neighbors)).collect();
    Ok(PointCloud { normals: Some(normals), ..cloud.clone() })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometricTerms {
    pub chamfer: f64,
    pub normal: f64,
    pub samples: usize,
    pub normals_used: usize,
}

/// One-directional Chamfer and point-to-plane terms from `source` to
/// `target`, after moving source points into the target frame with
/// `x' = Rᵀ(x − t)`. Both terms average over the same sampled source points;
/// the normal term skips points whose normal is degenerate.
pub fn geometric_terms(
    source: &[Vec3],
    target: &[Vec3],
    pose: &Pose,
    cfg: &LossConfig,
    seed: u64,
    with_normals: bool,
) -> Result<GeometricTerms> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let target_tree = KdTree::new(&as_arrays(target));
    let idx = sample_indices(source.len(), cfg.chamfer_samples, seed);
    let source_tree = with_normals.then(|| KdTree::new(&as_arrays(source)));
    let rt = pose.rotation.transpose();
    let (mut ch, mut no) = (0.0, 0.0);
    let mut used = 0usize;
    for &i in &idx {
        let x = pose.to_child(&source[i]);
        let (j, d2) = target_tree.nearest(&[x.x, x.y, x.z]).expect("target is nonempty");
        ch += d2;
        if let Some(tree) = &source_tree {
            if let Some(n) = normal_for(source, tree, i, cfg.neighborhood, cfg.normal_neighbors) {
                let r = (rt * n).dot(&(x - target[j]));
                no += r * r;
                used += 1;
            }
        }
    }
    Ok(GeometricTerms {
        chamfer: ch / idx.len() as f64,
        normal: if used > 0 { no / used as f64 } else { 0.0 },
        samples: idx.len(),
        normals_used: used,
    })
}

/// Chamfer distance between point sets with explicit sampling parameters.
pub fn chamfer_distance(source: &[Vec3], target: &[Vec3], pose: &Pose, samples: usize, seed: u64) -> Result<f64> {
    let cfg = LossConfig { chamfer_samples: samples, ..LossConfig::default() };
    Ok(geometric_terms(source, target, pose, &cfg, seed, false)?.chamfer)
}

/// Restricts the prediction on the warped image to the configured target pixels.
pub fn select_target(d_warp: &DepthMap, view: &SynthView, mask: TargetMask) -> DepthMap {
    match mask {
        TargetMask::All => d_warp.clone(),
        TargetMask::Splatted => d_warp.masked(&view.mask),
        TargetMask::PureSplats => {
            let keep: Vec<bool> = (0..view.mask.len()).map(|i| view.mask[i] && view.is_pure(i)).collect();
            d_warp.masked(&keep)
        }
    }
}

/// Chamfer term between `B(d_hat)` and `B(target)`; `target` is the
/// prediction on the warped view, already restricted by [`select_target`].
pub fn chamfer_loss(d_hat: &DepthMap, target: &DepthMap, pose: &Pose, cfg: &LossConfig, seed: u64) -> Result<f64> {
    let s = backproject(d_hat)?;
    let t = backproject(target)?;
    Ok(geometric_terms(&s.points, &t.points, pose, cfg, seed, false)?.chamfer)
}

pub fn normal_loss(d_hat: &DepthMap, target: &DepthMap, pose: &Pose, cfg: &LossConfig, seed: u64) -> Result<f64> {
    let s = backproject(d_hat)?;
    let t = backproject(target)?;
    Ok(geometric_terms(&s.points, &t.points, pose, cfg, seed, true)?.normal)
}

/// Everything one evaluation of the objective touched, for inspection.
#[derive(Debug, Clone)]
pub struct LossTrace {
    pub report: LossReport,
    pub pose: Pose,
    pub d_hat: DepthMap,
    pub view: SynthView,
    pub target: DepthMap,
    pub sample_seed: u64,
}

/// `L = L_S + L_C + L_N` with one freshly drawn perturbation pose.
pub fn total_loss<P: DepthPredictor + ?Sized, R: RngCore + ?Sized>(
    predictor: &P,
    image: &Panorama,
    cfg: &LossConfig,
    rng: &mut R,
) -> Result<LossReport> {
    Ok(total_loss_trace(predictor, image, cfg, rng)?.report)
}

pub fn total_loss_trace<P: DepthPredictor + ?Sized, R: RngCore + ?Sized>(
    predictor: &P,
    image: &Panorama,
    cfg: &LossConfig,
    rng: &mut R,
) -> Result<LossTrace> {
    cfg.validate()?;
    let d_hat = predictor.predict(image)?;
    if d_hat.width() != image.width() || d_hat.height() != image.height() {
        return Err(Error::Predictor(String::from("prediction dimensions differ from the image")));
    }
    let stretch = stretch_loss_detail(predictor, image, &d_hat, cfg)?.value;
    let pose = sample_perturb_pose(&cfg.perturb, rng);
    let sample_seed = rng.next_u64();
    let view = warp_panorama_with(image, &d_hat, &pose, &cfg.warp())?;
    let d_warp = predictor.predict(&view.image)?;
    let target = select_target(&d_warp, &view, cfg.target);
    let s = backproject(&d_hat)?;
    let t = backproject(&target)?;
    let g = geometric_terms(&s.points, &t.points, &pose, cfg, sample_seed, cfg.weights.normal != 0.0)?;
    let w = cfg.weights;
    Ok(LossTrace {
        report: LossReport::new(w.stretch * stretch, w.chamfer * g.chamfer, w.normal * g.normal),
        pose,
        d_hat,
        view,
        target,
        sample_seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    Flip,
    Mask,
    Photometric,
    PseudoLabel,
}

impl core::str::FromStr for BaselineKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flip" => Ok(BaselineKind::Flip),
            "mask" => Ok(BaselineKind::Mask),
            "photometric" => Ok(BaselineKind::Photometric),
            "pseudo_label" => Ok(BaselineKind::PseudoLabel),
            other => Err(Error::UnknownKind(String::from(other))),
        }
    }
}

/// Patch-grid mask: `true` for kept pixels. `round(ratio · rows · cols)`
/// patches are dropped.
pub fn patch_mask<R: Rng + ?Sized>(width: usize, height: usize, cfg: &BaselineConfig, rng: &mut R) -> Vec<bool> {
    let patches = cfg.patch_rows * cfg.patch_cols;
    let drop = (libm::round(cfg.mask_ratio * patches as f64) as usize).min(patches);
    let mut dropped = vec![false; patches];
    for p in index::sample(rng, patches, drop).into_iter() {
        dropped[p] = true;
    }
    (0..width * height)
        .map(|i| {
            let (u, v) = (i % width, i / width);
            let pr = (v * cfg.patch_rows / height).min(cfg.patch_rows - 1);
            let pc = (u * cfg.patch_cols / width).min(cfg.patch_cols - 1);
            !dropped[pr * cfg.patch_cols + pc]
        })
        .collect()
}

fn image_mse(a: &Panorama, b: &Panorama, keep: &[bool]) -> Result<f64> {
    let mut s = 0.0;
    let mut n = 0usize;
    for (i, (p, q)) in a.pixels().iter().zip(b.pixels()).enumerate() {
        if keep[i] {
            for c in 0..3 {
                let d = f64::from(p[c]) - f64::from(q[c]);
                s += d * d;
            }
            n += 3;
        }
    }
    if n == 0 {
        return Err(Error::NoValidPixels);
    }
    Ok(s / n as f64)
}

/// Baseline self-supervision losses, each a mean squared error over
/// mutually valid pixels.
pub fn baseline_loss<P: DepthPredictor + ?Sized, R: RngCore + ?Sized>(
    kind: BaselineKind,
    predictor: &P,
    image: &Panorama,
    cfg: &LossConfig,
    rng: &mut R,
) -> Result<f64> {
    let d = predictor.predict(image)?;
    let (w, h) = (image.width(), image.height());
    match kind {
        BaselineKind::Flip => {
            let flipped = predictor.predict(&flip_panorama(image))?;
            depth_mse(&flipped, &flip_depth(&d))
        }
        BaselineKind::Mask => {
            let keep = patch_mask(w, h, &cfg.baseline, rng);
            if !keep.iter().any(|k| !k) {
                return Ok(0.0);
            }
            let masked: Vec<[f32; 3]> =
                image.pixels().iter().zip(&keep).map(|(p, k)| if *k { *p } else { [0.0; 3] }).collect();
            let masked = Panorama::new(w, h, masked)?.with_capture(image.capture().copied());
            let dm = predictor.predict(&masked)?;
            depth_mse(&d.masked(&keep), &dm.masked(&keep))
        }
        BaselineKind::Photometric => {
            let pose = sample_perturb_pose(&cfg.perturb, rng);
            let view = warp_panorama_with(image, &d, &pose, &cfg.warp())?;
            let d_warp = predictor.predict(&view.image)?;
            let back = warp_panorama_with(&view.image, &d_warp.masked(&view.mask), &pose.inverse(), &cfg.warp())?;
            image_mse(image, &back.image, &back.mask)
        }
        BaselineKind::PseudoLabel => {
            let k = cfg.baseline.pseudo_k.max(1);
            let mut sum = vec![0.0; w * h];
            let mut ok = vec![true; w * h];
            for j in 1..=k {
                let shift = libm::round((j * w) as f64 / k as f64) as i64;
                let pred = predictor.predict(&roll_panorama(image, shift))?;
                let back = roll_depth(&pred, -shift);
                for i in 0..w * h {
                    match back.mask()[i] {
                        true => sum[i] += back.values()[i],
                        false => ok[i] = false,
                    }
                }
            }
            let pseudo: Vec<f64> =
                sum.iter().zip(&ok).map(|(s, o)| if *o { s / k as f64 } else { f64::NAN }).collect();
            depth_mse(&d, &DepthMap::from_depths(w, h, pseudo)?)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::{CorruptionSpec, MockPredictor};
    use crate::scene::{build_scene, render_panorama, SceneSpec};
    use core::cell::Cell;
    use proptest::prelude::*;

    struct Counting<P> {
        inner: P,
        calls: Cell<usize>,
    }

    impl<P: DepthPredictor> DepthPredictor for Counting<P> {
        fn predict(&self, image: &Panorama) -> Result<DepthMap> {
            self.calls.set(self.calls.get() + 1);
            self.inner.predict(image)
        }
    }

    struct Constant(f64);

    impl DepthPredictor for Constant {
        fn predict(&self, image: &Panorama) -> Result<DepthMap> {
            DepthMap::constant(image.width(), image.height(), self.0)
        }
    }

    fn sphere_points(n: usize) -> Vec<Vec3> {
        // Fibonacci sphere, roughly uniform.
        let golden = core::f64::consts::PI * (3.0 - libm::sqrt(5.0));
        (0..n)
            .map(|i| {
                let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                let r = libm::sqrt(1.0 - z * z);
                let t = golden * i as f64;
                Vec3::new(r * libm::cos(t), r * libm::sin(t), z)
            })
            .collect()
    }

    fn plane(z: f64, n: usize, step: f64) -> Vec<Vec3> {
        let mut out = Vec::new();
        for i in 0..n {
            for j in 0..n {
                out.push(Vec3::new((i as f64 - n as f64 / 2.0) * step, (j as f64 - n as f64 / 2.0) * step, z));
            }
        }
        out
    }

    #[test]
    fn middle_branch_is_exactly_zero() {
        let img = Panorama::filled(32, 16, [0.5; 3]).unwrap();
        let p = Counting { inner: Constant(1.7), calls: Cell::new(0) };
        assert_eq!(stretch_loss(&p, &img, &LossConfig::default()).unwrap(), 0.0);
        assert_eq!(p.calls.get(), 1);
    }

    #[test]
    fn branch_selection_counts_predictions() {
        let img = Panorama::filled(32, 16, [0.5; 3]).unwrap();
        let cfg = LossConfig::default();
        for (depth, branch, factors) in
            [(0.5, StretchBranch::Small, [1.25, 1.5625]), (3.0, StretchBranch::Large, [0.8, 0.64])]
        {
            let p = Counting { inner: Constant(depth), calls: Cell::new(0) };
            let d = p.predict(&img).unwrap();
            let det = stretch_loss_detail(&p, &img, &d, &cfg).unwrap();
            assert_eq!(det.branch, branch);
            assert_eq!(p.calls.get(), 3);
            for (a, b) in det.factors.iter().zip(factors) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gt_small_room_is_stretch_consistent() {
        let s = build_scene(&SceneSpec::plain_room(1.4, 1.4, 1.8), 0).unwrap();
        let (img, gt) = render_panorama(&s, &Pose::from_translation(Vec3::new(0.1, -0.1, 0.9)), 128, 64).unwrap();
        assert!(gt.mean().unwrap() < 1.0);
        let l = stretch_loss(&MockPredictor::ground_truth(s), &img, &LossConfig::default()).unwrap();
        assert!(l <= 1e-3, "{l}");
    }

    /// Both sides of the stretch residual scale with a uniform depth scale,
    /// so a scale-c predictor has exactly c² times the GT loss while the
    /// branch is unchanged.
    #[test]
    fn stretch_loss_is_quadratic_in_uniform_scale() {
        let s = build_scene(&SceneSpec::plain_room(9.0, 9.0, 3.0), 0).unwrap();
        let (img, gt) = render_panorama(&s, &Pose::from_translation(Vec3::new(0.1, -0.1, 1.4)), 128, 64).unwrap();
        assert!(gt.mean().unwrap() > 2.5);
        let cfg = LossConfig::default();
        let base = stretch_loss(&MockPredictor::ground_truth(s.clone()), &img, &cfg).unwrap();
        let scaled = stretch_loss(&MockPredictor::new(s, CorruptionSpec::scale(1.5)), &img, &cfg).unwrap();
        assert!(base > 0.0 && scaled > base);
        assert!((scaled / base - 2.25).abs() < 1e-9, "{}", scaled / base);
    }

    #[test]
    fn chamfer_of_offset_sphere() {
        let src = sphere_points(100);
        let tgt: Vec<Vec3> = src.iter().map(|p| p + Vec3::new(0.1, 0.0, 0.0)).collect();
        let c = chamfer_distance(&src, &tgt, &Pose::identity(), 100, 0).unwrap();
        assert!((c - 0.01).abs() < 1e-9, "{c}");
        assert!(chamfer_distance(&src, &src, &Pose::identity(), 100, 0).unwrap() < 1e-10);
    }

    #[test]
    fn chamfer_of_transformed_copy_is_zero() {
        let src = sphere_points(500);
        let pose = Pose::yaw(0.8, Vec3::new(0.2, -0.3, 0.1));
        let tgt: Vec<Vec3> = src.iter().map(|p| pose.to_child(p)).collect();
        let cfg = LossConfig { chamfer_samples: 200, ..LossConfig::default() };
        let g = geometric_terms(&src, &tgt, &pose, &cfg, 3, true).unwrap();
        assert!(g.chamfer < 1e-10 && g.normal < 1e-10);
    }

    #[test]
    fn plane_normals_face_camera() {
        let c = estimate_normals(&PointCloud::from_points(plane(2.0, 20, 0.05)), 15).unwrap();
        for n in c.normals.unwrap() {
            assert!((n.unwrap() - Vec3::new(0.0, 0.0, -1.0)).norm() < 1e-6);
        }
    }

    #[test]
    fn sphere_normals_are_radial() {
        let pts = sphere_points(4000);
        let c = estimate_normals(&PointCloud::from_points(pts.clone()), 15).unwrap();
        for (p, n) in pts.iter().zip(c.normals.unwrap()) {
            let e = (n.unwrap() + p).norm();
            assert!(e < 3e-2, "{e} at {p:?}");
        }
    }

    #[test]
    fn collinear_neighborhood_is_invalid() {
        let line: Vec<Vec3> = (0..20).map(|i| Vec3::new(i as f64 * 0.1, 0.0, 1.0)).collect();
        let c = estimate_normals(&PointCloud::from_points(line), 5).unwrap();
        assert!(c.normals.unwrap().iter().all(|n| n.is_none()));
        let ball = estimate_normals_with(&PointCloud::from_points(plane(2.0, 10, 0.05)), Neighborhood::Ball { radius: 0.001 }, 15)
            .unwrap();
        assert!(ball.normals.unwrap().iter().all(|n| n.is_none()));
    }

    #[test]
    fn point_to_plane_ignores_tangential_shift() {
        let src = plane(2.0, 40, 0.05);
        let cfg = LossConfig { chamfer_samples: 400, ..LossConfig::default() };
        let slid: Vec<Vec3> = plane(2.0, 50, 0.05).iter().map(|p| p + Vec3::new(0.05, 0.0, 0.0)).collect();
        let g = geometric_terms(&src, &slid, &Pose::identity(), &cfg, 1, true).unwrap();
        assert!(g.normal <= 1e-6);
        let lifted = plane(2.1, 50, 0.05);
        let g = geometric_terms(&src, &lifted, &Pose::identity(), &cfg, 1, true).unwrap();
        assert!((g.normal - 0.01).abs() <= 0.001, "{}", g.normal);
    }

    #[test]
    fn report_total_is_sum_and_seeded() {
        let s = build_scene(&SceneSpec::textured_room(4.0, 4.0, 3.0), 0).unwrap();
        let (img, _) = render_panorama(&s, &Pose::from_translation(Vec3::new(0.1, 0.2, 1.4)), 64, 32).unwrap();
        let p = MockPredictor::new(s, CorruptionSpec::scale(1.2));
        let cfg = LossConfig { chamfer_samples: 512, ..LossConfig::default() };
        let a = total_loss(&p, &img, &cfg, &mut rng::from_seed(4)).unwrap();
        let b = total_loss(&p, &img, &cfg, &mut rng::from_seed(4)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.total, a.stretch + a.chamfer + a.normal);
        assert!(a.chamfer > 0.0);
    }

    #[test]
    fn baselines_vanish_for_consistent_predictors() {
        let img = Panorama::filled(32, 16, [0.5; 3]).unwrap();
        let cfg = LossConfig::default();
        let mut r = rng::from_seed(0);
        assert_eq!(baseline_loss(BaselineKind::Flip, &Constant(2.0), &img, &cfg, &mut r).unwrap(), 0.0);
        let none = LossConfig { baseline: BaselineConfig { mask_ratio: 0.0, ..BaselineConfig::default() }, ..cfg };
        assert_eq!(baseline_loss(BaselineKind::Mask, &Constant(2.0), &img, &none, &mut r).unwrap(), 0.0);
        assert!("blur".parse::<BaselineKind>().is_err());
    }

    #[test]
    fn patch_mask_drops_three_of_thirty_two() {
        let keep = patch_mask(64, 32, &BaselineConfig::default(), &mut rng::from_seed(1));
        let dropped = keep.iter().filter(|k| !**k).count();
        assert_eq!(dropped, 3 * (64 / 8) * (32 / 4));
    }

    proptest! {
        #[test]
        fn normal_term_bounded_by_chamfer(
            src in proptest::collection::vec(prop::array::uniform3(-2.0f64..2.0), 30..120),
            tgt in proptest::collection::vec(prop::array::uniform3(-2.0f64..2.0), 1..120),
            yaw in -3.0f64..3.0,
        ) {
            let src: Vec<Vec3> = src.into_iter().map(Vec3::from).collect();
            let tgt: Vec<Vec3> = tgt.into_iter().map(Vec3::from).collect();
            let cfg = LossConfig { chamfer_samples: 64, ..LossConfig::default() };
            let pose = Pose::yaw(yaw, Vec3::new(0.1, 0.0, 0.0));
            // Compare per used point: each squared plane residual is at most the squared distance.
            let g = geometric_terms(&src, &tgt, &pose, &cfg, 0, true).unwrap();
            prop_assert!(g.normal * g.normals_used as f64 <= g.chamfer * g.samples as f64 + 1e-12);
        }
    }
}
