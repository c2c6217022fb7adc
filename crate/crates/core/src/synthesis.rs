//! Novel-view synthesis by forward splatting an RGB-D panorama, and the
//! random perturbation poses the losses warp to.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::geometry::{colatitude, longitude, project_nearest, rot_z, DepthMap, DirTable, Panorama, Pose, Vec3};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PerturbConfig {
    /// Half-width of the uniform translation range per axis, meters.
    pub max_translation: f64,
    pub seed: u64,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        PerturbConfig { max_translation: 0.5, seed: 0 }
    }
}

/// Yaw uniform in `[−π, π)` about `+z`, translation uniform per axis.
pub fn sample_perturb_pose<R: Rng + ?Sized>(cfg: &PerturbConfig, rng: &mut R) -> Pose {
    let yaw = rng.random_range(-PI..PI);
    let m = cfg.max_translation;
    let mut t = Vec3::zeros();
    for i in 0..3 {
        let x: f64 = rng.random_range(-1.0..=1.0);
        t[i] = x * m;
    }
    Pose { rotation: rot_z(yaw), translation: t }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarpConfig {
    /// Largest hole-fill distance in pixels.
    pub fill_radius: usize,
    /// Splats per source pixel along each axis. Above 1, sub-pixel samples
    /// take bilinear depth where the four surrounding depths agree within
    /// 5%, which closes magnification gaps on smooth surfaces.
    pub supersample: usize,
}

impl Default for WarpConfig {
    fn default() -> Self {
        WarpConfig { fill_radius: 2, supersample: 1 }
    }
}

/// Bilinear depth at continuous `(u, v)` when the four neighbours are valid
/// and within 5% of each other.
fn smooth_depth(depth: &DepthMap, u: f64, v: f64) -> Option<f64> {
    let (w, h) = (depth.width() as i64, depth.height() as i64);
    let (u0, v0) = (libm::floor(u), libm::floor(v));
    let (fu, fv) = (u - u0, v - v0);
    let (u0, v0) = (u0 as i64, (v0 as i64).clamp(0, h - 1));
    let v1 = (v0 + 1).min(h - 1);
    let at = |uu: i64, vv: i64| depth.get(uu.rem_euclid(w) as usize, vv as usize);
    let (a, b, c, d) = (at(u0, v0)?, at(u0 + 1, v0)?, at(u0, v1)?, at(u0 + 1, v1)?);
    let (lo, hi) = (a.min(b).min(c).min(d), a.max(b).max(c).max(d));
    if hi > 1.05 * lo {
        return None;
    }
    Some((a * (1.0 - fu) + b * fu) * (1.0 - fv) + (c * (1.0 - fu) + d * fu) * fv)
}

pub const NO_SOURCE: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthView {
    pub image: Panorama,
    pub depth: DepthMap,
    /// True where a source point landed or a hole was filled.
    pub mask: Vec<bool>,
    /// 0 for direct splats, the fill distance in pixels for filled holes,
    /// infinite where nothing landed.
    pub fill_distance: Vec<f32>,
    /// Raster index of the source pixel supplying each destination pixel.
    pub source_index: Vec<u32>,
}

impl SynthView {
    pub fn is_pure(&self, i: usize) -> bool {
        self.fill_distance[i] == 0.0
    }
}

pub fn warp_panorama(image: &Panorama, depth: &DepthMap, pose: &Pose) -> Result<SynthView> {
    warp_panorama_with(image, depth, pose, &WarpConfig::default())
}

/// Splats every valid source point `p` to `p' = Rᵀ(p − t)`, keeping the
/// nearest per destination pixel. An empty pixel is filled from the nearest
/// splat within `fill_radius` only when splats enclose it on both sides of a
/// row or column, so thin sampling gaps close while wide disocclusions and
/// invalid regions stay empty.
pub fn warp_panorama_with(image: &Panorama, depth: &DepthMap, pose: &Pose, cfg: &WarpConfig) -> Result<SynthView> {
    let (w, h) = (image.width(), image.height());
    if depth.width() != w || depth.height() != h {
        return Err(invalid("image and depth dimensions differ"));
    }
    if depth.valid_count() == 0 {
        return Err(Error::EmptyCloud);
    }
    let n = w * h;
    let table = DirTable::new(w, h);
    let mut zbuf = vec![f64::INFINITY; n];
    let mut src = vec![NO_SOURCE; n];
    let vals = depth.values();
    let mut splat = |p: Vec3, i: usize| {
        let q = pose.to_child(&p);
        let r = q.norm();
        if !(r > 1e-9) {
            return;
        }
        let (u, v) = project_nearest(&q, w, h);
        let j = v * w + u;
        if r < zbuf[j] {
            zbuf[j] = r;
            src[j] = i as u32;
        }
    };
    let ss = cfg.supersample.max(1);
    let sub = |k: usize| (k as f64 + 0.5) / ss as f64 - 0.5;
    let sub_cols: Vec<(f64, f64)> = (0..w * ss)
        .map(|k| libm::sincos(longitude((k / ss) as f64 + sub(k % ss), w)))
        .collect();
    let sub_rows: Vec<(f64, f64)> = (0..h * ss)
        .map(|k| libm::sincos(colatitude(((k / ss) as f64 + sub(k % ss)).clamp(-0.5, h as f64 - 0.5), h)))
        .collect();
    for (i, ok) in depth.mask().iter().enumerate() {
        if !ok {
            continue;
        }
        if ss == 1 {
            splat(table.dir_index(i) * vals[i], i);
            continue;
        }
        let (u, v) = (i % w, i / w);
        for b in 0..ss {
            let (sin_psi, cos_psi) = sub_rows[v * ss + b];
            let sv = v as f64 + (b as f64 + 0.5) / ss as f64 - 0.5;
            for a in 0..ss {
                let (sin_phi, cos_phi) = sub_cols[u * ss + a];
                let su = u as f64 + (a as f64 + 0.5) / ss as f64 - 0.5;
                let d = smooth_depth(depth, su, sv.max(0.0)).unwrap_or(vals[i]);
                splat(Vec3::new(sin_psi * cos_phi, sin_psi * sin_phi, cos_psi) * d, i);
            }
        }
    }

    let mut fill = vec![f32::INFINITY; n];
    for j in 0..n {
        if src[j] != NO_SOURCE {
            fill[j] = 0.0;
        }
    }
    let rad = cfg.fill_radius as i64;
    if rad > 0 {
        let pure = src.clone();
        let hit = |u: i64, v: i64| -> bool {
            v >= 0 && v < h as i64 && pure[(v as usize) * w + u.rem_euclid(w as i64) as usize] != NO_SOURCE
        };
        for v in 0..h as i64 {
            for u in 0..w as i64 {
                let j = v as usize * w + u as usize;
                if pure[j] != NO_SOURCE {
                    continue;
                }
                let left = (1..=rad).any(|d| hit(u - d, v));
                let right = (1..=rad).any(|d| hit(u + d, v));
                let up = (1..=rad).any(|d| hit(u, v - d));
                let down = (1..=rad).any(|d| hit(u, v + d));
                if !((left && right) || (up && down)) {
                    continue;
                }
                let mut best: Option<(i64, f64, usize)> = None;
                for dv in -rad..=rad {
                    for du in -rad..=rad {
                        let d2 = du * du + dv * dv;
                        if d2 == 0 || d2 > rad * rad || !hit(u + du, v + dv) {
                            continue;
                        }
                        let k = (v + dv) as usize * w + (u + du).rem_euclid(w as i64) as usize;
                        let better = match best {
                            None => true,
                            Some((bd, bz, _)) => d2 < bd || (d2 == bd && zbuf[k] > bz),
                        };
                        if better {
                            best = Some((d2, zbuf[k], k));
                        }
                    }
                }
                if let Some((d2, z, k)) = best {
                    zbuf[j] = z;
                    src[j] = pure[k];
                    fill[j] = libm::sqrt(d2 as f64) as f32;
                }
            }
        }
    }

    let pixels = image.pixels();
    let mut rgb = vec![[0.0f32; 3]; n];
    let mut out_depth = vec![f64::NAN; n];
    let mut mask = vec![false; n];
    for j in 0..n {
        if src[j] != NO_SOURCE {
            rgb[j] = pixels[src[j] as usize];
            out_depth[j] = zbuf[j];
            mask[j] = true;
        }
    }
    let capture = image.capture().map(|c| c.then_pose(pose));
    Ok(SynthView {
        image: Panorama::from_clamped(w, h, rgb).with_capture(capture),
        depth: DepthMap::from_raw(w, h, out_depth),
        mask,
        fill_distance: fill,
        source_index: src,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::backproject;
    use crate::kdtree::KdTree;
    use crate::rng;
    use crate::scene::{build_scene, render_panorama, SceneSpec};
    use proptest::prelude::*;

    fn room() -> (Panorama, DepthMap) {
        let s = build_scene(&SceneSpec::textured_room(4.0, 5.0, 3.0), 0).unwrap();
        render_panorama(&s, &Pose::from_translation(Vec3::new(0.2, -0.1, 1.4)), 128, 64).unwrap()
    }

    #[test]
    fn zero_range_gives_zero_translation() {
        let mut r = rng::from_seed(3);
        let cfg = PerturbConfig { max_translation: 0.0, seed: 0 };
        for _ in 0..100 {
            let p = sample_perturb_pose(&cfg, &mut r);
            assert_eq!(p.translation, Vec3::zeros());
            assert!((p.rotation * Vec3::z() - Vec3::z()).norm() < 1e-12);
        }
    }

    #[test]
    fn translation_statistics_are_uniform() {
        let mut r = rng::from_seed(5);
        let cfg = PerturbConfig::default();
        let mut sum = Vec3::zeros();
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for _ in 0..100_000 {
            let t = sample_perturb_pose(&cfg, &mut r).translation;
            sum += t;
            lo = lo.inf(&t);
            hi = hi.sup(&t);
        }
        let mean = sum / 100_000.0;
        for a in 0..3 {
            assert!(mean[a].abs() < 0.01);
            assert!(lo[a] >= -0.5 && lo[a] <= -0.49);
            assert!(hi[a] <= 0.5 && hi[a] >= 0.49);
        }
    }

    #[test]
    fn identity_warp_reproduces_input() {
        let (img, mut d) = room();
        // Knock out a block so the mask must follow validity.
        let w = d.width();
        let mut keep = vec![true; d.values().len()];
        for v in 20..30 {
            for u in 40..52 {
                keep[v * w + u] = false;
            }
        }
        d = d.masked(&keep);
        let view = warp_panorama(&img, &d, &Pose::identity()).unwrap();
        assert_eq!(view.mask, d.mask());
        for i in 0..keep.len() {
            if keep[i] {
                assert_eq!(view.image.pixels()[i], img.pixels()[i]);
                assert!((view.depth.values()[i] - d.values()[i]).abs() <= 1e-12 * d.values()[i]);
            }
        }
    }

    #[test]
    fn yaw_warp_shifts_columns() {
        let (img, d) = room();
        let (w, h) = (img.width(), img.height());
        let c = 16;
        let theta = 2.0 * PI * c as f64 / w as f64;
        let view = warp_panorama(&img, &d, &Pose::yaw(theta, Vec3::zeros())).unwrap();
        let mut good = 0;
        for v in 2..h - 2 {
            for u in 0..w {
                // New column u sees old longitude + θ.
                let old = d.get((u + c) % w, v).unwrap();
                if (view.depth.get(u, v).unwrap_or(0.0) - old).abs() < 1e-9 {
                    good += 1;
                }
            }
        }
        assert!(good as f64 >= 0.99 * ((h - 4) * w) as f64);
    }

    #[test]
    fn stored_depth_is_transformed_norm() {
        let (img, d) = room();
        let pose = Pose::yaw(0.7, Vec3::new(0.3, -0.2, 0.1));
        let view = warp_panorama(&img, &d, &pose).unwrap();
        let table = DirTable::new(d.width(), d.height());
        for j in 0..view.mask.len() {
            if view.mask[j] && view.is_pure(j) {
                let i = view.source_index[j] as usize;
                let q = pose.to_child(&(table.dir_index(i) * d.values()[i]));
                assert!((view.depth.values()[j] - q.norm()).abs() <= 1e-6 * q.norm());
            }
        }
    }

    #[test]
    fn warp_round_trip_stays_on_source_cloud() {
        let (img, d) = room();
        let pose = Pose::yaw(-0.4, Vec3::new(0.25, 0.1, -0.15));
        let view = warp_panorama(&img, &d, &pose).unwrap();
        let back: Vec<[f64; 3]> = backproject(&view.depth)
            .unwrap()
            .points
            .iter()
            .map(|p| pose.to_parent(p).into())
            .collect();
        let src: Vec<[f64; 3]> = backproject(&d).unwrap().points.iter().map(|p| (*p).into()).collect();
        let tree = KdTree::new(&src);
        let mean: f64 =
            back.iter().map(|p| libm::sqrt(tree.nearest(p).unwrap().1)).sum::<f64>() / back.len() as f64;
        let mut depths: Vec<f64> = d.values().to_vec();
        depths.sort_by(f64::total_cmp);
        let median = depths[depths.len() / 2];
        let ang = PI / d.height() as f64;
        assert!(mean <= 2.0 * ang * median, "{mean} vs {}", 2.0 * ang * median);
    }

    #[test]
    fn empty_source_errors() {
        let img = Panorama::filled(16, 8, [0.5; 3]).unwrap();
        let d = DepthMap::from_depths(16, 8, vec![f64::NAN; 128]).unwrap();
        assert_eq!(warp_panorama(&img, &d, &Pose::identity()), Err(Error::EmptyCloud));
    }

    proptest! {
        #[test]
        fn zbuffer_keeps_nearest(
            vals in proptest::collection::vec(0.3f64..4.0, 32 * 16),
            yaw in -3.0f64..3.0,
            t in prop::array::uniform3(-1.5f64..1.5),
        ) {
            let (w, h) = (32, 16);
            let d = DepthMap::from_depths(w, h, vals).unwrap();
            let img = Panorama::filled(w, h, [0.2; 3]).unwrap();
            let pose = Pose::yaw(yaw, Vec3::from(t));
            let view = warp_panorama_with(&img, &d, &pose, &WarpConfig { fill_radius: 0, ..WarpConfig::default() }).unwrap();
            let table = DirTable::new(w, h);
            let mut best = vec![f64::INFINITY; w * h];
            for i in 0..w * h {
                let q = pose.to_child(&(table.dir_index(i) * d.values()[i]));
                let (u, v) = project_nearest(&q, w, h);
                best[v * w + u] = best[v * w + u].min(q.norm());
            }
            for j in 0..w * h {
                match view.depth.get(j % w, j / w) {
                    Some(z) => prop_assert_eq!(z, best[j]),
                    None => prop_assert!(best[j].is_infinite()),
                }
            }
        }
    }
}
