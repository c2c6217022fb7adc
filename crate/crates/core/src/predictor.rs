//! Depth predictor interface, the ground-truth mock with injected
//! corruptions, and image-domain shifts.

use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;
use core::f64::consts::PI;

use libm::{pow, sqrt};
use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::calibration::CorrectionParams;
use crate::error::{invalid, Error, Result};
use crate::geometry::{project, rot_x, rot_y, rot_z, Capture, DepthMap, DirTable, Panorama, Pose};
use crate::rng;
use crate::scene::Scene;

/// Stand-in for a monocular panoramic depth network.
pub trait DepthPredictor {
    /// Depth for `image`, same dimensions. Must be deterministic.
    fn predict(&self, image: &Panorama) -> Result<DepthMap>;

    /// Calibratable parameters, if any.
    fn parameters(&self) -> Option<CorrectionParams> {
        None
    }
}

impl<P: DepthPredictor + ?Sized> DepthPredictor for &P {
    fn predict(&self, image: &Panorama) -> Result<DepthMap> {
        (**self).predict(image)
    }
    fn parameters(&self) -> Option<CorrectionParams> {
        (**self).parameters()
    }
}

impl<P: DepthPredictor + ?Sized> DepthPredictor for Arc<P> {
    fn predict(&self, image: &Panorama) -> Result<DepthMap> {
        (**self).predict(image)
    }
    fn parameters(&self) -> Option<CorrectionParams> {
        (**self).parameters()
    }
}

impl<P: DepthPredictor + ?Sized> DepthPredictor for alloc::boxed::Box<P> {
    fn predict(&self, image: &Panorama) -> Result<DepthMap> {
        (**self).predict(image)
    }
    fn parameters(&self) -> Option<CorrectionParams> {
        (**self).parameters()
    }
}

/// `D = scale · GT^gamma_d + latitude_bias · cos ψ + noise`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CorruptionSpec {
    pub scale: f64,
    pub gamma_d: f64,
    pub latitude_bias: f64,
    pub noise_std: f64,
}

/// Smallest depth a corrupted prediction may take.
pub const MIN_DEPTH: f64 = 1e-3;

impl CorruptionSpec {
    pub const IDENTITY: CorruptionSpec = CorruptionSpec { scale: 1.0, gamma_d: 1.0, latitude_bias: 0.0, noise_std: 0.0 };

    pub fn scale(scale: f64) -> Self {
        CorruptionSpec { scale, ..Self::IDENTITY }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.gamma_d > 0.0 && self.noise_std >= 0.0 && self.latitude_bias.is_finite())
            || !(self.scale.is_finite() && self.gamma_d.is_finite() && self.noise_std.is_finite())
        {
            return Err(invalid("corruption requires scale > 0, gamma_d > 0, noise_std ≥ 0"));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    /// Applies the corruption to a ground-truth map. Noise is drawn from
    /// `noise_seed` only when `noise_std > 0`.
    pub fn apply(&self, gt: &DepthMap, noise_seed: u64) -> DepthMap {
        if self.is_identity() {
            return gt.clone();
        }
        let (w, h) = (gt.width(), gt.height());
        let table = DirTable::new(w, h);
        let mut noise = rng::from_seed(noise_seed);
        gt.map(|i, d| {
            let mut x = if self.gamma_d == 1.0 { d } else { pow(d, self.gamma_d) };
            x *= self.scale;
            if self.latitude_bias != 0.0 {
                x += self.latitude_bias * table.cos_colatitude(i / w);
            }
            if self.noise_std > 0.0 {
                let n: f64 = StandardNormal.sample(&mut noise);
                x += self.noise_std * n;
            }
            x.max(MIN_DEPTH)
        })
    }
}

impl Default for CorruptionSpec {
    fn default() -> Self {
        Self::IDENTITY
    }
}

fn capture_seed(c: &Capture, seed: u64) -> u64 {
    let mut bytes = Vec::with_capacity(8 * 13);
    bytes.extend_from_slice(&c.scene.to_le_bytes());
    for x in c.linear.iter().chain(c.center.iter()) {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    rng::mix(rng::hash_bytes(&bytes) ^ seed)
}

/// Ground truth for a tagged capture with `corruption` applied.
pub fn predict_capture(
    scene: &Scene,
    capture: &Capture,
    corruption: &CorruptionSpec,
    seed: u64,
    width: usize,
    height: usize,
) -> Result<DepthMap> {
    if capture.scene != scene.id() {
        return Err(Error::UnregisteredView);
    }
    let gt = scene.render_depth(capture, width, height);
    Ok(corruption.apply(&gt, capture_seed(capture, seed)))
}

/// Mock prediction for an image rendered at `pose`. The image must carry the
/// capture of that pose in `scene`.
pub fn mock_predict(scene: &Scene, pose: &Pose, corruption: &CorruptionSpec, image: &Panorama) -> Result<DepthMap> {
    let want = Capture::from_pose(scene.id(), pose);
    match image.capture() {
        Some(c)
            if c.scene == want.scene
                && (c.linear - want.linear).abs().max() <= 1e-9
                && (c.center - want.center).abs().max() <= 1e-9 =>
        {
            predict_capture(scene, c, corruption, 0, image.width(), image.height())
        }
        _ => Err(Error::UnregisteredView),
    }
}

/// Ground-truth oracle with optional corruption. It reads the capture tag of
/// each image, so views derived by stretching, warping or rotating a render
/// are answered with the geometry their nominal camera would see.
#[derive(Debug, Clone)]
pub struct MockPredictor {
    pub scene: Arc<Scene>,
    pub corruption: CorruptionSpec,
    pub seed: u64,
    /// Couples appearance to depth: the scale is multiplied by
    /// `1 + appearance_gain · (0.5 − mean luma)`.
    pub appearance_gain: f64,
}

impl MockPredictor {
    pub fn new(scene: Arc<Scene>, corruption: CorruptionSpec) -> Self {
        MockPredictor { scene, corruption, seed: 0, appearance_gain: 0.0 }
    }

    pub fn ground_truth(scene: Arc<Scene>) -> Self {
        Self::new(scene, CorruptionSpec::IDENTITY)
    }
}

impl DepthPredictor for MockPredictor {
    fn predict(&self, image: &Panorama) -> Result<DepthMap> {
        let capture = image.capture().ok_or(Error::UnregisteredView)?;
        let mut corruption = self.corruption;
        if self.appearance_gain != 0.0 {
            let luma = image.luma();
            let mean = luma.iter().map(|x| f64::from(*x)).sum::<f64>() / luma.len() as f64;
            corruption.scale *= (1.0 + self.appearance_gain * (0.5 - mean)).max(0.05);
        }
        predict_capture(&self.scene, capture, &corruption, self.seed, image.width(), image.height())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum ImageShiftSpec {
    /// Multiply intensities by `factor`.
    LowLight { factor: f64 },
    /// Per-channel diagonal color transform.
    WhiteBalance { gains: [f64; 3] },
    /// `I^gamma`.
    Gamma { gamma: f64 },
    /// `I + I·n`, `n ~ N(0, variance)`.
    Speckle { variance: f64 },
    /// `I + n`, `n ~ N(0, variance)`.
    Gaussian { variance: f64 },
    /// Exactly `round(fraction · N)` pixels set to black or white.
    SaltPepper { fraction: f64 },
    /// Yaw uniform in `[−π, π)`, roll and pitch uniform in `±max_tilt`.
    Rotation { max_tilt: f64 },
}

impl ImageShiftSpec {
    pub const KINDS: [&'static str; 7] =
        ["low_light", "white_balance", "gamma", "speckle", "gaussian", "salt_pepper", "rotation"];

    /// The recipe for `kind` with the standard parameters.
    pub fn standard(kind: &str) -> Result<Self> {
        Ok(match kind {
            "low_light" => ImageShiftSpec::LowLight { factor: 0.75 },
            "white_balance" => ImageShiftSpec::WhiteBalance { gains: [0.7, 0.9, 0.8] },
            "gamma" => ImageShiftSpec::Gamma { gamma: 1.5 },
            "speckle" => ImageShiftSpec::Speckle { variance: 0.06 },
            "gaussian" => ImageShiftSpec::Gaussian { variance: 0.005 },
            "salt_pepper" => ImageShiftSpec::SaltPepper { fraction: 0.005 },
            "rotation" => ImageShiftSpec::Rotation { max_tilt: PI / 8.0 },
            other => return Err(Error::UnknownKind(String::from(other))),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            ImageShiftSpec::LowLight { factor } => (0.0..=1.0).contains(&factor),
            ImageShiftSpec::WhiteBalance { gains } => gains.iter().all(|g| (0.0..=1.0).contains(g)),
            ImageShiftSpec::Gamma { gamma } => gamma > 0.0 && gamma.is_finite(),
            ImageShiftSpec::Speckle { variance } | ImageShiftSpec::Gaussian { variance } => {
                variance >= 0.0 && variance.is_finite()
            }
            ImageShiftSpec::SaltPepper { fraction } => (0.0..=1.0).contains(&fraction),
            ImageShiftSpec::Rotation { max_tilt } => (0.0..=PI / 2.0).contains(&max_tilt),
        };
        if ok {
            Ok(())
        } else {
            Err(invalid("image shift parameter out of range"))
        }
    }
}

/// Applies one domain shift. Results are clipped to `[0, 1]`.
pub fn shift_image<R: Rng + ?Sized>(image: &Panorama, spec: &ImageShiftSpec, rng: &mut R) -> Result<Panorama> {
    spec.validate()?;
    let (w, h) = (image.width(), image.height());
    let capture = image.capture().copied();
    let px = image.pixels();
    let per_channel = |f: &mut dyn FnMut(usize, f64) -> f64| -> Vec<[f32; 3]> {
        px.iter()
            .map(|p| {
                let mut o = [0.0f32; 3];
                for c in 0..3 {
                    o[c] = f(c, f64::from(p[c])) as f32;
                }
                o
            })
            .collect()
    };
    let rgb = match *spec {
        ImageShiftSpec::LowLight { factor } => per_channel(&mut |_, x| x * factor),
        ImageShiftSpec::WhiteBalance { gains } => per_channel(&mut |c, x| x * gains[c]),
        ImageShiftSpec::Gamma { gamma } => per_channel(&mut |_, x| pow(x, gamma)),
        ImageShiftSpec::Speckle { variance } => {
            let sd = sqrt(variance);
            per_channel(&mut |_, x| {
                let n: f64 = StandardNormal.sample(rng);
                x + x * sd * n
            })
        }
        ImageShiftSpec::Gaussian { variance } => {
            let sd = sqrt(variance);
            per_channel(&mut |_, x| {
                let n: f64 = StandardNormal.sample(rng);
                x + sd * n
            })
        }
        ImageShiftSpec::SaltPepper { fraction } => {
            let n = w * h;
            let count = libm::round(fraction * n as f64) as usize;
            let mut out = px.to_vec();
            for i in index::sample(rng, n, count).into_iter() {
                let v = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
                out[i] = [v; 3];
            }
            out
        }
        ImageShiftSpec::Rotation { max_tilt } => {
            let yaw = rng.random_range(-PI..PI);
            let (pitch, roll) = if max_tilt > 0.0 {
                (rng.random_range(-max_tilt..=max_tilt), rng.random_range(-max_tilt..=max_tilt))
            } else {
                (0.0, 0.0)
            };
            let q = rot_z(yaw) * rot_y(pitch) * rot_x(roll);
            let table = DirTable::new(w, h);
            let out = (0..w * h)
                .map(|i| {
                    let (u, v) = project(&(q * table.dir_index(i)), w, h);
                    image.sample(u, v)
                })
                .collect();
            return Ok(Panorama::from_clamped(w, h, out).with_capture(capture.map(|c| c.then_linear(&q))));
        }
    };
    Ok(Panorama::from_clamped(w, h, rgb).with_capture(capture))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;
    use crate::scene::{build_scene, render_panorama, SceneSpec};
    use alloc::vec;

    fn setup() -> (Arc<Scene>, Pose, Panorama, DepthMap) {
        let s = build_scene(&SceneSpec::textured_room(4.0, 4.0, 3.0), 0).unwrap();
        let pose = Pose::yaw(0.3, Vec3::new(0.2, 0.1, 1.3));
        let (img, d) = render_panorama(&s, &pose, 64, 32).unwrap();
        (s, pose, img, d)
    }

    #[test]
    fn identity_corruption_is_ground_truth() {
        let (s, pose, img, gt) = setup();
        assert_eq!(mock_predict(&s, &pose, &CorruptionSpec::IDENTITY, &img).unwrap(), gt);
        assert_eq!(MockPredictor::ground_truth(s).predict(&img).unwrap(), gt);
    }

    #[test]
    fn scale_and_gamma_corruptions() {
        let (s, pose, img, gt) = setup();
        let d = mock_predict(&s, &pose, &CorruptionSpec::scale(1.3), &img).unwrap();
        for (a, b) in d.values().iter().zip(gt.values()) {
            assert!((a - 1.3 * b).abs() <= 1e-12 * b);
        }
        let g = CorruptionSpec { gamma_d: 1.1, ..CorruptionSpec::IDENTITY };
        let d = mock_predict(&s, &pose, &g, &img).unwrap();
        for (a, b) in d.values().iter().zip(gt.values()) {
            assert!((a - pow(*b, 1.1)).abs() < 1e-9);
        }
    }

    #[test]
    fn noise_is_deterministic_per_capture() {
        let (s, _, img, _) = setup();
        let m = MockPredictor::new(s, CorruptionSpec { noise_std: 0.05, ..CorruptionSpec::IDENTITY });
        assert_eq!(m.predict(&img).unwrap(), m.predict(&img).unwrap());
    }

    #[test]
    fn unregistered_views_error() {
        let (s, pose, img, _) = setup();
        let other = Pose::yaw(0.3, Vec3::new(0.25, 0.1, 1.3));
        assert_eq!(mock_predict(&s, &other, &CorruptionSpec::IDENTITY, &img), Err(Error::UnregisteredView));
        let bare = Panorama::filled(64, 32, [0.5; 3]).unwrap();
        assert_eq!(MockPredictor::ground_truth(s).predict(&bare), Err(Error::UnregisteredView));
        let _ = pose;
    }

    #[test]
    fn any_corruption_raises_mae() {
        let (s, pose, img, gt) = setup();
        let mae = |d: &DepthMap| d.values().iter().zip(gt.values()).map(|(a, b)| (a - b).abs()).sum::<f64>();
        for c in [
            CorruptionSpec::scale(0.9),
            CorruptionSpec { gamma_d: 1.1, ..CorruptionSpec::IDENTITY },
            CorruptionSpec { latitude_bias: 0.2, ..CorruptionSpec::IDENTITY },
            CorruptionSpec { noise_std: 0.01, ..CorruptionSpec::IDENTITY },
        ] {
            assert!(mae(&mock_predict(&s, &pose, &c, &img).unwrap()) > 0.0);
        }
    }

    #[test]
    fn photometric_recipes() {
        let white = Panorama::filled(16, 8, [1.0; 3]).unwrap();
        let mut r = rng::from_seed(0);
        let low = shift_image(&white, &ImageShiftSpec::standard("low_light").unwrap(), &mut r).unwrap();
        assert!(low.pixels().iter().all(|p| *p == [0.75; 3]));
        let wb = shift_image(&white, &ImageShiftSpec::standard("white_balance").unwrap(), &mut r).unwrap();
        assert!(wb.pixels().iter().all(|p| *p == [0.7, 0.9, 0.8]));
        let grey = Panorama::filled(16, 8, [0.25; 3]).unwrap();
        let g = shift_image(&grey, &ImageShiftSpec::standard("gamma").unwrap(), &mut r).unwrap();
        assert!((g.pixels()[0][0] - 0.125).abs() < 1e-7);
        assert_eq!(ImageShiftSpec::standard("fog"), Err(Error::UnknownKind("fog".into())));
    }

    #[test]
    fn noise_shifts_stay_in_range() {
        let img = Panorama::new(64, 32, (0..2048).map(|i| [(i % 256) as f32 / 255.0; 3]).collect()).unwrap();
        let mut r = rng::from_seed(4);
        for k in ["speckle", "gaussian", "salt_pepper", "rotation"] {
            let out = shift_image(&img, &ImageShiftSpec::standard(k).unwrap(), &mut r).unwrap();
            assert_eq!((out.width(), out.height()), (64, 32));
            assert!(out.pixels().iter().flatten().all(|c| (0.0..=1.0).contains(c)));
        }
    }

    #[test]
    fn salt_pepper_fraction() {
        let (w, h) = (1414, 707);
        let img = Panorama::filled(w, h, [0.5; 3]).unwrap();
        let mut r = rng::from_seed(9);
        let out = shift_image(&img, &ImageShiftSpec::SaltPepper { fraction: 0.005 }, &mut r).unwrap();
        let changed = out.pixels().iter().filter(|p| **p != [0.5; 3]).count() as f64 / (w * h) as f64;
        assert!((0.0045..=0.0055).contains(&changed), "{changed}");
    }

    #[test]
    fn rotation_shift_tracks_capture() {
        let (s, _, img, _) = setup();
        let mut r = rng::from_seed(2);
        let rot = shift_image(&img, &ImageShiftSpec::Rotation { max_tilt: 0.0 }, &mut r).unwrap();
        // A pure yaw is a column resampling; the mock still answers for the rotated view.
        let d = MockPredictor::ground_truth(s).predict(&rot).unwrap();
        assert_eq!(d.valid_count(), 64 * 32);
        let _ = vec![0u8];
    }
}
