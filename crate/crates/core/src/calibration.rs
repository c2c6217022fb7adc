//! Test-time calibration of a depth predictor through a small correction
//! model: `D = exp(α) · base^g + b(band)`, with one bias per equal-colatitude
//! band. Gradients come from central finite differences of the loss, with
//! the same random draws on both sides of each difference.

use alloc::vec;
use alloc::vec::Vec;

use libm::{exp, log, pow};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore};

use crate::error::{invalid, Error, Result};
use crate::geometry::{DepthMap, Panorama, Pose};
use crate::losses::{stretch_branch, total_loss, LossConfig, StretchBranch};
use crate::predictor::{DepthPredictor, MIN_DEPTH};
use crate::rng;
use crate::stretch::{stretch_image, StretchFactor};
use crate::synthesis::{sample_perturb_pose, warp_panorama_with};

pub const DEFAULT_BANDS: usize = 4;
pub const GAMMA_MIN: f64 = 0.25;
pub const GAMMA_MAX: f64 = 4.0;
pub const SCALE_MIN: f64 = 0.1;
pub const SCALE_MAX: f64 = 10.0;
/// Step cap for navigation calibration.
pub const NAV_MAX_STEPS: usize = 300;

/// Keeps projected parameters strictly inside the open box.
const BOX_MARGIN: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CorrectionParams {
    pub log_scale: f64,
    pub gamma: f64,
    pub band_bias: Vec<f64>,
}

impl Default for CorrectionParams {
    fn default() -> Self {
        Self::identity(DEFAULT_BANDS)
    }
}

impl CorrectionParams {
    pub fn identity(bands: usize) -> Self {
        CorrectionParams { log_scale: 0.0, gamma: 1.0, band_bias: vec![0.0; bands] }
    }

    pub fn scale(&self) -> f64 {
        exp(self.log_scale)
    }

    pub fn dim(&self) -> usize {
        2 + self.band_bias.len()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = vec![self.log_scale, self.gamma];
        v.extend_from_slice(&self.band_bias);
        v
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() < 2 {
            return Err(invalid("parameter vector needs at least log_scale and gamma"));
        }
        Ok(CorrectionParams { log_scale: v[0], gamma: v[1], band_bias: v[2..].to_vec() })
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.gamma > GAMMA_MIN
            && self.gamma < GAMMA_MAX
            && self.scale() > SCALE_MIN
            && self.scale() < SCALE_MAX
            && self.band_bias.iter().all(|b| b.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Domain(alloc::format!("correction parameters outside the admissible box: {self:?}")))
        }
    }

    /// Clamps into the admissible box.
    pub fn project(&self) -> Self {
        let (lo, hi) = (log(SCALE_MIN) + BOX_MARGIN, log(SCALE_MAX) - BOX_MARGIN);
        CorrectionParams {
            log_scale: self.log_scale.clamp(lo, hi),
            gamma: self.gamma.clamp(GAMMA_MIN + BOX_MARGIN, GAMMA_MAX - BOX_MARGIN),
            band_bias: self.band_bias.clone(),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.log_scale == 0.0 && self.gamma == 1.0 && self.band_bias.iter().all(|b| *b == 0.0)
    }

    pub fn apply(&self, base: &DepthMap) -> DepthMap {
        let (w, h) = (base.width(), base.height());
        let bands = self.band_bias.len();
        let s = self.scale();
        let identity = self.is_identity();
        base.map(|i, d| {
            if identity {
                return d;
            }
            let bias = if bands == 0 { 0.0 } else { self.band_bias[band_of(i / w, h, bands)] };
            (s * pow(d, self.gamma) + bias).max(MIN_DEPTH)
        })
    }
}

/// Latitude band of row `v`: `floor((v + 0.5) · B / H)`.
pub fn band_of(v: usize, height: usize, bands: usize) -> usize {
    (((v as f64 + 0.5) * bands as f64 / height as f64) as usize).min(bands - 1)
}

#[derive(Debug, Clone)]
pub struct CalibratedPredictor<P> {
    pub base: P,
    pub params: CorrectionParams,
}

impl<P: DepthPredictor> CalibratedPredictor<P> {
    pub fn new(base: P) -> Self {
        CalibratedPredictor { base, params: CorrectionParams::default() }
    }

    pub fn with_params(base: P, params: CorrectionParams) -> Self {
        CalibratedPredictor { base, params }
    }
}

impl<P: DepthPredictor> DepthPredictor for CalibratedPredictor<P> {
    fn predict(&self, image: &Panorama) -> Result<DepthMap> {
        Ok(self.params.apply(&self.base.predict(image)?))
    }

    fn parameters(&self) -> Option<CorrectionParams> {
        Some(self.params.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum Profile {
    Offline,
    Online,
    NavExplore,
    NavPointgoal,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CalibConfig {
    pub steps: usize,
    pub lr: f64,
    pub n_aug: usize,
    pub n_fwd: usize,
    /// Relative step: `ε = fd_epsilon · max(|θ|, 1)`.
    pub fd_epsilon: f64,
    /// Training images per optimizer step.
    pub batch: usize,
    pub seed: u64,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self::profile(Profile::Offline)
    }
}

impl CalibConfig {
    pub fn profile(p: Profile) -> Self {
        let base = CalibConfig { steps: 120, lr: 1.0, n_aug: 10, n_fwd: 25, fd_epsilon: 1e-3, batch: 4, seed: 0 };
        match p {
            Profile::Offline => base,
            Profile::Online => CalibConfig { steps: 1, batch: 1, n_aug: 0, ..base },
            Profile::NavExplore => CalibConfig { steps: NAV_MAX_STEPS, ..base },
            Profile::NavPointgoal => CalibConfig { steps: NAV_MAX_STEPS, n_fwd: 3, ..base },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.fd_epsilon > 0.0) || self.batch == 0 {
            return Err(invalid("need lr > 0, fd_epsilon > 0 and batch ≥ 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AugmentKind {
    Warp(Pose),
    Stretch(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Augmented {
    pub image: Panorama,
    pub kind: AugmentKind,
}

/// One synthesized training view: a warp to a random pose when the mean
/// predicted depth is in band, else a stretch toward the band.
pub fn augment<R: Rng + ?Sized>(image: &Panorama, d_hat: &DepthMap, cfg: &LossConfig, rng: &mut R) -> Result<Augmented> {
    let mean = d_hat.mean().ok_or(Error::NoValidPixels)?;
    let s = cfg.sigma;
    let k = match stretch_branch(mean, cfg) {
        StretchBranch::Middle => {
            let pose = sample_perturb_pose(&cfg.perturb, rng);
            let view = warp_panorama_with(image, d_hat, &pose, &cfg.warp())?;
            return Ok(Augmented { image: view.image, kind: AugmentKind::Warp(pose) });
        }
        StretchBranch::Large => rng.random_range(s * s..=s),
        StretchBranch::Small => rng.random_range(1.0 / s..=1.0 / (s * s)),
    };
    Ok(Augmented { image: stretch_image(image, StretchFactor::new(k)?), kind: AugmentKind::Stretch(k) })
}

/// `n_aug` augmentations of each image, using the predictor's current
/// depth; the originals themselves when `n_aug = 0`.
pub fn build_training_set<P: DepthPredictor + ?Sized>(
    predictor: &P,
    images: &[Panorama],
    n_aug: usize,
    loss_cfg: &LossConfig,
    seed: u64,
) -> Result<Vec<Panorama>> {
    if n_aug == 0 {
        return Ok(images.to_vec());
    }
    let mut r = rng::stream(seed, "augment");
    let mut out = Vec::with_capacity(images.len() * n_aug);
    for img in images {
        let d = predictor.predict(img)?;
        for _ in 0..n_aug {
            out.push(augment(img, &d, loss_cfg, &mut r)?.image);
        }
    }
    Ok(out)
}

/// Mean total loss over `images` under `params`, with image `i` drawing its
/// randomness from `seeds[i]`.
pub fn objective<P: DepthPredictor>(
    base: &P,
    params: &CorrectionParams,
    images: &[&Panorama],
    seeds: &[u64],
    loss_cfg: &LossConfig,
) -> Result<f64> {
    let p = CalibratedPredictor::with_params(base, params.clone());
    let mut sum = 0.0;
    for (img, seed) in images.iter().zip(seeds) {
        sum += total_loss(&p, img, loss_cfg, &mut rng::from_seed(*seed))?.total;
    }
    Ok(sum / images.len() as f64)
}

/// Central finite-difference gradient of [`objective`].
pub fn fd_gradient<P: DepthPredictor>(
    base: &P,
    params: &CorrectionParams,
    images: &[&Panorama],
    seeds: &[u64],
    loss_cfg: &LossConfig,
    fd_epsilon: f64,
) -> Result<Vec<f64>> {
    let theta = params.to_vec();
    let mut grad = vec![0.0; theta.len()];
    for j in 0..theta.len() {
        let eps = fd_epsilon * theta[j].abs().max(1.0);
        let mut plus = theta.clone();
        plus[j] += eps;
        let mut minus = theta.clone();
        minus[j] -= eps;
        let lp = objective(base, &CorrectionParams::from_slice(&plus)?, images, seeds, loss_cfg)?;
        let lm = objective(base, &CorrectionParams::from_slice(&minus)?, images, seeds, loss_cfg)?;
        grad[j] = (lp - lm) / (2.0 * eps);
    }
    Ok(grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationRun {
    pub params: CorrectionParams,
    /// Batch loss at the parameters before each step.
    pub trace: Vec<f64>,
    pub training_set_size: usize,
}

/// One projected gradient step; returns the loss before the step.
fn descend<P: DepthPredictor>(
    base: &P,
    params: &mut CorrectionParams,
    batch: &[&Panorama],
    seeds: &[u64],
    cfg: &CalibConfig,
    loss_cfg: &LossConfig,
) -> Result<(f64, bool)> {
    let loss = objective(base, params, batch, seeds, loss_cfg)?;
    let grad = fd_gradient(base, params, batch, seeds, loss_cfg, cfg.fd_epsilon)?;
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Ok((loss, false));
    }
    let theta: Vec<f64> = params.to_vec().iter().zip(&grad).map(|(t, g)| t - cfg.lr * g).collect();
    *params = CorrectionParams::from_slice(&theta)?.project();
    Ok((loss, true))
}

fn optimize<P: DepthPredictor>(
    predictor: &CalibratedPredictor<P>,
    set: &[Panorama],
    steps: usize,
    cfg: &CalibConfig,
    loss_cfg: &LossConfig,
) -> Result<CalibrationRun> {
    let mut params = predictor.params.project();
    let mut trace = Vec::with_capacity(steps);
    let mut order_rng = rng::stream(cfg.seed, "batch-order");
    let mut order: Vec<usize> = Vec::new();
    let mut loss_rng = rng::stream(cfg.seed, "loss");
    for step in 0..steps {
        let mut batch = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch.min(set.len()) {
            if order.is_empty() {
                order = (0..set.len()).collect();
                order.shuffle(&mut order_rng);
            }
            batch.push(&set[order.pop().expect("refilled above")]);
        }
        let seeds: Vec<u64> = batch.iter().map(|_| loss_rng.next_u64()).collect();
        let (loss, ok) = descend(&predictor.base, &mut params, &batch, &seeds, cfg, loss_cfg)?;
        trace.push(loss);
        if !ok {
            return Err(Error::Divergence { step, trace });
        }
    }
    Ok(CalibrationRun { params, trace, training_set_size: set.len() })
}

/// Offline calibration: augment every image `n_aug` times with the
/// uncalibrated predictor, then run `steps` projected gradient steps on
/// random batches of the augmented set.
pub fn calibrate_offline<P: DepthPredictor>(
    predictor: &CalibratedPredictor<P>,
    images: &[Panorama],
    cfg: &CalibConfig,
    loss_cfg: &LossConfig,
) -> Result<CalibrationRun> {
    cfg.validate()?;
    loss_cfg.validate()?;
    if images.is_empty() {
        return Err(invalid("calibration needs at least one image"));
    }
    let set = build_training_set(predictor, images, cfg.n_aug, loss_cfg, cfg.seed)?;
    optimize(predictor, &set, cfg.steps, cfg, loss_cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OnlineStep {
    /// Prediction emitted before the update.
    pub depth: DepthMap,
    /// Parameters the prediction was made with.
    pub params: CorrectionParams,
    /// Loss on this image before the update.
    pub loss: f64,
}

/// Online calibration: for each incoming image, emit the prediction under
/// the current parameters, then take one gradient step on that image.
///
/// The loss seed is fixed for the whole stream, so repeated images see the
/// same objective and the emitted losses track the parameter updates alone.
pub fn calibrate_online<'a, P: DepthPredictor>(
    predictor: &mut CalibratedPredictor<P>,
    images: impl IntoIterator<Item = &'a Panorama>,
    cfg: &CalibConfig,
    loss_cfg: &LossConfig,
) -> Result<Vec<OnlineStep>> {
    cfg.validate()?;
    loss_cfg.validate()?;
    let seed = rng::derive(cfg.seed, "online-loss");
    let mut out = Vec::new();
    for (step, img) in images.into_iter().enumerate() {
        let depth = predictor.predict(img)?;
        let params = predictor.params.clone();
        let (loss, ok) = descend(&predictor.base, &mut predictor.params, &[img], &[seed], cfg, loss_cfg)?;
        out.push(OnlineStep { depth, params, loss });
        if !ok {
            return Err(Error::Divergence { step, trace: out.iter().map(|s| s.loss).collect() });
        }
    }
    if out.is_empty() {
        return Err(invalid("online calibration needs a nonempty stream"));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum AgentAction {
    Forward,
    TurnLeft,
    TurnRight,
    Stop,
}

/// The first `n` panoramas whose log entry records a forward move, i.e.
/// the views seen right after moving forward.
pub fn forward_frames(log: &[(Panorama, AgentAction)], n: usize) -> Result<Vec<Panorama>> {
    let frames: Vec<Panorama> =
        log.iter().filter(|(_, a)| *a == AgentAction::Forward).take(n).map(|(p, _)| p.clone()).collect();
    if frames.len() < n {
        return Err(Error::InsufficientForwardFrames { needed: n, found: frames.len() });
    }
    Ok(frames)
}

/// Calibration from an agent log: cache the first `n_fwd` post-forward
/// views, augment each `n_aug` times and train for at most 300 steps.
pub fn navigation_calibration<P: DepthPredictor>(
    predictor: &CalibratedPredictor<P>,
    log: &[(Panorama, AgentAction)],
    cfg: &CalibConfig,
    loss_cfg: &LossConfig,
) -> Result<CalibrationRun> {
    cfg.validate()?;
    loss_cfg.validate()?;
    let frames = forward_frames(log, cfg.n_fwd)?;
    if frames.is_empty() {
        return Err(invalid("navigation calibration needs n_fwd ≥ 1"));
    }
    let set = build_training_set(predictor, &frames, cfg.n_aug, loss_cfg, cfg.seed)?;
    optimize(predictor, &set, cfg.steps.min(NAV_MAX_STEPS), cfg, loss_cfg)
}
