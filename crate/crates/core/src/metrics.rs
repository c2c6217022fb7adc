//! Depth evaluation metrics over mutually valid pixels.

use alloc::vec::Vec;

use libm::{log, sqrt};

use crate::error::{Error, Result};
use crate::geometry::DepthMap;

pub const DEFAULT_LAMBDAS: [f64; 3] = [1.25, 1.25 * 1.25, 1.25 * 1.25 * 1.25];

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DepthMetrics {
    pub mae: f64,
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    /// `(λ, fraction)` per threshold.
    pub inlier: Vec<(f64, f64)>,
    /// Mutually valid pixels.
    pub count: usize,
    /// Predicted pixels dropped because the ground truth there is missing
    /// or zero.
    pub excluded: usize,
}

impl DepthMetrics {
    pub fn inlier_at(&self, lambda: f64) -> Option<f64> {
        self.inlier.iter().find(|(l, _)| *l == lambda).map(|(_, f)| *f)
    }
}

/// All six metrics over mutually valid pixels. Valid depths are positive by
/// construction, so the relative and log terms are always defined.
pub fn depth_metrics(pred: &DepthMap, gt: &DepthMap, lambdas: &[f64]) -> Result<DepthMetrics> {
    if pred.width() != gt.width() || pred.height() != gt.height() {
        return Err(Error::DimensionMismatch { expected: (gt.width(), gt.height()), got: (pred.width(), pred.height()) });
    }
    let (mut n, mut excluded) = (0usize, 0usize);
    let (mut abs, mut sq, mut rel, mut sq_rel, mut sq_log) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut hits = alloc::vec![0usize; lambdas.len()];
    let pairs = pred.values().iter().zip(gt.values()).zip(pred.mask().iter().zip(gt.mask()));
    for ((&d, &g), (&vd, &vg)) in pairs {
        if vd && !vg {
            excluded += 1;
        }
        if !(vd && vg) {
            continue;
        }
        let e = d - g;
        n += 1;
        abs += e.abs();
        sq += e * e;
        rel += e.abs() / g;
        sq_rel += e * e / g;
        let l = log(d) - log(g);
        sq_log += l * l;
        let ratio = (d / g).max(g / d);
        for (h, lam) in hits.iter_mut().zip(lambdas) {
            if ratio < *lam {
                *h += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::NoValidPixels);
    }
    let nf = n as f64;
    Ok(DepthMetrics {
        mae: abs / nf,
        abs_rel: rel / nf,
        sq_rel: sq_rel / nf,
        rmse: sqrt(sq / nf),
        rmse_log: sqrt(sq_log / nf),
        inlier: lambdas.iter().zip(&hits).map(|(l, h)| (*l, *h as f64 / nf)).collect(),
        count: n,
        excluded,
    })
}

/// Mean absolute error over mutually valid pixels.
pub fn mae(pred: &DepthMap, gt: &DepthMap) -> Result<f64> {
    Ok(depth_metrics(pred, gt, &[])?.mae)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Smallest 2:1 map holding `v`, padded with invalid pixels.
    fn map(mut v: Vec<f64>) -> DepthMap {
        let h = (1..).find(|h| 2 * h * h >= v.len()).unwrap();
        v.resize(2 * h * h, f64::NAN);
        DepthMap::from_depths(2 * h, h, v).unwrap()
    }

    #[test]
    fn identical_maps() {
        let d = map(alloc::vec![1.0, 2.0, 3.5, 0.7]);
        let m = depth_metrics(&d, &d, &DEFAULT_LAMBDAS).unwrap();
        assert_eq!((m.mae, m.abs_rel, m.rmse, m.rmse_log), (0.0, 0.0, 0.0, 0.0));
        assert!(m.inlier.iter().all(|(_, f)| *f == 1.0));
    }

    #[test]
    fn exact_ratio_threshold_is_strict() {
        let gt = map(alloc::vec![1.0, 2.0, 4.0]);
        let d = gt.map(|_, x| x * 1.25);
        let m = depth_metrics(&d, &gt, &DEFAULT_LAMBDAS).unwrap();
        assert_eq!(m.inlier_at(1.25), Some(0.0));
        assert_eq!(m.inlier_at(1.5625), Some(1.0));
        assert!((m.abs_rel - 0.25).abs() < 1e-15);
    }

    #[test]
    fn zero_gt_is_counted_out() {
        let gt = map(alloc::vec![0.0, 2.0]);
        let d = map(alloc::vec![1.0, 2.0]);
        let m = depth_metrics(&d, &gt, &DEFAULT_LAMBDAS).unwrap();
        assert_eq!((m.count, m.excluded), (1, 1));
        assert_eq!((m.mae, m.abs_rel), (0.0, 0.0));
    }

    #[test]
    fn no_overlap_errors() {
        let a = map(alloc::vec![f64::NAN, 1.0]);
        let b = map(alloc::vec![1.0, f64::NAN]);
        assert!(matches!(depth_metrics(&a, &b, &DEFAULT_LAMBDAS), Err(Error::NoValidPixels)));
    }

    proptest! {
        #[test]
        fn rmse_dominates_mae_and_log_is_scale_free(
            pairs in proptest::collection::vec((0.1f64..10.0, 0.1f64..10.0), 1..64),
            s in 0.1f64..10.0,
        ) {
            let d = map(pairs.iter().map(|p| p.0).collect());
            let g = map(pairs.iter().map(|p| p.1).collect());
            let m = depth_metrics(&d, &g, &DEFAULT_LAMBDAS).unwrap();
            prop_assert!(m.rmse >= m.mae - 1e-12);
            let ms = depth_metrics(&d.map(|_, x| x * s), &g.map(|_, x| x * s), &DEFAULT_LAMBDAS).unwrap();
            prop_assert!((m.rmse_log - ms.rmse_log).abs() < 1e-9);
        }

        #[test]
        fn invalid_pixels_do_not_matter(
            vals in proptest::collection::vec(0.1f64..10.0, 4..32),
            junk in 0.1f64..100.0,
        ) {
            let g = map(vals.clone());
            let mut valid = g.mask().to_vec();
            valid[0] = false;
            let a = DepthMap::new(g.width(), g.height(), g.values().to_vec(), valid.clone()).unwrap();
            let mut other = g.values().to_vec();
            other[0] = junk;
            let b = DepthMap::new(g.width(), g.height(), other, valid).unwrap();
            prop_assert_eq!(depth_metrics(&a, &g, &DEFAULT_LAMBDAS).unwrap(), depth_metrics(&b, &g, &DEFAULT_LAMBDAS).unwrap());
        }
    }
}
