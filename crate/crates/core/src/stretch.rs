//! Vertical panorama stretching: the image seen by the camera when the scene
//! is scaled by `k` horizontally, `(x, y, z) → (k·x, k·y, z)`.
//!
//! A destination row at colatitude `ψ` samples the source row at
//! `atan2(sin ψ, k·cos ψ)`. Depth is multiplied by `κ` of the *source*
//! colatitude, since `‖(k·x, k·y, z)‖ = κ(ψ_src)·‖(x, y, z)‖` holds for the
//! point seen along the source ray.

use alloc::vec::Vec;
use core::f64::consts::PI;

use libm::{atan2, cos, floor, sin, sqrt};

use crate::error::{domain, Result};
use crate::geometry::{colatitude, DepthMap, Mat3, Panorama};

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct StretchFactor(f64);

impl StretchFactor {
    pub fn new(k: f64) -> Result<Self> {
        if !(k.is_finite() && k > 0.0) {
            return Err(domain("stretch factor must be finite and positive"));
        }
        Ok(StretchFactor(k))
    }
    pub fn get(self) -> f64 {
        self.0
    }
    pub fn inverse(self) -> Self {
        StretchFactor(1.0 / self.0)
    }
}

/// `κ = sqrt(k² sin²ψ + cos²ψ)` for colatitude `ψ`.
pub fn kappa_at(psi: f64, k: StretchFactor) -> f64 {
    let (s, c) = (sin(psi), cos(psi));
    let k = k.0;
    sqrt(k * k * s * s + c * c)
}

/// `κ` at continuous row `v` (pixel-center colatitude `π(v+0.5)/H`).
pub fn kappa(v: f64, k: StretchFactor, height: usize) -> Result<f64> {
    if !(v >= 0.0 && v < height as f64) {
        return Err(domain("row out of range"));
    }
    Ok(kappa_at(colatitude(v, height), k))
}

/// Source colatitude sampled by destination colatitude `psi`.
pub fn source_colatitude(psi: f64, k: StretchFactor) -> f64 {
    atan2(sin(psi), k.0 * cos(psi))
}

#[derive(Clone, Copy)]
struct RowTap {
    r0: usize,
    r1: usize,
    w: f64,
    kappa: f64,
}

fn row_taps(height: usize, k: StretchFactor) -> Vec<RowTap> {
    let h = height as f64;
    (0..height)
        .map(|v| {
            let psi_s = source_colatitude(colatitude(v as f64, height), k);
            let vs = (psi_s * h / PI - 0.5).clamp(0.0, h - 1.0);
            let mut r0 = floor(vs);
            let mut w = vs - r0;
            // Rows that map onto a source center within rounding noise sample it exactly.
            if w < 1e-9 {
                w = 0.0;
            } else if w > 1.0 - 1e-9 {
                r0 += 1.0;
                w = 0.0;
            }
            let r0 = (r0 as usize).min(height - 1);
            RowTap { r0, r1: (r0 + 1).min(height - 1), w, kappa: kappa_at(psi_s, k) }
        })
        .collect()
}

/// Linear map relating stretched camera coordinates to the original ones:
/// `x_orig = a · x_stretched`.
pub fn capture_map(k: StretchFactor) -> Mat3 {
    Mat3::from_diagonal(&nalgebra::Vector3::new(1.0 / k.0, 1.0 / k.0, 1.0))
}

pub fn stretch_image(image: &Panorama, k: StretchFactor) -> Panorama {
    let capture = image.capture().map(|c| c.then_linear(&capture_map(k)));
    if k.0 == 1.0 {
        return image.clone();
    }
    let (w, h) = (image.width(), image.height());
    let src = image.pixels();
    let mut out = Vec::with_capacity(w * h);
    for tap in row_taps(h, k) {
        for u in 0..w {
            let a = src[tap.r0 * w + u];
            if tap.w == 0.0 {
                out.push(a);
                continue;
            }
            let b = src[tap.r1 * w + u];
            let mut px = [0.0f32; 3];
            for c in 0..3 {
                let (a, b) = (f64::from(a[c]), f64::from(b[c]));
                px[c] = (a + (b - a) * tap.w) as f32;
            }
            out.push(px);
        }
    }
    Panorama::from_clamped(w, h, out).with_capture(capture)
}

pub fn stretch_depth(depth: &DepthMap, k: StretchFactor) -> DepthMap {
    if k.0 == 1.0 {
        return depth.clone();
    }
    let (w, h) = (depth.width(), depth.height());
    let vals = depth.values();
    let mask = depth.mask();
    let mut out = Vec::with_capacity(w * h);
    for tap in row_taps(h, k) {
        for u in 0..w {
            let (i0, i1) = (tap.r0 * w + u, tap.r1 * w + u);
            let mut num = 0.0;
            let mut den = 0.0;
            if mask[i0] && tap.w < 1.0 {
                num += (1.0 - tap.w) * vals[i0];
                den += 1.0 - tap.w;
            }
            if mask[i1] && tap.w > 0.0 {
                num += tap.w * vals[i1];
                den += tap.w;
            }
            out.push(if den > 0.0 { tap.kappa * (num / den) } else { f64::NAN });
        }
    }
    DepthMap::from_raw(w, h, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn k(x: f64) -> StretchFactor {
        StretchFactor::new(x).unwrap()
    }

    #[test]
    fn kappa_examples() {
        assert_eq!(kappa_at(PI / 2.0, k(0.8)), 0.8);
        assert_eq!(kappa_at(0.0, k(0.8)), 1.0);
        assert!((kappa_at(PI / 4.0, k(0.8)) - 0.82f64.sqrt()).abs() < 1e-12);
        assert!(kappa(-1.0, k(1.0), 8).is_err());
        assert!(StretchFactor::new(0.0).is_err());
        assert!(StretchFactor::new(f64::NAN).is_err());
    }

    #[test]
    fn unit_factor_is_identity() {
        let d = DepthMap::from_depths(16, 8, (0..128).map(|i| 1.0 + i as f64 * 0.01).collect()).unwrap();
        assert_eq!(stretch_depth(&d, k(1.0)), d);
        let img = Panorama::new(16, 8, (0..128).map(|i| [i as f32 / 128.0, 0.5, 0.0]).collect()).unwrap();
        assert_eq!(stretch_image(&img, k(1.0)), img);
    }

    #[test]
    fn equator_constant_depth_scales_exactly() {
        let h = 32;
        let d = DepthMap::constant(2 * h, h, 2.0).unwrap();
        let s = stretch_depth(&d, k(0.8));
        // Rows straddle the equator; the half-pixel offset means no row sits exactly on it,
        // so check the row nearest the equator against the analytic factor.
        let v = h / 2;
        let psi = colatitude(v as f64, h);
        let expect = 2.0 * kappa_at(source_colatitude(psi, k(0.8)), k(0.8));
        assert!((s.get(0, v).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn equator_row_maps_to_itself() {
        // Odd heights place a pixel center exactly on the equator.
        let h = 33;
        let psi = colatitude(16.0, h);
        assert!((psi - PI / 2.0).abs() < 1e-15);
        let taps = row_taps(h, k(0.8));
        assert_eq!((taps[16].r0, taps[16].w), (16, 0.0));
        let d = DepthMap::from_raw(2 * h, h, vec![2.0; 2 * h * h]);
        let s = stretch_depth(&d, k(0.8));
        assert_eq!(s.get(3, 16), Some(1.6));
    }

    #[test]
    fn invalid_pixels_do_not_leak() {
        let h = 16;
        let mut vals = vec![1.0; 2 * h * h];
        for u in 0..2 * h {
            vals[5 * 2 * h + u] = f64::NAN;
            vals[6 * 2 * h + u] = f64::NAN;
        }
        let d = DepthMap::from_raw(2 * h, h, vals);
        let s = stretch_depth(&d, k(1.3));
        for (i, ok) in s.mask().iter().enumerate() {
            if *ok {
                assert!(s.values()[i].is_finite());
            }
        }
        assert!(s.valid_count() < 2 * h * h);
        assert!(s.valid_count() > 2 * h * (h - 6));
    }

    proptest! {
        #[test]
        fn kappa_bounded_between_one_and_k(psi in 0.0f64..PI, kk in 0.1f64..5.0) {
            let v = kappa_at(psi, k(kk));
            prop_assert!(v >= kk.min(1.0) - 1e-12 && v <= kk.max(1.0) + 1e-12);
            prop_assert!((kappa_at(psi, k(1.0)) - 1.0).abs() < 1e-15);
        }

        #[test]
        fn kappa_round_trip_is_reciprocal(psi in 0.01f64..3.13, kk in 0.2f64..5.0) {
            let ps = source_colatitude(psi, k(kk));
            prop_assert!((kappa_at(psi, k(1.0 / kk)) * kappa_at(ps, k(kk)) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn mean_depth_monotone_in_k(a in 0.5f64..2.0, b in 0.5f64..2.0, seed in 0u64..1000) {
            let h = 16;
            let vals: Vec<f64> = (0..2 * h * h)
                .map(|i| 1.0 + (((i % (2 * h)) as u64 * 2654435761 + seed) % 97) as f64 / 50.0)
                .collect();
            let d = DepthMap::from_raw(2 * h, h, vals);
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assume!(hi - lo > 1e-3);
            let m_lo = stretch_depth(&d, k(lo)).mean().unwrap();
            let m_hi = stretch_depth(&d, k(hi)).mean().unwrap();
            prop_assert!(m_lo < m_hi);
        }
    }
}
