//! On-disk formats: PDR1 depth rasters, 8-bit PNG panoramas, pose and
//! capture sidecars, and visualization PNGs.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use image::codecs::png::{CompressionType, FilterType, PngEncoder};
use image::{ExtendedColorType, ImageEncoder};
use panocal_core::geometry::{Mat3, Vec3};
use panocal_core::mapping::{Cell, OccGrid};
use panocal_core::scene::Scene;
use panocal_core::{Capture, DepthMap, Panorama, Pose};
use serde::{Deserialize, Serialize};

pub const PDR_MAGIC: &[u8; 4] = b"PDR1";

pub fn encode_pdr(depth: &DepthMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * depth.values().len());
    out.extend_from_slice(PDR_MAGIC);
    out.extend_from_slice(&(depth.width() as u32).to_le_bytes());
    out.extend_from_slice(&(depth.height() as u32).to_le_bytes());
    for (d, ok) in depth.values().iter().zip(depth.mask()) {
        let x = if *ok { *d as f32 } else { f32::NAN };
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode_pdr(bytes: &[u8]) -> Result<DepthMap> {
    ensure!(bytes.len() >= 12 && &bytes[..4] == PDR_MAGIC, "not a PDR1 raster");
    let w = u32::from_le_bytes(bytes[4..8].try_into()?) as usize;
    let h = u32::from_le_bytes(bytes[8..12].try_into()?) as usize;
    let body = &bytes[12..];
    ensure!(body.len() == 4 * w * h, "PDR1 body holds {} bytes, expected {}", body.len(), 4 * w * h);
    let depth = body.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("chunk of 4")))).collect();
    Ok(DepthMap::from_depths(w, h, depth)?)
}

pub fn read_pdr(path: &Path) -> Result<DepthMap> {
    decode_pdr(&fs::read(path).with_context(|| format!("reading {}", path.display()))?)
        .with_context(|| format!("decoding {}", path.display()))
}

fn write_png_rgb(path: &Path, w: usize, h: usize, rgb: &[u8], color: ExtendedColorType) -> Result<()> {
    fs::write(path, png_bytes(w, h, rgb, color)?).with_context(|| format!("writing {}", path.display()))
}

/// PNG with pinned encoder settings so equal pixels give equal bytes.
fn png_bytes(w: usize, h: usize, data: &[u8], color: ExtendedColorType) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    PngEncoder::new_with_quality(&mut out, CompressionType::Default, FilterType::Adaptive).write_image(
        data,
        w as u32,
        h as u32,
        color,
    )?;
    Ok(out)
}

pub fn to_u8(c: f32) -> u8 {
    (c.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_png(image: &Panorama) -> Result<Vec<u8>> {
    let rgb: Vec<u8> = image.pixels().iter().flat_map(|p| p.map(to_u8)).collect();
    png_bytes(image.width(), image.height(), &rgb, ExtendedColorType::Rgb8)
}

pub fn decode_png(bytes: &[u8]) -> Result<Panorama> {
    let img = image::ImageReader::with_format(Cursor::new(bytes), image::ImageFormat::Png).decode()?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let rgb = img.pixels().map(|p| p.0.map(|c| f32::from(c) / 255.0)).collect();
    Ok(Panorama::new(w, h, rgb)?)
}

pub fn write_png(path: &Path, image: &Panorama) -> Result<()> {
    fs::write(path, encode_png(image)?).with_context(|| format!("writing {}", path.display()))
}

/// Inverse-depth grayscale (near is bright); invalid pixels are black.
pub fn write_depth_png(path: &Path, depth: &DepthMap) -> Result<()> {
    let max = depth.values().iter().zip(depth.mask()).filter(|(_, ok)| **ok).map(|(d, _)| *d).fold(0.0, f64::max);
    let min = depth.values().iter().zip(depth.mask()).filter(|(_, ok)| **ok).map(|(d, _)| *d).fold(f64::INFINITY, f64::min);
    let gray: Vec<u8> = depth
        .values()
        .iter()
        .zip(depth.mask())
        .map(|(d, ok)| {
            if !ok || !(max > 0.0) {
                return 0;
            }
            let t = if max > min { (1.0 / d - 1.0 / max) / (1.0 / min - 1.0 / max) } else { 1.0 };
            (32.0 + 223.0 * t).round() as u8
        })
        .collect();
    write_png_rgb(path, depth.width(), depth.height(), &gray, ExtendedColorType::L8)
}

/// Unknown gray, free white, occupied black; north (+y) up.
pub fn write_grid_png(path: &Path, grid: &OccGrid) -> Result<()> {
    let (w, h) = (grid.width().max(1), grid.height().max(1));
    let mut px = vec![128u8; w * h];
    for row in 0..grid.height() {
        for col in 0..grid.width() {
            px[(grid.height() - 1 - row) * w + col] = match grid.cells()[row * grid.width() + col] {
                Cell::Unknown => 128,
                Cell::Free => 255,
                Cell::Occupied => 0,
            };
        }
    }
    write_png_rgb(path, w, h, &px, ExtendedColorType::L8)
}

/// `{"rotation": [9 row-major], "translation": [3]}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseJson {
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

impl From<&Pose> for PoseJson {
    fn from(p: &Pose) -> Self {
        PoseJson { rotation: row_major(&p.rotation), translation: [p.translation.x, p.translation.y, p.translation.z] }
    }
}

impl PoseJson {
    pub fn to_pose(&self) -> Result<Pose> {
        Ok(Pose::new(Mat3::from_row_slice(&self.rotation), Vec3::from_row_slice(&self.translation))?)
    }
}

fn row_major(m: &Mat3) -> [f64; 9] {
    core::array::from_fn(|i| m[(i / 3, i % 3)])
}

/// Capture sidecar for images whose camera is not a rigid pose, such as
/// stretched or mirrored augmentations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaptureJson {
    pub linear: [f64; 9],
    pub center: [f64; 3],
}

impl From<&Capture> for CaptureJson {
    fn from(c: &Capture) -> Self {
        CaptureJson { linear: row_major(&c.linear), center: [c.center.x, c.center.y, c.center.z] }
    }
}

pub fn pose_sidecar(image: &Path) -> PathBuf {
    image.with_extension("pose.json")
}

pub fn capture_sidecar(image: &Path) -> PathBuf {
    image.with_extension("capture.json")
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_pose(image: &Path) -> Result<Option<Pose>> {
    let p = pose_sidecar(image);
    if !p.exists() {
        return Ok(None);
    }
    Ok(Some(read_json::<PoseJson>(&p)?.to_pose()?))
}

/// Loads a PNG and, when `scene` is given, tags it with the capture from
/// its sidecar (`.capture.json` first, then `.pose.json`). Mock predictors
/// need the tag to look up ground truth.
pub fn load_image(path: &Path, scene: Option<&Scene>) -> Result<Panorama> {
    let img = decode_png(&fs::read(path).with_context(|| format!("reading {}", path.display()))?)
        .with_context(|| format!("decoding {}", path.display()))?;
    let Some(scene) = scene else { return Ok(img) };
    let cap = capture_sidecar(path);
    let capture = if cap.exists() {
        let c: CaptureJson = read_json(&cap)?;
        Some(Capture { scene: scene.id(), linear: Mat3::from_row_slice(&c.linear), center: Vec3::from_row_slice(&c.center) })
    } else {
        read_pose(path)?.map(|p| Capture::from_pose(scene.id(), &p))
    };
    Ok(img.with_capture(capture))
}

/// Writes an image with its capture sidecar, when it has one.
pub fn save_image(path: &Path, image: &Panorama) -> Result<()> {
    write_png(path, image)?;
    if let Some(c) = image.capture() {
        write_json(&capture_sidecar(path), &CaptureJson::from(c))?;
    }
    Ok(())
}

pub fn parse_floats<const N: usize>(text: &str) -> Result<[f64; N]> {
    let v: Vec<f64> = text.split(',').map(|s| s.trim().parse::<f64>()).collect::<std::result::Result<_, _>>()?;
    if v.len() != N {
        bail!("expected {N} comma-separated numbers, got {}", v.len());
    }
    Ok(core::array::from_fn(|i| v[i]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pdr_round_trip_keeps_invalid() {
        let d = DepthMap::from_depths(4, 2, vec![1.0, 2.5, f64::NAN, 3.25, 0.5, 7.0, 1.0, f64::NAN]).unwrap();
        let bytes = encode_pdr(&d);
        assert_eq!(&bytes[..4], b"PDR1");
        assert_eq!(bytes.len(), 12 + 32);
        assert_eq!(decode_pdr(&bytes).unwrap(), d);
    }

    #[test]
    fn pdr_rejects_truncation() {
        let d = DepthMap::constant(4, 2, 1.0).unwrap();
        let bytes = encode_pdr(&d);
        assert!(decode_pdr(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_pdr(b"PDR2\0\0\0\0\0\0\0\0").is_err());
    }

    #[test]
    fn png_round_trip_is_exact_on_8bit_values() {
        let rgb: Vec<[f32; 3]> = (0..32).map(|i| [i as f32 / 255.0, (255 - i) as f32 / 255.0, 0.5]).collect();
        let img = Panorama::new(8, 4, rgb).unwrap();
        let back = decode_png(&encode_png(&img).unwrap()).unwrap();
        assert_eq!(encode_png(&back).unwrap(), encode_png(&img).unwrap());
    }

    #[test]
    fn pose_json_round_trip() {
        let p = Pose::yaw(0.7, Vec3::new(1.0, -2.0, 0.5));
        let j = PoseJson::from(&p);
        let text = serde_json::to_string(&j).unwrap();
        let back: PoseJson = serde_json::from_str(&text).unwrap();
        assert_eq!(back.to_pose().unwrap(), p);
    }
}
