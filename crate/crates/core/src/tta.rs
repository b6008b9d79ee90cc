//! Test-time augmentation: deterministic variant plans, raw-buffer image
//! transforms and aggregation of per-variant probabilities.
//!
//! Every plan lists four inputs: the original image, its horizontal and
//! vertical mirrors, and one crop. The crop offset is derived from a 64-bit
//! FNV-1a hash of the sample id followed by the seed's little-endian bytes,
//! so plans are identical across processes and platforms.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ProbabilityVector, NUM_CLASSES};

pub const DEFAULT_TARGET_SIZE: (u32, u32) = (768, 768);
pub const DEFAULT_CROP_FRACTION: f64 = 0.875;
/// Variant id carried by aggregated vectors.
pub const AGGREGATED_VARIANT_ID: &str = "tta-mean";

#[derive(Debug, Error)]
pub enum TtaError {
    #[error("invalid size {width}x{height}")]
    InvalidSize { width: u32, height: u32 },
    #[error("crop fraction {0} is outside (0, 1]")]
    InvalidCropFraction(f64),
    #[error("buffer holds {actual} values, expected {expected}")]
    ShapeMismatch { expected: usize, actual: usize },
    #[error("crop {crop:?} exceeds {width}x{height} source")]
    CropOutOfBounds {
        crop: CropRect,
        width: u32,
        height: u32,
    },
    #[error("crop variant without crop rectangle")]
    MissingCrop,
    #[error("nothing to aggregate")]
    Empty,
    #[error("vectors mix samples or backends: `{0}`")]
    MixedSample(String),
    #[error("variant `{0}` appears more than once")]
    DuplicateVariant(String),
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes.iter().fold(OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(PRIME))
}

fn plan_hash(sample_id: &str, seed: u64) -> u64 {
    let mut bytes = sample_id.as_bytes().to_vec();
    bytes.extend_from_slice(&seed.to_le_bytes());
    fnv1a64(&bytes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariantKind {
    Identity,
    Hflip,
    Vflip,
    Crop,
}

impl VariantKind {
    pub fn as_str(self) -> &'static str {
        match self {
            VariantKind::Identity => "identity",
            VariantKind::Hflip => "hflip",
            VariantKind::Vflip => "vflip",
            VariantKind::Crop => "crop",
        }
    }
}

impl fmt::Display for VariantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Pixel rectangle `[x0, y0, width, height]` inside a source image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[u32; 4]", into = "[u32; 4]")]
pub struct CropRect {
    pub x0: u32,
    pub y0: u32,
    pub width: u32,
    pub height: u32,
}

impl From<[u32; 4]> for CropRect {
    fn from([x0, y0, width, height]: [u32; 4]) -> Self {
        Self {
            x0,
            y0,
            width,
            height,
        }
    }
}

impl From<CropRect> for [u32; 4] {
    fn from(c: CropRect) -> Self {
        [c.x0, c.y0, c.width, c.height]
    }
}

impl CropRect {
    pub fn fits(&self, width: u32, height: u32) -> bool {
        self.width >= 1
            && self.height >= 1
            && u64::from(self.x0) + u64::from(self.width) <= u64::from(width)
            && u64::from(self.y0) + u64::from(self.height) <= u64::from(height)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TtaVariant {
    pub variant_id: VariantKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop: Option<CropRect>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl TtaVariant {
    pub fn plain(kind: VariantKind) -> Self {
        Self {
            variant_id: kind,
            crop: None,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TtaPlan {
    pub sample_id: String,
    #[serde(rename = "source")]
    pub source_size: (u32, u32),
    pub variants: Vec<TtaVariant>,
    #[serde(rename = "target")]
    pub target_size: (u32, u32),
    pub seed: u64,
}

/// Builds the four-variant plan for one sample. The crop is
/// `floor(fraction * W) x floor(fraction * H)` (at least 1x1) at an offset
/// drawn from the plan hash: the low 32 bits pick `x0`, the high 32 bits
/// pick `y0`.
pub fn make_plan(
    sample_id: &str,
    source_size: (u32, u32),
    target_size: (u32, u32),
    crop_fraction: f64,
    seed: u64,
) -> Result<TtaPlan, TtaError> {
    let (w, h) = source_size;
    for (width, height) in [source_size, target_size] {
        if width == 0 || height == 0 {
            return Err(TtaError::InvalidSize { width, height });
        }
    }
    if !(crop_fraction > 0.0 && crop_fraction <= 1.0) {
        return Err(TtaError::InvalidCropFraction(crop_fraction));
    }
    let side = |n: u32| ((crop_fraction * f64::from(n)).floor() as u32).clamp(1, n);
    let (cw, ch) = (side(w), side(h));
    let hash = plan_hash(sample_id, seed);
    let x0 = ((hash & 0xffff_ffff) % u64::from(w - cw + 1)) as u32;
    let y0 = ((hash >> 32) % u64::from(h - ch + 1)) as u32;
    let crop = TtaVariant {
        variant_id: VariantKind::Crop,
        crop: Some(CropRect {
            x0,
            y0,
            width: cw,
            height: ch,
        }),
        seed: Some(seed),
    };
    Ok(TtaPlan {
        sample_id: sample_id.to_string(),
        source_size,
        variants: vec![
            TtaVariant::plain(VariantKind::Identity),
            TtaVariant::plain(VariantKind::Hflip),
            TtaVariant::plain(VariantKind::Vflip),
            crop,
        ],
        target_size,
        seed,
    })
}

/// Row-major interleaved image: `data[(y * width + x) * channels + c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    pub width: u32,
    pub height: u32,
    pub channels: u32,
    pub data: Vec<f32>,
}

impl ImageBuffer {
    pub fn new(width: u32, height: u32, channels: u32, data: Vec<f32>) -> Result<Self, TtaError> {
        let img = Self {
            width,
            height,
            channels,
            data,
        };
        img.check()?;
        Ok(img)
    }

    fn check(&self) -> Result<(), TtaError> {
        let expected = self.width as usize * self.height as usize * self.channels as usize;
        if expected == 0 {
            return Err(TtaError::InvalidSize {
                width: self.width,
                height: self.height,
            });
        }
        if self.data.len() != expected {
            return Err(TtaError::ShapeMismatch {
                expected,
                actual: self.data.len(),
            });
        }
        Ok(())
    }

    fn pixel(&self, x: u32, y: u32) -> &[f32] {
        let c = self.channels as usize;
        let at = (y as usize * self.width as usize + x as usize) * c;
        &self.data[at..at + c]
    }

    fn map_pixels(&self, width: u32, height: u32, source: impl Fn(u32, u32) -> (u32, u32)) -> Self {
        let mut data = Vec::with_capacity(width as usize * height as usize * self.channels as usize);
        for y in 0..height {
            for x in 0..width {
                let (sx, sy) = source(x, y);
                data.extend_from_slice(self.pixel(sx, sy));
            }
        }
        Self {
            width,
            height,
            channels: self.channels,
            data,
        }
    }

    pub fn flip_horizontal(&self) -> Self {
        let w = self.width;
        self.map_pixels(w, self.height, |x, y| (w - 1 - x, y))
    }

    pub fn flip_vertical(&self) -> Self {
        let h = self.height;
        self.map_pixels(self.width, h, |x, y| (x, h - 1 - y))
    }

    pub fn crop(&self, rect: CropRect) -> Result<Self, TtaError> {
        if !rect.fits(self.width, self.height) {
            return Err(TtaError::CropOutOfBounds {
                crop: rect,
                width: self.width,
                height: self.height,
            });
        }
        Ok(self.map_pixels(rect.width, rect.height, |x, y| (rect.x0 + x, rect.y0 + y)))
    }

    /// Bilinear resize with pixel-center alignment and edge clamping.
    pub fn resize_bilinear(&self, width: u32, height: u32) -> Result<Self, TtaError> {
        if width == 0 || height == 0 {
            return Err(TtaError::InvalidSize { width, height });
        }
        if (width, height) == (self.width, self.height) {
            return Ok(self.clone());
        }
        let sample_axis = |dst: u32, dst_len: u32, src_len: u32| {
            let scale = f64::from(src_len) / f64::from(dst_len);
            let pos = ((f64::from(dst) + 0.5) * scale - 0.5).clamp(0.0, f64::from(src_len - 1));
            let lo = pos.floor() as u32;
            let hi = (lo + 1).min(src_len - 1);
            (lo, hi, (pos - f64::from(lo)) as f32)
        };
        let c = self.channels as usize;
        let mut data = Vec::with_capacity(width as usize * height as usize * c);
        for y in 0..height {
            let (y0, y1, fy) = sample_axis(y, height, self.height);
            for x in 0..width {
                let (x0, x1, fx) = sample_axis(x, width, self.width);
                let (p00, p10) = (self.pixel(x0, y0), self.pixel(x1, y0));
                let (p01, p11) = (self.pixel(x0, y1), self.pixel(x1, y1));
                for ch in 0..c {
                    let top = p00[ch] * (1.0 - fx) + p10[ch] * fx;
                    let bottom = p01[ch] * (1.0 - fx) + p11[ch] * fx;
                    data.push(top * (1.0 - fy) + bottom * fy);
                }
            }
        }
        Ok(Self {
            width,
            height,
            channels: self.channels,
            data,
        })
    }
}

/// Applies one variant's geometric transform, then resizes to `target_size`.
pub fn apply_variant(
    pixels: &ImageBuffer,
    variant: &TtaVariant,
    target_size: (u32, u32),
) -> Result<ImageBuffer, TtaError> {
    pixels.check()?;
    let transformed = match variant.variant_id {
        VariantKind::Identity => pixels.clone(),
        VariantKind::Hflip => pixels.flip_horizontal(),
        VariantKind::Vflip => pixels.flip_vertical(),
        VariantKind::Crop => pixels.crop(variant.crop.ok_or(TtaError::MissingCrop)?)?,
    };
    transformed.resize_bilinear(target_size.0, target_size.1)
}

/// Mean of one sample's per-variant vectors from one backend, renormalized
/// to sum to 1. Inputs are summed in variant-id order, so the result does
/// not depend on input order.
pub fn aggregate_tta(vectors: &[ProbabilityVector]) -> Result<ProbabilityVector, TtaError> {
    let first = vectors.first().ok_or(TtaError::Empty)?;
    let mut seen = HashSet::with_capacity(vectors.len());
    for v in vectors {
        if v.sample_id != first.sample_id || v.backend_id != first.backend_id {
            return Err(TtaError::MixedSample(format!(
                "{}/{} vs {}/{}",
                first.sample_id, first.backend_id, v.sample_id, v.backend_id
            )));
        }
        if !seen.insert(v.variant_id.as_str()) {
            return Err(TtaError::DuplicateVariant(v.variant_id.clone()));
        }
    }
    let mut ordered: Vec<&ProbabilityVector> = vectors.iter().collect();
    ordered.sort_by(|a, b| a.variant_id.cmp(&b.variant_id));

    let mut mean = [0.0f64; NUM_CLASSES];
    for v in &ordered {
        for (m, p) in mean.iter_mut().zip(&v.probs) {
            *m += p;
        }
    }
    let n = ordered.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    let total: f64 = mean.iter().sum();
    if total > 0.0 {
        mean.iter_mut().for_each(|m| *m = (*m / total).min(1.0));
    }
    Ok(ProbabilityVector {
        sample_id: first.sample_id.clone(),
        backend_id: first.backend_id.clone(),
        variant_id: AGGREGATED_VARIANT_ID.to_string(),
        probs: mean,
    })
}
