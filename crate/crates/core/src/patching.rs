//! Dense low-magnification patching over a tissue mask.
//!
//! A slide is tiled at low magnification with square patches on a fixed
//! stride, patches whose tissue fraction does not exceed the threshold are
//! dropped, and the survivors are mapped to high-magnification coordinates
//! for feature extraction.

use std::fs;
use std::path::Path;

use crate::codec::{write_atomic, Reader};
use crate::error::{Error, Result};

pub const MASK_MAGIC: [u8; 4] = *b"MSK1";

/// Binary tissue/background grid at low magnification, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TissueMask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl TissueMask {
    pub fn new(width: u32, height: u32, bits: Vec<bool>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidInput(format!(
                "mask dimensions must be positive, got {width}x{height}"
            )));
        }
        let expected = width as usize * height as usize;
        if bits.len() != expected {
            return Err(Error::InvalidInput(format!(
                "mask of {width}x{height} needs {expected} bits, got {}",
                bits.len()
            )));
        }
        Ok(TissueMask {
            width,
            height,
            bits,
        })
    }

    pub fn filled(width: u32, height: u32, tissue: bool) -> Result<Self> {
        Self::new(width, height, vec![tissue; width as usize * height as usize])
    }

    /// Builds a mask from a predicate over pixel coordinates.
    pub fn from_fn(width: u32, height: u32, f: impl Fn(u32, u32) -> bool) -> Result<Self> {
        let mut bits = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self::new(width, height, bits)
    }

    /// Luminance-threshold segmentation for raw grayscale images: a pixel is
    /// tissue when it is darker than 0.8 of the brightest pixel. This is a
    /// stand-in for a learned tissue segmenter; stained tissue is darker than
    /// the glass background.
    pub fn from_grayscale(width: u32, height: u32, pixels: &[u8]) -> Result<Self> {
        let max = pixels.iter().copied().max().unwrap_or(0) as f64;
        let cutoff = 0.8 * max;
        Self::new(
            width,
            height,
            pixels.iter().map(|&p| (p as f64) < cutoff).collect(),
        )
    }

    /// Marks a rectangle as tissue, clipped to the mask bounds.
    pub fn fill_rect(&mut self, x: u32, y: u32, w: u32, h: u32) {
        let x1 = (x.saturating_add(w)).min(self.width) as usize;
        let y1 = (y.saturating_add(h)).min(self.height) as usize;
        let (x0, y0) = ((x as usize).min(x1), y as usize);
        let stride = self.width as usize;
        for row in y0..y1 {
            self.bits[row * stride + x0..row * stride + x1].fill(true);
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn tissue_pixels(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.bits.len().div_ceil(8));
        out.extend_from_slice(&MASK_MAGIC);
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        for chunk in self.bits.chunks(8) {
            let byte = chunk
                .iter()
                .enumerate()
                .fold(0u8, |acc, (i, &b)| acc | ((b as u8) << i));
            out.push(byte);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(&MASK_MAGIC)?;
        let width = r.u32("width")?;
        let height = r.u32("height")?;
        if width == 0 || height == 0 {
            return Err(Error::format(4, format!("zero mask dimension {width}x{height}")));
        }
        let n = width as usize * height as usize;
        let packed = r.take(n.div_ceil(8), "mask bits")?;
        r.finish()?;
        let bits = packed
            .iter()
            .flat_map(|&b| (0..8).map(move |i| b >> i & 1 == 1))
            .take(n)
            .collect();
        Self::new(width, height, bits)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// One square patch. Coordinates are pixel origins at `magnification`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchRef {
    pub x: u32,
    pub y: u32,
    pub size: u32,
    pub magnification: f64,
    /// Ordinal in dense extraction order; stable through filtering.
    pub index: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchingConfig {
    pub patch_size: u32,
    pub overlap: f64,
    pub tissue_threshold: f64,
    pub low_mag: f64,
    pub high_mag: f64,
    pub high_patch_size: u32,
}

impl Default for PatchingConfig {
    fn default() -> Self {
        PatchingConfig {
            patch_size: 128,
            overlap: 0.05,
            tissue_threshold: 0.70,
            low_mag: 2.5,
            high_mag: 20.0,
            high_patch_size: 1024,
        }
    }
}

impl PatchingConfig {
    /// Pixel step between adjacent patch origins.
    pub fn stride(&self) -> u32 {
        ((self.patch_size as f64 * (1.0 - self.overlap)).round() as u32).max(1)
    }

    pub fn scale(&self) -> f64 {
        self.high_mag / self.low_mag
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.high_patch_size == 0 {
            return Err(Error::InvalidConfig("patch sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::InvalidConfig(format!(
                "overlap must lie in [0, 1), got {}",
                self.overlap
            )));
        }
        if !(0.0..=1.0).contains(&self.tissue_threshold) {
            return Err(Error::InvalidConfig(format!(
                "tissue threshold must lie in [0, 1], got {}",
                self.tissue_threshold
            )));
        }
        if !(self.low_mag > 0.0 && self.high_mag > 0.0) {
            return Err(Error::InvalidConfig("magnifications must be positive".into()));
        }
        let size_ratio = self.high_patch_size as f64 / self.patch_size as f64;
        if (self.scale() - size_ratio).abs() > 1e-9 * size_ratio {
            return Err(Error::InvalidConfig(format!(
                "magnification ratio {} does not match patch size ratio {}",
                self.scale(),
                size_ratio
            )));
        }
        Ok(())
    }
}

/// Every grid-aligned patch that fits fully inside the mask, row-major.
/// Partial patches at the right and bottom edges are discarded.
pub fn dense_patch(mask: &TissueMask, cfg: &PatchingConfig) -> Vec<PatchRef> {
    let size = cfg.patch_size;
    let stride = cfg.stride();
    if size > mask.width || size > mask.height {
        return Vec::new();
    }
    let origins = |extent: u32| (0..=extent - size).step_by(stride as usize);
    let mut out = Vec::new();
    for y in origins(mask.height) {
        for x in origins(mask.width) {
            out.push(PatchRef {
                x,
                y,
                size,
                magnification: cfg.low_mag,
                index: out.len() as u32,
            });
        }
    }
    out
}

fn check_bounds(mask: &TissueMask, patch: &PatchRef) -> Result<()> {
    let fits = |o: u32, extent: u32| (o as u64 + patch.size as u64) <= extent as u64;
    if patch.size == 0 || !fits(patch.x, mask.width) || !fits(patch.y, mask.height) {
        return Err(Error::OutOfBounds {
            x: patch.x,
            y: patch.y,
            size: patch.size,
            width: mask.width,
            height: mask.height,
        });
    }
    Ok(())
}

/// Fraction of tissue pixels under the patch footprint.
pub fn tissue_percentage(mask: &TissueMask, patch: &PatchRef) -> Result<f64> {
    check_bounds(mask, patch)?;
    let mut count = 0usize;
    for y in patch.y..patch.y + patch.size {
        let row = y as usize * mask.width as usize;
        let start = row + patch.x as usize;
        count += mask.bits[start..start + patch.size as usize]
            .iter()
            .filter(|&&b| b)
            .count();
    }
    Ok(count as f64 / (patch.size as f64 * patch.size as f64))
}

/// Summed-area table over the mask for O(1) footprint counts.
struct TissueIntegral {
    stride: usize,
    sums: Vec<u64>,
}

impl TissueIntegral {
    fn new(mask: &TissueMask) -> Self {
        let w = mask.width as usize;
        let h = mask.height as usize;
        let stride = w + 1;
        let mut sums = vec![0u64; stride * (h + 1)];
        for y in 0..h {
            let mut row = 0u64;
            for x in 0..w {
                row += mask.bits[y * w + x] as u64;
                sums[(y + 1) * stride + x + 1] = sums[y * stride + x + 1] + row;
            }
        }
        TissueIntegral { stride, sums }
    }

    fn count(&self, p: &PatchRef) -> u64 {
        let (x0, y0) = (p.x as usize, p.y as usize);
        let (x1, y1) = (x0 + p.size as usize, y0 + p.size as usize);
        let s = |x: usize, y: usize| self.sums[y * self.stride + x];
        s(x1, y1) + s(x0, y0) - s(x1, y0) - s(x0, y1)
    }
}

/// Keeps patches whose tissue fraction is strictly greater than `threshold`.
/// Out-of-bounds patches are dropped.
pub fn filter_by_tissue(mask: &TissueMask, patches: &[PatchRef], threshold: f64) -> Vec<PatchRef> {
    let integral = TissueIntegral::new(mask);
    patches
        .iter()
        .filter(|p| check_bounds(mask, p).is_ok())
        .filter(|p| {
            let area = p.size as f64 * p.size as f64;
            integral.count(p) as f64 / area > threshold
        })
        .copied()
        .collect()
}

/// Maps a low-magnification patch onto the high-magnification grid.
pub fn to_high_mag(patch: &PatchRef, cfg: &PatchingConfig) -> PatchRef {
    let scale = cfg.scale();
    PatchRef {
        x: (patch.x as f64 * scale).round() as u32,
        y: (patch.y as f64 * scale).round() as u32,
        size: cfg.high_patch_size,
        magnification: cfg.high_mag,
        index: patch.index,
    }
}

/// Dense patching followed by the tissue filter.
pub fn retained_patches(mask: &TissueMask, cfg: &PatchingConfig) -> Result<Vec<PatchRef>> {
    cfg.validate()?;
    Ok(filter_by_tissue(mask, &dense_patch(mask, cfg), cfg.tissue_threshold))
}
