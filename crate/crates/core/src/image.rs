//! Single-channel float projection images and PFM file I/O.

use crate::error::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

/// What an image is within the supervision pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageRole {
    /// Low-resolution observation from the detector.
    LrObs,
    /// Low-resolution observation upsampled to HR.
    LrUp,
    /// Super-resolution pseudo-label.
    Sr,
    /// Confidence-blended teaching image.
    Teach,
    /// Splatted render at HR.
    RenderHr,
    /// Splatted render downsampled to LR.
    RenderLr,
}

/// Single-channel f32 image in attenuation line-integral units.
/// Pixels are row-major with the top row first; pixel (x, y) has its
/// center at continuous coordinates (x + 0.5, y + 0.5).
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
    pub role: ImageRole,
}

impl ProjectionImage {
    pub fn zeros(width: usize, height: usize, role: ImageRole) -> Self {
        ProjectionImage {
            width,
            height,
            pixels: vec![0.0; width * height],
            role,
        }
    }

    pub fn from_pixels(width: usize, height: usize, pixels: Vec<f32>, role: ImageRole) -> Self {
        assert_eq!(pixels.len(), width * height);
        ProjectionImage {
            width,
            height,
            pixels,
            role,
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, x: usize, y: usize) -> &mut f32 {
        &mut self.pixels[y * self.width + x]
    }

    /// Checks that `other` has the same dimensions.
    pub fn same_dims(&self, other: &ProjectionImage) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::DimensionMismatch {
                expected: (self.width, self.height),
                got: (other.width, other.height),
            });
        }
        Ok(())
    }
}

/// Writes a single-channel PFM: header `Pf\n{width} {height}\n-1.0\n`,
/// then little-endian f32 rows bottom-to-top.
pub fn write_pfm(path: &Path, img: &ProjectionImage) -> Result<()> {
    let mut buf = Vec::with_capacity(32 + img.pixels.len() * 4);
    buf.extend_from_slice(format!("Pf\n{} {}\n-1.0\n", img.width, img.height).as_bytes());
    for y in (0..img.height).rev() {
        for x in 0..img.width {
            buf.extend_from_slice(&img.at(x, y).to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads a single-channel PFM written by [`write_pfm`] (or any grayscale
/// PFM with a negative little-endian scale).
pub fn read_pfm(path: &Path, role: ImageRole) -> Result<ProjectionImage> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;

    let bad = |msg: &str| Error::Format(format!("{}: {}", path.display(), msg));

    // Header is four whitespace-separated tokens: magic, width, height, scale.
    // Binary data starts right after the single whitespace following the scale.
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format(format!("{}: truncated header", path.display())));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };

    let magic = token(&bytes)?;
    if magic != "Pf" {
        return Err(bad("not a single-channel PFM (magic != Pf)"));
    }
    let width: usize = token(&bytes)?.parse().map_err(|_| bad("bad width"))?;
    let height: usize = token(&bytes)?.parse().map_err(|_| bad("bad height"))?;
    let scale: f64 = token(&bytes)?.parse().map_err(|_| bad("bad scale"))?;
    if scale >= 0.0 {
        return Err(bad("big-endian PFM not supported"));
    }
    pos += 1; // the single whitespace after the scale token

    let data = &bytes[pos..];
    if data.len() != width * height * 4 {
        return Err(bad("pixel payload size mismatch"));
    }
    let mut pixels = vec![0.0f32; width * height];
    for (i, chunk) in data.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        let y = height - 1 - i / width;
        let x = i % width;
        pixels[y * width + x] = v;
    }
    Ok(ProjectionImage::from_pixels(width, height, pixels, role))
}
