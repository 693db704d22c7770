//! In-memory RGB images plus binary PPM (P6) and PGM (P5) codecs.
//!
//! PPM/PGM are the interchange formats of this pipeline: single-file,
//! header-plus-raster, and trivially diffable — right for fixtures and for
//! byte-identical determinism checks.

use std::path::Path;

use crate::error::{Error, Result};

/// An 8-bit RGB image, row-major, channels interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// `3 * width * height` bytes: R, G, B per pixel.
    pub pixels: Vec<u8>,
}

impl Image {
    /// Solid-color image.
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut pixels = Vec::with_capacity(3 * width * height);
        for _ in 0..width * height {
            pixels.extend_from_slice(&rgb);
        }
        Self {
            width,
            height,
            pixels,
        }
    }

    /// Wraps an existing pixel buffer, checking its length.
    pub fn from_pixels(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != 3 * width * height {
            return Err(Error::Data(format!(
                "pixel buffer has {} bytes, {}×{} RGB needs {}",
                pixels.len(),
                width,
                height,
                3 * width * height
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = 3 * (y * self.width + x);
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Serializes as binary PPM (P6, maxval 255).
    pub fn to_ppm_bytes(&self) -> Vec<u8> {
        let header = format!("P6\n{} {}\n255\n", self.width, self.height);
        let mut out = header.into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    /// Parses a binary PPM (P6, maxval 255).
    pub fn from_ppm_bytes(bytes: &[u8]) -> Result<Self> {
        let (magic, rest) = next_header_token(bytes)?;
        if magic != b"P6" {
            return Err(Error::Format(
                "not a binary PPM: magic is not P6".into(),
            ));
        }
        let (width, rest) = parse_header_number(rest)?;
        let (height, rest) = parse_header_number(rest)?;
        let (maxval, rest) = parse_header_number(rest)?;
        if maxval != 255 {
            return Err(Error::Format(format!(
                "unsupported PPM maxval {maxval}, expected 255"
            )));
        }
        // Exactly one whitespace byte separates the header from the raster.
        let raster = rest
            .get(1..)
            .ok_or_else(|| Error::Format("PPM truncated before raster".into()))?;
        let need = 3 * width * height;
        if raster.len() < need {
            return Err(Error::Format(format!(
                "PPM raster has {} bytes, {width}×{height} needs {need}",
                raster.len()
            )));
        }
        Image::from_pixels(width, height, raster[..need].to_vec())
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_ppm_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_ppm_bytes(&bytes)
    }
}

/// Writes an 8-bit grayscale raster as binary PGM (P5, maxval 255).
pub fn write_pgm(path: &Path, width: usize, height: usize, gray: &[u8]) -> Result<()> {
    if gray.len() != width * height {
        return Err(Error::Data(format!(
            "gray buffer has {} bytes, {width}×{height} needs {}",
            gray.len(),
            width * height
        )));
    }
    let header = format!("P5\n{width} {height}\n255\n");
    let mut out = header.into_bytes();
    out.extend_from_slice(gray);
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Skips PNM whitespace and `#` comments, then returns the next token and
/// the remaining bytes (starting at the byte after the token).
fn next_header_token(bytes: &[u8]) -> Result<(&[u8], &[u8])> {
    let mut i = 0;
    loop {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        break;
    }
    let start = i;
    while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
        i += 1;
    }
    if start == i {
        return Err(Error::Format("PNM header ended unexpectedly".into()));
    }
    Ok((&bytes[start..i], &bytes[i..]))
}

fn parse_header_number(bytes: &[u8]) -> Result<(usize, &[u8])> {
    let (tok, rest) = next_header_token(bytes)?;
    let s = std::str::from_utf8(tok)
        .map_err(|_| Error::Format("PNM header is not ASCII".into()))?;
    let n = s
        .parse()
        .map_err(|_| Error::Format(format!("bad PNM header number `{s}`")))?;
    Ok((n, rest))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trips_bitwise() {
        let mut img = Image::filled(3, 2, [10, 20, 30]);
        img.set(2, 1, [255, 0, 127]);
        let bytes = img.to_ppm_bytes();
        let back = Image::from_ppm_bytes(&bytes).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn ppm_with_comments_parses() {
        let mut bytes = b"P6\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3, 4, 5, 6]);
        let img = Image::from_ppm_bytes(&bytes).unwrap();
        assert_eq!(img.get(1, 0), [4, 5, 6]);
    }

    #[test]
    fn truncated_ppm_is_rejected() {
        let img = Image::filled(4, 4, [9, 9, 9]);
        let mut bytes = img.to_ppm_bytes();
        bytes.truncate(bytes.len() - 1);
        assert!(Image::from_ppm_bytes(&bytes).is_err());
    }

    #[test]
    fn wrong_magic_is_rejected() {
        assert!(Image::from_ppm_bytes(b"P5\n1 1\n255\n\x00").is_err());
    }
}
