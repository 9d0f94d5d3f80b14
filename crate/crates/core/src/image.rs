//! RGB images and netpbm IO.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major RGB image with channel values nominally in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut img = Self::new(width, height);
        for px in img.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    pub fn get(&self, row: usize, col: usize) -> [f64; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, row: usize, col: usize, rgb: [f64; 3]) {
        let i = (row * self.width + col) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Channel mean per pixel.
    pub fn gray(&self) -> Vec<f64> {
        self.data.chunks_exact(3).map(|p| (p[0] + p[1] + p[2]) / 3.0).collect()
    }

    /// Copy with every channel clamped to `[0,1]`.
    pub fn clamped(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        }
    }

    /// Binary P6 encoding, 8 bits per channel.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let magic = next_token(bytes, &mut pos)?;
        if magic != "P6" {
            return Err(Error::Parse(format!("expected P6 magic, found `{magic}`")));
        }
        let width = header_number(bytes, &mut pos, "width")?;
        let height = header_number(bytes, &mut pos, "height")?;
        let maxval = header_number(bytes, &mut pos, "maxval")?;
        if maxval != 255 {
            return Err(Error::Parse(format!("unsupported maxval {maxval}")));
        }
        // Exactly one whitespace byte separates the header from the payload.
        pos += 1;
        let n = width * height * 3;
        let payload = bytes
            .get(pos..pos + n)
            .ok_or_else(|| Error::Parse(format!("truncated payload: need {n} bytes")))?;
        Ok(Self {
            width,
            height,
            data: payload.iter().map(|b| *b as f64 / 255.0).collect(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_ppm()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_ppm(&bytes).map_err(|e| match e {
            Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn next_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Parse("unexpected end of header".into()));
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

fn header_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let tok = next_token(bytes, pos)?;
    tok.parse()
        .map_err(|_| Error::Parse(format!("bad {what} `{tok}` in header")))
}

/// Writes values as a 16-bit binary PGM, mapping `[lo, hi]` linearly onto
/// `[1, 65535]`. Non-finite values become 0.
pub fn save_pgm16(path: &Path, values: &[f64], width: usize, height: usize, lo: f64, hi: f64) -> Result<()> {
    assert_eq!(values.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    for v in values {
        let q: u16 = if v.is_finite() {
            (1.0 + ((v - lo) / span).clamp(0.0, 1.0) * 65534.0).round() as u16
        } else {
            0
        };
        out.extend_from_slice(&q.to_be_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Writes a binary mask as an 8-bit PGM (0 or 255).
pub fn save_mask(path: &Path, mask: &[bool], width: usize, height: usize) -> Result<()> {
    assert_eq!(mask.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(mask.iter().map(|m| if *m { 255u8 } else { 0 }));
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads an 8-bit PGM; nonzero pixels are set. Returns `(mask, width, height)`.
pub fn load_mask(path: &Path) -> Result<(Vec<bool>, usize, usize)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0;
    let magic = next_token(&bytes, &mut pos)?;
    if magic != "P5" {
        return Err(Error::Parse(format!("{}: expected P5 magic, found `{magic}`", path.display())));
    }
    let width = header_number(&bytes, &mut pos, "width")?;
    let height = header_number(&bytes, &mut pos, "height")?;
    let maxval = header_number(&bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(Error::Parse(format!("unsupported maxval {maxval}")));
    }
    pos += 1;
    let payload = bytes
        .get(pos..pos + width * height)
        .ok_or_else(|| Error::Parse(format!("{}: truncated mask", path.display())))?;
    Ok((payload.iter().map(|b| *b != 0).collect(), width, height))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_is_bit_exact() {
        let bytes: Vec<u8> = {
            let mut b = b"P6\n3 2\n255\n".to_vec();
            b.extend((0..18).map(|i| (i * 37 % 256) as u8));
            b
        };
        let img = RgbImage::from_ppm(&bytes).unwrap();
        assert_eq!(img.to_ppm(), bytes);
        assert_eq!(RgbImage::from_ppm(&img.to_ppm()).unwrap(), img);
    }

    #[test]
    fn white_pixel() {
        let img = RgbImage::from_ppm(b"P6\n1 1\n255\n\xff\xff\xff").unwrap();
        assert_eq!(img.get(0, 0), [1.0, 1.0, 1.0]);
    }

    #[test]
    fn header_comments_are_skipped() {
        let img = RgbImage::from_ppm(b"P6\n# made by hand\n1 1\n255\n\x00\x80\xff").unwrap();
        assert_eq!(img.width, 1);
    }

    #[test]
    fn malformed_inputs() {
        assert!(RgbImage::from_ppm(b"P3\n1 1\n255\n1 1 1").is_err());
        assert!(RgbImage::from_ppm(b"P6\n2 2\n255\n\x00\x00").is_err());
        assert!(RgbImage::from_ppm(b"P6\n2").is_err());
        assert!(RgbImage::from_ppm(b"P6\n1 1\n65535\n\x00\x00\x00").is_err());
    }
}
