//! 8-bit raster images and their netpbm encodings (binary PGM and PPM).

use std::fs;
use std::path::Path;

use crate::{Error, Result};

/// Row-major 8-bit grayscale image; pixel `(i, j)` is column `i`, row `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image2D {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Image2D {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width.checked_mul(height) != Some(data.len()) {
            return Err(Error::Shape(format!(
                "{width}x{height} image needs {} pixels, got {}",
                width.saturating_mul(height),
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.data[j * self.width + i]
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let mut r = HeaderReader { bytes, pos: 0 };
        if r.token("magic")? != b"P5" {
            return Err(Error::format("magic", "expected P5"));
        }
        let width = r.number("width")?;
        let height = r.number("height")?;
        let maxval = r.number("maxval")?;
        if maxval == 0 || maxval > 255 {
            return Err(Error::format("maxval", format!("unsupported maxval {maxval}")));
        }
        // Exactly one whitespace byte separates the header from the raster.
        match bytes.get(r.pos) {
            Some(b) if b.is_ascii_whitespace() => r.pos += 1,
            _ => return Err(Error::format("header", "missing separator before raster")),
        }
        let len = width
            .checked_mul(height)
            .ok_or_else(|| Error::format("width", "pixel count overflows"))?;
        let raster = &bytes[r.pos..];
        if raster.len() < len {
            return Err(Error::format(
                "raster",
                format!("truncated: expected {len} bytes, got {}", raster.len()),
            ));
        }
        Image2D::new(width, height, raster[..len].to_vec())
    }

    pub fn save_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_pgm())
    }

    pub fn load_pgm(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_pgm(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Interleaved 8-bit RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[u8; 3]>,
}

impl RgbImage {
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().flatten());
        out
    }

    pub fn save_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_ppm())
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderReader<'a> {
    fn skip_blank(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn token(&mut self, field: &'static str) -> Result<&'a [u8]> {
        self.skip_blank();
        let start = self.pos;
        while self
            .bytes
            .get(self.pos)
            .is_some_and(|b| !b.is_ascii_whitespace() && *b != b'#')
        {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::format(field, "unexpected end of header"));
        }
        Ok(&self.bytes[start..self.pos])
    }

    fn number(&mut self, field: &'static str) -> Result<usize> {
        let tok = self.token(field)?;
        std::str::from_utf8(tok)
            .ok()
            .filter(|s| s.len() <= 9 && s.bytes().all(|b| b.is_ascii_digit()))
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(field, format!("not a number: {:?}", String::from_utf8_lossy(tok))))
    }
}
