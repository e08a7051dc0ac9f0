use std::fs;
use std::path::Path;

use super::DataError;

/// 8-bit single-channel image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, DataError> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(DataError::InvalidImage(format!(
                "{width}×{height} image with {} pixels",
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self::new(width, height, vec![value; width * height]).expect("non-empty image")
    }

    /// Rounds and clamps real-valued pixels to `0..=255`.
    pub fn from_f64(width: usize, height: usize, values: &[f64]) -> Result<Self, DataError> {
        let pixels = values.iter().map(|&v| quantize(v)).collect();
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| p as f64).collect()
    }

    /// Mirror about the vertical axis.
    pub fn hflip(&self) -> Self {
        let mut out = Vec::with_capacity(self.pixels.len());
        for row in self.pixels.chunks(self.width) {
            out.extend(row.iter().rev());
        }
        Self {
            width: self.width,
            height: self.height,
            pixels: out,
        }
    }

    /// `w×h` window with top-left corner `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self, DataError> {
        if w == 0 || h == 0 || x0 + w > self.width || y0 + h > self.height {
            return Err(DataError::InvalidImage(format!(
                "crop {w}×{h}+{x0}+{y0} outside {}×{}",
                self.width, self.height
            )));
        }
        let mut out = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            out.extend_from_slice(&self.pixels[y * self.width + x0..y * self.width + x0 + w]);
        }
        Self::new(w, h, out)
    }
}

pub(crate) fn quantize(v: f64) -> u8 {
    if v.is_nan() {
        0
    } else {
        v.round().clamp(0.0, 255.0) as u8
    }
}

/// Encodes as binary PGM (`P5`, maxval 255).
pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn err(&self, message: impl Into<String>) -> DataError {
        DataError::Pgm {
            offset: self.pos,
            message: message.into(),
        }
    }

    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize, DataError> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| DataError::Pgm {
                offset: start,
                message: format!("{what} out of range"),
            })
    }
}

pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage, DataError> {
    let mut h = Header { bytes, pos: 0 };
    if !bytes.starts_with(b"P5") {
        return Err(h.err("missing P5 magic"));
    }
    h.pos = 2;
    if !bytes.get(2).is_some_and(u8::is_ascii_whitespace) {
        return Err(h.err("expected whitespace after magic"));
    }
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval_at = h.pos;
    let maxval = h.number("maxval")?;
    if maxval != 255 {
        return Err(DataError::Pgm {
            offset: maxval_at,
            message: format!("maxval {maxval} unsupported (only 255)"),
        });
    }
    if width == 0 || height == 0 {
        return Err(h.err("zero image dimension"));
    }
    if !bytes.get(h.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(h.err("expected single whitespace before raster"));
    }
    h.pos += 1;
    let need = width
        .checked_mul(height)
        .ok_or_else(|| h.err("image dimensions overflow"))?;
    let raster = &bytes[h.pos..];
    if raster.len() < need {
        return Err(DataError::Pgm {
            offset: bytes.len(),
            message: format!("truncated raster: {} of {need} bytes", raster.len()),
        });
    }
    if raster.len() > need {
        return Err(DataError::Pgm {
            offset: h.pos + need,
            message: format!("{} trailing bytes after raster", raster.len() - need),
        });
    }
    GrayImage::new(width, height, raster.to_vec())
}

pub fn read_pgm(path: &Path) -> Result<GrayImage, DataError> {
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    decode_pgm(&bytes).map_err(|e| match e {
        DataError::Pgm { offset, message } => DataError::Pgm {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}

pub fn write_pgm(img: &GrayImage, path: &Path) -> Result<(), DataError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
    }
    fs::write(path, encode_pgm(img)).map_err(|e| DataError::io(path, e))
}
