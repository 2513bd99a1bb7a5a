//! Binary PPM (P6, 8-bit) images.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Overlay colour for a foreground class.
pub fn class_color(class_id: usize) -> [u8; 3] {
    const PALETTE: [[u8; 3]; 6] = [[255, 0, 0], [0, 255, 0], [0, 0, 255], [255, 255, 0], [255, 0, 255], [0, 255, 255]];
    PALETTE[class_id.saturating_sub(1) % PALETTE.len()]
}

/// Interleaved 8-bit RGB raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![0; width * height * 3],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// `[3, H, W]` planar tensor scaled to `[0, 1]`.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let plane = self.width * self.height;
        let mut data = vec![T::zero(); 3 * plane];
        for (p, px) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * plane + p] = T::from_f64_lossy(px[c] as f64 / 255.0);
            }
        }
        Tensor::new(vec![3, self.height, self.width], data).expect("planar shape")
    }

    pub fn flipped_horizontally(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(self.width - 1 - x, y, self.get(x, y));
            }
        }
        out
    }

    /// Pixel extent `(x1, y1, x2, y2)` (inclusive) covered by a normalised
    /// box, clamped to the raster. `None` when nothing remains.
    pub fn pixel_rect(&self, bbox: &BBox) -> Option<(usize, usize, usize, usize)> {
        let [x1, y1, x2, y2] = bbox.corners();
        let (w, h) = (self.width as f64, self.height as f64);
        let lo = |v: f64, n: f64| (v * n).round().clamp(0.0, n) as usize;
        let (px1, py1, px2, py2) = (lo(x1, w), lo(y1, h), lo(x2, w), lo(y2, h));
        (px2 > px1 && py2 > py1).then(|| (px1, py1, px2 - 1, py2 - 1))
    }

    /// One-pixel rectangle outline.
    pub fn draw_rect(&mut self, bbox: &BBox, rgb: [u8; 3]) {
        let Some((x1, y1, x2, y2)) = self.pixel_rect(bbox) else {
            return;
        };
        for x in x1..=x2 {
            self.set(x, y1, rgb);
            self.set(x, y2, rgb);
        }
        for y in y1..=y2 {
            self.set(x1, y, rgb);
            self.set(x2, y, rgb);
        }
    }

    pub fn write_ppm<W: Write>(&self, mut out: W) -> Result<()> {
        write!(out, "P6\n{} {}\n255\n", self.width, self.height)?;
        out.write_all(&self.pixels)?;
        Ok(())
    }

    pub fn read_ppm<R: Read>(mut input: R) -> Result<Self> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Dataset("truncated PPM header".into()));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        if fields[0] != "P6" {
            return Err(Error::Dataset(format!("expected P6 magic, found {:?}", fields[0])));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Dataset(format!("bad PPM header field {s:?}")));
        let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if maxval != 255 || width == 0 || height == 0 {
            return Err(Error::Dataset(format!("unsupported PPM {width}x{height} maxval {maxval}")));
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let need = width * height * 3;
        if bytes.len() < pos + need {
            return Err(Error::Dataset(format!("PPM raster has {} bytes, expected {need}", bytes.len().saturating_sub(pos))));
        }
        Ok(Self {
            width,
            height,
            pixels: bytes[pos..pos + need].to_vec(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_ppm(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_ppm(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}
