//! Binary netpbm support (P6 PPM in/out, P5 PGM out) and bilinear resize.
//!
//! PPM is the canonical decoded format for the whole pipeline, so image
//! ingestion carries no decoder dependencies; converting camera-native
//! formats is an external preprocessing step.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// 8-bit interleaved RGB image.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// row-major, 3 bytes per pixel
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        RgbImage { width, height, data: vec![0; width * height * 3] }
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

fn fmt_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::ImageFormat { path: path.display().to_string(), msg: msg.into() }
}

/// Pull one whitespace-delimited ASCII token, skipping `#` comments.
fn next_token(bytes: &[u8], pos: &mut usize) -> Option<String> {
    while *pos < bytes.len() {
        let b = bytes[*pos];
        if b == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else if b.is_ascii_whitespace() {
            *pos += 1;
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if *pos > start {
        Some(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    } else {
        None
    }
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path.display().to_string(), e))?;

    let mut pos = 0;
    let magic = next_token(&bytes, &mut pos).ok_or_else(|| fmt_err(path, "empty file"))?;
    if magic != "P6" {
        return Err(fmt_err(path, format!("bad magic {magic:?}, expected \"P6\"")));
    }
    let mut dims = [0usize; 3];
    for (i, name) in ["width", "height", "maxval"].iter().enumerate() {
        let tok = next_token(&bytes, &mut pos)
            .ok_or_else(|| fmt_err(path, format!("missing {name}")))?;
        dims[i] = tok
            .parse()
            .map_err(|_| fmt_err(path, format!("invalid {name} {tok:?}")))?;
    }
    let (width, height, maxval) = (dims[0], dims[1], dims[2]);
    if maxval != 255 {
        return Err(fmt_err(path, format!("unsupported maxval {maxval}, expected 255")));
    }
    if width == 0 || height == 0 {
        return Err(fmt_err(path, "zero dimension"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = width * height * 3;
    if bytes.len() < pos + need {
        return Err(fmt_err(
            path,
            format!("truncated raster: need {need} bytes, have {}", bytes.len().saturating_sub(pos)),
        ));
    }
    Ok(RgbImage { width, height, data: bytes[pos..pos + need].to_vec() })
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    let mut out = Vec::with_capacity(img.data.len() + 32);
    out.extend_from_slice(format!("P6\n{} {}\n255\n", img.width, img.height).as_bytes());
    out.extend_from_slice(&img.data);
    write_atomic(path, &out)
}

/// 8-bit grayscale PGM (P5).
pub fn write_pgm(path: &Path, width: usize, height: usize, gray: &[u8]) -> Result<()> {
    assert_eq!(gray.len(), width * height);
    let mut out = Vec::with_capacity(gray.len() + 32);
    out.extend_from_slice(format!("P5\n{width} {height}\n255\n").as_bytes());
    out.extend_from_slice(gray);
    write_atomic(path, &out)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Bilinear resize to `out_h` x `out_w`, emitting channel-last reals in [0, 1].
///
/// Half-pixel-center mapping (src = (dst + 0.5) * scale - 0.5), so a same-size
/// resize reproduces the input exactly and a clean 2x downscale averages each
/// 2x2 block. Aspect ratio is not preserved; panoramas arrive pre-cropped.
pub fn resize_bilinear(img: &RgbImage, out_h: usize, out_w: usize) -> Vec<f64> {
    let (in_w, in_h) = (img.width, img.height);
    let scale_x = in_w as f64 / out_w as f64;
    let scale_y = in_h as f64 / out_h as f64;
    let mut out = vec![0.0; out_h * out_w * 3];
    for oy in 0..out_h {
        let sy = ((oy as f64 + 0.5) * scale_y - 0.5).clamp(0.0, (in_h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(in_h - 1);
        let fy = sy - y0 as f64;
        for ox in 0..out_w {
            let sx = ((ox as f64 + 0.5) * scale_x - 0.5).clamp(0.0, (in_w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(in_w - 1);
            let fx = sx - x0 as f64;
            let p00 = img.get(x0, y0);
            let p10 = img.get(x1, y0);
            let p01 = img.get(x0, y1);
            let p11 = img.get(x1, y1);
            let base = (oy * out_w + ox) * 3;
            for c in 0..3 {
                let top = p00[c] as f64 * (1.0 - fx) + p10[c] as f64 * fx;
                let bottom = p01[c] as f64 * (1.0 - fx) + p11[c] as f64 * fx;
                out[base + c] = (top * (1.0 - fy) + bottom * fy) / 255.0;
            }
        }
    }
    out
}
