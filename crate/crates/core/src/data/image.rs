//! Binary PPM (P6) images and PGM (P5) class masks, maxval 255.

use std::fs;
use std::path::Path;

use cmunet_tensor::Tensor;

use crate::error::{Error, Result};

/// An RGB image in `[0, 1]` with its class-index mask.
#[derive(Clone, Debug)]
pub struct SegSample {
    pub id: String,
    /// `[3, H, W]`
    pub image: Tensor<f32>,
    /// `H * W` class indices, row-major.
    pub mask: Vec<u8>,
}

impl SegSample {
    pub fn new(id: impl Into<String>, image: Tensor<f32>, mask: Vec<u8>) -> Result<Self> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 || s[1] * s[2] != mask.len() {
            return Err(Error::Invalid(format!("image {:?} does not match mask of {} pixels", s, mask.len())));
        }
        Ok(Self { id: id.into(), image, mask })
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

fn parse_header<'a>(path: &Path, bytes: &'a [u8], magic: &[u8; 2]) -> Result<(usize, usize, &'a [u8])> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::data(path, format!("expected {} header", String::from_utf8_lossy(magic))));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&c| c != b'\n') {
                        pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::data(path, "malformed header"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::data(path, "malformed header"));
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(Error::data(path, format!("unsupported maxval {maxval}")));
    }
    if w == 0 || h == 0 {
        return Err(Error::data(path, "empty image"));
    }
    Ok((w, h, &bytes[pos + 1..]))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, header: String, body: &[u8]) -> Result<()> {
    let mut bytes = header.into_bytes();
    bytes.extend_from_slice(body);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Returns `(width, height, interleaved RGB bytes)`.
pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = read(path)?;
    let (w, h, body) = parse_header(path, &bytes, b"P6")?;
    if body.len() != 3 * w * h {
        return Err(Error::data(path, format!("expected {} pixel bytes, found {}", 3 * w * h, body.len())));
    }
    Ok((w, h, body.to_vec()))
}

pub fn write_ppm(path: &Path, w: usize, h: usize, rgb: &[u8]) -> Result<()> {
    assert_eq!(rgb.len(), 3 * w * h, "PPM body size");
    write(path, format!("P6\n{w} {h}\n255\n"), rgb)
}

/// Returns `(width, height, bytes)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = read(path)?;
    let (w, h, body) = parse_header(path, &bytes, b"P5")?;
    if body.len() != w * h {
        return Err(Error::data(path, format!("expected {} pixel bytes, found {}", w * h, body.len())));
    }
    Ok((w, h, body.to_vec()))
}

pub fn write_pgm(path: &Path, w: usize, h: usize, gray: &[u8]) -> Result<()> {
    assert_eq!(gray.len(), w * h, "PGM body size");
    write(path, format!("P5\n{w} {h}\n255\n"), gray)
}

/// Interleaved RGB bytes to a planar `[3, H, W]` tensor in `[0, 1]`.
pub fn rgb_to_tensor(w: usize, h: usize, rgb: &[u8]) -> Tensor<f32> {
    let mut v = vec![0.0f32; 3 * w * h];
    for (p, px) in rgb.chunks_exact(3).enumerate() {
        for c in 0..3 {
            v[c * w * h + p] = f32::from(px[c]) / 255.0;
        }
    }
    Tensor::new(&[3, h, w], v).expect("image shape")
}

/// Inverse of [`rgb_to_tensor`]; values are clamped and rounded.
pub fn tensor_to_rgb(image: &Tensor<f32>) -> Vec<u8> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let hw = h * w;
    let d = image.data();
    let mut out = Vec::with_capacity(3 * hw);
    for p in 0..hw {
        for c in 0..3 {
            out.push((d[c * hw + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

/// Loads an image/mask pair, checking sizes and that every class is below `num_classes`.
pub fn load_sample(image_path: &Path, mask_path: &Path, num_classes: usize) -> Result<SegSample> {
    let (w, h, rgb) = read_ppm(image_path)?;
    let (mw, mh, mask) = read_pgm(mask_path)?;
    if (mw, mh) != (w, h) {
        return Err(Error::data(mask_path, format!("mask is {mw}x{mh}, image is {w}x{h}")));
    }
    if let Some(&c) = mask.iter().find(|&&c| c as usize >= num_classes) {
        return Err(Error::data(mask_path, format!("class index {c} >= {num_classes}")));
    }
    let id = image_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    SegSample::new(id, rgb_to_tensor(w, h, &rgb), mask)
}

pub fn save_sample(sample: &SegSample, image_path: &Path, mask_path: &Path) -> Result<()> {
    let (h, w) = (sample.height(), sample.width());
    write_ppm(image_path, w, h, &tensor_to_rgb(&sample.image))?;
    write_pgm(mask_path, w, h, &sample.mask)
}
