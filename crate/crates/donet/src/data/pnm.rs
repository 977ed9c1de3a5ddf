//! Binary netpbm codec: P5 (grayscale) and P6 (RGB), maxval 255 only.
//! Parse errors carry the byte offset where the input stopped making sense.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::shape::Shape;
use crate::tensor::Tensor;
use std::fs;
use std::io::Write;
use std::path::Path;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum PnmKind {
    /// P5, one channel.
    Gray,
    /// P6, three channels.
    Rgb,
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, msg: &str) -> Error {
        Error::Data(format!("pnm parse error at byte {}: {msg}", self.pos))
    }

    fn bump(&mut self) -> Option<u8> {
        let b = self.data.get(self.pos).copied();
        if b.is_some() {
            self.pos += 1;
        }
        b
    }

    fn peek(&self) -> Option<u8> {
        self.data.get(self.pos).copied()
    }

    /// Skip whitespace and '#' comment lines between header tokens.
    fn skip_separators(&mut self) {
        loop {
            match self.peek() {
                Some(b) if b.is_ascii_whitespace() => {
                    self.pos += 1;
                }
                Some(b'#') => {
                    while let Some(b) = self.bump() {
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                _ => return,
            }
        }
    }

    fn ascii_number(&mut self, what: &str) -> Result<usize> {
        self.skip_separators();
        let start = self.pos;
        while matches!(self.peek(), Some(b) if b.is_ascii_digit()) {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.err(&format!("expected {what}")));
        }
        let text = std::str::from_utf8(&self.data[start..self.pos]).unwrap();
        text.parse().map_err(|_| self.err(&format!("{what} out of range")))
    }
}

/// Parse a binary PGM/PPM byte buffer into (kind, width, height, pixels).
pub fn parse(bytes: &[u8]) -> Result<(PnmKind, usize, usize, Vec<u8>)> {
    let mut c = Cursor { data: bytes, pos: 0 };
    let kind = match (c.bump(), c.bump()) {
        (Some(b'P'), Some(b'5')) => PnmKind::Gray,
        (Some(b'P'), Some(b'6')) => PnmKind::Rgb,
        _ => {
            c.pos = 0;
            return Err(c.err("expected magic P5 or P6"));
        }
    };
    let w = c.ascii_number("width")?;
    let h = c.ascii_number("height")?;
    let maxval = c.ascii_number("maxval")?;
    if maxval != 255 {
        return Err(c.err(&format!("unsupported maxval {maxval}, only 255")));
    }
    match c.bump() {
        Some(b) if b.is_ascii_whitespace() => {}
        _ => return Err(c.err("expected single whitespace after maxval")),
    }
    if w == 0 || h == 0 {
        return Err(c.err("zero image extent"));
    }
    let channels = if kind == PnmKind::Gray { 1 } else { 3 };
    let need = w
        .checked_mul(h)
        .and_then(|p| p.checked_mul(channels))
        .ok_or_else(|| c.err("image size overflows"))?;
    let avail = c.data.len() - c.pos;
    if avail < need {
        return Err(Error::Data(format!(
            "pnm parse error at byte {}: truncated payload, need {need} bytes, have {avail}",
            c.pos
        )));
    }
    let pixels = c.data[c.pos..c.pos + need].to_vec();
    Ok((kind, w, h, pixels))
}

/// Load a PGM/PPM file as a batch-1 tensor scaled to [0, 1]; interleaved
/// RGB is reordered to planar (c, h, w).
pub fn load_image<S: Scalar>(path: &Path) -> Result<Tensor<S>> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let (kind, w, h, pixels) = parse(&bytes)?;
    let channels = if kind == PnmKind::Gray { 1 } else { 3 };
    let shape = Shape::new(1, channels, h, w);
    let mut data = vec![S::ZERO; shape.len()];
    let scale = 1.0 / 255.0;
    match kind {
        PnmKind::Gray => {
            for (o, &p) in data.iter_mut().zip(&pixels) {
                *o = S::from_f64(p as f64 * scale);
            }
        }
        PnmKind::Rgb => {
            let hw = h * w;
            for (i, px) in pixels.chunks_exact(3).enumerate() {
                for (c, &v) in px.iter().enumerate() {
                    data[c * hw + i] = S::from_f64(v as f64 * scale);
                }
            }
        }
    }
    Ok(Tensor::from_vec(shape, data))
}

/// Write a single-channel [0,1] tensor as P5, mapping v -> round(v*255).
pub fn save_gray<S: Scalar>(t: &Tensor<S>, path: &Path) -> Result<()> {
    let s = t.shape();
    assert!(s.n == 1 && s.c == 1, "save_gray expects (1,1,h,w), got {s}");
    let mut out = Vec::with_capacity(32 + s.hw());
    write!(out, "P5\n{} {}\n255\n", s.w, s.h)?;
    for &v in t.data() {
        let b = (v.to_f64() * 255.0).round().clamp(0.0, 255.0) as u8;
        out.push(b);
    }
    fs::write(path, out)?;
    Ok(())
}

/// Write a binary mask as P5 with values {0, 255}.
pub fn save_mask<S: Scalar>(mask: &Tensor<S>, path: &Path) -> Result<()> {
    let s = mask.shape();
    assert!(s.n == 1 && s.c == 1, "save_mask expects (1,1,h,w), got {s}");
    let mut out = Vec::with_capacity(32 + s.hw());
    write!(out, "P5\n{} {}\n255\n", s.w, s.h)?;
    for &v in mask.data() {
        debug_assert!(v == S::ZERO || v == S::ONE, "mask must be binary");
        out.push(if v == S::ZERO { 0 } else { 255 });
    }
    fs::write(path, out)?;
    Ok(())
}

/// Write a three-channel [0,1] tensor as P6 (planar to interleaved).
pub fn save_rgb<S: Scalar>(t: &Tensor<S>, path: &Path) -> Result<()> {
    let s = t.shape();
    assert!(s.n == 1 && s.c == 3, "save_rgb expects (1,3,h,w), got {s}");
    let hw = s.hw();
    let mut out = Vec::with_capacity(32 + 3 * hw);
    write!(out, "P6\n{} {}\n255\n", s.w, s.h)?;
    let d = t.data();
    for i in 0..hw {
        for c in 0..3 {
            let b = (d[c * hw + i].to_f64() * 255.0).round().clamp(0.0, 255.0) as u8;
            out.push(b);
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Load a mask saved by [`save_mask`]: nonzero pixels become 1.
pub fn load_mask<S: Scalar>(path: &Path) -> Result<Tensor<S>> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let (kind, w, h, pixels) = parse(&bytes)?;
    if kind != PnmKind::Gray {
        return Err(Error::Data(format!("mask {} must be P5 grayscale", path.display())));
    }
    let shape = Shape::new(1, 1, h, w);
    let data = pixels
        .iter()
        .map(|&p| if p >= 128 { S::ONE } else { S::ZERO })
        .collect();
    Ok(Tensor::from_vec(shape, data))
}
