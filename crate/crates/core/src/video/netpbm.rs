//! Binary Netpbm frames: P6 (RGB) and P5 (grey), 8 bits per sample.
//! https://netpbm.sourceforge.net/doc/

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{format_err, shape_err, Result};
use crate::tensor::Tensor;

/// Quantises a value in [0,1] to 8 bits.
pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a `[3,H,W]` frame as P6 or a `[1,H,W]` frame as P5.
pub fn write_frame(path: &Path, frame: &Tensor<f32>) -> Result<()> {
    let (c, h, w) = match *frame.shape() {
        [c @ (1 | 3), h, w] => (c, h, w),
        ref s => return Err(shape_err!("netpbm frames are [1|3,H,W], got {s:?}")),
    };
    let magic = if c == 3 { "P6" } else { "P5" };
    let mut buf = Vec::with_capacity(16 + c * h * w);
    write!(buf, "{magic}\n{w} {h}\n255\n")?;
    let plane = h * w;
    let d = frame.data();
    for i in 0..plane {
        for ch in 0..c {
            buf.push(to_u8(d[ch * plane + i]));
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

struct Header<'a> {
    rest: &'a [u8],
}

impl<'a> Header<'a> {
    /// Next whitespace-delimited ASCII token, skipping `#` comments.
    fn token(&mut self) -> Option<&'a [u8]> {
        loop {
            while let Some((&b, tail)) = self.rest.split_first() {
                if b.is_ascii_whitespace() {
                    self.rest = tail;
                } else {
                    break;
                }
            }
            if self.rest.first() == Some(&b'#') {
                let end = self.rest.iter().position(|&b| b == b'\n').unwrap_or(self.rest.len());
                self.rest = &self.rest[end..];
                continue;
            }
            let end = self.rest.iter().position(|b| b.is_ascii_whitespace()).unwrap_or(self.rest.len());
            if end == 0 {
                return None;
            }
            let (tok, tail) = self.rest.split_at(end);
            self.rest = tail;
            return Some(tok);
        }
    }

    fn number(&mut self, what: &str, name: &str) -> Result<usize> {
        let tok = self.token().ok_or_else(|| format_err!("{name}: missing {what}"))?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format_err!("{name}: bad {what} {:?}", String::from_utf8_lossy(tok)))
    }
}

/// Decodes a P5/P6 buffer into a `[C,H,W]` tensor scaled to [0,1].
pub fn decode(bytes: &[u8], name: &str) -> Result<Tensor<f32>> {
    let mut hdr = Header { rest: bytes };
    let channels = match hdr.token() {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        _ => return Err(format_err!("{name}: not a binary PPM/PGM file")),
    };
    let w = hdr.number("width", name)?;
    let h = hdr.number("height", name)?;
    let maxval = hdr.number("maxval", name)?;
    if w == 0 || h == 0 {
        return Err(format_err!("{name}: empty image {w}x{h}"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(format_err!("{name}: unsupported maxval {maxval}"));
    }
    // exactly one whitespace byte separates the header from the raster
    let raster = hdr.rest.get(1..).ok_or_else(|| format_err!("{name}: truncated header"))?;
    let plane = h * w;
    if raster.len() < channels * plane {
        return Err(format_err!(
            "{name}: raster has {} bytes, expected {}",
            raster.len(),
            channels * plane
        ));
    }
    let scale = 1.0 / maxval as f32;
    let mut data = vec![0.0f32; channels * plane];
    for i in 0..plane {
        for ch in 0..channels {
            data[ch * plane + i] = raster[i * channels + ch] as f32 * scale;
        }
    }
    Tensor::from_vec(&[channels, h, w], data)
}

pub fn read_frame(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path)?;
    decode(&bytes, &path.display().to_string())
}
