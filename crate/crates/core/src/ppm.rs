//! Binary PPM (P6) images.

use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::FrameBuffer;

/// Largest accepted width × height, to bound allocations on hostile input.
pub const MAX_PIXELS: usize = 1 << 26;

/// Channel value to 8 bits, rounding half up.
pub fn quantize(v: f64) -> u8 {
    let v = crate::geom::clamp_unit(v);
    (v * 255.0 + 0.5).floor() as u8
}

/// P6 with maxval 255.
pub fn encode(fb: &FrameBuffer) -> Vec<u8> {
    let header = format!("P6\n{} {}\n255\n", fb.width, fb.height);
    let mut out = Vec::with_capacity(header.len() + 3 * fb.pixels());
    out.extend_from_slice(header.as_bytes());
    for px in &fb.rgb {
        out.extend(px.iter().map(|&v| quantize(v)));
    }
    out
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.data.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.data.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' || c == b'\r' {
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

    fn number(&mut self, what: &str) -> Result<u32> {
        self.skip_space();
        let start = self.pos;
        while self.data.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        let digits = std::str::from_utf8(&self.data[start..self.pos]).expect("ascii digits");
        digits
            .parse()
            .map_err(|_| Error::Image(format!("bad or missing {what} in PPM header")))
    }
}

/// Decodes P6 with any maxval in `1..=65535`; values are scaled to `[0,1]`.
pub fn decode(data: &[u8]) -> Result<FrameBuffer> {
    if data.len() < 2 || &data[..2] != b"P6" {
        return Err(Error::Image("not a binary PPM (missing P6 magic)".into()));
    }
    let mut c = Cursor { data, pos: 2 };
    let width = c.number("width")?;
    let height = c.number("height")?;
    let maxval = c.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::Image(format!("empty image {width}x{height}")));
    }
    if !(1..=65535).contains(&maxval) {
        return Err(Error::Image(format!("maxval {maxval} out of range")));
    }
    let pixels = (width as usize).checked_mul(height as usize).filter(|&p| p <= MAX_PIXELS);
    let pixels = pixels.ok_or_else(|| Error::Image(format!("image {width}x{height} too large")))?;
    match data.get(c.pos) {
        Some(b) if b.is_ascii_whitespace() => c.pos += 1,
        _ => return Err(Error::Image("missing separator after PPM header".into())),
    }
    let bytes_per = if maxval > 255 { 2 } else { 1 };
    let body = &data[c.pos..];
    let need = pixels * 3 * bytes_per;
    if body.len() < need {
        return Err(Error::Image(format!("truncated pixel data: {} of {need} bytes", body.len())));
    }
    let scale = maxval as f64;
    let sample = |i: usize| -> f64 {
        let v = if bytes_per == 1 {
            body[i] as u32
        } else {
            u16::from_be_bytes([body[2 * i], body[2 * i + 1]]) as u32
        };
        (v.min(maxval) as f64) / scale
    };
    let rgb = (0..pixels)
        .map(|p| [sample(3 * p), sample(3 * p + 1), sample(3 * p + 2)])
        .collect();
    Ok(FrameBuffer { width, height, rgb })
}

pub fn write(path: &Path, fb: &FrameBuffer) -> Result<()> {
    std::fs::write(path, encode(fb)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<FrameBuffer> {
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&data).map_err(|e| match e {
        Error::Image(m) => Error::Image(format!("{}: {m}", path.display())),
        e => e,
    })
}
