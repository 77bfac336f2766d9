//! Binary PPM (`P6`) images.

use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor4};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    /// Interleaved RGB samples, row-major.
    pub data: Vec<u8>,
}

fn err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Ppm {
        offset,
        msg: msg.into(),
    }
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
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

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(err(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| err(start, format!("{what} is too large")))
    }
}

/// Parses an 8-bit binary PPM.
pub fn parse_ppm(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(err(0, "expected magic P6"));
    }
    let mut h = Header { bytes, pos: 2 };
    if !h.bytes.get(2).is_some_and(|b| b.is_ascii_whitespace() || *b == b'#') {
        return Err(err(2, "expected whitespace after magic"));
    }
    let width = h.number("width")?;
    let height = h.number("height")?;
    let max_at = h.pos;
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(err(max_at, "image has zero extent"));
    }
    if !(1..=255).contains(&maxval) {
        return Err(err(max_at, format!("maxval {maxval} is not an 8-bit depth")));
    }
    if !h.bytes.get(h.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(err(h.pos, "expected a single whitespace before pixel data"));
    }
    let start = h.pos + 1;
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| err(0, "image extent overflows"))?;
    let have = bytes.len() - start;
    if have < need {
        return Err(err(bytes.len(), format!("pixel data truncated: {have} of {need} bytes")));
    }
    if have > need {
        return Err(err(start + need, format!("{} trailing bytes", have - need)));
    }
    Ok(Image {
        width,
        height,
        maxval: maxval as u16,
        data: bytes[start..].to_vec(),
    })
}

pub fn write_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n{}\n", img.width, img.height, img.maxval).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

/// Scales samples to `[0, 1]`, then normalises each channel.
pub fn to_tensor(img: &Image, mean: [f32; 3], std: [f32; 3]) -> Tensor4 {
    let max = img.maxval as f32;
    Tensor4::from_fn(Shape4::new(1, img.height, img.width, 3), |_, y, x, c| {
        let v = img.data[(y * img.width + x) * 3 + c] as f32 / max;
        (v - mean[c]) / std[c]
    })
}
