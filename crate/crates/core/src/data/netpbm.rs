//! Binary PGM (`P5`) and PPM (`P6`) with 8-bit samples.

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum NetpbmError {
    #[error("bad magic number (expected P5 or P6)")]
    BadMagic,
    #[error("malformed header: {0}")]
    Header(String),
    #[error("maxval {0} exceeds 255")]
    MaxvalTooLarge(u32),
    #[error("truncated pixel payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
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

    fn number(&mut self, what: &str) -> Result<u32, NetpbmError> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(NetpbmError::Header(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| NetpbmError::Header(format!("{what} out of range")))
    }
}

/// Decodes a binary PGM/PPM into `[C, H, W]` with values `byte / maxval`.
pub fn parse_netpbm(bytes: &[u8]) -> Result<Tensor, NetpbmError> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(NetpbmError::BadMagic),
    };
    let mut hdr = Header { bytes, pos: 2 };
    let width = hdr.number("width")? as usize;
    let height = hdr.number("height")? as usize;
    let maxval = hdr.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(NetpbmError::Header("zero image dimension".into()));
    }
    if maxval == 0 {
        return Err(NetpbmError::Header("maxval must be positive".into()));
    }
    if maxval > 255 {
        return Err(NetpbmError::MaxvalTooLarge(maxval));
    }
    // Exactly one whitespace byte separates maxval from the raster.
    match bytes.get(hdr.pos) {
        Some(b) if b.is_ascii_whitespace() => hdr.pos += 1,
        _ => return Err(NetpbmError::Header("missing whitespace after maxval".into())),
    }
    let expected = width * height * channels;
    let payload = &bytes[hdr.pos..];
    if payload.len() < expected {
        return Err(NetpbmError::Truncated {
            expected,
            found: payload.len(),
        });
    }
    let scale = maxval as f64;
    // Raster is interleaved HWC; the tensor is planar CHW.
    let mut data = vec![0.0; expected];
    for (i, &b) in payload[..expected].iter().enumerate() {
        let c = i % channels;
        let pixel = i / channels;
        data[c * width * height + pixel] = b as f64 / scale;
    }
    Ok(Tensor::new(vec![channels, height, width], data).expect("shape"))
}

/// Encodes a `[C, H, W]` tensor (C = 1 or 3) with maxval 255.
pub fn emit_netpbm(image: &Tensor) -> Vec<u8> {
    let [c, h, w] = *image.shape() else {
        panic!("emit_netpbm needs a [C, H, W] tensor, got {:?}", image.shape());
    };
    assert!(c == 1 || c == 3, "netpbm supports 1 or 3 channels");
    let magic = if c == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.reserve(c * h * w);
    for pixel in 0..h * w {
        for ch in 0..c {
            let v = image.data()[ch * h * w + pixel];
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}
