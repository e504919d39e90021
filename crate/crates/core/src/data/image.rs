//! Binary PGM (P5) / PPM (P6) with maxval 255, scaled to `[0, 1]`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn bad(path: &Path, msg: impl Into<String>) -> Error {
    Error::Parse { path: path.to_path_buf(), line: 1, message: msg.into() }
}

/// Decodes a netpbm byte buffer into a `[C, H, W]` tensor.
pub fn decode_netpbm(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(bad(path, "unsupported image magic; expected binary PGM (P5) or PPM (P6)")),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments between header tokens
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(path, "malformed netpbm header"))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(bad(path, format!("only maxval 255 is supported, got {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(bad(path, "image has zero extent"));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad(path, "missing whitespace after netpbm header"));
    }
    pos += 1;
    let pixels = &bytes[pos..];
    let n = width * height * channels;
    if pixels.len() < n {
        return Err(bad(path, format!("expected {n} pixel bytes, found {}", pixels.len())));
    }
    let plane = width * height;
    let mut data = vec![0.0; n];
    for (i, &b) in pixels[..n].iter().enumerate() {
        let (p, c) = (i / channels, i % channels);
        data[c * plane + p] = b as f64 / 255.0;
    }
    Tensor::new(vec![channels, height, width], data)
}

pub fn load_image(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_netpbm(&bytes, path)
}

/// Encodes a `[C, H, W]` tensor (C = 1 or 3) with values in `[0, 1]`.
pub fn encode_netpbm(image: &Tensor) -> Result<Vec<u8>> {
    let [c, h, w] = match image.shape() {
        [c, h, w] if *c == 1 || *c == 3 => [*c, *h, *w],
        s => return Err(Error::shape("encode_netpbm", format!("expected [1|3, H, W], got {s:?}"))),
    };
    let mut out = format!("{}\n{w} {h}\n255\n", if c == 1 { "P5" } else { "P6" }).into_bytes();
    let plane = h * w;
    for p in 0..plane {
        for ch in 0..c {
            let v = image.data()[ch * plane + p].clamp(0.0, 1.0);
            out.push((v * 255.0).round() as u8);
        }
    }
    Ok(out)
}
