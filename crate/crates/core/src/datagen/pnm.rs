//! Binary PPM (P6) and PGM (P5) images, maxval ≤ 255.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{read_file, write_atomic};
use crate::tensor::Tensor;

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 2 {
        return Err(Error::Format("empty image file".into()));
    }
    let magic = [bytes[0], bytes[1]];
    if &magic != b"P6" && &magic != b"P5" {
        return Err(Error::Format(format!(
            "unsupported image magic {:?}; expected P5 or P6",
            String::from_utf8_lossy(&magic)
        )));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // Whitespace and '#' comments separate header tokens.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(Error::Format("truncated image header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("malformed image header".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("header value out of range".into()))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Format("missing whitespace after image header".into()));
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 || maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!(
            "unsupported image geometry {width}×{height}, maxval {maxval}"
        )));
    }
    Ok(Header {
        magic,
        width,
        height,
        maxval,
        data_start: pos + 1,
    })
}

/// Decodes to `H×W×3` in `[0, 1]`; gray images are replicated to 3 channels.
pub fn decode_pnm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let h = parse_header(bytes)?;
    let channels = if &h.magic == b"P6" { 3 } else { 1 };
    let n = h.width * h.height * channels;
    let raw = bytes
        .get(h.data_start..h.data_start + n)
        .ok_or_else(|| Error::Format(format!("truncated pixel data: need {n} bytes")))?;
    let scale = 1.0 / h.maxval as f32;
    let mut data = Vec::with_capacity(h.width * h.height * 3);
    for px in raw.chunks_exact(channels) {
        if channels == 3 {
            data.extend(px.iter().map(|&b| (b as f32 * scale).min(1.0)));
        } else {
            let v = (px[0] as f32 * scale).min(1.0);
            data.extend([v, v, v]);
        }
    }
    Tensor::new([h.height, h.width, 3], data)
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes an `H×W×3` image in `[0, 1]` as P6.
pub fn encode_ppm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::shape("encode_ppm", format!("expected H×W×3, got {s:?}")));
    }
    let mut out = format!("P6\n{} {}\n255\n", s[1], s[0]).into_bytes();
    out.extend(image.data().iter().map(|&v| quantize(v)));
    Ok(out)
}

/// Encodes an `H×W` map in `[0, 1]` as 8-bit P5, scaled linearly to `[0, 255]`.
pub fn encode_pgm(map: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = map.shape();
    if s.len() != 2 {
        return Err(Error::shape("encode_pgm", format!("expected H×W, got {s:?}")));
    }
    let mut out = format!("P5\n{} {}\n255\n", s[1], s[0]).into_bytes();
    out.extend(map.data().iter().map(|&v| quantize(v)));
    Ok(out)
}

pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    decode_pnm(&read_file(path)?).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn save_ppm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    write_atomic(path, &encode_ppm(image)?)
}

pub fn save_pgm(path: &Path, map: &Tensor<f32>) -> Result<()> {
    write_atomic(path, &encode_pgm(map)?)
}
