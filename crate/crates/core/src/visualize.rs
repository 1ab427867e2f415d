//! Attention-map export: upsampling to input resolution, min-max
//! quantization and binary PGM (P5) images.

use crate::data::Rect;
use crate::error::{invalid, AbnError, Result};

/// Nearest-neighbour resize: output pixel `(y, x)` copies source pixel
/// `(y*h/out_h, x*w/out_w)`.
pub fn upsample_nearest(map: &[f64], (h, w): (usize, usize), (out_h, out_w): (usize, usize)) -> Vec<f64> {
    assert_eq!(map.len(), h * w, "map size");
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let sy = y * h / out_h;
        for x in 0..out_w {
            out.push(map[sy * w + x * w / out_w]);
        }
    }
    out
}

/// Bilinear resize sampling at pixel centres, edges clamped.
pub fn upsample_bilinear(map: &[f64], (h, w): (usize, usize), (out_h, out_w): (usize, usize)) -> Vec<f64> {
    assert_eq!(map.len(), h * w, "map size");
    let coord = |i: usize, n_in: usize, n_out: usize| {
        let s = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = s.floor() as usize;
        (lo, (lo + 1).min(n_in - 1), s - lo as f64)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let (y0, y1, fy) = coord(y, h, out_h);
        for x in 0..out_w {
            let (x0, x1, fx) = coord(x, w, out_w);
            let top = map[y0 * w + x0] * (1.0 - fx) + map[y0 * w + x1] * fx;
            let bottom = map[y1 * w + x0] * (1.0 - fx) + map[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Min-max scaling to `0..=255`; a constant map renders as all zeros.
pub fn quantize_min_max(values: &[f64]) -> Vec<u8> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi > lo) {
        return vec![0; values.len()];
    }
    values
        .iter()
        .map(|&v| ((v - lo) / (hi - lo) * 255.0).round() as u8)
        .collect()
}

/// Channel-mean grayscale of a `[C, H, W]` image with values in `[0, 1]`.
pub fn image_to_gray(image: &[f64], channels: usize) -> Vec<u8> {
    let plane = image.len() / channels;
    (0..plane)
        .map(|i| {
            let mean = (0..channels).map(|c| image[c * plane + i]).sum::<f64>() / channels as f64;
            (mean.clamp(0.0, 1.0) * 255.0).round() as u8
        })
        .collect()
}

/// Binary PGM with maxval 255.
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height, "pixel count");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: usize,
    pub pixels: Vec<u8>,
}

/// Parses a binary PGM with 8-bit samples; `#` comments are allowed in the
/// header.
pub fn parse_pgm(bytes: &[u8]) -> Result<Pgm> {
    fn fail<T>(offset: usize, message: &str) -> Result<T> {
        Err(AbnError::Format {
            offset: offset as u64,
            message: message.to_string(),
        })
    }
    if !bytes.starts_with(b"P5") {
        return fail(0, "missing P5 magic");
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return fail(pos, "header ends early"),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return fail(pos, "expected a decimal header field");
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .expect("ascii digits")
            .parse()
            .or_else(|_| fail(start, "header field out of range"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return fail(pos, "header must end with one whitespace byte");
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return fail(pos, "only 8-bit PGM is supported");
    }
    let pixels = &bytes[pos..];
    if pixels.len() != width * height {
        return fail(pos, "pixel data length does not match the declared size");
    }
    Ok(Pgm {
        width,
        height,
        maxval,
        pixels: pixels.to_vec(),
    })
}

/// Fraction of the total mass of a non-negative `h × w` map, upsampled by
/// nearest neighbour to `size`, that falls inside `region`.
pub fn attention_mass(map: &[f64], (h, w): (usize, usize), region: Rect, size: (usize, usize)) -> Result<f64> {
    if map.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return invalid("attention mass needs a finite non-negative map");
    }
    let up = upsample_nearest(map, (h, w), size);
    let total: f64 = up.iter().sum();
    if total == 0.0 {
        return Ok(0.0);
    }
    let inside: f64 = (region.y0..region.y1)
        .flat_map(|y| (region.x0..region.x1).map(move |x| (y, x)))
        .map(|(y, x)| up[y * size.1 + x])
        .sum();
    Ok(inside / total)
}
