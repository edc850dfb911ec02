//! Binary PGM (P5) and PPM (P6) images with 8-bit samples.
//!
//! Real values in `[0, 1]` map to `round_half_up(v · 255)`; values outside
//! the range are clamped first.

use std::path::Path;

use crate::error::{arg_err, io_err, shape_err, FtnError, Result};
use crate::tensor::{Real, Tensor};

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Grey image from an `H×W` (or `1×H×W`) tensor.
pub fn encode_pgm<T: Real>(img: &Tensor<T>) -> Result<Vec<u8>> {
    let (h, w) = match *img.shape() {
        [h, w] | [1, h, w] => (h, w),
        ref s => return shape_err(format!("PGM expects H×W, got {s:?}")),
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(img.data().iter().map(|v| quantize(v.f64())));
    Ok(out)
}

/// Colour image from a planar `3×H×W` tensor.
pub fn encode_ppm<T: Real>(img: &Tensor<T>) -> Result<Vec<u8>> {
    let [3, h, w] = *img.shape() else {
        return shape_err(format!("PPM expects 3×H×W, got {:?}", img.shape()));
    };
    let d = img.data();
    let plane = h * w;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * plane);
    for p in 0..plane {
        for c in 0..3 {
            out.push(quantize(d[c * plane + p].f64()));
        }
    }
    Ok(out)
}

pub fn write_pgm<T: Real>(path: &Path, img: &Tensor<T>) -> Result<()> {
    std::fs::write(path, encode_pgm(img)?).map_err(io_err(path))
}

pub fn write_ppm<T: Real>(path: &Path, img: &Tensor<T>) -> Result<()> {
    std::fs::write(path, encode_ppm(img)?).map_err(io_err(path))
}

/// Parses a P5 or P6 file with maxval 255 into a planar `C×H×W` tensor in
/// `[0, 1]`.
pub fn decode_pnm<T: Real>(bytes: &[u8]) -> Result<Tensor<T>> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return arg_err("truncated PNM header");
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| FtnError::InvalidArgument("bad PNM header".into()))?);
    }
    pos += 1;
    let channels = match fields[0] {
        "P5" => 1,
        "P6" => 3,
        m => return arg_err(format!("unsupported PNM magic {m:?}")),
    };
    let parse = |s: &str| s.parse::<usize>().map_err(|_| FtnError::InvalidArgument(format!("bad PNM field {s:?}")));
    let (w, h, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
    if maxval != 255 {
        return arg_err(format!("PNM maxval {maxval} unsupported"));
    }
    let plane = h * w;
    let body = bytes.get(pos..).unwrap_or(&[]);
    if body.len() != channels * plane {
        return arg_err(format!("PNM body has {} bytes, expected {}", body.len(), channels * plane));
    }
    let mut data = vec![T::zero(); channels * plane];
    for p in 0..plane {
        for c in 0..channels {
            data[c * plane + p] = T::of(body[p * channels + c] as f64 / 255.0);
        }
    }
    Tensor::new(&[channels, h, w], data)
}

pub fn read_pnm<T: Real>(path: &Path) -> Result<Tensor<T>> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    decode_pnm(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantize_rounds_half_up() {
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(1.5 / 255.0), 2);
        assert_eq!(quantize(-3.0), 0);
    }

    #[test]
    fn pgm_header_and_body() {
        let t = Tensor::<f64>::from_f64(&[2, 3], &[0.0, 0.5, 1.0, 0.25, 0.75, 0.1]).unwrap();
        let bytes = encode_pgm(&t).unwrap();
        assert_eq!(&bytes[..11], b"P5\n3 2\n255\n");
        assert_eq!(&bytes[11..], &[0, 128, 255, 64, 191, 26]);
    }

    #[test]
    fn ppm_interleaves_planes() {
        let t = Tensor::<f64>::from_f64(&[3, 1, 2], &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let bytes = encode_ppm(&t).unwrap();
        assert_eq!(&bytes[11..], &[255, 0, 0, 0, 255, 0]);
    }

    #[test]
    fn ppm_round_trips_quantized_values() {
        let t = Tensor::<f64>::from_fn(&[3, 4, 5], |i| ((i * 37) % 256) as f64 / 255.0);
        let back: Tensor<f64> = decode_pnm(&encode_ppm(&t).unwrap()).unwrap();
        assert!(back.max_abs_diff(&t) < 1e-12);
    }

    #[test]
    fn rejects_truncated_body() {
        assert!(decode_pnm::<f32>(b"P6\n2 2\n255\n\x00\x01").is_err());
        assert!(decode_pnm::<f32>(b"P3\n1 1\n255\n0 0 0").is_err());
    }
}
