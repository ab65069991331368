//! Binary PPM (P6) and PGM (P5) images with 8-bit samples.

use std::fs;
use std::path::Path;

use transfer_core::visualize::{to_byte, RgbImage};
use transfer_core::Tensor;

use crate::error::{CliError, Result};

pub fn encode_ppm(image: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.pixels);
    out
}

pub fn encode_pgm(width: usize, height: usize, gray: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    out
}

/// Converts an `[h×w×3]` image with values in `[0, 1]` to 8-bit RGB.
pub fn tensor_to_rgb(image: &Tensor) -> Result<RgbImage, String> {
    let s = image.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(format!("expected an [h, w, 3] image, got {s:?}"));
    }
    Ok(RgbImage {
        width: s[1],
        height: s[0],
        pixels: image.data().iter().map(|&v| to_byte(v)).collect(),
    })
}

pub fn rgb_to_tensor(image: &RgbImage) -> Tensor {
    let data = image.pixels.iter().map(|&b| f64::from(b) / 255.0).collect();
    Tensor::new(&[image.height, image.width, 3], data).expect("pixel count matches dimensions")
}

/// Reads the next whitespace-delimited header token, skipping `#` comments.
fn token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str, String> {
    loop {
        match bytes.get(*pos) {
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            Some(_) => break,
            None => return Err("truncated header".into()),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(|b| !b.is_ascii_whitespace()) {
        *pos += 1;
    }
    std::str::from_utf8(&bytes[start..*pos]).map_err(|_| "non-ASCII header".to_string())
}

fn number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize, String> {
    let t = token(bytes, pos)?;
    t.parse().map_err(|_| format!("bad {what} {t:?}"))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage, String> {
    let mut pos = 0;
    if token(bytes, &mut pos)? != "P6" {
        return Err("not a binary PPM (P6)".into());
    }
    let width = number(bytes, &mut pos, "width")?;
    let height = number(bytes, &mut pos, "height")?;
    let maxval = number(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(format!("only 8-bit images are supported, maxval {maxval}"));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err("missing separator after header".into());
    }
    pos += 1;
    let len = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or("image dimensions overflow")?;
    let pixels = &bytes[pos..];
    if pixels.len() != len {
        return Err(format!("expected {len} pixel bytes, found {}", pixels.len()));
    }
    Ok(RgbImage {
        width,
        height,
        pixels: pixels.to_vec(),
    })
}

pub fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode_ppm(&bytes).map_err(|m| CliError::format(path, m))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip() {
        let image = RgbImage {
            width: 3,
            height: 2,
            pixels: (0..18).map(|i| i * 14).collect(),
        };
        assert_eq!(decode_ppm(&encode_ppm(&image)).unwrap(), image);
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut bytes = b"P6\n# made by hand\n1 1\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3]);
        assert_eq!(decode_ppm(&bytes).unwrap().pixels, vec![1, 2, 3]);
    }

    #[test]
    fn malformed_files_are_rejected() {
        assert!(decode_ppm(b"P5\n1 1\n255\n\0").is_err());
        assert!(decode_ppm(b"P6\n2 2\n255\n\0\0\0").is_err());
        assert!(decode_ppm(b"P6\n1 1\n65535\n\0\0\0\0\0\0").is_err());
        assert!(decode_ppm(b"P6\n1").is_err());
    }

    #[test]
    fn tensor_conversion_quantizes_to_bytes() {
        let t = Tensor::new(&[1, 2, 3], vec![0.0, 0.5, 1.0, 0.2, 0.4, 0.6]).unwrap();
        let rgb = tensor_to_rgb(&t).unwrap();
        assert_eq!(rgb.pixels, vec![0, 128, 255, 51, 102, 153]);
        let back = rgb_to_tensor(&rgb);
        assert!(back.data().iter().zip(t.data()).all(|(a, b)| (a - b).abs() <= 0.5 / 255.0 + 1e-12));
    }
}
