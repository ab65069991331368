//! Training-time image augmentation: rotate, crop, flip, erase.

use core::f64::consts::PI;

use rand::Rng as _;

use crate::rng::Rng;
use crate::tensor::Tensor;

pub const MAX_ROTATION_DEG: f64 = 15.0;
pub const CROP_FRACTION: f64 = 0.875;
pub const FLIP_PROB: f64 = 0.5;
pub const ERASE_PROB: f64 = 0.5;
pub const ERASE_AREA: (f64, f64) = (0.02, 0.20);
const ERASE_RATIO: (f64, f64) = (0.3, 3.3);

/// Axis-aligned rectangle in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EraseRect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl EraseRect {
    pub fn area(&self) -> usize {
        self.height * self.width
    }
}

/// One full set of augmentation parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraw {
    pub angle_deg: f64,
    pub crop_top: usize,
    pub crop_left: usize,
    pub flip: bool,
    pub erase: Option<EraseRect>,
}

fn crop_side(size: usize) -> usize {
    libm::round(size as f64 * CROP_FRACTION).max(1.0) as usize
}

/// Samples an erasing rectangle of a `size×size` image whose area lies in
/// `[ceil(0.02·A), floor(0.2·A)]` pixels, `A = size²`.
pub fn sample_erase_rect(size: usize, rng: &mut Rng) -> EraseRect {
    let total = (size * size) as f64;
    let lo = libm::ceil(ERASE_AREA.0 * total).max(1.0) as usize;
    let hi = (libm::floor(ERASE_AREA.1 * total) as usize).max(lo);
    let (ln_lo, ln_hi) = (libm::log(ERASE_RATIO.0), libm::log(ERASE_RATIO.1));
    loop {
        let target = rng.gen_range(ERASE_AREA.0..=ERASE_AREA.1) * total;
        let ratio = libm::exp(rng.gen_range(ln_lo..=ln_hi));
        let height = libm::round(libm::sqrt(target * ratio)) as usize;
        let mut width = libm::round(libm::sqrt(target / ratio)) as usize;
        if height == 0 || height > size || width == 0 {
            continue;
        }
        if height * width < lo {
            width = lo.div_ceil(height);
        } else if height * width > hi {
            width = hi / height;
        }
        let area = height * width;
        if width == 0 || width > size || area < lo || area > hi {
            continue;
        }
        return EraseRect {
            top: rng.gen_range(0..=size - height),
            left: rng.gen_range(0..=size - width),
            height,
            width,
        };
    }
}

pub fn sample_augment(size: usize, rng: &mut Rng) -> AugmentDraw {
    let angle_deg = rng.gen_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG);
    let slack = size - crop_side(size);
    let crop_top = rng.gen_range(0..=slack);
    let crop_left = rng.gen_range(0..=slack);
    let flip = rng.gen_bool(FLIP_PROB);
    let erase = rng.gen_bool(ERASE_PROB).then(|| sample_erase_rect(size, rng));
    AugmentDraw {
        angle_deg,
        crop_top,
        crop_left,
        flip,
        erase,
    }
}

/// Bilinear read at fractional `(y, x)`; outside the image reads `fill`
/// (or the nearest edge pixel when `fill` is `None`).
fn sample(img: &Tensor, y: f64, x: f64, c: usize, fill: Option<f64>) -> f64 {
    let (h, w) = (img.shape()[0] as f64, img.shape()[1] as f64);
    if let Some(f) = fill {
        if y < -0.5 || x < -0.5 || y > h - 0.5 || x > w - 0.5 {
            return f;
        }
    }
    let y = y.clamp(0.0, h - 1.0);
    let x = x.clamp(0.0, w - 1.0);
    let (y0, x0) = (libm::floor(y), libm::floor(x));
    let (y1, x1) = ((y0 + 1.0).min(h - 1.0), (x0 + 1.0).min(w - 1.0));
    let (fy, fx) = (y - y0, x - x0);
    let at = |yy: f64, xx: f64| img.at(&[yy as usize, xx as usize, c]);
    (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1))
}

/// Rotates `[h×w×c]` about its centre, filling uncovered corners with zeros.
pub fn rotate(img: &Tensor, angle_deg: f64) -> Tensor {
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let (sin, cos) = libm::sincos(angle_deg * PI / 180.0);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = Tensor::zeros(img.shape());
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let sy = cos * dy - sin * dx + cy;
            let sx = sin * dy + cos * dx + cx;
            for ch in 0..c {
                out.set(&[y, x, ch], sample(img, sy, sx, ch, Some(0.0)));
            }
        }
    }
    out
}

/// Crops a `side×side` window at `(top, left)` and resizes it back to the
/// input size.
pub fn crop_resize(img: &Tensor, top: usize, left: usize, side: usize) -> Tensor {
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let (scale_y, scale_x) = (side as f64 / h as f64, side as f64 / w as f64);
    let mut out = Tensor::zeros(img.shape());
    for y in 0..h {
        for x in 0..w {
            let sy = top as f64 + ((y as f64 + 0.5) * scale_y - 0.5).clamp(0.0, side as f64 - 1.0);
            let sx = left as f64 + ((x as f64 + 0.5) * scale_x - 0.5).clamp(0.0, side as f64 - 1.0);
            for ch in 0..c {
                out.set(&[y, x, ch], sample(img, sy, sx, ch, None));
            }
        }
    }
    out
}

/// Mirrors `[h×w×c]` left to right.
pub fn hflip(img: &Tensor) -> Tensor {
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out.set(&[y, x, ch], img.at(&[y, w - 1 - x, ch]));
            }
        }
    }
    out
}

/// Overwrites `rect` with uniform noise.
pub fn erase(img: &mut Tensor, rect: EraseRect, rng: &mut Rng) {
    let c = img.shape()[2];
    for y in rect.top..rect.top + rect.height {
        for x in rect.left..rect.left + rect.width {
            for ch in 0..c {
                img.set(&[y, x, ch], rng.gen::<f64>());
            }
        }
    }
}

pub fn apply_augment(img: &Tensor, draw: &AugmentDraw, rng: &mut Rng) -> Tensor {
    let size = img.shape()[0];
    let mut out = rotate(img, draw.angle_deg);
    out = crop_resize(&out, draw.crop_top, draw.crop_left, crop_side(size));
    if draw.flip {
        out = hflip(&out);
    }
    if let Some(rect) = draw.erase {
        erase(&mut out, rect, rng);
    }
    out.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    out
}

/// Draws and applies a random augmentation to a square `[s×s×c]` image.
pub fn augment(img: &Tensor, rng: &mut Rng) -> Tensor {
    let draw = sample_augment(img.shape()[0], rng);
    apply_augment(img, &draw, rng)
}
