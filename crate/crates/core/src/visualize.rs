//! Attention rollout and jet-coloured heatmap overlays.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row sums further than this from 1 violate the rollout precondition.
pub const STOCHASTIC_TOL: f64 = 1e-6;

/// How per-head attention is collapsed before rollout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HeadFusion {
    #[default]
    Mean,
    Max,
    Min,
}

impl core::str::FromStr for HeadFusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(HeadFusion::Mean),
            "max" => Ok(HeadFusion::Max),
            "min" => Ok(HeadFusion::Min),
            _ => Err(Error::usage(alloc::format!("unknown head fusion {s:?} (mean, max, min)"))),
        }
    }
}

fn square_side(t: &Tensor, op: &'static str) -> Result<usize> {
    let s = t.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::shape(op, s, &[]));
    }
    Ok(s[0])
}

fn normalize_rows(m: &mut [f64], n: usize) {
    for row in m.chunks_mut(n) {
        let sum: f64 = row.iter().sum();
        if sum > 0.0 {
            row.iter_mut().for_each(|v| *v /= sum);
        }
    }
}

/// Collapses `[heads×N×N]` attention into one `[N×N]` matrix. Max and min
/// fusions are renormalized so rows stay stochastic.
pub fn fuse_heads(attn: &Tensor, fusion: HeadFusion) -> Result<Tensor> {
    let s = attn.shape();
    if s.len() != 3 || s[1] != s[2] || s[0] == 0 {
        return Err(Error::shape("fuse_heads", s, &[]));
    }
    let (heads, n) = (s[0], s[1]);
    let per = n * n;
    let mut out = attn.data()[..per].to_vec();
    for h in 1..heads {
        let head = &attn.data()[h * per..(h + 1) * per];
        for (o, &v) in out.iter_mut().zip(head) {
            *o = match fusion {
                HeadFusion::Mean => *o + v,
                HeadFusion::Max => o.max(v),
                HeadFusion::Min => o.min(v),
            };
        }
    }
    match fusion {
        HeadFusion::Mean => out.iter_mut().for_each(|v| *v /= heads as f64),
        _ => normalize_rows(&mut out, n),
    }
    Tensor::new(&[n, n], out)
}

fn check_stochastic(a: &Tensor, n: usize) -> Result<()> {
    for (i, row) in a.data().chunks(n).enumerate() {
        let sum: f64 = row.iter().sum();
        if row.iter().any(|&v| v < 0.0 || !v.is_finite()) || (sum - 1.0).abs() > STOCHASTIC_TOL {
            return Err(Error::Contract(alloc::format!(
                "attention row {i} is not stochastic (sum {sum})"
            )));
        }
    }
    Ok(())
}

fn matmul_square(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            for j in 0..n {
                out[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    out
}

/// Full rollout matrix `Â_M ⋯ Â_1` with `Â = rownorm(A + I)`.
pub fn rollout_matrix(blocks: &[Tensor]) -> Result<Tensor> {
    let first = blocks.first().ok_or_else(|| Error::usage("rollout needs at least one block"))?;
    let n = square_side(first, "attention_rollout")?;
    let mut joint = Tensor::eye(n).into_data();
    for a in blocks {
        if square_side(a, "attention_rollout")? != n {
            return Err(Error::shape("attention_rollout", a.shape(), first.shape()));
        }
        check_stochastic(a, n)?;
        let mut hat = a.data().to_vec();
        for i in 0..n {
            hat[i * n + i] += 1.0;
        }
        normalize_rows(&mut hat, n);
        joint = matmul_square(&hat, &joint, n);
    }
    Tensor::new(&[n, n], joint)
}

/// Renormalizes non-negative scores to sum 1, or returns the uniform
/// distribution when they carry no mass.
pub fn to_distribution(mut scores: Vec<f64>) -> Vec<f64> {
    let sum: f64 = scores.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        scores.iter_mut().for_each(|v| *v /= sum);
    } else {
        let u = 1.0 / scores.len() as f64;
        scores.iter_mut().for_each(|v| *v = u);
    }
    scores
}

/// Class-token row of the rollout restricted to the `N−1` patch tokens,
/// renormalized to a probability vector. When the class token attends only
/// to itself the patch scores fall back to uniform.
pub fn attention_rollout(blocks: &[Tensor]) -> Result<Tensor> {
    let r = rollout_matrix(blocks)?;
    let n = r.shape()[0];
    if n < 2 {
        return Err(Error::usage("rollout needs at least one patch token"));
    }
    let scores = to_distribution(r.data()[1..n].to_vec());
    Tensor::new(&[n - 1], scores)
}

/// Rollout scores weighted by the local attention map and renormalized.
pub fn composite_with_local(scores: &Tensor, m_out: &Tensor) -> Result<Tensor> {
    if scores.len() != m_out.len() {
        return Err(Error::shape("composite_with_local", scores.shape(), m_out.shape()));
    }
    let weighted = scores.data().iter().zip(m_out.data()).map(|(s, m)| s * m.max(0.0)).collect();
    Tensor::new(scores.shape(), to_distribution(weighted))
}

/// Bilinear resize of `[h×w]` to `[size×size]` (pixel-centre aligned, edge clamped).
pub fn upsample_bilinear(grid: &Tensor, size: usize) -> Result<Tensor> {
    let s = grid.shape();
    if s.len() != 2 || s[0] == 0 || s[1] == 0 {
        return Err(Error::shape("upsample_bilinear", s, &[]));
    }
    let (h, w) = (s[0], s[1]);
    let coord = |o: usize, src: usize| {
        let c = ((o as f64 + 0.5) * src as f64 / size as f64 - 0.5).clamp(0.0, src as f64 - 1.0);
        let lo = libm::floor(c) as usize;
        (lo, (lo + 1).min(src - 1), c - lo as f64)
    };
    let g = grid.data();
    Ok(Tensor::from_fn(&[size, size], |i| {
        let (y0, y1, fy) = coord(i / size, h);
        let (x0, x1, fx) = coord(i % size, w);
        let top = (1.0 - fx) * g[y0 * w + x0] + fx * g[y0 * w + x1];
        let bottom = (1.0 - fx) * g[y1 * w + x0] + fx * g[y1 * w + x1];
        (1.0 - fy) * top + fy * bottom
    }))
}

/// Min-max scaling to `[0, 1]`; a constant input maps to 0.5 everywhere.
pub fn normalize_minmax(t: &Tensor) -> Tensor {
    let lo = t.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = t.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= f64::EPSILON * hi.abs().max(1.0) {
        return Tensor::full(t.shape(), 0.5);
    }
    t.map(|v| (v - lo) / (hi - lo))
}

/// Jet colour map: blue (0) through cyan, yellow to red (1).
pub fn jet(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    let ramp = |centre: f64| (1.5 - (4.0 * v - centre).abs()).clamp(0.0, 1.0);
    [ramp(3.0), ramp(2.0), ramp(1.0)]
}

/// Interleaved 8-bit RGB pixels, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

pub fn to_byte(v: f64) -> u8 {
    libm::round(v.clamp(0.0, 1.0) * 255.0) as u8
}

/// 8-bit grey levels of a `[h×w]` map with values in `[0, 1]`.
pub fn gray_bytes(map: &Tensor) -> Vec<u8> {
    map.data().iter().map(|&v| to_byte(v)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    /// `[s×s]`, min-max normalized.
    pub values: Tensor,
    pub class_label: Option<usize>,
}

/// Overlay opacity of the colour map.
pub const ALPHA: f64 = 0.5;

/// Upsamples patch scores onto `image: [s×s×3]` and blends the jet-coloured
/// heatmap over its greyscale version.
pub fn render_heatmap(scores: &Tensor, grid: usize, image: &Tensor) -> Result<(Heatmap, RgbImage)> {
    let s = image.shape();
    if s.len() != 3 || s[0] != s[1] || s[2] != 3 {
        return Err(Error::shape("render_heatmap", s, &[]));
    }
    if scores.len() != grid * grid {
        return Err(Error::shape("render_heatmap", scores.shape(), &[grid * grid]));
    }
    let size = s[0];
    let values = normalize_minmax(&upsample_bilinear(&scores.clone().reshape(&[grid, grid])?, size)?);
    let mut pixels = Vec::with_capacity(size * size * 3);
    for (px, &v) in image.data().chunks(3).zip(values.data()) {
        let gray = (px[0] + px[1] + px[2]) / 3.0;
        for c in jet(v) {
            pixels.push(to_byte(ALPHA * c + (1.0 - ALPHA) * gray));
        }
    }
    Ok((
        Heatmap {
            values,
            class_label: None,
        },
        RgbImage {
            width: size,
            height: size,
            pixels,
        },
    ))
}
