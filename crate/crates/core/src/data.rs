//! Labelled image sets and the synthetic local-pattern task.
//!
//! Each synthetic class is an unordered pair of distinct glyphs. A sample
//! places the two glyphs in two randomly chosen quadrants (with jitter, random
//! colours and background noise), so every glyph appears in every class
//! family and in every position: telling classes apart needs both local
//! regions, and per-pixel class averages carry little signal.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `s×s×3`, values in `[0, 1]`.
    pub image: Tensor,
    pub label: usize,
    /// Seed the sample was generated from (0 for loaded data).
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub class_names: Vec<String>,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn image_size(&self) -> Option<usize> {
        self.samples.first().map(|s| s.image.shape()[0])
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    /// Checks labels, image shapes and pixel range.
    pub fn validate(&self) -> Result<()> {
        let size = self.image_size();
        for (i, s) in self.samples.iter().enumerate() {
            if s.label >= self.num_classes() {
                return Err(Error::Index {
                    index: s.label,
                    len: self.num_classes(),
                });
            }
            let sz = size.unwrap_or(0);
            if s.image.shape() != [sz, sz, 3] {
                return Err(Error::Data(format!(
                    "sample {i} has shape {:?}, expected [{sz}, {sz}, 3]",
                    s.image.shape()
                )));
            }
            if s.image.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::Data(format!("sample {i} has pixels outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Stacks the images at `indices` into `[n×s×s×3]` plus their labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let size = self.image_size().ok_or_else(|| Error::Data("empty dataset".into()))?;
        let mut data = Vec::with_capacity(indices.len() * size * size * 3);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.samples[i].image.data());
            labels.push(self.samples[i].label);
        }
        Ok((Tensor::new(&[indices.len(), size, size, 3], data)?, labels))
    }
}

/// Glyph shapes on `[-1, 1]²`; all are mirror-symmetric about the vertical axis.
const GLYPHS: [(&str, fn(f64, f64) -> bool); 7] = [
    ("plus", |u, v| u.abs() < 0.25 || v.abs() < 0.25),
    ("cross", |u, v| (u.abs() - v.abs()).abs() < 0.3),
    ("ring", |u, v| u.abs().max(v.abs()) > 0.65),
    ("bars", |_, v| (0.35..0.8).contains(&v.abs())),
    ("pillars", |u, _| (0.35..0.8).contains(&u.abs())),
    ("diamond", |u, v| (0.55..1.0).contains(&(u.abs() + v.abs()))),
    ("dot", |u, v| u * u + v * v < 0.45),
];

/// Glyph pairs of the first `num_classes` classes.
pub fn class_pairs(num_classes: usize) -> Result<Vec<(usize, usize)>> {
    let glyphs = (3..=GLYPHS.len())
        .find(|g| g * (g - 1) / 2 >= num_classes)
        .ok_or_else(|| {
            Error::config(format!(
                "at most {} synthetic classes are available",
                GLYPHS.len() * (GLYPHS.len() - 1) / 2
            ))
        })?;
    let mut pairs = Vec::new();
    for gap in 1..glyphs {
        for a in 0..glyphs {
            let b = (a + gap) % glyphs;
            let pair = (a.min(b), a.max(b));
            if !pairs.contains(&pair) {
                pairs.push(pair);
            }
        }
    }
    pairs.truncate(num_classes);
    Ok(pairs)
}

fn class_name(pair: (usize, usize)) -> String {
    format!("{}+{}", GLYPHS[pair.0].0, GLYPHS[pair.1].0)
}

/// Renders one sample of the class defined by `pair`.
pub fn render_sample(pair: (usize, usize), size: usize, seed: u64) -> Tensor {
    let mut rng = rng::seeded(seed);
    let mut img = Tensor::zeros(&[size, size, 3]);
    let base: f64 = rng.gen_range(0.05..0.3);
    for v in img.data_mut() {
        *v = base + 0.05 * rng::normal(&mut rng);
    }
    let mut quadrants = [0usize, 1, 2, 3];
    quadrants.shuffle(&mut rng);
    let mut glyphs = [pair.0, pair.1];
    glyphs.shuffle(&mut rng);
    let half = (size as f64 * 8.0 / 48.0).max(1.5);
    let jitter = (size / 16) as i64;
    for (&q, &glyph) in quadrants.iter().zip(&glyphs) {
        let cy = (size / 4 + (q / 2) * size / 2) as i64 + rng.gen_range(-jitter..=jitter);
        let cx = (size / 4 + (q % 2) * size / 2) as i64 + rng.gen_range(-jitter..=jitter);
        let colour: [f64; 3] = [rng.gen_range(0.6..1.0), rng.gen_range(0.6..1.0), rng.gen_range(0.6..1.0)];
        let shape = GLYPHS[glyph].1;
        let r = libm::ceil(half) as i64;
        for dy in -r..=r {
            for dx in -r..=r {
                let (y, x) = (cy + dy, cx + dx);
                if y < 0 || x < 0 || y >= size as i64 || x >= size as i64 {
                    continue;
                }
                let (u, v) = (dx as f64 / half, dy as f64 / half);
                if u.abs() > 1.0 || v.abs() > 1.0 || !shape(u, v) {
                    continue;
                }
                for (c, &value) in colour.iter().enumerate() {
                    img.set(&[y as usize, x as usize, c], value);
                }
            }
        }
    }
    img.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    img
}

fn generate(num_classes: usize, per_class: usize, size: usize, seed: u64, split: Split) -> Result<Dataset> {
    if num_classes < 2 {
        return Err(Error::config("the synthetic task needs at least two classes"));
    }
    if size < 8 {
        return Err(Error::config(format!("image size {size} too small for glyphs")));
    }
    let pairs = class_pairs(num_classes)?;
    let mut samples = Vec::with_capacity(num_classes * per_class);
    for (label, &pair) in pairs.iter().enumerate() {
        for i in 0..per_class {
            let sample_seed = rng::mix(seed, ((label as u64) << 32) | i as u64);
            samples.push(Sample {
                image: render_sample(pair, size, sample_seed),
                label,
                seed: sample_seed,
            });
        }
    }
    Ok(Dataset {
        samples,
        class_names: pairs.into_iter().map(class_name).collect(),
        split,
    })
}

/// Deterministic synthetic training set with `per_class` samples per label.
pub fn generate_synthetic_dataset(num_classes: usize, per_class: usize, size: usize, seed: u64) -> Result<Dataset> {
    generate(num_classes, per_class, size, seed, Split::Train)
}

/// Disjoint train and test sets derived from one seed.
pub fn synthetic_splits(
    num_classes: usize,
    train_per_class: usize,
    test_per_class: usize,
    size: usize,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    let train = generate(num_classes, train_per_class, size, rng::mix(seed, 1), Split::Train)?;
    let test = generate(num_classes, test_per_class, size, rng::mix(seed, 2), Split::Test)?;
    Ok((train, test))
}

/// Replicates minority-class samples (drawn with replacement) until every
/// class matches the largest count. Originals keep their order; copies follow.
pub fn upsample_balance(data: &Dataset, rng: &mut Rng) -> Result<Dataset> {
    if data.split != Split::Train {
        return Err(Error::usage("upsampling only applies to training data"));
    }
    let counts = data.class_counts();
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Data(format!(
            "class {empty} ({}) has no samples",
            data.class_names[empty]
        )));
    }
    let max = counts.iter().copied().max().unwrap_or(0);
    let mut out = data.clone();
    for (label, &count) in counts.iter().enumerate() {
        let members: Vec<usize> = data
            .samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.label == label)
            .map(|(i, _)| i)
            .collect();
        for _ in count..max {
            let pick = members[rng.gen_range(0..members.len())];
            out.samples.push(data.samples[pick].clone());
        }
    }
    Ok(out)
}
