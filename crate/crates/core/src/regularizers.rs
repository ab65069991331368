//! Multi-Attention Dropping and the element-, block- and channel-wise
//! dropout baselines it is compared against.
//!
//! Every regularizer is the identity in [`Mode::Inference`] and draws nothing
//! from the generator in that mode. The `*_mask` functions produce the
//! multiplicative masks that the model records in its graph; the tensor-level
//! functions apply them directly.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Training,
    Inference,
}

impl Mode {
    pub fn is_training(self) -> bool {
        self == Mode::Training
    }
}

/// Position of the generator before a decision was drawn; replaying from
/// this word position reproduces the decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngToken(pub u128);

/// Outcome of one MAD application.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropDecision {
    /// Member zeroed by this call, if any.
    pub dropped_index: Option<usize>,
    pub group_size: usize,
    pub probability: f64,
    pub rng_state: RngToken,
}

fn check_probability(p: f64, allow_one: bool) -> Result<()> {
    let ok = if allow_one {
        (0.0..=1.0).contains(&p)
    } else {
        (0.0..1.0).contains(&p)
    };
    if ok {
        Ok(())
    } else {
        Err(Error::config(alloc::format!(
            "drop probability {p} outside [0, 1{}",
            if allow_one { "]" } else { ")" }
        )))
    }
}

/// Decides whether, and which, member of a group of `group_size` is dropped.
///
/// A drop event fires with probability `p`; the victim is then chosen
/// uniformly. Exactly one member is dropped per event.
pub fn draw_drop(group_size: usize, p: f64, mode: Mode, rng: &mut Rng) -> Result<DropDecision> {
    if group_size == 0 {
        return Err(Error::usage("MAD needs a non-empty group"));
    }
    check_probability(p, true)?;
    let rng_state = RngToken(rng.get_word_pos());
    let dropped_index = if mode.is_training() && rng.gen::<f64>() < p {
        Some(rng.gen_range(0..group_size))
    } else {
        None
    };
    Ok(DropDecision {
        dropped_index,
        group_size,
        probability: p,
        rng_state,
    })
}

/// MAD over a group of equally shaped tensors. The dropped member is replaced
/// by zeros; all others are returned untouched, without rescaling.
pub fn mad_drop(
    group: &[Tensor],
    p: f64,
    mode: Mode,
    rng: &mut Rng,
) -> Result<(Vec<Tensor>, DropDecision)> {
    let decision = draw_drop(group.len(), p, mode, rng)?;
    let out = group
        .iter()
        .enumerate()
        .map(|(i, t)| {
            if decision.dropped_index == Some(i) {
                Tensor::zeros(t.shape())
            } else {
                t.clone()
            }
        })
        .collect();
    Ok((out, decision))
}

/// Inverted-dropout mask: zero with probability `p`, `1/(1−p)` otherwise.
pub fn dropout_mask(len: usize, p: f64, rng: &mut Rng) -> Result<Vec<f64>> {
    check_probability(p, false)?;
    let keep = 1.0 / (1.0 - p);
    Ok((0..len)
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
        .collect())
}

pub fn dropout(x: &Tensor, p: f64, mode: Mode, rng: &mut Rng) -> Result<Tensor> {
    check_probability(p, false)?;
    if !mode.is_training() {
        return Ok(x.clone());
    }
    let mask = dropout_mask(x.len(), p, rng)?;
    apply_mask(x, &mask)
}

fn spatial_dims(x: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [h, w, c] => Ok((h, w, c)),
        _ => Err(Error::shape(op, x.shape(), &[])),
    }
}

/// Seed rate that makes the expected share of seeded block centres match `p`.
pub fn drop_block_gamma(h: usize, w: usize, p: f64, block_size: usize) -> f64 {
    let valid = ((h - block_size + 1) * (w - block_size + 1)) as f64;
    p * (h * w) as f64 / ((block_size * block_size) as f64 * valid)
}

/// DropBlock mask for an `h×w×c` map.
///
/// Seeds are drawn per channel at rate γ over the centres whose block fits
/// inside the map; each seed zeroes its `block_size²` square. Survivors are
/// rescaled by `total / kept`.
pub fn drop_block_mask(
    h: usize,
    w: usize,
    c: usize,
    p: f64,
    block_size: usize,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    check_probability(p, false)?;
    if block_size % 2 == 0 || block_size == 0 || block_size > h.min(w) {
        return Err(Error::config(alloc::format!(
            "DropBlock size {block_size} must be odd and at most {}",
            h.min(w)
        )));
    }
    let gamma = drop_block_gamma(h, w, p, block_size);
    let mut keep = vec![1.0; h * w * c];
    for ch in 0..c {
        for y in 0..=h - block_size {
            for x in 0..=w - block_size {
                if rng.gen::<f64>() < gamma {
                    for by in y..y + block_size {
                        for bx in x..x + block_size {
                            keep[(by * w + bx) * c + ch] = 0.0;
                        }
                    }
                }
            }
        }
    }
    let kept: f64 = keep.iter().sum();
    if kept > 0.0 {
        let scale = keep.len() as f64 / kept;
        keep.iter_mut().for_each(|k| *k *= scale);
    }
    Ok(keep)
}

pub fn drop_block(x: &Tensor, p: f64, block_size: usize, mode: Mode, rng: &mut Rng) -> Result<Tensor> {
    let (h, w, c) = spatial_dims(x, "drop_block")?;
    if !mode.is_training() {
        check_probability(p, false)?;
        return Ok(x.clone());
    }
    let mask = drop_block_mask(h, w, c, p, block_size, rng)?;
    apply_mask(x, &mask)
}

/// Per-channel dropout mask for an `h×w×c` map.
pub fn spatial_dropout_mask(h: usize, w: usize, c: usize, p: f64, rng: &mut Rng) -> Result<Vec<f64>> {
    let channel = dropout_mask(c, p, rng)?;
    let mut mask = Vec::with_capacity(h * w * c);
    for _ in 0..h * w {
        mask.extend_from_slice(&channel);
    }
    Ok(mask)
}

pub fn spatial_dropout(x: &Tensor, p: f64, mode: Mode, rng: &mut Rng) -> Result<Tensor> {
    let (h, w, c) = spatial_dims(x, "spatial_dropout")?;
    check_probability(p, false)?;
    if !mode.is_training() {
        return Ok(x.clone());
    }
    let mask = spatial_dropout_mask(h, w, c, p, rng)?;
    apply_mask(x, &mask)
}

fn apply_mask(x: &Tensor, mask: &[f64]) -> Result<Tensor> {
    Tensor::new(
        x.shape(),
        x.data().iter().zip(mask).map(|(a, m)| a * m).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn group(b: usize) -> Vec<Tensor> {
        (0..b)
            .map(|i| Tensor::from_fn(&[3, 3, 1], |j| 0.1 + (i * 9 + j) as f64 * 0.01))
            .collect()
    }

    #[test]
    fn mad_p0_is_identity() {
        let g = group(3);
        let (out, d) = mad_drop(&g, 0.0, Mode::Training, &mut seeded(1)).unwrap();
        assert!(out.iter().zip(&g).all(|(a, b)| a.bitwise_eq(b)));
        assert_eq!(d.dropped_index, None);
    }

    #[test]
    fn mad_p1_drops_exactly_one() {
        let g = group(3);
        let mut rng = seeded(2);
        for _ in 0..50 {
            let (out, d) = mad_drop(&g, 1.0, Mode::Training, &mut rng).unwrap();
            let i = d.dropped_index.unwrap();
            assert!(i < 3);
            for (j, (o, x)) in out.iter().zip(&g).enumerate() {
                if j == i {
                    assert!(o.is_all_zero() && o.shape() == x.shape());
                } else {
                    assert!(o.bitwise_eq(x));
                }
            }
        }
    }

    #[test]
    fn mad_inference_never_drops() {
        let g = group(2);
        let mut rng = seeded(3);
        let before = rng.get_word_pos();
        let (out, d) = mad_drop(&g, 1.0, Mode::Inference, &mut rng).unwrap();
        assert!(out.iter().zip(&g).all(|(a, b)| a.bitwise_eq(b)));
        assert_eq!(d.dropped_index, None);
        assert_eq!(rng.get_word_pos(), before);
    }

    #[test]
    fn mad_errors() {
        let mut rng = seeded(0);
        assert!(matches!(
            mad_drop(&[], 0.5, Mode::Training, &mut rng),
            Err(Error::Usage(_))
        ));
        assert!(matches!(
            mad_drop(&group(2), 1.5, Mode::Training, &mut rng),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            mad_drop(&group(2), -0.1, Mode::Training, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn mad_decision_replays_from_token() {
        let mut rng = seeded(11);
        let _ = draw_drop(4, 0.5, Mode::Training, &mut rng).unwrap();
        let d = draw_drop(4, 0.5, Mode::Training, &mut rng).unwrap();
        let mut replay = seeded(11);
        replay.set_word_pos(d.rng_state.0);
        let again = draw_drop(4, 0.5, Mode::Training, &mut replay).unwrap();
        assert_eq!(d, again);
    }

    #[test]
    fn dropout_identity_cases() {
        let x = Tensor::from_fn(&[4, 4, 2], |i| i as f64);
        let mut rng = seeded(4);
        assert!(dropout(&x, 0.0, Mode::Training, &mut rng).unwrap().bitwise_eq(&x));
        assert!(dropout(&x, 0.7, Mode::Inference, &mut rng).unwrap().bitwise_eq(&x));
        assert!(matches!(
            dropout(&x, 1.0, Mode::Training, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn dropout_zero_fraction() {
        let x = Tensor::ones(&[10_000]);
        let y = dropout(&x, 0.5, Mode::Training, &mut seeded(5)).unwrap();
        let zeros = y.data().iter().filter(|&&v| v == 0.0).count() as f64 / 10_000.0;
        assert!((zeros - 0.5).abs() <= 0.02, "{zeros}");
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn dropout_preserves_expectation() {
        let x = Tensor::ones(&[8]);
        let mut rng = seeded(6);
        let trials = 10_000;
        let mut acc = [0.0; 8];
        for _ in 0..trials {
            let y = dropout(&x, 0.3, Mode::Training, &mut rng).unwrap();
            acc.iter_mut().zip(y.data()).for_each(|(a, v)| *a += v);
        }
        for a in acc {
            assert!((a / trials as f64 - 1.0).abs() < 0.05);
        }
    }

    #[test]
    fn drop_block_identity_and_degenerate() {
        let x = Tensor::from_fn(&[5, 5, 3], |i| 1.0 + i as f64);
        let mut rng = seeded(7);
        assert!(drop_block(&x, 0.0, 3, Mode::Training, &mut rng).unwrap().bitwise_eq(&x));
        assert!(drop_block(&x, 0.5, 3, Mode::Inference, &mut rng).unwrap().bitwise_eq(&x));
        // block covering the whole map: any firing seed wipes its channel
        let x = Tensor::ones(&[5, 5, 1]);
        let mut fired = 0;
        for _ in 0..200 {
            let y = drop_block(&x, 0.5, 5, Mode::Training, &mut rng).unwrap();
            if y.data().iter().any(|&v| v == 0.0) {
                assert!(y.is_all_zero());
                fired += 1;
            }
        }
        assert!(fired > 0);
    }

    #[test]
    fn drop_block_rejects_bad_sizes() {
        let x = Tensor::ones(&[6, 6, 1]);
        let mut rng = seeded(8);
        for bs in [0, 2, 7] {
            assert!(matches!(
                drop_block(&x, 0.3, bs, Mode::Training, &mut rng),
                Err(Error::Config(_))
            ));
        }
    }

    #[test]
    fn spatial_dropout_identity_and_forced() {
        let x = Tensor::from_fn(&[3, 3, 4], |i| 1.0 + i as f64);
        let mut rng = seeded(9);
        assert!(spatial_dropout(&x, 0.0, Mode::Training, &mut rng).unwrap().bitwise_eq(&x));
        assert!(spatial_dropout(&x, 0.4, Mode::Inference, &mut rng).unwrap().bitwise_eq(&x));
        let y = spatial_dropout(&x, 1.0 - 1e-12, Mode::Training, &mut rng).unwrap();
        assert!(y.is_all_zero());
    }

    #[test]
    fn spatial_dropout_drops_whole_channels() {
        let x = Tensor::ones(&[4, 4, 16]);
        let y = spatial_dropout(&x, 0.5, Mode::Training, &mut seeded(10)).unwrap();
        for ch in 0..16 {
            let first = y.at(&[0, 0, ch]);
            for r in 0..4 {
                for c in 0..4 {
                    assert_eq!(y.at(&[r, c, ch]), first);
                }
            }
        }
    }
}
