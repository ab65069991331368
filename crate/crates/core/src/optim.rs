//! SGD with momentum.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// One heavy-ball step: `v ← momentum·v + grad; p ← p − lr·v`, then clears grads.
pub fn sgd_momentum_step(
    params: &mut [Tensor],
    velocities: &mut [Tensor],
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if params.len() != velocities.len() {
        return Err(Error::usage("one velocity per parameter required"));
    }
    for (i, (p, v)) in params.iter().zip(velocities.iter()).enumerate() {
        if p.shape() != v.shape() {
            return Err(Error::shape("sgd_momentum_step", p.shape(), v.shape()));
        }
        if p.grad.is_none() {
            return Err(Error::usage(alloc::format!("parameter {i} has no gradient")));
        }
    }
    for (p, v) in params.iter_mut().zip(velocities.iter_mut()) {
        let grad = p.grad.take().expect("checked above");
        for (vel, g) in v.data_mut().iter_mut().zip(&grad) {
            *vel = momentum * *vel + g;
        }
        for (w, vel) in p.data_mut().iter_mut().zip(v.data()) {
            *w -= lr * vel;
        }
    }
    Ok(())
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping. `max_norm = 0` leaves them untouched.
pub fn clip_grad_norm(params: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = libm::sqrt(
        params
            .iter()
            .filter_map(|p| p.grad.as_ref())
            .flat_map(|g| g.iter())
            .map(|g| g * g)
            .sum::<f64>(),
    );
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / norm;
        for g in params.iter_mut().filter_map(|p| p.grad.as_mut()) {
            g.iter_mut().for_each(|v| *v *= scale);
        }
    }
    norm
}

/// Optimizer state for a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    velocities: Vec<Tensor>,
}

impl Sgd {
    pub fn new(params: &ParamStore, momentum: f64) -> Self {
        let velocities = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            momentum,
            velocities,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, lr: f64) -> Result<()> {
        sgd_momentum_step(params.tensors_mut(), &mut self.velocities, lr, self.momentum)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn param(value: f64, grad: f64) -> Tensor {
        let mut p = Tensor::full(&[2], value);
        p.grad = Some(vec![grad; 2]);
        p
    }

    #[test]
    fn plain_gradient_step() {
        let mut ps = [param(1.0, 0.5)];
        let mut vs = [Tensor::zeros(&[2])];
        sgd_momentum_step(&mut ps, &mut vs, 0.1, 0.0).unwrap();
        assert!(ps[0].data().iter().all(|&x| (x - 0.95).abs() < 1e-15));
        assert!(ps[0].grad.is_none());
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut ps = [param(-3.0, 0.0)];
        let mut vs = [Tensor::zeros(&[2])];
        sgd_momentum_step(&mut ps, &mut vs, 0.1, 0.9).unwrap();
        assert_eq!(ps[0].data(), &[-3.0, -3.0]);
    }

    #[test]
    fn momentum_recurrence_unrolled() {
        let (lr, g) = (0.1, 2.0);
        let mut ps = [param(0.0, g)];
        let mut vs = [Tensor::zeros(&[2])];
        sgd_momentum_step(&mut ps, &mut vs, lr, 0.9).unwrap();
        assert!((ps[0].data()[0] + lr * g).abs() < 1e-15);
        ps[0].grad = Some(vec![g; 2]);
        sgd_momentum_step(&mut ps, &mut vs, lr, 0.9).unwrap();
        assert!((ps[0].data()[0] + lr * g + lr * 1.9 * g).abs() < 1e-14);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut ps = [Tensor::zeros(&[2])];
        let mut vs = [Tensor::zeros(&[2])];
        assert!(matches!(
            sgd_momentum_step(&mut ps, &mut vs, 0.1, 0.9),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn velocity_shape_mismatch() {
        let mut ps = [param(0.0, 1.0)];
        let mut vs = [Tensor::zeros(&[3])];
        assert!(matches!(
            sgd_momentum_step(&mut ps, &mut vs, 0.1, 0.9),
            Err(Error::Shape { .. })
        ));
    }
}
