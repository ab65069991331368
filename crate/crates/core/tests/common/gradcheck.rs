//! Central finite differences against the graph's reverse pass.

use rand::seq::index::sample;
use rand::Rng as _;
use transfer_core::rng;
use transfer_core::{Graph, Result, Tensor, Var};

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-3;
/// Magnitude below which errors are measured absolutely.
pub const FLOOR: f64 = 1e-6;

#[derive(Debug)]
pub struct Report {
    pub checked: usize,
    pub max_rel: f64,
    pub worst: String,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.max_rel < TOLERANCE
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Checks `∂/∂inputs` of `Σ w ⊙ build(inputs)` for fixed random weights `w`
/// on up to `samples` input coordinates.
pub fn check_op(
    inputs: &[Tensor],
    build: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
    samples: usize,
    seed: u64,
) -> Report {
    let mut rng = rng::seeded(seed);
    let mut weights: Option<Vec<f64>> = None;
    let mut loss_of = |inputs: &[Tensor], want_grads: bool| -> (f64, Vec<Tensor>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| g.leaf(t.clone().with_requires_grad(true)))
            .collect();
        let out = build(&mut g, &vars).expect("op under test");
        let w = weights
            .get_or_insert_with(|| (0..g.value(out).len()).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .clone();
        let weighted = g.mul_const(out, w).expect("weights");
        let loss = g.sum(weighted);
        let value = g.value(loss).item();
        let grads = if want_grads {
            g.backward(loss).expect("backward");
            vars.iter().map(|&v| g.grad(v).expect("leaf grad")).collect()
        } else {
            Vec::new()
        };
        (value, grads)
    };
    let (_, grads) = loss_of(inputs, true);
    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
        .collect();
    let mut pick_rng = rng::seeded(seed ^ 0xf00d);
    let chosen: Vec<usize> = if coords.len() <= samples {
        (0..coords.len()).collect()
    } else {
        sample(&mut pick_rng, coords.len(), samples).into_vec()
    };
    let mut report = Report {
        checked: 0,
        max_rel: 0.0,
        worst: String::new(),
    };
    for c in chosen {
        let (i, j) = coords[c];
        let mut plus = inputs.to_vec();
        plus[i].data_mut()[j] += STEP;
        let mut minus = inputs.to_vec();
        minus[i].data_mut()[j] -= STEP;
        let numeric = (loss_of(&plus, false).0 - loss_of(&minus, false).0) / (2.0 * STEP);
        let analytic = grads[i].data()[j];
        let err = rel_err(analytic, numeric);
        report.checked += 1;
        if err > report.max_rel {
            report.max_rel = err;
            report.worst = format!("input {i} coord {j}: analytic {analytic:.6e} numeric {numeric:.6e}");
        }
    }
    report
}

/// Uniform random tensor in `[lo, hi)`.
pub fn random(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = rng::seeded(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}
