//! Local CNNs: parallel LANet attention branches, a regularizer over their
//! maps (MAD by default), element-wise max aggregation and re-weighting of
//! the input features.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::config::RegularizerKind;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::Conv;
use crate::params::ParamStore;
use crate::regularizers::{self, draw_drop, DropDecision, Mode};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Two 1×1 convolutions `c → c/r → 1` with ReLU then Sigmoid.
#[derive(Debug, Clone)]
pub struct LaNetBranch {
    pub conv1: Conv,
    pub conv2: Conv,
}

impl LaNetBranch {
    pub fn new(params: &mut ParamStore, name: &str, channels: usize, reduction: usize, rng: &mut Rng) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 || channels < reduction {
            return Err(Error::config(format!(
                "{channels} channels not divisible by reduction ratio {reduction}"
            )));
        }
        let hidden = channels / reduction;
        Ok(Self {
            conv1: Conv::new(params, &format!("{name}.conv1"), 1, channels, hidden, 1, 1.0, rng),
            conv2: Conv::new(params, &format!("{name}.conv2"), 1, hidden, 1, 1, 1.0, rng),
        })
    }

    pub fn in_channels(&self, params: &ParamStore) -> usize {
        params.get(self.conv1.weight).shape()[2]
    }
}

/// `sigmoid(conv2(relu(conv1(x))))`: one `h×w×1` attention map per sample.
pub fn lanet_forward(g: &mut Graph, params: &ParamStore, x: Var, branch: &LaNetBranch) -> Result<Var> {
    let c = *g.shape(x).last().unwrap_or(&0);
    let expected = branch.in_channels(params);
    if c != expected {
        return Err(Error::shape("lanet_forward", g.shape(x), &[expected]));
    }
    let h = branch.conv1.forward(g, params, x)?;
    let h = g.relu(h);
    let h = branch.conv2.forward(g, params, h)?;
    Ok(g.sigmoid(h))
}

/// Element-wise maximum over a set of equally shaped `[..., 1]` maps.
pub fn aggregate_max_vars(g: &mut Graph, maps: &[Var]) -> Result<Var> {
    if maps.is_empty() {
        return Err(Error::usage("aggregate_max over an empty map set"));
    }
    let stacked = g.concat_last(maps)?;
    g.max_last(stacked)
}

/// Tensor-level element-wise maximum of `h×w×1` attention maps.
pub fn aggregate_max(maps: &[Tensor]) -> Result<Tensor> {
    if maps.is_empty() {
        return Err(Error::usage("aggregate_max over an empty map set"));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = maps.iter().map(|m| g.constant(m.clone())).collect();
    let out = aggregate_max_vars(&mut g, &vars)?;
    Ok(g.value(out).clone())
}

/// Regularizer settings applied to the stacked branch maps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapRegularizer {
    pub kind: RegularizerKind,
    pub p: f64,
    pub block_size: usize,
}

impl MapRegularizer {
    pub fn mad(p: f64) -> Self {
        Self {
            kind: RegularizerKind::Mad,
            p,
            block_size: 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LocalOutput {
    /// `x ⊙ M_out`, same shape as the input features.
    pub features: Var,
    /// Raw branch maps before any dropping, `[n×h×w×1]` each.
    pub maps: Vec<Var>,
    /// Aggregated map `M_out`, `[n×h×w×1]`.
    pub m_out: Var,
    /// One MAD decision per sample (empty for the other regularizers).
    pub decisions: Vec<DropDecision>,
}

#[derive(Debug, Clone)]
pub struct LocalCnns {
    pub branches: Vec<LaNetBranch>,
}

impl LocalCnns {
    /// Registers `local.branch{b}.{conv1|conv2}`.
    pub fn new(params: &mut ParamStore, branches: usize, channels: usize, reduction: usize, rng: &mut Rng) -> Result<Self> {
        if branches == 0 {
            return Err(Error::usage("local CNNs need at least one branch"));
        }
        let branches = (0..branches)
            .map(|b| LaNetBranch::new(params, &format!("local.branch{b}"), channels, reduction, rng))
            .collect::<Result<_>>()?;
        Ok(Self { branches })
    }

    /// Batched forward over `x: [n×h×w×c]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        params: &ParamStore,
        x: Var,
        reg: MapRegularizer,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<LocalOutput> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::shape("local_cnns_forward", &shape, &[]));
        }
        let (n, h, w) = (shape[0], shape[1], shape[2]);
        let b = self.branches.len();
        let maps = self
            .branches
            .iter()
            .map(|br| lanet_forward(g, params, x, br))
            .collect::<Result<Vec<_>>>()?;
        let stacked = g.concat_last(&maps)?;
        let mut decisions = Vec::new();
        let mut mask: Option<Vec<f64>> = None;
        if mode.is_training() {
            match reg.kind {
                RegularizerKind::Mad => {
                    let mut m = vec![1.0; n * h * w * b];
                    let mut any = false;
                    for s in 0..n {
                        let d = draw_drop(b, reg.p, mode, rng)?;
                        if let Some(i) = d.dropped_index {
                            any = true;
                            for px in 0..h * w {
                                m[(s * h * w + px) * b + i] = 0.0;
                            }
                        }
                        decisions.push(d);
                    }
                    mask = any.then_some(m);
                }
                RegularizerKind::Dropout => {
                    mask = Some(regularizers::dropout_mask(n * h * w * b, reg.p, rng)?);
                }
                RegularizerKind::DropBlock => {
                    let mut m = Vec::with_capacity(n * h * w * b);
                    for _ in 0..n {
                        m.extend(regularizers::drop_block_mask(h, w, b, reg.p, reg.block_size, rng)?);
                    }
                    mask = Some(m);
                }
                RegularizerKind::SpatialDropout => {
                    let mut m = Vec::with_capacity(n * h * w * b);
                    for _ in 0..n {
                        m.extend(regularizers::spatial_dropout_mask(h, w, b, reg.p, rng)?);
                    }
                    mask = Some(m);
                }
            }
        }
        let regularized = match mask {
            Some(m) => g.mul_const(stacked, m)?,
            None => stacked,
        };
        let m_out = g.max_last(regularized)?;
        let features = g.mul_last_broadcast(x, m_out)?;
        Ok(LocalOutput {
            features,
            maps,
            m_out,
            decisions,
        })
    }
}

/// Single-image convenience: `x: [h×w×c]` → (`x ⊙ M_out`, MAD decision).
pub fn local_cnns_forward(
    params: &ParamStore,
    x: &Tensor,
    local: &LocalCnns,
    p1: f64,
    mode: Mode,
    rng: &mut Rng,
) -> Result<(Tensor, DropDecision)> {
    let shape = x.shape();
    if shape.len() != 3 {
        return Err(Error::shape("local_cnns_forward", shape, &[]));
    }
    let mut g = Graph::new();
    let xv = g.constant(x.clone().reshape(&[1, shape[0], shape[1], shape[2]])?);
    let out = local.forward(&mut g, params, xv, MapRegularizer::mad(p1), mode, rng)?;
    let features = g.value(out.features).clone().reshape(shape)?;
    let decision = out.decisions.first().copied().unwrap_or(DropDecision {
        dropped_index: None,
        group_size: local.branches.len(),
        probability: p1,
        rng_state: regularizers::RngToken(rng.get_word_pos()),
    });
    Ok((features, decision))
}
