//! Token projection, Transformer encoder with MSAD, and classification head.
//!
//! Features `[n×h×w×c]` are projected by a 1×1 convolution to `d` channels,
//! flattened row-major into `h·w` tokens, prefixed with a learnable class
//! token and offset by learnable position embeddings. Each pre-norm encoder
//! block runs multi-head self-attention, where MSAD zeroes one head's output
//! per sample with probability `p2` during training, followed by a GELU MLP.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{Conv, LayerNorm, Linear};
use crate::params::{trunc_normal, ParamId, ParamStore};
use crate::regularizers::{draw_drop, DropDecision, Mode};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Standard deviation of the class-token and position-embedding init.
pub const TOKEN_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderConfig {
    /// Channels of the incoming feature map.
    pub in_channels: usize,
    /// Spatial side of the incoming feature map.
    pub grid: usize,
    /// Projection width `c2`, equal to the token dimension `d`.
    pub embed_dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub mlp_hidden: usize,
    pub num_classes: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::config(format!(
                "embedding dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn seq_len(&self) -> usize {
        self.grid * self.grid + 1
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }
}

/// 1×1 projection, class token and position embeddings.
#[derive(Debug, Clone)]
pub struct Projection {
    pub conv: Conv,
    pub cls: ParamId,
    pub pos: ParamId,
}

impl Projection {
    pub fn new(cfg: &EncoderConfig, params: &mut ParamStore, rng: &mut Rng) -> Self {
        let d = cfg.embed_dim;
        Self {
            conv: Conv::new(params, "projection", 1, cfg.in_channels, d, 1, 1.0, rng),
            cls: params.add("encoder.cls", trunc_normal(&[1, d], TOKEN_STD, rng)),
            pos: params.add("encoder.pos", trunc_normal(&[cfg.seq_len(), d], TOKEN_STD, rng)),
        }
    }
}

/// `[n×h×w×c]` → token sequence `[n×(h·w+1)×d]`, class token at index 0.
pub fn project_to_sequence(g: &mut Graph, params: &ParamStore, proj: &Projection, x: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let c_in = params.get(proj.conv.weight).shape()[2];
    let pos_len = params.get(proj.pos).shape()[0];
    if shape.len() != 4 || shape[3] != c_in || shape[1] * shape[2] + 1 != pos_len {
        return Err(Error::config(format!(
            "projection expects [n, h, w, {c_in}] with h·w + 1 = {pos_len}, got {shape:?}"
        )));
    }
    let (n, h, w) = (shape[0], shape[1], shape[2]);
    let xp = proj.conv.forward(g, params, x)?;
    let d = g.shape(xp)[3];
    let tokens = g.reshape(xp, &[n, h * w, d])?;
    let cls = params.var(g, proj.cls);
    let seq = g.prepend_token(tokens, cls)?;
    let pos = params.var(g, proj.pos);
    g.add(seq, pos)
}

/// Parameters of one pre-norm encoder block.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub ln1: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub proj: Linear,
    pub ln2: LayerNorm,
    pub mlp1: Linear,
    pub mlp2: Linear,
    pub heads: usize,
}

impl EncoderBlock {
    pub fn new(cfg: &EncoderConfig, index: usize, params: &mut ParamStore, rng: &mut Rng) -> Self {
        let d = cfg.embed_dim;
        let p = format!("encoder.block{index}");
        Self {
            ln1: LayerNorm::new(params, &format!("{p}.ln1"), d),
            wq: Linear::bare(params, &format!("{p}.wq"), d, d, rng),
            wk: Linear::bare(params, &format!("{p}.wk"), d, d, rng),
            wv: Linear::bare(params, &format!("{p}.wv"), d, d, rng),
            proj: Linear::new(params, &format!("{p}.proj"), d, d, true, rng),
            ln2: LayerNorm::new(params, &format!("{p}.ln2"), d),
            mlp1: Linear::new(params, &format!("{p}.mlp1"), d, cfg.mlp_hidden, true, rng),
            mlp2: Linear::new(params, &format!("{p}.mlp2"), cfg.mlp_hidden, d, true, rng),
            heads: cfg.heads,
        }
    }
}

/// Scaled dot-product attention with `heads` heads packed along the last
/// axis of `q`, `k`, `v: [n×N×·]`. Returns `(A: [n×heads×N×N], O: [n×N×d_v])`.
pub fn attend(g: &mut Graph, q: Var, k: Var, v: Var, heads: usize) -> Result<(Var, Var)> {
    let scores = g.attention_scores(q, k, heads)?;
    let attn = g.softmax(scores, 3)?;
    let out = g.attention_apply(attn, v)?;
    Ok((attn, out))
}

/// Single-head self-attention of `x: [N×d]` with `w_q, w_k: d×d_k` and
/// `w_v: d×d_v`. Returns `(A, O)` with `A = softmax(q·kᵀ/√d_k)` and `O = A·v`.
pub fn self_attention(x: &Tensor, wq: &Tensor, wk: &Tensor, wv: &Tensor) -> Result<(Tensor, Tensor)> {
    if x.rank() != 2 {
        return Err(Error::shape("self_attention", x.shape(), wq.shape()));
    }
    let len = x.shape()[0];
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let mut project = |w: &Tensor| -> Result<Var> {
        let wv = g.constant(w.clone());
        let y = g.matmul(xv, wv)?;
        let d = g.shape(y)[1];
        g.reshape(y, &[1, len, d])
    };
    let (q, k, v) = (project(wq)?, project(wk)?, project(wv)?);
    let (a, o) = attend(&mut g, q, k, v, 1)?;
    let a = g.value(a).clone().reshape(&[len, len])?;
    let dv = g.shape(o)[2];
    let o = g.value(o).clone().reshape(&[len, dv])?;
    Ok((a, o))
}

/// Per-sample head-drop mask for a `[n×N×d]` concatenated head output.
fn head_mask(decisions: &[DropDecision], len: usize, d: usize, heads: usize) -> Option<Vec<f64>> {
    if decisions.iter().all(|d| d.dropped_index.is_none()) {
        return None;
    }
    let dk = d / heads;
    let mut mask = vec![1.0; decisions.len() * len * d];
    for (s, dec) in decisions.iter().enumerate() {
        if let Some(h) = dec.dropped_index {
            for t in 0..len {
                let row = (s * len + t) * d;
                mask[row + h * dk..row + (h + 1) * dk].fill(0.0);
            }
        }
    }
    Some(mask)
}

#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub output: Var,
    /// Attention weights `[n×heads×N×N]`.
    pub attn: Var,
    /// Concatenated head outputs after MSAD, before the output projection.
    pub heads_out: Var,
    pub decisions: Vec<DropDecision>,
}

/// Multi-head self-attention with MSAD on `x: [n×N×d]`.
pub fn msa_with_msad(
    g: &mut Graph,
    params: &ParamStore,
    block: &EncoderBlock,
    x: Var,
    p2: f64,
    mode: Mode,
    rng: &mut Rng,
) -> Result<AttentionOutput> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 3 || shape[2] % block.heads != 0 {
        return Err(Error::shape("msa_with_msad", &shape, &[block.heads]));
    }
    let (n, len, d) = (shape[0], shape[1], shape[2]);
    let q = block.wq.forward(g, params, x)?;
    let k = block.wk.forward(g, params, x)?;
    let v = block.wv.forward(g, params, x)?;
    let (attn, mut heads_out) = attend(g, q, k, v, block.heads)?;
    let mut decisions = Vec::new();
    if mode.is_training() {
        for _ in 0..n {
            decisions.push(draw_drop(block.heads, p2, mode, rng)?);
        }
        if let Some(mask) = head_mask(&decisions, len, d, block.heads) {
            heads_out = g.mul_const(heads_out, mask)?;
        }
    }
    let output = block.proj.forward(g, params, heads_out)?;
    Ok(AttentionOutput {
        output,
        attn,
        heads_out,
        decisions,
    })
}

#[derive(Debug, Clone)]
pub struct BlockOutput {
    pub output: Var,
    pub attention: AttentionOutput,
}

/// `x ← x + MSA(LN(x)); x ← x + MLP(LN(x))`.
pub fn encoder_block(
    g: &mut Graph,
    params: &ParamStore,
    block: &EncoderBlock,
    x: Var,
    p2: f64,
    mode: Mode,
    rng: &mut Rng,
) -> Result<BlockOutput> {
    let h = block.ln1.forward(g, params, x)?;
    let attention = msa_with_msad(g, params, block, h, p2, mode, rng)?;
    let x = g.add(x, attention.output)?;
    let h = block.ln2.forward(g, params, x)?;
    let h = block.mlp1.forward(g, params, h)?;
    let h = g.gelu(h);
    let h = block.mlp2.forward(g, params, h)?;
    let output = g.add(x, h)?;
    Ok(BlockOutput { output, attention })
}

/// Single linear layer on the class token: `[n×N×d]` → `[n×classes]`.
pub fn classify_head(g: &mut Graph, params: &ParamStore, head: &Linear, seq: Var) -> Result<Var> {
    let cls = g.select_token(seq, 0)?;
    head.forward(g, params, cls)
}

/// Projection, encoder blocks and head.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub projection: Projection,
    pub blocks: Vec<EncoderBlock>,
    /// Final layer norm over every token before the head.
    pub norm: LayerNorm,
    pub head: Linear,
}

impl Encoder {
    pub fn new(config: EncoderConfig, params: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let projection = Projection::new(&config, params, rng);
        let blocks = (0..config.depth)
            .map(|i| EncoderBlock::new(&config, i, params, rng))
            .collect();
        let norm = LayerNorm::new(params, "encoder.norm", config.embed_dim);
        let head = Linear::new(params, "head.linear", config.embed_dim, config.num_classes, true, rng);
        Ok(Self {
            config,
            projection,
            blocks,
            norm,
            head,
        })
    }
}
