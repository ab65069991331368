//! The assembled model: stem → local CNNs → projection → encoder → head.

use alloc::vec::Vec;

use crate::config::TrainConfig;
use crate::encoder::{classify_head, encoder_block, project_to_sequence, BlockOutput, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::local_cnns::{LocalCnns, LocalOutput, MapRegularizer};
use crate::params::ParamStore;
use crate::regularizers::{DropDecision, Mode};
use crate::rng::{self, Rng};
use crate::stem::{Stem, StemConfig};
use crate::tensor::Tensor;

/// Stream of the seed used for parameter initialization.
const INIT_STREAM: u64 = 0x1417;

#[derive(Debug, Clone)]
pub struct TransFer {
    pub config: TrainConfig,
    pub params: ParamStore,
    pub stem: Stem,
    /// Absent in the "no local CNNs" ablation, where stem features feed the projection directly.
    pub local: Option<LocalCnns>,
    pub encoder: Encoder,
}

/// Everything recorded by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Var,
    pub stem_features: Var,
    pub local: Option<LocalOutput>,
    pub blocks: Vec<BlockOutput>,
}

impl ForwardOutput {
    /// MAD decisions of the local CNNs followed by the MSAD decisions of each block.
    pub fn decisions(&self) -> (Vec<DropDecision>, Vec<Vec<DropDecision>>) {
        let local = self.local.as_ref().map(|l| l.decisions.clone()).unwrap_or_default();
        let blocks = self.blocks.iter().map(|b| b.attention.decisions.clone()).collect();
        (local, blocks)
    }
}

/// Per-image attention record used by the visualizer.
#[derive(Debug, Clone)]
pub struct AttentionTrace {
    pub logits: Tensor,
    /// Per block, `[heads×N×N]`.
    pub attention: Vec<Tensor>,
    /// Aggregated local attention `M_out` as `[h×w]`, if the model has local CNNs.
    pub m_out: Option<Tensor>,
    /// Raw branch maps, each `[h×w]`.
    pub branch_maps: Vec<Tensor>,
    pub grid: usize,
}

impl TransFer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::derive(config.seed, INIT_STREAM);
        let mut params = ParamStore::new();
        let stem = Stem::new(
            StemConfig {
                input_size: config.input_size,
                stage_channels: config.stage_channels,
                blocks_per_stage: config.blocks_per_stage,
                output_stage: config.stage,
            },
            &mut params,
            &mut rng,
        )?;
        let (grid, channels) = stem.config.output_geometry();
        let local = if config.local_cnns {
            if config.branches == 1 && config.p1 > 0.0 {
                log::warn!("a single LANet branch with p1 > 0 zeroes the whole feature map whenever MAD fires");
            }
            Some(LocalCnns::new(&mut params, config.branches, channels, config.reduction, &mut rng)?)
        } else {
            None
        };
        let encoder = Encoder::new(
            EncoderConfig {
                in_channels: channels,
                grid,
                embed_dim: config.embed_dim,
                heads: config.heads,
                depth: config.depth,
                mlp_hidden: config.mlp_hidden,
                num_classes: config.num_classes,
            },
            &mut params,
            &mut rng,
        )?;
        Ok(Self {
            config,
            params,
            stem,
            local,
            encoder,
        })
    }

    pub fn map_regularizer(&self) -> MapRegularizer {
        MapRegularizer {
            kind: self.config.regularizer_kind,
            p: self.config.p1,
            block_size: self.config.block_size,
        }
    }

    /// Records the full forward pass for `images: [n×s×s×3]`.
    pub fn forward(&self, g: &mut Graph, images: Var, mode: Mode, rng: &mut Rng) -> Result<ForwardOutput> {
        let stem_features = self.stem.forward(g, &self.params, images)?;
        let (features, local) = match &self.local {
            Some(l) => {
                let out = l.forward(g, &self.params, stem_features, self.map_regularizer(), mode, rng)?;
                (out.features, Some(out))
            }
            None => (stem_features, None),
        };
        let mut x = project_to_sequence(g, &self.params, &self.encoder.projection, features)?;
        let mut blocks = Vec::with_capacity(self.encoder.blocks.len());
        for block in &self.encoder.blocks {
            let out = encoder_block(g, &self.params, block, x, self.config.p2, mode, rng)?;
            x = out.output;
            blocks.push(out);
        }
        let x = self.encoder.norm.forward(g, &self.params, x)?;
        let logits = classify_head(g, &self.params, &self.encoder.head, x)?;
        Ok(ForwardOutput {
            logits,
            stem_features,
            local,
            blocks,
        })
    }

    /// Logits `[n×classes]` for a batch of images.
    pub fn logits(&self, images: &Tensor, mode: Mode, rng: &mut Rng) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(batched(images)?);
        let out = self.forward(&mut g, x, mode, rng)?;
        Ok(g.value(out.logits).clone())
    }

    /// Inference-mode class predictions.
    pub fn predict(&self, images: &Tensor) -> Result<Vec<usize>> {
        // inference draws nothing, so the generator is never advanced
        let logits = self.logits(images, Mode::Inference, &mut rng::seeded(0))?;
        Ok(argmax_rows(&logits))
    }

    /// Attention weights and local maps for one image, in inference mode.
    pub fn trace(&self, image: &Tensor) -> Result<AttentionTrace> {
        let mut g = Graph::new();
        let x = g.constant(batched(image)?);
        if g.shape(x)[0] != 1 {
            return Err(Error::usage("trace takes a single image"));
        }
        let out = self.forward(&mut g, x, Mode::Inference, &mut rng::seeded(0))?;
        let grid = self.encoder.config.grid;
        let attention = out
            .blocks
            .iter()
            .map(|b| {
                let s = g.shape(b.attention.attn);
                let shape = [s[1], s[2], s[3]];
                g.value(b.attention.attn).clone().reshape(&shape)
            })
            .collect::<Result<Vec<_>>>()?;
        let as_grid = |v: Var| g.value(v).clone().reshape(&[grid, grid]);
        let (m_out, branch_maps) = match &out.local {
            Some(l) => (
                Some(as_grid(l.m_out)?),
                l.maps.iter().map(|&m| as_grid(m)).collect::<Result<Vec<_>>>()?,
            ),
            None => (None, Vec::new()),
        };
        Ok(AttentionTrace {
            logits: g.value(out.logits).clone(),
            attention,
            m_out,
            branch_maps,
            grid,
        })
    }
}

/// Adds a leading batch axis to a single `[s×s×3]` image.
fn batched(images: &Tensor) -> Result<Tensor> {
    match images.rank() {
        4 => Ok(images.clone()),
        3 => {
            let mut shape = alloc::vec![1];
            shape.extend_from_slice(images.shape());
            images.clone().reshape(&shape)
        }
        _ => Err(Error::shape("model input", images.shape(), &[])),
    }
}

/// Index of the largest entry of each row (first on ties).
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let classes = logits.shape()[logits.rank() - 1];
    logits
        .data()
        .chunks(classes)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
        })
        .collect()
}
