//! Reduced residual backbone standing in for a truncated IR-50.
//!
//! Stage `i` halves the resolution with a strided 3×3 convolution to
//! `stage_channels[i-1]` channels and then runs `blocks_per_stage` residual
//! blocks `x + conv2(relu(conv1(x)))`. The forward pass stops after
//! `output_stage`, so an `s×s` image yields an `s/2^stage` feature map.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::Conv;
use crate::params::ParamStore;
use crate::rng::Rng;

/// Kernel gain of the second convolution in each residual block; keeps the
/// residual stream from growing block over block at initialization.
const RESIDUAL_GAIN: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StemConfig {
    pub input_size: usize,
    pub stage_channels: [usize; 4],
    pub blocks_per_stage: usize,
    pub output_stage: usize,
}

impl Default for StemConfig {
    fn default() -> Self {
        Self {
            input_size: 48,
            stage_channels: [16, 32, 64, 128],
            blocks_per_stage: 2,
            output_stage: 3,
        }
    }
}

impl StemConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=4).contains(&self.output_stage) {
            return Err(Error::config(format!(
                "output stage {} not in {{2, 3, 4}}",
                self.output_stage
            )));
        }
        if self.input_size == 0 || self.input_size % (1 << self.output_stage) != 0 {
            return Err(Error::config(format!(
                "input size {} not divisible by 2^{}",
                self.input_size, self.output_stage
            )));
        }
        Ok(())
    }

    /// `(side, channels)` of the output feature map.
    pub fn output_geometry(&self) -> (usize, usize) {
        (
            self.input_size >> self.output_stage,
            self.stage_channels[self.output_stage - 1],
        )
    }
}

#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub conv1: Conv,
    pub conv2: Conv,
}

impl ResidualBlock {
    pub fn forward(&self, g: &mut Graph, params: &ParamStore, x: Var) -> Result<Var> {
        let h = self.conv1.forward(g, params, x)?;
        let h = g.relu(h);
        let h = self.conv2.forward(g, params, h)?;
        g.add(x, h)
    }
}

#[derive(Debug, Clone)]
pub struct Stage {
    pub down: Conv,
    pub blocks: Vec<ResidualBlock>,
}

#[derive(Debug, Clone)]
pub struct Stem {
    pub config: StemConfig,
    pub stages: Vec<Stage>,
}

impl Stem {
    /// Registers parameters as `stem.stage{i}.{down|block{j}.conv1|block{j}.conv2}`.
    pub fn new(config: StemConfig, params: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut c_in = 3;
        let mut stages = Vec::with_capacity(config.output_stage);
        for i in 1..=config.output_stage {
            let c = config.stage_channels[i - 1];
            let prefix = format!("stem.stage{i}");
            let down = Conv::new(params, &format!("{prefix}.down"), 3, c_in, c, 2, 1.0, rng);
            let blocks = (0..config.blocks_per_stage)
                .map(|j| ResidualBlock {
                    conv1: Conv::new(params, &format!("{prefix}.block{j}.conv1"), 3, c, c, 1, 1.0, rng),
                    conv2: Conv::new(
                        params,
                        &format!("{prefix}.block{j}.conv2"),
                        3,
                        c,
                        c,
                        1,
                        RESIDUAL_GAIN,
                        rng,
                    ),
                })
                .collect();
            stages.push(Stage { down, blocks });
            c_in = c;
        }
        Ok(Self { config, stages })
    }

    /// `image: [n×s×s×3]` (or `[s×s×3]`) → feature map at the configured stage.
    pub fn forward(&self, g: &mut Graph, params: &ParamStore, image: Var) -> Result<Var> {
        let shape = g.shape(image);
        let s = self.config.input_size;
        let spatial = &shape[shape.len().saturating_sub(3)..];
        if shape.len() < 3 || spatial != [s, s, 3] {
            return Err(Error::shape("stem_forward", shape, &[s, s, 3]));
        }
        let mut x = image;
        for stage in &self.stages {
            x = stage.down.forward(g, params, x)?;
            x = g.relu(x);
            for block in &stage.blocks {
                x = block.forward(g, params, x)?;
            }
        }
        Ok(x)
    }
}
