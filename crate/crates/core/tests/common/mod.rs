#![allow(dead_code)]

pub mod gradcheck;

use transfer_core::TrainConfig;

/// A model small enough for exhaustive checks on 8×8 inputs.
pub fn toy_config() -> TrainConfig {
    TrainConfig {
        input_size: 8,
        stage_channels: [4, 8, 8, 8],
        blocks_per_stage: 1,
        stage: 2,
        branches: 2,
        reduction: 4,
        embed_dim: 8,
        heads: 2,
        depth: 2,
        mlp_hidden: 8,
        num_classes: 3,
        p1: 0.6,
        p2: 0.3,
        ..TrainConfig::default()
    }
}
