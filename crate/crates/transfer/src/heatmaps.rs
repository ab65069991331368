//! Rollout heatmaps for single images, written as `rollout_*` PPM files.

use std::path::Path;

use rayon::prelude::*;
use transfer_core::model::argmax_rows;
use transfer_core::visualize::{attention_rollout, composite_with_local, fuse_heads, render_heatmap, HeadFusion, RgbImage};
use transfer_core::{Tensor, TransFer};

use crate::error::{CliError, Result};
use crate::{pnm, tft};

/// Everything rendered for one input image.
#[derive(Debug, Clone)]
pub struct Rendered {
    pub predicted: usize,
    /// Patch scores from attention rollout alone.
    pub rollout: Tensor,
    pub rollout_image: RgbImage,
    /// Rollout scores weighted by the local attention map, when the model has one.
    pub composite: Option<(Tensor, RgbImage)>,
}

pub fn render(model: &TransFer, image: &Tensor, fusion: HeadFusion) -> transfer_core::Result<Rendered> {
    let trace = model.trace(image)?;
    let fused = trace
        .attention
        .iter()
        .map(|a| fuse_heads(a, fusion))
        .collect::<transfer_core::Result<Vec<_>>>()?;
    let rollout = attention_rollout(&fused)?;
    let (mut heat, rollout_image) = render_heatmap(&rollout, trace.grid, image)?;
    let predicted = argmax_rows(&trace.logits)[0];
    heat.class_label = Some(predicted);
    let composite = match &trace.m_out {
        Some(m) => {
            let scores = composite_with_local(&rollout, m)?;
            let (_, img) = render_heatmap(&scores, trace.grid, image)?;
            Some((scores, img))
        }
        None => None,
    };
    Ok(Rendered {
        predicted,
        rollout,
        rollout_image,
        composite,
    })
}

/// Renders every image in parallel and writes `rollout_<name>.ppm`,
/// `rollout_local_<name>.ppm` and, with `dump`, the raw scores as TFT1.
pub fn write_all(
    model: &TransFer,
    images: &[(String, Tensor)],
    fusion: HeadFusion,
    dump: bool,
    out: &Path,
) -> Result<Vec<(String, usize)>> {
    let rendered: Vec<Rendered> = images
        .par_iter()
        .map(|(_, img)| render(model, img, fusion))
        .collect::<transfer_core::Result<_>>()?;
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let mut predictions = Vec::with_capacity(images.len());
    for ((name, _), r) in images.iter().zip(rendered) {
        pnm::write(&out.join(format!("rollout_{name}.ppm")), &pnm::encode_ppm(&r.rollout_image))?;
        if dump {
            tft::save(&out.join(format!("rollout_{name}.tft")), &r.rollout)?;
        }
        if let Some((scores, img)) = &r.composite {
            pnm::write(&out.join(format!("rollout_local_{name}.ppm")), &pnm::encode_ppm(img))?;
            if dump {
                tft::save(&out.join(format!("rollout_local_{name}.tft")), scores)?;
            }
        }
        predictions.push((name.clone(), r.predicted));
    }
    Ok(predictions)
}
