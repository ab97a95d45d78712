use alloc::format;
use alloc::vec::Vec;

use super::graph::ModelGraph;
use super::layer::{bn_affine, Layer, LayerSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Fold every batch norm into the linear layer directly before it.
///
/// For a per-channel scale `s = gamma / sqrt(var + eps)` the merged layer has
/// `w' = w * s` and `b' = (b - mean) * s + beta`.
pub fn canonize(model: &ModelGraph) -> Result<ModelGraph> {
    let mut merged: Vec<LayerSpec> = Vec::with_capacity(model.layers().len());
    for spec in model.layers() {
        let Layer::BatchNorm { gamma, beta, mean, var, eps } = &spec.layer else {
            merged.push(spec.clone());
            continue;
        };
        let prev = merged.last_mut().filter(|p| p.kind().is_linear()).ok_or_else(|| {
            Error::Canonize(format!("batch norm {} does not follow a linear layer", spec.name))
        })?;
        let (scale, shift) = bn_affine(gamma, beta, mean, var, *eps);
        let rows_per_channel = match &prev.layer {
            Layer::DetectionHead { weight, grid, .. } if weight.rank() == 2 => grid.0 * grid.1,
            _ => 1,
        };
        let (weight, bias) = prev.layer.linear_params_mut().expect("linear layer");
        let rows = weight.shape()[0];
        if rows != scale.len() * rows_per_channel {
            return Err(Error::Canonize(format!(
                "batch norm {} has {} channels, {} produces {} outputs",
                spec.name,
                scale.len(),
                prev.name,
                rows
            )));
        }
        let row_len = weight.len() / rows;
        for (r, row) in weight.data_mut().chunks_mut(row_len).enumerate() {
            let s = scale[r / rows_per_channel];
            row.iter_mut().for_each(|w| *w = (*w as f64 * s) as f32);
        }
        let new_bias: Vec<f32> = (0..rows)
            .map(|r| {
                let c = r / rows_per_channel;
                let b = bias.as_ref().map_or(0.0, |b| b.data()[r] as f64);
                (b * scale[c] + shift[c]) as f32
            })
            .collect();
        *bias = Some(Tensor::vector(&new_bias));
    }
    ModelGraph::new(merged, model.input_shape())
        .map_err(|e| Error::Canonize(format!("merged graph invalid: {e}")))
}

/// True when the graph contains no batch norm.
pub fn is_canonical(model: &ModelGraph) -> bool {
    model.layers().iter().all(|l| !matches!(l.layer, Layer::BatchNorm { .. }))
}
