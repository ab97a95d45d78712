//! On-disk exports of relevance passes, concept attributions and
//! perturbation curves.

use std::fs;
use std::path::Path;

use concept_probe_core::attribution::ConceptAttribution;
use concept_probe_core::lrp::RelevanceState;
use concept_probe_core::metrics::{concept_share_curve, PerturbationCurve};

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::format::save_tensor;

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(dir))
}

/// One tensor record per visited layer, named after the layer.
pub fn export_relevance(dir: &Path, state: &RelevanceState) -> Result<()> {
    ensure_dir(dir)?;
    for (name, relevance) in &state.layers {
        save_tensor(&dir.join(name), relevance)?;
    }
    Ok(())
}

pub fn export_attribution(dir: &Path, attribution: &ConceptAttribution) -> Result<()> {
    ensure_dir(dir)?;
    save_tensor(&dir.join("heatmap.cptn"), &attribution.input_heatmap)?;
    save_tensor(&dir.join("input_attribution.cptn"), &attribution.input_attribution)?;
    save_tensor(&dir.join("raw_latent.cptn"), &attribution.raw_latent)?;
    save_tensor(&dir.join("projected_latent.cptn"), &attribution.projected_latent)?;
    KeyValues::from_pairs([
        ("concept", attribution.concept.clone()),
        ("layer", attribution.layer.clone()),
        ("init", attribution.init.to_string()),
        ("projection", attribution.projection.as_str().to_string()),
        ("usage_ratio", attribution.usage_ratio.to_string()),
        ("usage_ratio_l2", attribution.usage_ratio_l2.to_string()),
    ])
    .write(&dir.join("meta.txt"))
}

/// Column names of every perturbation CSV.
pub const CURVE_HEADER: [&str; 5] = ["fraction", "class_score", "usage_ratio", "mu_c", "non_concept_share"];

#[derive(Debug, Clone, PartialEq)]
pub struct CurveRow {
    pub fraction: f32,
    pub class_score: f32,
    pub usage_ratio: f32,
    /// Mean over the samples where the metric was defined.
    pub mu_c: Option<f32>,
    pub non_concept_share: f32,
}

/// Step-wise mean of curves that share one fraction schedule.
pub fn mean_curve(curves: &[PerturbationCurve]) -> Vec<CurveRow> {
    let Some(first) = curves.first() else { return Vec::new() };
    let n = curves.len() as f32;
    let shares: Vec<Vec<f32>> = curves.iter().map(concept_share_curve).collect();
    (0..first.fractions.len())
        .map(|i| {
            let defined: Vec<f32> = curves.iter().filter_map(|c| c.localization_scores[i]).collect();
            CurveRow {
                fraction: first.fractions[i],
                class_score: curves.iter().map(|c| c.class_scores[i]).sum::<f32>() / n,
                usage_ratio: curves.iter().map(|c| c.usage_ratios[i]).sum::<f32>() / n,
                mu_c: (!defined.is_empty()).then(|| defined.iter().sum::<f32>() / defined.len() as f32),
                non_concept_share: shares.iter().map(|s| s[i]).sum::<f32>() / n,
            }
        })
        .collect()
}

/// Writes a `# key=value ...` settings line, the fixed header and one row per
/// step; an undefined `mu_c` is an empty field.
pub fn write_curve_csv(path: &Path, rows: &[CurveRow], settings: &KeyValues) -> Result<()> {
    let mut text = String::from("#");
    for (k, v) in settings.iter() {
        text.push_str(&format!(" {k}={v}"));
    }
    text.push('\n');
    text.push_str(&CURVE_HEADER.join(","));
    text.push('\n');
    for r in rows {
        let mu = r.mu_c.map(|m| m.to_string()).unwrap_or_default();
        text.push_str(&format!("{},{},{},{},{}\n", r.fraction, r.class_score, r.usage_ratio, mu, r.non_concept_share));
    }
    fs::write(path, text).map_err(Error::io(path))
}
