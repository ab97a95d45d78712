//! Localization of positive attribution inside a concept mask, and the
//! pixel-removal protocol that tracks one detection's class score and the
//! concept share of its explanation.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attribution::{explain_concept_traced, ExplainOptions};
use crate::concepts::ConceptVector;
use crate::error::{shape_err, Error, Result};
use crate::lrp::{init_target, InitMode};
use crate::nn::{class_score, Detection, ModelGraph};
use crate::tensor::Tensor;

pub const DEFAULT_FRACTIONS: [f32; 8] = [0.0, 0.02, 0.05, 0.1, 0.2, 0.3, 0.5, 1.0];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalizationResult {
    pub mu_c: f32,
    pub inside_mass: f64,
    pub total_mass: f64,
}

/// Share of positive heatmap mass that falls inside a binary mask.
pub fn localization(heatmap: &Tensor, mask: &Tensor) -> Result<LocalizationResult> {
    if heatmap.shape() != mask.shape() || heatmap.rank() != 2 {
        return Err(shape_err!("heatmap {:?} and mask {:?} must be equal [H,W]", heatmap.shape(), mask.shape()));
    }
    if mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
        return Err(Error::Data("mask is not binary".into()));
    }
    let (mut inside, mut total) = (0.0f64, 0.0f64);
    for (&h, &m) in heatmap.data().iter().zip(mask.data()) {
        if h > 0.0 {
            total += h as f64;
            if m == 1.0 {
                inside += h as f64;
            }
        }
    }
    if total == 0.0 {
        return Err(Error::UndefinedMetric("heatmap has no positive mass".into()));
    }
    Ok(LocalizationResult { mu_c: (inside / total) as f32, inside_mass: inside, total_mass: total })
}

/// Value written into removed pixels.
#[derive(Debug, Clone, PartialEq)]
pub enum Fill {
    /// One value per input channel, normally the dataset mean.
    Mean(Vec<f32>),
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PixelOrder {
    /// Signed heatmap, most positive first, ties in row-major order.
    Ranked,
    /// Seeded uniform permutation.
    Random(u64),
}

impl PixelOrder {
    pub fn label(self) -> &'static str {
        match self {
            PixelOrder::Ranked => "ranked",
            PixelOrder::Random(_) => "random",
        }
    }
}

/// Spatial indices of `heatmap` in removal order.
pub fn pixel_order(heatmap: &Tensor, order: PixelOrder) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..heatmap.len()).collect();
    match order {
        PixelOrder::Ranked => {
            let h = heatmap.data();
            idx.sort_by(|&a, &b| h[b].total_cmp(&h[a]));
        }
        PixelOrder::Random(seed) => idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed)),
    }
    idx
}

/// Number of pixels removed at `fraction` of `total`.
pub fn removal_count(fraction: f32, total: usize) -> usize {
    (libm::round(fraction as f64 * total as f64) as usize).min(total)
}

/// Copy of `x` (`[1, C, H, W]`) with the first `count` pixels of `order`
/// replaced by `fill` in every channel.
pub fn perturb(x: &Tensor, order: &[usize], count: usize, fill: &Fill) -> Result<Tensor> {
    let s = x.shape4()?;
    let plane = s.height * s.width;
    if let Fill::Mean(values) = fill {
        if values.len() != s.channels {
            return Err(shape_err!("{} fill values for {} channels", values.len(), s.channels));
        }
    }
    let mut out = x.clone();
    let data = out.data_mut();
    for &p in &order[..count.min(order.len())] {
        for c in 0..s.channels {
            let value = match fill {
                Fill::Mean(values) => values[c],
                Fill::Zero => 0.0,
            };
            for n in 0..s.batch {
                data[(n * s.channels + c) * plane + p] = value;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationConfig {
    pub fractions: Vec<f32>,
    pub fill: Fill,
    pub order: PixelOrder,
    pub explain: ExplainOptions,
}

impl PerturbationConfig {
    pub fn new(fill: Fill, order: PixelOrder) -> Self {
        Self { fractions: DEFAULT_FRACTIONS.to_vec(), fill, order, explain: ExplainOptions::default() }
    }

    fn validate(&self) -> Result<()> {
        let f = &self.fractions;
        if f.first() != Some(&0.0) {
            return Err(Error::Data("perturbation fractions must start at 0".into()));
        }
        if f.windows(2).any(|w| w[1] <= w[0]) || f.iter().any(|&v| v > 1.0) {
            return Err(Error::Data(format!("fractions {f:?} must increase strictly within [0, 1]")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationCurve {
    pub fractions: Vec<f32>,
    pub class_scores: Vec<f32>,
    pub usage_ratios: Vec<f32>,
    /// `None` where the fresh heatmap had no positive mass.
    pub localization_scores: Vec<Option<f32>>,
    pub order: PixelOrder,
}

/// Remove pixels of `x` in the order given by `heatmap` (or at random),
/// re-running the model and a fresh concept explanation of the tracked
/// detection after each step.
pub fn perturb_and_score(
    model: &ModelGraph,
    x: &Tensor,
    heatmap: &Tensor,
    mask: &Tensor,
    concept: &ConceptVector,
    detection: &Detection,
    config: &PerturbationConfig,
) -> Result<PerturbationCurve> {
    config.validate()?;
    let s = x.shape4()?;
    if heatmap.shape() != [s.height, s.width] {
        return Err(shape_err!("heatmap {:?} does not cover input {:?}", heatmap.shape(), x.shape()));
    }
    let order = pixel_order(heatmap, config.order);
    let mode = InitMode::SingleDetection(*detection);
    let mut curve = PerturbationCurve {
        fractions: config.fractions.clone(),
        class_scores: Vec::with_capacity(config.fractions.len()),
        usage_ratios: Vec::with_capacity(config.fractions.len()),
        localization_scores: Vec::with_capacity(config.fractions.len()),
        order: config.order,
    };
    for &fraction in &config.fractions {
        let perturbed = perturb(x, &order, removal_count(fraction, order.len()), &config.fill)?;
        let (logits, trace) = model.forward(&perturbed)?;
        curve.class_scores.push(class_score(&logits, detection.cell, detection.class_id)?);
        let target = init_target(&logits, &mode)?;
        let attribution = explain_concept_traced(model, &trace, concept, &target, &config.explain)?;
        curve.usage_ratios.push(attribution.usage_ratio);
        curve.localization_scores.push(match localization(&attribution.input_heatmap, mask) {
            Ok(r) => Some(r.mu_c),
            Err(Error::UndefinedMetric(_)) => None,
            Err(e) => return Err(e),
        });
    }
    Ok(curve)
}

/// `1 - usage_ratio` per step.
pub fn concept_share_curve(curve: &PerturbationCurve) -> Vec<f32> {
    curve.usage_ratios.iter().map(|u| 1.0 - u).collect()
}

/// Trapezoidal area under `(xs, ys)`.
pub fn auc(xs: &[f32], ys: &[f32]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(shape_err!("{} abscissae for {} values", xs.len(), ys.len()));
    }
    Ok(xs
        .windows(2)
        .zip(ys.windows(2))
        .map(|(x, y)| (x[1] - x[0]) as f64 * (y[0] as f64 + y[1] as f64) / 2.0)
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(h: usize, w: usize, v: &[f32]) -> Tensor {
        Tensor::new(vec![h, w], v.to_vec()).unwrap()
    }

    #[test]
    fn all_mass_inside() {
        let r = localization(&t2(1, 3, &[1.0, 2.0, -1.0]), &t2(1, 3, &[1.0, 1.0, 0.0])).unwrap();
        assert_eq!(r.mu_c, 1.0);
    }

    #[test]
    fn uniform_half_mask() {
        let r = localization(&Tensor::full(&[2, 2], 0.3), &t2(2, 2, &[1.0, 0.0, 1.0, 0.0])).unwrap();
        assert!((r.mu_c - 0.5).abs() < 1e-7);
    }

    #[test]
    fn negatives_do_not_count() {
        let r = localization(&t2(1, 2, &[-1.0, 2.0]), &t2(1, 2, &[1.0, 0.0])).unwrap();
        assert_eq!((r.mu_c, r.inside_mass, r.total_mass), (0.0, 0.0, 2.0));
    }

    #[test]
    fn no_positive_mass_is_undefined() {
        let err = localization(&t2(1, 2, &[-1.0, 0.0]), &t2(1, 2, &[1.0, 0.0])).unwrap_err();
        assert_eq!(err.name(), "UndefinedMetric");
        assert_eq!(localization(&t2(1, 2, &[1.0, 0.0]), &t2(1, 2, &[0.5, 0.0])).unwrap_err().name(), "DataError");
    }

    #[test]
    fn ranked_order_breaks_ties_row_major() {
        let h = t2(2, 2, &[1.0, 3.0, 3.0, -2.0]);
        assert_eq!(pixel_order(&h, PixelOrder::Ranked), vec![1, 2, 0, 3]);
        let a = pixel_order(&h, PixelOrder::Random(4));
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2, 3]);
        assert_eq!(a, pixel_order(&h, PixelOrder::Random(4)));
    }

    #[test]
    fn perturb_fills_every_channel() {
        let x = Tensor::from_fn(&[1, 2, 2, 2], |i| i as f32);
        let out = perturb(&x, &[3, 0], 1, &Fill::Mean(vec![-1.0, -2.0])).unwrap();
        assert_eq!(out.data(), &[0.0, 1.0, 2.0, -1.0, 4.0, 5.0, 6.0, -2.0]);
        let out = perturb(&x, &[3, 0], 2, &Fill::Zero).unwrap();
        assert_eq!(out.data(), &[0.0, 1.0, 2.0, 0.0, 0.0, 5.0, 6.0, 0.0]);
    }

    #[test]
    fn trapezoid_area() {
        assert!((auc(&[0.0, 0.5, 1.0], &[1.0, 1.0, 0.0]).unwrap() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn share_complements_usage() {
        let curve = PerturbationCurve {
            fractions: vec![0.0, 1.0],
            class_scores: vec![0.9, 0.3],
            usage_ratios: vec![1.0, 0.0],
            localization_scores: vec![Some(1.0), None],
            order: PixelOrder::Ranked,
        };
        assert_eq!(concept_share_curve(&curve), vec![0.0, 1.0]);
    }

    #[test]
    fn removal_counts_cover_endpoints() {
        assert_eq!(removal_count(0.0, 1024), 0);
        assert_eq!(removal_count(1.0, 1024), 1024);
        assert_eq!(removal_count(0.02, 1024), 20);
    }
}
