//! Concept-conditioned relevance: stop the backward pass at the concept
//! layer, keep only the part of `R^h` that lies along the concept vector, and
//! carry that through the rest of the network to the input.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::concepts::ConceptVector;
use crate::data::Dataset;
use crate::error::{shape_err, Error, Result};
use crate::lrp::{self, backward, backward_from, init_target, Composite, InitMode, InitTarget, RelevanceState};
use crate::nn::{nms, ActivationTrace, ModelGraph, NmsParams};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ProjectionMode {
    /// `out[c] = raw[c] * v̂[c]` with `v̂ = v / ‖v‖`.
    #[default]
    ChannelScale,
    /// `out[:, p] = (raw[:, p]·v / ‖v‖²) v` at every location `p`.
    OrthogonalProjection,
}

impl ProjectionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ProjectionMode::ChannelScale => "channel",
            ProjectionMode::OrthogonalProjection => "orth",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "channel" => Some(ProjectionMode::ChannelScale),
            "orth" => Some(ProjectionMode::OrthogonalProjection),
            _ => None,
        }
    }
}

/// Channel axis of a latent tensor: `[C]`, `[C,h,w]`, `[N,C]` or `[N,C,h,w]`.
fn channel_layout(t: &Tensor) -> Result<(usize, usize, usize)> {
    let s = t.shape();
    let (outer, c) = match s.len() {
        1 | 3 => (1, s[0]),
        2 | 4 => (s[0], s[1]),
        _ => return Err(shape_err!("latent relevance of rank {} has no channel axis", s.len())),
    };
    Ok((outer, c, t.len() / (outer * c)))
}

/// Keep the component of `raw` along `v` (see [`ProjectionMode`]).
pub fn project(raw: &Tensor, v: &[f32], mode: ProjectionMode) -> Result<Tensor> {
    let (outer, channels, inner) = channel_layout(raw)?;
    if channels != v.len() {
        return Err(shape_err!("relevance has {} channels, concept vector {}", channels, v.len()));
    }
    let norm_sq: f64 = v.iter().map(|&x| x as f64 * x as f64).sum();
    if norm_sq == 0.0 || !norm_sq.is_finite() {
        return Err(Error::Vector(format!("cannot project onto a vector with squared norm {norm_sq}")));
    }
    let mut out = Tensor::zeros(raw.shape());
    let src = raw.data();
    let dst = out.data_mut();
    match mode {
        ProjectionMode::ChannelScale => {
            let norm = libm::sqrt(norm_sq);
            for n in 0..outer {
                for (c, &vc) in v.iter().enumerate() {
                    let scale = vc as f64 / norm;
                    let base = (n * channels + c) * inner;
                    for i in base..base + inner {
                        dst[i] = (src[i] as f64 * scale) as f32;
                    }
                }
            }
        }
        ProjectionMode::OrthogonalProjection => {
            for n in 0..outer {
                let base = n * channels * inner;
                for p in 0..inner {
                    let dot: f64 = v.iter().enumerate().map(|(c, &vc)| src[base + c * inner + p] as f64 * vc as f64).sum();
                    let coeff = dot / norm_sq;
                    for (c, &vc) in v.iter().enumerate() {
                        dst[base + c * inner + p] = (coeff * vc as f64) as f32;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Result of one concept-conditioned explanation.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptAttribution {
    /// Channel sum of the input attribution, `[H, W]`.
    pub input_heatmap: Tensor,
    /// Full input attribution, `[1, C_in, H, W]`.
    pub input_attribution: Tensor,
    /// `R^h` at the concept layer, batch axis removed.
    pub raw_latent: Tensor,
    /// Projected `R^h`, batch axis removed.
    pub projected_latent: Tensor,
    /// `‖projected‖₁ / ‖raw‖₁`, clamped to `[0, 1]`; 0 when `raw` is zero.
    pub usage_ratio: f32,
    /// `‖projected‖₂ / ‖raw‖₂`; 0 when `raw` is zero.
    pub usage_ratio_l2: f32,
    pub concept: String,
    pub layer: String,
    pub init: &'static str,
    pub projection: ProjectionMode,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExplainOptions {
    pub composite: Composite,
    pub projection: ProjectionMode,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

fn strip_batch(t: &Tensor) -> Result<Tensor> {
    if t.rank() >= 2 && t.shape()[0] == 1 {
        t.reshape(&t.shape()[1..])
    } else {
        Ok(t.clone())
    }
}

/// Concept-conditioned explanation for a recorded forward pass.
pub fn explain_concept_traced(
    model: &ModelGraph,
    trace: &ActivationTrace,
    concept: &ConceptVector,
    target: &InitTarget,
    options: &ExplainOptions,
) -> Result<ConceptAttribution> {
    if trace.model_input().shape()[0] != 1 {
        return Err(shape_err!("explanations take one image at a time, got batch {}", trace.model_input().shape()[0]));
    }
    let upper = backward(model, trace, &options.composite, target, Some(&concept.layer))?;
    let (_, raw) = upper.layers.last().expect("stop layer is always recorded");
    let projected = project(raw, concept.vector.data(), options.projection)?;
    let lower = backward_from(model, trace, &options.composite, &concept.layer, projected.clone())?;

    let l1 = ratio(projected.l1_norm(), raw.l1_norm());
    if l1 > 1.0 {
        log::info!("usage ratio {l1:.4} for {} at {} clamped to 1", concept.meta.concept, concept.layer);
    }
    Ok(ConceptAttribution {
        input_heatmap: lrp::heatmap(&lower)?,
        input_attribution: lower.input_attribution.expect("pass reached the input"),
        raw_latent: strip_batch(raw)?,
        projected_latent: strip_batch(&projected)?,
        usage_ratio: l1.clamp(0.0, 1.0) as f32,
        usage_ratio_l2: ratio(projected.l2_norm(), raw.l2_norm()) as f32,
        concept: concept.meta.concept.clone(),
        layer: concept.layer.clone(),
        init: target.mode.label(),
        projection: options.projection,
    })
}

/// Forward `x` (`[1, C, H, W]`), build the initial target from `init`, and explain.
pub fn explain_concept(
    model: &ModelGraph,
    x: &Tensor,
    concept: &ConceptVector,
    init: &InitMode,
    options: &ExplainOptions,
) -> Result<ConceptAttribution> {
    let (logits, trace) = model.forward(x)?;
    let target = init_target(&logits, init)?;
    explain_concept_traced(model, &trace, concept, &target, options)
}

/// Plain LRP with every channel of `layer` outside `channels` zeroed on the
/// way down.
pub fn channel_masked_lrp(
    model: &ModelGraph,
    trace: &ActivationTrace,
    layer: &str,
    channels: &[usize],
    target: &InitTarget,
    composite: &Composite,
) -> Result<RelevanceState> {
    let upper = backward(model, trace, composite, target, Some(layer))?;
    let (_, raw) = upper.layers.last().expect("stop layer is always recorded");
    let (outer, c, inner) = channel_layout(raw)?;
    if let Some(&bad) = channels.iter().find(|&&k| k >= c) {
        return Err(Error::Index(format!("channel {bad} outside {c} channels of {layer}")));
    }
    let mut masked = raw.clone();
    for (i, v) in masked.data_mut().iter_mut().enumerate() {
        if !channels.contains(&((i / inner) % c)) {
            *v = 0.0;
        }
    }
    debug_assert_eq!(masked.len(), outer * c * inner);
    backward_from(model, trace, composite, layer, masked)
}

/// How each sample's backward pass is seeded when ranking a dataset.
#[derive(Debug, Clone, PartialEq)]
pub enum InitPolicy {
    Full,
    ClassMask(Vec<usize>),
    /// The highest-scoring detection after NMS; samples without one get a
    /// zero target and therefore a usage ratio of 0.
    TopDetection(NmsParams),
}

impl InitPolicy {
    pub fn resolve(&self, logits: &Tensor) -> Result<InitTarget> {
        match self {
            InitPolicy::Full => init_target(logits, &InitMode::FullOutput),
            InitPolicy::ClassMask(classes) => init_target(logits, &InitMode::ClassMask(classes.clone())),
            InitPolicy::TopDetection(params) => match nms(logits, params)?.first() {
                Some(det) => init_target(logits, &InitMode::SingleDetection(*det)),
                None => Ok(InitTarget { mode: InitMode::FullOutput, tensor: Tensor::zeros(logits.shape()) }),
            },
        }
    }
}

/// Usage ratio of one dataset sample.
pub fn sample_usage(
    model: &ModelGraph,
    x: &Tensor,
    concept: &ConceptVector,
    policy: &InitPolicy,
    options: &ExplainOptions,
) -> Result<f32> {
    let (logits, trace) = model.forward(x)?;
    let target = policy.resolve(&logits)?;
    Ok(explain_concept_traced(model, &trace, concept, &target, options)?.usage_ratio)
}

/// Descending by ratio, ties by ascending id.
pub fn sort_by_usage(entries: &mut [(usize, f32)]) {
    entries.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
}

pub fn rank_by_usage(
    model: &ModelGraph,
    dataset: &Dataset,
    concept: &ConceptVector,
    policy: &InitPolicy,
    options: &ExplainOptions,
) -> Result<Vec<(usize, f32)>> {
    let mut entries = dataset
        .samples
        .iter()
        .map(|s| Ok((s.id, sample_usage(model, &s.image(), concept, policy, options)?)))
        .collect::<Result<Vec<_>>>()?;
    sort_by_usage(&mut entries);
    Ok(entries)
}
