//! Layer-wise relevance propagation over a canonized [`ModelGraph`].
//!
//! Relevance moves from a layer's output `R_j` to its input by
//! `R_i = Σ_j z_ij / z_j · R_j`. Linear layers use either the ε-rule (`z_j`
//! stabilized by `ε·sign(z_j)`, `sign(0) = +1`) or α1β0 (only positive
//! contributions `(w_ij a_i)⁺` and `b_j⁺` count). ReLU passes relevance through,
//! max pooling routes it to the first winner, flatten reshapes it.
//! Biases take part in `z_j` and keep the relevance they absorb.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::nn::{ActivationTrace, Detection, Layer, LayerKind, LayerSpec, ModelGraph};
use crate::tensor::{self, Tensor};

pub const DEFAULT_EPSILON: f32 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrpRule {
    Epsilon(f32),
    /// α = 1, β = 0.
    AlphaBeta,
    Pass,
}

impl LrpRule {
    fn check(self) -> Result<Self> {
        match self {
            LrpRule::Epsilon(eps) if !(eps > 0.0 && eps.is_finite()) => {
                Err(Error::Data(format!("epsilon must be positive, got {eps}")))
            }
            rule => Ok(rule),
        }
    }
}

/// Ordered `pattern -> rule` assignments; the first matching pattern wins and
/// unmatched layers fall back to the default for their kind (ε on dense layers
/// and the head, α1β0 on convolutions).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Composite {
    rules: Vec<(String, LrpRule)>,
}

impl Composite {
    pub fn new() -> Self {
        Self::default()
    }

    /// ε everywhere, the setting under which relevance is conserved.
    pub fn epsilon(eps: f32) -> Self {
        Self::new().with_rule("*", LrpRule::Epsilon(eps))
    }

    pub fn with_rule(mut self, pattern: impl Into<String>, rule: LrpRule) -> Self {
        self.rules.push((pattern.into(), rule));
        self
    }

    pub fn rules(&self) -> &[(String, LrpRule)] {
        &self.rules
    }

    pub fn default_rule(kind: LayerKind) -> LrpRule {
        match kind {
            LayerKind::Conv => LrpRule::AlphaBeta,
            LayerKind::Dense | LayerKind::DetectionHead => LrpRule::Epsilon(DEFAULT_EPSILON),
            _ => LrpRule::Pass,
        }
    }

    pub fn rule_for(&self, spec: &LayerSpec) -> LrpRule {
        let kind = spec.kind();
        if !kind.is_linear() {
            return LrpRule::Pass;
        }
        self.rules
            .iter()
            .find(|(pattern, _)| glob_match(pattern, &spec.name))
            .map_or_else(|| Self::default_rule(kind), |(_, rule)| *rule)
    }

    /// Every linear layer must resolve to ε or α1β0 with a valid ε.
    pub fn validate(&self, model: &ModelGraph) -> Result<()> {
        for (_, rule) in &self.rules {
            rule.check()?;
        }
        for spec in model.layers() {
            if spec.kind().is_linear() && self.rule_for(spec) == LrpRule::Pass {
                return Err(Error::Data(format!("linear layer {} cannot use the pass rule", spec.name)));
            }
        }
        Ok(())
    }
}

/// `*` matches any run of characters, `?` exactly one.
pub fn glob_match(pattern: &str, name: &str) -> bool {
    let p: Vec<char> = pattern.chars().collect();
    let n: Vec<char> = name.chars().collect();
    let (mut pi, mut ni) = (0, 0);
    let mut star: Option<(usize, usize)> = None;
    while ni < n.len() {
        if pi < p.len() && (p[pi] == '?' || p[pi] == n[ni]) {
            pi += 1;
            ni += 1;
        } else if pi < p.len() && p[pi] == '*' {
            star = Some((pi, ni));
            pi += 1;
        } else if let Some((sp, sn)) = star {
            pi = sp + 1;
            ni = sn + 1;
            star = Some((sp, sn + 1));
        } else {
            return false;
        }
    }
    p[pi..].iter().all(|&c| c == '*')
}

/// How the backward pass is seeded from the head logits.
#[derive(Debug, Clone, PartialEq)]
pub enum InitMode {
    /// Positive logits scaled by their global maximum.
    FullOutput,
    /// As `FullOutput`, restricted to the listed classes.
    ClassMask(Vec<usize>),
    /// One-hot at the detection's class and cell.
    SingleDetection(Detection),
}

impl InitMode {
    pub fn label(&self) -> &'static str {
        match self {
            InitMode::FullOutput => "full",
            InitMode::ClassMask(_) => "classmask",
            InitMode::SingleDetection(_) => "single",
        }
    }
}

/// Non-negative tensor shaped like the head logits.
#[derive(Debug, Clone, PartialEq)]
pub struct InitTarget {
    pub mode: InitMode,
    pub tensor: Tensor,
}

fn clipped_scaled(logits: &Tensor) -> Tensor {
    let clipped = logits.map(|v| v.max(0.0));
    let max = clipped.max_value();
    if max > 0.0 {
        clipped.map(|v| v / max)
    } else {
        clipped
    }
}

pub fn init_target(logits: &Tensor, mode: &InitMode) -> Result<InitTarget> {
    let &[_, classes, gh, gw] = logits.shape() else {
        return Err(shape_err!("head logits must be [N,K,Gh,Gw], got {:?}", logits.shape()));
    };
    let tensor = match mode {
        InitMode::FullOutput => clipped_scaled(logits),
        InitMode::ClassMask(selected) => {
            if let Some(&bad) = selected.iter().find(|&&c| c >= classes) {
                return Err(Error::Index(format!("class {bad} outside {classes} classes")));
            }
            let mut t = clipped_scaled(logits);
            let plane = gh * gw;
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                if !selected.contains(&((i / plane) % classes)) {
                    *v = 0.0;
                }
            }
            t
        }
        InitMode::SingleDetection(det) => {
            let (row, col) = det.cell;
            if row >= gh || col >= gw {
                return Err(Error::Index(format!("cell ({row}, {col}) outside {gh}x{gw} grid")));
            }
            if det.class_id >= classes {
                return Err(Error::Index(format!("class {} outside {classes} classes", det.class_id)));
            }
            let mut t = Tensor::zeros(logits.shape());
            t.data_mut()[(det.class_id * gh + row) * gw + col] = 1.0;
            t
        }
    };
    Ok(InitTarget { mode: mode.clone(), tensor })
}

/// Relevance at the output of every visited layer, plus the input attribution
/// when the pass ran all the way down.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RelevanceState {
    pub layers: Vec<(String, Tensor)>,
    pub input_attribution: Option<Tensor>,
}

impl RelevanceState {
    pub fn relevance(&self, name: &str) -> Option<&Tensor> {
        self.layers.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

/// Full backward pass from `target`, optionally halting at `stop_layer` whose
/// output relevance is then the last entry of the state.
pub fn backward(
    model: &ModelGraph,
    trace: &ActivationTrace,
    composite: &Composite,
    target: &InitTarget,
    stop_layer: Option<&str>,
) -> Result<RelevanceState> {
    let last = model.layers().len() - 1;
    let stop = stop_layer.map(|name| model.layer_index(name)).transpose()?;
    if target.tensor.shape() != trace.model_output().shape() {
        return Err(shape_err!(
            "target {:?} does not match head output {:?}",
            target.tensor.shape(),
            trace.model_output().shape()
        ));
    }
    propagate(model, trace, composite, last, target.tensor.clone(), stop)
}

/// Continue a pass from relevance held at the output of `layer`, through that
/// layer and everything below it, to the input.
pub fn backward_from(
    model: &ModelGraph,
    trace: &ActivationTrace,
    composite: &Composite,
    layer: &str,
    relevance: Tensor,
) -> Result<RelevanceState> {
    let index = model.layer_index(layer)?;
    propagate(model, trace, composite, index, relevance, None)
}

fn propagate(
    model: &ModelGraph,
    trace: &ActivationTrace,
    composite: &Composite,
    top: usize,
    mut relevance: Tensor,
    stop: Option<usize>,
) -> Result<RelevanceState> {
    composite.validate(model)?;
    if trace.len() != model.layers().len() {
        return Err(Error::Trace(format!(
            "trace has {} entries, model has {} layers",
            trace.len(),
            model.layers().len()
        )));
    }
    let mut state = RelevanceState::default();
    for index in (0..=top).rev() {
        let spec = &model.layers()[index];
        if trace.names()[index] != spec.name {
            return Err(Error::Trace(format!("trace entry {index} is not layer {}", spec.name)));
        }
        let (input, output) = trace.at(index)?;
        if relevance.shape() != output.shape() {
            return Err(shape_err!(
                "relevance {:?} does not match output {:?} of {}",
                relevance.shape(),
                output.shape(),
                spec.name
            ));
        }
        state.layers.push((spec.name.clone(), relevance.clone()));
        if Some(index) == stop {
            return Ok(state);
        }
        relevance = layer_relevance(spec, composite.rule_for(spec), input, output, &relevance)?;
    }
    if let Some(stop) = stop {
        if stop > top {
            return Err(Error::Name(format!("stop layer {} lies above the start", model.layers()[stop].name)));
        }
    }
    state.input_attribution = Some(relevance);
    Ok(state)
}

fn layer_relevance(
    spec: &LayerSpec,
    rule: LrpRule,
    input: &Tensor,
    output: &Tensor,
    relevance: &Tensor,
) -> Result<Tensor> {
    match &spec.layer {
        Layer::ReLU => Ok(relevance.clone()),
        Layer::Flatten => relevance.reshape(input.shape()),
        Layer::MaxPool { size, stride } => {
            let (_, winners) = tensor::max_pool(input, *size, *stride)?;
            tensor::max_pool_scatter(relevance, &winners, input.shape())
        }
        Layer::BatchNorm { .. } => Err(Error::Canonize(format!(
            "batch norm {} must be merged before relevance propagation",
            spec.name
        ))),
        linear => {
            let (weight, bias) = linear.linear_params().expect("remaining kinds are linear");
            match rule {
                LrpRule::Epsilon(eps) => epsilon_rule(linear, weight, input, output, relevance, eps),
                LrpRule::AlphaBeta => alpha_beta_rule(linear, weight, bias, input, relevance),
                LrpRule::Pass => Err(Error::Data(format!("pass rule on linear layer {}", spec.name))),
            }
        }
    }
}

/// Apply the linear map of `layer` with a substitute weight and bias.
fn linear_apply(layer: &Layer, x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    match layer {
        Layer::Conv { stride, pad, .. } | Layer::DetectionHead { stride, pad, .. } if weight.rank() == 4 => {
            tensor::conv2d(x, weight, bias, *stride, *pad)
        }
        _ => tensor::dense(x, weight, bias),
    }
}

/// Adjoint of [`linear_apply`]; `signal` is shaped like the layer output.
fn linear_transpose(layer: &Layer, signal: &Tensor, weight: &Tensor, input: &Tensor) -> Result<Tensor> {
    match layer {
        Layer::Conv { stride, pad, .. } | Layer::DetectionHead { stride, pad, .. } if weight.rank() == 4 => {
            tensor::conv2d_transpose(signal, weight, input.shape4()?, *stride, *pad)
        }
        _ => {
            let flat = signal.reshape(&[input.shape()[0], weight.shape()[0]])?;
            tensor::dense_transpose(&flat, weight)
        }
    }
}

fn epsilon_rule(
    layer: &Layer,
    weight: &Tensor,
    input: &Tensor,
    output: &Tensor,
    relevance: &Tensor,
    eps: f32,
) -> Result<Tensor> {
    let eps = eps as f64;
    let ratio = Tensor::new(
        relevance.shape().to_vec(),
        relevance
            .data()
            .iter()
            .zip(output.data())
            .map(|(&r, &z)| {
                let z = z as f64;
                let denom = z + if z >= 0.0 { eps } else { -eps };
                (r as f64 / denom) as f32
            })
            .collect(),
    )?;
    let back = linear_transpose(layer, &ratio, weight, input)?;
    input.zip_map(&back, |a, c| a * c)
}

fn alpha_beta_rule(
    layer: &Layer,
    weight: &Tensor,
    bias: Option<&Tensor>,
    input: &Tensor,
    relevance: &Tensor,
) -> Result<Tensor> {
    let w_pos = weight.map(|w| w.max(0.0));
    let w_neg = weight.map(|w| w.min(0.0));
    let a_pos = input.map(|a| a.max(0.0));
    let has_negative_input = input.data().iter().any(|&a| a < 0.0);
    let a_neg = has_negative_input.then(|| input.map(|a| a.min(0.0)));
    let b_pos = bias.map(|b| b.map(|v| v.max(0.0)));

    // z⁺_j = Σ_i (w_ij a_i)⁺ + b_j⁺
    let mut z = linear_apply(layer, &a_pos, &w_pos, b_pos.as_ref())?;
    if let Some(a_neg) = &a_neg {
        let extra = linear_apply(layer, a_neg, &w_neg, None)?;
        z = z.zip_map(&extra, |p, q| p + q)?;
    }
    let z = z.into_reshaped(relevance.shape())?;
    let ratio = relevance.zip_map(&z, |r, z| if z > 0.0 { ((r as f64) / (z as f64)) as f32 } else { 0.0 })?;
    let mut out = a_pos.zip_map(&linear_transpose(layer, &ratio, &w_pos, input)?, |a, c| a * c)?;
    if let Some(a_neg) = &a_neg {
        let neg = a_neg.zip_map(&linear_transpose(layer, &ratio, &w_neg, input)?, |a, c| a * c)?;
        out = out.zip_map(&neg, |p, q| p + q)?;
    }
    Ok(out)
}

/// Channel sum of the input attribution of the first batch item, `[H, W]`.
pub fn heatmap(state: &RelevanceState) -> Result<Tensor> {
    let attribution = state
        .input_attribution
        .as_ref()
        .ok_or_else(|| Error::Trace("relevance pass stopped before the input".into()))?;
    let s = attribution.shape4()?;
    let plane = s.height * s.width;
    let mut out = alloc::vec![0.0f64; plane];
    for c in 0..s.channels {
        for (o, &v) in out.iter_mut().zip(&attribution.data()[c * plane..(c + 1) * plane]) {
            *o += v as f64;
        }
    }
    Tensor::new(alloc::vec![s.height, s.width], out.into_iter().map(|v| v as f32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{forward, BoxRect, Layer, LayerSpec};
    use crate::tensor::Shape4;
    use alloc::vec;

    fn single_neuron(w: [f32; 2]) -> ModelGraph {
        ModelGraph::new(
            vec![
                LayerSpec::new("flat", Layer::Flatten),
                LayerSpec::new(
                    "head",
                    Layer::DetectionHead {
                        weight: Tensor::new(vec![1, 2], w.to_vec()).unwrap(),
                        bias: None,
                        stride: 1,
                        pad: 0,
                        grid: (1, 1),
                    },
                ),
            ],
            Shape4::new(1, 2, 1, 1),
        )
        .unwrap()
    }

    fn input_relevance(model: &ModelGraph, composite: &Composite) -> Vec<f32> {
        let x = Tensor::new(vec![1, 2, 1, 1], vec![1.0, 1.0]).unwrap();
        let (logits, trace) = forward(model, &x).unwrap();
        let target = InitTarget { mode: InitMode::FullOutput, tensor: Tensor::full(logits.shape(), 1.0) };
        let state = backward(model, &trace, composite, &target, None).unwrap();
        state.input_attribution.unwrap().into_data()
    }

    #[test]
    fn epsilon_splits_symmetrically() {
        let r = input_relevance(&single_neuron([2.0, 2.0]), &Composite::epsilon(1e-9));
        assert!((r[0] - 0.5).abs() < 1e-6 && (r[1] - 0.5).abs() < 1e-6, "{r:?}");
    }

    #[test]
    fn alpha_beta_keeps_positive_contributions() {
        let composite = Composite::new().with_rule("head", LrpRule::AlphaBeta);
        let r = input_relevance(&single_neuron([3.0, -1.0]), &composite);
        assert_eq!(r, vec![1.0, 0.0]);
    }

    #[test]
    fn init_modes() {
        let neg = Tensor::full(&[1, 2, 2, 2], -1.0);
        let t = init_target(&neg, &InitMode::FullOutput).unwrap();
        assert!(t.tensor.data().iter().all(|&v| v == 0.0));

        let mut logits = Tensor::full(&[1, 2, 2, 2], -0.5);
        logits.data_mut()[5] = 2.0;
        logits.data_mut()[1] = 0.0;
        let t = init_target(&logits, &InitMode::FullOutput).unwrap();
        let expected: Vec<f32> = (0..8).map(|i| if i == 5 { 1.0 } else { 0.0 }).collect();
        assert_eq!(t.tensor.data(), expected.as_slice());

        let masked = init_target(&logits, &InitMode::ClassMask(vec![0])).unwrap();
        assert!(masked.tensor.data().iter().all(|&v| v == 0.0));

        let logits = Tensor::zeros(&[1, 3, 2, 4]);
        let det = Detection { cell: (1, 3), class_id: 2, score: 0.9, bbox: BoxRect { x0: 0.0, y0: 0.0, x1: 1.0, y1: 1.0 } };
        let t = init_target(&logits, &InitMode::SingleDetection(det)).unwrap();
        assert_eq!(t.tensor.data().iter().filter(|&&v| v != 0.0).count(), 1);
        assert_eq!(t.tensor.data()[(2 * 2 + 1) * 4 + 3], 1.0);

        let outside = Detection { cell: (2, 0), ..det };
        assert_eq!(init_target(&logits, &InitMode::SingleDetection(outside)).unwrap_err().name(), "IndexError");
    }

    #[test]
    fn heatmap_sums_channels() {
        let state = RelevanceState {
            layers: Vec::new(),
            input_attribution: Some(Tensor::from_fn(&[1, 2, 2, 2], |i| if i < 4 { 1.0 } else { -2.0 })),
        };
        assert_eq!(heatmap(&state).unwrap().data(), &[-1.0; 4]);

        let single = RelevanceState {
            layers: Vec::new(),
            input_attribution: Some(Tensor::from_fn(&[1, 1, 2, 2], |i| i as f32)),
        };
        assert_eq!(heatmap(&single).unwrap().data(), &[0.0, 1.0, 2.0, 3.0]);

        let zero = RelevanceState { layers: Vec::new(), input_attribution: Some(Tensor::zeros(&[1, 3, 2, 2])) };
        assert!(heatmap(&zero).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn glob_patterns() {
        assert!(glob_match("*", "feat.3"));
        assert!(glob_match("feat.*", "feat.3"));
        assert!(glob_match("feat.?", "feat.3"));
        assert!(!glob_match("feat.?", "feat.13"));
        assert!(glob_match("*head", "head"));
        assert!(!glob_match("head", "heads"));
    }

    #[test]
    fn batch_norm_must_be_merged() {
        let model = ModelGraph::new(
            vec![
                LayerSpec::new("c", Layer::conv(Tensor::full(&[1, 1, 1, 1], 1.0), None, 1, 0)),
                LayerSpec::new(
                    "bn",
                    Layer::BatchNorm {
                        gamma: Tensor::vector(&[1.0]),
                        beta: Tensor::vector(&[0.0]),
                        mean: Tensor::vector(&[0.0]),
                        var: Tensor::vector(&[1.0]),
                        eps: 0.0,
                    },
                ),
                LayerSpec::new(
                    "head",
                    Layer::DetectionHead { weight: Tensor::full(&[1, 1, 1, 1], 1.0), bias: None, stride: 1, pad: 0, grid: (1, 1) },
                ),
            ],
            Shape4::new(1, 1, 1, 1),
        )
        .unwrap();
        let (logits, trace) = forward(&model, &Tensor::full(&[1, 1, 1, 1], 1.0)).unwrap();
        let target = init_target(&logits, &InitMode::FullOutput).unwrap();
        let err = backward(&model, &trace, &Composite::new(), &target, None).unwrap_err();
        assert_eq!(err.name(), "CanonizeError");
    }

    #[test]
    fn missing_trace_entry() {
        let model = single_neuron([1.0, 1.0]);
        let other = ModelGraph::new(
            vec![LayerSpec::new(
                "only",
                Layer::DetectionHead { weight: Tensor::full(&[1, 2, 1, 1], 1.0), bias: None, stride: 1, pad: 0, grid: (1, 1) },
            )],
            Shape4::new(1, 2, 1, 1),
        )
        .unwrap();
        let x = Tensor::full(&[1, 2, 1, 1], 1.0);
        let (logits, trace) = forward(&other, &x).unwrap();
        let target = init_target(&logits, &InitMode::FullOutput).unwrap();
        let err = backward(&model, &trace, &Composite::new(), &target, None).unwrap_err();
        assert_eq!(err.name(), "TraceError");
    }
}
