use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::layer::{LayerKind, LayerSpec};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Shape4, Tensor};

/// An ordered chain of layers ending in exactly one detection head.
///
/// Any layer name can serve as the split point between the part of the model
/// before a concept layer and the part after it.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    layers: Vec<LayerSpec>,
    input_shape: Shape4,
}

impl ModelGraph {
    /// Validates names, the head position, and the shape chain.
    pub fn new(layers: Vec<LayerSpec>, input_shape: Shape4) -> Result<Self> {
        let graph = Self { layers, input_shape };
        graph.validate()?;
        Ok(graph)
    }

    fn validate(&self) -> Result<()> {
        let mut names = BTreeSet::new();
        for spec in &self.layers {
            if spec.name.is_empty() || !names.insert(spec.name.as_str()) {
                return Err(shape_err!("layer name {:?} is empty or repeated", spec.name));
            }
        }
        let heads = self.layers.iter().filter(|l| l.kind() == LayerKind::DetectionHead).count();
        match self.layers.last() {
            Some(last) if heads == 1 && last.kind() == LayerKind::DetectionHead => {}
            _ => return Err(shape_err!("graph must end in exactly one detection head")),
        }
        self.shapes().map(|_| ())
    }

    /// Output shape of every layer for a batch of one, in order.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape = self.input_dims(1).to_vec();
        let mut out = Vec::with_capacity(self.layers.len());
        for spec in &self.layers {
            shape = spec
                .layer
                .output_shape(&shape)
                .map_err(|e| shape_err!("layer {}: {}", spec.name, e))?;
            out.push(shape.clone());
        }
        Ok(out)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn into_layers(self) -> Vec<LayerSpec> {
        self.layers
    }

    /// Mutable access for trainers; callers must keep parameter shapes intact.
    pub(crate) fn layers_mut(&mut self) -> &mut [LayerSpec] {
        &mut self.layers
    }

    pub fn input_shape(&self) -> Shape4 {
        self.input_shape
    }

    fn input_dims(&self, batch: usize) -> [usize; 4] {
        let s = self.input_shape;
        [batch, s.channels, s.height, s.width]
    }

    pub fn layer_index(&self, name: &str) -> Result<usize> {
        self.layers
            .iter()
            .position(|l| l.name == name)
            .ok_or_else(|| Error::Name(format!("no layer named {name:?}")))
    }

    pub fn layer(&self, name: &str) -> Result<&LayerSpec> {
        Ok(&self.layers[self.layer_index(name)?])
    }

    /// `(classes, grid_h, grid_w)` of the detection head.
    pub fn head_dims(&self) -> Result<(usize, usize, usize)> {
        let shapes = self.shapes()?;
        let last = shapes.last().expect("validated graph has a head");
        Ok((last[1], last[2], last[3]))
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, ActivationTrace)> {
        forward(self, x)
    }
}

/// Every layer's input and output from one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    names: Vec<String>,
    // activations[0] is the model input, activations[i + 1] the output of layer i
    activations: Vec<Tensor>,
}

impl ActivationTrace {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    fn index(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Trace(format!("no trace entry for layer {name:?}")))
    }

    pub fn input(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.activations[self.index(name)?])
    }

    pub fn output(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.activations[self.index(name)? + 1])
    }

    pub fn model_input(&self) -> &Tensor {
        &self.activations[0]
    }

    pub fn model_output(&self) -> &Tensor {
        self.activations.last().expect("trace holds at least the input")
    }

    /// `(input, output)` of layer `index` in graph order.
    pub fn at(&self, index: usize) -> Result<(&Tensor, &Tensor)> {
        if index >= self.names.len() {
            return Err(Error::Trace(format!("no trace entry at position {index}")));
        }
        Ok((&self.activations[index], &self.activations[index + 1]))
    }
}

/// Run `x [N,C,H,W]` through the graph, recording every activation.
pub fn forward(model: &ModelGraph, x: &Tensor) -> Result<(Tensor, ActivationTrace)> {
    let s = x.shape4()?;
    let expected = model.input_shape;
    if (s.channels, s.height, s.width) != (expected.channels, expected.height, expected.width) {
        return Err(shape_err!(
            "input {:?} does not match model input {:?}",
            x.shape(),
            expected.dims()
        ));
    }
    let mut activations = Vec::with_capacity(model.layers.len() + 1);
    activations.push(x.clone());
    for spec in &model.layers {
        let prev = activations.last().expect("seeded with input");
        let out = spec.layer.forward(prev).map_err(|e| shape_err!("layer {}: {}", spec.name, e))?;
        activations.push(out);
    }
    let output = activations.last().expect("non-empty").clone();
    let names = model.layers.iter().map(|l| l.name.clone()).collect();
    Ok((output, ActivationTrace { names, activations }))
}
