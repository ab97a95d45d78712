//! Binary records for tensors (`CPTN`), models (`CPMD`) and concept vectors
//! (`CPCV`). All integers and floats are little-endian.
//!
//! A model record is the magic, a `u16` layer count, the `u32` channel,
//! height and width of the expected input, then per layer: kind tag (`u8`),
//! name (`u16` length + UTF-8), a `u8` count of `u32` hyperparameters, a `u8`
//! count of parameter tensors and the tensors themselves.
//!
//! | kind | hyperparameters | parameters |
//! |------|-----------------|------------|
//! | conv | stride, pad | weight, bias? |
//! | dense | | weight, bias? |
//! | relu, flatten | | |
//! | max pool | size, stride | |
//! | batch norm | eps (f32 bits) | gamma, beta, mean, var |
//! | detection head | stride, pad, grid h, grid w | weight, bias? |
//!
//! A concept record is the magic, method tag (`u8`), layer name, bias
//! (`f32`), the vector as a tensor record and a `u32`-length-prefixed JSON
//! object with the concept name, sample counts, held-out score and warning
//! flag.

use std::fs;
use std::path::Path;

use concept_probe_core::concepts::{ConceptMeta, ConceptMethod, ConceptVector};
use concept_probe_core::nn::{Layer, LayerKind, LayerSpec, ModelGraph};
use concept_probe_core::{Shape4, Tensor};
use serde_json::json;

use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"CPTN";
pub const MODEL_MAGIC: &[u8; 4] = b"CPMD";
pub const CONCEPT_MAGIC: &[u8; 4] = b"CPCV";

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], what: &'static str) -> Self {
        Self { buf, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(Error::Format(format!("{} record truncated at byte {}", self.what, self.pos)));
        };
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != magic {
            return Err(Error::Format(format!(
                "bad {} magic {:?}, expected {:?}",
                self.what,
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(magic)
            )));
        }
        Ok(())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self, len: usize) -> Result<String> {
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::Format(format!("{} record holds invalid UTF-8", self.what)))
    }

    fn name(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        self.string(len)
    }

    fn tensor(&mut self) -> Result<Tensor> {
        self.magic(TENSOR_MAGIC)?;
        let rank = self.u8()? as usize;
        let shape = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let Some(len) = len.filter(|&l| l <= (self.buf.len() - self.pos) / 4) else {
            return Err(Error::Format(format!("tensor {shape:?} larger than its record")));
        };
        let raw = self.take(len * 4)?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        Ok(Tensor::new(shape, data)?)
    }

    fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!("{} trailing bytes after {} record", self.buf.len() - self.pos, self.what)));
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_name(out: &mut Vec<u8>, name: &str) -> Result<()> {
    let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("name of {} bytes is too long", name.len())))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    Ok(())
}

pub fn encode_tensor(out: &mut Vec<u8>, t: &Tensor) -> Result<()> {
    out.extend_from_slice(TENSOR_MAGIC);
    let rank = u8::try_from(t.rank()).map_err(|_| Error::Format(format!("rank {} too large", t.rank())))?;
    out.push(rank);
    for &d in t.shape() {
        put_u32(out, d)?;
    }
    out.reserve(t.len() * 4);
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader::new(bytes, "tensor");
    let t = r.tensor()?;
    r.finish()?;
    Ok(t)
}

fn layer_record(layer: &Layer) -> (Vec<u32>, Vec<&Tensor>) {
    match layer {
        Layer::Conv { weight, bias, stride, pad } => {
            (vec![*stride as u32, *pad as u32], std::iter::once(weight).chain(bias.as_ref()).collect())
        }
        Layer::Dense { weight, bias } => (vec![], std::iter::once(weight).chain(bias.as_ref()).collect()),
        Layer::ReLU | Layer::Flatten => (vec![], vec![]),
        Layer::MaxPool { size, stride } => (vec![*size as u32, *stride as u32], vec![]),
        Layer::BatchNorm { gamma, beta, mean, var, eps } => (vec![eps.to_bits()], vec![gamma, beta, mean, var]),
        Layer::DetectionHead { weight, bias, stride, pad, grid } => (
            vec![*stride as u32, *pad as u32, grid.0 as u32, grid.1 as u32],
            std::iter::once(weight).chain(bias.as_ref()).collect(),
        ),
    }
}

pub fn encode_model(model: &ModelGraph) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    let count = u16::try_from(model.layers().len()).map_err(|_| Error::Format("too many layers".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    let s = model.input_shape();
    for d in [s.channels, s.height, s.width] {
        put_u32(&mut out, d)?;
    }
    for spec in model.layers() {
        out.push(spec.kind().tag());
        put_name(&mut out, &spec.name)?;
        let (hyper, params) = layer_record(&spec.layer);
        out.push(hyper.len() as u8);
        for h in hyper {
            out.extend_from_slice(&h.to_le_bytes());
        }
        out.push(params.len() as u8);
        for p in params {
            encode_tensor(&mut out, p)?;
        }
    }
    Ok(out)
}

fn build_layer(kind: LayerKind, name: &str, hyper: &[u32], mut params: Vec<Tensor>) -> Result<Layer> {
    let expect = |h: usize, p: &[usize]| -> Result<()> {
        if hyper.len() != h || !p.contains(&params.len()) {
            return Err(Error::Format(format!(
                "layer {name} ({kind:?}) has {} hyperparameters and {} tensors",
                hyper.len(),
                params.len()
            )));
        }
        Ok(())
    };
    let u = |i: usize| hyper[i] as usize;
    Ok(match kind {
        LayerKind::Conv => {
            expect(2, &[1, 2])?;
            let bias = (params.len() == 2).then(|| params.pop().unwrap());
            Layer::Conv { weight: params.pop().unwrap(), bias, stride: u(0), pad: u(1) }
        }
        LayerKind::Dense => {
            expect(0, &[1, 2])?;
            let bias = (params.len() == 2).then(|| params.pop().unwrap());
            Layer::Dense { weight: params.pop().unwrap(), bias }
        }
        LayerKind::ReLU => {
            expect(0, &[0])?;
            Layer::ReLU
        }
        LayerKind::Flatten => {
            expect(0, &[0])?;
            Layer::Flatten
        }
        LayerKind::MaxPool => {
            expect(2, &[0])?;
            Layer::MaxPool { size: u(0), stride: u(1) }
        }
        LayerKind::BatchNorm => {
            expect(1, &[4])?;
            let mut it = params.into_iter();
            let mut next = || it.next().unwrap();
            Layer::BatchNorm { gamma: next(), beta: next(), mean: next(), var: next(), eps: f32::from_bits(hyper[0]) }
        }
        LayerKind::DetectionHead => {
            expect(4, &[1, 2])?;
            let bias = (params.len() == 2).then(|| params.pop().unwrap());
            Layer::DetectionHead { weight: params.pop().unwrap(), bias, stride: u(0), pad: u(1), grid: (u(2), u(3)) }
        }
    })
}

pub fn decode_model(bytes: &[u8]) -> Result<ModelGraph> {
    let mut r = Reader::new(bytes, "model");
    r.magic(MODEL_MAGIC)?;
    let count = r.u16()? as usize;
    let (c, h, w) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let tag = r.u8()?;
        let kind = LayerKind::from_tag(tag).ok_or_else(|| Error::Format(format!("unknown layer kind tag {tag}")))?;
        let name = r.name()?;
        let hyper = (0..r.u8()?).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let params = (0..r.u8()?).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
        layers.push(LayerSpec::new(name.clone(), build_layer(kind, &name, &hyper, params)?));
    }
    r.finish()?;
    Ok(ModelGraph::new(layers, Shape4::new(1, c, h, w))?)
}

pub fn encode_concept(concept: &ConceptVector) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CONCEPT_MAGIC);
    out.push(concept.method.tag());
    put_name(&mut out, &concept.layer)?;
    out.extend_from_slice(&concept.bias.to_le_bytes());
    encode_tensor(&mut out, &concept.vector)?;
    let m = &concept.meta;
    let meta = json!({
        "concept": m.concept,
        "positives": m.positives,
        "negatives": m.negatives,
        "held_out_score": m.held_out_score,
        "precondition_warning": m.precondition_warning,
    })
    .to_string();
    put_u32(&mut out, meta.len())?;
    out.extend_from_slice(meta.as_bytes());
    Ok(out)
}

pub fn decode_concept(bytes: &[u8]) -> Result<ConceptVector> {
    let mut r = Reader::new(bytes, "concept");
    r.magic(CONCEPT_MAGIC)?;
    let tag = r.u8()?;
    let method = ConceptMethod::from_tag(tag).ok_or_else(|| Error::Format(format!("unknown concept method tag {tag}")))?;
    let layer = r.name()?;
    let bias = r.f32()?;
    let vector = r.tensor()?;
    let len = r.u32()? as usize;
    let text = r.string(len)?;
    r.finish()?;
    let v: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("concept metadata is not JSON: {e}")))?;
    let bad = |field: &str| Error::Format(format!("concept metadata lacks a valid `{field}`"));
    let count = |field: &str| v[field].as_u64().map(|n| n as usize).ok_or_else(|| bad(field));
    let meta = ConceptMeta {
        concept: v["concept"].as_str().ok_or_else(|| bad("concept"))?.to_string(),
        positives: count("positives")?,
        negatives: count("negatives")?,
        held_out_score: match &v["held_out_score"] {
            serde_json::Value::Null => None,
            s => Some(s.as_f64().ok_or_else(|| bad("held_out_score"))? as f32),
        },
        precondition_warning: v["precondition_warning"].as_bool().ok_or_else(|| bad("precondition_warning"))?,
    };
    Ok(ConceptVector::new(layer, vector, method, bias, meta)?)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(Error::io(path))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(Error::io(path))
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut out = Vec::new();
    encode_tensor(&mut out, t)?;
    write(path, &out)
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    decode_tensor(&read(path)?)
}

pub fn save_model(path: &Path, model: &ModelGraph) -> Result<()> {
    write(path, &encode_model(model)?)
}

pub fn load_model(path: &Path) -> Result<ModelGraph> {
    decode_model(&read(path)?)
}

pub fn save_concept(path: &Path, concept: &ConceptVector) -> Result<()> {
    write(path, &encode_concept(concept)?)
}

pub fn load_concept(path: &Path) -> Result<ConceptVector> {
    decode_concept(&read(path)?)
}
