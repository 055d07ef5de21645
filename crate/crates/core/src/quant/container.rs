//! Binary tensor container shared by float checkpoints, int8 models and
//! feature files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    b"FLXT"
//! version  u32
//! meta     u32 length + UTF-8 JSON (kind, architecture, quantization specs)
//! count    u32
//! count x  { u16 name length, name, u8 dtype (0 f32, 1 i8, 2 i32),
//!            u8 rank, rank x u32 dims,
//!            u8 has_spec [, f32 scale, i32 zero_point, f32 min, f32 max],
//!            raw element data }
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::int8::{layer_layout, QConv, QWeight, QuantizedModel};
use super::{QatState, QuantSpec};
use crate::error::{Error, Result};
use crate::model::{ArchConfig, FlexiNet, ResNormPlacement};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FLXT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    I8(Vec<i8>),
    I32(Vec<i32>),
}

impl TensorData {
    fn dtype(&self) -> u8 {
        match self {
            TensorData::F32(_) => 0,
            TensorData::I8(_) => 1,
            TensorData::I32(_) => 2,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::I8(v) => v.len(),
            TensorData::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn byte_len(&self) -> usize {
        match self {
            TensorData::I8(v) => v.len(),
            other => 4 * other.len(),
        }
    }

    pub fn dtype_name(&self) -> &'static str {
        match self {
            TensorData::F32(_) => "f32",
            TensorData::I8(_) => "i8",
            TensorData::I32(_) => "i32",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
    pub quant: Option<QuantSpec>,
}

/// What a container holds, stored as its JSON metadata block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Meta {
    /// Float checkpoint, optionally with the activation observers from
    /// quantization-aware training.
    Float {
        arch: ArchConfig,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        observers: Option<QatState>,
    },
    Int8 {
        arch: ArchConfig,
        activations: BTreeMap<String, QuantSpec>,
    },
    /// A log-mel feature map of one clip.
    Features { source: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub meta: Meta,
    pub entries: Vec<Entry>,
}

impl Container {
    pub fn entry(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Bytes of raw tensor data.
    pub fn payload_bytes(&self) -> usize {
        self.entries.iter().map(|e| e.data.byte_len()).sum()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::with_capacity(self.payload_bytes() + meta.len() + 64);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            let n: usize = e.shape.iter().product();
            if n != e.data.len() {
                return Err(Error::shape(format!(
                    "tensor '{}' has shape {:?} but {} elements",
                    e.name,
                    e.shape,
                    e.data.len()
                )));
            }
            if e.name.len() > u16::MAX as usize || e.shape.len() > u8::MAX as usize {
                return Err(Error::Input(format!("tensor '{}' cannot be stored", e.name)));
            }
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.data.dtype());
            out.push(e.shape.len() as u8);
            for &d in &e.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            match &e.quant {
                Some(q) => {
                    out.push(1);
                    out.extend_from_slice(&q.scale.to_le_bytes());
                    out.extend_from_slice(&q.zero_point.to_le_bytes());
                    out.extend_from_slice(&q.min.to_le_bytes());
                    out.extend_from_slice(&q.max.to_le_bytes());
                }
                None => out.push(0),
            }
            match &e.data {
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::I8(v) => out.extend(v.iter().map(|&x| x as u8)),
                TensorData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Load("bad magic bytes; not a FLXT container".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Load(format!(
                "unsupported container version {version} (expected {VERSION})"
            )));
        }
        let meta_len = r.u32("metadata length")? as usize;
        let meta: Meta = serde_json::from_slice(r.take(meta_len, "metadata")?)
            .map_err(|e| Error::Load(format!("bad metadata: {e}")))?;
        let count = r.u32("tensor count")? as usize;
        let mut entries = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = r.u16("name length")? as usize;
            let name = String::from_utf8(r.take(name_len, "tensor name")?.to_vec())
                .map_err(|_| Error::Load("tensor name is not UTF-8".into()))?;
            let dtype = r.u8("dtype")?;
            let rank = r.u8("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("dimension")? as usize);
            }
            let quant = match r.u8("spec flag")? {
                0 => None,
                1 => Some(QuantSpec {
                    scale: r.f32("scale")?,
                    zero_point: r.i32("zero point")?,
                    min: r.f32("min")?,
                    max: r.f32("max")?,
                }),
                f => return Err(Error::Load(format!("tensor '{name}': bad spec flag {f}"))),
            };
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Load(format!("tensor '{name}': shape overflows")))?;
            let what = format!("data of tensor '{name}'");
            let data = match dtype {
                0 => TensorData::F32(
                    r.take(n.saturating_mul(4), &what)?
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                1 => TensorData::I8(r.take(n, &what)?.iter().map(|&b| b as i8).collect()),
                2 => TensorData::I32(
                    r.take(n.saturating_mul(4), &what)?
                        .chunks_exact(4)
                        .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                d => return Err(Error::Load(format!("tensor '{name}': unknown dtype {d}"))),
            };
            entries.push(Entry {
                name,
                shape,
                data,
                quant,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Load(format!(
                "{} trailing bytes after the last tensor",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { meta, entries })
    }

    pub fn save(&self, path: &Path) -> Result<usize> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, &bytes)?;
        Ok(bytes.len())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Load(m) => Error::Load(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Load(format!(
                "truncated file: {what} needs {n} bytes at offset {}, {} available",
                self.pos,
                self.bytes.len() - self.pos
            ))),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn i32(&mut self, what: &str) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Either kind of trained network.
#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Float {
        net: FlexiNet<f32>,
        observers: Option<QatState>,
    },
    Int8(QuantizedModel),
}

impl Model {
    pub fn config(&self) -> &ArchConfig {
        match self {
            Model::Float { net, .. } => net.config(),
            Model::Int8(q) => q.config(),
        }
    }

    /// Eval-mode logits of a feature batch.
    pub fn logits(&self, features: &Tensor<f32>) -> Result<Tensor<f32>> {
        match self {
            Model::Float { net, .. } => net.predict_logits(features, None),
            Model::Int8(q) => q.forward(features),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Model::Float { .. } => "float",
            Model::Int8(_) => "int8",
        }
    }

    pub fn to_container(&self) -> Container {
        match self {
            Model::Float { net, observers } => float_container(net, observers.as_ref()),
            Model::Int8(q) => int8_container(q),
        }
    }
}

pub fn float_container(net: &FlexiNet<f32>, observers: Option<&QatState>) -> Container {
    let entries = net
        .params()
        .iter()
        .chain(net.buffers())
        .map(|p| Entry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            data: TensorData::F32(p.value.data().to_vec()),
            quant: None,
        })
        .collect();
    Container {
        meta: Meta::Float {
            arch: net.config().clone(),
            observers: observers.cloned(),
        },
        entries,
    }
}

pub fn int8_container(q: &QuantizedModel) -> Container {
    let mut entries = Vec::new();
    if let Some(l) = q.lambda() {
        entries.push(Entry {
            name: "resnorm.lambda".into(),
            shape: vec![],
            data: TensorData::F32(vec![l]),
            quant: None,
        });
    }
    let acts = q.activations();
    for (layer, slot) in q.layers().iter().zip(layer_layout(q.config())) {
        entries.push(Entry {
            name: format!("{}.weight", layer.name),
            shape: layer.weight.shape.clone(),
            data: TensorData::I8(layer.weight.data.clone()),
            quant: Some(layer.weight.spec),
        });
        let bias_scale = acts[&slot.input].scale * layer.weight.spec.scale;
        let (lo, hi) = layer
            .bias
            .iter()
            .fold((0i32, 0i32), |(a, b), &v| (a.min(v), b.max(v)));
        entries.push(Entry {
            name: format!("{}.bias", layer.name),
            shape: vec![layer.bias.len()],
            data: TensorData::I32(layer.bias.clone()),
            quant: Some(QuantSpec {
                scale: bias_scale,
                zero_point: 0,
                min: lo as f32 * bias_scale,
                max: hi as f32 * bias_scale,
            }),
        });
    }
    Container {
        meta: Meta::Int8 {
            arch: q.config().clone(),
            activations: acts.clone(),
        },
        entries,
    }
}

impl Container {
    /// Rebuilds the network a model container describes.
    pub fn into_model(self) -> Result<Model> {
        match self.meta {
            Meta::Float { ref arch, ref observers } => {
                let mut net = FlexiNet::build(arch, 0)?;
                net.load_tensors(|name| match self.entry(name) {
                    Some(Entry {
                        shape,
                        data: TensorData::F32(v),
                        ..
                    }) => Tensor::new(shape.clone(), v.clone()).ok(),
                    _ => None,
                })?;
                Ok(Model::Float {
                    net,
                    observers: observers.clone(),
                })
            }
            Meta::Int8 {
                ref arch,
                ref activations,
            } => {
                let lambda = match self.entry("resnorm.lambda") {
                    Some(Entry {
                        data: TensorData::F32(v),
                        ..
                    }) if v.len() == 1 => Some(v[0]),
                    Some(_) => return Err(Error::Load("malformed tensor 'resnorm.lambda'".into())),
                    None if arch.resnorm != ResNormPlacement::None => {
                        return Err(Error::Load("missing tensor 'resnorm.lambda'".into()))
                    }
                    None => None,
                };
                let mut layers = Vec::new();
                for slot in layer_layout(arch) {
                    let wname = format!("{}.weight", slot.name);
                    let bname = format!("{}.bias", slot.name);
                    let weight = match self.entry(&wname) {
                        Some(Entry {
                            shape,
                            data: TensorData::I8(v),
                            quant: Some(spec),
                            ..
                        }) if shape.len() == 4 => QWeight {
                            shape: shape.clone(),
                            data: v.clone(),
                            spec: *spec,
                        },
                        _ => return Err(Error::Load(format!("missing or malformed int8 tensor '{wname}'"))),
                    };
                    let bias = match self.entry(&bname) {
                        Some(Entry {
                            data: TensorData::I32(v),
                            ..
                        }) => v.clone(),
                        _ => return Err(Error::Load(format!("missing or malformed int32 tensor '{bname}'"))),
                    };
                    layers.push(QConv {
                        name: slot.name,
                        kind: slot.kind,
                        weight,
                        bias,
                        stride: slot.stride,
                        pad: slot.pad,
                        relu: slot.relu,
                    });
                }
                Ok(Model::Int8(QuantizedModel::from_parts(
                    arch.clone(),
                    lambda,
                    activations.clone(),
                    layers,
                )?))
            }
            Meta::Features { .. } => Err(Error::Load("container holds features, not a model".into())),
        }
    }
}

pub fn save_model(path: &Path, model: &Model) -> Result<usize> {
    model.to_container().save(path)
}

pub fn load_model(path: &Path) -> Result<Model> {
    Container::load(path)?.into_model()
}

pub fn save_features(path: &Path, features: &Tensor<f32>, source: &str) -> Result<usize> {
    Container {
        meta: Meta::Features {
            source: source.to_string(),
        },
        entries: vec![Entry {
            name: "features".into(),
            shape: features.shape().to_vec(),
            data: TensorData::F32(features.data().to_vec()),
            quant: None,
        }],
    }
    .save(path)
}

pub fn load_features(path: &Path) -> Result<Tensor<f32>> {
    let c = Container::load(path)?;
    match (&c.meta, c.entry("features")) {
        (
            Meta::Features { .. },
            Some(Entry {
                shape,
                data: TensorData::F32(v),
                ..
            }),
        ) => Tensor::new(shape.clone(), v.clone()),
        _ => Err(Error::Load(format!("{}: not a feature file", path.display()))),
    }
}
