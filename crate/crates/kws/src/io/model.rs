//! The "KWSM" model container and the runtime model it stores.
//!
//! Layout: magic, u32 version, u32 section count, sections (name, length,
//! payload), then a sha256 checksum over everything before it. Tensors are
//! tagged float32 or quantized-8bit per tensor; the keyword encoder and the
//! filter bank are optional sections so a deployment artifact can drop the
//! encoder entirely.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::acoustic::{AcousticConfig, EncoderStack};
use crate::error::{Error, Result};
use crate::keyword::{
    receptive_field, EncoderConfig, FilterBank, KeywordEncoder, KeywordFilter, KeywordSpec,
};
use crate::nn::{AffineLayer, Conv1dLayer, LstmLayer};
use crate::quant::{dequantize, quantize, QuantTensor};
use crate::tensor::{LayerParams, Tensor};

const MAGIC: &[u8; 4] = b"KWSM";
const VERSION: u32 = 1;

const KIND_JSON: u8 = 0;
const KIND_TENSORS: u8 = 1;
const DTYPE_F32: u8 = 0;
const DTYPE_Q8: u8 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub acoustic: AcousticConfig,
    pub top_kernel: usize,
    pub embed_dim: usize,
    pub encoder_hidden: usize,
}

impl ModelConfig {
    pub fn desk_scale() -> Self {
        ModelConfig {
            acoustic: AcousticConfig::desk_scale(),
            top_kernel: 12,
            embed_dim: 32,
            encoder_hidden: 32,
        }
    }

    /// Full-size model: 5 recurrent layers of `hidden` units, 46 phones,
    /// 96 channels, BiLSTM keyword encoder with 128 units per direction.
    pub fn paper_scale(hidden: usize) -> Self {
        ModelConfig {
            acoustic: AcousticConfig::paper_scale(hidden),
            top_kernel: 12,
            embed_dim: 32,
            encoder_hidden: 128,
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            phones: self.acoustic.phones,
            embed_dim: self.embed_dim,
            hidden: self.encoder_hidden,
            top_kernel: self.top_kernel,
            channels: self.acoustic.conv_channels,
        }
    }

    pub fn receptive_field(&self) -> usize {
        receptive_field(&self.acoustic, self.top_kernel)
    }

    pub fn validate(&self) -> Result<()> {
        self.acoustic.validate()?;
        self.encoder_config().validate()
    }
}

/// One tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub enum StoredTensor {
    F32 { shape: Vec<usize>, data: Vec<f32> },
    Q8(QuantTensor),
}

impl StoredTensor {
    pub fn from_tensor(t: &Tensor, quantized: bool) -> StoredTensor {
        if quantized {
            StoredTensor::Q8(quantize(t))
        } else {
            StoredTensor::F32 {
                shape: t.shape().to_vec(),
                data: t.data().iter().map(|&v| v as f32).collect(),
            }
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        match self {
            StoredTensor::F32 { shape, data } => {
                Tensor::from_vec(shape, data.iter().map(|&v| v as f64).collect())
                    .expect("stored shape matches data")
            }
            StoredTensor::Q8(q) => dequantize(q),
        }
    }
}

pub type TensorGroup = Vec<(String, StoredTensor)>;

/// The serializable model artifact. Byte-for-byte stable: loading a file and
/// saving it again reproduces the identical bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub config: ModelConfig,
    pub recurrent: Vec<TensorGroup>,
    pub softmax: TensorGroup,
    pub conv1: TensorGroup,
    pub encoder: Option<TensorGroup>,
    pub bank: Option<(Vec<KeywordSpec>, TensorGroup)>,
}

fn group_of(params: &LayerParams, quantized: bool) -> TensorGroup {
    params
        .iter()
        .map(|(n, t)| (n.to_string(), StoredTensor::from_tensor(t, quantized)))
        .collect()
}

fn params_of(group: &TensorGroup, names: &[&str], section: &'static str) -> Result<LayerParams> {
    let got: Vec<&str> = group.iter().map(|(n, _)| n.as_str()).collect();
    if got != names {
        return Err(Error::Format {
            path: section.to_string(),
            reason: format!("expected tensors {names:?}, found {got:?}"),
        });
    }
    let mut params = LayerParams::new();
    for (n, t) in group {
        params.insert(n, t.to_tensor());
    }
    Ok(params)
}

fn subgroup(group: &TensorGroup, prefix: &str) -> TensorGroup {
    group
        .iter()
        .filter_map(|(n, t)| {
            n.strip_prefix(prefix)
                .map(|rest| (rest.to_string(), t.clone()))
        })
        .collect()
}

impl ModelFile {
    pub fn from_runtime(model: &KwsModel, quantized: bool, strip_encoder: bool) -> ModelFile {
        let stack = &model.stack;
        let encoder = if strip_encoder {
            None
        } else {
            model.encoder.as_ref().map(|e| {
                let mut g = TensorGroup::new();
                g.push((
                    "embed.table".into(),
                    StoredTensor::from_tensor(e.embed.get("table"), quantized),
                ));
                for (prefix, layer) in [("fwd", &e.fwd), ("bwd", &e.bwd)] {
                    for (n, t) in layer.params.iter() {
                        g.push((
                            format!("{prefix}.{n}"),
                            StoredTensor::from_tensor(t, quantized),
                        ));
                    }
                }
                for (n, t) in e.affine.params.iter() {
                    g.push((
                        format!("affine.{n}"),
                        StoredTensor::from_tensor(t, quantized),
                    ));
                }
                g
            })
        };
        let bank = if model.bank.is_empty() {
            None
        } else {
            let specs = model.bank.iter().map(|(s, _)| s.clone()).collect();
            let mut g = TensorGroup::new();
            for (i, (_, f)) in model.bank.iter().enumerate() {
                g.push((
                    format!("{i}.base"),
                    StoredTensor::from_tensor(&f.base, quantized),
                ));
                g.push((
                    format!("{i}.residual"),
                    StoredTensor::from_tensor(&f.residual, quantized),
                ));
            }
            Some((specs, g))
        };
        ModelFile {
            config: model.config.clone(),
            recurrent: stack
                .recurrent
                .iter()
                .map(|l| group_of(&l.params, quantized))
                .collect(),
            softmax: group_of(&stack.softmax.params, quantized),
            conv1: group_of(&stack.conv1.params, quantized),
            encoder,
            bank,
        }
    }

    pub fn into_runtime(self) -> Result<KwsModel> {
        self.config.validate()?;
        if self.recurrent.len() != self.config.acoustic.layers {
            return Err(Error::Format {
                path: "recurrent".into(),
                reason: format!(
                    "config declares {} layers, file has {}",
                    self.config.acoustic.layers,
                    self.recurrent.len()
                ),
            });
        }
        let mut recurrent = Vec::with_capacity(self.recurrent.len());
        for g in &self.recurrent {
            recurrent.push(LstmLayer::from_params(params_of(g, &["wx", "wh", "b"], "recurrent")?));
        }
        let stack = EncoderStack {
            config: self.config.acoustic.clone(),
            recurrent,
            softmax: AffineLayer::from_params(params_of(&self.softmax, &["w", "b"], "softmax")?),
            conv1: Conv1dLayer::from_params(params_of(&self.conv1, &["kernel", "bias"], "conv1")?),
        };
        let encoder = match &self.encoder {
            None => None,
            Some(g) => {
                let embed = params_of(&subgroup(g, "embed."), &["table"], "encoder")?;
                let fwd = params_of(&subgroup(g, "fwd."), &["wx", "wh", "b"], "encoder")?;
                let bwd = params_of(&subgroup(g, "bwd."), &["wx", "wh", "b"], "encoder")?;
                let affine = params_of(&subgroup(g, "affine."), &["w", "b"], "encoder")?;
                Some(KeywordEncoder {
                    config: self.config.encoder_config(),
                    embed,
                    fwd: LstmLayer::from_params(fwd),
                    bwd: LstmLayer::from_params(bwd),
                    affine: AffineLayer::from_params(affine),
                })
            }
        };
        let mut bank = FilterBank::new();
        if let Some((specs, g)) = &self.bank {
            for (i, spec) in specs.iter().enumerate() {
                spec.phones.validate(self.config.acoustic.phones)?;
                let f = params_of(
                    &subgroup(g, &format!("{i}.")),
                    &["base", "residual"],
                    "bank.filters",
                )?;
                bank.push(
                    spec.clone(),
                    KeywordFilter {
                        base: f.get("base").clone(),
                        residual: f.get("residual").clone(),
                    },
                )?;
            }
        }
        Ok(KwsModel {
            config: self.config,
            stack,
            encoder,
            bank,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());

        let mut sections: Vec<(String, Vec<u8>)> = Vec::new();
        sections.push(("config".into(), encode_json(&self.config)?));
        for (i, g) in self.recurrent.iter().enumerate() {
            sections.push((format!("recurrent.{i}"), encode_tensors(g)));
        }
        sections.push(("softmax".into(), encode_tensors(&self.softmax)));
        sections.push(("conv1".into(), encode_tensors(&self.conv1)));
        if let Some(g) = &self.encoder {
            sections.push(("encoder".into(), encode_tensors(g)));
        }
        if let Some((specs, g)) = &self.bank {
            sections.push(("bank.specs".into(), encode_json(specs)?));
            sections.push(("bank.filters".into(), encode_tensors(g)));
        }

        buf.extend_from_slice(&(sections.len() as u32).to_le_bytes());
        for (name, payload) in &sections {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            buf.extend_from_slice(payload);
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ModelFile> {
        let ferr = |reason: String| Error::Format {
            path: path.display().to_string(),
            reason,
        };
        let bytes = fs::read(path)?;
        if bytes.len() < 44 {
            return Err(ferr("file too small".into()));
        }
        let (body, checksum) = bytes.split_at(bytes.len() - 32);
        let digest = Sha256::digest(body);
        if digest.as_slice() != checksum {
            return Err(ferr("checksum mismatch".into()));
        }
        if &body[0..4] != MAGIC {
            return Err(ferr("bad magic".into()));
        }
        let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(ferr(format!("unsupported version {version}")));
        }
        let mut cur = Cursor {
            bytes: body,
            pos: 8,
        };
        let n_sections = cur.u32()? as usize;

        let mut config: Option<ModelConfig> = None;
        let mut recurrent: Vec<(usize, TensorGroup)> = Vec::new();
        let mut softmax = None;
        let mut conv1 = None;
        let mut encoder = None;
        let mut bank_specs: Option<Vec<KeywordSpec>> = None;
        let mut bank_filters: Option<TensorGroup> = None;

        for _ in 0..n_sections {
            let name = cur.string()?;
            let payload_len = cur.u64()? as usize;
            let payload = cur.take(payload_len)?;
            match name.as_str() {
                "config" => config = Some(decode_json(payload)?),
                "softmax" => softmax = Some(decode_tensors(payload)?),
                "conv1" => conv1 = Some(decode_tensors(payload)?),
                "encoder" => encoder = Some(decode_tensors(payload)?),
                "bank.specs" => bank_specs = Some(decode_json(payload)?),
                "bank.filters" => bank_filters = Some(decode_tensors(payload)?),
                other => {
                    if let Some(idx) = other.strip_prefix("recurrent.") {
                        let idx: usize = idx
                            .parse()
                            .map_err(|_| ferr(format!("bad section name '{other}'")))?;
                        recurrent.push((idx, decode_tensors(payload)?));
                    } else {
                        return Err(ferr(format!("unknown section '{other}'")));
                    }
                }
            }
        }
        if cur.pos != body.len() {
            return Err(ferr("trailing bytes after sections".into()));
        }

        recurrent.sort_by_key(|(i, _)| *i);
        for (want, (got, _)) in recurrent.iter().enumerate() {
            if want != *got {
                return Err(ferr(format!("recurrent sections not contiguous at {got}")));
            }
        }
        let bank = match (bank_specs, bank_filters) {
            (Some(s), Some(f)) => Some((s, f)),
            (None, None) => None,
            _ => return Err(Error::MissingSection("bank.specs/bank.filters pair")),
        };
        Ok(ModelFile {
            config: config.ok_or(Error::MissingSection("config"))?,
            recurrent: recurrent.into_iter().map(|(_, g)| g).collect(),
            softmax: softmax.ok_or(Error::MissingSection("softmax"))?,
            conv1: conv1.ok_or(Error::MissingSection("conv1"))?,
            encoder,
            bank,
        })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                path: "model".into(),
                reason: "truncated section data".into(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let s = self.take(n)?;
        String::from_utf8(s.to_vec()).map_err(|_| Error::Format {
            path: "model".into(),
            reason: "section name is not utf-8".into(),
        })
    }
}

fn encode_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut out = vec![KIND_JSON];
    out.extend_from_slice(serde_json::to_string(value)?.as_bytes());
    Ok(out)
}

fn decode_json<T: for<'de> Deserialize<'de>>(payload: &[u8]) -> Result<T> {
    if payload.first() != Some(&KIND_JSON) {
        return Err(Error::Format {
            path: "model".into(),
            reason: "expected a json section".into(),
        });
    }
    Ok(serde_json::from_slice(&payload[1..])?)
}

fn encode_tensors(group: &TensorGroup) -> Vec<u8> {
    let mut out = vec![KIND_TENSORS];
    out.extend_from_slice(&(group.len() as u32).to_le_bytes());
    for (name, t) in group {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        match t {
            StoredTensor::F32 { shape, data } => {
                out.push(DTYPE_F32);
                out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
                for &d in shape {
                    out.extend_from_slice(&(d as u32).to_le_bytes());
                }
                for &v in data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            StoredTensor::Q8(q) => {
                out.push(DTYPE_Q8);
                out.extend_from_slice(&(q.shape.len() as u32).to_le_bytes());
                for &d in &q.shape {
                    out.extend_from_slice(&(d as u32).to_le_bytes());
                }
                out.extend_from_slice(&q.scale.to_le_bytes());
                out.extend_from_slice(&q.zero_point.to_le_bytes());
                out.extend(q.data.iter().map(|&v| v as u8));
            }
        }
    }
    out
}

fn decode_tensors(payload: &[u8]) -> Result<TensorGroup> {
    let ferr = |reason: &str| Error::Format {
        path: "model".into(),
        reason: reason.into(),
    };
    if payload.first() != Some(&KIND_TENSORS) {
        return Err(ferr("expected a tensor section"));
    }
    let mut cur = Cursor {
        bytes: payload,
        pos: 1,
    };
    let count = cur.u32()? as usize;
    let mut group = TensorGroup::with_capacity(count);
    for _ in 0..count {
        let name = cur.string()?;
        let dtype = cur.take(1)?[0];
        let ndim = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let t = match dtype {
            DTYPE_F32 => {
                let raw = cur.take(4 * n)?;
                let data = raw
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                    .collect();
                StoredTensor::F32 { shape, data }
            }
            DTYPE_Q8 => {
                let scale = f64::from_le_bytes(cur.take(8)?.try_into().unwrap());
                let zero_point = i32::from_le_bytes(cur.take(4)?.try_into().unwrap());
                let data = cur.take(n)?.iter().map(|&b| b as i8).collect();
                StoredTensor::Q8(QuantTensor {
                    shape,
                    scale,
                    zero_point,
                    data,
                })
            }
            _ => return Err(ferr("unknown tensor dtype")),
        };
        group.push((name, t));
    }
    if cur.pos != payload.len() {
        return Err(ferr("trailing bytes in tensor section"));
    }
    Ok(group)
}

/// The in-memory model: acoustic stack, optional keyword encoder, and the
/// compiled filter bank (possibly empty).
pub struct KwsModel {
    pub config: ModelConfig,
    pub stack: EncoderStack,
    pub encoder: Option<KeywordEncoder>,
    pub bank: FilterBank,
}

impl KwsModel {
    /// Fresh random initialization, used before pretraining.
    pub fn init<R: rand::Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        let stack = EncoderStack::new(config.acoustic.clone(), rng)?;
        let encoder = Some(KeywordEncoder::new(config.encoder_config(), rng)?);
        Ok(KwsModel {
            config,
            stack,
            encoder,
            bank: FilterBank::new(),
        })
    }

    pub fn save(&self, path: &Path, quantized: bool, strip_encoder: bool) -> Result<()> {
        ModelFile::from_runtime(self, quantized, strip_encoder).save(path)
    }

    pub fn load(path: &Path) -> Result<KwsModel> {
        ModelFile::load(path)?.into_runtime()
    }

    pub fn require_encoder(&self) -> Result<&KeywordEncoder> {
        self.encoder
            .as_ref()
            .ok_or(Error::MissingSection("encoder"))
    }
}
