//! The `SLBM` model file and the graph-free inference runtime.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "SLBM" | version u16
//! arch (u16 length + utf-8) | input shape 3 x u32 | entry count u32
//! entries, pre-order (a residual entry is followed by its body entries):
//!     name (u16 length + utf-8) | kind u8 | rank u8 | dims u32...
//!     q u8 | grid count u16 | grid values f64... | param count u8 | params u32...
//!     blob offset u64 | blob length u64
//! payload length u64 | payload blobs
//! CRC32 u32 of every byte between the version field and the CRC
//! ```
//!
//! Blobs: packed index words for quantized convolutions, f64 weights for
//! full-precision convolutions, `eps, gamma, beta, mean, var` for batch
//! norms (discrete statistics), weight then bias for linear layers.
//!
//! A 1-bit convolution fed by a 1-bit activation quantizer runs on the
//! popcount kernel; activations in `{0, 1}` map to signs `2a - 1`, giving
//! `sum w a = (dot + sum w) / 2`.

use std::fs;
use std::path::Path;

use crate::codec::{Reader, Writer};
use crate::deploy::bitconv::binary_conv01;
use crate::deploy::pack::{PackedIndices, PackedWeights, words_for};
use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::model::{Arch, ConvWeight, Layer, Network, Shortcut, WeightMode};
use crate::quant::{QuantGrid, act_quantize_value};
use crate::sbn::{Normalizer, Track};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"SLBM";
pub const VERSION: u16 = 1;

const KIND_FULL_CONV: u8 = 0;
const KIND_PACKED_CONV: u8 = 1;
const KIND_NORM: u8 = 2;
const KIND_ACT_QUANT: u8 = 3;
const KIND_RELU: u8 = 4;
const KIND_MAX_POOL: u8 = 5;
const KIND_FLATTEN: u8 = 6;
const KIND_LINEAR: u8 = 7;
const KIND_GAP: u8 = 8;
const KIND_RESIDUAL: u8 = 9;

#[derive(Clone, Debug, PartialEq)]
pub enum ConvWeights {
    Full(Vec<f64>),
    Packed {
        packed: PackedWeights,
        mode: WeightMode,
        /// Dequantized grid values.
        values: Vec<f64>,
        /// Sign rows when the grid is `{-1, +1}`.
        sign_rows: Option<Vec<u64>>,
    },
}

impl ConvWeights {
    fn packed(packed: PackedWeights, mode: WeightMode) -> Self {
        let values = packed.values();
        let sign_rows = packed.sign_rows().ok();
        ConvWeights::Packed { packed, mode, values, sign_rows }
    }

    fn values(&self) -> &[f64] {
        match self {
            ConvWeights::Full(v) => v,
            ConvWeights::Packed { values, .. } => values,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferenceConv {
    pub name: String,
    /// `[out, in, k, k]`.
    pub shape: [usize; 4],
    pub stride: usize,
    pub padding: usize,
    pub weights: ConvWeights,
}

#[derive(Clone, Debug, PartialEq)]
pub enum InferenceLayer {
    Conv(InferenceConv),
    Norm { name: String, normalizer: Normalizer },
    ActQuant(u32),
    Relu,
    MaxPool { kernel: usize, stride: usize },
    Flatten,
    Linear { name: String, in_features: usize, out_features: usize, weight: Vec<f64>, bias: Vec<f64> },
    GlobalAvgPool,
    Residual { body: Vec<InferenceLayer>, shortcut: Shortcut },
}

/// A frozen network: discrete weights and discrete-track statistics only.
#[derive(Clone, Debug, PartialEq)]
pub struct InferenceModel {
    pub arch: String,
    pub input_shape: [usize; 3],
    pub layers: Vec<InferenceLayer>,
}

/// Kernel choice for quantized 1-bit convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvPath {
    /// Popcount wherever the input is a `{0, 1}` activation.
    Popcount,
    /// Dequantize and run the float kernel everywhere.
    Float,
}

impl InferenceModel {
    /// Captures `W_q` and the discrete statistics of a trained network.
    pub fn from_network(net: &Network) -> Result<Self> {
        net.require_finalized()?;
        let input_shape = net.arch.parse::<Arch>()?.input_shape();
        Ok(InferenceModel { arch: net.arch.clone(), input_shape, layers: convert(&net.layers)? })
    }

    /// Fails unless the model was exported from `arch`.
    pub fn check_arch(&self, arch: &str) -> Result<()> {
        if self.arch != arch {
            return Err(Error::Format(format!("model is `{}`, expected `{arch}`", self.arch)));
        }
        Ok(())
    }

    /// Number of convolutions the popcount path serves.
    pub fn popcount_layers(&self) -> usize {
        fn count(layers: &[InferenceLayer]) -> usize {
            let mut n = 0;
            let mut prev_binary = false;
            for l in layers {
                match l {
                    InferenceLayer::Conv(c) if prev_binary && is_binary(c) => n += 1,
                    InferenceLayer::Residual { body, .. } => n += count(body),
                    _ => {}
                }
                prev_binary = matches!(l, InferenceLayer::ActQuant(1));
            }
            n
        }
        count(&self.layers)
    }

    /// Payload bytes spent on quantized convolution indices.
    pub fn packed_bytes(&self) -> usize {
        let mut n = 0;
        visit(&self.layers, &mut |l| {
            if let InferenceLayer::Conv(InferenceConv { weights: ConvWeights::Packed { packed, .. }, .. }) = l {
                n += packed.indices.byte_len();
            }
        });
        n
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.infer_with(x, ConvPath::Popcount)
    }

    pub fn infer_with(&self, x: &Tensor, path: ConvPath) -> Result<Tensor> {
        let s = x.shape();
        if s.len() != 4 || s[1..] != self.input_shape {
            return Err(Error::shape("infer", format!("input {s:?} for a model taking [B, {:?}]", self.input_shape)));
        }
        run(&self.layers, x.clone(), path)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut table = Writer::default();
        let mut payload = Writer::default();
        let mut count = 0usize;
        encode_layers(&self.layers, &mut table, &mut payload, &mut count);
        let mut w = Writer::default();
        w.buf.extend_from_slice(&MAGIC);
        w.u16(VERSION);
        w.str16(&self.arch);
        for &d in &self.input_shape {
            w.len_u32(d);
        }
        w.len_u32(count);
        w.buf.extend_from_slice(&table.buf);
        w.u64(payload.buf.len() as u64);
        w.buf.extend_from_slice(&payload.buf);
        let crc = crc32fast::hash(&w.buf[6..]);
        w.u32(crc);
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 10 || bytes[..4] != MAGIC {
            return Err(Error::Format("not an SLBM model file (bad magic)".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported model version {version}, expected {VERSION}")));
        }
        let body = &bytes[..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
        let actual = crc32fast::hash(&body[6..]);
        if stored != actual {
            return Err(Error::Format(format!("checksum mismatch: stored {stored:#010x}, computed {actual:#010x}")));
        }
        let mut r = Reader::new(&body[6..], "model file");
        let arch = r.str16()?;
        let input_shape = [r.usize32()?, r.usize32()?, r.usize32()?];
        let count = r.usize32()?;
        let mut entries = Vec::new();
        for _ in 0..count {
            entries.push(read_entry(&mut r)?);
        }
        let payload_len = r.usize64()?;
        let payload = r.bytes(payload_len)?;
        r.finish()?;
        let mut it = entries.into_iter();
        let layers = decode_layers(&mut it, count, payload)?;
        if it.next().is_some() {
            return Err(Error::Format("entries left over after the layer tree".into()));
        }
        Ok(InferenceModel { arch, input_shape, layers })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Exports a finalized network to `path`.
pub fn export(net: &Network, path: impl AsRef<Path>) -> Result<InferenceModel> {
    let model = InferenceModel::from_network(net)?;
    model.save(path)?;
    Ok(model)
}

fn is_binary(c: &InferenceConv) -> bool {
    matches!(&c.weights, ConvWeights::Packed { sign_rows: Some(_), .. })
}

fn visit(layers: &[InferenceLayer], f: &mut impl FnMut(&InferenceLayer)) {
    for l in layers {
        f(l);
        if let InferenceLayer::Residual { body, .. } = l {
            visit(body, f);
        }
    }
}

fn convert(layers: &[Layer]) -> Result<Vec<InferenceLayer>> {
    layers
        .iter()
        .map(|l| {
            Ok(match l {
                Layer::Conv(c) => {
                    let shape = c.weight_shape();
                    let weights = match &c.weight {
                        ConvWeight::Full(p) => ConvWeights::Full(p.value.data().to_vec()),
                        w => {
                            let grid = w.grid().expect("quantized weight").clone();
                            let idx = w.grid_indices().expect("quantized weight");
                            ConvWeights::packed(PackedWeights::new(grid, shape.to_vec(), &idx)?, w.mode())
                        }
                    };
                    InferenceLayer::Conv(InferenceConv {
                        name: c.name.clone(),
                        shape,
                        stride: c.stride,
                        padding: c.padding,
                        weights,
                    })
                }
                Layer::Sbn(s) => {
                    InferenceLayer::Norm { name: s.name.clone(), normalizer: s.eval_normalizer(Track::Discrete)? }
                }
                Layer::ActQuant(b) => InferenceLayer::ActQuant(*b),
                Layer::Relu => InferenceLayer::Relu,
                Layer::MaxPool { kernel, stride } => InferenceLayer::MaxPool { kernel: *kernel, stride: *stride },
                Layer::Flatten => InferenceLayer::Flatten,
                Layer::Linear(l) => InferenceLayer::Linear {
                    name: l.name.clone(),
                    in_features: l.weight.value.shape()[0],
                    out_features: l.weight.value.shape()[1],
                    weight: l.weight.value.data().to_vec(),
                    bias: l.bias.value.data().to_vec(),
                },
                Layer::GlobalAvgPool => InferenceLayer::GlobalAvgPool,
                Layer::Residual { body, shortcut } => {
                    InferenceLayer::Residual { body: convert(body)?, shortcut: *shortcut }
                }
            })
        })
        .collect()
}

fn run(layers: &[InferenceLayer], mut x: Tensor, path: ConvPath) -> Result<Tensor> {
    let mut binary_input = false;
    for layer in layers {
        let next_binary = matches!(layer, InferenceLayer::ActQuant(1));
        x = match layer {
            InferenceLayer::Conv(c) => conv(c, &x, path == ConvPath::Popcount && binary_input)?,
            InferenceLayer::Norm { normalizer, .. } => normalizer.apply(&x)?,
            InferenceLayer::ActQuant(bits) => x.map(|a| act_quantize_value(a, *bits)),
            InferenceLayer::Relu => x.map(|a| a.max(0.0)),
            InferenceLayer::MaxPool { kernel, stride } => {
                let (v, _, shape) = kernels::max_pool2d(x.data(), x.shape(), *kernel, *stride);
                Tensor::new(shape.to_vec(), v)?
            }
            InferenceLayer::Flatten => {
                let b = x.shape()[0];
                let n = x.len() / b.max(1);
                x.reshape(vec![b, n])?
            }
            InferenceLayer::Linear { in_features, out_features, weight, bias, name } => {
                let s = x.shape();
                if s.len() != 2 || s[1] != *in_features {
                    return Err(Error::shape("infer", format!("{name} takes {in_features} features, got {s:?}")));
                }
                let b = s[0];
                let mut out: Vec<f64> = (0..b).flat_map(|_| bias.iter().copied()).collect();
                let (k, n) = (*in_features, *out_features);
                kernels::gemm(b, k, n, 1.0, x.data(), k, 1, weight, n, 1, 1.0, &mut out, n);
                Tensor::new(vec![b, n], out)?
            }
            InferenceLayer::GlobalAvgPool => {
                let s = x.shape();
                Tensor::new(vec![s[0], s[1]], kernels::global_avg_pool(x.data(), s[2] * s[3]))?
            }
            InferenceLayer::Residual { body, shortcut } => {
                let y = run(body, x.clone(), path)?;
                let s = match *shortcut {
                    Shortcut::Identity => x,
                    Shortcut::PadSubsample { stride, out_channels } => {
                        let (v, shape, _) = kernels::shortcut_pad(x.data(), x.shape(), stride, out_channels);
                        Tensor::new(shape.to_vec(), v)?
                    }
                };
                if y.shape() != s.shape() {
                    return Err(Error::shape("infer", format!("residual {:?} vs shortcut {:?}", y.shape(), s.shape())));
                }
                let mut y = y;
                y.data_mut().iter_mut().zip(s.data()).for_each(|(a, b)| *a += b);
                y
            }
        };
        binary_input = next_binary;
    }
    Ok(x)
}

fn conv(c: &InferenceConv, x: &Tensor, binary_input: bool) -> Result<Tensor> {
    let geo = ConvGeometry::new(x.shape(), &c.shape, c.stride, c.padding)?;
    let out = match &c.weights {
        ConvWeights::Packed { sign_rows: Some(rows), .. } if binary_input => {
            binary_conv01(&geo, x.data(), rows)?.into_iter().map(|v| v as f64).collect()
        }
        w => kernels::conv2d_forward(&geo, x.data(), w.values()),
    };
    Tensor::new(geo.out_shape().to_vec(), out)
}

struct Entry {
    name: String,
    kind: u8,
    shape: Vec<usize>,
    q: u8,
    grid: Vec<f64>,
    params: Vec<usize>,
    blob: (usize, usize),
}

fn write_entry(t: &mut Writer, payload: &mut Writer, e: &Entry, blob: &[u8]) {
    t.str16(&e.name);
    t.u8(e.kind);
    t.u8(e.shape.len() as u8);
    for &d in &e.shape {
        t.len_u32(d);
    }
    t.u8(e.q);
    t.u16(e.grid.len() as u16);
    t.f64s(&e.grid);
    t.u8(e.params.len() as u8);
    for &p in &e.params {
        t.len_u32(p);
    }
    t.u64(payload.buf.len() as u64);
    t.u64(blob.len() as u64);
    payload.buf.extend_from_slice(blob);
}

fn f64_blob(parts: &[&[f64]]) -> Vec<u8> {
    let mut w = Writer::default();
    for p in parts {
        w.f64s(p);
    }
    w.buf
}

fn encode_layers(layers: &[InferenceLayer], t: &mut Writer, payload: &mut Writer, count: &mut usize) {
    for l in layers {
        *count += 1;
        let simple = |name: &str, kind: u8| Entry {
            name: name.into(),
            kind,
            shape: vec![],
            q: 32,
            grid: vec![],
            params: vec![],
            blob: (0, 0),
        };
        match l {
            InferenceLayer::Conv(c) => {
                let mut e = simple(&c.name, KIND_FULL_CONV);
                e.shape = c.shape.to_vec();
                let blob = match &c.weights {
                    ConvWeights::Full(v) => {
                        e.params = vec![c.stride, c.padding];
                        f64_blob(&[v])
                    }
                    ConvWeights::Packed { packed, mode, .. } => {
                        e.kind = KIND_PACKED_CONV;
                        e.q = packed.grid.bits() as u8;
                        e.grid = packed.grid.values().to_vec();
                        e.params = vec![c.stride, c.padding, mode.tag() as usize];
                        let mut w = Writer::default();
                        w.u64s(&packed.indices.words);
                        w.buf
                    }
                };
                write_entry(t, payload, &e, &blob);
            }
            InferenceLayer::Norm { name, normalizer: n } => {
                let mut e = simple(name, KIND_NORM);
                e.shape = vec![n.channels()];
                write_entry(t, payload, &e, &f64_blob(&[&[n.eps], &n.gamma, &n.beta, &n.mean, &n.var]));
            }
            InferenceLayer::ActQuant(bits) => {
                let mut e = simple("act_quant", KIND_ACT_QUANT);
                e.q = *bits as u8;
                write_entry(t, payload, &e, &[]);
            }
            InferenceLayer::Relu => write_entry(t, payload, &simple("relu", KIND_RELU), &[]),
            InferenceLayer::MaxPool { kernel, stride } => {
                let mut e = simple("max_pool", KIND_MAX_POOL);
                e.params = vec![*kernel, *stride];
                write_entry(t, payload, &e, &[]);
            }
            InferenceLayer::Flatten => write_entry(t, payload, &simple("flatten", KIND_FLATTEN), &[]),
            InferenceLayer::Linear { name, in_features, out_features, weight, bias } => {
                let mut e = simple(name, KIND_LINEAR);
                e.shape = vec![*in_features, *out_features];
                write_entry(t, payload, &e, &f64_blob(&[weight, bias]));
            }
            InferenceLayer::GlobalAvgPool => write_entry(t, payload, &simple("global_avg_pool", KIND_GAP), &[]),
            InferenceLayer::Residual { body, shortcut } => {
                let mut e = simple("residual", KIND_RESIDUAL);
                e.params = match *shortcut {
                    Shortcut::Identity => vec![body.len(), 0, 1, 0],
                    Shortcut::PadSubsample { stride, out_channels } => vec![body.len(), 1, stride, out_channels],
                };
                write_entry(t, payload, &e, &[]);
                encode_layers(body, t, payload, count);
            }
        }
    }
}

fn read_entry(r: &mut Reader<'_>) -> Result<Entry> {
    let name = r.str16()?;
    let kind = r.u8()?;
    let rank = r.u8()? as usize;
    let shape = (0..rank).map(|_| r.usize32()).collect::<Result<Vec<_>>>()?;
    let q = r.u8()?;
    let g = r.u16()? as usize;
    let grid = r.f64s(g)?;
    let np = r.u8()? as usize;
    let params = (0..np).map(|_| r.usize32()).collect::<Result<Vec<_>>>()?;
    let blob = (r.usize64()?, r.usize64()?);
    Ok(Entry { name, kind, shape, q, grid, params, blob })
}

fn bad(e: &Entry, why: &str) -> Error {
    Error::Format(format!("entry `{}` (kind {}): {why}", e.name, e.kind))
}

fn decode_layers(
    it: &mut std::vec::IntoIter<Entry>,
    count: usize,
    payload: &[u8],
) -> Result<Vec<InferenceLayer>> {
    let mut out = Vec::new();
    while out.len() < count {
        let Some(e) = it.next() else {
            return Err(Error::Format("layer tree ends early".into()));
        };
        let blob = e
            .blob
            .0
            .checked_add(e.blob.1)
            .filter(|&end| end <= payload.len())
            .map(|end| &payload[e.blob.0..end])
            .ok_or_else(|| bad(&e, "blob outside the payload"))?;
        let mut br = Reader::new(blob, "model blob");
        let need_params = |n: usize| if e.params.len() == n { Ok(()) } else { Err(bad(&e, "wrong parameter count")) };
        let layer = match e.kind {
            KIND_FULL_CONV | KIND_PACKED_CONV => {
                let shape: [usize; 4] = e.shape.clone().try_into().map_err(|_| bad(&e, "conv shape must have rank 4"))?;
                let n: usize = shape.iter().product();
                let weights = if e.kind == KIND_FULL_CONV {
                    need_params(2)?;
                    ConvWeights::Full(br.f64s(n)?)
                } else {
                    need_params(3)?;
                    let grid = QuantGrid::from_values(e.q as u32, e.grid.clone())?;
                    let words = br.u64s(words_for(n, e.q as u32))?;
                    let indices = PackedIndices::from_words(e.q as u32, n, words)?;
                    if indices.unpack().iter().any(|&i| i >= grid.len()) {
                        return Err(bad(&e, "index outside the grid"));
                    }
                    let mode = WeightMode::from_tag(e.params[2] as u8)?;
                    ConvWeights::packed(PackedWeights { grid, shape: shape.to_vec(), indices }, mode)
                };
                InferenceLayer::Conv(InferenceConv {
                    name: e.name.clone(),
                    shape,
                    stride: e.params[0],
                    padding: e.params[1],
                    weights,
                })
            }
            KIND_NORM => {
                let c = *e.shape.first().ok_or_else(|| bad(&e, "missing channel count"))?;
                let eps = br.f64()?;
                let (gamma, beta, mean, var) = (br.f64s(c)?, br.f64s(c)?, br.f64s(c)?, br.f64s(c)?);
                InferenceLayer::Norm { name: e.name.clone(), normalizer: Normalizer { mean, var, gamma, beta, eps } }
            }
            KIND_ACT_QUANT => InferenceLayer::ActQuant(e.q as u32),
            KIND_RELU => InferenceLayer::Relu,
            KIND_MAX_POOL => {
                need_params(2)?;
                InferenceLayer::MaxPool { kernel: e.params[0], stride: e.params[1] }
            }
            KIND_FLATTEN => InferenceLayer::Flatten,
            KIND_LINEAR => {
                let [i, o]: [usize; 2] = e.shape.clone().try_into().map_err(|_| bad(&e, "linear shape must have rank 2"))?;
                InferenceLayer::Linear {
                    name: e.name.clone(),
                    in_features: i,
                    out_features: o,
                    weight: br.f64s(i * o)?,
                    bias: br.f64s(o)?,
                }
            }
            KIND_GAP => InferenceLayer::GlobalAvgPool,
            KIND_RESIDUAL => {
                need_params(4)?;
                let shortcut = match e.params[1] {
                    0 => Shortcut::Identity,
                    1 => Shortcut::PadSubsample { stride: e.params[2], out_channels: e.params[3] },
                    k => return Err(bad(&e, &format!("unknown shortcut kind {k}"))),
                };
                let body = decode_layers(it, e.params[0], payload)?;
                InferenceLayer::Residual { body, shortcut }
            }
            k => return Err(bad(&e, &format!("unknown kind {k}"))),
        };
        br.finish()?;
        out.push(layer);
    }
    Ok(out)
}
