//! Layer assembly and the reference architectures.
//!
//! A [`Network`] is built from a list of [`LayerSpec`]s. The first
//! convolution, every SBN affine pair and the classifier head are always full
//! precision; every other convolution is quantized according to its spec and
//! is preceded by an activation quantizer and followed by SBN.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::param::{Binder, Param, ParamKind, ParamMut, ParamRef};
use crate::quant::{self, QuantGrid, SteWeight};
use crate::sbn::{SbnLayer, Track};
use crate::search::{kaiming_fan_in, FreezeReport, SearchableWeight};
use crate::tensor::Tensor;

/// Bitwidths accepted for weights and activations.
pub const BITWIDTHS: [u32; 5] = [1, 2, 4, 8, 32];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum WeightMode {
    Fp32,
    Slb,
    Ste,
}

impl WeightMode {
    pub fn tag(self) -> u8 {
        match self {
            WeightMode::Fp32 => 0,
            WeightMode::Slb => 1,
            WeightMode::Ste => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(WeightMode::Fp32),
            1 => Ok(WeightMode::Slb),
            2 => Ok(WeightMode::Ste),
            t => Err(Error::Format(format!("unknown weight mode tag {t}"))),
        }
    }
}

impl fmt::Display for WeightMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WeightMode::Fp32 => "fp32",
            WeightMode::Slb => "slb",
            WeightMode::Ste => "ste",
        })
    }
}

impl FromStr for WeightMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fp32" => Ok(WeightMode::Fp32),
            "slb" => Ok(WeightMode::Slb),
            "ste" => Ok(WeightMode::Ste),
            other => Err(Error::InvalidArgument(format!("unknown weight mode `{other}` (slb|ste|fp32)"))),
        }
    }
}

/// Which weights and which SBN statistics a forward pass uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightState {
    /// Expectation weights `W_c` and continuous statistics.
    Continuous,
    /// Argmax weights `W_q` and discrete statistics.
    Discrete,
}

impl WeightState {
    pub fn track(self) -> Track {
        match self {
            WeightState::Continuous => Track::Continuous,
            WeightState::Discrete => Track::Discrete,
        }
    }
}

impl fmt::Display for WeightState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WeightState::Continuous => "continuous",
            WeightState::Discrete => "discrete",
        })
    }
}

impl FromStr for WeightState {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "continuous" => Ok(WeightState::Continuous),
            "discrete" => Ok(WeightState::Discrete),
            other => Err(Error::InvalidArgument(format!("unknown state `{other}` (continuous|discrete)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    MnistCnn,
    VggSmall,
    Resnet20,
}

impl Arch {
    /// `[C, H, W]` of one input image.
    pub fn input_shape(self) -> [usize; 3] {
        match self {
            Arch::MnistCnn => [1, 28, 28],
            Arch::VggSmall | Arch::Resnet20 => [3, 32, 32],
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::MnistCnn => "mnist_cnn",
            Arch::VggSmall => "vgg_small",
            Arch::Resnet20 => "resnet20",
        })
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist_cnn" => Ok(Arch::MnistCnn),
            "vgg_small" => Ok(Arch::VggSmall),
            "resnet20" => Ok(Arch::Resnet20),
            other => Err(Error::InvalidArgument(format!(
                "unknown architecture `{other}` (mnist_cnn|vgg_small|resnet20)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shortcut {
    Identity,
    /// Spatial subsampling plus zero channels (parameter-free projection).
    PadSubsample { stride: usize, out_channels: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Conv { in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize, mode: WeightMode, bits: u32 },
    Sbn { channels: usize },
    ActQuant { bits: u32 },
    Relu,
    MaxPool { kernel: usize, stride: usize },
    Flatten,
    Linear { in_features: usize, out_features: usize },
    GlobalAvgPool,
    Residual { body: Vec<LayerSpec>, shortcut: Shortcut },
}

#[derive(Clone, Debug, PartialEq)]
pub enum ConvWeight {
    Full(Param),
    Slb { id: usize, name: String, weight: SearchableWeight },
    Ste { id: usize, name: String, weight: SteWeight },
}

impl ConvWeight {
    pub fn mode(&self) -> WeightMode {
        match self {
            ConvWeight::Full(_) => WeightMode::Fp32,
            ConvWeight::Slb { .. } => WeightMode::Slb,
            ConvWeight::Ste { .. } => WeightMode::Ste,
        }
    }

    pub fn grid(&self) -> Option<&QuantGrid> {
        match self {
            ConvWeight::Full(_) => None,
            ConvWeight::Slb { weight, .. } => Some(&weight.grid),
            ConvWeight::Ste { weight, .. } => Some(&weight.grid),
        }
    }

    /// Weights an inference pass uses: `W_q` for searched layers, `Q(latent)`
    /// for STE layers.
    pub fn inference_weights(&self) -> Tensor {
        match self {
            ConvWeight::Full(p) => p.value.clone(),
            ConvWeight::Slb { weight, .. } => weight.discrete_weights(),
            ConvWeight::Ste { weight, .. } => weight.quantized(),
        }
    }

    /// Grid index of every weight element, for quantized layers.
    pub fn grid_indices(&self) -> Option<Vec<usize>> {
        match self {
            ConvWeight::Full(_) => None,
            ConvWeight::Slb { weight, .. } => Some(weight.discrete_indices()),
            ConvWeight::Ste { weight, .. } => {
                Some(weight.latent.data().iter().map(|&x| weight.grid.index_of(x)).collect())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: ConvWeight,
}

impl Conv {
    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel, self.kernel]
    }

    fn weight_var(&self, g: &mut Graph, binder: &mut Binder, state: WeightState, tau: f64) -> Result<Var> {
        match (&self.weight, state) {
            (ConvWeight::Full(p), _) => Ok(binder.bind(g, p)),
            (ConvWeight::Slb { id, weight, .. }, WeightState::Continuous) => {
                let a = binder.bind_tensor(g, *id, &weight.logits);
                weight.continuous_weights_var(g, a, tau)
            }
            (ConvWeight::Slb { weight, .. }, WeightState::Discrete) => Ok(g.constant(weight.discrete_weights())),
            (ConvWeight::Ste { id, weight, .. }, _) => {
                let lat = binder.bind_tensor(g, *id, &weight.latent);
                Ok(g.ste_quantize(lat, &weight.grid))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub name: String,
    /// `[in, out]`.
    pub weight: Param,
    pub bias: Param,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv(Conv),
    Sbn(SbnLayer),
    ActQuant(u32),
    Relu,
    MaxPool { kernel: usize, stride: usize },
    Flatten,
    Linear(Linear),
    GlobalAvgPool,
    Residual { body: Vec<Layer>, shortcut: Shortcut },
}

/// Parameter storage summary.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamAudit {
    /// Elements of full-precision parameters `W_f`.
    pub full: usize,
    /// Elements of all logit tensors.
    pub logits: usize,
    /// Elements of all STE latent tensors.
    pub latent: usize,
    /// Weight elements of quantized convolutions.
    pub quantized_weights: usize,
    /// Bits needed to store every quantized weight as a grid index.
    pub export_bits: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub arch: String,
    pub layers: Vec<Layer>,
}

fn check_bits(what: &str, bits: u32) -> Result<()> {
    if BITWIDTHS.contains(&bits) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{what} bitwidth must be one of {BITWIDTHS:?}, got {bits}")))
    }
}

/// Specs of a reference architecture.
pub fn arch_specs(arch: Arch, q_w: u32, q_a: u32, mode: WeightMode) -> Result<Vec<LayerSpec>> {
    check_bits("weight", q_w)?;
    check_bits("activation", q_a)?;
    let (mode, bits) = if q_w == 32 || mode == WeightMode::Fp32 { (WeightMode::Fp32, 32) } else { (mode, q_w) };
    let conv = |i, o, stride, padding, mode, bits| LayerSpec::Conv {
        in_channels: i,
        out_channels: o,
        kernel: 3,
        stride,
        padding,
        mode,
        bits,
    };
    let block = |i, o, stride, padding| {
        vec![
            LayerSpec::Relu,
            LayerSpec::ActQuant { bits: q_a },
            conv(i, o, stride, padding, mode, bits),
            LayerSpec::Sbn { channels: o },
        ]
    };
    let pool = LayerSpec::MaxPool { kernel: 2, stride: 2 };
    let mut s = Vec::new();
    match arch {
        Arch::MnistCnn => {
            s.push(conv(1, 16, 1, 0, WeightMode::Fp32, 32));
            s.push(LayerSpec::Sbn { channels: 16 });
            s.extend(block(16, 32, 1, 0));
            s.push(pool.clone());
            s.extend(block(32, 32, 1, 0));
            s.push(pool);
            s.push(LayerSpec::Relu);
            s.push(LayerSpec::Flatten);
            s.push(LayerSpec::Linear { in_features: 32 * 5 * 5, out_features: 10 });
        }
        Arch::VggSmall => {
            s.push(conv(3, 128, 1, 1, WeightMode::Fp32, 32));
            s.push(LayerSpec::Sbn { channels: 128 });
            for (i, o, pooled) in [(128, 128, true), (128, 256, false), (256, 256, true), (256, 512, false), (512, 512, true)]
            {
                s.extend(block(i, o, 1, 1));
                if pooled {
                    s.push(pool.clone());
                }
            }
            s.push(LayerSpec::Relu);
            s.push(LayerSpec::Flatten);
            s.push(LayerSpec::Linear { in_features: 512 * 4 * 4, out_features: 10 });
        }
        Arch::Resnet20 => {
            s.push(conv(3, 16, 1, 1, WeightMode::Fp32, 32));
            s.push(LayerSpec::Sbn { channels: 16 });
            let mut prev = 16;
            for (stage, ch) in [16, 32, 64].into_iter().enumerate() {
                for b in 0..3 {
                    let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                    let mut body = block(prev, ch, stride, 1);
                    body.extend(block(ch, ch, 1, 1));
                    let shortcut = if stride != 1 || prev != ch {
                        Shortcut::PadSubsample { stride, out_channels: ch }
                    } else {
                        Shortcut::Identity
                    };
                    s.push(LayerSpec::Residual { body, shortcut });
                    prev = ch;
                }
            }
            s.push(LayerSpec::Relu);
            s.push(LayerSpec::GlobalAvgPool);
            s.push(LayerSpec::Linear { in_features: 64, out_features: 10 });
        }
    }
    Ok(s)
}

pub fn build(arch: Arch, q_w: u32, q_a: u32, mode: WeightMode, seed: u64) -> Result<Network> {
    Network::from_specs(&arch.to_string(), &arch_specs(arch, q_w, q_a, mode)?, seed)
}

struct Builder {
    rng: ChaCha8Rng,
    next_id: usize,
    convs: usize,
    sbns: usize,
    fcs: usize,
}

impl Builder {
    fn id(&mut self) -> usize {
        self.next_id += 1;
        self.next_id - 1
    }

    fn layers(&mut self, specs: &[LayerSpec]) -> Result<Vec<Layer>> {
        specs.iter().map(|s| self.layer(s)).collect()
    }

    fn layer(&mut self, spec: &LayerSpec) -> Result<Layer> {
        Ok(match spec {
            &LayerSpec::Conv { in_channels, out_channels, kernel, stride, padding, mode, bits } => {
                if stride == 0 || kernel == 0 {
                    return Err(Error::InvalidArgument("convolution needs stride and kernel >= 1".into()));
                }
                let first = self.convs == 0;
                self.convs += 1;
                let name = format!("conv{}", self.convs);
                let shape = [out_channels, in_channels, kernel, kernel];
                let std = (2.0 / kaiming_fan_in(&shape) as f64).sqrt();
                let id = self.id();
                let quantized = !first && mode != WeightMode::Fp32 && bits != 32;
                let weight = if !quantized {
                    let w = Tensor::randn(shape.to_vec(), std, &mut self.rng);
                    ConvWeight::Full(Param::new(id, format!("{name}.weight"), ParamKind::Full, w))
                } else {
                    let grid = QuantGrid::uniform(bits)?;
                    match mode {
                        WeightMode::Slb => ConvWeight::Slb {
                            id,
                            name: format!("{name}.logits"),
                            weight: SearchableWeight::init(grid, &shape, &mut self.rng),
                        },
                        _ => {
                            let mut latent = Tensor::randn(shape.to_vec(), std, &mut self.rng);
                            quant::clamp_unit(&mut latent);
                            ConvWeight::Ste { id, name: format!("{name}.latent"), weight: SteWeight { grid, latent } }
                        }
                    }
                };
                Layer::Conv(Conv { name, in_channels, out_channels, kernel, stride, padding, weight })
            }
            &LayerSpec::Sbn { channels } => {
                self.sbns += 1;
                let first = self.id();
                self.id();
                Layer::Sbn(SbnLayer::new(format!("sbn{}", self.sbns), channels, first))
            }
            &LayerSpec::ActQuant { bits } => {
                check_bits("activation", bits)?;
                Layer::ActQuant(bits)
            }
            LayerSpec::Relu => Layer::Relu,
            &LayerSpec::MaxPool { kernel, stride } => Layer::MaxPool { kernel, stride },
            LayerSpec::Flatten => Layer::Flatten,
            &LayerSpec::Linear { in_features, out_features } => {
                self.fcs += 1;
                let name = format!("fc{}", self.fcs);
                let std = (1.0 / in_features as f64).sqrt();
                let w = Tensor::randn(vec![in_features, out_features], std, &mut self.rng);
                let wid = self.id();
                let bid = self.id();
                Layer::Linear(Linear {
                    weight: Param::new(wid, format!("{name}.weight"), ParamKind::Full, w),
                    bias: Param::new(bid, format!("{name}.bias"), ParamKind::Full, Tensor::zeros(vec![out_features])),
                    name,
                })
            }
            LayerSpec::GlobalAvgPool => Layer::GlobalAvgPool,
            LayerSpec::Residual { body, shortcut } => Layer::Residual { body: self.layers(body)?, shortcut: *shortcut },
        })
    }
}

fn spec_of(layer: &Layer) -> LayerSpec {
    match layer {
        Layer::Conv(c) => LayerSpec::Conv {
            in_channels: c.in_channels,
            out_channels: c.out_channels,
            kernel: c.kernel,
            stride: c.stride,
            padding: c.padding,
            mode: c.weight.mode(),
            bits: c.weight.grid().map_or(32, |g| g.bits()),
        },
        Layer::Sbn(s) => LayerSpec::Sbn { channels: s.channels() },
        Layer::ActQuant(b) => LayerSpec::ActQuant { bits: *b },
        Layer::Relu => LayerSpec::Relu,
        Layer::MaxPool { kernel, stride } => LayerSpec::MaxPool { kernel: *kernel, stride: *stride },
        Layer::Flatten => LayerSpec::Flatten,
        Layer::Linear(l) => LayerSpec::Linear {
            in_features: l.weight.value.shape()[0],
            out_features: l.weight.value.shape()[1],
        },
        Layer::GlobalAvgPool => LayerSpec::GlobalAvgPool,
        Layer::Residual { body, shortcut } => {
            LayerSpec::Residual { body: body.iter().map(spec_of).collect(), shortcut: *shortcut }
        }
    }
}

fn forward_layers(
    layers: &mut [Layer],
    g: &mut Graph,
    binder: &mut Binder,
    mut x: Var,
    state: WeightState,
    training: bool,
    tau: f64,
) -> Result<Var> {
    for layer in layers {
        x = match layer {
            Layer::Conv(c) => {
                let w = c.weight_var(g, binder, state, tau)?;
                g.conv2d(x, w, c.stride, c.padding)?
            }
            Layer::Sbn(s) => s.forward(g, binder, x, state.track(), training)?,
            Layer::ActQuant(bits) => g.act_quantize(x, *bits)?,
            Layer::Relu => g.relu(x),
            Layer::MaxPool { kernel, stride } => g.max_pool2d(x, *kernel, *stride)?,
            Layer::Flatten => g.flatten(x)?,
            Layer::Linear(l) => {
                let w = binder.bind(g, &l.weight);
                let b = binder.bind(g, &l.bias);
                let y = g.matmul(x, w)?;
                g.add(y, b)?
            }
            Layer::GlobalAvgPool => g.global_avg_pool(x)?,
            Layer::Residual { body, shortcut } => {
                let y = forward_layers(body, g, binder, x, state, training, tau)?;
                let s = match *shortcut {
                    Shortcut::Identity => x,
                    Shortcut::PadSubsample { stride, out_channels } => g.shortcut_pad(x, stride, out_channels)?,
                };
                g.add(y, s)?
            }
        };
    }
    Ok(x)
}

fn visit<'a>(layers: &'a [Layer], f: &mut impl FnMut(&'a Layer)) {
    for l in layers {
        f(l);
        if let Layer::Residual { body, .. } = l {
            visit(body, f);
        }
    }
}

fn visit_mut(layers: &mut [Layer], f: &mut impl FnMut(&mut Layer)) {
    for l in layers {
        f(l);
        if let Layer::Residual { body, .. } = l {
            visit_mut(body, f);
        }
    }
}

fn collect_mut<'a>(layers: &'a mut [Layer], out: &mut Vec<ParamMut<'a>>) {
    for l in layers {
        match l {
            Layer::Conv(c) => out.push(match &mut c.weight {
                ConvWeight::Full(p) => ParamMut { id: p.id, name: &p.name, kind: p.kind, value: &mut p.value },
                ConvWeight::Slb { id, name, weight } => {
                    ParamMut { id: *id, name, kind: ParamKind::Logits, value: &mut weight.logits }
                }
                ConvWeight::Ste { id, name, weight } => {
                    ParamMut { id: *id, name, kind: ParamKind::Latent, value: &mut weight.latent }
                }
            }),
            Layer::Sbn(s) => {
                for p in [&mut s.gamma, &mut s.beta] {
                    out.push(ParamMut { id: p.id, name: &p.name, kind: p.kind, value: &mut p.value });
                }
            }
            Layer::Linear(lin) => {
                for p in [&mut lin.weight, &mut lin.bias] {
                    out.push(ParamMut { id: p.id, name: &p.name, kind: p.kind, value: &mut p.value });
                }
            }
            Layer::Residual { body, .. } => collect_mut(body, out),
            _ => {}
        }
    }
}

impl Network {
    /// Builds a network from layer specs. The first convolution is forced to
    /// full precision whatever its spec says.
    pub fn from_specs(arch: &str, specs: &[LayerSpec], seed: u64) -> Result<Network> {
        let mut b = Builder { rng: ChaCha8Rng::seed_from_u64(seed), next_id: 0, convs: 0, sbns: 0, fcs: 0 };
        let layers = b.layers(specs)?;
        Ok(Network { arch: arch.to_string(), layers })
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(spec_of).collect()
    }

    /// Records the network on `g` and returns the logits.
    ///
    /// Training mode uses batch statistics and updates the running statistics
    /// of the track selected by `state`; `tau` only matters for searched
    /// layers in the continuous state.
    pub fn forward(
        &mut self,
        g: &mut Graph,
        binder: &mut Binder,
        x: Var,
        state: WeightState,
        training: bool,
        tau: f64,
    ) -> Result<Var> {
        forward_layers(&mut self.layers, g, binder, x, state, training, tau)
    }

    /// Eval-mode logits for a batch, without gradients.
    pub fn predict(&mut self, x: &Tensor, state: WeightState, tau: f64) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = self.forward(&mut g, &mut Binder::frozen(), xv, state, false, tau)?;
        Ok(g.value(y).clone())
    }

    pub fn params(&self) -> Vec<ParamRef<'_>> {
        let mut out = Vec::new();
        visit(&self.layers, &mut |l| match l {
            Layer::Conv(c) => out.push(match &c.weight {
                ConvWeight::Full(p) => ParamRef { id: p.id, name: &p.name, kind: p.kind, value: &p.value },
                ConvWeight::Slb { id, name, weight } => {
                    ParamRef { id: *id, name, kind: ParamKind::Logits, value: &weight.logits }
                }
                ConvWeight::Ste { id, name, weight } => {
                    ParamRef { id: *id, name, kind: ParamKind::Latent, value: &weight.latent }
                }
            }),
            Layer::Sbn(s) => {
                for p in [&s.gamma, &s.beta] {
                    out.push(ParamRef { id: p.id, name: &p.name, kind: p.kind, value: &p.value });
                }
            }
            Layer::Linear(lin) => {
                for p in [&lin.weight, &lin.bias] {
                    out.push(ParamRef { id: p.id, name: &p.name, kind: p.kind, value: &p.value });
                }
            }
            _ => {}
        });
        out
    }

    pub fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let mut out = Vec::new();
        collect_mut(&mut self.layers, &mut out);
        out
    }

    pub fn param_ids(&self) -> Vec<usize> {
        self.params().iter().map(|p| p.id).collect()
    }

    pub fn param_names(&self) -> Vec<String> {
        self.params().iter().map(|p| p.name.to_string()).collect()
    }

    pub fn param_values(&self) -> Vec<Tensor> {
        self.params().iter().map(|p| p.value.clone()).collect()
    }

    pub fn set_param_values(&mut self, values: &[Tensor]) -> Result<()> {
        let mut params = self.params_mut();
        if params.len() != values.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameter tensors, got {}",
                params.len(),
                values.len()
            )));
        }
        for (p, v) in params.iter_mut().zip(values) {
            if p.value.shape() != v.shape() {
                return Err(Error::shape(
                    "set_param_values",
                    format!("{}: expected {:?}, got {:?}", p.name, p.value.shape(), v.shape()),
                ));
            }
            p.value.data_mut().copy_from_slice(v.data());
        }
        Ok(())
    }

    pub fn convs(&self) -> Vec<&Conv> {
        let mut out = Vec::new();
        visit(&self.layers, &mut |l| {
            if let Layer::Conv(c) = l {
                out.push(c);
            }
        });
        out
    }

    pub fn sbn_layers(&self) -> Vec<&SbnLayer> {
        let mut out = Vec::new();
        visit(&self.layers, &mut |l| {
            if let Layer::Sbn(s) = l {
                out.push(s);
            }
        });
        out
    }

    pub fn for_each_sbn_mut(&mut self, mut f: impl FnMut(&mut SbnLayer)) {
        visit_mut(&mut self.layers, &mut |l| {
            if let Layer::Sbn(s) = l {
                f(s);
            }
        });
    }

    /// Named searchable weights in visit order.
    pub fn searchable(&self) -> Vec<(&str, &SearchableWeight)> {
        self.convs()
            .into_iter()
            .filter_map(|c| match &c.weight {
                ConvWeight::Slb { weight, .. } => Some((c.name.as_str(), weight)),
                _ => None,
            })
            .collect()
    }

    /// True when continuous and discrete forwards can differ.
    pub fn has_search(&self) -> bool {
        self.convs().iter().any(|c| matches!(c.weight, ConvWeight::Slb { .. }))
    }

    pub fn freeze_report(&self, tau: f64, threshold: f64) -> Result<FreezeReport> {
        FreezeReport::validate_threshold(threshold)?;
        let layers =
            self.searchable().into_iter().map(|(n, w)| w.freeze_counts(n, tau, threshold)).collect::<Result<_>>()?;
        Ok(FreezeReport::from_layers(threshold, layers))
    }

    /// Copies continuous statistics onto the discrete track; exact when the
    /// two states use the same weights.
    pub fn copy_continuous_stats(&mut self) {
        self.for_each_sbn_mut(|s| s.discrete = s.continuous.clone());
    }

    /// Clamps every STE latent into `[-1, 1]`.
    pub fn clamp_latents(&mut self) {
        visit_mut(&mut self.layers, &mut |l| {
            if let Layer::Conv(Conv { weight: ConvWeight::Ste { weight, .. }, .. }) = l {
                weight.clamp_latent();
            }
        });
    }

    /// True once every SBN layer carries discrete statistics.
    pub fn is_finalized(&self) -> bool {
        self.sbn_layers().iter().all(|s| s.discrete.initialized)
    }

    pub fn require_finalized(&self) -> Result<()> {
        if self.is_finalized() {
            Ok(())
        } else {
            Err(Error::NotFinalized)
        }
    }

    pub fn audit(&self) -> ParamAudit {
        let mut a = ParamAudit { full: 0, logits: 0, latent: 0, quantized_weights: 0, export_bits: 0 };
        for p in self.params() {
            match p.kind {
                ParamKind::Full => a.full += p.value.len(),
                ParamKind::Logits => a.logits += p.value.len(),
                ParamKind::Latent => a.latent += p.value.len(),
            }
        }
        for c in self.convs() {
            if let Some(grid) = c.weight.grid() {
                let n: usize = c.weight_shape().iter().product();
                a.quantized_weights += n;
                a.export_bits += n * grid.bits() as usize;
            }
        }
        a
    }
}
