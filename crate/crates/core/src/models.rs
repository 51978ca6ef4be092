//! Architecture descriptions, parameter and gain sets, and forward
//! evaluation of the supported denoisers.
//!
//! Every convolution may carry a per-output-channel gain. The gain
//! multiplies the convolution output before the activation, which is the
//! same function as scaling that channel's weights and bias by the gain.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::ops::ConvGeometry;
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One entry of an architecture's layer list.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Layer {
    Conv {
        cin: usize,
        cout: usize,
        k: usize,
        pad: usize,
        stride: usize,
        dilation: usize,
        has_bias: bool,
    },
    /// Transposed convolution; weights are stored `[cin, cout, k, k]`.
    TransposeConv {
        cin: usize,
        cout: usize,
        k: usize,
        pad: usize,
        stride: usize,
        has_bias: bool,
    },
    Relu,
    MaxPool2,
    Upsample2,
    /// Concatenates the running activation (first) with the output of
    /// layer `source` (second) along channels.
    Concat { source: usize },
    /// Replaces the running activation `r` with `input - r`.
    ResidualSubtractInput,
}

impl Layer {
    pub fn is_conv(&self) -> bool {
        matches!(self, Layer::Conv { .. } | Layer::TransposeConv { .. })
    }

    fn has_bias(&self) -> bool {
        match self {
            Layer::Conv { has_bias, .. } | Layer::TransposeConv { has_bias, .. } => *has_bias,
            _ => false,
        }
    }

    fn weight_shape(&self) -> Option<[usize; 4]> {
        match *self {
            Layer::Conv { cin, cout, k, .. } => Some([cout, cin, k, k]),
            Layer::TransposeConv { cin, cout, k, .. } => Some([cin, cout, k, k]),
            _ => None,
        }
    }

    fn out_channels(&self) -> Option<usize> {
        match *self {
            Layer::Conv { cout, .. } | Layer::TransposeConv { cout, .. } => Some(cout),
            _ => None,
        }
    }
}

/// Ordered layer list with bias and gain flags.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchitectureSpec {
    pub name: String,
    pub layers: Vec<Layer>,
    pub bias_free: bool,
    /// Per layer; only meaningful for convolution layers.
    pub gain_tunable: Vec<bool>,
}

/// Named architecture families.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Dncnn,
    BiasFreeDncnn,
    Unet,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dncnn-s" => Ok(Preset::Dncnn),
            "bf-dncnn-s" => Ok(Preset::BiasFreeDncnn),
            "unet-s" => Ok(Preset::Unet),
            other => Err(Error::invalid(format!(
                "unknown architecture preset {other:?} (expected dncnn-s, bf-dncnn-s or unet-s)"
            ))),
        }
    }
}

fn conv(cin: usize, cout: usize, k: usize, stride: usize, dilation: usize, bias: bool) -> Layer {
    Layer::Conv {
        cin,
        cout,
        k,
        pad: dilation * (k - 1) / 2,
        stride,
        dilation,
        has_bias: bias,
    }
}

/// Builds a preset architecture. `depth` is the number of convolutions of
/// the DnCNN variants and is ignored by `unet-s`; `width` is the channel
/// count (`unet-s` scales its 32/64 channel plan by `width / 32`).
pub fn preset(name: &str, depth: usize, width: usize) -> Result<ArchitectureSpec> {
    let kind: Preset = name.parse()?;
    if width < 4 {
        return Err(Error::invalid(format!("width must be >= 4, got {width}")));
    }
    let spec = match kind {
        Preset::Dncnn | Preset::BiasFreeDncnn => {
            if depth < 3 {
                return Err(Error::invalid(format!("depth must be >= 3, got {depth}")));
            }
            let bias = kind == Preset::Dncnn;
            let mut layers = Vec::new();
            layers.push(conv(1, width, 3, 1, 1, bias));
            layers.push(Layer::Relu);
            for _ in 0..depth - 2 {
                layers.push(conv(width, width, 3, 1, 1, bias));
                layers.push(Layer::Relu);
            }
            layers.push(conv(width, 1, 3, 1, 1, bias));
            layers.push(Layer::ResidualSubtractInput);
            ArchitectureSpec::with_default_gains(name, layers, !bias)
        }
        Preset::Unet => {
            let c1 = width;
            let c2 = 2 * width;
            let layers = vec![
                conv(1, c1, 5, 1, 1, true),
                Layer::Relu,
                conv(c1, c1, 3, 1, 1, true),
                Layer::Relu,
                conv(c1, c2, 3, 2, 1, true),
                Layer::Relu,
                conv(c2, c2, 3, 1, 1, true),
                Layer::Relu,
                conv(c2, c2, 3, 1, 2, true),
                Layer::Relu,
                conv(c2, c2, 3, 1, 4, true),
                Layer::Relu,
                Layer::TransposeConv {
                    cin: c2,
                    cout: c2,
                    k: 4,
                    pad: 1,
                    stride: 2,
                    has_bias: true,
                },
                Layer::Relu,
                Layer::Concat { source: 3 },
                conv(c2 + c1, c2, 3, 1, 1, true),
                Layer::Relu,
                conv(c2, 1, 5, 1, 1, true),
            ];
            ArchitectureSpec::with_default_gains(name, layers, false)
        }
    };
    spec.validate()?;
    Ok(spec)
}

impl ArchitectureSpec {
    /// Marks every convolution gain-tunable except the last one.
    pub fn with_default_gains(name: &str, layers: Vec<Layer>, bias_free: bool) -> Self {
        let last_conv = layers.iter().rposition(Layer::is_conv);
        let gain_tunable = layers
            .iter()
            .enumerate()
            .map(|(i, l)| l.is_conv() && Some(i) != last_conv)
            .collect();
        ArchitectureSpec {
            name: name.to_string(),
            layers,
            bias_free,
            gain_tunable,
        }
    }

    /// Checks channel chaining and the bias and gain rules; the error names
    /// the first inconsistent layer.
    pub fn validate(&self) -> Result<()> {
        let bad = |layer: usize, reason: String| Error::InvalidArchitecture { layer, reason };
        if self.gain_tunable.len() != self.layers.len() {
            return Err(bad(
                self.layers.len(),
                format!(
                    "gain flags cover {} layers, architecture has {}",
                    self.gain_tunable.len(),
                    self.layers.len()
                ),
            ));
        }
        let last_conv = self
            .layers
            .iter()
            .rposition(Layer::is_conv)
            .ok_or_else(|| bad(0, "architecture has no convolution".into()))?;
        let mut channels = 1usize;
        let mut scale = 0i32;
        let mut history: Vec<(usize, i32)> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                Layer::Conv {
                    cin,
                    cout,
                    k,
                    stride,
                    dilation,
                    ..
                } => {
                    if cin != channels {
                        return Err(bad(i, format!("expects {cin} input channels, receives {channels}")));
                    }
                    if cout == 0 || k == 0 || stride == 0 || dilation == 0 {
                        return Err(bad(i, "zero extent, stride or dilation".into()));
                    }
                    match stride {
                        1 => {}
                        2 => scale += 1,
                        s => return Err(bad(i, format!("unsupported stride {s}"))),
                    }
                    channels = cout;
                }
                Layer::TransposeConv {
                    cin, cout, k, stride, pad, ..
                } => {
                    if cin != channels {
                        return Err(bad(i, format!("expects {cin} input channels, receives {channels}")));
                    }
                    if stride != 2 || k != 2 * pad + 2 {
                        return Err(bad(i, "transpose convolution must upsample exactly 2x".into()));
                    }
                    scale -= 1;
                    channels = cout;
                }
                Layer::MaxPool2 => scale += 1,
                Layer::Upsample2 => scale -= 1,
                Layer::Relu => {}
                Layer::Concat { source } => {
                    let Some(&(src_ch, src_scale)) = history.get(source) else {
                        return Err(bad(i, format!("concat source {source} is not an earlier layer")));
                    };
                    if src_scale != scale {
                        return Err(bad(i, "concat source has a different resolution".into()));
                    }
                    channels += src_ch;
                }
                Layer::ResidualSubtractInput => {
                    if channels != 1 || scale != 0 {
                        return Err(bad(i, "residual needs a full-resolution single-channel signal".into()));
                    }
                }
            }
            if scale < 0 {
                return Err(bad(i, "upsampling above input resolution".into()));
            }
            if self.bias_free && layer.has_bias() {
                return Err(bad(i, "bias-free architecture has a biased convolution".into()));
            }
            if self.gain_tunable[i] && !layer.is_conv() {
                return Err(bad(i, "only convolutions can carry gains".into()));
            }
            history.push((channels, scale));
        }
        if self.gain_tunable[last_conv] {
            return Err(bad(last_conv, "the final convolution must not be gain-tunable".into()));
        }
        if channels != 1 || scale != 0 {
            return Err(bad(
                self.layers.len() - 1,
                format!("network must end with 1 full-resolution channel, ends with {channels}"),
            ));
        }
        Ok(())
    }

    /// Indices into `layers` of the convolution layers, in order.
    pub fn conv_layers(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| self.layers[i].is_conv())
            .collect()
    }

    pub fn count_weights(&self) -> usize {
        self.layers
            .iter()
            .filter_map(Layer::weight_shape)
            .map(|s| s.iter().product::<usize>())
            .sum()
    }

    pub fn count_biases(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| l.has_bias())
            .filter_map(Layer::out_channels)
            .sum()
    }

    /// Weights plus biases.
    pub fn count_params(&self) -> usize {
        self.count_weights() + self.count_biases()
    }

    /// One gain per output channel of every gain-tunable convolution.
    pub fn count_gains(&self) -> usize {
        self.layers
            .iter()
            .zip(&self.gain_tunable)
            .filter(|(_, &t)| t)
            .filter_map(|(l, _)| l.out_channels())
            .sum()
    }

    fn downsamplings(&self) -> u32 {
        self.layers
            .iter()
            .filter(|l| matches!(l, Layer::MaxPool2 | Layer::Conv { stride: 2, .. }))
            .count() as u32
    }

    /// Required divisor of the input extents.
    pub fn extent_multiple(&self) -> usize {
        1 << self.downsamplings()
    }

    /// Smallest input extent: the largest kernel span measured at input
    /// resolution, rounded up to [`Self::extent_multiple`].
    pub fn min_extent(&self) -> usize {
        let mut scale = 1usize;
        let mut span = 1usize;
        for layer in &self.layers {
            match *layer {
                Layer::Conv {
                    k, dilation, stride, ..
                } => {
                    span = span.max((dilation * (k - 1) + 1) * scale);
                    if stride == 2 {
                        scale *= 2;
                    }
                }
                Layer::TransposeConv { .. } | Layer::Upsample2 => scale = (scale / 2).max(1),
                Layer::MaxPool2 => scale *= 2,
                _ => {}
            }
        }
        let m = self.extent_multiple();
        span.div_ceil(m) * m
    }

    /// Canonical line-oriented text form, parsed back by [`Self::from_text`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "name {}", self.name);
        let _ = writeln!(s, "bias_free {}", self.bias_free as u8);
        for (layer, &gain) in self.layers.iter().zip(&self.gain_tunable) {
            let _ = match *layer {
                Layer::Conv {
                    cin,
                    cout,
                    k,
                    pad,
                    stride,
                    dilation,
                    has_bias,
                } => writeln!(
                    s,
                    "conv cin={cin} cout={cout} k={k} pad={pad} stride={stride} dilation={dilation} bias={} gain={}",
                    has_bias as u8, gain as u8
                ),
                Layer::TransposeConv {
                    cin,
                    cout,
                    k,
                    pad,
                    stride,
                    has_bias,
                } => writeln!(
                    s,
                    "transpose_conv cin={cin} cout={cout} k={k} pad={pad} stride={stride} bias={} gain={}",
                    has_bias as u8, gain as u8
                ),
                Layer::Relu => writeln!(s, "relu"),
                Layer::MaxPool2 => writeln!(s, "maxpool2"),
                Layer::Upsample2 => writeln!(s, "upsample2"),
                Layer::Concat { source } => writeln!(s, "concat source={source}"),
                Layer::ResidualSubtractInput => writeln!(s, "residual_subtract_input"),
            };
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |line: usize, reason: String| Error::Config {
            line: line + 1,
            reason,
        };
        let mut name = None;
        let mut bias_free = None;
        let mut layers = Vec::new();
        let mut gains = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let mut words = line.split_whitespace();
            let Some(head) = words.next() else { continue };
            let mut kv = std::collections::BTreeMap::new();
            let rest: Vec<&str> = words.collect();
            match head {
                "name" => {
                    name = Some(rest.join(" "));
                    continue;
                }
                "bias_free" => {
                    bias_free = Some(match rest.as_slice() {
                        ["0"] => false,
                        ["1"] => true,
                        _ => return Err(bad(ln, "bias_free must be 0 or 1".into())),
                    });
                    continue;
                }
                _ => {}
            }
            for w in &rest {
                let (k, v) = w
                    .split_once('=')
                    .ok_or_else(|| bad(ln, format!("expected key=value, got {w:?}")))?;
                let v: usize = v
                    .parse()
                    .map_err(|_| bad(ln, format!("non-integer value for {k}")))?;
                kv.insert(k, v);
            }
            let get = |k: &str| {
                kv.get(k)
                    .copied()
                    .ok_or_else(|| bad(ln, format!("missing key {k}")))
            };
            let (layer, gain) = match head {
                "conv" => (
                    Layer::Conv {
                        cin: get("cin")?,
                        cout: get("cout")?,
                        k: get("k")?,
                        pad: get("pad")?,
                        stride: get("stride")?,
                        dilation: get("dilation")?,
                        has_bias: get("bias")? == 1,
                    },
                    get("gain")? == 1,
                ),
                "transpose_conv" => (
                    Layer::TransposeConv {
                        cin: get("cin")?,
                        cout: get("cout")?,
                        k: get("k")?,
                        pad: get("pad")?,
                        stride: get("stride")?,
                        has_bias: get("bias")? == 1,
                    },
                    get("gain")? == 1,
                ),
                "relu" => (Layer::Relu, false),
                "maxpool2" => (Layer::MaxPool2, false),
                "upsample2" => (Layer::Upsample2, false),
                "concat" => (
                    Layer::Concat {
                        source: get("source")?,
                    },
                    false,
                ),
                "residual_subtract_input" => (Layer::ResidualSubtractInput, false),
                other => return Err(bad(ln, format!("unknown layer kind {other:?}"))),
            };
            layers.push(layer);
            gains.push(gain);
        }
        let spec = ArchitectureSpec {
            name: name.ok_or_else(|| bad(0, "missing name line".into()))?,
            layers,
            bias_free: bias_free.ok_or_else(|| bad(0, "missing bias_free line".into()))?,
            gain_tunable: gains,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Weights and optional bias of one convolution layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T> {
    pub weights: Tensor<T>,
    /// `[1, cout, 1, 1]`.
    pub bias: Option<Tensor<T>>,
}

/// Parameters of every convolution, in layer order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    pub convs: Vec<ConvParams<T>>,
}

/// Per-channel gains, one entry per convolution (`None` when the layer is
/// not gain-tunable).
#[derive(Clone, Debug, PartialEq)]
pub struct GainSet<T> {
    pub layers: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn len(&self) -> usize {
        self.convs
            .iter()
            .map(|c| c.weights.len() + c.bias.as_ref().map_or(0, |b| b.len()))
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All values flattened in storage order (weights then bias, per layer).
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.len());
        for c in &self.convs {
            out.extend_from_slice(c.weights.data());
            if let Some(b) = &c.bias {
                out.extend_from_slice(b.data());
            }
        }
        out
    }

    /// Inverse of [`Self::flatten`].
    pub fn assign(&mut self, values: &[T]) -> Result<()> {
        if values.len() != self.len() {
            return Err(Error::invalid(format!(
                "parameter vector has {} values, expected {}",
                values.len(),
                self.len()
            )));
        }
        let mut at = 0;
        for c in &mut self.convs {
            let n = c.weights.len();
            c.weights.data_mut().copy_from_slice(&values[at..at + n]);
            at += n;
            if let Some(b) = &mut c.bias {
                let n = b.len();
                b.data_mut().copy_from_slice(&values[at..at + n]);
                at += n;
            }
        }
        Ok(())
    }

    /// Folds gains into the parameters: each output channel's weights and
    /// bias are multiplied by its gain.
    pub fn scaled_by(&self, spec: &ArchitectureSpec, gains: &GainSet<T>) -> ParamSet<T> {
        let mut out = self.clone();
        let convs = spec.conv_layers();
        for ((cp, g), &li) in out.convs.iter_mut().zip(&gains.layers).zip(&convs) {
            let Some(g) = g else { continue };
            let [a, b, kh, kw] = cp.weights.shape();
            let transpose = matches!(spec.layers[li], Layer::TransposeConv { .. });
            for i in 0..a {
                for j in 0..b {
                    let gv = if transpose { g.data()[j] } else { g.data()[i] };
                    let base = (i * b + j) * kh * kw;
                    cp.weights.data_mut()[base..base + kh * kw]
                        .iter_mut()
                        .for_each(|w| *w *= gv);
                }
            }
            if let Some(bias) = &mut cp.bias {
                for (bv, &gv) in bias.data_mut().iter_mut().zip(g.data()) {
                    *bv *= gv;
                }
            }
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            convs: self
                .convs
                .iter()
                .map(|c| ConvParams {
                    weights: c.weights.cast(),
                    bias: c.bias.as_ref().map(Tensor::cast),
                })
                .collect(),
        }
    }
}

impl<T: Scalar> GainSet<T> {
    /// All gains exactly 1.
    pub fn ones(spec: &ArchitectureSpec) -> Self {
        GainSet {
            layers: spec
                .conv_layers()
                .into_iter()
                .map(|i| {
                    spec.gain_tunable[i].then(|| {
                        Tensor::channel_vector(vec![
                            T::one();
                            spec.layers[i].out_channels().unwrap()
                        ])
                    })
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.layers.iter().flatten().map(Tensor::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flatten(&self) -> Vec<T> {
        self.layers
            .iter()
            .flatten()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    pub fn assign(&mut self, values: &[T]) -> Result<()> {
        if values.len() != self.len() {
            return Err(Error::invalid(format!(
                "gain vector has {} values, expected {}",
                values.len(),
                self.len()
            )));
        }
        let mut at = 0;
        for t in self.layers.iter_mut().flatten() {
            let n = t.len();
            t.data_mut().copy_from_slice(&values[at..at + n]);
            at += n;
        }
        Ok(())
    }

    pub fn all_ones(&self) -> bool {
        self.layers
            .iter()
            .flatten()
            .all(|t| t.data().iter().all(|&g| g == T::one()))
    }

    pub fn cast<U: Scalar>(&self) -> GainSet<U> {
        GainSet {
            layers: self
                .layers
                .iter()
                .map(|l| l.as_ref().map(Tensor::cast))
                .collect(),
        }
    }
}

/// Initializes parameters: weights `N(0, 2 / fan_in)`, biases 0, gains 1.
pub fn build<T: Scalar>(
    spec: &ArchitectureSpec,
    stream: &mut RngStream,
) -> Result<(ParamSet<T>, GainSet<T>)> {
    spec.validate()?;
    let mut convs = Vec::new();
    for layer in &spec.layers {
        let Some(shape) = layer.weight_shape() else {
            continue;
        };
        let fan_in = match *layer {
            Layer::Conv { cin, k, .. } => cin * k * k,
            Layer::TransposeConv { cin, k, stride, .. } => (cin * k * k / (stride * stride)).max(1),
            _ => unreachable!(),
        };
        let weights = stream.gaussian(shape, (2.0 / fan_in as f64).sqrt());
        let bias = layer
            .has_bias()
            .then(|| Tensor::zeros([1, layer.out_channels().unwrap(), 1, 1]));
        convs.push(ConvParams { weights, bias });
    }
    Ok((ParamSet { convs }, GainSet::ones(spec)))
}

/// Which leaves of a bound network receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    None,
    Gains,
    All,
}

/// Graph leaves holding a network's parameters.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub weights: Vec<NodeId>,
    pub biases: Vec<Option<NodeId>>,
    pub gains: Vec<Option<NodeId>>,
}

impl BoundParams {
    /// Weight and bias leaves in [`ParamSet::flatten`] order.
    pub fn param_nodes(&self) -> Vec<NodeId> {
        let mut v = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            v.push(*w);
            v.extend(b);
        }
        v
    }

    /// Gain leaves in [`GainSet::flatten`] order.
    pub fn gain_nodes(&self) -> Vec<NodeId> {
        self.gains.iter().flatten().copied().collect()
    }
}

/// An architecture with its parameters and gains.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    pub spec: ArchitectureSpec,
    pub params: ParamSet<T>,
    pub gains: GainSet<T>,
}

impl<T: Scalar> Network<T> {
    pub fn new(spec: ArchitectureSpec, params: ParamSet<T>, gains: GainSet<T>) -> Result<Self> {
        spec.validate()?;
        let convs = spec.conv_layers();
        if params.convs.len() != convs.len() || gains.layers.len() != convs.len() {
            return Err(Error::invalid("parameter or gain sets do not match the architecture"));
        }
        for ((cp, g), &li) in params.convs.iter().zip(&gains.layers).zip(&convs) {
            let layer = &spec.layers[li];
            let cout = layer.out_channels().unwrap();
            let ok_w = Some(cp.weights.shape()) == layer.weight_shape();
            let ok_b = match &cp.bias {
                Some(b) => layer.has_bias() && b.shape() == [1, cout, 1, 1],
                None => !layer.has_bias(),
            };
            let ok_g = match g {
                Some(g) => spec.gain_tunable[li] && g.shape() == [1, cout, 1, 1],
                None => !spec.gain_tunable[li],
            };
            if !(ok_w && ok_b && ok_g) {
                return Err(Error::InvalidArchitecture {
                    layer: li,
                    reason: "stored parameter shapes do not match the layer".into(),
                });
            }
        }
        Ok(Network {
            spec,
            params,
            gains,
        })
    }

    /// Freshly initialized network.
    pub fn init(spec: ArchitectureSpec, stream: &mut RngStream) -> Result<Self> {
        let (params, gains) = build(&spec, stream)?;
        Network::new(spec, params, gains)
    }

    /// Inserts parameters as graph leaves.
    pub fn bind(&self, g: &mut Graph<T>, trainable: Trainable) -> BoundParams {
        let all = trainable == Trainable::All;
        let leaf = |g: &mut Graph<T>, t: &Tensor<T>, var: bool| {
            if var {
                g.variable(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for cp in &self.params.convs {
            weights.push(leaf(g, &cp.weights, all));
            biases.push(cp.bias.as_ref().map(|b| leaf(g, b, all)));
        }
        let gains = self
            .gains
            .layers
            .iter()
            .map(|gain| {
                let gain = gain.as_ref()?;
                if trainable == Trainable::Gains {
                    Some(g.variable(gain.clone()))
                } else if gain.data().iter().all(|&v| v == T::one()) {
                    // multiplying by exactly one is the identity
                    None
                } else {
                    Some(g.constant(gain.clone()))
                }
            })
            .collect();
        BoundParams {
            weights,
            biases,
            gains,
        }
    }

    /// Checks the input extents against the architecture.
    pub fn check_input(&self, shape: [usize; 4]) -> Result<()> {
        let [_, c, h, w] = shape;
        if c != 1 {
            return Err(Error::invalid(format!("expected 1 input channel, got {c}")));
        }
        let min = self.spec.min_extent();
        if h.min(w) < min {
            return Err(Error::UndersizedInput {
                got: h.min(w),
                min,
            });
        }
        let m = self.spec.extent_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(Error::invalid(format!(
                "{} needs extents divisible by {m}, got {h}x{w}",
                self.spec.name
            )));
        }
        Ok(())
    }

    /// Records the forward pass on `input` and returns the output node.
    pub fn forward_graph(&self, g: &mut Graph<T>, bound: &BoundParams, input: NodeId) -> Result<NodeId> {
        self.check_input(g.value(input).shape())?;
        let mut outputs: Vec<NodeId> = Vec::with_capacity(self.spec.layers.len());
        let mut cur = input;
        let mut conv_idx = 0;
        for layer in &self.spec.layers {
            cur = match *layer {
                Layer::Conv {
                    pad,
                    stride,
                    dilation,
                    ..
                } => {
                    let geom = ConvGeometry::new(stride, pad, dilation);
                    let y = g.conv2d(cur, bound.weights[conv_idx], bound.biases[conv_idx], geom)?;
                    let y = self.apply_gain(g, bound, conv_idx, y)?;
                    conv_idx += 1;
                    y
                }
                Layer::TransposeConv { pad, stride, .. } => {
                    let geom = ConvGeometry::new(stride, pad, 1);
                    let y = g.transpose_conv2d(cur, bound.weights[conv_idx], bound.biases[conv_idx], geom)?;
                    let y = self.apply_gain(g, bound, conv_idx, y)?;
                    conv_idx += 1;
                    y
                }
                Layer::Relu => g.relu(cur),
                Layer::MaxPool2 => g.maxpool2(cur)?,
                Layer::Upsample2 => g.upsample_nearest2(cur),
                Layer::Concat { source } => g.concat_channels(cur, outputs[source])?,
                Layer::ResidualSubtractInput => g.sub(input, cur)?,
            };
            outputs.push(cur);
        }
        Ok(cur)
    }

    fn apply_gain(&self, g: &mut Graph<T>, bound: &BoundParams, idx: usize, y: NodeId) -> Result<NodeId> {
        match bound.gains[idx] {
            Some(gain) => g.per_channel_scale(y, gain),
            None => Ok(y),
        }
    }

    /// Denoised estimate of `input` (shape `(n, 1, h, w)`).
    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, Trainable::None);
        let x = g.constant(input.clone());
        let y = self.forward_graph(&mut g, &bound, x)?;
        Ok(g.value(y).clone())
    }

    /// The same function with gains folded into the parameters and reset to 1.
    pub fn folded(&self) -> Network<T> {
        Network {
            spec: self.spec.clone(),
            params: self.params.scaled_by(&self.spec, &self.gains),
            gains: GainSet::ones(&self.spec),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            spec: self.spec.clone(),
            params: self.params.cast(),
            gains: self.gains.cast(),
        }
    }
}
