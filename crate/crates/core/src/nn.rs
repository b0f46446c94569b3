//! Sequential networks, the classifier catalog and the [`Model`] interface
//! used by attacks and evaluation.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Gradients, Tape, Var};
use crate::error::{bail, Error, Result};
use crate::optim::AdamState;
use crate::rng;
use crate::serialize::Container;
use crate::tensor::{argmax, Tensor};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// One stage of a sequential network. Shapes are per example (no batch axis).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layer {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    ConvTranspose2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Linear {
        inputs: usize,
        outputs: usize,
    },
    BatchNorm {
        features: usize,
    },
    Relu,
    Sigmoid,
    Flatten,
    Reshape {
        shape: Vec<usize>,
    },
}

impl Layer {
    /// Output shape for a per-example input shape, or a diagnostic.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let conv_out = |n: usize, k: usize, s: usize, p: usize| -> Option<usize> {
            (n + 2 * p >= k && s > 0).then(|| (n + 2 * p - k) / s + 1)
        };
        match self {
            Layer::Conv2d { in_channels, out_channels, kernel, stride, padding } => match input {
                [c, h, w] if c == in_channels => {
                    match (conv_out(*h, *kernel, *stride, *padding), conv_out(*w, *kernel, *stride, *padding)) {
                        (Some(ho), Some(wo)) => Ok(vec![*out_channels, ho, wo]),
                        _ => bail!(Shape, "conv kernel {kernel} does not fit {h}x{w}"),
                    }
                }
                _ => bail!(Shape, "conv expects [{in_channels}, H, W], got {:?}", input),
            },
            Layer::ConvTranspose2d { in_channels, out_channels, kernel, stride, padding } => match input {
                [c, h, w] if c == in_channels && *h > 0 && *w > 0 => {
                    let ho = (h - 1) * stride + kernel;
                    let wo = (w - 1) * stride + kernel;
                    if ho <= 2 * padding || wo <= 2 * padding {
                        bail!(Shape, "transposed conv padding {padding} too large");
                    }
                    Ok(vec![*out_channels, ho - 2 * padding, wo - 2 * padding])
                }
                _ => bail!(Shape, "transposed conv expects [{in_channels}, H, W], got {:?}", input),
            },
            Layer::Linear { inputs, outputs } => match input {
                [n] if n == inputs => Ok(vec![*outputs]),
                _ => bail!(Shape, "linear expects [{inputs}], got {:?}", input),
            },
            Layer::BatchNorm { features } => match input {
                [f] | [f, _, _] if f == features => Ok(input.to_vec()),
                _ => bail!(Shape, "batch norm over {features} features got {:?}", input),
            },
            Layer::Relu | Layer::Sigmoid => Ok(input.to_vec()),
            Layer::Flatten => Ok(vec![input.iter().product()]),
            Layer::Reshape { shape } => {
                if shape.iter().product::<usize>() == input.iter().product::<usize>() {
                    Ok(shape.clone())
                } else {
                    bail!(Shape, "cannot reshape {:?} into {:?}", input, shape)
                }
            }
        }
    }

    /// Names and shapes of trainable parameters.
    fn param_specs(&self) -> Vec<(&'static str, Vec<usize>)> {
        match *self {
            Layer::Conv2d { in_channels, out_channels, kernel, .. } => vec![
                ("weight", vec![out_channels, in_channels, kernel, kernel]),
                ("bias", vec![out_channels]),
            ],
            Layer::ConvTranspose2d { in_channels, out_channels, kernel, .. } => vec![
                ("weight", vec![in_channels, out_channels, kernel, kernel]),
                ("bias", vec![out_channels]),
            ],
            Layer::Linear { inputs, outputs } => {
                vec![("weight", vec![outputs, inputs]), ("bias", vec![outputs])]
            }
            Layer::BatchNorm { features } => {
                vec![("gamma", vec![features]), ("beta", vec![features])]
            }
            _ => Vec::new(),
        }
    }

    /// Glorot fan-in and fan-out of the weight, when the layer has one.
    fn fans(&self) -> Option<(usize, usize)> {
        match *self {
            Layer::Conv2d { in_channels, out_channels, kernel, .. }
            | Layer::ConvTranspose2d { in_channels, out_channels, kernel, .. } => {
                Some((in_channels * kernel * kernel, out_channels * kernel * kernel))
            }
            Layer::Linear { inputs, outputs } => Some((inputs, outputs)),
            _ => None,
        }
    }
}

/// Training or evaluation behaviour of batch normalization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
struct RunningStats {
    mean: Vec<f64>,
    var: Vec<f64>,
}

/// Output of a forward pass.
pub struct Forward {
    pub output: Var,
    /// Statistics of every batch-norm layer, in order (training mode only).
    pub batch_stats: Vec<BatchStats>,
}

/// A sequential network with a named parameter registry.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    params: Vec<Param>,
    running: Vec<RunningStats>,
    mode: Mode,
}

impl Network {
    /// Validate the layer chain and initialize weights (Glorot-uniform,
    /// zero biases, unit batch-norm scale).
    pub fn new(layers: Vec<Layer>, input_shape: &[usize], seed: u64) -> Result<Self> {
        if input_shape.is_empty() || input_shape.iter().any(|&d| d == 0) {
            bail!(Shape, "input shape must be non-empty with positive extents, got {:?}", input_shape);
        }
        let mut shape = input_shape.to_vec();
        for (i, layer) in layers.iter().enumerate() {
            shape = layer
                .output_shape(&shape)
                .map_err(|e| Error::Shape(format!("layer {i} ({layer:?}): {e}")))?;
        }
        let mut rng = rng::stream(seed, "glorot", 0);
        let mut params = Vec::new();
        let mut running = Vec::new();
        for (i, layer) in layers.iter().enumerate() {
            for (name, pshape) in layer.param_specs() {
                let n: usize = pshape.iter().product();
                let data = match name {
                    "weight" => {
                        let (fan_in, fan_out) = layer.fans().expect("weighted layer");
                        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                        (0..n).map(|_| rng.random_range(-limit..limit)).collect()
                    }
                    "gamma" => vec![1.0; n],
                    _ => vec![0.0; n],
                };
                params.push(Param {
                    name: format!("{i}.{name}"),
                    value: Tensor::from_parts(pshape, data),
                });
            }
            if let Layer::BatchNorm { features } = layer {
                running.push(RunningStats {
                    mean: vec![0.0; *features],
                    var: vec![1.0; *features],
                });
            }
        }
        Ok(Self {
            layers,
            input_shape: input_shape.to_vec(),
            output_shape: shape,
            params,
            running,
            mode: Mode::Train,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// Place every parameter on the tape, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), trainable))
            .collect()
    }

    /// Run the network on `input: [B, input_shape..]` using the current mode.
    pub fn forward(&self, tape: &mut Tape, params: &[Var], input: Var) -> Result<Forward> {
        self.forward_in(tape, params, input, self.mode)
    }

    pub fn forward_in(&self, tape: &mut Tape, params: &[Var], input: Var, mode: Mode) -> Result<Forward> {
        let shape = tape.shape(input);
        if shape.len() != self.input_shape.len() + 1 || shape[1..] != self.input_shape[..] {
            bail!(
                Shape,
                "network expects batches of {:?}, got {:?}",
                self.input_shape,
                shape
            );
        }
        if params.len() != self.params.len() {
            bail!(InvalidArgument, "expected {} bound parameters, got {}", self.params.len(), params.len());
        }
        let batch = shape[0];
        let mut x = input;
        let mut p = 0;
        let mut bn = 0;
        let mut batch_stats = Vec::new();
        for layer in &self.layers {
            x = match layer {
                Layer::Conv2d { stride, padding, .. } => {
                    let y = tape.conv2d(x, params[p], Some(params[p + 1]), *stride, *padding)?;
                    p += 2;
                    y
                }
                Layer::ConvTranspose2d { stride, padding, .. } => {
                    let y = tape.conv_transpose2d(x, params[p], Some(params[p + 1]), *stride, *padding)?;
                    p += 2;
                    y
                }
                Layer::Linear { .. } => {
                    let y = tape.linear(x, params[p], Some(params[p + 1]))?;
                    p += 2;
                    y
                }
                Layer::BatchNorm { .. } => {
                    let (g, b) = (params[p], params[p + 1]);
                    p += 2;
                    let y = match mode {
                        Mode::Train => {
                            let (y, stats) = tape.batch_norm_train(x, g, b, BN_EPS)?;
                            batch_stats.push(stats);
                            y
                        }
                        Mode::Eval => {
                            let r = &self.running[bn];
                            tape.batch_norm_eval(x, g, b, &r.mean, &r.var, BN_EPS)?
                        }
                    };
                    bn += 1;
                    y
                }
                Layer::Relu => tape.relu(x),
                Layer::Sigmoid => tape.sigmoid(x),
                Layer::Flatten => {
                    let n = tape.value(x).row_len();
                    tape.reshape(x, &[batch, n])?
                }
                Layer::Reshape { shape } => {
                    let mut s = vec![batch];
                    s.extend_from_slice(shape);
                    tape.reshape(x, &s)?
                }
            };
        }
        Ok(Forward { output: x, batch_stats })
    }

    /// Fold training-batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, stats: &[BatchStats]) {
        for (r, s) in self.running.iter_mut().zip(stats) {
            for c in 0..r.mean.len() {
                r.mean[c] = (1.0 - BN_MOMENTUM) * r.mean[c] + BN_MOMENTUM * s.mean[c];
                r.var[c] = (1.0 - BN_MOMENTUM) * r.var[c] + BN_MOMENTUM * s.var[c];
            }
        }
    }

    /// Evaluation-mode forward pass without gradients.
    pub fn infer(&self, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let x = tape.constant(input.clone());
        let out = self.forward_in(&mut tape, &params, x, Mode::Eval)?.output;
        Ok(tape.value(out).clone())
    }

    /// Parameters followed by running statistics, as named blocks.
    pub fn blocks(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> =
            self.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        let mut bn = 0;
        for (i, layer) in self.layers.iter().enumerate() {
            if matches!(layer, Layer::BatchNorm { .. }) {
                let r = &self.running[bn];
                out.push((format!("{i}.running_mean"), Tensor::from_vec(r.mean.clone())));
                out.push((format!("{i}.running_var"), Tensor::from_vec(r.var.clone())));
                bn += 1;
            }
        }
        out
    }

    /// Overwrite parameters and running statistics from named blocks.
    pub fn load_blocks(&mut self, blocks: &[(String, Tensor)]) -> Result<()> {
        let find = |name: &str| -> Result<&Tensor> {
            blocks
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Format(format!("missing block {name}")))
        };
        for p in &mut self.params {
            let t = find(&p.name)?;
            if t.shape() != p.value.shape() {
                bail!(Format, "block {} has shape {:?}, expected {:?}", p.name, t.shape(), p.value.shape());
            }
            p.value = t.clone();
        }
        let mut bn = 0;
        for (i, layer) in self.layers.iter().enumerate() {
            if matches!(layer, Layer::BatchNorm { .. }) {
                let mean = find(&format!("{i}.running_mean"))?;
                let var = find(&format!("{i}.running_var"))?;
                let r = &mut self.running[bn];
                if mean.len() != r.mean.len() || var.len() != r.var.len() {
                    bail!(Format, "running statistics of layer {i} have the wrong length");
                }
                r.mean = mean.data().to_vec();
                r.var = var.data().to_vec();
                bn += 1;
            }
        }
        Ok(())
    }
}

/// Something that maps image batches to class logits in evaluation mode.
///
/// Attacks only need this interface; test adapters implement it directly.
pub trait Model: Sync {
    fn num_classes(&self) -> usize;

    /// Per-example input shape.
    fn input_shape(&self) -> &[usize];

    /// Deterministic logits `[B, K]` recorded on `tape`.
    fn logits(&self, tape: &mut Tape, input: Var) -> Result<Var>;

    fn logits_of(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let l = self.logits(&mut tape, x)?;
        Ok(tape.value(l).clone())
    }

    /// Predicted labels, lowest index winning ties.
    fn predict(&self, images: &Tensor) -> Result<Vec<usize>> {
        const CHUNK: usize = 500;
        let mut out = Vec::with_capacity(images.rows());
        let idx: Vec<usize> = (0..images.rows()).collect();
        for chunk in idx.chunks(CHUNK) {
            let logits = self.logits_of(&images.select_rows(chunk))?;
            out.extend((0..logits.rows()).map(|r| argmax(logits.row(r))));
        }
        Ok(out)
    }
}

/// One optimizer step on `net` from gradients of the variables `vars` bound to it.
pub(crate) fn step_network(net: &mut Network, adam: &mut AdamState, grads: &Gradients, vars: &[Var]) -> Result<()> {
    let gs: Vec<Tensor> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();
    let mut ps: Vec<&mut [f64]> = net.params_mut().iter_mut().map(|p| p.value.data_mut()).collect();
    let gr: Vec<&[f64]> = gs.iter().map(Tensor::data).collect();
    adam.step(&mut ps, &gr)
}

/// Which classifier family to build.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchitectureKind {
    /// Three 4x4 stride-2 convolutions (16, 32, 64 channels) with ReLU and
    /// batch norm, then two fully connected layers.
    ConvSmall,
    /// Four hidden layers of 128 units with ReLU and batch norm.
    Mlp,
    Custom(Vec<Layer>),
}

impl std::str::FromStr for ArchitectureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv_small" => Ok(Self::ConvSmall),
            "mlp" => Ok(Self::Mlp),
            other => bail!(InvalidArgument, "unknown architecture kind {other:?} (expected conv_small or mlp)"),
        }
    }
}

/// Width of the hidden fully connected layer in `conv_small`.
pub const CONV_SMALL_HIDDEN: usize = 128;
pub const MLP_HIDDEN: usize = 128;
pub const MLP_DEPTH: usize = 4;

fn conv_small_layers(input_shape: &[usize], num_classes: usize) -> Result<Vec<Layer>> {
    let [c, _, _] = input_shape else {
        bail!(Shape, "conv_small expects [C, H, W] inputs, got {:?}", input_shape);
    };
    let mut layers = Vec::new();
    let mut channels = *c;
    for out in [16, 32, 64] {
        layers.push(Layer::Conv2d {
            in_channels: channels,
            out_channels: out,
            kernel: 4,
            stride: 2,
            padding: 1,
        });
        layers.push(Layer::Relu);
        layers.push(Layer::BatchNorm { features: out });
        channels = out;
    }
    layers.push(Layer::Flatten);
    let mut shape = input_shape.to_vec();
    for l in &layers {
        shape = l.output_shape(&shape)?;
    }
    layers.push(Layer::Linear { inputs: shape[0], outputs: CONV_SMALL_HIDDEN });
    layers.push(Layer::Relu);
    layers.push(Layer::Linear { inputs: CONV_SMALL_HIDDEN, outputs: num_classes });
    Ok(layers)
}

fn mlp_layers(input_shape: &[usize], num_classes: usize) -> Vec<Layer> {
    let mut layers = vec![Layer::Flatten];
    let mut width = input_shape.iter().product();
    for _ in 0..MLP_DEPTH {
        layers.push(Layer::Linear { inputs: width, outputs: MLP_HIDDEN });
        layers.push(Layer::Relu);
        layers.push(Layer::BatchNorm { features: MLP_HIDDEN });
        width = MLP_HIDDEN;
    }
    layers.push(Layer::Linear { inputs: width, outputs: num_classes });
    layers
}

#[derive(Serialize, Deserialize)]
struct ClassifierMeta {
    kind: String,
    architecture: ArchitectureKind,
    input_shape: Vec<usize>,
    num_classes: usize,
    layers: Vec<Layer>,
}

/// An image classifier: a [`Network`] producing `num_classes` logits.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub network: Network,
    architecture: ArchitectureKind,
    num_classes: usize,
}

impl Classifier {
    pub fn build(kind: ArchitectureKind, input_shape: &[usize], num_classes: usize, seed: u64) -> Result<Self> {
        if num_classes < 2 {
            bail!(InvalidArgument, "need at least two classes, got {num_classes}");
        }
        let layers = match &kind {
            ArchitectureKind::ConvSmall => conv_small_layers(input_shape, num_classes)?,
            ArchitectureKind::Mlp => mlp_layers(input_shape, num_classes),
            ArchitectureKind::Custom(layers) => layers.clone(),
        };
        let network = Network::new(layers, input_shape, seed)?;
        if network.output_shape() != [num_classes] {
            bail!(Shape, "architecture produces {:?}, expected [{num_classes}]", network.output_shape());
        }
        Ok(Self { network, architecture: kind, num_classes })
    }

    pub fn architecture(&self) -> &ArchitectureKind {
        &self.architecture
    }

    /// Logits for `batch` in the network's current mode.
    pub fn forward(&self, tape: &mut Tape, params: &[Var], batch: Var) -> Result<Forward> {
        self.network.forward(tape, params, batch)
    }

    pub fn to_container(&self) -> Container {
        let meta = ClassifierMeta {
            kind: "classifier".into(),
            architecture: self.architecture.clone(),
            input_shape: self.network.input_shape().to_vec(),
            num_classes: self.num_classes,
            layers: self.network.layers().to_vec(),
        };
        Container {
            metadata: serde_json::to_string(&meta).expect("metadata serializes"),
            blocks: self.network.blocks(),
        }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta: ClassifierMeta = serde_json::from_str(&c.metadata)?;
        if meta.kind != "classifier" {
            bail!(Format, "container holds a {:?}, not a classifier", meta.kind);
        }
        let network = Network::new(meta.layers, &meta.input_shape, 0)?;
        let mut out = Self {
            network,
            architecture: meta.architecture,
            num_classes: meta.num_classes,
        };
        out.network.load_blocks(&c.blocks)?;
        out.network.set_mode(Mode::Eval);
        Ok(out)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

impl Model for Classifier {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn input_shape(&self) -> &[usize] {
        self.network.input_shape()
    }

    fn logits(&self, tape: &mut Tape, input: Var) -> Result<Var> {
        let params = self.network.bind(tape, false);
        Ok(self.network.forward_in(tape, &params, input, Mode::Eval)?.output)
    }
}
