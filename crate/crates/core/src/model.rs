//! Segmentation network: a width-configurable Xception-style encoder at output
//! stride 16, an atrous spatial pyramid pooling head and a bilinear ×16
//! decoder to per-pixel class logits.
//!
//! # Architecture
//!
//! With `S = stem_channels`, block widths `B₁ B₂ B₃` (a shorter
//! `block_channels` list repeats its last entry), `C = B₃`,
//! `A = aspp_channels`, `K = num_classes`, and every batch norm contributing
//! `2·channels` trainable parameters (gamma, beta):
//!
//! | stage | layers | trainable parameters |
//! |---|---|---|
//! | stem | 3×3 conv stride 2, BN, ReLU | `27·S + 2·S` |
//! | block i (`cin → cout`, stride 2) | sep(cin→cout)+BN+ReLU, sep(cout→cout, stride 2)+BN, skip 1×1 stride 2 + BN, add, ReLU | `(9·cin + cin·cout + 2·cout) + (9·cout + cout² + 2·cout) + (cin·cout + 2·cout)` |
//! | middle block ×`middle_blocks` | two sep(C→C)+BN, identity residual, ReLU | `2·(9·C + C² + 2·C)` each |
//! | ASPP 1×1 branch | 1×1 conv + BN + ReLU | `C·A + 2·A` |
//! | ASPP atrous branches ×3 | 3×3 conv, dilation = padding = rate, BN, ReLU | `9·C·A + 2·A` each |
//! | ASPP image pooling | global average, 1×1 conv + BN + ReLU, resize | `C·A + 2·A` |
//! | ASPP fuse | concat 5·A, 1×1 conv + BN + ReLU | `5·A² + 2·A` |
//! | classifier | 1×1 conv with bias, bilinear resize ×16 | `A·K + K` |
//!
//! "sep" is a 3×3 depthwise convolution followed by a 1×1 pointwise
//! convolution, neither with bias. Batch-norm running statistics are stored
//! alongside the parameters but are not trainable.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::{BinaryMask, ProbMap};
use crate::rng;
use crate::tensor::{BatchNormConfig, ConvParams, Shape, Tape, Tensor, TensorError, Var};

pub const OUTPUT_STRIDE: usize = 16;
const DOWNSAMPLING_BLOCKS: usize = 3;
const MAX_CHANNELS: usize = 4096;
const MAX_MIDDLE_BLOCKS: usize = 64;
const MAX_RATE: usize = 1024;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("input {dim} {value} is not divisible by {OUTPUT_STRIDE}")]
    Dimension { dim: &'static str, value: usize },
    #[error("expected input with 3 channels, got shape {0}")]
    Channels(Shape),
    #[error("prediction requires eval mode")]
    NotEvalMode,
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub output_stride: usize,
    pub aspp_rates: [usize; 3],
    pub stem_channels: usize,
    pub block_channels: Vec<usize>,
    pub middle_blocks: usize,
    pub aspp_channels: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_classes: 2,
            output_stride: OUTPUT_STRIDE,
            aspp_rates: [6, 12, 18],
            stem_channels: 16,
            block_channels: vec![32, 64, 128],
            middle_blocks: 2,
            aspp_channels: 64,
            seed: 42,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.output_stride != OUTPUT_STRIDE {
            return bad(format!("output_stride must be {OUTPUT_STRIDE}, got {}", self.output_stride));
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        let r = self.aspp_rates;
        if r[0] == 0 || !(r[0] < r[1] && r[1] < r[2]) {
            return bad(format!("aspp_rates must be positive and strictly increasing, got {r:?}"));
        }
        if self.block_channels.is_empty() || self.block_channels.len() > DOWNSAMPLING_BLOCKS {
            return bad(format!(
                "block_channels must list 1 to {DOWNSAMPLING_BLOCKS} widths, got {:?}",
                self.block_channels
            ));
        }
        let widths = [self.stem_channels, self.aspp_channels].into_iter().chain(self.block_channels.iter().copied());
        if widths.clone().any(|c| c == 0) {
            return bad("channel counts must be >= 1".into());
        }
        if widths.clone().any(|c| c > MAX_CHANNELS) || self.num_classes > MAX_CHANNELS {
            return bad(format!("channel counts must be <= {MAX_CHANNELS}"));
        }
        if self.middle_blocks > MAX_MIDDLE_BLOCKS {
            return bad(format!("middle_blocks must be <= {MAX_MIDDLE_BLOCKS}, got {}", self.middle_blocks));
        }
        if r[2] > MAX_RATE {
            return bad(format!("aspp_rates must be <= {MAX_RATE}, got {r:?}"));
        }
        Ok(())
    }

    /// Parses and validates a JSON config; omitted fields take defaults.
    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text).map_err(|e| ModelError::InvalidConfig(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Widths of the three stride-2 blocks.
    pub fn encoder_widths(&self) -> [usize; DOWNSAMPLING_BLOCKS] {
        let last = *self.block_channels.last().unwrap_or(&1);
        std::array::from_fn(|i| *self.block_channels.get(i).unwrap_or(&last))
    }

    /// Channels of the encoder output.
    pub fn encoder_channels(&self) -> usize {
        self.encoder_widths()[DOWNSAMPLING_BLOCKS - 1]
    }

    /// Trainable parameter count from the architecture table.
    pub fn parameter_count(&self) -> usize {
        let s = self.stem_channels;
        let mut total = 27 * s + 2 * s;
        let mut cin = s;
        for cout in self.encoder_widths() {
            total += (9 * cin + cin * cout + 2 * cout) + (9 * cout + cout * cout + 2 * cout) + (cin * cout + 2 * cout);
            cin = cout;
        }
        let c = cin;
        total += self.middle_blocks * 2 * (9 * c + c * c + 2 * c);
        let a = self.aspp_channels;
        total += (c * a + 2 * a) + 3 * (9 * c * a + 2 * a) + (c * a + 2 * a) + (5 * a * a + 2 * a);
        total + a * self.num_classes + self.num_classes
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Training,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor<f32>,
    pub trainable: bool,
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    weight: usize,
    bias: Option<usize>,
    params: ConvParams,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

#[derive(Clone, Copy, Debug)]
struct ConvBn {
    conv: Conv,
    bn: Norm,
}

#[derive(Clone, Copy, Debug)]
struct SepConvBn {
    depthwise: Conv,
    pointwise: Conv,
    bn: Norm,
}

#[derive(Clone, Copy, Debug)]
struct Block {
    sep1: SepConvBn,
    sep2: SepConvBn,
    skip: Option<ConvBn>,
}

#[derive(Clone, Debug)]
struct Layers {
    stem: ConvBn,
    blocks: Vec<Block>,
    middle: Vec<Block>,
    aspp_1x1: ConvBn,
    aspp_atrous: Vec<ConvBn>,
    aspp_pool: ConvBn,
    aspp_fuse: ConvBn,
    classifier: Conv,
}

/// Parameters, layer wiring and normalization mode of the network.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: Vec<Param>,
    layers: Layers,
    mode: Mode,
}

struct Builder {
    params: Vec<Param>,
    rng: rng::Rng,
}

impl Builder {
    fn push(&mut self, name: String, tensor: Tensor<f32>, trainable: bool) -> usize {
        self.params.push(Param {
            name,
            tensor,
            trainable,
        });
        self.params.len() - 1
    }

    /// He-uniform weight, bound `√(6 / fan_in)`.
    fn conv(&mut self, name: String, cout: usize, cin_per_group: usize, k: usize, params: ConvParams, bias: bool) -> Conv {
        use rand::Rng as _;
        let fan_in = (cin_per_group * k * k) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let shape = Shape::new(cout, cin_per_group, k, k);
        let data = (0..shape.numel())
            .map(|_| ((self.rng.random::<f64>() * 2.0 - 1.0) * bound) as f32)
            .collect();
        let weight = self.push(format!("{name}.weight"), Tensor::from_vec(shape, data).expect("shape"), true);
        let bias = bias.then(|| self.push(format!("{name}.bias"), Tensor::zeros([1, cout, 1, 1]), true));
        Conv { weight, bias, params }
    }

    fn norm(&mut self, name: &str, c: usize) -> Norm {
        Norm {
            gamma: self.push(format!("{name}.gamma"), Tensor::full([1, c, 1, 1], 1.0), true),
            beta: self.push(format!("{name}.beta"), Tensor::zeros([1, c, 1, 1]), true),
            mean: self.push(format!("{name}.running_mean"), Tensor::zeros([1, c, 1, 1]), false),
            var: self.push(format!("{name}.running_var"), Tensor::full([1, c, 1, 1], 1.0), false),
        }
    }

    fn conv_bn(&mut self, name: &str, conv_name: String, cin: usize, cout: usize, k: usize, params: ConvParams) -> ConvBn {
        let conv = self.conv(conv_name, cout, cin / params.groups, k, params, false);
        let bn = self.norm(&format!("{name}.bn"), cout);
        ConvBn { conv, bn }
    }

    fn sep(&mut self, name: &str, cin: usize, cout: usize, stride: usize) -> SepConvBn {
        let depthwise = self.conv(format!("{name}.depthwise"), cin, 1, 3, ConvParams::new(stride, 1, 1, cin), false);
        let pointwise = self.conv(format!("{name}.pointwise"), cout, cin, 1, ConvParams::default(), false);
        let bn = self.norm(&format!("{name}.bn"), cout);
        SepConvBn {
            depthwise,
            pointwise,
            bn,
        }
    }

    fn block(&mut self, name: &str, cin: usize, cout: usize, stride: usize) -> Block {
        let sep1 = self.sep(&format!("{name}.sep1"), cin, cout, 1);
        let sep2 = self.sep(&format!("{name}.sep2"), cout, cout, stride);
        let skip = (stride != 1 || cin != cout).then(|| {
            let n = format!("{name}.skip");
            self.conv_bn(&n, format!("{n}.conv"), cin, cout, 1, ConvParams::default().stride(stride))
        });
        Block { sep1, sep2, skip }
    }
}

/// Outputs of one forward pass recorded on a tape.
pub struct Forward {
    pub features: Var,
    pub aspp: Var,
    pub logits: Var,
    /// Tape leaf of every parameter, indexed like [`Model::params`].
    pub params: Vec<Var>,
}

struct StatUpdate {
    mean: usize,
    var: usize,
    new_mean: Vec<f32>,
    new_var: Vec<f32>,
}

struct Pass<'a> {
    model: &'a Model,
    tape: &'a mut Tape<f32>,
    vars: Vec<Var>,
    training: bool,
    updates: Vec<StatUpdate>,
}

impl Pass<'_> {
    fn conv(&mut self, x: Var, c: &Conv) -> Result<Var> {
        Ok(self
            .tape
            .conv2d(x, self.vars[c.weight], c.bias.map(|b| self.vars[b]), c.params)?)
    }

    fn bn(&mut self, x: Var, n: &Norm) -> Result<Var> {
        let params = &self.model.params;
        let mut mean = params[n.mean].tensor.data().to_vec();
        let mut var = params[n.var].tensor.data().to_vec();
        let cfg = BatchNormConfig {
            training: self.training,
            ..BatchNormConfig::default()
        };
        let y = self
            .tape
            .batch_norm(x, self.vars[n.gamma], self.vars[n.beta], &mut mean, &mut var, cfg)?;
        if self.training {
            self.updates.push(StatUpdate {
                mean: n.mean,
                var: n.var,
                new_mean: mean,
                new_var: var,
            });
        }
        Ok(y)
    }

    fn conv_bn(&mut self, x: Var, l: &ConvBn, relu: bool) -> Result<Var> {
        let y = self.conv(x, &l.conv)?;
        let y = self.bn(y, &l.bn)?;
        Ok(if relu { self.tape.relu(y) } else { y })
    }

    fn sep(&mut self, x: Var, l: &SepConvBn, relu: bool) -> Result<Var> {
        let y = self.conv(x, &l.depthwise)?;
        let y = self.conv(y, &l.pointwise)?;
        let y = self.bn(y, &l.bn)?;
        Ok(if relu { self.tape.relu(y) } else { y })
    }

    fn block(&mut self, x: Var, b: &Block) -> Result<Var> {
        let y = self.sep(x, &b.sep1, true)?;
        let y = self.sep(y, &b.sep2, false)?;
        let shortcut = match &b.skip {
            Some(skip) => self.conv_bn(x, skip, false)?,
            None => x,
        };
        let y = self.tape.add(y, shortcut)?;
        Ok(self.tape.relu(y))
    }

    fn encoder(&mut self, input: Var) -> Result<Var> {
        let model = self.model;
        let layers = &model.layers;
        let mut x = self.conv_bn(input, &layers.stem, true)?;
        for b in &layers.blocks {
            x = self.block(x, b)?;
        }
        for b in &layers.middle {
            x = self.block(x, b)?;
        }
        Ok(x)
    }

    fn aspp(&mut self, features: Var) -> Result<Var> {
        let model = self.model;
        let layers = &model.layers;
        let s = self.tape.value(features).shape();
        let mut branches = vec![self.conv_bn(features, &layers.aspp_1x1, true)?];
        for l in &layers.aspp_atrous {
            branches.push(self.conv_bn(features, l, true)?);
        }
        let pooled = self.tape.global_avg_pool(features);
        let pooled = self.conv_bn(pooled, &layers.aspp_pool, true)?;
        branches.push(self.tape.bilinear_resize(pooled, s.h, s.w)?);
        let cat = self.tape.concat_channels(&branches)?;
        self.conv_bn(cat, &layers.aspp_fuse, true)
    }
}

impl Model {
    /// Builds the network with deterministic He-uniform initialization from
    /// `config.seed`. Batch-norm gamma starts at 1, beta and biases at 0.
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            params: Vec::new(),
            rng: rng::seeded(config.seed),
        };
        let s = config.stem_channels;
        let stem = b.conv_bn("stem", "stem.conv".into(), 3, s, 3, ConvParams::new(2, 1, 1, 1));
        let mut cin = s;
        let mut blocks = Vec::new();
        for (i, cout) in config.encoder_widths().into_iter().enumerate() {
            blocks.push(b.block(&format!("block{}", i + 1), cin, cout, 2));
            cin = cout;
        }
        let middle = (0..config.middle_blocks)
            .map(|i| b.block(&format!("middle{}", i + 1), cin, cin, 1))
            .collect();
        let a = config.aspp_channels;
        let aspp_1x1 = b.conv_bn("aspp.branch_1x1", "aspp.branch_1x1".into(), cin, a, 1, ConvParams::default());
        let aspp_atrous = config
            .aspp_rates
            .iter()
            .map(|&r| {
                let name = format!("aspp.branch_r{r}");
                b.conv_bn(&name, name.clone(), cin, a, 3, ConvParams::new(1, r, r, 1))
            })
            .collect();
        let aspp_pool = b.conv_bn("aspp.pool", "aspp.pool".into(), cin, a, 1, ConvParams::default());
        let aspp_fuse = b.conv_bn("aspp.fuse", "aspp.fuse".into(), 5 * a, a, 1, ConvParams::default());
        let classifier = b.conv("classifier".into(), config.num_classes, a, 1, ConvParams::default(), true);
        Ok(Self {
            config,
            params: b.params,
            layers: Layers {
                stem,
                blocks,
                middle,
                aspp_1x1,
                aspp_atrous,
                aspp_pool,
                aspp_fuse,
                classifier,
            },
            mode: Mode::Training,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Replaces a parameter's values; the shape must match.
    pub fn set_param(&mut self, name: &str, tensor: Tensor<f32>) -> Result<()> {
        let p = self
            .params
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| ModelError::UnknownParam(name.to_string()))?;
        if p.tensor.shape() != tensor.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "set_param",
                detail: format!("{name}: {} vs {}", p.tensor.shape(), tensor.shape()),
            }
            .into());
        }
        p.tensor = tensor;
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.tensor.numel()).sum()
    }

    pub fn check_input(&self, shape: Shape) -> Result<()> {
        if shape.c != 3 || shape.n == 0 {
            return Err(ModelError::Channels(shape));
        }
        if shape.h == 0 || !shape.h.is_multiple_of(OUTPUT_STRIDE) {
            return Err(ModelError::Dimension {
                dim: "height",
                value: shape.h,
            });
        }
        if shape.w == 0 || !shape.w.is_multiple_of(OUTPUT_STRIDE) {
            return Err(ModelError::Dimension {
                dim: "width",
                value: shape.w,
            });
        }
        Ok(())
    }

    fn pass<'a>(&'a self, tape: &'a mut Tape<f32>, trainable: bool) -> Pass<'a> {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf(p.tensor.clone(), trainable && p.trainable))
            .collect();
        Pass {
            model: self,
            tape,
            vars,
            training: self.mode == Mode::Training,
            updates: Vec::new(),
        }
    }

    fn run(&self, tape: &mut Tape<f32>, input: Var, trainable: bool) -> Result<(Forward, Vec<StatUpdate>)> {
        self.check_input(tape.value(input).shape())?;
        let s = tape.value(input).shape();
        let mut pass = self.pass(tape, trainable);
        let features = pass.encoder(input)?;
        let aspp = pass.aspp(features)?;
        let classifier = pass.model.layers.classifier;
        let coarse = pass.conv(aspp, &classifier)?;
        let logits = pass.tape.bilinear_resize(coarse, s.h, s.w)?;
        Ok((
            Forward {
                features,
                aspp,
                logits,
                params: pass.vars,
            },
            pass.updates,
        ))
    }

    /// Records a full forward pass on `tape` with every trainable parameter as
    /// a gradient-receiving leaf. In training mode batch norm uses batch
    /// statistics and the running statistics are updated.
    pub fn forward_on(&mut self, tape: &mut Tape<f32>, input: Var) -> Result<Forward> {
        let (fwd, updates) = self.run(tape, input, true)?;
        for u in updates {
            self.params[u.mean].tensor.data_mut().copy_from_slice(&u.new_mean);
            self.params[u.var].tensor.data_mut().copy_from_slice(&u.new_var);
        }
        Ok(fwd)
    }

    /// Forward pass without gradients or running-statistic updates, in the
    /// current mode.
    pub fn forward(&self, input: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let (fwd, _) = self.run(&mut tape, x, false)?;
        Ok(tape.value(fwd.logits).clone())
    }

    /// Encoder features at 1/16 resolution.
    pub fn encoder_forward(&self, input: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.check_input(input.shape())?;
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let mut pass = self.pass(&mut tape, false);
        let f = pass.encoder(x)?;
        Ok(tape.value(f).clone())
    }

    /// ASPP head applied to an encoder feature map.
    pub fn aspp_forward(&self, features: &Tensor<f32>) -> Result<Tensor<f32>> {
        let c = self.config.encoder_channels();
        if features.shape().c != c {
            return Err(TensorError::ShapeMismatch {
                op: "aspp",
                detail: format!("expected {c} feature channels, got {}", features.shape()),
            }
            .into());
        }
        let mut tape = Tape::new();
        let f = tape.constant(features.clone());
        let mut pass = self.pass(&mut tape, false);
        let y = pass.aspp(f)?;
        Ok(tape.value(y).clone())
    }

    /// Tumor probability (softmax channel 1) and argmax mask per image. Ties
    /// go to background.
    pub fn predict_mask(&self, input: &Tensor<f32>) -> Result<Vec<(ProbMap, BinaryMask)>> {
        if self.mode != Mode::Eval {
            return Err(ModelError::NotEvalMode);
        }
        let logits = self.forward(input)?;
        Ok(masks_from_logits(&logits))
    }
}

/// Splits `(N, C, H, W)` logits into per-image tumor probability and argmax
/// mask; argmax ties resolve to class 0.
pub fn masks_from_logits(logits: &Tensor<f32>) -> Vec<(ProbMap, BinaryMask)> {
    let s = logits.shape();
    let probs = crate::tensor::softmax_channels(logits);
    (0..s.n)
        .map(|n| {
            let prob = ProbMap {
                width: s.w,
                height: s.h,
                data: probs.plane(n, 1).to_vec(),
            };
            let mask = BinaryMask::from_fn(s.w, s.h, |x, y| {
                let i = y * s.w + x;
                let best = (1..s.c).fold(0, |b, c| {
                    if logits.plane(n, c)[i] > logits.plane(n, b)[i] {
                        c
                    } else {
                        b
                    }
                });
                best == 1
            });
            (prob, mask)
        })
        .collect()
}
