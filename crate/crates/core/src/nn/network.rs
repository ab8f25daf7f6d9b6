use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::ops::{
    col2im, conv3x3_padded, conv3x3_padded_input_grad, conv3x3_padded_weight_grad, global_avg_pool,
    global_avg_pool_backward, im2col, maxpool2, maxpool2_backward, pad1, unpad1,
};
use super::scalar::{gemm, Scalar};
use crate::error::{Error, Result};
use crate::rng::stream;

/// Gradients at the requested layers, then at the input when asked.
type BackOutput<T> = (Vec<(usize, Vec<T>)>, Option<Vec<T>>);

pub const BN_EPS: f64 = 1e-5;
pub const INPUT_CHANNELS: usize = 3;
/// Blocks with at least this many input channels convolve by shifted
/// products on a padded grid; narrower ones use im2col.
const SHIFTED_MIN_CHANNELS: usize = 4;

/// Index of a block output, displayed as `layers.<i>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct LayerId(pub usize);

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layers.{}", self.0)
    }
}

impl FromStr for LayerId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let digits = s.trim().strip_prefix("layers.").unwrap_or(s.trim());
        digits
            .parse()
            .map(LayerId)
            .map_err(|_| Error::InvalidLayer(s.to_string()))
    }
}

impl From<LayerId> for String {
    fn from(l: LayerId) -> String {
        l.to_string()
    }
}

impl TryFrom<String> for LayerId {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
    Sigmoid,
}

impl Activation {
    fn apply<T: Scalar>(self, v: T) -> T {
        match self {
            Activation::Relu => v.max(T::zero()),
            Activation::Identity => v,
            Activation::Sigmoid => T::one() / (T::one() + (-v).exp()),
        }
    }

    /// Derivative expressed through the activation output `y`.
    fn derivative<T: Scalar>(self, y: T) -> T {
        match self {
            Activation::Relu => {
                if y > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Identity => T::one(),
            Activation::Sigmoid => y * (T::one() - y),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Simple,
    Standard,
    Spatial,
}

impl Preset {
    pub fn channels(self) -> Vec<usize> {
        match self {
            Preset::Simple => vec![64; 6],
            Preset::Standard => vec![64, 64, 64, 128, 128, 128],
            Preset::Spatial => vec![64, 64, 128, 256, 256, 256],
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simple" => Ok(Preset::Simple),
            "standard" => Ok(Preset::Standard),
            "spatial" => Ok(Preset::Spatial),
            _ => Err(Error::Config(format!("unknown model preset `{s}`"))),
        }
    }
}

fn default_pools() -> Vec<usize> {
    vec![0, 1, 2]
}

fn yes() -> bool {
    true
}

/// Architecture of a block network: `conv3x3 -> batchnorm -> activation`
/// per block, max-pool inside selected blocks, global average pool, then
/// an optional hidden ReLU layer and a linear head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub channels_per_layer: Vec<usize>,
    pub num_classes: usize,
    pub input_side: usize,
    #[serde(default = "default_pools")]
    pub pool_after: Vec<usize>,
    /// Per-block activation; empty means ReLU everywhere.
    #[serde(default)]
    pub activations: Vec<Activation>,
    #[serde(default = "yes")]
    pub batch_norm: bool,
    #[serde(default)]
    pub hidden_units: Option<usize>,
}

impl ModelConfig {
    pub fn preset(preset: Preset, num_classes: usize, input_side: usize) -> Self {
        ModelConfig {
            channels_per_layer: preset.channels(),
            num_classes,
            input_side,
            pool_after: default_pools(),
            activations: Vec::new(),
            batch_norm: true,
            hidden_units: None,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.channels_per_layer.len()
    }

    pub fn activation(&self, block: usize) -> Activation {
        self.activations
            .get(block)
            .copied()
            .unwrap_or(Activation::Relu)
    }

    pub fn pools(&self, block: usize) -> bool {
        self.pool_after.contains(&block)
    }

    /// Spatial side of the input to `block` (`block == num_layers` is the head).
    pub fn side_before(&self, block: usize) -> usize {
        (0..block).fold(
            self.input_side,
            |s, b| if self.pools(b) { s / 2 } else { s },
        )
    }

    /// `[height, width, channels]` of a layer output.
    pub fn layer_shape(&self, layer: LayerId) -> [usize; 3] {
        let s = self.side_before(layer.0 + 1);
        [s, s, self.channels_per_layer[layer.0]]
    }

    pub fn layer_dim(&self, layer: LayerId) -> usize {
        self.layer_shape(layer).iter().product()
    }

    pub fn layers(&self) -> Vec<LayerId> {
        (0..self.num_layers()).map(LayerId).collect()
    }

    pub fn check_layer(&self, layer: LayerId) -> Result<()> {
        if layer.0 < self.num_layers() {
            Ok(())
        } else {
            Err(Error::InvalidLayer(layer.to_string()))
        }
    }

    /// Whether a nonlinearity lies between this layer and the logits.
    pub fn has_nonlinear_tail(&self, layer: LayerId) -> bool {
        self.hidden_units.is_some()
            || (layer.0 + 1..self.num_layers())
                .any(|b| self.activation(b) != Activation::Identity || self.pools(b))
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels_per_layer.is_empty() || self.channels_per_layer.contains(&0) {
            return Err(Error::Config(
                "channels_per_layer needs positive entries".into(),
            ));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        if let Some(&b) = self.pool_after.iter().find(|&&b| b >= self.num_layers()) {
            return Err(Error::Config(format!("pool_after names missing block {b}")));
        }
        if !self.activations.is_empty() && self.activations.len() != self.num_layers() {
            return Err(Error::Config(
                "activations must list one entry per block".into(),
            ));
        }
        if self.hidden_units == Some(0) {
            return Err(Error::Config("hidden_units must be positive".into()));
        }
        let mut s = self.input_side;
        for b in 0..self.num_layers() {
            if s == 0 || (self.pools(b) && !s.is_multiple_of(2)) {
                return Err(Error::Config(format!(
                    "input_side {} cannot be pooled at block {b}",
                    self.input_side
                )));
            }
            if self.pools(b) {
                s /= 2;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

impl<T: Scalar> BatchNorm<T> {
    /// Per-channel `(scale, shift)` of the frozen evaluation transform.
    fn frozen(&self) -> (Vec<T>, Vec<T>) {
        let eps = T::of(BN_EPS);
        let scale: Vec<T> = self
            .gamma
            .iter()
            .zip(&self.running_var)
            .map(|(&g, &v)| g / (v + eps).sqrt())
            .collect();
        let shift = self
            .beta
            .iter()
            .zip(&self.running_mean)
            .zip(&scale)
            .map(|((&b, &m), &s)| b - m * s)
            .collect();
        (scale, shift)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Input spatial side.
    pub side: usize,
    pub pool: bool,
    pub activation: Activation,
    /// `[3, 3, in, out]` row-major, matching the im2col tap order.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub bn: Option<BatchNorm<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub inputs: usize,
    pub outputs: usize,
    /// `[inputs, outputs]` row-major.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Dense<T> {
    fn forward(&self, x: &[T], n: usize) -> Vec<T> {
        let mut y: Vec<T> = (0..n).flat_map(|_| self.bias.iter().copied()).collect();
        gemm(
            n,
            self.inputs,
            self.outputs,
            x,
            false,
            &self.weight,
            false,
            &mut y,
            true,
        );
        y
    }

    fn backward_input(&self, dy: &[T], n: usize) -> Vec<T> {
        let mut dx = vec![T::zero(); n * self.inputs];
        gemm(
            n,
            self.outputs,
            self.inputs,
            dy,
            false,
            &self.weight,
            true,
            &mut dx,
            false,
        );
        dx
    }

    fn accumulate(&self, x: &[T], dy: &[T], n: usize, grads: &mut DenseGrads<T>) {
        gemm(
            self.inputs,
            n,
            self.outputs,
            x,
            true,
            dy,
            false,
            &mut grads.weight,
            true,
        );
        for row in dy.chunks_exact(self.outputs) {
            for (g, &d) in grads.bias.iter_mut().zip(row) {
                *g += d;
            }
        }
    }
}

/// Where a partial forward pass stops.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Layer(LayerId),
    Logits,
}

#[derive(Debug, Clone)]
pub struct BlockGrads<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct DenseGrads<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

/// Parameter gradients laid out like [`Network::params_mut`].
#[derive(Debug, Clone)]
pub struct Grads<T> {
    pub blocks: Vec<BlockGrads<T>>,
    pub hidden: Option<DenseGrads<T>>,
    pub head: DenseGrads<T>,
}

impl<T: Scalar> Grads<T> {
    pub fn flat(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = Vec::new();
        for b in &self.blocks {
            out.push(&b.weight);
            out.push(&b.bias);
            if !b.gamma.is_empty() {
                out.push(&b.gamma);
                out.push(&b.beta);
            }
        }
        if let Some(h) = &self.hidden {
            out.push(&h.weight);
            out.push(&h.bias);
        }
        out.push(&self.head.weight);
        out.push(&self.head.bias);
        out
    }
}

#[derive(Debug, Clone)]
pub(crate) struct BlockTrace<T> {
    /// im2col matrix or padded input, kept for weight gradients.
    conv_input: Option<Vec<T>>,
    /// Normalized pre-activations (training mode only).
    xhat: Option<Vec<T>>,
    /// Per-channel inverse batch std (training mode only).
    inv_std: Option<Vec<T>>,
    pub(crate) batch_mean: Option<Vec<T>>,
    pub(crate) batch_var: Option<Vec<T>>,
    /// Activation output before pooling.
    act: Vec<T>,
    argmax: Option<Vec<u32>>,
}

#[derive(Debug, Clone)]
struct HeadTrace<T> {
    features: Vec<T>,
    hidden: Option<Vec<T>>,
}

/// Intermediate state of a forward pass, consumed by backward passes.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    n: usize,
    start: usize,
    pub(crate) blocks: Vec<BlockTrace<T>>,
    head: Option<HeadTrace<T>>,
    recorded: Vec<(usize, Vec<T>)>,
    output: Vec<T>,
}

impl<T> Trace<T> {
    pub fn output(&self) -> &[T] {
        &self.output
    }

    pub fn into_output(self) -> Vec<T> {
        self.output
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Mode {
    pub train: bool,
    pub keep_operands: bool,
}

impl Mode {
    const EVAL: Mode = Mode {
        train: false,
        keep_operands: false,
    };
}

impl<T: Scalar> Block<T> {
    fn rows(&self, n: usize) -> usize {
        n * self.side * self.side
    }

    fn shifted(&self) -> bool {
        self.in_channels >= SHIFTED_MIN_CHANNELS
    }

    /// Convolution plus bias; also returns the operand needed for weight gradients.
    fn convolve(&self, x: &[T], n: usize) -> (Vec<T>, Vec<T>) {
        let (rows, s, cin, c) = (self.rows(n), self.side, self.in_channels, self.out_channels);
        let (mut z, operand) = if self.shifted() {
            let xpad = pad1(x, n, s, cin);
            let z = unpad1(&conv3x3_padded(&xpad, n, s, cin, &self.weight, c), n, s, c);
            (z, xpad)
        } else {
            let col = im2col(x, n, s, cin);
            let mut z = vec![T::zero(); rows * c];
            gemm(
                rows,
                9 * cin,
                c,
                &col,
                false,
                &self.weight,
                false,
                &mut z,
                false,
            );
            (z, col)
        };
        for row in z.chunks_exact_mut(c) {
            for (v, &b) in row.iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        (z, operand)
    }

    fn forward(&self, x: &[T], n: usize, mode: Mode) -> (Vec<T>, BlockTrace<T>) {
        let (rows, c) = (self.rows(n), self.out_channels);
        assert_eq!(x.len(), rows * self.in_channels, "block input size");
        let (z, conv_input) = self.convolve(x, n);
        let mut trace = BlockTrace {
            conv_input: mode.keep_operands.then_some(conv_input),
            xhat: None,
            inv_std: None,
            batch_mean: None,
            batch_var: None,
            act: Vec::new(),
            argmax: None,
        };
        let mut z = z;
        if let Some(bn) = &self.bn {
            if mode.train {
                let count = T::of(rows as f64);
                let mut mean = vec![T::zero(); c];
                for row in z.chunks_exact(c) {
                    for (m, &v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m = *m / count);
                let mut var = vec![T::zero(); c];
                for row in z.chunks_exact(c) {
                    for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s = *s / count);
                let eps = T::of(BN_EPS);
                let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                for row in z.chunks_exact_mut(c) {
                    for (ch, v) in row.iter_mut().enumerate() {
                        *v = (*v - mean[ch]) * inv_std[ch];
                    }
                }
                let xhat = z.clone();
                for row in z.chunks_exact_mut(c) {
                    for (ch, v) in row.iter_mut().enumerate() {
                        *v = *v * bn.gamma[ch] + bn.beta[ch];
                    }
                }
                trace.xhat = Some(xhat);
                trace.inv_std = Some(inv_std);
                trace.batch_mean = Some(mean);
                trace.batch_var = Some(var);
            } else {
                let (scale, shift) = bn.frozen();
                for row in z.chunks_exact_mut(c) {
                    for (ch, v) in row.iter_mut().enumerate() {
                        *v = *v * scale[ch] + shift[ch];
                    }
                }
            }
        }
        if self.activation != Activation::Identity {
            z.iter_mut().for_each(|v| *v = self.activation.apply(*v));
        }
        let out = if self.pool {
            let (pooled, arg) = maxpool2(&z, n, self.side, c);
            trace.argmax = Some(arg);
            pooled
        } else {
            z.clone()
        };
        trace.act = z;
        (out, trace)
    }

    /// Propagates `dout` back through the block. Returns the input gradient
    /// when `need_input` is set and accumulates parameter gradients into
    /// `grads` when given (requires a training-mode trace).
    fn backward(
        &self,
        dout: &[T],
        trace: &BlockTrace<T>,
        n: usize,
        need_input: bool,
        grads: Option<&mut BlockGrads<T>>,
    ) -> Option<Vec<T>> {
        let (rows, c) = (self.rows(n), self.out_channels);
        let mut d = match &trace.argmax {
            Some(arg) => maxpool2_backward(dout, arg, rows * c),
            None => dout.to_vec(),
        };
        if self.activation != Activation::Identity {
            for (g, &y) in d.iter_mut().zip(&trace.act) {
                *g *= self.activation.derivative(y);
            }
        }
        let mut grads = grads;
        if let Some(bn) = &self.bn {
            match (&trace.xhat, &trace.inv_std) {
                (Some(xhat), Some(inv_std)) => {
                    let mut sum_dy = vec![T::zero(); c];
                    let mut sum_dy_xhat = vec![T::zero(); c];
                    for (row, xr) in d.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for ch in 0..c {
                            sum_dy[ch] += row[ch];
                            sum_dy_xhat[ch] += row[ch] * xr[ch];
                        }
                    }
                    if let Some(g) = grads.as_deref_mut() {
                        for ch in 0..c {
                            g.gamma[ch] += sum_dy_xhat[ch];
                            g.beta[ch] += sum_dy[ch];
                        }
                    }
                    let count = T::of(rows as f64);
                    for (row, xr) in d.chunks_exact_mut(c).zip(xhat.chunks_exact(c)) {
                        for ch in 0..c {
                            let mean_dy = sum_dy[ch] / count;
                            let mean_dyx = sum_dy_xhat[ch] / count;
                            row[ch] = bn.gamma[ch]
                                * inv_std[ch]
                                * (row[ch] - mean_dy - xr[ch] * mean_dyx);
                        }
                    }
                }
                _ => {
                    let (scale, _) = bn.frozen();
                    for row in d.chunks_exact_mut(c) {
                        for (v, &s) in row.iter_mut().zip(&scale) {
                            *v *= s;
                        }
                    }
                }
            }
        }
        if let Some(g) = grads {
            let input = trace
                .conv_input
                .as_ref()
                .expect("parameter gradients need a training trace");
            if self.shifted() {
                let dpad = pad1(&d, n, self.side, c);
                conv3x3_padded_weight_grad(
                    input,
                    &dpad,
                    n,
                    self.side,
                    self.in_channels,
                    c,
                    &mut g.weight,
                );
            } else {
                gemm(
                    9 * self.in_channels,
                    rows,
                    c,
                    input,
                    true,
                    &d,
                    false,
                    &mut g.weight,
                    true,
                );
            }
            for row in d.chunks_exact(c) {
                for (b, &v) in g.bias.iter_mut().zip(row) {
                    *b += v;
                }
            }
        }
        need_input.then(|| {
            let (s, cin) = (self.side, self.in_channels);
            if self.shifted() {
                let dpad = pad1(&d, n, s, c);
                unpad1(
                    &conv3x3_padded_input_grad(&dpad, n, s, cin, &self.weight, c),
                    n,
                    s,
                    cin,
                )
            } else {
                let mut dcol = vec![T::zero(); rows * 9 * cin];
                gemm(
                    rows,
                    c,
                    9 * cin,
                    &d,
                    false,
                    &self.weight,
                    true,
                    &mut dcol,
                    false,
                );
                col2im(&dcol, n, s, cin)
            }
        })
    }
}

/// A block network with parameters of type `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    pub config: ModelConfig,
    pub blocks: Vec<Block<T>>,
    pub hidden: Option<Dense<T>>,
    pub head: Dense<T>,
}

fn normal_vec<T: Scalar, R: Rng>(rng: &mut R, len: usize, std: f64) -> Vec<T> {
    (0..len)
        .map(|_| T::of(rng.sample::<f64, _>(StandardNormal) * std))
        .collect()
}

impl<T: Scalar> Network<T> {
    /// Kaiming fan-in initialization with zero biases.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, "model-init", 0);
        let mut blocks = Vec::with_capacity(config.num_layers());
        let mut cin = INPUT_CHANNELS;
        for (b, &cout) in config.channels_per_layer.iter().enumerate() {
            let fan_in = 9 * cin;
            blocks.push(Block {
                in_channels: cin,
                out_channels: cout,
                side: config.side_before(b),
                pool: config.pools(b),
                activation: config.activation(b),
                weight: normal_vec(&mut rng, fan_in * cout, (2.0 / fan_in as f64).sqrt()),
                bias: vec![T::zero(); cout],
                bn: config.batch_norm.then(|| BatchNorm {
                    gamma: vec![T::one(); cout],
                    beta: vec![T::zero(); cout],
                    running_mean: vec![T::zero(); cout],
                    running_var: vec![T::one(); cout],
                }),
            });
            cin = cout;
        }
        let hidden = config.hidden_units.map(|h| Dense {
            inputs: cin,
            outputs: h,
            weight: normal_vec(&mut rng, cin * h, (2.0 / cin as f64).sqrt()),
            bias: vec![T::zero(); h],
        });
        let head_in = config.hidden_units.unwrap_or(cin);
        let head = Dense {
            inputs: head_in,
            outputs: config.num_classes,
            weight: normal_vec(
                &mut rng,
                head_in * config.num_classes,
                (1.0 / head_in as f64).sqrt(),
            ),
            bias: vec![T::zero(); config.num_classes],
        };
        Ok(Network {
            config: config.clone(),
            blocks,
            hidden,
            head,
        })
    }

    /// Converts every parameter and statistic to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        let cv = |v: &Vec<T>| -> Vec<U> { v.iter().map(|x| U::of(x.to_f64().unwrap())).collect() };
        let dense = |d: &Dense<T>| Dense {
            inputs: d.inputs,
            outputs: d.outputs,
            weight: cv(&d.weight),
            bias: cv(&d.bias),
        };
        Network {
            config: self.config.clone(),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    in_channels: b.in_channels,
                    out_channels: b.out_channels,
                    side: b.side,
                    pool: b.pool,
                    activation: b.activation,
                    weight: cv(&b.weight),
                    bias: cv(&b.bias),
                    bn: b.bn.as_ref().map(|bn| BatchNorm {
                        gamma: cv(&bn.gamma),
                        beta: cv(&bn.beta),
                        running_mean: cv(&bn.running_mean),
                        running_var: cv(&bn.running_var),
                    }),
                })
                .collect(),
            hidden: self.hidden.as_ref().map(dense),
            head: dense(&self.head),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn num_classes(&self) -> usize {
        self.head.outputs
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_side * self.config.input_side * INPUT_CHANNELS
    }

    pub fn layer_dim(&self, layer: LayerId) -> usize {
        self.config.layer_dim(layer)
    }

    /// Mutable parameter tensors in a fixed order.
    pub fn params_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::new();
        for b in &mut self.blocks {
            out.push(&mut b.weight);
            out.push(&mut b.bias);
            if let Some(bn) = &mut b.bn {
                out.push(&mut bn.gamma);
                out.push(&mut bn.beta);
            }
        }
        if let Some(h) = &mut self.hidden {
            out.push(&mut h.weight);
            out.push(&mut h.bias);
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    pub fn zero_grads(&self) -> Grads<T> {
        let zeros = |n: usize| vec![T::zero(); n];
        Grads {
            blocks: self
                .blocks
                .iter()
                .map(|b| {
                    let bn = if b.bn.is_some() { b.out_channels } else { 0 };
                    BlockGrads {
                        weight: zeros(b.weight.len()),
                        bias: zeros(b.bias.len()),
                        gamma: zeros(bn),
                        beta: zeros(bn),
                    }
                })
                .collect(),
            hidden: self.hidden.as_ref().map(|h| DenseGrads {
                weight: zeros(h.weight.len()),
                bias: zeros(h.bias.len()),
            }),
            head: DenseGrads {
                weight: zeros(self.head.weight.len()),
                bias: zeros(self.head.bias.len()),
            },
        }
    }

    fn input_size(&self, start: usize) -> usize {
        if start == 0 {
            self.input_dim()
        } else {
            self.config.layer_dim(LayerId(start - 1))
        }
    }

    /// Runs blocks `start..` up to `target`, recording outputs of `record` layers.
    pub(crate) fn run(
        &self,
        input: &[T],
        n: usize,
        start: usize,
        target: Target,
        mode: Mode,
        record: &[usize],
    ) -> Result<Trace<T>> {
        let expected = n * self.input_size(start);
        if input.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                found: input.len(),
            });
        }
        let end = match target {
            Target::Layer(l) => {
                self.config.check_layer(l)?;
                if l.0 + 1 < start {
                    return Err(Error::InvalidArgument(format!(
                        "cannot propagate backwards to {l}"
                    )));
                }
                l.0 + 1
            }
            Target::Logits => self.num_layers(),
        };
        let mut trace = Trace {
            n,
            start,
            blocks: Vec::with_capacity(end - start),
            head: None,
            recorded: Vec::new(),
            output: Vec::new(),
        };
        let mut x = input.to_vec();
        for b in start..end {
            let (out, bt) = self.blocks[b].forward(&x, n, mode);
            trace.blocks.push(bt);
            if record.contains(&b) {
                trace.recorded.push((b, out.clone()));
            }
            x = out;
        }
        if target == Target::Logits {
            let last = self.blocks.last().expect("at least one block");
            let side = self.config.side_before(self.num_layers());
            let features = global_avg_pool(&x, n, side, last.out_channels);
            let hidden = self.hidden.as_ref().map(|h| {
                let mut z = h.forward(&features, n);
                z.iter_mut().for_each(|v| *v = v.max(T::zero()));
                z
            });
            x = self.head.forward(hidden.as_ref().unwrap_or(&features), n);
            trace.head = Some(HeadTrace { features, hidden });
        }
        trace.output = x;
        Ok(trace)
    }

    /// Backward pass over a trace. Returns gradients at the outputs of
    /// `want` layers (and at the trace input when `want_input` is set).
    pub(crate) fn back(
        &self,
        trace: &Trace<T>,
        upstream: &[T],
        want: &[usize],
        want_input: bool,
        mut grads: Option<&mut Grads<T>>,
    ) -> BackOutput<T> {
        assert_eq!(upstream.len(), trace.output.len(), "upstream gradient size");
        let n = trace.n;
        let end = trace.start + trace.blocks.len();
        let mut collected = Vec::new();
        let mut d = upstream.to_vec();
        if let Some(head) = &trace.head {
            let into_head = head.hidden.as_ref().unwrap_or(&head.features);
            if let Some(g) = grads.as_deref_mut() {
                self.head.accumulate(into_head, &d, n, &mut g.head);
            }
            d = self.head.backward_input(&d, n);
            if let (Some(h), Some(hv)) = (&self.hidden, &head.hidden) {
                for (g, &y) in d.iter_mut().zip(hv) {
                    if y <= T::zero() {
                        *g = T::zero();
                    }
                }
                if let Some(g) = grads.as_deref_mut() {
                    h.accumulate(
                        &head.features,
                        &d,
                        n,
                        g.hidden.as_mut().expect("hidden grads"),
                    );
                }
                d = h.backward_input(&d, n);
            }
            let side = self.config.side_before(self.num_layers());
            d = global_avg_pool_backward(&d, n, side, self.head_channels());
        }
        // `d` is now the gradient at the output of block `end - 1`.
        if end > 0 && want.contains(&(end - 1)) {
            collected.push((end - 1, d.clone()));
        }
        let lowest = want.iter().copied().min().map_or(usize::MAX, |l| l + 1);
        for b in (trace.start..end).rev() {
            let training = grads.is_some();
            let need_input = want_input || b >= lowest || (training && b > trace.start);
            let param = grads.as_deref_mut().map(|g| &mut g.blocks[b]);
            if !need_input && param.is_none() {
                break;
            }
            let dx =
                self.blocks[b].backward(&d, &trace.blocks[b - trace.start], n, need_input, param);
            match dx {
                Some(dx) => {
                    if b > 0 && want.contains(&(b - 1)) {
                        collected.push((b - 1, dx.clone()));
                    }
                    d = dx;
                }
                None => {
                    d = Vec::new();
                }
            }
        }
        let input_grad = want_input.then_some(d);
        (collected, input_grad)
    }

    fn head_channels(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.out_channels)
    }

    /// Evaluation-mode logits for `n` images (`n x num_classes`).
    pub fn forward(&self, x: &[T], n: usize) -> Result<Vec<T>> {
        Ok(self.run(x, n, 0, Target::Logits, Mode::EVAL, &[])?.output)
    }

    /// Evaluation-mode activations `g_l(x)` at each requested layer, one pass.
    pub fn capture(&self, x: &[T], n: usize, layers: &[LayerId]) -> Result<Vec<Vec<T>>> {
        for &l in layers {
            self.config.check_layer(l)?;
        }
        let Some(top) = layers.iter().max() else {
            return Ok(Vec::new());
        };
        let record: Vec<usize> = layers.iter().map(|l| l.0).collect();
        let trace = self.run(x, n, 0, Target::Layer(*top), Mode::EVAL, &record)?;
        Ok(layers
            .iter()
            .map(|l| {
                trace
                    .recorded
                    .iter()
                    .find(|(b, _)| *b == l.0)
                    .map(|(_, v)| v.clone())
                    .expect("recorded layer")
            })
            .collect())
    }

    /// The map `f` from layer `from` to `to` (or the logits), evaluation mode.
    pub fn continue_forward(&self, a: &[T], n: usize, from: LayerId, to: Target) -> Result<Vec<T>> {
        Ok(self.propagate(a, n, from, to)?.output)
    }

    /// Like [`continue_forward`](Self::continue_forward) but keeps the trace for [`pullback`](Self::pullback).
    pub fn propagate(&self, a: &[T], n: usize, from: LayerId, to: Target) -> Result<Trace<T>> {
        self.config.check_layer(from)?;
        if let Target::Layer(l) = to {
            if l <= from {
                return Err(Error::InvalidArgument(format!(
                    "{l} does not follow {from}"
                )));
            }
        }
        self.run(a, n, from.0 + 1, to, Mode::EVAL, &[])
    }

    /// Vector-Jacobian product of a [`propagate`](Self::propagate) trace: the
    /// gradient at the source layer of `<upstream, output>`.
    pub fn pullback(&self, trace: &Trace<T>, upstream: &[T]) -> Vec<T> {
        self.back(trace, upstream, &[], true, None)
            .1
            .expect("input gradient requested")
    }

    /// Gradient of logit `class` with respect to each requested layer
    /// output, for every image (`n x m_l` per layer), from one backward pass.
    pub fn logit_gradients(
        &self,
        x: &[T],
        n: usize,
        class: usize,
        layers: &[LayerId],
    ) -> Result<Vec<Vec<T>>> {
        if class >= self.num_classes() {
            return Err(Error::InvalidClass {
                index: class,
                count: self.num_classes(),
            });
        }
        for &l in layers {
            self.config.check_layer(l)?;
        }
        let trace = self.run(x, n, 0, Target::Logits, Mode::EVAL, &[])?;
        let k = self.num_classes();
        let mut upstream = vec![T::zero(); n * k];
        for i in 0..n {
            upstream[i * k + class] = T::one();
        }
        let want: Vec<usize> = layers.iter().map(|l| l.0).collect();
        let (collected, _) = self.back(&trace, &upstream, &want, false, None);
        Ok(layers
            .iter()
            .map(|l| {
                collected
                    .iter()
                    .find(|(b, _)| *b == l.0)
                    .map(|(_, g)| g.clone())
                    .expect("collected layer gradient")
            })
            .collect())
    }

    /// Single-image convenience wrapper around [`logit_gradients`](Self::logit_gradients).
    pub fn grad_logit_wrt_activation(
        &self,
        x: &[T],
        layer: LayerId,
        class: usize,
    ) -> Result<Vec<T>> {
        Ok(self.logit_gradients(x, 1, class, &[layer])?.remove(0))
    }

    pub(crate) fn train_forward(&self, x: &[T], n: usize) -> Result<Trace<T>> {
        self.run(
            x,
            n,
            0,
            Target::Logits,
            Mode {
                train: true,
                keep_operands: true,
            },
            &[],
        )
    }

    /// Accumulates parameter gradients of `<upstream, logits>` over a training trace.
    pub(crate) fn train_backward(&self, trace: &Trace<T>, upstream: &[T], grads: &mut Grads<T>) {
        self.back(trace, upstream, &[], false, Some(grads));
    }

    /// Exponential moving update of batchnorm statistics from a training trace.
    pub(crate) fn update_running_stats(&mut self, trace: &Trace<T>, momentum: f64) {
        let m = T::of(momentum);
        for (block, bt) in self.blocks.iter_mut().zip(&trace.blocks) {
            let (Some(bn), Some(mean), Some(var)) = (&mut block.bn, &bt.batch_mean, &bt.batch_var)
            else {
                continue;
            };
            let rows = trace.n * block.side * block.side;
            let unbias = if rows > 1 {
                T::of(rows as f64 / (rows as f64 - 1.0))
            } else {
                T::one()
            };
            for ch in 0..block.out_channels {
                bn.running_mean[ch] = (T::one() - m) * bn.running_mean[ch] + m * mean[ch];
                bn.running_var[ch] = (T::one() - m) * bn.running_var[ch] + m * var[ch] * unbias;
            }
        }
    }
}
