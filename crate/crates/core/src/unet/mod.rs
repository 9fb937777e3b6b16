//! 3D U-Net with a self-contained reverse-mode core.
//!
//! Each encoder level is two `conv 3x3x3 -> ReLU -> batch norm` units followed
//! by 2x max pooling. The bottom level and every decoder level except the top
//! end with nearest x2 upsampling, and their second convolution emits the
//! feature count of the level above, so the concatenated decoder input is
//! twice the skip connection's width. A final 1x1x1 convolution maps to the
//! K class channels.

mod adam;
pub mod layers;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};
use crate::volume::LabelVolume;
use layers::{BnCache, ConvShape};

pub use adam::{adam_step, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub levels: usize,
    pub base_features: usize,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            in_channels: 1,
            out_channels: 5,
            levels: 5,
            base_features: 8,
            bn_momentum: 0.1,
            bn_epsilon: 1e-5,
        }
    }
}

impl UNetConfig {
    pub fn tiny() -> Self {
        UNetConfig {
            levels: 2,
            base_features: 2,
            out_channels: 2,
            ..Default::default()
        }
    }

    /// Three levels of 8, 16 and 32 features: enough for a 32³ phantom.
    pub fn desk() -> Self {
        UNetConfig {
            levels: 3,
            ..Default::default()
        }
    }

    /// Feature count per level (base doubling per level).
    pub fn features(&self) -> Vec<usize> {
        (0..self.levels).map(|l| self.base_features << l).collect()
    }

    /// Required divisor of every spatial axis.
    pub fn divisor(&self) -> usize {
        1 << (self.levels - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.levels > 8 {
            return Err(Error::InvalidConfig(format!(
                "levels must be in 1..=8, got {}",
                self.levels
            )));
        }
        if self.in_channels == 0 || self.out_channels == 0 || self.base_features == 0 {
            return Err(Error::InvalidConfig("channel and feature counts must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) || !(self.bn_epsilon > 0.0) {
            return Err(Error::InvalidConfig(
                "bn_momentum in [0,1] and bn_epsilon > 0 required".into(),
            ));
        }
        Ok(())
    }

    pub fn check_dims(&self, dims: [usize; 3]) -> Result<()> {
        let div = self.divisor();
        for (a, axis) in ['x', 'y', 'z'].into_iter().enumerate() {
            if dims[a] == 0 || dims[a] % div != 0 {
                return Err(Error::IndivisibleAxis {
                    axis,
                    size: dims[a],
                    divisor: div,
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A named learnable tensor and its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Real> Param<T> {
    fn new(name: String, shape: Vec<usize>, value: Vec<T>) -> Self {
        let n = value.len();
        debug_assert_eq!(n, shape.iter().product::<usize>());
        Param {
            name,
            shape,
            value,
            grad: vec![T::zero(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Running statistics of one batch-norm layer (not learnable).
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub name: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Clone, Copy, Debug)]
struct ConvLayer {
    shape: ConvShape,
    weight: usize,
    bias: usize,
}

#[derive(Clone, Copy, Debug)]
struct BnLayer {
    gamma: usize,
    beta: usize,
    stats: usize,
}

/// conv -> ReLU -> batch norm
#[derive(Clone, Copy, Debug)]
struct Unit {
    conv: ConvLayer,
    bn: BnLayer,
}

#[derive(Clone, Copy, Debug)]
struct Block {
    units: [Unit; 2],
}

#[derive(Clone, Debug)]
pub struct UNet<T> {
    config: UNetConfig,
    params: Vec<Param<T>>,
    stats: Vec<RunningStats<T>>,
    encoder: Vec<Block>,
    bottom: Block,
    decoder: Vec<Block>,
    head: ConvLayer,
    accumulated: usize,
}

pub type UNetModel = UNet<f32>;

struct Builder<T> {
    params: Vec<Param<T>>,
    stats: Vec<RunningStats<T>>,
}

impl<T: Real> Builder<T> {
    fn conv(&mut self, name: &str, shape: ConvShape) -> ConvLayer {
        let k = shape.kernel;
        let weight = self.params.len();
        self.params.push(Param::new(
            format!("{name}.weight"),
            vec![shape.out_channels, shape.in_channels, k, k, k],
            vec![T::zero(); shape.weight_len()],
        ));
        let bias = self.params.len();
        self.params.push(Param::new(
            format!("{name}.bias"),
            vec![shape.out_channels],
            vec![T::zero(); shape.out_channels],
        ));
        ConvLayer { shape, weight, bias }
    }

    fn bn(&mut self, name: &str, channels: usize) -> BnLayer {
        let gamma = self.params.len();
        self.params.push(Param::new(
            format!("{name}.gamma"),
            vec![channels],
            vec![T::one(); channels],
        ));
        let beta = self.params.len();
        self.params.push(Param::new(
            format!("{name}.beta"),
            vec![channels],
            vec![T::zero(); channels],
        ));
        let stats = self.stats.len();
        self.stats.push(RunningStats {
            name: name.to_string(),
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        });
        BnLayer { gamma, beta, stats }
    }

    fn block(&mut self, name: &str, input: usize, mid: usize, output: usize) -> Block {
        let conv = |b: &mut Self, i: usize, cin, cout| Unit {
            conv: b.conv(
                &format!("{name}.conv{i}"),
                ConvShape {
                    in_channels: cin,
                    out_channels: cout,
                    kernel: 3,
                },
            ),
            bn: b.bn(&format!("{name}.bn{i}"), cout),
        };
        Block {
            units: [conv(self, 1, input, mid), conv(self, 2, mid, output)],
        }
    }
}

/// Everything the backward pass needs from a training forward pass.
struct UnitCache<T> {
    input: Tensor<T>,
    activated: Tensor<T>,
    bn: BnCache<T>,
}

struct ForwardCache<T> {
    encoder: Vec<[UnitCache<T>; 2]>,
    pool_argmax: Vec<Vec<u32>>,
    skip_dims: Vec<[usize; 3]>,
    bottom: [UnitCache<T>; 2],
    decoder: Vec<[UnitCache<T>; 2]>,
    head_input: Tensor<T>,
}

/// Per-parameter gradients of one backward pass, in parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub names: Vec<String>,
    pub values: Vec<Vec<T>>,
}

impl<T: Real> UNet<T> {
    /// A freshly initialized network: Kaiming-uniform (fan-in) convolution
    /// weights with a near-zero head, zero biases, unit BN scale, zero BN shift.
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let f = config.features();
        let levels = config.levels;
        let mut b = Builder {
            params: Vec::new(),
            stats: Vec::new(),
        };
        let mut encoder = Vec::new();
        let mut input = config.in_channels;
        for (l, &fl) in f.iter().enumerate().take(levels - 1) {
            encoder.push(b.block(&format!("enc{l}"), input, fl, fl));
            input = fl;
        }
        let deepest = f[levels - 1];
        let bottom_out = if levels > 1 { f[levels - 2] } else { deepest };
        let bottom = b.block("bottom", input, deepest, bottom_out);
        let mut decoder = Vec::new();
        for l in (0..levels - 1).rev() {
            let out = if l > 0 { f[l - 1] } else { f[0] };
            decoder.push(b.block(&format!("dec{l}"), 2 * f[l], f[l], out));
        }
        let head = b.conv(
            "head",
            ConvShape {
                in_channels: f[0],
                out_channels: config.out_channels,
                kernel: 1,
            },
        );
        let mut net = UNet {
            config,
            params: b.params,
            stats: b.stats,
            encoder,
            bottom,
            decoder,
            head,
            accumulated: 0,
        };
        net.initialize(seed);
        Ok(net)
    }

    fn conv_layers(&self) -> Vec<ConvLayer> {
        let mut out: Vec<ConvLayer> = self
            .encoder
            .iter()
            .chain(std::iter::once(&self.bottom))
            .chain(&self.decoder)
            .flat_map(|b| b.units.iter().map(|u| u.conv))
            .collect();
        out.push(self.head);
        out
    }

    fn initialize(&mut self, seed: u64) {
        let mut rng = Rng::new(seed);
        let head = self.head.weight;
        for conv in self.conv_layers() {
            let fan_in = conv.shape.in_channels * conv.shape.kernel.pow(3);
            // the head starts near zero so untrained outputs sit near the background target
            let bound = if conv.weight == head {
                0.1 / (fan_in as f64).sqrt()
            } else {
                (6.0 / fan_in as f64).sqrt()
            };
            for w in &mut self.params[conv.weight].value {
                *w = T::from_f64(rng.uniform(-bound, bound));
            }
        }
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn running_stats(&self) -> &[RunningStats<T>] {
        &self.stats
    }

    pub fn running_stats_mut(&mut self) -> &mut [RunningStats<T>] {
        &mut self.stats
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    /// Backward passes accumulated since the last optimizer step.
    pub fn accumulated(&self) -> usize {
        self.accumulated
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
        self.accumulated = 0;
    }

    /// Adds externally computed gradients into the accumulation buffer.
    pub fn accumulate(&mut self, grads: &Gradients<T>) {
        assert_eq!(grads.values.len(), self.params.len());
        for (p, g) in self.params.iter_mut().zip(&grads.values) {
            for (a, b) in p.grad.iter_mut().zip(g) {
                *a = *a + *b;
            }
        }
        self.accumulated += 1;
    }

    /// Converts every tensor to another precision.
    pub fn cast<U: Real>(&self) -> UNet<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::from_f64(x.as_f64())).collect::<Vec<U>>();
        UNet {
            config: self.config,
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    value: conv(&p.value),
                    grad: conv(&p.grad),
                })
                .collect(),
            stats: self
                .stats
                .iter()
                .map(|s| RunningStats {
                    name: s.name.clone(),
                    mean: conv(&s.mean),
                    var: conv(&s.var),
                })
                .collect(),
            encoder: self.encoder.clone(),
            bottom: self.bottom,
            decoder: self.decoder.clone(),
            head: self.head,
            accumulated: self.accumulated,
        }
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<()> {
        if input.channels != self.config.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "input has {} channels, network expects {}",
                input.channels, self.config.in_channels
            )));
        }
        self.config.check_dims(input.dims)
    }

    fn conv(&self, layer: &ConvLayer, x: &Tensor<T>) -> Tensor<T> {
        layers::conv3d_forward(
            x,
            &layer.shape,
            &self.params[layer.weight].value,
            &self.params[layer.bias].value,
        )
    }

    fn unit_eval(&self, unit: &Unit, x: &Tensor<T>) -> Tensor<T> {
        let mut a = self.conv(&unit.conv, x);
        layers::relu_forward(&mut a);
        let s = &self.stats[unit.bn.stats];
        layers::bn_eval_forward(
            &a,
            &self.params[unit.bn.gamma].value,
            &self.params[unit.bn.beta].value,
            &s.mean,
            &s.var,
            self.config.bn_epsilon,
        )
    }

    fn block_eval(&self, block: &Block, x: &Tensor<T>) -> Tensor<T> {
        let h = self.unit_eval(&block.units[0], x);
        self.unit_eval(&block.units[1], &h)
    }

    fn unit_train(&mut self, unit: &Unit, x: Tensor<T>) -> (Tensor<T>, UnitCache<T>) {
        let mut a = self.conv(&unit.conv, &x);
        layers::relu_forward(&mut a);
        let (y, bn, batch) = layers::bn_train_forward(
            &a,
            &self.params[unit.bn.gamma].value,
            &self.params[unit.bn.beta].value,
            self.config.bn_epsilon,
        );
        let m = self.config.bn_momentum;
        let n = a.voxels() as f64;
        let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
        let s = &mut self.stats[unit.bn.stats];
        for c in 0..a.channels {
            s.mean[c] = T::from_f64((1.0 - m) * s.mean[c].as_f64() + m * batch.mean[c]);
            s.var[c] = T::from_f64((1.0 - m) * s.var[c].as_f64() + m * batch.var[c] * unbias);
        }
        (
            y,
            UnitCache {
                input: x,
                activated: a,
                bn,
            },
        )
    }

    fn block_train(&mut self, block: &Block, x: Tensor<T>) -> (Tensor<T>, [UnitCache<T>; 2]) {
        let (h, c1) = self.unit_train(&block.units[0], x);
        let (y, c2) = self.unit_train(&block.units[1], h);
        (y, [c1, c2])
    }

    /// Pure inference pass using running statistics.
    pub fn forward_eval(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(input)?;
        let mut skips = Vec::new();
        let mut x = input.clone();
        for block in &self.encoder {
            let h = self.block_eval(block, &x);
            x = layers::maxpool2_forward(&h).0;
            skips.push(h);
        }
        x = self.block_eval(&self.bottom, &x);
        for block in &self.decoder {
            let up = layers::upsample2_forward(&x);
            let skip = skips.pop().expect("one skip per decoder level");
            x = self.block_eval(block, &layers::concat(&skip, &up));
        }
        Ok(self.conv(&self.head, &x))
    }

    /// Forward pass in either mode; training mode updates running statistics.
    pub fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match mode {
            Mode::Eval => self.forward_eval(input),
            Mode::Train => Ok(self.forward_train(input)?.0),
        }
    }

    fn forward_train(&mut self, input: &Tensor<T>) -> Result<(Tensor<T>, ForwardCache<T>)> {
        self.check_input(input)?;
        let mut enc_caches = Vec::new();
        let mut argmaxes = Vec::new();
        let mut skip_dims = Vec::new();
        let mut skips = Vec::new();
        let mut x = input.clone();
        for block in self.encoder.clone() {
            let (h, c) = self.block_train(&block, x);
            let (pooled, arg) = layers::maxpool2_forward(&h);
            skip_dims.push(h.dims);
            skips.push(h);
            enc_caches.push(c);
            argmaxes.push(arg);
            x = pooled;
        }
        let bottom = self.bottom;
        let (mut x, bottom_cache) = self.block_train(&bottom, x);
        let mut dec_caches = Vec::new();
        for block in self.decoder.clone() {
            let up = layers::upsample2_forward(&x);
            let skip = skips.pop().expect("one skip per decoder level");
            let (y, c) = self.block_train(&block, layers::concat(&skip, &up));
            dec_caches.push(c);
            x = y;
        }
        let out = self.conv(&self.head, &x);
        Ok((
            out,
            ForwardCache {
                encoder: enc_caches,
                pool_argmax: argmaxes,
                skip_dims,
                bottom: bottom_cache,
                decoder: dec_caches,
                head_input: x,
            },
        ))
    }

    fn unit_backward(
        &self,
        unit: &Unit,
        cache: &UnitCache<T>,
        grad: &Tensor<T>,
        grads: &mut [Vec<T>],
        need_input: bool,
    ) -> Option<Tensor<T>> {
        let (gg, gb) = two_mut(grads, unit.bn.gamma, unit.bn.beta);
        let mut g = layers::bn_backward(grad, &cache.bn, &self.params[unit.bn.gamma].value, gg, gb);
        layers::relu_backward(&cache.activated, &mut g);
        let (gw, gbias) = two_mut(grads, unit.conv.weight, unit.conv.bias);
        layers::conv3d_backward(
            &cache.input,
            &unit.conv.shape,
            &self.params[unit.conv.weight].value,
            &g,
            gw,
            gbias,
            need_input,
        )
    }

    fn block_backward(
        &self,
        block: &Block,
        caches: &[UnitCache<T>; 2],
        grad: &Tensor<T>,
        grads: &mut [Vec<T>],
        need_input: bool,
    ) -> Option<Tensor<T>> {
        let g = self
            .unit_backward(&block.units[1], &caches[1], grad, grads, true)
            .expect("inner gradient");
        self.unit_backward(&block.units[0], &caches[0], &g, grads, need_input)
    }

    fn backward_from(&self, cache: &ForwardCache<T>, grad_out: &Tensor<T>) -> Gradients<T> {
        let mut grads: Vec<Vec<T>> = self.params.iter().map(|p| vec![T::zero(); p.len()]).collect();
        let (gw, gb) = two_mut(&mut grads, self.head.weight, self.head.bias);
        let mut g = layers::conv3d_backward(
            &cache.head_input,
            &self.head.shape,
            &self.params[self.head.weight].value,
            grad_out,
            gw,
            gb,
            true,
        )
        .expect("head input gradient");

        // decoder blocks run top-down in reverse order of construction
        let levels = self.decoder.len();
        let mut skip_grads: Vec<Tensor<T>> = Vec::with_capacity(levels);
        for (i, block) in self.decoder.iter().enumerate().rev() {
            let gin = self
                .block_backward(block, &cache.decoder[i], &g, &mut grads, true)
                .expect("decoder input gradient");
            // decoder i consumed skip of encoder level (levels - 1 - i)
            let skip_channels = gin.channels / 2;
            let (gskip, gup) = layers::split(&gin, skip_channels);
            skip_grads.push(gskip);
            g = layers::upsample2_backward(&gup);
        }
        let has_encoder = !self.encoder.is_empty();
        let mut g = self.block_backward(&self.bottom, &cache.bottom, &g, &mut grads, has_encoder);
        // skip_grads now holds encoder levels 0, 1, ... in order
        for (l, block) in self.encoder.iter().enumerate().rev() {
            let gpool = g.expect("pool gradient");
            let mut gh = layers::maxpool2_backward(&gpool, &cache.pool_argmax[l], cache.skip_dims[l]);
            for (a, b) in gh.data.iter_mut().zip(&skip_grads[l].data) {
                *a = *a + *b;
            }
            g = self.block_backward(block, &cache.encoder[l], &gh, &mut grads, l > 0);
        }
        Gradients {
            names: self.params.iter().map(|p| p.name.clone()).collect(),
            values: grads,
        }
    }

    /// Training forward pass, loss and exact gradients, without touching the
    /// accumulation buffer.
    pub fn compute_gradients(&mut self, input: &Tensor<T>, label: &LabelVolume) -> Result<(f64, Gradients<T>)> {
        if label.dims() != input.dims {
            return Err(Error::ShapeMismatch(format!(
                "input {:?} vs label {:?}",
                input.dims,
                label.dims()
            )));
        }
        label.validate(self.config.out_channels)?;
        let (out, cache) = self.forward_train(input)?;
        let (loss, grad) = loss_and_grad(&out, label)?;
        Ok((loss, self.backward_from(&cache, &grad)))
    }

    /// Training forward + backward; adds the gradients into the accumulation
    /// buffer and returns the loss.
    pub fn backward(&mut self, input: &Tensor<T>, label: &LabelVolume) -> Result<f64> {
        let (loss, grads) = self.compute_gradients(input, label)?;
        self.accumulate(&grads);
        Ok(loss)
    }
}

fn two_mut<T>(v: &mut [T], i: usize, j: usize) -> (&mut T, &mut T) {
    assert!(i < j);
    let (a, b) = v.split_at_mut(j);
    (&mut a[i], &mut b[0])
}

fn one_hot_value(label: u8, channel: usize) -> f64 {
    if label as usize == channel + 1 {
        1.0
    } else {
        0.0
    }
}

/// Mean over voxels and channels of the squared difference to the one-hot
/// target (background is the all-zero vector).
pub fn loss_mse<T: Real>(output: &Tensor<T>, label: &LabelVolume) -> Result<f64> {
    Ok(loss_and_grad(output, label)?.0)
}

fn loss_and_grad<T: Real>(output: &Tensor<T>, label: &LabelVolume) -> Result<(f64, Tensor<T>)> {
    if output.dims != label.dims() {
        return Err(Error::ShapeMismatch(format!(
            "output {:?} vs label {:?}",
            output.dims,
            label.dims()
        )));
    }
    let k = output.channels;
    label.validate(k)?;
    let n = output.voxels();
    let scale = 2.0 / (n * k) as f64;
    let mut grad = Tensor::zeros(k, output.dims);
    let mut sum = 0.0f64;
    for c in 0..k {
        let out = output.channel(c);
        let g = grad.channel_mut(c);
        for i in 0..n {
            let d = out[i].as_f64() - one_hot_value(label.labels()[i], c);
            sum += d * d;
            g[i] = T::from_f64(scale * d);
        }
    }
    Ok((sum / (n * k) as f64, grad))
}
