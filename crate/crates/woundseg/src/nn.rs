//! Named parameters, weight initialization, and the layer building
//! blocks shared by the encoder and decoder.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::{Tape, Tensor, TensorId};
use crate::{Result, Scalar};

/// A trainable tensor with a stable dotted path name. The name keys
/// gradient routing, optimizer state, and checkpoints.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Parameter { name: name.into(), value: value.requiring_grad() }
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }
}

/// Non-trainable named state (batch-norm running statistics). Saved in
/// checkpoints, excluded from parameter counts and optimization.
#[derive(Clone, Debug)]
pub struct Buffer<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Buffer<T> {
    pub fn new(name: impl Into<String>, shape: &[usize], data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Buffer { name: name.into(), shape: shape.to_vec(), data }
    }
}

/// Access to a module's parameters and buffers in a stable order.
pub trait Params<T: Scalar> {
    fn params(&self) -> Vec<&Parameter<T>>;
    fn params_mut(&mut self) -> Vec<&mut Parameter<T>>;

    fn buffers(&self) -> Vec<&Buffer<T>> {
        Vec::new()
    }
    fn buffers_mut(&mut self) -> Vec<&mut Buffer<T>> {
        Vec::new()
    }

    /// Total trainable elements.
    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.value.zero_grad();
        }
    }
}

impl Params<f64> for () {
    fn params(&self) -> Vec<&Parameter<f64>> {
        Vec::new()
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter<f64>> {
        Vec::new()
    }
}

/// Routes gradients accumulated on a tape back into module parameters.
pub fn apply_tape_grads<T: Scalar, M: Params<T> + ?Sized>(tape: &Tape<T>, module: &mut M) {
    for p in module.params_mut() {
        if let Some(g) = tape.param_grad(&p.name) {
            p.value.accumulate_grad(g);
        }
    }
}

// ----- initialization -------------------------------------------------------

/// Normal draw truncated to two standard deviations, the projection
/// initializer.
pub fn trunc_normal<T: Scalar>(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        loop {
            let v: f64 = rng.sample(StandardNormal);
            if v.abs() <= 2.0 {
                return T::from_f64_lossy(v * std);
            }
        }
    })
}

/// Fan-out scaled normal for convolution kernels:
/// `std = sqrt(2 / (kh * kw * cout / groups))`.
pub fn conv_normal<T: Scalar>(shape: &[usize], groups: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    debug_assert_eq!(shape.len(), 4);
    let fan_out = shape[0] * shape[2] * shape[3] / groups;
    let std = (2.0 / fan_out as f64).sqrt();
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.sample(StandardNormal);
        T::from_f64_lossy(v * std)
    })
}

// ----- layers ---------------------------------------------------------------

/// 2-D convolution layer with bias.
#[derive(Clone, Debug)]
pub struct Conv2dLayer<T> {
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> Conv2dLayer<T> {
    pub fn new(
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Conv2dLayer {
            weight: Parameter::new(
                format!("{name}.weight"),
                conv_normal(&[cout, cin, kernel, kernel], 1, rng),
            ),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(&[cout])),
            stride,
            padding,
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: TensorId) -> Result<TensorId> {
        let w = tape.param(&self.weight.name, &self.weight.value)?;
        let b = tape.param(&self.bias.name, &self.bias.value)?;
        tape.conv2d(x, w, b, self.stride, self.padding)
    }
}

impl<T: Scalar> Params<T> for Conv2dLayer<T> {
    fn params(&self) -> Vec<&Parameter<T>> {
        vec![&self.weight, &self.bias]
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Depthwise 3x3-style convolution layer, one filter per channel.
#[derive(Clone, Debug)]
pub struct DepthwiseConv2dLayer<T> {
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> DepthwiseConv2dLayer<T> {
    pub fn new(
        name: &str,
        channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        DepthwiseConv2dLayer {
            weight: Parameter::new(
                format!("{name}.weight"),
                conv_normal(&[channels, 1, kernel, kernel], channels, rng),
            ),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(&[channels])),
            stride,
            padding,
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: TensorId) -> Result<TensorId> {
        let w = tape.param(&self.weight.name, &self.weight.value)?;
        let b = tape.param(&self.bias.name, &self.bias.value)?;
        tape.depthwise_conv2d(x, w, b, self.stride, self.padding)
    }
}

impl<T: Scalar> Params<T> for DepthwiseConv2dLayer<T> {
    fn params(&self) -> Vec<&Parameter<T>> {
        vec![&self.weight, &self.bias]
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Affine layer over the last axis. Weight layout `[In, Out]`.
#[derive(Clone, Debug)]
pub struct LinearLayer<T> {
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
}

impl<T: Scalar> LinearLayer<T> {
    pub fn new(name: &str, in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        LinearLayer {
            weight: Parameter::new(
                format!("{name}.weight"),
                trunc_normal(&[in_dim, out_dim], 0.02, rng),
            ),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(&[out_dim])),
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: TensorId) -> Result<TensorId> {
        let w = tape.param(&self.weight.name, &self.weight.value)?;
        let b = tape.param(&self.bias.name, &self.bias.value)?;
        tape.linear(x, w, b)
    }
}

impl<T: Scalar> Params<T> for LinearLayer<T> {
    fn params(&self) -> Vec<&Parameter<T>> {
        vec![&self.weight, &self.bias]
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Layer normalization over the last axis.
#[derive(Clone, Debug)]
pub struct LayerNormLayer<T> {
    pub gamma: Parameter<T>,
    pub beta: Parameter<T>,
    pub eps: f64,
}

impl<T: Scalar> LayerNormLayer<T> {
    pub fn new(name: &str, dim: usize) -> Self {
        LayerNormLayer {
            gamma: Parameter::new(format!("{name}.gamma"), Tensor::full(&[dim], T::one())),
            beta: Parameter::new(format!("{name}.beta"), Tensor::zeros(&[dim])),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: TensorId) -> Result<TensorId> {
        let g = tape.param(&self.gamma.name, &self.gamma.value)?;
        let b = tape.param(&self.beta.name, &self.beta.value)?;
        tape.layer_norm(x, g, b, self.eps)
    }
}

impl<T: Scalar> Params<T> for LayerNormLayer<T> {
    fn params(&self) -> Vec<&Parameter<T>> {
        vec![&self.gamma, &self.beta]
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

/// Batch normalization with running statistics. Training-mode forwards
/// fold the batch statistics into the running estimates with momentum
/// 0.1.
#[derive(Clone, Debug)]
pub struct BatchNormLayer<T> {
    pub gamma: Parameter<T>,
    pub beta: Parameter<T>,
    pub running_mean: Buffer<T>,
    pub running_var: Buffer<T>,
    pub eps: f64,
    pub momentum: f64,
}

impl<T: Scalar> BatchNormLayer<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNormLayer {
            gamma: Parameter::new(format!("{name}.gamma"), Tensor::full(&[channels], T::one())),
            beta: Parameter::new(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: Buffer::new(
                format!("{name}.running_mean"),
                &[channels],
                vec![T::zero(); channels],
            ),
            running_var: Buffer::new(
                format!("{name}.running_var"),
                &[channels],
                vec![T::one(); channels],
            ),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, x: TensorId, training: bool) -> Result<TensorId> {
        let g = tape.param(&self.gamma.name, &self.gamma.value)?;
        let b = tape.param(&self.beta.name, &self.beta.value)?;
        let out = tape.batch_norm(
            x,
            g,
            b,
            &self.running_mean.data,
            &self.running_var.data,
            training,
            self.eps,
        )?;
        if let (Some(mean), Some(var)) = (out.batch_mean, out.batch_var) {
            let mom = T::from_f64_lossy(self.momentum);
            let keep = T::one() - mom;
            for (r, m) in self.running_mean.data.iter_mut().zip(&mean) {
                *r = keep * *r + mom * *m;
            }
            for (r, v) in self.running_var.data.iter_mut().zip(&var) {
                *r = keep * *r + mom * *v;
            }
        }
        Ok(out.out)
    }
}

impl<T: Scalar> Params<T> for BatchNormLayer<T> {
    fn params(&self) -> Vec<&Parameter<T>> {
        vec![&self.gamma, &self.beta]
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        vec![&mut self.gamma, &mut self.beta]
    }
    fn buffers(&self) -> Vec<&Buffer<T>> {
        vec![&self.running_mean, &self.running_var]
    }
    fn buffers_mut(&mut self) -> Vec<&mut Buffer<T>> {
        vec![&mut self.running_mean, &mut self.running_var]
    }
}
