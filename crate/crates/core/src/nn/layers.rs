//! Trainable layers: convolution, batch normalization, and the classifier.
//!
//! Layers own [`Parameter`]s plus, for batch norm, running-statistic buffers
//! that live outside the gradient system. All mutation paths used by the
//! pruner go through the `*_mut` accessors so surgery and scoring stay in
//! this crate.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{batchnorm_eval, batchnorm_train, Parameter, Scalar, Tensor};

/// Draws `n` values from N(0, std²) in f64 and narrows to `T`, so a given
/// seed produces the same weights regardless of the compute dtype.
fn normal_init<T: Scalar, R: Rng>(rng: &mut R, n: usize, std: f64) -> Vec<T> {
    let dist = Normal::new(0.0_f64, std).expect("finite std");
    (0..n).map(|_| T::from_f64(dist.sample(rng))).collect()
}

/// 2-D convolution layer. Weight layout `[out_c, in_c/groups, kh, kw]`.
#[derive(Clone)]
pub struct Conv2d<T: Scalar> {
    weight: Parameter<T>,
    bias: Option<Parameter<T>>,
    stride: usize,
    padding: usize,
    groups: usize,
}

impl<T: Scalar> Conv2d<T> {
    /// Kaiming-normal initialization: std = √(2 / fan_in) with
    /// fan_in = (in_c/groups)·kh·kw.
    pub fn new<R: Rng>(
        rng: &mut R,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        with_bias: bool,
    ) -> Result<Self> {
        if groups == 0 || in_c % groups != 0 || out_c % groups != 0 {
            return Err(Error::shape(
                "conv layer",
                format!("groups {groups} must divide in_c {in_c} and out_c {out_c}"),
            ));
        }
        let fan_in = (in_c / groups) * kernel * kernel;
        let std = (2.0 / fan_in as f64).sqrt();
        let shape = [out_c, in_c / groups, kernel, kernel];
        let weight = Parameter::new(normal_init(rng, shape.iter().product(), std), &shape)?;
        let bias = if with_bias {
            Some(Parameter::new(vec![T::zero(); out_c], &[out_c])?)
        } else {
            None
        };
        Ok(Conv2d {
            weight,
            bias,
            stride,
            padding,
            groups,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.conv2d(
            self.weight.value(),
            self.bias.as_ref().map(|b| b.value()),
            self.stride,
            self.padding,
            self.groups,
        )
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Total input channels (per-group channels × groups).
    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1] * self.groups
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn padding(&self) -> usize {
        self.padding
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn weight(&self) -> &Parameter<T> {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Parameter<T>> {
        self.bias.as_ref()
    }

    pub(crate) fn weight_mut(&mut self) -> &mut Parameter<T> {
        &mut self.weight
    }

    pub(crate) fn bias_mut(&mut self) -> Option<&mut Parameter<T>> {
        self.bias.as_mut()
    }

    pub(crate) fn params_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut Parameter<T>)>,
    ) {
        out.push((format!("{prefix}.weight"), &mut self.weight));
        if let Some(b) = self.bias.as_mut() {
            out.push((format!("{prefix}.bias"), b));
        }
    }

    pub(crate) fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Parameter<T>)>) {
        out.push((format!("{prefix}.weight"), &self.weight));
        if let Some(b) = self.bias.as_ref() {
            out.push((format!("{prefix}.bias"), b));
        }
    }
}

/// Batch normalization over `[n, c, h, w]`.
///
/// Running statistics track the same biased batch variance used for
/// normalization; they are plain buffers, invisible to the gradient system.
#[derive(Clone)]
pub struct BatchNorm2d<T: Scalar> {
    gamma: Parameter<T>,
    beta: Parameter<T>,
    running_mean: Vec<T>,
    running_var: Vec<T>,
    eps: f64,
    momentum: f64,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub const DEFAULT_EPS: f64 = 1e-5;
    pub const DEFAULT_MOMENTUM: f64 = 0.1;

    /// γ = 1, β = 0, running mean 0, running var 1.
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Parameter::new(vec![T::one(); channels], &[channels])
                .expect("consistent by construction"),
            beta: Parameter::new(vec![T::zero(); channels], &[channels])
                .expect("consistent by construction"),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            eps: Self::DEFAULT_EPS,
            momentum: Self::DEFAULT_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    /// Normalizes by batch statistics and folds them into the running
    /// estimates: new = (1 − momentum)·old + momentum·batch.
    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (y, stats) = batchnorm_train(x, self.gamma.value(), self.beta.value(), self.eps)?;
        let keep = T::from_f64(1.0 - self.momentum);
        let fold = T::from_f64(self.momentum);
        for c in 0..self.running_mean.len() {
            self.running_mean[c] = keep * self.running_mean[c] + fold * stats.mean[c];
            self.running_var[c] = keep * self.running_var[c] + fold * stats.var[c];
        }
        Ok(y)
    }

    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        batchnorm_eval(
            x,
            self.gamma.value(),
            self.beta.value(),
            &self.running_mean,
            &self.running_var,
            self.eps,
        )
    }

    pub fn gamma(&self) -> &Parameter<T> {
        &self.gamma
    }

    pub fn beta(&self) -> &Parameter<T> {
        &self.beta
    }

    pub fn running_mean(&self) -> &[T] {
        &self.running_mean
    }

    pub fn running_var(&self) -> &[T] {
        &self.running_var
    }

    pub(crate) fn gamma_mut(&mut self) -> &mut Parameter<T> {
        &mut self.gamma
    }

    pub(crate) fn beta_mut(&mut self) -> &mut Parameter<T> {
        &mut self.beta
    }

    pub(crate) fn running_mean_mut(&mut self) -> &mut Vec<T> {
        &mut self.running_mean
    }

    pub(crate) fn running_var_mut(&mut self) -> &mut Vec<T> {
        &mut self.running_var
    }

    pub(crate) fn params_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut Parameter<T>)>,
    ) {
        out.push((format!("{prefix}.gamma"), &mut self.gamma));
        out.push((format!("{prefix}.beta"), &mut self.beta));
    }

    pub(crate) fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Parameter<T>)>) {
        out.push((format!("{prefix}.gamma"), &self.gamma));
        out.push((format!("{prefix}.beta"), &self.beta));
    }
}

/// Fully connected classifier head. Weight layout is `[in, out]` so the
/// forward pass is a plain `x · W` without a transpose.
#[derive(Clone)]
pub struct Linear<T: Scalar> {
    weight: Parameter<T>,
    bias: Parameter<T>,
}

impl<T: Scalar> Linear<T> {
    /// Normal init with std = 1/√in, zero bias.
    pub fn new<R: Rng>(rng: &mut R, in_features: usize, out_features: usize) -> Result<Self> {
        let std = (1.0 / in_features as f64).sqrt();
        let weight = Parameter::new(
            normal_init(rng, in_features * out_features, std),
            &[in_features, out_features],
        )?;
        let bias = Parameter::new(vec![T::zero(); out_features], &[out_features])?;
        Ok(Linear { weight, bias })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.matmul(self.weight.value())?.add(self.bias.value())
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn weight(&self) -> &Parameter<T> {
        &self.weight
    }

    pub fn bias(&self) -> &Parameter<T> {
        &self.bias
    }

    pub(crate) fn weight_mut(&mut self) -> &mut Parameter<T> {
        &mut self.weight
    }

    pub(crate) fn bias_mut(&mut self) -> &mut Parameter<T> {
        &mut self.bias
    }

    pub(crate) fn params_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut Parameter<T>)>,
    ) {
        out.push((format!("{prefix}.weight"), &mut self.weight));
        out.push((format!("{prefix}.bias"), &mut self.bias));
    }

    pub(crate) fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Parameter<T>)>) {
        out.push((format!("{prefix}.weight"), &self.weight));
        out.push((format!("{prefix}.bias"), &self.bias));
    }
}
