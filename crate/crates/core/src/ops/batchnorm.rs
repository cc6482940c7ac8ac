//! Per-channel batch normalization over NCHW tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T = f32> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub epsilon: T,
    pub momentum: T,
}

/// Values saved by a train-mode forward for the backward pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache<T = f32> {
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
    pub batch_mean: Vec<T>,
    /// Biased batch variance.
    pub batch_var: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct BatchNormGrads<T = f32> {
    pub input: Tensor<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

impl<T: Scalar> BatchNormState<T> {
    /// gamma = 1, beta = 0, running mean 0, running variance 1.
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![T::ONE; channels],
            beta: vec![T::ZERO; channels],
            running_mean: vec![T::ZERO; channels],
            running_var: vec![T::ONE; channels],
            epsilon: T::from_f64(DEFAULT_EPSILON),
            momentum: T::from_f64(DEFAULT_MOMENTUM),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        if self.beta.len() != c || self.running_mean.len() != c || self.running_var.len() != c {
            return Err(Error::config("batch norm arrays differ in length"));
        }
        if self.running_var.iter().any(|&v| v < T::ZERO) {
            return Err(Error::config("negative running variance"));
        }
        if !(self.epsilon > T::ZERO) {
            return Err(Error::config("batch norm epsilon must be positive"));
        }
        Ok(())
    }

    /// Eval-mode map per channel as `(scale, shift)`: `y = scale * x + shift`.
    pub fn eval_affine(&self) -> (Vec<T>, Vec<T>) {
        let scale: Vec<T> = self
            .gamma
            .iter()
            .zip(&self.running_var)
            .map(|(&g, &v)| g / (v + self.epsilon).sqrt())
            .collect();
        let shift = self
            .beta
            .iter()
            .zip(&scale)
            .zip(&self.running_mean)
            .map(|((&b, &a), &m)| b - a * m)
            .collect();
        (scale, shift)
    }

    /// Eval-mode output for an all-zero input: `beta - gamma * mean / sqrt(var + eps)`.
    ///
    /// This is the per-channel constant a zero-ablated convolution collapses to.
    pub fn zero_input_response(&self) -> Vec<T> {
        self.eval_affine().1
    }

    /// Exponential moving average update from a train-mode batch.
    pub fn update_running(&mut self, cache: &BatchNormCache<T>, count: usize) {
        let m = self.momentum;
        let keep = T::ONE - m;
        let unbias = T::from_f64(count as f64 / (count as f64 - 1.0));
        for k in 0..self.channels() {
            self.running_mean[k] = keep * self.running_mean[k] + m * cache.batch_mean[k];
            self.running_var[k] = keep * self.running_var[k] + m * cache.batch_var[k] * unbias;
        }
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels()
    }
}

fn check_channels<T: Scalar>(input: &Tensor<T>, state: &BatchNormState<T>) -> Result<()> {
    if input.shape().c != state.channels() {
        return Err(Error::config(format!(
            "batch norm has {} channels, input has {}",
            state.channels(),
            input.shape().c
        )));
    }
    Ok(())
}

/// Eval-mode batch norm using running statistics.
pub fn batchnorm_eval<T: Scalar>(input: &Tensor<T>, state: &BatchNormState<T>) -> Result<Tensor<T>> {
    check_channels(input, state)?;
    let (scale, shift) = state.eval_affine();
    let s = input.shape();
    let plane = s.plane();
    let mut out = input.clone();
    for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let k = i % s.c;
        let (a, b) = (scale[k], shift[k]);
        chunk.iter_mut().for_each(|v| *v = a * *v + b);
    }
    out.ensure_finite("batchnorm")?;
    Ok(out)
}

/// Train-mode batch norm: normalizes by batch statistics. Running statistics
/// are not touched; apply [`BatchNormState::update_running`] with the cache.
pub fn batchnorm_train<T: Scalar>(
    input: &Tensor<T>,
    state: &BatchNormState<T>,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    check_channels(input, state)?;
    let s = input.shape();
    let count = s.n * s.plane();
    if count < 2 {
        return Err(Error::DegenerateBatch);
    }
    let plane = s.plane();
    let inv_count = T::from_f64(1.0 / count as f64);
    let mut mean = vec![T::ZERO; s.c];
    for (i, chunk) in input.data().chunks(plane).enumerate() {
        mean[i % s.c] += chunk.iter().copied().sum::<T>();
    }
    mean.iter_mut().for_each(|m| *m *= inv_count);
    let mut var = vec![T::ZERO; s.c];
    for (i, chunk) in input.data().chunks(plane).enumerate() {
        let k = i % s.c;
        let mk = mean[k];
        var[k] += chunk.iter().map(|&v| (v - mk) * (v - mk)).sum::<T>();
    }
    var.iter_mut().for_each(|v| *v *= inv_count);
    let inv_std: Vec<T> = var.iter().map(|&v| T::ONE / (v + state.epsilon).sqrt()).collect();

    let mut normalized = input.clone();
    let mut out = Tensor::zeros(s);
    for (i, (xh, y)) in normalized
        .data_mut()
        .chunks_mut(plane)
        .zip(out.data_mut().chunks_mut(plane))
        .enumerate()
    {
        let k = i % s.c;
        let (mk, is, g, b) = (mean[k], inv_std[k], state.gamma[k], state.beta[k]);
        for (xv, yv) in xh.iter_mut().zip(y.iter_mut()) {
            *xv = (*xv - mk) * is;
            *yv = g * *xv + b;
        }
    }
    out.ensure_finite("batchnorm")?;
    Ok((
        out,
        BatchNormCache {
            normalized,
            inv_std,
            batch_mean: mean,
            batch_var: var,
        },
    ))
}

/// Batch norm in either mode. In train mode the second element is the state
/// with running statistics advanced by one momentum step.
pub fn batchnorm<T: Scalar>(
    input: &Tensor<T>,
    state: &BatchNormState<T>,
    mode: Mode,
) -> Result<(Tensor<T>, Option<BatchNormState<T>>)> {
    match mode {
        Mode::Eval => Ok((batchnorm_eval(input, state)?, None)),
        Mode::Train => {
            let (out, cache) = batchnorm_train(input, state)?;
            let mut next = state.clone();
            let s = input.shape();
            next.update_running(&cache, s.n * s.plane());
            Ok((out, Some(next)))
        }
    }
}

/// Backward of train-mode batch norm.
pub fn batchnorm_train_grad<T: Scalar>(
    grad_out: &Tensor<T>,
    cache: &BatchNormCache<T>,
    state: &BatchNormState<T>,
) -> Result<BatchNormGrads<T>> {
    grad_out.check_same_shape(&cache.normalized)?;
    let s = grad_out.shape();
    let plane = s.plane();
    let count = T::from_f64((s.n * plane) as f64);
    let mut dgamma = vec![T::ZERO; s.c];
    let mut dbeta = vec![T::ZERO; s.c];
    for (i, (g, xh)) in grad_out
        .data()
        .chunks(plane)
        .zip(cache.normalized.data().chunks(plane))
        .enumerate()
    {
        let k = i % s.c;
        dbeta[k] += g.iter().copied().sum::<T>();
        dgamma[k] += g.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>();
    }
    let mut dx = Tensor::zeros(s);
    for (i, ((d, g), xh)) in dx
        .data_mut()
        .chunks_mut(plane)
        .zip(grad_out.data().chunks(plane))
        .zip(cache.normalized.data().chunks(plane))
        .enumerate()
    {
        let k = i % s.c;
        let coef = state.gamma[k] * cache.inv_std[k] / count;
        let (db, dg) = (dbeta[k], dgamma[k]);
        for ((dv, &gv), &xv) in d.iter_mut().zip(g).zip(xh) {
            *dv = coef * (count * gv - db - xv * dg);
        }
    }
    dx.ensure_finite("batchnorm_grad")?;
    Ok(BatchNormGrads {
        input: dx,
        gamma: dgamma,
        beta: dbeta,
    })
}
