//! Feedforward spiking network with per-synapse learnable delays.
//!
//! Each synaptic connection is a 1-d temporal convolution whose kernel is
//! a normalized Gaussian bump centered at `t_d - delay - 1`; learning the
//! bump position learns the delay. Hidden layers are delay convolution,
//! batch normalization, a leaky integrate-and-fire neuron and dropout;
//! the readout is a delay convolution into LIF neurons that never spike.
//!
//! Spikes are binary in training (`SpikeMode::Hard`, arctangent surrogate
//! derivative, reset detached from the gradient). `SpikeMode::Soft`
//! replaces the threshold with its smooth surrogate primitive end to end,
//! making the whole network differentiable so analytic gradients can be
//! verified against finite differences.

pub mod dataset;
pub mod experiment;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::{Scalar, Tensor};

pub const DELAY_EPS: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum SnnError {
    #[error("membrane time constant must exceed 1 time step, got {0}")]
    BadTau(f64),
    #[error("delay {0} out of [0, {1}]")]
    DelayOutOfRange(f64, f64),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// Leaky integrate-and-fire parameters. `threshold: None` models the
/// readout convention of an infinite threshold: the neuron never spikes
/// and never resets.
#[derive(Clone, Copy, Debug)]
pub struct LifConfig {
    pub tau: f64,
    pub threshold: Option<f64>,
    pub surrogate_alpha: f64,
}

impl LifConfig {
    pub fn hidden(tau: f64, threshold: f64, surrogate_alpha: f64) -> Self {
        Self {
            tau,
            threshold: Some(threshold),
            surrogate_alpha,
        }
    }

    pub fn readout(tau: f64) -> Self {
        Self {
            tau,
            threshold: None,
            surrogate_alpha: 2.0,
        }
    }

    pub fn leak<T: Scalar>(&self) -> T {
        T::from_f64(1.0 - 1.0 / self.tau)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpikeMode {
    Hard,
    Soft,
}

/// Surrogate derivative of the Heaviside step, arctangent family:
/// `alpha / (2 (1 + (pi alpha x / 2)^2))`. Peaks at `alpha / 2`.
pub fn surrogate_heaviside_backward<T: Scalar>(x: T, alpha: T) -> T {
    let half_pi_ax = T::from_f64(std::f64::consts::PI) * alpha * x / T::from_f64(2.0);
    alpha / (T::from_f64(2.0) * (T::one() + half_pi_ax * half_pi_ax))
}

/// Smooth spike primitive whose derivative is
/// [`surrogate_heaviside_backward`]: `atan(pi alpha x / 2) / pi + 1/2`.
pub fn soft_spike<T: Scalar>(x: T, alpha: T) -> T {
    let pi = T::from_f64(std::f64::consts::PI);
    (pi * alpha * x / T::from_f64(2.0)).atan() / pi + T::from_f64(0.5)
}

/// Cached forward trajectory of a LIF layer over `[B, C, T]` input
/// currents: pre-reset membrane potentials and emitted spikes.
#[derive(Clone, Debug)]
pub struct LifRun<T> {
    pub potentials: Tensor<T>,
    pub spikes: Tensor<T>,
}

/// Euler-discretized LIF dynamics: `u[t] = (1 - 1/tau) u'[t-1] + I[t]`,
/// spike when `u >= threshold`, instantaneous reset to 0 (`u' = u (1-S)`).
pub fn lif_forward<T: Scalar>(
    cfg: &LifConfig,
    input: &Tensor<T>,
    mode: SpikeMode,
) -> Result<LifRun<T>, SnnError> {
    if cfg.tau <= 1.0 {
        return Err(SnnError::BadTau(cfg.tau));
    }
    if input.ndim() != 3 {
        return Err(SnnError::ShapeMismatch(format!(
            "LIF input must be [B, C, T], got {:?}",
            input.shape()
        )));
    }
    let (b, c, t_len) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let leak: T = cfg.leak();
    let alpha = T::from_f64(cfg.surrogate_alpha);
    let mut potentials = Tensor::zeros(input.shape()).unwrap();
    let mut spikes = Tensor::zeros(input.shape()).unwrap();
    for series in 0..b * c {
        let base = series * t_len;
        let mut carried = T::zero();
        for t in 0..t_len {
            let u = leak * carried + input.data()[base + t];
            potentials.data_mut()[base + t] = u;
            match cfg.threshold {
                None => {
                    carried = u;
                }
                Some(theta) => {
                    let theta = T::from_f64(theta);
                    let s = match mode {
                        SpikeMode::Hard => {
                            if u >= theta {
                                T::one()
                            } else {
                                T::zero()
                            }
                        }
                        SpikeMode::Soft => soft_spike(u - theta, alpha),
                    };
                    spikes.data_mut()[base + t] = s;
                    carried = u * (T::one() - s);
                }
            }
        }
    }
    Ok(LifRun { potentials, spikes })
}

/// Backpropagation through the LIF recursion. `grad_spikes` flows into
/// the emitted spikes, `grad_potentials` directly into the pre-reset
/// potentials (used by the readout). In `Hard` mode the threshold uses
/// the surrogate derivative and the reset factor `(1 - S)` is treated as
/// a constant; in `Soft` mode the exact chain rule through the smooth
/// spike and the multiplicative reset is applied.
pub fn lif_backward<T: Scalar>(
    cfg: &LifConfig,
    run: &LifRun<T>,
    grad_spikes: Option<&Tensor<T>>,
    grad_potentials: Option<&Tensor<T>>,
    mode: SpikeMode,
) -> Tensor<T> {
    let shape = run.potentials.shape();
    let t_len = shape[2];
    let series_count = shape[0] * shape[1];
    let leak: T = cfg.leak();
    let alpha = T::from_f64(cfg.surrogate_alpha);
    let mut grad_input = Tensor::zeros(shape).unwrap();
    for series in 0..series_count {
        let base = series * t_len;
        // acc holds dL/d(carried value after step t), i.e. the gradient
        // arriving from step t+1 through u[t+1] = leak * carried + I.
        let mut acc = T::zero();
        for t in (0..t_len).rev() {
            let mut g_u = T::zero();
            if let Some(gp) = grad_potentials {
                g_u += gp.data()[base + t];
            }
            match cfg.threshold {
                None => {
                    // No reset: the carried value is u itself.
                    g_u += acc;
                }
                Some(theta) => {
                    let u = run.potentials.data()[base + t];
                    let s = run.spikes.data()[base + t];
                    let d_spike = surrogate_heaviside_backward(u - T::from_f64(theta), alpha);
                    if let Some(gs) = grad_spikes {
                        g_u += gs.data()[base + t] * d_spike;
                    }
                    // carried = u (1 - S).
                    let reset_factor = match mode {
                        SpikeMode::Hard => T::one() - s,
                        SpikeMode::Soft => (T::one() - s) - u * d_spike,
                    };
                    g_u += acc * reset_factor;
                }
            }
            grad_input.data_mut()[base + t] = g_u;
            acc = leak * g_u;
        }
    }
    grad_input
}

/// Feedforward synaptic layer with per-synapse weight and real-valued
/// delay, realized as a 1-d temporal convolution with a Gaussian kernel
/// of shared standard deviation `sigma`, left zero-padded by `t_d - 1`.
#[derive(Clone, Debug)]
pub struct DelayLayer<T> {
    pub weights: Tensor<T>,
    pub delays: Tensor<T>,
    pub sigma: T,
    pub t_d: usize,
    pub mask: Option<Tensor<T>>,
}

/// Gradients of one delay layer plus the gradient w.r.t. its input.
#[derive(Clone, Debug)]
pub struct DelayGrads<T> {
    pub grad_weights: Tensor<T>,
    pub grad_delays: Tensor<T>,
    pub grad_input: Tensor<T>,
}

impl<T: Scalar> DelayLayer<T> {
    pub fn new(weights: Tensor<T>, delays: Tensor<T>, sigma: T, t_d: usize) -> Result<Self, SnnError> {
        if weights.ndim() != 2 || delays.shape() != weights.shape() {
            return Err(SnnError::ShapeMismatch(format!(
                "weights {:?} vs delays {:?}",
                weights.shape(),
                delays.shape()
            )));
        }
        for &d in delays.data() {
            let v = d.to_f64();
            if !(0.0..=(t_d - 1) as f64).contains(&v) {
                return Err(SnnError::DelayOutOfRange(v, (t_d - 1) as f64));
            }
        }
        Ok(Self {
            weights,
            delays,
            sigma,
            t_d,
            mask: None,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    fn masked(&self, syn: usize) -> bool {
        self.mask
            .as_ref()
            .map(|m| m.data()[syn] == T::zero())
            .unwrap_or(false)
    }

    /// Applies a binary connectivity mask, zeroing the masked weights.
    pub fn set_mask(&mut self, mask: Tensor<T>) -> Result<(), SnnError> {
        if mask.shape() != self.weights.shape() {
            return Err(SnnError::ShapeMismatch(format!(
                "mask {:?} vs weights {:?}",
                mask.shape(),
                self.weights.shape()
            )));
        }
        for (w, &m) in self.weights.data_mut().iter_mut().zip(mask.data()) {
            if m == T::zero() {
                *w = T::zero();
            }
        }
        self.mask = Some(mask);
        Ok(())
    }

    /// Clamps every delay into `[0, t_d - 1]`.
    pub fn clamp_delays(&mut self) {
        let hi = T::from_f64((self.t_d - 1) as f64);
        for d in self.delays.data_mut() {
            if *d < T::zero() {
                *d = T::zero();
            } else if *d > hi {
                *d = hi;
            }
        }
    }

    /// Continuous Gaussian kernels `[out, in, t_d]`:
    /// `k[n] = (w / c) exp(-((n - t_d + d + 1) / sigma)^2 / 2)` with
    /// `c = eps + sum_n exp(...)`.
    pub fn kernels(&self) -> Tensor<T> {
        let (out, input) = (self.out_channels(), self.in_channels());
        let mut k = Tensor::zeros(&[out, input, self.t_d]).unwrap();
        let eps = T::from_f64(DELAY_EPS);
        let half = T::from_f64(0.5);
        for syn in 0..out * input {
            if self.masked(syn) {
                continue;
            }
            let w = self.weights.data()[syn];
            let d = self.delays.data()[syn];
            let center = T::from_f64((self.t_d - 1) as f64) - d;
            let mut c = eps;
            let base = syn * self.t_d;
            for n in 0..self.t_d {
                let z = (T::from_f64(n as f64) - center) / self.sigma;
                let e = (-half * z * z).exp();
                k.data_mut()[base + n] = e;
                c += e;
            }
            for n in 0..self.t_d {
                k.data_mut()[base + n] = w * k.data()[base + n] / c;
            }
        }
        k
    }

    /// Convolves `[B, in, T]` spike trains with the continuous kernels,
    /// summing over inputs: output `[B, out, T]`.
    pub fn forward(&self, s_in: &Tensor<T>) -> Result<Tensor<T>, SnnError> {
        let kernels = self.kernels();
        self.forward_with_kernels(s_in, &kernels)
    }

    fn forward_with_kernels(
        &self,
        s_in: &Tensor<T>,
        kernels: &Tensor<T>,
    ) -> Result<Tensor<T>, SnnError> {
        if s_in.ndim() != 3 || s_in.shape()[1] != self.in_channels() {
            return Err(SnnError::ShapeMismatch(format!(
                "input {:?}, expected [B, {}, T]",
                s_in.shape(),
                self.in_channels()
            )));
        }
        let (batch, input, t_len) = (s_in.shape()[0], s_in.shape()[1], s_in.shape()[2]);
        let out = self.out_channels();
        let mut result = Tensor::zeros(&[batch, out, t_len]).unwrap();
        let pad = self.t_d - 1;
        for b in 0..batch {
            for o in 0..out {
                let dst_base = (b * out + o) * t_len;
                for i in 0..input {
                    let syn = o * input + i;
                    if self.masked(syn) {
                        continue;
                    }
                    let src_base = (b * input + i) * t_len;
                    let k_base = syn * self.t_d;
                    for n in 0..self.t_d {
                        let k = kernels.data()[k_base + n];
                        if k == T::zero() {
                            continue;
                        }
                        // source index t + n - (t_d - 1); valid from t0 on
                        let t0 = pad - n;
                        for t in t0..t_len {
                            result.data_mut()[dst_base + t] +=
                                k * s_in.data()[src_base + t - t0];
                        }
                    }
                }
            }
        }
        Ok(result)
    }

    /// Gradients of a scalar objective through the layer: weight and
    /// delay gradients (including the normalizer) and the input gradient.
    pub fn backward(&self, s_in: &Tensor<T>, grad_out: &Tensor<T>) -> Result<DelayGrads<T>, SnnError> {
        let (batch, input, t_len) = (s_in.shape()[0], s_in.shape()[1], s_in.shape()[2]);
        let out = self.out_channels();
        if grad_out.shape() != [batch, out, t_len] {
            return Err(SnnError::ShapeMismatch(format!(
                "grad_out {:?}, expected [{batch}, {out}, {t_len}]",
                grad_out.shape()
            )));
        }
        let eps = T::from_f64(DELAY_EPS);
        let half = T::from_f64(0.5);
        let pad = self.t_d - 1;
        let mut grad_w = Tensor::zeros(self.weights.shape()).unwrap();
        let mut grad_d = Tensor::zeros(self.delays.shape()).unwrap();
        let mut grad_in = Tensor::zeros(s_in.shape()).unwrap();

        let mut e = vec![T::zero(); self.t_d];
        let mut de = vec![T::zero(); self.t_d];
        let mut corr = vec![T::zero(); self.t_d];
        for o in 0..out {
            for i in 0..input {
                let syn = o * input + i;
                if self.masked(syn) {
                    continue;
                }
                let w = self.weights.data()[syn];
                let d = self.delays.data()[syn];
                let center = T::from_f64(pad as f64) - d;
                let inv_s2 = T::one() / (self.sigma * self.sigma);
                let mut c = eps;
                let mut dc = T::zero();
                for n in 0..self.t_d {
                    let x = T::from_f64(n as f64) - center; // = n - t_d + 1 + d
                    let v = (-half * x * x * inv_s2).exp();
                    e[n] = v;
                    // d x / d delay = +1, so de/dd = -x e / sigma^2.
                    de[n] = -x * v * inv_s2;
                    c += v;
                    dc += de[n];
                }
                // Cross-correlation of grad_out with the input at each tap.
                for n in 0..self.t_d {
                    let mut acc = T::zero();
                    let t0 = pad - n;
                    for b in 0..batch {
                        let g_base = (b * out + o) * t_len;
                        let s_base = (b * input + i) * t_len;
                        for t in t0..t_len {
                            acc += grad_out.data()[g_base + t] * s_in.data()[s_base + t - t0];
                        }
                    }
                    corr[n] = acc;
                }
                let mut gw = T::zero();
                let mut gd = T::zero();
                for n in 0..self.t_d {
                    gw += e[n] / c * corr[n];
                    gd += w * (de[n] * c - e[n] * dc) / (c * c) * corr[n];
                }
                grad_w.data_mut()[syn] = gw;
                grad_d.data_mut()[syn] = gd;

                // Input gradient through the fixed kernel values.
                for n in 0..self.t_d {
                    let k = w * e[n] / c;
                    if k == T::zero() {
                        continue;
                    }
                    let t0 = pad - n;
                    for b in 0..batch {
                        let g_base = (b * out + o) * t_len;
                        let s_base = (b * input + i) * t_len;
                        for t in t0..t_len {
                            grad_in.data_mut()[s_base + t - t0] += k * grad_out.data()[g_base + t];
                        }
                    }
                }
            }
        }
        Ok(DelayGrads {
            grad_weights: grad_w,
            grad_delays: grad_d,
            grad_input: grad_in,
        })
    }

    /// Tap index of the rounded delay: `t_d - round(d) - 1`, rounding
    /// half away from zero.
    pub fn tap_index(&self, o: usize, i: usize) -> usize {
        let d = self.delays.at(&[o, i]).to_f64().round() as usize;
        self.t_d - 1 - d.min(self.t_d - 1)
    }

    /// Converts to the sparse single-tap form used at evaluation time.
    pub fn discretize(&self) -> DiscreteDelayLayer<T> {
        let (out, input) = (self.out_channels(), self.in_channels());
        let mut taps = Vec::with_capacity(out * input);
        for o in 0..out {
            for i in 0..input {
                taps.push(self.tap_index(o, i));
            }
        }
        DiscreteDelayLayer {
            weights: self.weights.clone(),
            taps,
            t_d: self.t_d,
            mask: self.mask.clone(),
        }
    }
}

/// Sparse synapse layer: one tap per connection, the exact discrete-delay
/// semantics `I[t] += w * S[t - d]`.
#[derive(Clone, Debug)]
pub struct DiscreteDelayLayer<T> {
    pub weights: Tensor<T>,
    pub taps: Vec<usize>,
    pub t_d: usize,
    pub mask: Option<Tensor<T>>,
}

impl<T: Scalar> DiscreteDelayLayer<T> {
    pub fn forward(&self, s_in: &Tensor<T>) -> Result<Tensor<T>, SnnError> {
        let (out, input) = (self.weights.shape()[0], self.weights.shape()[1]);
        if s_in.ndim() != 3 || s_in.shape()[1] != input {
            return Err(SnnError::ShapeMismatch(format!(
                "input {:?}, expected [B, {input}, T]",
                s_in.shape()
            )));
        }
        let (batch, t_len) = (s_in.shape()[0], s_in.shape()[2]);
        let mut result = Tensor::zeros(&[batch, out, t_len]).unwrap();
        let pad = self.t_d - 1;
        for b in 0..batch {
            for o in 0..out {
                let dst_base = (b * out + o) * t_len;
                for i in 0..input {
                    let syn = o * input + i;
                    if let Some(m) = &self.mask {
                        if m.data()[syn] == T::zero() {
                            continue;
                        }
                    }
                    let w = self.weights.data()[syn];
                    if w == T::zero() {
                        continue;
                    }
                    let n = self.taps[syn];
                    let t0 = pad - n; // the delay in time steps
                    let src_base = (b * input + i) * t_len;
                    for t in t0..t_len {
                        result.data_mut()[dst_base + t] += w * s_in.data()[src_base + t - t0];
                    }
                }
            }
        }
        Ok(result)
    }
}

/// Batch normalization over `[B, C, T]`, per channel, with learnable
/// scale and shift and running statistics for evaluation.
#[derive(Clone, Debug)]
pub struct BatchNorm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
}

/// Cached normalized activations and batch statistics for backward.
#[derive(Clone, Debug)]
pub struct BnCache<T> {
    pub x_hat: Tensor<T>,
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(&[channels], T::one()).unwrap(),
            beta: Tensor::zeros(&[channels]).unwrap(),
            running_mean: Tensor::zeros(&[channels]).unwrap(),
            running_var: Tensor::full(&[channels], T::one()).unwrap(),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    /// Training-phase forward using batch statistics. Does not touch the
    /// running statistics; pass the returned cache to
    /// [`Self::update_running`] when training.
    pub fn forward_train(&self, x: &Tensor<T>) -> (Tensor<T>, BnCache<T>) {
        let (b, c, t_len) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let n = (b * t_len) as f64;
        let mut mean = Tensor::zeros(&[c]).unwrap();
        let mut var = Tensor::zeros(&[c]).unwrap();
        for ch in 0..c {
            let mut acc = T::zero();
            for bi in 0..b {
                let base = (bi * c + ch) * t_len;
                for t in 0..t_len {
                    acc += x.data()[base + t];
                }
            }
            let mu = acc / T::from_f64(n);
            mean.data_mut()[ch] = mu;
            let mut acc2 = T::zero();
            for bi in 0..b {
                let base = (bi * c + ch) * t_len;
                for t in 0..t_len {
                    let d = x.data()[base + t] - mu;
                    acc2 += d * d;
                }
            }
            var.data_mut()[ch] = acc2 / T::from_f64(n);
        }
        let mut y = Tensor::zeros(x.shape()).unwrap();
        let mut x_hat = Tensor::zeros(x.shape()).unwrap();
        for ch in 0..c {
            let inv_std = T::one() / (var.data()[ch] + T::from_f64(self.eps)).sqrt();
            let mu = mean.data()[ch];
            let g = self.gamma.data()[ch];
            let be = self.beta.data()[ch];
            for bi in 0..b {
                let base = (bi * c + ch) * t_len;
                for t in 0..t_len {
                    let xh = (x.data()[base + t] - mu) * inv_std;
                    x_hat.data_mut()[base + t] = xh;
                    y.data_mut()[base + t] = g * xh + be;
                }
            }
        }
        (y, BnCache { x_hat, mean, var })
    }

    pub fn update_running(&mut self, cache: &BnCache<T>) {
        let mom = T::from_f64(self.momentum);
        let keep = T::one() - mom;
        for ch in 0..self.running_mean.len() {
            self.running_mean.data_mut()[ch] =
                keep * self.running_mean.data()[ch] + mom * cache.mean.data()[ch];
            self.running_var.data_mut()[ch] =
                keep * self.running_var.data()[ch] + mom * cache.var.data()[ch];
        }
    }

    pub fn forward_eval(&self, x: &Tensor<T>) -> Tensor<T> {
        let (b, c, t_len) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let mut y = Tensor::zeros(x.shape()).unwrap();
        for ch in 0..c {
            let inv_std =
                T::one() / (self.running_var.data()[ch] + T::from_f64(self.eps)).sqrt();
            let mu = self.running_mean.data()[ch];
            let g = self.gamma.data()[ch];
            let be = self.beta.data()[ch];
            for bi in 0..b {
                let base = (bi * c + ch) * t_len;
                for t in 0..t_len {
                    y.data_mut()[base + t] = g * (x.data()[base + t] - mu) * inv_std + be;
                }
            }
        }
        y
    }

    /// Backward through the batch-statistics normalization.
    pub fn backward(
        &self,
        cache: &BnCache<T>,
        grad_y: &Tensor<T>,
    ) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
        let shape = cache.x_hat.shape();
        let (b, c, t_len) = (shape[0], shape[1], shape[2]);
        let n = T::from_f64((b * t_len) as f64);
        let mut grad_x = Tensor::zeros(shape).unwrap();
        let mut grad_gamma = Tensor::zeros(&[c]).unwrap();
        let mut grad_beta = Tensor::zeros(&[c]).unwrap();
        for ch in 0..c {
            let inv_std = T::one() / (cache.var.data()[ch] + T::from_f64(self.eps)).sqrt();
            let g = self.gamma.data()[ch];
            let mut sum_dy = T::zero();
            let mut sum_dy_xhat = T::zero();
            for bi in 0..b {
                let base = (bi * c + ch) * t_len;
                for t in 0..t_len {
                    let dy = grad_y.data()[base + t];
                    sum_dy += dy;
                    sum_dy_xhat += dy * cache.x_hat.data()[base + t];
                }
            }
            grad_gamma.data_mut()[ch] = sum_dy_xhat;
            grad_beta.data_mut()[ch] = sum_dy;
            let mean_dy = sum_dy / n;
            let mean_dy_xhat = sum_dy_xhat / n;
            for bi in 0..b {
                let base = (bi * c + ch) * t_len;
                for t in 0..t_len {
                    let dy = grad_y.data()[base + t];
                    let xh = cache.x_hat.data()[base + t];
                    grad_x.data_mut()[base + t] = g * inv_std * (dy - mean_dy - xh * mean_dy_xhat);
                }
            }
        }
        (grad_x, grad_gamma, grad_beta)
    }
}

/// Inverted dropout with a cached mask.
pub fn dropout_forward<T: Scalar>(
    x: &Tensor<T>,
    rate: f64,
    rng: &mut ChaCha8Rng,
) -> (Tensor<T>, Tensor<T>) {
    let keep = 1.0 - rate;
    let scale = T::from_f64(1.0 / keep);
    let mut mask = Tensor::zeros(x.shape()).unwrap();
    let mut y = Tensor::zeros(x.shape()).unwrap();
    for i in 0..x.len() {
        if rng.random_range(0.0..1.0) < keep {
            mask.data_mut()[i] = scale;
            y.data_mut()[i] = x.data()[i] * scale;
        }
    }
    (y, mask)
}

pub fn dropout_backward<T: Scalar>(grad_y: &Tensor<T>, mask: &Tensor<T>) -> Tensor<T> {
    let mut g = Tensor::zeros(grad_y.shape()).unwrap();
    for i in 0..g.len() {
        g.data_mut()[i] = grad_y.data()[i] * mask.data()[i];
    }
    g
}

/// Readout and loss for one sample: per-step softmax of the readout
/// potentials, summed over time, then a second softmax under
/// cross-entropy (both softmaxes applied, matching the training
/// objective as stated). Returns the loss and its gradient w.r.t. the
/// potentials.
pub fn readout_and_loss<T: Scalar>(
    potentials: &Tensor<T>,
    label: usize,
) -> Result<(f64, Tensor<T>), SnnError> {
    if potentials.ndim() != 2 {
        return Err(SnnError::ShapeMismatch(format!(
            "readout potentials must be [classes, T], got {:?}",
            potentials.shape()
        )));
    }
    let (classes, t_len) = (potentials.shape()[0], potentials.shape()[1]);
    if label >= classes {
        return Err(SnnError::ShapeMismatch(format!(
            "label {label} out of {classes} classes"
        )));
    }
    // out[c, t] = softmax over classes at each step.
    let mut out = Tensor::zeros(&[classes, t_len]).unwrap();
    let mut y_hat = vec![T::zero(); classes];
    for t in 0..t_len {
        let mut max = T::from_f64(f64::NEG_INFINITY);
        for c in 0..classes {
            let v = potentials.at(&[c, t]);
            if v > max {
                max = v;
            }
        }
        let mut denom = T::zero();
        for c in 0..classes {
            denom += (potentials.at(&[c, t]) - max).exp();
        }
        for c in 0..classes {
            let o = (potentials.at(&[c, t]) - max).exp() / denom;
            out.set(&[c, t], o);
            y_hat[c] += o;
        }
    }
    // q = softmax(y_hat); loss = -log q[label].
    let mut max = T::from_f64(f64::NEG_INFINITY);
    for &v in &y_hat {
        if v > max {
            max = v;
        }
    }
    let mut denom = T::zero();
    for &v in &y_hat {
        denom += (v - max).exp();
    }
    let q: Vec<T> = y_hat.iter().map(|&v| (v - max).exp() / denom).collect();
    let loss = -(q[label].to_f64().max(f64::MIN_POSITIVE)).ln();

    // dL/dy_hat = q - onehot(label); chain through the per-step softmax.
    let dl_dy: Vec<T> = (0..classes)
        .map(|c| q[c] - if c == label { T::one() } else { T::zero() })
        .collect();
    let mut grad_u = Tensor::zeros(&[classes, t_len]).unwrap();
    for t in 0..t_len {
        let mut dot = T::zero();
        for c in 0..classes {
            dot += dl_dy[c] * out.at(&[c, t]);
        }
        for c in 0..classes {
            let o = out.at(&[c, t]);
            grad_u.set(&[c, t], o * (dl_dy[c] - dot));
        }
    }
    Ok((loss, grad_u))
}

/// Class prediction: argmax of the time-summed per-step softmax.
pub fn readout_predict<T: Scalar>(potentials: &Tensor<T>) -> usize {
    let (classes, t_len) = (potentials.shape()[0], potentials.shape()[1]);
    let mut y_hat = vec![T::zero(); classes];
    for t in 0..t_len {
        let mut max = T::from_f64(f64::NEG_INFINITY);
        for c in 0..classes {
            let v = potentials.at(&[c, t]);
            if v > max {
                max = v;
            }
        }
        let mut denom = T::zero();
        for c in 0..classes {
            denom += (potentials.at(&[c, t]) - max).exp();
        }
        for c in 0..classes {
            y_hat[c] += (potentials.at(&[c, t]) - max).exp() / denom;
        }
    }
    let mut best = 0;
    for c in 1..classes {
        if y_hat[c] > y_hat[best] {
            best = c;
        }
    }
    best
}

/// Network hyperparameters.
#[derive(Clone, Debug)]
pub struct SnnModelConfig {
    pub in_channels: usize,
    pub hidden: Vec<usize>,
    pub n_classes: usize,
    pub t_d: usize,
    pub tau: f64,
    pub threshold: f64,
    pub surrogate_alpha: f64,
    pub dropout: f64,
}

/// One hidden block: delay synapses, batch norm, LIF.
#[derive(Clone, Debug)]
pub struct HiddenLayer<T> {
    pub delay: DelayLayer<T>,
    pub bn: BatchNorm<T>,
}

/// Feedforward SNN: hidden blocks plus a delay-synapse readout into
/// non-spiking LIF neurons.
#[derive(Clone, Debug)]
pub struct SnnModel<T> {
    pub cfg: SnnModelConfig,
    pub hidden: Vec<HiddenLayer<T>>,
    pub readout: DelayLayer<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KernelMode {
    Continuous,
    Discrete,
}

/// Everything backward needs from one forward pass.
pub struct ModelCache<T> {
    pub layer_inputs: Vec<Tensor<T>>,
    pub currents: Vec<Tensor<T>>,
    pub bn_caches: Vec<BnCache<T>>,
    pub lif_runs: Vec<LifRun<T>>,
    pub dropout_masks: Vec<Option<Tensor<T>>>,
    pub readout_input: Tensor<T>,
    pub readout_run: LifRun<T>,
}

/// Per-tensor gradients of the model parameters.
pub struct ModelGrads<T> {
    pub hidden_w: Vec<Tensor<T>>,
    pub hidden_d: Vec<Tensor<T>>,
    pub hidden_gamma: Vec<Tensor<T>>,
    pub hidden_beta: Vec<Tensor<T>>,
    pub readout_w: Tensor<T>,
    pub readout_d: Tensor<T>,
}

impl<T: Scalar> SnnModel<T> {
    /// Builds the model with seeded initialization: weights from a
    /// centered normal scaled by 1/sqrt(fan_in), delays uniform over
    /// `[0, t_d - 1]`.
    pub fn init(cfg: SnnModelConfig, sigma: T, rng: &mut ChaCha8Rng) -> Self {
        use rand_distr::{Distribution, Normal};
        let mut sizes = vec![cfg.in_channels];
        sizes.extend_from_slice(&cfg.hidden);
        let mut hidden = Vec::new();
        for l in 0..cfg.hidden.len() {
            let (out, input) = (sizes[l + 1], sizes[l]);
            let std = (1.0 / input as f64).sqrt();
            let normal = Normal::new(0.0, std).unwrap();
            let weights =
                Tensor::from_fn(&[out, input], |_| T::from_f64(normal.sample(rng))).unwrap();
            let delays = crate::train::init_delays(rng, &[out, input], cfg.t_d);
            let delay = DelayLayer::new(weights, delays, sigma, cfg.t_d).unwrap();
            hidden.push(HiddenLayer {
                delay,
                bn: BatchNorm::new(out),
            });
        }
        let (out, input) = (cfg.n_classes, *sizes.last().unwrap());
        let std = (1.0 / input as f64).sqrt();
        let normal = Normal::new(0.0, std).unwrap();
        let weights = Tensor::from_fn(&[out, input], |_| T::from_f64(normal.sample(rng))).unwrap();
        let delays = crate::train::init_delays(rng, &[out, input], cfg.t_d);
        let readout = DelayLayer::new(weights, delays, sigma, cfg.t_d).unwrap();
        Self {
            cfg,
            hidden,
            readout,
        }
    }

    pub fn set_sigma(&mut self, sigma: T) {
        for layer in &mut self.hidden {
            layer.delay.sigma = sigma;
        }
        self.readout.sigma = sigma;
    }

    pub fn hidden_lif(&self) -> LifConfig {
        LifConfig::hidden(self.cfg.tau, self.cfg.threshold, self.cfg.surrogate_alpha)
    }

    pub fn readout_lif(&self) -> LifConfig {
        LifConfig::readout(self.cfg.tau)
    }

    /// Full forward pass over a `[B, C_in, T]` batch; returns the readout
    /// membrane potentials `[B, classes, T]` and the backward cache.
    pub fn forward(
        &self,
        x: &Tensor<T>,
        spike_mode: SpikeMode,
        kernel_mode: KernelMode,
        phase: Phase,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Tensor<T>, ModelCache<T>), SnnError> {
        let mut layer_inputs = Vec::new();
        let mut currents = Vec::new();
        let mut bn_caches = Vec::new();
        let mut lif_runs = Vec::new();
        let mut dropout_masks = Vec::new();
        let hidden_cfg = self.hidden_lif();
        let mut rng = dropout_rng;
        let mut s = x.clone();
        for layer in &self.hidden {
            layer_inputs.push(s.clone());
            let current = match kernel_mode {
                KernelMode::Continuous => layer.delay.forward(&s)?,
                KernelMode::Discrete => layer.delay.discretize().forward(&s)?,
            };
            currents.push(current.clone());
            let (normed, bn_cache) = match phase {
                Phase::Train => layer.bn.forward_train(&current),
                Phase::Eval => {
                    let y = layer.bn.forward_eval(&current);
                    // Cache is unused in eval but keeps indices aligned.
                    let dummy = BnCache {
                        x_hat: Tensor::zeros(current.shape()).unwrap(),
                        mean: Tensor::zeros(&[current.shape()[1]]).unwrap(),
                        var: Tensor::zeros(&[current.shape()[1]]).unwrap(),
                    };
                    (y, dummy)
                }
            };
            bn_caches.push(bn_cache);
            let run = lif_forward(&hidden_cfg, &normed, spike_mode)?;
            let mut spikes = run.spikes.clone();
            lif_runs.push(run);
            let mask = if phase == Phase::Train && self.cfg.dropout > 0.0 {
                if let Some(r) = rng.as_deref_mut() {
                    let (dropped, mask) = dropout_forward(&spikes, self.cfg.dropout, r);
                    spikes = dropped;
                    Some(mask)
                } else {
                    None
                }
            } else {
                None
            };
            dropout_masks.push(mask);
            s = spikes;
        }
        let readout_input = s;
        let current = match kernel_mode {
            KernelMode::Continuous => self.readout.forward(&readout_input)?,
            KernelMode::Discrete => self.readout.discretize().forward(&readout_input)?,
        };
        let readout_run = lif_forward(&self.readout_lif(), &current, spike_mode)?;
        let potentials = readout_run.potentials.clone();
        Ok((
            potentials,
            ModelCache {
                layer_inputs,
                currents,
                bn_caches,
                lif_runs,
                dropout_masks,
                readout_input,
                readout_run,
            },
        ))
    }

    /// Backward from the gradient of the readout potentials.
    pub fn backward(
        &self,
        cache: &ModelCache<T>,
        grad_potentials: &Tensor<T>,
        spike_mode: SpikeMode,
    ) -> Result<ModelGrads<T>, SnnError> {
        let readout_cfg = self.readout_lif();
        let grad_current = lif_backward(
            &readout_cfg,
            &cache.readout_run,
            None,
            Some(grad_potentials),
            spike_mode,
        );
        let readout_grads = self.readout.backward(&cache.readout_input, &grad_current)?;
        let mut grad_spikes = readout_grads.grad_input;

        let hidden_cfg = self.hidden_lif();
        let n = self.hidden.len();
        let mut hidden_w = vec![Tensor::zeros(&[1]).unwrap(); n];
        let mut hidden_d = vec![Tensor::zeros(&[1]).unwrap(); n];
        let mut hidden_gamma = vec![Tensor::zeros(&[1]).unwrap(); n];
        let mut hidden_beta = vec![Tensor::zeros(&[1]).unwrap(); n];
        for l in (0..n).rev() {
            if let Some(mask) = &cache.dropout_masks[l] {
                grad_spikes = dropout_backward(&grad_spikes, mask);
            }
            let grad_normed = lif_backward(
                &hidden_cfg,
                &cache.lif_runs[l],
                Some(&grad_spikes),
                None,
                spike_mode,
            );
            let (grad_current, g_gamma, g_beta) =
                self.hidden[l].bn.backward(&cache.bn_caches[l], &grad_normed);
            let grads = self.hidden[l]
                .delay
                .backward(&cache.layer_inputs[l], &grad_current)?;
            hidden_w[l] = grads.grad_weights;
            hidden_d[l] = grads.grad_delays;
            hidden_gamma[l] = g_gamma;
            hidden_beta[l] = g_beta;
            grad_spikes = grads.grad_input;
        }
        Ok(ModelGrads {
            hidden_w,
            hidden_d,
            hidden_gamma,
            hidden_beta,
            readout_w: readout_grads.grad_weights,
            readout_d: readout_grads.grad_delays,
        })
    }

    /// Mean loss and accuracy over a batch, plus the per-potential
    /// gradient already scaled by 1/batch.
    pub fn batch_loss(
        &self,
        potentials: &Tensor<T>,
        labels: &[usize],
    ) -> Result<(f64, f64, Tensor<T>), SnnError> {
        let (batch, classes, t_len) = (
            potentials.shape()[0],
            potentials.shape()[1],
            potentials.shape()[2],
        );
        if labels.len() != batch {
            return Err(SnnError::ShapeMismatch(format!(
                "{} labels for batch {batch}",
                labels.len()
            )));
        }
        let mut grad = Tensor::zeros(potentials.shape()).unwrap();
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let scale = T::from_f64(1.0 / batch as f64);
        for b in 0..batch {
            let sample = Tensor::from_vec(
                &[classes, t_len],
                potentials.data()[b * classes * t_len..(b + 1) * classes * t_len].to_vec(),
            )
            .unwrap();
            let (loss, g) = readout_and_loss(&sample, labels[b])?;
            loss_sum += loss;
            if readout_predict(&sample) == labels[b] {
                correct += 1;
            }
            for i in 0..g.len() {
                grad.data_mut()[b * classes * t_len + i] = g.data()[i] * scale;
            }
        }
        Ok((
            loss_sum / batch as f64,
            correct as f64 / batch as f64,
            grad,
        ))
    }
}

/// A small fully differentiable instance for finite-difference checks:
/// soft spikes, batch-statistics normalization, no dropout.
pub struct GradCheckInstance {
    pub model: SnnModel<f64>,
    pub input: Tensor<f64>,
    pub labels: Vec<usize>,
}

pub fn gradcheck_instance(rng: &mut ChaCha8Rng) -> GradCheckInstance {
    let cfg = SnnModelConfig {
        in_channels: 3,
        hidden: vec![4],
        n_classes: 2,
        t_d: 5,
        tau: rng.random_range(2.0..8.0),
        threshold: rng.random_range(0.3..0.9),
        surrogate_alpha: 2.0,
        dropout: 0.0,
    };
    let mut model = SnnModel::<f64>::init(cfg.clone(), rng.random_range(0.8..2.0), rng);
    // Keep delays away from the window ends so tails stay informative.
    for layer in &mut model.hidden {
        for d in layer.delay.delays.data_mut() {
            *d = (*d).clamp(0.5, (cfg.t_d - 1) as f64 - 0.5);
        }
    }
    for d in model.readout.delays.data_mut() {
        *d = (*d).clamp(0.5, (cfg.t_d - 1) as f64 - 0.5);
    }
    let input = Tensor::from_fn(&[2, cfg.in_channels, 12], |_| {
        if rng.random_range(0.0..1.0) < 0.35 {
            1.0
        } else {
            0.0
        }
    })
    .unwrap();
    let labels = vec![rng.random_range(0..2), rng.random_range(0..2)];
    GradCheckInstance {
        model,
        input,
        labels,
    }
}

impl GradCheckInstance {
    fn loss_of(&self, model: &SnnModel<f64>) -> f64 {
        let (potentials, _) = model
            .forward(
                &self.input,
                SpikeMode::Soft,
                KernelMode::Continuous,
                Phase::Train,
                None,
            )
            .unwrap();
        let (loss, _, _) = model.batch_loss(&potentials, &self.labels).unwrap();
        loss
    }

    fn flatten(model: &SnnModel<f64>) -> Vec<f64> {
        let mut flat = Vec::new();
        for layer in &model.hidden {
            flat.extend_from_slice(layer.delay.weights.data());
            flat.extend_from_slice(layer.delay.delays.data());
            flat.extend_from_slice(layer.bn.gamma.data());
            flat.extend_from_slice(layer.bn.beta.data());
        }
        flat.extend_from_slice(model.readout.weights.data());
        flat.extend_from_slice(model.readout.delays.data());
        flat
    }

    fn unflatten(model: &mut SnnModel<f64>, flat: &[f64]) {
        let mut pos = 0;
        let mut take = |n: usize| {
            let s = &flat[pos..pos + n];
            pos += n;
            s.to_vec()
        };
        for layer in &mut model.hidden {
            let n = layer.delay.weights.len();
            layer.delay.weights.data_mut().copy_from_slice(&take(n));
            let n = layer.delay.delays.len();
            layer.delay.delays.data_mut().copy_from_slice(&take(n));
            let n = layer.bn.gamma.len();
            layer.bn.gamma.data_mut().copy_from_slice(&take(n));
            let n = layer.bn.beta.len();
            layer.bn.beta.data_mut().copy_from_slice(&take(n));
        }
        let n = model.readout.weights.len();
        model.readout.weights.data_mut().copy_from_slice(&take(n));
        let n = model.readout.delays.len();
        model.readout.delays.data_mut().copy_from_slice(&take(n));
    }

    /// Analytic gradient, flattened parameters, and a loss closure over
    /// flat parameter vectors for the numeric side.
    pub fn analytic_and_flat(&self) -> (Vec<f64>, Vec<f64>, impl Fn(&[f64]) -> f64 + '_) {
        let (potentials, cache) = self
            .model
            .forward(
                &self.input,
                SpikeMode::Soft,
                KernelMode::Continuous,
                Phase::Train,
                None,
            )
            .unwrap();
        let (_, _, grad_pot) = self.model.batch_loss(&potentials, &self.labels).unwrap();
        let grads = self
            .model
            .backward(&cache, &grad_pot, SpikeMode::Soft)
            .unwrap();
        let mut analytic = Vec::new();
        for l in 0..self.model.hidden.len() {
            analytic.extend_from_slice(grads.hidden_w[l].data());
            analytic.extend_from_slice(grads.hidden_d[l].data());
            analytic.extend_from_slice(grads.hidden_gamma[l].data());
            analytic.extend_from_slice(grads.hidden_beta[l].data());
        }
        analytic.extend_from_slice(grads.readout_w.data());
        analytic.extend_from_slice(grads.readout_d.data());
        let flat = Self::flatten(&self.model);
        let eval = move |v: &[f64]| {
            let mut m = self.model.clone();
            Self::unflatten(&mut m, v);
            self.loss_of(&m)
        };
        (analytic, flat, eval)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn rejects_tau_not_above_one() {
        let cfg = LifConfig::hidden(1.0, 1.0, 2.0);
        let x = Tensor::<f64>::zeros(&[1, 1, 3]).unwrap();
        assert!(matches!(
            lif_forward(&cfg, &x, SpikeMode::Hard),
            Err(SnnError::BadTau(_))
        ));
    }

    #[test]
    fn near_unit_tau_is_memoryless() {
        let cfg = LifConfig::hidden(1.0001, 10.0, 2.0);
        let x = Tensor::<f64>::from_vec(&[1, 1, 4], vec![0.5, -0.3, 0.8, 0.1]).unwrap();
        let run = lif_forward(&cfg, &x, SpikeMode::Hard).unwrap();
        for (u, i) in run.potentials.data().iter().zip(x.data()) {
            assert!((u - i).abs() < 1e-3);
        }
    }

    #[test]
    fn constant_threshold_input_spikes_every_step() {
        let cfg = LifConfig::hidden(100.0, 1.0, 2.0);
        let x = Tensor::<f64>::full(&[1, 1, 6], 1.0).unwrap();
        let run = lif_forward(&cfg, &x, SpikeMode::Hard).unwrap();
        assert!(run.spikes.data().iter().all(|&s| s == 1.0));
    }

    #[test]
    fn surrogate_peak_and_tails() {
        assert!((surrogate_heaviside_backward(0.0f64, 2.0) - 1.0).abs() < 1e-15);
        assert!(surrogate_heaviside_backward(1e6f64, 2.0) < 1e-10);
        assert!(surrogate_heaviside_backward(-1e6f64, 2.0) < 1e-10);
    }

    #[test]
    fn surrogate_integrates_to_one() {
        // Trapezoid quadrature of the surrogate over a wide window; the
        // arctangent family has unit mass for every alpha.
        for alpha in [0.5f64, 1.0, 2.0, 4.0] {
            let (lo, hi, n) = (-2000.0, 2000.0, 4_000_000);
            let h = (hi - lo) / n as f64;
            let mut acc = 0.0;
            for i in 0..=n {
                let x = lo + i as f64 * h;
                let w = if i == 0 || i == n { 0.5 } else { 1.0 };
                acc += w * surrogate_heaviside_backward(x, alpha);
            }
            acc *= h;
            assert!((acc - 1.0).abs() < 1e-3, "alpha {alpha}: integral {acc}");
        }
    }

    #[test]
    fn discrete_delay_moves_spike_by_delay() {
        let weights = Tensor::<f64>::from_vec(&[1, 1], vec![1.0]).unwrap();
        let delays = Tensor::<f64>::from_vec(&[1, 1], vec![8.0]).unwrap();
        let layer = DelayLayer::new(weights, delays, 0.5, 10).unwrap();
        let mut s = Tensor::<f64>::zeros(&[1, 1, 20]).unwrap();
        s.set(&[0, 0, 3], 1.0);
        let out = layer.discretize().forward(&s).unwrap();
        for t in 0..20 {
            let expect = if t == 11 { 1.0 } else { 0.0 };
            assert_eq!(out.at(&[0, 0, t]), expect, "t = {t}");
        }
    }

    #[test]
    fn zero_weight_gives_zero_output() {
        let weights = Tensor::<f64>::zeros(&[2, 3]).unwrap();
        let delays = Tensor::<f64>::full(&[2, 3], 2.0).unwrap();
        let layer = DelayLayer::new(weights, delays, 1.0, 5).unwrap();
        let s = Tensor::<f64>::full(&[1, 3, 12], 1.0).unwrap();
        let out = layer.forward(&s).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn delay_layer_matches_dense_conv_oracle() {
        use crate::conv::{conv_forward, ConvSpec};
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (input, t_len, t_d) = (3usize, 20usize, 5usize);
        let weights = Tensor::<f64>::from_fn(&[2, input], |_| rng.random_range(-1.0..1.0)).unwrap();
        let delays =
            Tensor::<f64>::from_fn(&[2, input], |_| rng.random_range(0.0..(t_d - 1) as f64))
                .unwrap();
        let layer = DelayLayer::new(weights, delays, 1.2, t_d).unwrap();
        let s = Tensor::<f64>::from_fn(&[1, input, t_len], |_| {
            if rng.random_range(0.0..1.0) < 0.3 {
                1.0
            } else {
                0.0
            }
        })
        .unwrap();
        let ours = layer.forward(&s).unwrap();

        // Oracle: left-pad by t_d - 1 and run the standard 1-d conv
        // engine over the explicitly constructed kernels.
        let kernels = layer.kernels();
        let mut padded = Tensor::<f64>::zeros(&[1, input, t_len + t_d - 1]).unwrap();
        for c in 0..input {
            for t in 0..t_len {
                let v = s.at(&[0, c, t]);
                padded.set(&[0, c, t_d - 1 + t], v);
            }
        }
        let spec = ConvSpec::plain(&[t_d]);
        let dense = conv_forward(&padded, &kernels, None, &spec).unwrap();
        assert_eq!(dense.shape(), ours.shape());
        for (a, b) in dense.data().iter().zip(ours.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn tap_index_rounding() {
        let weights = Tensor::<f64>::from_vec(&[1, 2], vec![1.0, 1.0]).unwrap();
        let delays = Tensor::<f64>::from_vec(&[1, 2], vec![3.4, 3.5]).unwrap();
        let layer = DelayLayer::new(weights, delays, 0.5, 10).unwrap();
        // round(3.4) = 3 -> tap t_d - 4; round-half-away(3.5) = 4 -> tap t_d - 5.
        assert_eq!(layer.tap_index(0, 0), 6);
        assert_eq!(layer.tap_index(0, 1), 5);
    }

    #[test]
    fn continuous_sigma_half_concentration_bounds_frozen() {
        // With sigma = 0.5 and an integer delay, the normalized Gaussian
        // keeps about 78.6% of its mass on the center tap: the tap-level
        // relative deviation from the discrete kernel is ~0.214 on the
        // center and each immediate neighbor carries ~0.107 of the
        // weight. These bounds were measured once and frozen.
        let weights = Tensor::<f64>::from_vec(&[1, 1], vec![1.0]).unwrap();
        let delays = Tensor::<f64>::from_vec(&[1, 1], vec![4.0]).unwrap();
        let layer = DelayLayer::new(weights, delays, 0.5, 9).unwrap();
        let k = layer.kernels();
        let center = k.at(&[0, 0, 4]);
        assert!((center - 0.7864).abs() < 5e-4, "center {center}");
        let neighbor = k.at(&[0, 0, 5]);
        assert!((neighbor - 0.1064).abs() < 5e-4, "neighbor {neighbor}");
        // For a constant (all-ones) spike train long past the transient,
        // continuous and discrete outputs agree to ~eps because the
        // kernel is normalized.
        let s = Tensor::<f64>::full(&[1, 1, 30], 1.0).unwrap();
        let cont = layer.forward(&s).unwrap();
        let disc = layer.discretize().forward(&s).unwrap();
        let a = cont.at(&[0, 0, 29]);
        let b = disc.at(&[0, 0, 29]);
        assert!((a - b).abs() / b.abs() < 1e-6, "steady state {a} vs {b}");
    }

    #[test]
    fn uniform_potentials_give_log_nclasses_loss() {
        let u = Tensor::<f64>::full(&[5, 7], 0.3).unwrap();
        let (loss, grad) = readout_and_loss(&u, 2).unwrap();
        assert!((loss - (5.0f64).ln()).abs() < 1e-12);
        // Gradient sums to zero across classes at every t.
        for t in 0..7 {
            let mut s = 0.0;
            for c in 0..5 {
                s += grad.at(&[c, t]);
            }
            assert!(s.abs() < 1e-12);
        }
    }

    #[test]
    fn dominating_class_gives_small_loss() {
        let mut u = Tensor::<f64>::zeros(&[3, 10]).unwrap();
        for t in 0..10 {
            u.set(&[0, t], 12.0);
        }
        let (loss, _) = readout_and_loss(&u, 0).unwrap();
        assert!(loss < 0.01, "loss {loss}");
        assert_eq!(readout_predict(&u), 0);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        use crate::gradcheck::{grad_central, rel_err};
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let u = Tensor::<f64>::from_fn(&[4, 6], |_| rng.random_range(-1.0..1.0)).unwrap();
        let (_, grad) = readout_and_loss(&u, 1).unwrap();
        let numeric = grad_central(
            |v| {
                let t = Tensor::from_vec(&[4, 6], v.to_vec()).unwrap();
                readout_and_loss(&t, 1).unwrap().0
            },
            u.data(),
            1e-6,
        );
        for (a, n) in grad.data().iter().zip(&numeric) {
            assert!(rel_err(*a, *n) < 1e-6);
        }
    }

    #[test]
    fn batch_loss_is_mean_of_per_sample_losses() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = SnnModelConfig {
            in_channels: 2,
            hidden: vec![3],
            n_classes: 2,
            t_d: 4,
            tau: 5.0,
            threshold: 0.7,
            surrogate_alpha: 2.0,
            dropout: 0.0,
        };
        let model = SnnModel::<f64>::init(cfg, 1.0, &mut rng);
        let x = Tensor::from_fn(&[3, 2, 10], |_| {
            if rng.random_range(0.0..1.0) < 0.4 {
                1.0
            } else {
                0.0
            }
        })
        .unwrap();
        let labels = vec![0, 1, 0];
        let (pot, _) = model
            .forward(&x, SpikeMode::Hard, KernelMode::Continuous, Phase::Eval, None)
            .unwrap();
        let (mean_loss, _, _) = model.batch_loss(&pot, &labels).unwrap();
        let mut acc = 0.0;
        for b in 0..3 {
            let sample = Tensor::from_vec(
                &[2, 10],
                pot.data()[b * 20..(b + 1) * 20].to_vec(),
            )
            .unwrap();
            acc += readout_and_loss(&sample, labels[b]).unwrap().0;
        }
        assert!((mean_loss - acc / 3.0).abs() < 1e-12);
    }

    #[test]
    fn clamp_delays_is_idempotent_and_bounding() {
        let weights = Tensor::<f64>::zeros(&[1, 2]).unwrap();
        let delays = Tensor::<f64>::from_vec(&[1, 2], vec![0.0, 3.0]).unwrap();
        let mut layer = DelayLayer::new(weights, delays, 1.0, 4).unwrap();
        layer.delays.data_mut()[0] = -2.0;
        layer.delays.data_mut()[1] = 9.5;
        layer.clamp_delays();
        assert_eq!(layer.delays.data(), &[0.0, 3.0]);
        let snapshot = layer.delays.clone();
        layer.clamp_delays();
        assert_eq!(layer.delays, snapshot);
    }
}
