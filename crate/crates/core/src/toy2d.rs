//! Small image classifier built from a strided stem plus stacked
//! depthwise DCLS blocks, trained on a synthetic displaced-pattern task.
//!
//! Each image holds a bright anchor blob and a dimmer satellite blob
//! displaced in one of four directions; the class is the direction. Pixel
//! statistics are identical across classes, so the classifier must learn
//! spatial relations, and its reach is bounded by the dilated kernel
//! size, which is the swept variable.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::conv::{self, ConvError, ConvSpec};
use crate::interp::InterpKind;
use crate::kernel::{self, DclsParams, KernelError};
use crate::tensor::{Scalar, Tensor};
use crate::train::{
    init_positions, position_speed, AdamConfig, AdamState, ParamGroup, TrainError,
};

#[derive(Debug, Error)]
pub enum Toy2dError {
    #[error(transparent)]
    Conv(#[from] ConvError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Clone, Debug)]
pub struct Toy2dDataset<T> {
    pub train: Vec<(Tensor<T>, usize)>,
    pub test: Vec<(Tensor<T>, usize)>,
    pub n_classes: usize,
    pub image_size: usize,
}

/// Four-class displaced-pattern images: a 2x2 anchor blob of intensity 1
/// and a 2x2 satellite of intensity 0.5 placed `distance` pixels east,
/// north, west or south of it, over light Gaussian noise.
pub fn make_displaced_pattern<T: Scalar>(
    seed: u64,
    n_train: usize,
    n_test: usize,
    image_size: usize,
) -> Toy2dDataset<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0f64, 0.05).unwrap();
    let make_split = |count: usize, rng: &mut ChaCha8Rng| {
        let mut out = Vec::with_capacity(count);
        for i in 0..count {
            let class = i % 4;
            let distance = rng.random_range(5..=8i64);
            let (dy, dx) = match class {
                0 => (0i64, distance),
                1 => (-distance, 0),
                2 => (0, -distance),
                _ => (distance, 0),
            };
            let margin = 10usize;
            let ay = rng.random_range(margin..image_size - margin) as i64;
            let ax = rng.random_range(margin..image_size - margin) as i64;
            let (sy, sx) = (ay + dy, ax + dx);
            let mut img = Tensor::<T>::from_fn(&[1, image_size, image_size], |_| {
                T::from_f64(noise.sample(rng))
            })
            .unwrap();
            for oy in 0..2i64 {
                for ox in 0..2i64 {
                    img.set(&[0, (ay + oy) as usize, (ax + ox) as usize], T::one());
                    img.set(
                        &[0, (sy + oy) as usize, (sx + ox) as usize],
                        T::from_f64(0.5),
                    );
                }
            }
            out.push((img, class));
        }
        out
    };
    let train = make_split(n_train, &mut rng);
    let test = make_split(n_test, &mut rng);
    Toy2dDataset {
        train,
        test,
        n_classes: 4,
        image_size,
    }
}

/// One depthwise DCLS convolution layer: a dense kernel is constructed
/// from movable elements and applied with groups = channels and SAME-ish
/// padding.
#[derive(Clone, Debug)]
pub struct DclsConvLayer<T> {
    pub params: DclsParams<T>,
    pub kind: InterpKind,
}

impl<T: Scalar> DclsConvLayer<T> {
    pub fn init(
        channels: usize,
        kernel_count: usize,
        dilated_size: usize,
        kind: InterpKind,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        use rand_distr::Normal;
        let std = (1.0 / kernel_count as f64).sqrt();
        let normal = Normal::new(0.0, std).unwrap();
        let weights = Tensor::from_fn(&[channels, 1, kernel_count], |_| {
            T::from_f64(normal.sample(rng))
        })
        .unwrap();
        let (positions, sigmas) =
            init_positions(rng, kind, &[2, channels, 1, kernel_count]);
        let mut params = DclsParams::new(
            weights,
            positions,
            sigmas,
            vec![dilated_size, dilated_size],
        )
        .unwrap();
        params.clamp_positions();
        Self { params, kind }
    }

    pub fn channels(&self) -> usize {
        self.params.out_channels()
    }

    fn spec(&self) -> ConvSpec {
        let s = self.params.dilated_size[0];
        ConvSpec {
            kernel: vec![s, s],
            stride: vec![1, 1],
            dilation: vec![1, 1],
            padding: vec![s / 2, s / 2],
            groups: self.channels(),
        }
    }

    pub fn construct(&self) -> Result<Tensor<T>, KernelError> {
        match self.kind {
            InterpKind::Bilinear => kernel::construct_bilinear(&self.params),
            _ => kernel::construct_interp(&self.params, self.kind, T::from_f64(kernel::DEFAULT_EPS)),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>), Toy2dError> {
        let mut k = self.construct()?;
        k = k.reshape(
            &[
                self.channels(),
                1,
                self.params.dilated_size[0],
                self.params.dilated_size[1],
            ],
        )
        .unwrap();
        let y = conv::conv_forward(x, &k, None, &self.spec())?;
        Ok((y, k))
    }

    /// Gradients for the construction parameters and the layer input.
    pub fn backward(
        &self,
        x: &Tensor<T>,
        grad_y: &Tensor<T>,
    ) -> Result<(DclsLayerGrads<T>, Tensor<T>), Toy2dError> {
        let spec = self.spec();
        let grad_kernel = conv::conv_backward_weight(x, grad_y, &spec)?;
        let grad_kernel = grad_kernel
            .reshape(&[
                self.channels(),
                1,
                self.params.dilated_size[0],
                self.params.dilated_size[1],
            ])
            .unwrap();
        let grads = match self.kind {
            InterpKind::Bilinear => {
                let g = kernel::backward_bilinear(&self.params, &grad_kernel)?;
                DclsLayerGrads {
                    weights: g.grad_weights,
                    positions: g.grad_positions,
                    sigmas: Tensor::zeros(self.params.sigmas.shape()).unwrap(),
                }
            }
            _ => {
                let g = kernel::backward_interp(
                    &self.params,
                    self.kind,
                    T::from_f64(kernel::DEFAULT_EPS),
                    &grad_kernel,
                )?;
                DclsLayerGrads {
                    weights: g.grad_weights,
                    positions: g.grad_positions,
                    sigmas: g.grad_sigmas,
                }
            }
        };
        let mut k = self.construct()?;
        k = k.reshape(&[
            self.channels(),
            1,
            self.params.dilated_size[0],
            self.params.dilated_size[1],
        ])
        .unwrap();
        let grad_x = conv::conv_backward_input(grad_y, &k, x.shape(), &spec)?;
        Ok((grads, grad_x))
    }
}

#[derive(Clone, Debug)]
pub struct DclsLayerGrads<T> {
    pub weights: Tensor<T>,
    pub positions: Tensor<T>,
    pub sigmas: Tensor<T>,
}

const LEAK: f64 = 0.1;

fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let leak = T::from_f64(LEAK);
    x.map(|v| if v > T::zero() { v } else { v * leak })
}

fn relu_backward<T: Scalar>(x: &Tensor<T>, grad_y: &Tensor<T>) -> Tensor<T> {
    let leak = T::from_f64(LEAK);
    let mut g = Tensor::zeros(x.shape()).unwrap();
    for i in 0..x.len() {
        g.data_mut()[i] = if x.data()[i] > T::zero() {
            grad_y.data()[i]
        } else {
            grad_y.data()[i] * leak
        };
    }
    g
}

/// The classifier: strided stem, two depthwise-DCLS + pointwise blocks,
/// global average pooling, linear head.
#[derive(Clone, Debug)]
pub struct Toy2dModel<T> {
    pub stem_w: Tensor<T>,
    pub stem_b: Tensor<T>,
    pub dcls1: DclsConvLayer<T>,
    pub pw1_w: Tensor<T>,
    pub pw1_b: Tensor<T>,
    pub dcls2: DclsConvLayer<T>,
    pub pw2_w: Tensor<T>,
    pub pw2_b: Tensor<T>,
    pub fc_w: Tensor<T>,
    pub fc_b: Tensor<T>,
    pub n_classes: usize,
}

pub struct Toy2dCache<T> {
    x: Tensor<T>,
    stem_out: Tensor<T>,
    stem_act: Tensor<T>,
    d1_out: Tensor<T>,
    d1_act: Tensor<T>,
    pw1_out: Tensor<T>,
    pw1_act: Tensor<T>,
    d2_out: Tensor<T>,
    d2_act: Tensor<T>,
    pw2_out: Tensor<T>,
    pw2_act: Tensor<T>,
    pooled: Tensor<T>,
    argmax: Vec<usize>,
}

pub struct Toy2dGrads<T> {
    pub stem_w: Tensor<T>,
    pub stem_b: Tensor<T>,
    pub dcls1: DclsLayerGrads<T>,
    pub pw1_w: Tensor<T>,
    pub pw1_b: Tensor<T>,
    pub dcls2: DclsLayerGrads<T>,
    pub pw2_w: Tensor<T>,
    pub pw2_b: Tensor<T>,
    pub fc_w: Tensor<T>,
    pub fc_b: Tensor<T>,
}

const STEM_CHANNELS: usize = 8;
const MID_CHANNELS: usize = 16;

impl<T: Scalar> Toy2dModel<T> {
    pub fn init(
        dilated_size: usize,
        kernel_count: usize,
        kind: InterpKind,
        n_classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let normal = |std: f64, rng: &mut ChaCha8Rng| {
            let n = Normal::new(0.0, std).unwrap();
            n.sample(rng)
        };
        let stem_w = Tensor::from_fn(&[STEM_CHANNELS, 1, 2, 2], |_| {
            T::from_f64(normal(0.5, rng))
        })
        .unwrap();
        let stem_b = Tensor::zeros(&[STEM_CHANNELS]).unwrap();
        let dcls1 = DclsConvLayer::init(STEM_CHANNELS, kernel_count, dilated_size, kind, rng);
        let pw1_w = Tensor::from_fn(&[MID_CHANNELS, STEM_CHANNELS, 1, 1], |_| {
            T::from_f64(normal((1.0 / STEM_CHANNELS as f64).sqrt(), rng))
        })
        .unwrap();
        let pw1_b = Tensor::zeros(&[MID_CHANNELS]).unwrap();
        let dcls2 = DclsConvLayer::init(MID_CHANNELS, kernel_count, dilated_size, kind, rng);
        let pw2_w = Tensor::from_fn(&[MID_CHANNELS, MID_CHANNELS, 1, 1], |_| {
            T::from_f64(normal((1.0 / MID_CHANNELS as f64).sqrt(), rng))
        })
        .unwrap();
        let pw2_b = Tensor::zeros(&[MID_CHANNELS]).unwrap();
        let fc_w = Tensor::from_fn(&[n_classes, 2 * MID_CHANNELS], |_| {
            T::from_f64(normal((1.0 / (2 * MID_CHANNELS) as f64).sqrt(), rng))
        })
        .unwrap();
        let fc_b = Tensor::zeros(&[n_classes]).unwrap();
        Self {
            stem_w,
            stem_b,
            dcls1,
            pw1_w,
            pw1_b,
            dcls2,
            pw2_w,
            pw2_b,
            fc_w,
            fc_b,
            n_classes,
        }
    }

    fn stem_spec() -> ConvSpec {
        ConvSpec {
            kernel: vec![2, 2],
            stride: vec![2, 2],
            dilation: vec![1, 1],
            padding: vec![0, 0],
            groups: 1,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Toy2dCache<T>), Toy2dError> {
        let stem_out = conv::conv_forward(x, &self.stem_w, Some(&self.stem_b), &Self::stem_spec())?;
        let stem_act = relu_forward(&stem_out);
        let (d1_out, _) = self.dcls1.forward(&stem_act)?;
        let d1_act = relu_forward(&d1_out);
        let pw1_out = conv::conv_forward(&d1_act, &self.pw1_w, Some(&self.pw1_b), &ConvSpec::plain(&[1, 1]))?;
        let pw1_act = relu_forward(&pw1_out);
        let (d2_out, _) = self.dcls2.forward(&pw1_act)?;
        let d2_act = relu_forward(&d2_out);
        let pw2_out = conv::conv_forward(&d2_act, &self.pw2_w, Some(&self.pw2_b), &ConvSpec::plain(&[1, 1]))?;
        let pw2_act = relu_forward(&pw2_out);

        // Head pooling: [max, mean] per channel, concatenated. The max
        // keeps localized coincidence responses from being washed out;
        // the mean path provides dense gradients that prevent stalls.
        let (b, c, h, w) = (
            pw2_act.shape()[0],
            pw2_act.shape()[1],
            pw2_act.shape()[2],
            pw2_act.shape()[3],
        );
        let hw = T::from_f64((h * w) as f64);
        let mut pooled = Tensor::zeros(&[b, 2 * c]).unwrap();
        let mut argmax = vec![0usize; b * c];
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * h * w;
                let mut best = pw2_act.data()[base];
                let mut best_i = 0usize;
                let mut acc = T::zero();
                for i in 0..h * w {
                    let v = pw2_act.data()[base + i];
                    acc += v;
                    if v > best {
                        best = v;
                        best_i = i;
                    }
                }
                pooled.set(&[bi, ch], best);
                pooled.set(&[bi, c + ch], acc / hw);
                argmax[bi * c + ch] = best_i;
            }
        }
        let mut logits = Tensor::zeros(&[b, self.n_classes]).unwrap();
        for bi in 0..b {
            for k in 0..self.n_classes {
                let mut acc = self.fc_b.data()[k];
                for ch in 0..2 * c {
                    acc += self.fc_w.at(&[k, ch]) * pooled.at(&[bi, ch]);
                }
                logits.set(&[bi, k], acc);
            }
        }
        let cache = Toy2dCache {
            x: x.clone(),
            stem_out,
            stem_act,
            d1_out,
            d1_act,
            pw1_out,
            pw1_act,
            d2_out,
            d2_act,
            pw2_out,
            pw2_act,
            pooled,
            argmax,
        };
        Ok((logits, cache))
    }

    /// Softmax cross-entropy over the logits; returns mean loss, accuracy
    /// and the logit gradient scaled by 1/batch.
    pub fn loss(&self, logits: &Tensor<T>, labels: &[usize]) -> (f64, f64, Tensor<T>) {
        let (b, k) = (logits.shape()[0], logits.shape()[1]);
        let mut grad = Tensor::zeros(logits.shape()).unwrap();
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for bi in 0..b {
            let row = &logits.data()[bi * k..(bi + 1) * k];
            let max = row.iter().cloned().fold(T::from_f64(f64::NEG_INFINITY), |a, v| {
                if v > a {
                    v
                } else {
                    a
                }
            });
            let denom: T = row
                .iter()
                .map(|&v| (v - max).exp())
                .fold(T::zero(), |a, v| a + v);
            let label = labels[bi];
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            if best == label {
                correct += 1;
            }
            let p_label = ((row[label] - max).exp() / denom).to_f64();
            loss_sum += -p_label.max(f64::MIN_POSITIVE).ln();
            for j in 0..k {
                let p = (row[j] - max).exp() / denom;
                let delta = if j == label { T::one() } else { T::zero() };
                grad.set(&[bi, j], (p - delta) / T::from_f64(b as f64));
            }
        }
        (loss_sum / b as f64, correct as f64 / b as f64, grad)
    }

    pub fn backward(
        &self,
        cache: &Toy2dCache<T>,
        grad_logits: &Tensor<T>,
    ) -> Result<Toy2dGrads<T>, Toy2dError> {
        let (b, feat) = (cache.pooled.shape()[0], cache.pooled.shape()[1]);
        let c = feat / 2;
        let k = self.n_classes;
        let mut fc_w_grad = Tensor::zeros(self.fc_w.shape()).unwrap();
        let mut fc_b_grad = Tensor::zeros(self.fc_b.shape()).unwrap();
        let mut grad_pooled = Tensor::<T>::zeros(cache.pooled.shape()).unwrap();
        for bi in 0..b {
            for j in 0..k {
                let g = grad_logits.at(&[bi, j]);
                fc_b_grad.data_mut()[j] += g;
                for ch in 0..feat {
                    fc_w_grad.data_mut()[j * feat + ch] += g * cache.pooled.at(&[bi, ch]);
                    grad_pooled.data_mut()[bi * feat + ch] += g * self.fc_w.at(&[j, ch]);
                }
            }
        }
        // Un-pool: the max routes its gradient to the argmax cell, the
        // mean spreads its share evenly.
        let (h, w) = (cache.pw2_act.shape()[2], cache.pw2_act.shape()[3]);
        let hw = T::from_f64((h * w) as f64);
        let mut grad_pw2_act = Tensor::zeros(cache.pw2_act.shape()).unwrap();
        for bi in 0..b {
            for ch in 0..c {
                let g_max = grad_pooled.at(&[bi, ch]);
                let g_mean = grad_pooled.at(&[bi, c + ch]) / hw;
                let base = (bi * c + ch) * h * w;
                for i in 0..h * w {
                    grad_pw2_act.data_mut()[base + i] = g_mean;
                }
                grad_pw2_act.data_mut()[base + cache.argmax[bi * c + ch]] += g_max;
            }
        }

        let grad_pw2_out = relu_backward(&cache.pw2_out, &grad_pw2_act);
        let pw_spec = ConvSpec::plain(&[1, 1]);
        let pw2_w_grad = conv::conv_backward_weight(&cache.d2_act, &grad_pw2_out, &pw_spec)?;
        let pw2_b_grad = sum_over_channels(&grad_pw2_out);
        let grad_d2_act =
            conv::conv_backward_input(&grad_pw2_out, &self.pw2_w, cache.d2_act.shape(), &pw_spec)?;

        let grad_d2_out = relu_backward(&cache.d2_out, &grad_d2_act);
        let (dcls2_grads, grad_pw1_act) = self.dcls2.backward(&cache.pw1_act, &grad_d2_out)?;

        let grad_pw1_out = relu_backward(&cache.pw1_out, &grad_pw1_act);
        let pw1_w_grad = conv::conv_backward_weight(&cache.d1_act, &grad_pw1_out, &pw_spec)?;
        let pw1_b_grad = sum_over_channels(&grad_pw1_out);
        let grad_d1_act =
            conv::conv_backward_input(&grad_pw1_out, &self.pw1_w, cache.d1_act.shape(), &pw_spec)?;

        let grad_d1_out = relu_backward(&cache.d1_out, &grad_d1_act);
        let (dcls1_grads, grad_stem_act) = self.dcls1.backward(&cache.stem_act, &grad_d1_out)?;

        let grad_stem_out = relu_backward(&cache.stem_out, &grad_stem_act);
        let stem_spec = Self::stem_spec();
        let stem_w_grad = conv::conv_backward_weight(&cache.x, &grad_stem_out, &stem_spec)?;
        let stem_b_grad = sum_over_channels(&grad_stem_out);

        Ok(Toy2dGrads {
            stem_w: stem_w_grad,
            stem_b: stem_b_grad,
            dcls1: dcls1_grads,
            pw1_w: pw1_w_grad,
            pw1_b: pw1_b_grad,
            dcls2: dcls2_grads,
            pw2_w: pw2_w_grad,
            pw2_b: pw2_b_grad,
            fc_w: fc_w_grad,
            fc_b: fc_b_grad,
        })
    }
}

fn sum_over_channels<T: Scalar>(grad: &Tensor<T>) -> Tensor<T> {
    let (b, c, h, w) = (
        grad.shape()[0],
        grad.shape()[1],
        grad.shape()[2],
        grad.shape()[3],
    );
    let mut out = Tensor::zeros(&[c]).unwrap();
    for bi in 0..b {
        for ch in 0..c {
            let base = (bi * c + ch) * h * w;
            let mut acc = T::zero();
            for i in 0..h * w {
                acc += grad.data()[base + i];
            }
            out.data_mut()[ch] += acc;
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct Toy2dConfig {
    pub dilated_size: usize,
    pub kernel_count: usize,
    pub kind: InterpKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// 5.0 for learned positions, 0.0 to freeze them (control arm).
    pub position_lr_scale: f64,
    pub weight_decay: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Toy2dConfig {
    pub fn desk_scale(dilated_size: usize, seed: u64) -> Self {
        Self {
            dilated_size,
            kernel_count: 4,
            kind: InterpKind::Gauss,
            epochs: 16,
            batch_size: 16,
            lr: 0.01,
            position_lr_scale: 5.0,
            weight_decay: 0.0,
            n_train: 256,
            n_test: 128,
            image_size: 32,
            seed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Toy2dEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub position_speed: f64,
    pub mean_sigma: f64,
}

#[derive(Clone, Debug)]
pub struct Toy2dRunResult {
    pub rows: Vec<Toy2dEpoch>,
    pub final_accuracy: f64,
    /// Per-epoch concatenated positions of both DCLS layers (both axes),
    /// for histogram export. Index 0 is the initialization.
    pub position_snapshots: Vec<Tensor<f64>>,
}

fn all_positions_f64<T: Scalar>(model: &Toy2dModel<T>) -> Tensor<f64> {
    let mut values: Vec<f64> = Vec::new();
    values.extend(model.dcls1.params.positions.data().iter().map(|&v| v.to_f64()));
    values.extend(model.dcls2.params.positions.data().iter().map(|&v| v.to_f64()));
    Tensor::from_vec(&[values.len()], values).unwrap()
}

fn stack<T: Scalar>(samples: &[(Tensor<T>, usize)]) -> (Tensor<T>, Vec<usize>) {
    let shape = samples[0].0.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut x = Tensor::zeros(&[samples.len(), c, h, w]).unwrap();
    let len = c * h * w;
    let mut labels = Vec::with_capacity(samples.len());
    for (i, (img, label)) in samples.iter().enumerate() {
        x.data_mut()[i * len..(i + 1) * len].copy_from_slice(img.data());
        labels.push(*label);
    }
    (x, labels)
}

/// Trains the classifier; deterministic under `(config, seed)`.
pub fn run_toy2d<T: Scalar>(cfg: &Toy2dConfig) -> Result<Toy2dRunResult, Toy2dError> {
    let data = make_displaced_pattern::<T>(cfg.seed, cfg.n_train, cfg.n_test, cfg.image_size);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut model = Toy2dModel::<T>::init(
        cfg.dilated_size,
        cfg.kernel_count,
        cfg.kind,
        data.n_classes,
        &mut rng,
    );

    let weight_group = ParamGroup::weights(cfg.weight_decay);
    let position_group = ParamGroup {
        lr_scale: cfg.position_lr_scale,
        ..ParamGroup::positions()
    };
    let sigma_group = if cfg.kind.has_sigma() {
        ParamGroup {
            lr_scale: cfg.position_lr_scale,
            ..ParamGroup::sigmas()
        }
    } else {
        ParamGroup {
            lr_scale: 0.0,
            ..ParamGroup::sigmas()
        }
    };
    let adam = AdamConfig::default();

    let mut st = Toy2dStates::new(&model);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let mut rows = Vec::with_capacity(cfg.epochs);
    let mut snapshots = vec![all_positions_f64(&model)];
    for epoch in 0..cfg.epochs {
        let prev_positions = all_positions_f64(&model);
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let samples: Vec<(Tensor<T>, usize)> =
                chunk.iter().map(|&i| data.train[i].clone()).collect();
            let (x, labels) = stack(&samples);
            let (logits, cache) = model.forward(&x)?;
            let (loss, _, grad_logits) = model.loss(&logits, &labels);
            loss_sum += loss;
            batches += 1;
            let grads = model.backward(&cache, &grad_logits)?;
            st.apply(
                &mut model,
                &grads,
                cfg.lr,
                &weight_group,
                &position_group,
                &sigma_group,
                &adam,
            )?;
            // Positions are clamped after every optimizer step.
            model.dcls1.params.clamp_positions();
            model.dcls2.params.clamp_positions();
        }
        let accuracy = evaluate(&model, &data)?;
        let new_positions = all_positions_f64(&model);
        let speed = position_speed(&prev_positions, &new_positions);
        snapshots.push(new_positions);
        let mean_sigma = mean_abs_sigma(&model);
        rows.push(Toy2dEpoch {
            epoch,
            loss: loss_sum / batches.max(1) as f64,
            accuracy,
            position_speed: speed,
            mean_sigma,
        });
    }
    let final_accuracy = evaluate(&model, &data)?;
    Ok(Toy2dRunResult {
        rows,
        final_accuracy,
        position_snapshots: snapshots,
    })
}

fn mean_abs_sigma<T: Scalar>(model: &Toy2dModel<T>) -> f64 {
    let mut acc = 0.0;
    let mut n = 0usize;
    for layer in [&model.dcls1, &model.dcls2] {
        for &s in layer.params.sigmas.data() {
            acc += s.to_f64().abs();
            n += 1;
        }
    }
    acc / n as f64
}

fn evaluate<T: Scalar>(model: &Toy2dModel<T>, data: &Toy2dDataset<T>) -> Result<f64, Toy2dError> {
    let mut correct = 0usize;
    for chunk in data.test.chunks(32) {
        let (x, labels) = stack(chunk);
        let (logits, _) = model.forward(&x)?;
        let (_, acc, _) = model.loss(&logits, &labels);
        correct += (acc * labels.len() as f64).round() as usize;
    }
    Ok(correct as f64 / data.test.len() as f64)
}

struct Toy2dStates<T> {
    stem_w: AdamState<T>,
    stem_b: AdamState<T>,
    d1_w: AdamState<T>,
    d1_p: AdamState<T>,
    d1_s: AdamState<T>,
    pw1_w: AdamState<T>,
    pw1_b: AdamState<T>,
    d2_w: AdamState<T>,
    d2_p: AdamState<T>,
    d2_s: AdamState<T>,
    pw2_w: AdamState<T>,
    pw2_b: AdamState<T>,
    fc_w: AdamState<T>,
    fc_b: AdamState<T>,
}

impl<T: Scalar> Toy2dStates<T> {
    fn new(model: &Toy2dModel<T>) -> Self {
        Self {
            stem_w: AdamState::new(model.stem_w.shape()),
            stem_b: AdamState::new(model.stem_b.shape()),
            d1_w: AdamState::new(model.dcls1.params.weights.shape()),
            d1_p: AdamState::new(model.dcls1.params.positions.shape()),
            d1_s: AdamState::new(model.dcls1.params.sigmas.shape()),
            pw1_w: AdamState::new(model.pw1_w.shape()),
            pw1_b: AdamState::new(model.pw1_b.shape()),
            d2_w: AdamState::new(model.dcls2.params.weights.shape()),
            d2_p: AdamState::new(model.dcls2.params.positions.shape()),
            d2_s: AdamState::new(model.dcls2.params.sigmas.shape()),
            pw2_w: AdamState::new(model.pw2_w.shape()),
            pw2_b: AdamState::new(model.pw2_b.shape()),
            fc_w: AdamState::new(model.fc_w.shape()),
            fc_b: AdamState::new(model.fc_b.shape()),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn apply(
        &mut self,
        model: &mut Toy2dModel<T>,
        grads: &Toy2dGrads<T>,
        lr: f64,
        weights: &ParamGroup,
        positions: &ParamGroup,
        sigmas: &ParamGroup,
        adam: &AdamConfig,
    ) -> Result<(), TrainError> {
        weights.step(&mut self.stem_w, &mut model.stem_w, &grads.stem_w, lr, adam)?;
        weights.step(&mut self.stem_b, &mut model.stem_b, &grads.stem_b, lr, adam)?;
        weights.step(
            &mut self.d1_w,
            &mut model.dcls1.params.weights,
            &grads.dcls1.weights,
            lr,
            adam,
        )?;
        positions.step(
            &mut self.d1_p,
            &mut model.dcls1.params.positions,
            &grads.dcls1.positions,
            lr,
            adam,
        )?;
        sigmas.step(
            &mut self.d1_s,
            &mut model.dcls1.params.sigmas,
            &grads.dcls1.sigmas,
            lr,
            adam,
        )?;
        weights.step(&mut self.pw1_w, &mut model.pw1_w, &grads.pw1_w, lr, adam)?;
        weights.step(&mut self.pw1_b, &mut model.pw1_b, &grads.pw1_b, lr, adam)?;
        weights.step(
            &mut self.d2_w,
            &mut model.dcls2.params.weights,
            &grads.dcls2.weights,
            lr,
            adam,
        )?;
        positions.step(
            &mut self.d2_p,
            &mut model.dcls2.params.positions,
            &grads.dcls2.positions,
            lr,
            adam,
        )?;
        sigmas.step(
            &mut self.d2_s,
            &mut model.dcls2.params.sigmas,
            &grads.dcls2.sigmas,
            lr,
            adam,
        )?;
        weights.step(&mut self.pw2_w, &mut model.pw2_w, &grads.pw2_w, lr, adam)?;
        weights.step(&mut self.pw2_b, &mut model.pw2_b, &grads.pw2_b, lr, adam)?;
        weights.step(&mut self.fc_w, &mut model.fc_w, &grads.fc_w, lr, adam)?;
        weights.step(&mut self.fc_b, &mut model.fc_b, &grads.fc_b, lr, adam)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_central, rel_err};

    #[test]
    fn dataset_pixel_statistics_are_class_balanced() {
        let data = make_displaced_pattern::<f64>(3, 64, 32, 32);
        // Total blob mass per image is identical regardless of class.
        for (img, _) in &data.train {
            let bright = img.data().iter().filter(|&&v| v > 0.9).count();
            let dim = img
                .data()
                .iter()
                .filter(|&&v| (0.4..0.6).contains(&v))
                .count();
            assert_eq!(bright, 4);
            assert_eq!(dim, 4);
        }
    }

    #[test]
    fn model_gradients_match_finite_differences() {
        // End-to-end check through stem, DCLS construction, pointwise
        // convs, pooling and the head, on a tiny instance in f64.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let model = Toy2dModel::<f64>::init(3, 2, InterpKind::Gauss, 4, &mut rng);
        let data = make_displaced_pattern::<f64>(5, 4, 0, 32);
        let (x, labels) = stack(&data.train);

        let loss_of = |m: &Toy2dModel<f64>| -> f64 {
            let (logits, _) = m.forward(&x).unwrap();
            m.loss(&logits, &labels).0
        };
        let (logits, cache) = model.forward(&x).unwrap();
        let (_, _, grad_logits) = model.loss(&logits, &labels);
        let grads = model.backward(&cache, &grad_logits).unwrap();

        // Check a representative subset: DCLS positions and weights of
        // layer 1 and the fc weights.
        let num_p = grad_central(
            |v| {
                let mut m = model.clone();
                m.dcls1.params.positions =
                    Tensor::from_vec(model.dcls1.params.positions.shape(), v.to_vec()).unwrap();
                loss_of(&m)
            },
            model.dcls1.params.positions.data(),
            1e-6,
        );
        for (a, n) in grads.dcls1.positions.data().iter().zip(&num_p) {
            assert!(rel_err(*a, *n) < 1e-5, "position grad {a} vs {n}");
        }
        let num_w = grad_central(
            |v| {
                let mut m = model.clone();
                m.dcls1.params.weights =
                    Tensor::from_vec(model.dcls1.params.weights.shape(), v.to_vec()).unwrap();
                loss_of(&m)
            },
            model.dcls1.params.weights.data(),
            1e-6,
        );
        for (a, n) in grads.dcls1.weights.data().iter().zip(&num_w) {
            assert!(rel_err(*a, *n) < 1e-5, "weight grad {a} vs {n}");
        }
        let num_fc = grad_central(
            |v| {
                let mut m = model.clone();
                m.fc_w = Tensor::from_vec(model.fc_w.shape(), v.to_vec()).unwrap();
                loss_of(&m)
            },
            model.fc_w.data(),
            1e-6,
        );
        for (a, n) in grads.fc_w.data().iter().zip(&num_fc) {
            assert!(rel_err(*a, *n) < 1e-5, "fc grad {a} vs {n}");
        }
    }

    #[test]
    fn run_is_deterministic_under_seed() {
        let mut cfg = Toy2dConfig::desk_scale(3, 17);
        cfg.epochs = 2;
        cfg.n_train = 32;
        cfg.n_test = 16;
        let a = run_toy2d::<f32>(&cfg).unwrap();
        let b = run_toy2d::<f32>(&cfg).unwrap();
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            assert_eq!(ra.loss.to_bits(), rb.loss.to_bits());
            assert_eq!(ra.accuracy.to_bits(), rb.accuracy.to_bits());
        }
    }
}
