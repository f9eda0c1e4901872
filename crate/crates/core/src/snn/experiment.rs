//! Ablation-style training runs for the delay-learning network: the full
//! method with decreasing sigma, a constant-sigma arm, frozen random
//! delays, frozen weights, and a no-delays control, with optional sparse
//! connectivity masks.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::dataset::{make_synthetic_dataset, DatasetConfig, SpikeDataset};
use super::{KernelMode, Phase, SnnError, SnnModel, SnnModelConfig, SpikeMode};
use crate::tensor::{Scalar, Tensor};
use crate::train::{
    cosine_annealing, one_cycle, position_speed, AdamConfig, AdamState, ParamGroup, SigmaSchedule,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationMode {
    LearnDelays,
    FixedRandomDelays,
    NoDelays,
    FixedWeights,
    ConstantSigma,
}

impl AblationMode {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "learn-delays" => Some(Self::LearnDelays),
            "fixed-random-delays" => Some(Self::FixedRandomDelays),
            "no-delays" => Some(Self::NoDelays),
            "fixed-weights" => Some(Self::FixedWeights),
            "constant-sigma" => Some(Self::ConstantSigma),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::LearnDelays => "learn-delays",
            Self::FixedRandomDelays => "fixed-random-delays",
            Self::NoDelays => "no-delays",
            Self::FixedWeights => "fixed-weights",
            Self::ConstantSigma => "constant-sigma",
        }
    }
}

#[derive(Clone, Debug)]
pub struct SnnExperimentConfig {
    pub dataset: DatasetConfig,
    pub hidden: Vec<usize>,
    pub t_d: usize,
    pub tau: f64,
    pub threshold: f64,
    pub surrogate_alpha: f64,
    pub dropout: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Fraction of training over which sigma anneals to its floor; the
    /// remaining epochs run at the floor so weights adapt to the sharp
    /// kernels before discretization.
    pub sigma_anneal_fraction: f64,
    pub lr_weights: f64,
    pub lr_delays: f64,
    pub weight_decay: f64,
    /// Sparse connectivity: keep this many input connections per hidden
    /// neuron (readout stays dense so every class remains reachable).
    pub connections_per_neuron: Option<usize>,
    pub mode: AblationMode,
    pub seed: u64,
}

impl SnnExperimentConfig {
    pub fn desk_scale(mode: AblationMode, seed: u64) -> Self {
        let mut dataset = DatasetConfig::delayed_pattern(10, 100, 40);
        dataset.max_offset = 10;
        dataset.n_test = 120;
        Self {
            dataset,
            hidden: vec![96],
            t_d: 12,
            tau: 6.0,
            threshold: 1.0,
            surrogate_alpha: 2.0,
            dropout: 0.1,
            epochs: 24,
            batch_size: 16,
            sigma_anneal_fraction: 0.6,
            lr_weights: 0.02,
            lr_delays: 0.5,
            weight_decay: 0.0,
            connections_per_neuron: None,
            mode,
            seed,
        }
    }

    /// Fraction of hidden-layer synapses removed by the mask.
    pub fn sparsity(&self) -> f64 {
        match self.connections_per_neuron {
            None => 0.0,
            Some(k) => 1.0 - k as f64 / self.dataset.channels as f64,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub delay_speed: f64,
    pub sigma: f64,
}

#[derive(Clone, Debug)]
pub struct SnnRunResult {
    pub rows: Vec<EpochMetrics>,
    /// Test accuracy with continuous kernels at the annealed sigma floor.
    pub final_continuous: f64,
    /// Test accuracy after delay rounding to single-tap kernels.
    pub final_discrete: f64,
    /// Per-epoch concatenated delay values of every layer, for histogram
    /// export. Index 0 holds the untrained initialization.
    pub delay_snapshots: Vec<Tensor<f64>>,
    pub sparsity: f64,
}

fn all_delays_f64<T: Scalar>(model: &SnnModel<T>) -> Tensor<f64> {
    let mut values: Vec<f64> = Vec::new();
    for layer in &model.hidden {
        match &layer.delay.mask {
            Some(mask) => {
                for (&d, &m) in layer.delay.delays.data().iter().zip(mask.data()) {
                    if m != T::zero() {
                        values.push(d.to_f64());
                    }
                }
            }
            None => values.extend(layer.delay.delays.data().iter().map(|&v| v.to_f64())),
        }
    }
    values.extend(model.readout.delays.data().iter().map(|&v| v.to_f64()));
    Tensor::from_vec(&[values.len()], values).unwrap()
}

fn evaluate<T: Scalar>(
    model: &SnnModel<T>,
    data: &SpikeDataset<T>,
    kernel_mode: KernelMode,
) -> Result<f64, SnnError> {
    let mut correct = 0usize;
    let batch = 32usize;
    let mut idx = 0;
    while idx < data.test.len() {
        let end = (idx + batch).min(data.test.len());
        let (x, labels) = stack(&data.test[idx..end]);
        let (pot, _) = model.forward(&x, SpikeMode::Hard, kernel_mode, Phase::Eval, None)?;
        let (_, acc, _) = model.batch_loss(&pot, &labels)?;
        correct += (acc * labels.len() as f64).round() as usize;
        idx = end;
    }
    Ok(correct as f64 / data.test.len() as f64)
}

fn stack<T: Scalar>(samples: &[(Tensor<T>, usize)]) -> (Tensor<T>, Vec<usize>) {
    let (channels, t_steps) = (samples[0].0.shape()[0], samples[0].0.shape()[1]);
    let mut x = Tensor::zeros(&[samples.len(), channels, t_steps]).unwrap();
    let mut labels = Vec::with_capacity(samples.len());
    let len = channels * t_steps;
    for (b, (sample, label)) in samples.iter().enumerate() {
        x.data_mut()[b * len..(b + 1) * len].copy_from_slice(sample.data());
        labels.push(*label);
    }
    (x, labels)
}

/// Runs one ablation arm end to end; deterministic under `(config, seed)`.
pub fn run_experiment<T: Scalar>(cfg: &SnnExperimentConfig) -> Result<SnnRunResult, SnnError> {
    let data = make_synthetic_dataset::<T>(&cfg.dataset, cfg.seed);
    let t_d = if cfg.mode == AblationMode::NoDelays {
        1
    } else {
        cfg.t_d
    };
    let anneal_epochs = ((cfg.epochs as f64 * cfg.sigma_anneal_fraction).round() as usize).max(1);
    let schedule = SigmaSchedule::for_max_delay(t_d, anneal_epochs);
    let sigma0 = match cfg.mode {
        AblationMode::ConstantSigma => 0.5,
        _ => schedule.value(0),
    };
    let model_cfg = SnnModelConfig {
        in_channels: data.channels,
        hidden: cfg.hidden.clone(),
        n_classes: data.n_classes,
        t_d,
        tau: cfg.tau,
        threshold: cfg.threshold,
        surrogate_alpha: cfg.surrogate_alpha,
        dropout: cfg.dropout,
    };
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut model = SnnModel::<T>::init(model_cfg, T::from_f64(sigma0), &mut init_rng);
    if cfg.mode == AblationMode::NoDelays {
        for layer in &mut model.hidden {
            layer.delay.delays.fill(T::zero());
        }
        model.readout.delays.fill(T::zero());
    }
    if let Some(k) = cfg.connections_per_neuron {
        let mut mask_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
        for layer in &mut model.hidden {
            let (out, input) = (layer.delay.out_channels(), layer.delay.in_channels());
            let mut mask = Tensor::<T>::zeros(&[out, input]).unwrap();
            let mut choices: Vec<usize> = (0..input).collect();
            for o in 0..out {
                choices.shuffle(&mut mask_rng);
                for &i in choices.iter().take(k.min(input)) {
                    mask.set(&[o, i], T::one());
                }
            }
            layer.delay.set_mask(mask).unwrap();
        }
    }

    let delays_trainable = !matches!(
        cfg.mode,
        AblationMode::FixedRandomDelays | AblationMode::NoDelays
    );
    let weights_trainable = cfg.mode != AblationMode::FixedWeights;
    let weight_group = ParamGroup {
        lr_scale: if weights_trainable { 1.0 } else { 0.0 },
        weight_decay: cfg.weight_decay,
    };
    let bn_group = ParamGroup {
        lr_scale: if weights_trainable { 1.0 } else { 0.0 },
        weight_decay: 0.0,
    };
    let delay_group = ParamGroup {
        lr_scale: if delays_trainable { 1.0 } else { 0.0 },
        weight_decay: 0.0,
    };

    let adam = AdamConfig::default();
    let mut st_hidden_w: Vec<AdamState<T>> = model
        .hidden
        .iter()
        .map(|l| AdamState::new(l.delay.weights.shape()))
        .collect();
    let mut st_hidden_d: Vec<AdamState<T>> = model
        .hidden
        .iter()
        .map(|l| AdamState::new(l.delay.delays.shape()))
        .collect();
    let mut st_gamma: Vec<AdamState<T>> = model
        .hidden
        .iter()
        .map(|l| AdamState::new(l.bn.gamma.shape()))
        .collect();
    let mut st_beta: Vec<AdamState<T>> = model
        .hidden
        .iter()
        .map(|l| AdamState::new(l.bn.beta.shape()))
        .collect();
    let mut st_readout_w = AdamState::<T>::new(model.readout.weights.shape());
    let mut st_readout_d = AdamState::<T>::new(model.readout.delays.shape());

    let batches_per_epoch = data.train.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(3));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(4));

    let mut rows = Vec::with_capacity(cfg.epochs);
    let mut snapshots = vec![all_delays_f64(&model)];
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let sigma = match cfg.mode {
            AblationMode::ConstantSigma => 0.5,
            _ => schedule.value(epoch),
        };
        model.set_sigma(T::from_f64(sigma));
        let prev_delays = all_delays_f64(&model);

        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut batch_count = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let samples: Vec<(Tensor<T>, usize)> =
                chunk.iter().map(|&i| data.train[i].clone()).collect();
            let (x, labels) = stack(&samples);
            let (pot, cache) = model.forward(
                &x,
                SpikeMode::Hard,
                KernelMode::Continuous,
                Phase::Train,
                Some(&mut dropout_rng),
            )?;
            for (layer, bn_cache) in model.hidden.iter_mut().zip(&cache.bn_caches) {
                layer.bn.update_running(bn_cache);
            }
            let (loss, _, grad_pot) = model.batch_loss(&pot, &labels)?;
            loss_sum += loss;
            batch_count += 1;
            let mut grads = model.backward(&cache, &grad_pot, SpikeMode::Hard)?;

            // Masked synapses stay exactly zero.
            for (l, layer) in model.hidden.iter().enumerate() {
                if let Some(mask) = &layer.delay.mask {
                    for (g, m) in grads.hidden_w[l].data_mut().iter_mut().zip(mask.data()) {
                        if *m == T::zero() {
                            *g = T::zero();
                        }
                    }
                    for (g, m) in grads.hidden_d[l].data_mut().iter_mut().zip(mask.data()) {
                        if *m == T::zero() {
                            *g = T::zero();
                        }
                    }
                }
            }

            let lr_w = one_cycle(cfg.lr_weights, 0.25, step, total_steps);
            let lr_d = cosine_annealing(cfg.lr_delays, 1e-4, step, total_steps);
            for l in 0..model.hidden.len() {
                weight_group.step(
                    &mut st_hidden_w[l],
                    &mut model.hidden[l].delay.weights,
                    &grads.hidden_w[l],
                    lr_w,
                    &adam,
                )
                .unwrap();
                delay_group.step(
                    &mut st_hidden_d[l],
                    &mut model.hidden[l].delay.delays,
                    &grads.hidden_d[l],
                    lr_d,
                    &adam,
                )
                .unwrap();
                bn_group
                    .step(
                        &mut st_gamma[l],
                        &mut model.hidden[l].bn.gamma,
                        &grads.hidden_gamma[l],
                        lr_w,
                        &adam,
                    )
                    .unwrap();
                bn_group
                    .step(
                        &mut st_beta[l],
                        &mut model.hidden[l].bn.beta,
                        &grads.hidden_beta[l],
                        lr_w,
                        &adam,
                    )
                    .unwrap();
            }
            weight_group
                .step(
                    &mut st_readout_w,
                    &mut model.readout.weights,
                    &grads.readout_w,
                    lr_w,
                    &adam,
                )
                .unwrap();
            delay_group
                .step(
                    &mut st_readout_d,
                    &mut model.readout.delays,
                    &grads.readout_d,
                    lr_d,
                    &adam,
                )
                .unwrap();

            // Delays are clamped into [0, t_d - 1] after every batch.
            for layer in &mut model.hidden {
                layer.delay.clamp_delays();
            }
            model.readout.clamp_delays();
            step += 1;
        }

        let accuracy = evaluate(&model, &data, KernelMode::Continuous)?;
        let new_delays = all_delays_f64(&model);
        let delay_speed = position_speed(&prev_delays, &new_delays);
        snapshots.push(new_delays);
        rows.push(EpochMetrics {
            epoch,
            loss: loss_sum / batch_count.max(1) as f64,
            accuracy,
            delay_speed,
            sigma,
        });
    }

    model.set_sigma(T::from_f64(0.5));
    let final_continuous = evaluate(&model, &data, KernelMode::Continuous)?;
    let final_discrete = evaluate(&model, &data, KernelMode::Discrete)?;
    Ok(SnnRunResult {
        rows,
        final_continuous,
        final_discrete,
        delay_snapshots: snapshots,
        sparsity: cfg.sparsity(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_cfg(mode: AblationMode, seed: u64) -> SnnExperimentConfig {
        let mut cfg = SnnExperimentConfig::desk_scale(mode, seed);
        cfg.dataset = DatasetConfig::delayed_pattern(4, 16, 30);
        cfg.dataset.n_train = 48;
        cfg.dataset.n_test = 24;
        cfg.hidden = vec![24];
        cfg.t_d = 10;
        cfg.epochs = 4;
        cfg
    }

    #[test]
    fn experiment_runs_and_improves_over_chance() {
        let result = run_experiment::<f32>(&quick_cfg(AblationMode::LearnDelays, 5)).unwrap();
        assert_eq!(result.rows.len(), 4);
        assert!(result.rows.iter().all(|r| r.loss.is_finite()));
        // Sigma follows the schedule down to the floor.
        assert!(result.rows.last().unwrap().sigma <= result.rows[0].sigma);
    }

    #[test]
    fn identical_seeds_give_identical_runs() {
        let a = run_experiment::<f32>(&quick_cfg(AblationMode::LearnDelays, 9)).unwrap();
        let b = run_experiment::<f32>(&quick_cfg(AblationMode::LearnDelays, 9)).unwrap();
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            assert_eq!(ra.loss.to_bits(), rb.loss.to_bits());
            assert_eq!(ra.accuracy.to_bits(), rb.accuracy.to_bits());
            assert_eq!(ra.delay_speed.to_bits(), rb.delay_speed.to_bits());
        }
        assert_eq!(a.final_discrete, b.final_discrete);
    }

    #[test]
    fn fixed_random_delays_never_move() {
        let cfg = quick_cfg(AblationMode::FixedRandomDelays, 3);
        let result = run_experiment::<f32>(&cfg).unwrap();
        for row in &result.rows {
            assert_eq!(row.delay_speed, 0.0);
        }
    }

    #[test]
    fn sparse_mask_keeps_masked_weights_zero() {
        let mut cfg = quick_cfg(AblationMode::LearnDelays, 7);
        cfg.connections_per_neuron = Some(2);
        assert!((cfg.sparsity() - (1.0 - 2.0 / 16.0)).abs() < 1e-12);
        let result = run_experiment::<f32>(&cfg).unwrap();
        assert!(result.sparsity > 0.8);
    }
}
