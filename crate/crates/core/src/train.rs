//! Training harness: Adam with decoupled weight decay, parameter groups
//! with per-group learning-rate scaling, learning-rate schedules, the
//! sigma annealing schedule, position initialization and the shared
//! position store that synchronizes layers.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::interp::InterpKind;
use crate::tensor::{Scalar, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("learning rate must be > 0, got {0}")]
    InvalidLr(f64),
    #[error("optimizer state shape {state:?} does not match parameter {param:?}")]
    StateShapeMismatch { state: Vec<usize>, param: Vec<usize> },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Adam moment-decay constants; epsilon defaults to 1e-8.
#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment state for one parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    m: Tensor<T>,
    v: Tensor<T>,
    t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(shape: &[usize]) -> Self {
        Self {
            m: Tensor::zeros(shape).unwrap(),
            v: Tensor::zeros(shape).unwrap(),
            t: 0,
        }
    }

    /// One Adam step with decoupled weight decay:
    /// `p -= lr * wd * p + lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn step(
        &mut self,
        param: &mut Tensor<T>,
        grad: &Tensor<T>,
        lr: f64,
        weight_decay: f64,
        cfg: &AdamConfig,
    ) -> Result<(), TrainError> {
        if lr <= 0.0 {
            return Err(TrainError::InvalidLr(lr));
        }
        if self.m.shape() != param.shape() || grad.shape() != param.shape() {
            return Err(TrainError::StateShapeMismatch {
                state: self.m.shape().to_vec(),
                param: param.shape().to_vec(),
            });
        }
        self.t += 1;
        let b1 = T::from_f64(cfg.beta1);
        let b2 = T::from_f64(cfg.beta2);
        let eps = T::from_f64(cfg.eps);
        let lr_t = T::from_f64(lr);
        let wd = T::from_f64(weight_decay);
        let bias1 = T::from_f64(1.0 - cfg.beta1.powi(self.t as i32));
        let bias2 = T::from_f64(1.0 - cfg.beta2.powi(self.t as i32));
        let one = T::one();
        for i in 0..param.len() {
            let g = grad.data()[i];
            let m = b1 * self.m.data()[i] + (one - b1) * g;
            let v = b2 * self.v.data()[i] + (one - b2) * g * g;
            self.m.data_mut()[i] = m;
            self.v.data_mut()[i] = v;
            let m_hat = m / bias1;
            let v_hat = v / bias2;
            let p = param.data()[i];
            param.data_mut()[i] = p - lr_t * wd * p - lr_t * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

/// Per-group hyperparameters. Positions and sigmas train with a 5x
/// learning-rate scale and no weight decay; weights keep scale 1.
#[derive(Clone, Copy, Debug)]
pub struct ParamGroup {
    pub lr_scale: f64,
    pub weight_decay: f64,
}

impl ParamGroup {
    pub fn weights(weight_decay: f64) -> Self {
        Self {
            lr_scale: 1.0,
            weight_decay,
        }
    }

    pub fn positions() -> Self {
        Self {
            lr_scale: 5.0,
            weight_decay: 0.0,
        }
    }

    pub fn sigmas() -> Self {
        Self {
            lr_scale: 5.0,
            weight_decay: 0.0,
        }
    }

    /// Steps the group. A zero `lr_scale` freezes the parameters exactly:
    /// neither the values nor the optimizer state are touched.
    pub fn step<T: Scalar>(
        &self,
        state: &mut AdamState<T>,
        param: &mut Tensor<T>,
        grad: &Tensor<T>,
        base_lr: f64,
        cfg: &AdamConfig,
    ) -> Result<(), TrainError> {
        if self.lr_scale == 0.0 {
            return Ok(());
        }
        state.step(param, grad, base_lr * self.lr_scale, self.weight_decay, cfg)
    }
}

/// One canonical position/sigma pair shared by the layers of a
/// synchronization group; member gradients accumulate here.
#[derive(Clone, Debug)]
pub struct SharedPositionStore<T> {
    pub positions: Tensor<T>,
    pub sigmas: Tensor<T>,
    pub grad_positions: Tensor<T>,
    pub grad_sigmas: Tensor<T>,
}

impl<T: Scalar> SharedPositionStore<T> {
    pub fn new(positions: Tensor<T>, sigmas: Tensor<T>) -> Self {
        let grad_positions = Tensor::zeros(positions.shape()).unwrap();
        let grad_sigmas = Tensor::zeros(sigmas.shape()).unwrap();
        Self {
            positions,
            sigmas,
            grad_positions,
            grad_sigmas,
        }
    }

    pub fn zero_grads(&mut self) {
        self.grad_positions.fill(T::zero());
        self.grad_sigmas.fill(T::zero());
    }

    /// Adds one member layer's gradients into the canonical accumulators.
    pub fn accumulate(
        &mut self,
        grad_positions: &Tensor<T>,
        grad_sigmas: &Tensor<T>,
    ) -> Result<(), TrainError> {
        self.grad_positions.add_assign(grad_positions)?;
        self.grad_sigmas.add_assign(grad_sigmas)?;
        Ok(())
    }
}

/// Exponential sigma annealing: geometric interpolation from
/// `sigma_start` at epoch 0 down to `sigma_min` at `total_epochs`, held
/// at the floor afterwards.
#[derive(Clone, Copy, Debug)]
pub struct SigmaSchedule {
    pub sigma_start: f64,
    pub sigma_min: f64,
    pub total_epochs: usize,
}

impl SigmaSchedule {
    /// The usual configuration: start at `t_d / 2`, floor at 0.5.
    pub fn for_max_delay(t_d: usize, total_epochs: usize) -> Self {
        Self {
            sigma_start: t_d as f64 / 2.0,
            sigma_min: 0.5,
            total_epochs,
        }
    }

    pub fn value(&self, epoch: usize) -> f64 {
        if epoch >= self.total_epochs || self.total_epochs == 0 {
            return self.sigma_min;
        }
        let frac = epoch as f64 / self.total_epochs as f64;
        self.sigma_start * (self.sigma_min / self.sigma_start).powf(frac)
    }
}

/// Cosine annealing without restarts:
/// `lr(t) = lr_min + (lr0 - lr_min) (1 + cos(pi t / T)) / 2`.
pub fn cosine_annealing(lr0: f64, lr_min: f64, t: usize, t_max: usize) -> f64 {
    if t_max == 0 || t >= t_max {
        return lr_min;
    }
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (std::f64::consts::PI * t as f64 / t_max as f64).cos())
}

/// One-cycle schedule: cosine warmup from `max_lr / div_factor` to
/// `max_lr` over the first `pct_start` fraction of steps, then cosine
/// decay down to `max_lr / final_div`.
pub fn one_cycle(max_lr: f64, pct_start: f64, t: usize, total: usize) -> f64 {
    let div_factor = 25.0;
    let final_div = 1e4;
    let initial = max_lr / div_factor;
    let floor = max_lr / final_div;
    if total == 0 {
        return max_lr;
    }
    let peak_step = (pct_start * total as f64).round().max(1.0);
    let t = t as f64;
    if t <= peak_step {
        let frac = t / peak_step;
        initial + (max_lr - initial) * 0.5 * (1.0 - (std::f64::consts::PI * frac).cos())
    } else {
        let span = (total as f64 - peak_step).max(1.0);
        let frac = ((t - peak_step) / span).min(1.0);
        floor + (max_lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

/// Mean absolute per-epoch movement of a position tensor.
pub fn position_speed<T: Scalar>(prev: &Tensor<T>, curr: &Tensor<T>) -> f64 {
    debug_assert_eq!(prev.shape(), curr.shape());
    let total: f64 = prev
        .data()
        .iter()
        .zip(curr.data())
        .map(|(&a, &b)| (b - a).abs().to_f64())
        .sum();
    total / prev.len() as f64
}

/// Position and sigma initialization for image-mode DCLS layers:
/// positions from a centered normal of standard deviation 0.5, sigmas a
/// constant 0.23 for Gauss and 0 for Triangle/Bilinear.
pub fn init_positions<T: Scalar>(
    rng: &mut impl Rng,
    kind: InterpKind,
    shape: &[usize],
) -> (Tensor<T>, Tensor<T>) {
    let normal = Normal::new(0.0f64, 0.5).unwrap();
    let positions = Tensor::from_fn(shape, |_| T::from_f64(normal.sample(rng))).unwrap();
    let sigma_init = match kind {
        InterpKind::Gauss => 0.23,
        InterpKind::Triangle | InterpKind::Bilinear => 0.0,
    };
    let sigmas = Tensor::full(shape, T::from_f64(sigma_init)).unwrap();
    (positions, sigmas)
}

/// Delay initialization for SNN layers: uniform over `[0, t_d - 1]`.
pub fn init_delays<T: Scalar>(rng: &mut impl Rng, shape: &[usize], t_d: usize) -> Tensor<T> {
    let hi = (t_d - 1) as f64;
    Tensor::from_fn(shape, |_| T::from_f64(rng.random_range(0.0..=hi))).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_grad_zero_wd_leaves_parameters_fixed() {
        let mut p = Tensor::<f64>::from_vec(&[2], vec![1.5, -0.5]).unwrap();
        let g = Tensor::<f64>::zeros(&[2]).unwrap();
        let mut st = AdamState::new(&[2]);
        let before = p.clone();
        for _ in 0..5 {
            st.step(&mut p, &g, 0.1, 0.0, &AdamConfig::default()).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // With g = 1 the bias-corrected ratio is 1, so the first step is
        // lr / (1 + eps) away, i.e. lr up to eps.
        let mut p = Tensor::<f64>::from_vec(&[1], vec![2.0]).unwrap();
        let g = Tensor::<f64>::from_vec(&[1], vec![1.0]).unwrap();
        let mut st = AdamState::new(&[1]);
        st.step(&mut p, &g, 0.1, 0.0, &AdamConfig::default()).unwrap();
        assert!((p.data()[0] - 1.9).abs() < 1e-8);
    }

    #[test]
    fn five_step_trajectory_matches_hand_reference() {
        // Hand-stepped scalar Adam on f(x) = x^2 / 2 (grad = x) from x = 1,
        // lr = 0.1, defaults. The reference implementation below is an
        // independent transcription of the update equations.
        let cfg = AdamConfig::default();
        let mut x_ref = 1.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        let mut expect = Vec::new();
        for t in 1..=5 {
            let g = x_ref;
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let m_hat = m / (1.0 - cfg.beta1.powi(t));
            let v_hat = v / (1.0 - cfg.beta2.powi(t));
            x_ref -= 0.1 * m_hat / (v_hat.sqrt() + cfg.eps);
            expect.push(x_ref);
        }

        let mut p = Tensor::<f64>::from_vec(&[1], vec![1.0]).unwrap();
        let mut st = AdamState::new(&[1]);
        for e in expect {
            let g = Tensor::<f64>::from_vec(&[1], vec![p.data()[0]]).unwrap();
            st.step(&mut p, &g, 0.1, 0.0, &cfg).unwrap();
            assert!((p.data()[0] - e).abs() < 1e-12);
        }
    }

    #[test]
    fn non_positive_lr_is_rejected() {
        let mut p = Tensor::<f64>::zeros(&[1]).unwrap();
        let g = Tensor::<f64>::zeros(&[1]).unwrap();
        let mut st = AdamState::new(&[1]);
        assert!(matches!(
            st.step(&mut p, &g, 0.0, 0.0, &AdamConfig::default()),
            Err(TrainError::InvalidLr(_))
        ));
    }

    #[test]
    fn zero_lr_scale_freezes_bitwise_while_weights_move() {
        let mut weights = Tensor::<f64>::from_vec(&[2], vec![0.3, -0.7]).unwrap();
        let mut positions = Tensor::<f64>::from_vec(&[2], vec![0.11, -0.23]).unwrap();
        let g = Tensor::<f64>::from_vec(&[2], vec![0.5, -0.4]).unwrap();
        let mut st_w = AdamState::new(&[2]);
        let mut st_p = AdamState::new(&[2]);
        let frozen = ParamGroup {
            lr_scale: 0.0,
            ..ParamGroup::positions()
        };
        let before_bits: Vec<u64> = positions.data().iter().map(|v| v.to_bits()).collect();
        let cfg = AdamConfig::default();
        for _ in 0..3 {
            ParamGroup::weights(0.01)
                .step(&mut st_w, &mut weights, &g, 0.05, &cfg)
                .unwrap();
            frozen.step(&mut st_p, &mut positions, &g, 0.05, &cfg).unwrap();
        }
        let after_bits: Vec<u64> = positions.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(before_bits, after_bits);
        assert!((weights.data()[0] - 0.3).abs() > 1e-3);
    }

    #[test]
    fn position_group_has_no_weight_decay_and_5x_scale() {
        let g = ParamGroup::positions();
        assert_eq!(g.weight_decay, 0.0);
        assert_eq!(g.lr_scale, 5.0);
        assert_eq!(ParamGroup::sigmas().weight_decay, 0.0);
    }

    #[test]
    fn sigma_schedule_endpoints_and_midpoint() {
        let s = SigmaSchedule::for_max_delay(25, 40);
        assert!((s.value(0) - 12.5).abs() < 1e-12);
        assert!((s.value(40) - 0.5).abs() < 1e-12);
        assert!((s.value(20) - (12.5f64 * 0.5).sqrt()).abs() < 1e-12);
        assert!((s.value(20) - 2.5).abs() < 1e-12);
        // Monotone non-increasing.
        let mut prev = f64::INFINITY;
        for e in 0..=40 {
            let v = s.value(e);
            assert!(v <= prev + 1e-15);
            prev = v;
        }
    }

    #[test]
    fn cosine_annealing_endpoints() {
        assert_eq!(cosine_annealing(0.1, 0.001, 0, 100), 0.1);
        assert!((cosine_annealing(0.1, 0.001, 100, 100) - 0.001).abs() < 1e-15);
        let mid = cosine_annealing(0.1, 0.0, 50, 100);
        assert!((mid - 0.05).abs() < 1e-12);
    }

    #[test]
    fn one_cycle_peaks_at_pct_start() {
        let total = 100;
        let pct = 0.3;
        let peak = one_cycle(0.4, pct, 30, total);
        assert!((peak - 0.4).abs() < 1e-12);
        assert!(one_cycle(0.4, pct, 0, total) < 0.4);
        assert!(one_cycle(0.4, pct, 99, total) < 0.01);
    }

    #[test]
    fn position_speed_is_mean_absolute_move() {
        let a = Tensor::<f64>::from_vec(&[4], vec![0.0, 1.0, -1.0, 2.0]).unwrap();
        let b = Tensor::<f64>::from_vec(&[4], vec![0.5, 0.0, -1.0, 3.0]).unwrap();
        assert!((position_speed(&a, &b) - (0.5 + 1.0 + 0.0 + 1.0) / 4.0).abs() < 1e-15);
    }

    #[test]
    fn init_kinds_follow_their_defaults() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (p, s) = init_positions::<f64>(&mut rng, InterpKind::Gauss, &[2, 4, 4, 3]);
        assert_eq!(p.shape(), &[2, 4, 4, 3]);
        assert!(s.data().iter().all(|&v| v == 0.23));
        // Rough sanity on the normal draw.
        let mean: f64 = p.data().iter().sum::<f64>() / p.len() as f64;
        assert!(mean.abs() < 0.3);

        let (_, s) = init_positions::<f64>(&mut rng, InterpKind::Triangle, &[1, 1, 1, 4]);
        assert!(s.data().iter().all(|&v| v == 0.0));

        let d = init_delays::<f64>(&mut rng, &[8, 16], 25);
        assert!(d.data().iter().all(|&v| (0.0..=24.0).contains(&v)));
    }

    #[test]
    fn shared_store_accumulates_member_gradients() {
        let p = Tensor::<f64>::zeros(&[2, 1, 1, 2]).unwrap();
        let s = Tensor::<f64>::zeros(&[2, 1, 1, 2]).unwrap();
        let mut store = SharedPositionStore::new(p, s);
        let g1 = Tensor::<f64>::full(&[2, 1, 1, 2], 0.25).unwrap();
        let g2 = Tensor::<f64>::full(&[2, 1, 1, 2], -1.0).unwrap();
        store.accumulate(&g1, &g1).unwrap();
        store.accumulate(&g2, &g2).unwrap();
        assert!(store.grad_positions.data().iter().all(|&v| v == -0.75));
        store.zero_grads();
        assert!(store.grad_positions.data().iter().all(|&v| v == 0.0));
    }
}
