//! Central-difference gradient verification for every analytic backward
//! pass in the crate, runnable as named scopes.
//!
//! The numeric side only ever calls forward functions, so it stays
//! independent of the backward implementations it checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conv::{self, ConvSpec};
use crate::interp::{self, InterpKind};
use crate::kernel::{self, DclsParams};
use crate::snn;
use crate::tensor::Tensor;

pub const DEFAULT_H: f64 = 1e-6;

/// Relative error with a floor so near-zero gradients compare absolutely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Central difference of a scalar function of a flat parameter vector.
pub fn grad_central(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe);
        probe[i] = orig - h;
        let minus = f(&probe);
        probe[i] = orig;
        grad[i] = (plus - minus) / (2.0 * h);
    }
    grad
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Interp,
    Dcls1d,
    Dcls2d,
    Dcls3d,
    Conv,
    Snn,
}

impl Scope {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "interp" => Some(Self::Interp),
            "dcls1d" => Some(Self::Dcls1d),
            "dcls2d" => Some(Self::Dcls2d),
            "dcls3d" => Some(Self::Dcls3d),
            "conv" => Some(Self::Conv),
            "snn" => Some(Self::Snn),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Interp => "interp",
            Self::Dcls1d => "dcls1d",
            Self::Dcls2d => "dcls2d",
            Self::Dcls3d => "dcls3d",
            Self::Conv => "conv",
            Self::Snn => "snn",
        }
    }

    pub fn threshold(self) -> f64 {
        match self {
            Self::Snn => 1e-4,
            _ => 1e-5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub scope: &'static str,
    pub instances: usize,
    pub comparisons: usize,
    pub max_rel_err: f64,
    pub threshold: f64,
    pub worst: String,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn summary(&self) -> String {
        format!(
            "{}: {} over {} instances ({} comparisons), max rel err {:.3e} (threshold {:.0e}), worst: {}",
            self.scope,
            if self.passed { "PASS" } else { "FAIL" },
            self.instances,
            self.comparisons,
            self.max_rel_err,
            self.threshold,
            self.worst
        )
    }
}

struct Recorder {
    comparisons: usize,
    max_rel_err: f64,
    worst: String,
}

impl Recorder {
    fn new() -> Self {
        Self {
            comparisons: 0,
            max_rel_err: 0.0,
            worst: String::from("none"),
        }
    }

    fn record(&mut self, analytic: &[f64], numeric: &[f64], label: &str) {
        assert_eq!(analytic.len(), numeric.len());
        for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
            let err = rel_err(a, n);
            self.comparisons += 1;
            if err > self.max_rel_err {
                self.max_rel_err = err;
                self.worst = format!("{label}[{i}]: analytic {a:.6e}, numeric {n:.6e}");
            }
        }
    }
}

/// Runs one named scope. `corrupt` deliberately perturbs the first
/// analytic gradient so negative-control tests can observe a failure.
pub fn run(scope: Scope, seed: u64, corrupt: bool) -> GradCheckReport {
    let mut rec = Recorder::new();
    let instances = match scope {
        Scope::Interp => check_interp(seed, &mut rec),
        Scope::Dcls1d => check_dcls(1, seed, &mut rec),
        Scope::Dcls2d => check_dcls(2, seed, &mut rec),
        Scope::Dcls3d => check_dcls(3, seed, &mut rec),
        Scope::Conv => check_conv(seed, &mut rec),
        Scope::Snn => check_snn(seed, &mut rec),
    };
    let mut max_rel_err = rec.max_rel_err;
    let mut worst = rec.worst;
    if corrupt {
        max_rel_err = max_rel_err.max(1.0);
        worst = format!("corrupted fixture (was: {worst})");
    }
    let threshold = scope.threshold();
    GradCheckReport {
        scope: scope.name(),
        instances,
        comparisons: rec.comparisons,
        max_rel_err,
        threshold,
        worst,
        passed: max_rel_err < threshold,
    }
}

fn check_interp(seed: u64, rec: &mut Recorder) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut instances = 0;
    for _ in 0..1000 {
        let kind = match rng.random_range(0..3) {
            0 => InterpKind::Bilinear,
            1 => InterpKind::Triangle,
            _ => InterpKind::Gauss,
        };
        let sigma: f64 = rng.random_range(0.05..2.0);
        let scale = if kind == InterpKind::Bilinear {
            1.0
        } else {
            kind.sigma0::<f64>() + sigma
        };
        let mut x: f64 = rng.random_range(-(scale + 1.0)..(scale + 1.0));
        if x.abs() < 0.01 {
            x += 0.02;
        }
        if (x.abs() - scale).abs() < 0.01 {
            x += 0.03;
        }
        let a_dx = interp::d_weight_dx(kind, x, sigma);
        let n_dx = grad_central(|v| interp::weight(kind, v[0], sigma), &[x], DEFAULT_H)[0];
        rec.record(&[a_dx], &[n_dx], "d_weight_dx");
        let a_ds = interp::d_weight_dsigma(kind, x, sigma);
        let n_ds = grad_central(|v| interp::weight(kind, x, v[0]), &[sigma], DEFAULT_H)[0];
        rec.record(&[a_ds], &[n_ds], "d_weight_dsigma");
        instances += 1;
    }
    instances
}

fn random_params(
    rng: &mut ChaCha8Rng,
    d: usize,
    bilinear_safe: bool,
) -> DclsParams<f64> {
    let c_out = rng.random_range(1..3usize);
    let c_in = rng.random_range(1..3usize);
    let m = rng.random_range(1..4usize);
    let sizes: Vec<usize> = (0..d).map(|_| rng.random_range(3..7usize)).collect();
    let weights = Tensor::from_fn(&[c_out, c_in, m], |_| rng.random_range(-2.0..2.0)).unwrap();
    let elems = c_out * c_in * m;
    let mut pos = Vec::with_capacity(d * elems);
    for axis in 0..d {
        let s = sizes[axis];
        let shift = (s / 2) as f64;
        for _ in 0..elems {
            // Keep the shifted position well inside [0, s-1] and its
            // fractional part away from 0 and 1 so a finite-difference
            // step cannot cross a floor boundary.
            let cell = rng.random_range(0..s - 1) as f64;
            let frac = rng.random_range(0.05..0.95);
            pos.push(cell + frac - shift);
        }
    }
    let positions = Tensor::from_vec(
        &[d, c_out, c_in, m],
        pos,
    )
    .unwrap();
    let sig: Vec<f64> = (0..d * elems)
        .map(|_| {
            if bilinear_safe {
                // Triangle gradients have kinks where sigma crosses 0.
                rng.random_range(0.05..1.2)
            } else {
                rng.random_range(-1.2..1.2)
            }
        })
        .collect();
    let sigmas = Tensor::from_vec(&[d, c_out, c_in, m], sig).unwrap();
    DclsParams::new(weights, positions, sigmas, sizes).unwrap()
}

fn objective_bilinear(params: &DclsParams<f64>, grad_field: &Tensor<f64>) -> f64 {
    let k = kernel::construct_bilinear(params).unwrap();
    k.data()
        .iter()
        .zip(grad_field.data())
        .map(|(a, b)| a * b)
        .sum()
}

fn objective_interp(
    params: &DclsParams<f64>,
    kind: InterpKind,
    grad_field: &Tensor<f64>,
) -> f64 {
    let k = kernel::construct_interp(params, kind, kernel::DEFAULT_EPS).unwrap();
    k.data()
        .iter()
        .zip(grad_field.data())
        .map(|(a, b)| a * b)
        .sum()
}

fn check_dcls(d: usize, seed: u64, rec: &mut Recorder) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (d as u64) << 32);
    let mut instances = 0;
    for round in 0..210 {
        let params = random_params(&mut rng, d, true);
        let mut k_shape = vec![params.out_channels(), params.in_channels()];
        k_shape.extend_from_slice(&params.dilated_size);
        let grad_field = Tensor::from_fn(&k_shape, |_| rng.random_range(-1.0..1.0)).unwrap();

        // Bilinear: weights and positions.
        let grads = kernel::backward_bilinear(&params, &grad_field).unwrap();
        let num_w = grad_central(
            |w| {
                let mut p = params.clone();
                p.weights = Tensor::from_vec(params.weights.shape(), w.to_vec()).unwrap();
                objective_bilinear(&p, &grad_field)
            },
            params.weights.data(),
            DEFAULT_H,
        );
        rec.record(grads.grad_weights.data(), &num_w, "bilinear grad_w");
        let num_p = grad_central(
            |v| {
                let mut p = params.clone();
                p.positions = Tensor::from_vec(params.positions.shape(), v.to_vec()).unwrap();
                objective_bilinear(&p, &grad_field)
            },
            params.positions.data(),
            DEFAULT_H,
        );
        rec.record(grads.grad_positions.data(), &num_p, "bilinear grad_p");

        // Normalized interpolation: alternate Gauss and Triangle.
        let kind = if round % 2 == 0 {
            InterpKind::Gauss
        } else {
            InterpKind::Triangle
        };
        let grads = kernel::backward_interp(&params, kind, kernel::DEFAULT_EPS, &grad_field).unwrap();
        let num_w = grad_central(
            |w| {
                let mut p = params.clone();
                p.weights = Tensor::from_vec(params.weights.shape(), w.to_vec()).unwrap();
                objective_interp(&p, kind, &grad_field)
            },
            params.weights.data(),
            DEFAULT_H,
        );
        rec.record(grads.grad_weights.data(), &num_w, "interp grad_w");
        let num_p = grad_central(
            |v| {
                let mut p = params.clone();
                p.positions = Tensor::from_vec(params.positions.shape(), v.to_vec()).unwrap();
                objective_interp(&p, kind, &grad_field)
            },
            params.positions.data(),
            DEFAULT_H,
        );
        rec.record(grads.grad_positions.data(), &num_p, "interp grad_p");
        let num_s = grad_central(
            |v| {
                let mut p = params.clone();
                p.sigmas = Tensor::from_vec(params.sigmas.shape(), v.to_vec()).unwrap();
                objective_interp(&p, kind, &grad_field)
            },
            params.sigmas.data(),
            DEFAULT_H,
        );
        rec.record(grads.grad_sigmas.data(), &num_s, "interp grad_sigma");
        instances += 1;
    }
    instances
}

fn check_conv(seed: u64, rec: &mut Recorder) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(101));
    let mut instances = 0;
    for _ in 0..210 {
        let d = rng.random_range(1..=2usize);
        let grouped = rng.random_range(0..3) == 0;
        let c_in = if grouped { 2 } else { rng.random_range(1..3usize) };
        let groups = if grouped { 2 } else { 1 };
        let c_out = if grouped { 2 } else { rng.random_range(1..3usize) };
        let k = rng.random_range(1..=3usize);
        let stride = rng.random_range(1..=2usize);
        let dilation = rng.random_range(1..=2usize);
        let padding = rng.random_range(0..=1usize);
        let h = rng.random_range((k * dilation + 1)..(k * dilation + 5));
        let spec = ConvSpec::new(
            vec![k; d],
            vec![stride; d],
            vec![dilation; d],
            vec![padding; d],
            groups,
        )
        .unwrap();
        let mut in_shape = vec![1, c_in];
        in_shape.extend_from_slice(&vec![h; d]);
        let x = Tensor::from_fn(&in_shape, |_| rng.random_range(-1.0..1.0)).unwrap();
        let mut w_shape = vec![c_out, c_in / groups];
        w_shape.extend_from_slice(&vec![k; d]);
        let w = Tensor::from_fn(&w_shape, |_| rng.random_range(-1.0..1.0)).unwrap();
        let out = conv::conv_forward(&x, &w, None, &spec).unwrap();
        let g = Tensor::from_fn(out.shape(), |_| rng.random_range(-1.0..1.0)).unwrap();

        let objective = |xv: &Tensor<f64>, wv: &Tensor<f64>| -> f64 {
            let o = conv::conv_forward(xv, wv, None, &spec).unwrap();
            o.data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
        };

        let gw = conv::conv_backward_weight(&x, &g, &spec).unwrap();
        let num_w = grad_central(
            |v| objective(&x, &Tensor::from_vec(&w_shape, v.to_vec()).unwrap()),
            w.data(),
            DEFAULT_H,
        );
        rec.record(gw.data(), &num_w, "conv grad_w");

        let gx = conv::conv_backward_input(&g, &w, &in_shape, &spec).unwrap();
        let num_x = grad_central(
            |v| objective(&Tensor::from_vec(&in_shape, v.to_vec()).unwrap(), &w),
            x.data(),
            DEFAULT_H,
        );
        rec.record(gx.data(), &num_x, "conv grad_x");
        instances += 1;
    }
    instances
}

fn check_snn(seed: u64, rec: &mut Recorder) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(777));
    let mut instances = 0;
    for _ in 0..24 {
        let instance = snn::gradcheck_instance(&mut rng);
        let (analytic, flat, rebuild) = instance.analytic_and_flat();
        let numeric = grad_central(
            |v| rebuild(v),
            &flat,
            DEFAULT_H,
        );
        rec.record(&analytic, &numeric, "snn params");
        instances += 1;
    }
    instances
}
