//! Construction of dense convolution kernels from movable weighted
//! elements, with analytic backward passes.
//!
//! Two formulations are provided:
//! * bilinear: each element spreads its weight over the `2^d` grid cells
//!   adjacent to its real-valued position, with hat-function corner
//!   weights; overlapping contributions add.
//! * normalized triangle/Gauss: each element paints a separable
//!   interpolation bump over the whole window, divided by
//!   `eps + sum(bump)` so its footprint sums to just under one.
//!
//! Positions are stored in centered coordinates and shifted by
//! `size / 2` (integer division) per axis at construction time.

use thiserror::Error;

use crate::interp::{self, InterpKind};
use crate::tensor::{increment_index, Scalar, Tensor};

pub const DEFAULT_EPS: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("weights must be [c_out, c_in, m], got {0:?}")]
    BadWeightShape(Vec<usize>),
    #[error("positions must be [{expected_ndim}, c_out, c_in, m], got {got:?}")]
    BadPositionShape { expected_ndim: usize, got: Vec<usize> },
    #[error("sigmas must match positions shape {expected:?}, got {got:?}")]
    BadSigmaShape { expected: Vec<usize>, got: Vec<usize> },
    #[error("dilated kernel size must have 1 to 3 axes, got {0}")]
    BadNdim(usize),
    #[error("zero dilated kernel size on axis {0}")]
    ZeroSize(usize),
    #[error("position {value} on axis {axis} falls outside [0, {max}] after the center shift")]
    PositionOutOfBounds { axis: usize, value: f64, max: usize },
    #[error("gradient shape {got:?} does not match kernel shape {expected:?}")]
    GradShapeMismatch { expected: Vec<usize>, got: Vec<usize> },
    #[error("{0:?} is not a normalized interpolation kind")]
    NotInterpKind(InterpKind),
}

/// Learnable triple of one DCLS layer: weights, per-axis positions and
/// per-axis scale parameters, plus the window the elements move in.
///
/// Shapes: weights `[c_out, c_in, m]`; positions and sigmas
/// `[d, c_out, c_in, m]` where `d = dilated_size.len()`. Positions are in
/// centered coordinates (units: kernel cells).
#[derive(Clone, Debug)]
pub struct DclsParams<T> {
    pub weights: Tensor<T>,
    pub positions: Tensor<T>,
    pub sigmas: Tensor<T>,
    pub dilated_size: Vec<usize>,
}

impl<T: Scalar> DclsParams<T> {
    pub fn new(
        weights: Tensor<T>,
        positions: Tensor<T>,
        sigmas: Tensor<T>,
        dilated_size: Vec<usize>,
    ) -> Result<Self, KernelError> {
        let d = dilated_size.len();
        if d == 0 || d > 3 {
            return Err(KernelError::BadNdim(d));
        }
        if let Some(axis) = dilated_size.iter().position(|&s| s == 0) {
            return Err(KernelError::ZeroSize(axis));
        }
        if weights.ndim() != 3 {
            return Err(KernelError::BadWeightShape(weights.shape().to_vec()));
        }
        let expected: Vec<usize> = std::iter::once(d).chain(weights.shape().iter().copied()).collect();
        if positions.shape() != expected.as_slice() {
            return Err(KernelError::BadPositionShape {
                expected_ndim: d,
                got: positions.shape().to_vec(),
            });
        }
        if sigmas.shape() != expected.as_slice() {
            return Err(KernelError::BadSigmaShape {
                expected,
                got: sigmas.shape().to_vec(),
            });
        }
        Ok(Self {
            weights,
            positions,
            sigmas,
            dilated_size,
        })
    }

    /// Zero-weight, zero-position parameters.
    pub fn zeros(c_out: usize, c_in: usize, m: usize, dilated_size: &[usize]) -> Result<Self, KernelError> {
        let d = dilated_size.len();
        let weights = Tensor::zeros(&[c_out, c_in, m]).map_err(|_| KernelError::BadNdim(d))?;
        let positions = Tensor::zeros(&[d, c_out, c_in, m]).unwrap();
        let sigmas = Tensor::zeros(&[d, c_out, c_in, m]).unwrap();
        Self::new(weights, positions, sigmas, dilated_size.to_vec())
    }

    pub fn ndim(&self) -> usize {
        self.dilated_size.len()
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn kernel_count(&self) -> usize {
        self.weights.shape()[2]
    }

    /// Integer shift applied per axis at construction time.
    pub fn center_shift(&self, axis: usize) -> usize {
        self.dilated_size[axis] / 2
    }

    /// Centered-coordinate bounds that keep the shifted position inside
    /// `[0, size - 1]`. For odd sizes these are symmetric.
    pub fn position_bounds(&self, axis: usize) -> (T, T) {
        let s = self.dilated_size[axis];
        let shift = (s / 2) as f64;
        (
            T::from_f64(-shift),
            T::from_f64((s - 1) as f64 - shift),
        )
    }

    /// Clamps every position into its per-axis bounds. Idempotent.
    pub fn clamp_positions(&mut self) {
        let per_axis = self.weights.len();
        for axis in 0..self.ndim() {
            let (lo, hi) = self.position_bounds(axis);
            let slice = &mut self.positions.data_mut()[axis * per_axis..(axis + 1) * per_axis];
            for p in slice {
                if *p < lo {
                    *p = lo;
                } else if *p > hi {
                    *p = hi;
                }
            }
        }
    }

    fn kernel_shape(&self) -> Vec<usize> {
        let mut shape = vec![self.out_channels(), self.in_channels()];
        shape.extend_from_slice(&self.dilated_size);
        shape
    }

    fn element_count(&self) -> usize {
        self.weights.len()
    }

    /// Shifted position of element `flat` (index into the flattened
    /// `[c_out, c_in, m]` element axis) on `axis`.
    fn shifted_position(&self, axis: usize, flat: usize) -> T {
        self.positions.data()[axis * self.element_count() + flat]
            + T::from_f64(self.center_shift(axis) as f64)
    }

    fn sigma(&self, axis: usize, flat: usize) -> T {
        self.sigmas.data()[axis * self.element_count() + flat]
    }
}

/// Gradients of a scalar objective with respect to the bilinear
/// parameters. `grad_positions` has the same `[d, c_out, c_in, m]` layout
/// as the positions.
#[derive(Clone, Debug)]
pub struct BilinearGrads<T> {
    pub grad_weights: Tensor<T>,
    pub grad_positions: Tensor<T>,
}

/// Gradients for the normalized triangle/Gauss construction.
#[derive(Clone, Debug)]
pub struct InterpGrads<T> {
    pub grad_weights: Tensor<T>,
    pub grad_positions: Tensor<T>,
    pub grad_sigmas: Tensor<T>,
}

/// Builds the dense kernel `[c_out, c_in, s_1, .., s_d]` by spreading each
/// weight over the `2^d` cells adjacent to its position. Contributions of
/// overlapping elements add. Corner cells that fall off the window are
/// dropped, which only happens with a zero corner factor inside the legal
/// position domain.
pub fn construct_bilinear<T: Scalar>(params: &DclsParams<T>) -> Result<Tensor<T>, KernelError> {
    let d = params.ndim();
    let mut kernel = Tensor::zeros(&params.kernel_shape()).unwrap();
    let spatial_len: usize = params.dilated_size.iter().product();
    let elems = params.element_count();
    let m = params.kernel_count();

    let mut floors = vec![0isize; d];
    let mut fracs = vec![T::zero(); d];
    for flat in 0..elems {
        let channel = flat / m;
        let w = params.weights.data()[flat];
        for axis in 0..d {
            let p = params.shifted_position(axis, flat);
            let max = params.dilated_size[axis] - 1;
            let pf = p.to_f64();
            if !(0.0..=max as f64).contains(&pf) {
                return Err(KernelError::PositionOutOfBounds {
                    axis,
                    value: pf,
                    max,
                });
            }
            let fl = p.floor();
            floors[axis] = fl.to_f64() as isize;
            fracs[axis] = p - fl;
        }
        for corner in 0..(1usize << d) {
            let mut factor = w;
            let mut offset = 0usize;
            let mut in_bounds = true;
            for axis in 0..d {
                let high = (corner >> axis) & 1 == 1;
                let r = fracs[axis];
                factor = factor * if high { r } else { T::one() - r };
                let cell = floors[axis] + if high { 1 } else { 0 };
                if cell < 0 || cell >= params.dilated_size[axis] as isize {
                    in_bounds = false;
                    break;
                }
                offset = offset * params.dilated_size[axis] + cell as usize;
            }
            if in_bounds {
                kernel.data_mut()[channel * spatial_len + offset] += factor;
            }
        }
    }
    Ok(kernel)
}

/// Backward pass of [`construct_bilinear`] for the objective
/// `<grad_kernel, K>`: four-corner (2^d-corner) gathers for the weights,
/// signed corner differences for the positions. Cells off the window read
/// a zero gradient.
pub fn backward_bilinear<T: Scalar>(
    params: &DclsParams<T>,
    grad_kernel: &Tensor<T>,
) -> Result<BilinearGrads<T>, KernelError> {
    let d = params.ndim();
    let expected = params.kernel_shape();
    if grad_kernel.shape() != expected.as_slice() {
        return Err(KernelError::GradShapeMismatch {
            expected,
            got: grad_kernel.shape().to_vec(),
        });
    }
    let spatial_len: usize = params.dilated_size.iter().product();
    let elems = params.element_count();
    let m = params.kernel_count();
    let mut grad_w = Tensor::zeros(params.weights.shape()).unwrap();
    let mut grad_p = Tensor::zeros(params.positions.shape()).unwrap();

    let mut floors = vec![0isize; d];
    let mut fracs = vec![T::zero(); d];
    for flat in 0..elems {
        let channel = flat / m;
        let w = params.weights.data()[flat];
        for axis in 0..d {
            let p = params.shifted_position(axis, flat);
            let max = params.dilated_size[axis] - 1;
            let pf = p.to_f64();
            if !(0.0..=max as f64).contains(&pf) {
                return Err(KernelError::PositionOutOfBounds {
                    axis,
                    value: pf,
                    max,
                });
            }
            let fl = p.floor();
            floors[axis] = fl.to_f64() as isize;
            fracs[axis] = p - fl;
        }
        for corner in 0..(1usize << d) {
            let mut offset = 0usize;
            let mut in_bounds = true;
            for axis in 0..d {
                let high = (corner >> axis) & 1 == 1;
                let cell = floors[axis] + if high { 1 } else { 0 };
                if cell < 0 || cell >= params.dilated_size[axis] as isize {
                    in_bounds = false;
                    break;
                }
                offset = offset * params.dilated_size[axis] + cell as usize;
            }
            if !in_bounds {
                continue;
            }
            let g = grad_kernel.data()[channel * spatial_len + offset];
            if g == T::zero() {
                continue;
            }
            let mut full = T::one();
            for axis in 0..d {
                let high = (corner >> axis) & 1 == 1;
                let r = fracs[axis];
                full = full * if high { r } else { T::one() - r };
            }
            grad_w.data_mut()[flat] += full * g;
            for axis in 0..d {
                let high = (corner >> axis) & 1 == 1;
                let mut partial = T::one();
                for other in 0..d {
                    if other == axis {
                        continue;
                    }
                    let oh = (corner >> other) & 1 == 1;
                    let r = fracs[other];
                    partial = partial * if oh { r } else { T::one() - r };
                }
                let sign = if high { T::one() } else { -T::one() };
                grad_p.data_mut()[axis * elems + flat] += w * sign * partial * g;
            }
        }
    }
    Ok(BilinearGrads {
        grad_weights: grad_w,
        grad_positions: grad_p,
    })
}

/// Per-axis interpolation row for one element: values at every cell of
/// the axis, plus derivatives in the position and in sigma.
struct AxisRow<T> {
    values: Vec<T>,
    d_pos: Vec<T>,
    d_sigma: Vec<T>,
}

fn axis_row<T: Scalar>(
    kind: InterpKind,
    size: usize,
    shifted_pos: T,
    sigma: T,
    with_derivatives: bool,
) -> AxisRow<T> {
    let mut values = Vec::with_capacity(size);
    let mut d_pos = Vec::new();
    let mut d_sigma = Vec::new();
    for cell in 0..size {
        let x = shifted_pos - T::from_f64(cell as f64);
        values.push(interp::weight(kind, x, sigma));
        if with_derivatives {
            d_pos.push(interp::d_weight_dx(kind, x, sigma));
            d_sigma.push(interp::d_weight_dsigma(kind, x, sigma));
        }
    }
    AxisRow {
        values,
        d_pos,
        d_sigma,
    }
}

/// Builds the dense kernel from normalized triangle or Gauss bumps: per
/// element, `H[cell] = prod_axes I(p_axis - cell_axis)` is divided by
/// `eps + sum(H)` and scaled by the weight; elements add.
pub fn construct_interp<T: Scalar>(
    params: &DclsParams<T>,
    kind: InterpKind,
    eps: T,
) -> Result<Tensor<T>, KernelError> {
    if !kind.has_sigma() {
        return Err(KernelError::NotInterpKind(kind));
    }
    let d = params.ndim();
    let mut kernel = Tensor::zeros(&params.kernel_shape()).unwrap();
    let spatial: Vec<usize> = params.dilated_size.clone();
    let spatial_len: usize = spatial.iter().product();
    let elems = params.element_count();
    let m = params.kernel_count();

    for flat in 0..elems {
        let channel = flat / m;
        let w = params.weights.data()[flat];
        let rows: Vec<AxisRow<T>> = (0..d)
            .map(|axis| {
                axis_row(
                    kind,
                    spatial[axis],
                    params.shifted_position(axis, flat),
                    params.sigma(axis, flat),
                    false,
                )
            })
            .collect();
        // Separable sum: sum(H) = prod_axes sum_i I_axis[i].
        let mut total = T::one();
        for row in &rows {
            total = total * row.values.iter().fold(T::zero(), |a, &v| a + v);
        }
        let norm = eps + total;
        let scale = w / norm;
        let mut idx = vec![0usize; d];
        for offset in 0..spatial_len {
            let mut h = T::one();
            for axis in 0..d {
                h = h * rows[axis].values[idx[axis]];
            }
            kernel.data_mut()[channel * spatial_len + offset] += scale * h;
            increment_index(&mut idx, &spatial);
        }
    }
    Ok(kernel)
}

/// Exact gradient of `<grad_kernel, K>` through [`construct_interp`],
/// including the derivative of the `eps + sum` normalizer, for the
/// weights, every position axis and every sigma axis.
pub fn backward_interp<T: Scalar>(
    params: &DclsParams<T>,
    kind: InterpKind,
    eps: T,
    grad_kernel: &Tensor<T>,
) -> Result<InterpGrads<T>, KernelError> {
    if !kind.has_sigma() {
        return Err(KernelError::NotInterpKind(kind));
    }
    let d = params.ndim();
    let expected = params.kernel_shape();
    if grad_kernel.shape() != expected.as_slice() {
        return Err(KernelError::GradShapeMismatch {
            expected,
            got: grad_kernel.shape().to_vec(),
        });
    }
    let spatial: Vec<usize> = params.dilated_size.clone();
    let spatial_len: usize = spatial.iter().product();
    let elems = params.element_count();
    let m = params.kernel_count();
    let mut grad_w = Tensor::zeros(params.weights.shape()).unwrap();
    let mut grad_p = Tensor::zeros(params.positions.shape()).unwrap();
    let mut grad_s = Tensor::zeros(params.sigmas.shape()).unwrap();

    for flat in 0..elems {
        let channel = flat / m;
        let w = params.weights.data()[flat];
        let rows: Vec<AxisRow<T>> = (0..d)
            .map(|axis| {
                axis_row(
                    kind,
                    spatial[axis],
                    params.shifted_position(axis, flat),
                    params.sigma(axis, flat),
                    true,
                )
            })
            .collect();
        let axis_sums: Vec<T> = rows
            .iter()
            .map(|r| r.values.iter().fold(T::zero(), |a, &v| a + v))
            .collect();
        let axis_dpos_sums: Vec<T> = rows
            .iter()
            .map(|r| r.d_pos.iter().fold(T::zero(), |a, &v| a + v))
            .collect();
        let axis_dsigma_sums: Vec<T> = rows
            .iter()
            .map(|r| r.d_sigma.iter().fold(T::zero(), |a, &v| a + v))
            .collect();
        let mut total = T::one();
        for &s in &axis_sums {
            total = total * s;
        }
        let norm = eps + total;

        // Gathered inner products over the window: g_h = <G, H>,
        // g_dpos[a] = <G, dH/dp_a>, g_dsigma[a] = <G, dH/dsigma_a>.
        let mut g_h = T::zero();
        let mut g_dpos = vec![T::zero(); d];
        let mut g_dsigma = vec![T::zero(); d];
        let mut idx = vec![0usize; d];
        for offset in 0..spatial_len {
            let g = grad_kernel.data()[channel * spatial_len + offset];
            if g != T::zero() {
                let mut h = T::one();
                for axis in 0..d {
                    h = h * rows[axis].values[idx[axis]];
                }
                g_h += g * h;
                for axis in 0..d {
                    let mut partial = T::one();
                    for other in 0..d {
                        if other == axis {
                            continue;
                        }
                        partial = partial * rows[other].values[idx[other]];
                    }
                    g_dpos[axis] += g * rows[axis].d_pos[idx[axis]] * partial;
                    g_dsigma[axis] += g * rows[axis].d_sigma[idx[axis]] * partial;
                }
            }
            increment_index(&mut idx, &spatial);
        }

        grad_w.data_mut()[flat] = g_h / norm;
        for axis in 0..d {
            // d total / d p_axis is separable: (sum dI_axis) * prod_others sums.
            let mut others = T::one();
            for other in 0..d {
                if other != axis {
                    others = others * axis_sums[other];
                }
            }
            let d_total_dpos = axis_dpos_sums[axis] * others;
            let d_total_dsigma = axis_dsigma_sums[axis] * others;
            grad_p.data_mut()[axis * elems + flat] =
                w * (g_dpos[axis] - g_h / norm * d_total_dpos) / norm;
            grad_s.data_mut()[axis * elems + flat] =
                w * (g_dsigma[axis] - g_h / norm * d_total_dsigma) / norm;
        }
    }
    Ok(InterpGrads {
        grad_weights: grad_w,
        grad_positions: grad_p,
        grad_sigmas: grad_s,
    })
}
