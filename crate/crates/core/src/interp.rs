//! Scalar weighting functions used to spread a kernel element over grid
//! cells, with analytic derivatives in the offset and in the scale
//! parameter.
//!
//! Triangle: `max(0, sigma0 + |sigma| - |x|)`; Gauss:
//! `exp(-x^2 / (2 (sigma0 + |sigma|)^2))`. Bilinear is the triangle
//! function pinned to scale 1, which reproduces the classic hat
//! `max(0, 1 - |x|)` and ignores `sigma` entirely.

use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InterpKind {
    Bilinear,
    Triangle,
    Gauss,
}

impl InterpKind {
    /// Minimum effective scale of the weighting function.
    pub fn sigma0<T: Scalar>(self) -> T {
        match self {
            InterpKind::Bilinear | InterpKind::Triangle => T::one(),
            InterpKind::Gauss => T::from_f64(0.27),
        }
    }

    /// Whether the scale parameter is live for this kind.
    pub fn has_sigma(self) -> bool {
        !matches!(self, InterpKind::Bilinear)
    }
}

/// Effective scale `sigma0 + |sigma|` (fixed to 1 for bilinear).
fn scale<T: Scalar>(kind: InterpKind, sigma: T) -> T {
    match kind {
        InterpKind::Bilinear => T::one(),
        _ => kind.sigma0::<T>() + sigma.abs(),
    }
}

/// Derivative direction through `|sigma|`; the derivative at 0 is taken
/// in the +1 direction so a zero-initialized sigma is trainable.
fn sigma_sign<T: Scalar>(sigma: T) -> T {
    if sigma >= T::zero() {
        T::one()
    } else {
        -T::one()
    }
}

/// Weight of a kernel element at offset `x` from a grid cell.
pub fn weight<T: Scalar>(kind: InterpKind, x: T, sigma: T) -> T {
    let s = scale(kind, sigma);
    match kind {
        InterpKind::Bilinear | InterpKind::Triangle => (s - x.abs()).max(T::zero()),
        InterpKind::Gauss => {
            let z = x / s;
            (-z * z / T::from_f64(2.0)).exp()
        }
    }
}

/// d weight / d x. At the triangle kinks (`x = 0` and `|x| = scale`) the
/// one-sided right derivative is used.
pub fn d_weight_dx<T: Scalar>(kind: InterpKind, x: T, sigma: T) -> T {
    let s = scale(kind, sigma);
    match kind {
        InterpKind::Bilinear | InterpKind::Triangle => {
            if x >= s || x < -s {
                T::zero()
            } else if x >= T::zero() {
                -T::one()
            } else {
                T::one()
            }
        }
        InterpKind::Gauss => {
            let w = weight(kind, x, sigma);
            -x / (s * s) * w
        }
    }
}

/// d weight / d sigma, through `|sigma|` with `sign(0) = +1`. Identically
/// zero for bilinear.
pub fn d_weight_dsigma<T: Scalar>(kind: InterpKind, x: T, sigma: T) -> T {
    let s = scale(kind, sigma);
    match kind {
        InterpKind::Bilinear => T::zero(),
        InterpKind::Triangle => {
            if x.abs() < s {
                sigma_sign(sigma)
            } else {
                T::zero()
            }
        }
        InterpKind::Gauss => {
            let w = weight(kind, x, sigma);
            w * x * x / (s * s * s) * sigma_sign(sigma)
        }
    }
}
