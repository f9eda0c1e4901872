//! Reference convolution engine: im2col/col2im lowering for the forward
//! pass, weight gradient and input gradient, plus a naive direct-loop
//! path used both as an independent oracle and as the only 3-d route.
//!
//! Layout conventions: inputs are `[B, C_in, H_1, .., H_d]`, weights
//! `[C_out, C_in/G, K_1, .., K_d]`, outputs `[B, C_out, O_1, .., O_d]`.
//! The im2col matrix is `[C_in * prod(K), B * prod(O)]`: row index is
//! channel-major then kernel-cell row-major, column index is batch-major
//! then output-position row-major.

use thiserror::Error;

use crate::tensor::{increment_index, Scalar, Tensor};

#[derive(Debug, Error)]
pub enum ConvError {
    #[error("kernel larger than padded input on axis {axis}: {detail}")]
    KernelTooLarge { axis: usize, detail: String },
    #[error("spec axes mismatch: kernel {kernel}, stride {stride}, dilation {dilation}, padding {padding}")]
    SpecAxesMismatch {
        kernel: usize,
        stride: usize,
        dilation: usize,
        padding: usize,
    },
    #[error("stride and dilation must be >= 1, groups >= 1")]
    BadSpecValue,
    #[error("groups {groups} must divide channels: c_in {c_in}, c_out {c_out}")]
    BadGroups {
        groups: usize,
        c_in: usize,
        c_out: usize,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("im2col path supports 1-d and 2-d; use the direct path for {0}-d")]
    UnsupportedDim(usize),
}

/// Geometry of one convolution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: Vec<usize>,
    pub stride: Vec<usize>,
    pub dilation: Vec<usize>,
    pub padding: Vec<usize>,
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(
        kernel: Vec<usize>,
        stride: Vec<usize>,
        dilation: Vec<usize>,
        padding: Vec<usize>,
        groups: usize,
    ) -> Result<Self, ConvError> {
        let d = kernel.len();
        if stride.len() != d || dilation.len() != d || padding.len() != d {
            return Err(ConvError::SpecAxesMismatch {
                kernel: d,
                stride: stride.len(),
                dilation: dilation.len(),
                padding: padding.len(),
            });
        }
        if kernel.iter().any(|&v| v == 0)
            || stride.iter().any(|&v| v == 0)
            || dilation.iter().any(|&v| v == 0)
            || groups == 0
        {
            return Err(ConvError::BadSpecValue);
        }
        Ok(Self {
            kernel,
            stride,
            dilation,
            padding,
            groups,
        })
    }

    /// Unit-stride, unit-dilation, zero-padding, single-group spec.
    pub fn plain(kernel: &[usize]) -> Self {
        let d = kernel.len();
        Self {
            kernel: kernel.to_vec(),
            stride: vec![1; d],
            dilation: vec![1; d],
            padding: vec![0; d],
            groups: 1,
        }
    }

    pub fn ndim(&self) -> usize {
        self.kernel.len()
    }

    pub fn kernel_len(&self) -> usize {
        self.kernel.iter().product()
    }
}

/// Output spatial size per axis: `floor((H + 2 pad - df (k - 1) - 1) / s + 1)`.
pub fn output_shape(in_spatial: &[usize], spec: &ConvSpec) -> Result<Vec<usize>, ConvError> {
    if in_spatial.len() != spec.ndim() {
        return Err(ConvError::ShapeMismatch(format!(
            "input has {} spatial axes, spec has {}",
            in_spatial.len(),
            spec.ndim()
        )));
    }
    let mut out = Vec::with_capacity(spec.ndim());
    for axis in 0..spec.ndim() {
        let span = in_spatial[axis] as isize + 2 * spec.padding[axis] as isize
            - (spec.dilation[axis] * (spec.kernel[axis] - 1)) as isize
            - 1;
        if span < 0 {
            return Err(ConvError::KernelTooLarge {
                axis,
                detail: format!(
                    "input {}, padding {}, dilation {}, kernel {}",
                    in_spatial[axis], spec.padding[axis], spec.dilation[axis], spec.kernel[axis]
                ),
            });
        }
        out.push(span as usize / spec.stride[axis] + 1);
    }
    Ok(out)
}

fn split_input_shape<'a>(
    input: &'a Tensor<impl Scalar>,
    spec: &ConvSpec,
) -> Result<(usize, usize, &'a [usize]), ConvError> {
    let shape = input.shape();
    if shape.len() != spec.ndim() + 2 {
        return Err(ConvError::ShapeMismatch(format!(
            "input shape {:?} incompatible with a {}-d convolution",
            shape,
            spec.ndim()
        )));
    }
    Ok((shape[0], shape[1], &shape[2..]))
}

/// Lowers the input to the column matrix `[C_in * prod(K), B * prod(O)]`.
/// Column `j` holds the receptive patch of output location `j`; reads that
/// fall into the zero padding produce zeros.
pub fn im2col<T: Scalar>(input: &Tensor<T>, spec: &ConvSpec) -> Result<Tensor<T>, ConvError> {
    let d = spec.ndim();
    if d > 2 {
        return Err(ConvError::UnsupportedDim(d));
    }
    let (batch, c_in, in_spatial) = split_input_shape(input, spec)?;
    let out_spatial = output_shape(in_spatial, spec)?;
    let out_len: usize = out_spatial.iter().product();
    let k_len = spec.kernel_len();
    let in_len: usize = in_spatial.iter().product();

    let mut cols = Tensor::zeros(&[c_in * k_len, batch * out_len]).unwrap();
    let n_cols = batch * out_len;
    let mut cell = vec![0usize; d];
    let mut pos = vec![0usize; d];
    for c in 0..c_in {
        cell.iter_mut().for_each(|v| *v = 0);
        for cell_flat in 0..k_len {
            let row = c * k_len + cell_flat;
            let row_data_start = row * n_cols;
            for b in 0..batch {
                let in_base = (b * c_in + c) * in_len;
                pos.iter_mut().for_each(|v| *v = 0);
                for out_flat in 0..out_len {
                    let mut src = 0usize;
                    let mut ok = true;
                    for axis in 0..d {
                        let coord = (pos[axis] * spec.stride[axis] + cell[axis] * spec.dilation[axis])
                            as isize
                            - spec.padding[axis] as isize;
                        if coord < 0 || coord >= in_spatial[axis] as isize {
                            ok = false;
                            break;
                        }
                        src = src * in_spatial[axis] + coord as usize;
                    }
                    if ok {
                        cols.data_mut()[row_data_start + b * out_len + out_flat] =
                            input.data()[in_base + src];
                    }
                    increment_index(&mut pos, &out_spatial);
                }
            }
            increment_index(&mut cell, &spec.kernel);
        }
    }
    Ok(cols)
}

/// The accumulate-on-overlap adjoint of [`im2col`]: scatters columns back
/// onto an input-shaped tensor, adding where patches overlap.
pub fn col2im<T: Scalar>(
    cols: &Tensor<T>,
    in_shape: &[usize],
    spec: &ConvSpec,
) -> Result<Tensor<T>, ConvError> {
    let d = spec.ndim();
    if d > 2 {
        return Err(ConvError::UnsupportedDim(d));
    }
    if in_shape.len() != d + 2 {
        return Err(ConvError::ShapeMismatch(format!(
            "in_shape {in_shape:?} incompatible with a {d}-d convolution"
        )));
    }
    let (batch, c_in, in_spatial) = (in_shape[0], in_shape[1], &in_shape[2..]);
    let out_spatial = output_shape(in_spatial, spec)?;
    let out_len: usize = out_spatial.iter().product();
    let k_len = spec.kernel_len();
    let in_len: usize = in_spatial.iter().product();
    if cols.shape() != [c_in * k_len, batch * out_len] {
        return Err(ConvError::ShapeMismatch(format!(
            "cols shape {:?}, expected {:?}",
            cols.shape(),
            [c_in * k_len, batch * out_len]
        )));
    }

    let mut out = Tensor::zeros(in_shape).unwrap();
    let n_cols = batch * out_len;
    let mut cell = vec![0usize; d];
    let mut pos = vec![0usize; d];
    for c in 0..c_in {
        cell.iter_mut().for_each(|v| *v = 0);
        for cell_flat in 0..k_len {
            let row = c * k_len + cell_flat;
            let row_data_start = row * n_cols;
            for b in 0..batch {
                let dst_base = (b * c_in + c) * in_len;
                pos.iter_mut().for_each(|v| *v = 0);
                for out_flat in 0..out_len {
                    let mut dst = 0usize;
                    let mut ok = true;
                    for axis in 0..d {
                        let coord = (pos[axis] * spec.stride[axis] + cell[axis] * spec.dilation[axis])
                            as isize
                            - spec.padding[axis] as isize;
                        if coord < 0 || coord >= in_spatial[axis] as isize {
                            ok = false;
                            break;
                        }
                        dst = dst * in_spatial[axis] + coord as usize;
                    }
                    if ok {
                        out.data_mut()[dst_base + dst] +=
                            cols.data()[row_data_start + b * out_len + out_flat];
                    }
                    increment_index(&mut pos, &out_spatial);
                }
            }
            increment_index(&mut cell, &spec.kernel);
        }
    }
    Ok(out)
}

fn check_weight<T: Scalar>(
    weight: &Tensor<T>,
    c_in: usize,
    spec: &ConvSpec,
) -> Result<(usize, usize), ConvError> {
    let ws = weight.shape();
    if ws.len() != spec.ndim() + 2 {
        return Err(ConvError::ShapeMismatch(format!(
            "weight shape {:?} incompatible with a {}-d convolution",
            ws,
            spec.ndim()
        )));
    }
    let c_out = ws[0];
    if c_in % spec.groups != 0 || c_out % spec.groups != 0 {
        return Err(ConvError::BadGroups {
            groups: spec.groups,
            c_in,
            c_out,
        });
    }
    if ws[1] != c_in / spec.groups || ws[2..] != spec.kernel {
        return Err(ConvError::ShapeMismatch(format!(
            "weight shape {:?}, expected [{}, {}, {:?}]",
            ws,
            c_out,
            c_in / spec.groups,
            spec.kernel
        )));
    }
    Ok((c_out, c_in / spec.groups))
}

/// Convolution forward through the im2col lowering: per group,
/// `out = vec(W) x cols`, then the optional bias is added per output
/// channel.
pub fn conv_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>, ConvError> {
    let (batch, c_in, in_spatial) = split_input_shape(input, spec)?;
    let (c_out, c_in_pg) = check_weight(weight, c_in, spec)?;
    if let Some(b) = bias {
        if b.shape() != [c_out] {
            return Err(ConvError::ShapeMismatch(format!(
                "bias shape {:?}, expected [{c_out}]",
                b.shape()
            )));
        }
    }
    let out_spatial = output_shape(in_spatial, spec)?;
    let out_len: usize = out_spatial.iter().product();
    let k_len = spec.kernel_len();
    let cols = im2col(input, spec)?;
    let n_cols = batch * out_len;
    let c_out_pg = c_out / spec.groups;
    let rows_pg = c_in_pg * k_len;

    let mut out_shape = vec![batch, c_out];
    out_shape.extend_from_slice(&out_spatial);
    let mut out = Tensor::zeros(&out_shape).unwrap();
    for g in 0..spec.groups {
        for oc_local in 0..c_out_pg {
            let oc = g * c_out_pg + oc_local;
            let w_row = &weight.data()[oc * rows_pg..(oc + 1) * rows_pg];
            let bias_v = bias.map_or(T::zero(), |b| b.data()[oc]);
            for b in 0..batch {
                let dst = &mut out.data_mut()[(b * c_out + oc) * out_len..(b * c_out + oc + 1) * out_len];
                for v in dst.iter_mut() {
                    *v = bias_v;
                }
                for (local_row, &w) in w_row.iter().enumerate() {
                    if w == T::zero() {
                        continue;
                    }
                    let row = g * rows_pg + local_row;
                    let col_slice = &cols.data()[row * n_cols + b * out_len..row * n_cols + (b + 1) * out_len];
                    for (v, &c) in dst.iter_mut().zip(col_slice) {
                        *v += w * c;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Weight gradient `vec'(G_out) x cols^T`, per group.
pub fn conv_backward_weight<T: Scalar>(
    input: &Tensor<T>,
    grad_out: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<Tensor<T>, ConvError> {
    let (batch, c_in, in_spatial) = split_input_shape(input, spec)?;
    let out_spatial = output_shape(in_spatial, spec)?;
    let out_len: usize = out_spatial.iter().product();
    let gs = grad_out.shape();
    if gs.len() != spec.ndim() + 2 || gs[0] != batch || gs[2..] != out_spatial[..] {
        return Err(ConvError::ShapeMismatch(format!(
            "grad_out shape {gs:?}, expected [{batch}, c_out, {out_spatial:?}]"
        )));
    }
    let c_out = gs[1];
    if c_in % spec.groups != 0 || c_out % spec.groups != 0 {
        return Err(ConvError::BadGroups {
            groups: spec.groups,
            c_in,
            c_out,
        });
    }
    let c_in_pg = c_in / spec.groups;
    let c_out_pg = c_out / spec.groups;
    let k_len = spec.kernel_len();
    let rows_pg = c_in_pg * k_len;
    let cols = im2col(input, spec)?;
    let n_cols = batch * out_len;

    let mut w_shape = vec![c_out, c_in_pg];
    w_shape.extend_from_slice(&spec.kernel);
    let mut grad_w = Tensor::zeros(&w_shape).unwrap();
    for g in 0..spec.groups {
        for oc_local in 0..c_out_pg {
            let oc = g * c_out_pg + oc_local;
            let dst = &mut grad_w.data_mut()[oc * rows_pg..(oc + 1) * rows_pg];
            for b in 0..batch {
                let g_slice = &grad_out.data()[(b * c_out + oc) * out_len..(b * c_out + oc + 1) * out_len];
                for (local_row, d) in dst.iter_mut().enumerate() {
                    let row = g * rows_pg + local_row;
                    let col_slice =
                        &cols.data()[row * n_cols + b * out_len..row * n_cols + (b + 1) * out_len];
                    let mut acc = T::zero();
                    for (&gv, &cv) in g_slice.iter().zip(col_slice) {
                        acc += gv * cv;
                    }
                    *d += acc;
                }
            }
        }
    }
    Ok(grad_w)
}

/// Input gradient: per group `W^T x vec'(G_out)` scattered back through
/// [`col2im`], accumulating at overlaps.
pub fn conv_backward_input<T: Scalar>(
    grad_out: &Tensor<T>,
    weight: &Tensor<T>,
    in_shape: &[usize],
    spec: &ConvSpec,
) -> Result<Tensor<T>, ConvError> {
    if in_shape.len() != spec.ndim() + 2 {
        return Err(ConvError::ShapeMismatch(format!(
            "in_shape {in_shape:?} incompatible with a {}-d convolution",
            spec.ndim()
        )));
    }
    let (batch, c_in, in_spatial) = (in_shape[0], in_shape[1], &in_shape[2..]);
    let (c_out, c_in_pg) = check_weight(weight, c_in, spec)?;
    let out_spatial = output_shape(in_spatial, spec)?;
    let out_len: usize = out_spatial.iter().product();
    let gs = grad_out.shape();
    if gs.len() != spec.ndim() + 2 || gs[0] != batch || gs[1] != c_out || gs[2..] != out_spatial[..] {
        return Err(ConvError::ShapeMismatch(format!(
            "grad_out shape {gs:?}, expected [{batch}, {c_out}, {out_spatial:?}]"
        )));
    }
    let k_len = spec.kernel_len();
    let rows_pg = c_in_pg * k_len;
    let c_out_pg = c_out / spec.groups;
    let n_cols = batch * out_len;

    let mut cols_grad = Tensor::zeros(&[c_in * k_len, n_cols]).unwrap();
    for g in 0..spec.groups {
        for oc_local in 0..c_out_pg {
            let oc = g * c_out_pg + oc_local;
            let w_row = &weight.data()[oc * rows_pg..(oc + 1) * rows_pg];
            for b in 0..batch {
                let g_slice = &grad_out.data()[(b * c_out + oc) * out_len..(b * c_out + oc + 1) * out_len];
                for (local_row, &w) in w_row.iter().enumerate() {
                    if w == T::zero() {
                        continue;
                    }
                    let row = g * rows_pg + local_row;
                    let dst =
                        &mut cols_grad.data_mut()[row * n_cols + b * out_len..row * n_cols + (b + 1) * out_len];
                    for (d, &gv) in dst.iter_mut().zip(g_slice) {
                        *d += w * gv;
                    }
                }
            }
        }
    }
    col2im(&cols_grad, in_shape, spec)
}

/// Direct cross-correlation: the independent definition-level route.
/// Works for 1-d, 2-d and 3-d and is the only 3-d forward.
pub fn conv_forward_direct<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>, ConvError> {
    let d = spec.ndim();
    let (batch, c_in, in_spatial) = split_input_shape(input, spec)?;
    let (c_out, c_in_pg) = check_weight(weight, c_in, spec)?;
    if let Some(b) = bias {
        if b.shape() != [c_out] {
            return Err(ConvError::ShapeMismatch(format!(
                "bias shape {:?}, expected [{c_out}]",
                b.shape()
            )));
        }
    }
    let out_spatial = output_shape(in_spatial, spec)?;
    let out_len: usize = out_spatial.iter().product();
    let in_len: usize = in_spatial.iter().product();
    let k_len = spec.kernel_len();
    let c_out_pg = c_out / spec.groups;

    let mut out_shape = vec![batch, c_out];
    out_shape.extend_from_slice(&out_spatial);
    let mut out = Tensor::zeros(&out_shape).unwrap();
    let mut pos = vec![0usize; d];
    let mut cell = vec![0usize; d];
    for b in 0..batch {
        for oc in 0..c_out {
            let g = oc / c_out_pg;
            let bias_v = bias.map_or(T::zero(), |t| t.data()[oc]);
            pos.iter_mut().for_each(|v| *v = 0);
            for out_flat in 0..out_len {
                let mut acc = bias_v;
                for ic_local in 0..c_in_pg {
                    let ic = g * c_in_pg + ic_local;
                    let in_base = (b * c_in + ic) * in_len;
                    let w_base = (oc * c_in_pg + ic_local) * k_len;
                    cell.iter_mut().for_each(|v| *v = 0);
                    for cell_flat in 0..k_len {
                        let mut src = 0usize;
                        let mut ok = true;
                        for axis in 0..d {
                            let coord = (pos[axis] * spec.stride[axis]
                                + cell[axis] * spec.dilation[axis])
                                as isize
                                - spec.padding[axis] as isize;
                            if coord < 0 || coord >= in_spatial[axis] as isize {
                                ok = false;
                                break;
                            }
                            src = src * in_spatial[axis] + coord as usize;
                        }
                        if ok {
                            acc += weight.data()[w_base + cell_flat] * input.data()[in_base + src];
                        }
                        increment_index(&mut cell, &spec.kernel);
                    }
                }
                out.data_mut()[(b * c_out + oc) * out_len + out_flat] = acc;
                increment_index(&mut pos, &out_spatial);
            }
        }
    }
    Ok(out)
}

/// Inflates a kernel with evenly spaced zeros so that running it at
/// dilation 1 reproduces the dilated convolution.
pub fn inflate_kernel<T: Scalar>(weight: &Tensor<T>, dilation: &[usize]) -> Tensor<T> {
    let ws = weight.shape();
    let d = dilation.len();
    assert_eq!(ws.len(), d + 2, "weight must be [c_out, c_in_pg, k...]");
    let inflated: Vec<usize> = (0..d)
        .map(|axis| dilation[axis] * (ws[2 + axis] - 1) + 1)
        .collect();
    let mut shape = ws[..2].to_vec();
    shape.extend_from_slice(&inflated);
    let mut out = Tensor::zeros(&shape).unwrap();
    let k_len: usize = ws[2..].iter().product();
    let inflated_len: usize = inflated.iter().product();
    let mut cell = vec![0usize; d];
    for ch in 0..ws[0] * ws[1] {
        cell.iter_mut().for_each(|v| *v = 0);
        for cell_flat in 0..k_len {
            let mut dst = 0usize;
            for axis in 0..d {
                dst = dst * inflated[axis] + cell[axis] * dilation[axis];
            }
            out.data_mut()[ch * inflated_len + dst] = weight.data()[ch * k_len + cell_flat];
            increment_index(&mut cell, &ws[2..]);
        }
    }
    out
}

/// Checks that convolving with `(weight, dilation)` equals convolving
/// with the zero-inflated kernel at dilation 1, within `tol` absolute.
pub fn dilated_equivalence_check<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    spec: &ConvSpec,
    tol: T,
) -> Result<bool, ConvError> {
    let dilated = conv_forward(input, weight, None, spec)?;
    let inflated = inflate_kernel(weight, &spec.dilation);
    let plain_spec = ConvSpec::new(
        inflated.shape()[2..].to_vec(),
        spec.stride.clone(),
        vec![1; spec.ndim()],
        spec.padding.clone(),
        spec.groups,
    )?;
    let via_inflated = conv_forward(input, &inflated, None, &plain_spec)?;
    if dilated.shape() != via_inflated.shape() {
        return Ok(false);
    }
    Ok(dilated
        .data()
        .iter()
        .zip(via_inflated.data())
        .all(|(a, b)| (*a - *b).abs() <= tol))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn symbolic_image() -> Tensor<f64> {
        Tensor::from_vec(&[1, 1, 4, 4], (1..=16).map(|v| v as f64).collect()).unwrap()
    }

    fn spec_2d(stride: usize, dilation: usize) -> ConvSpec {
        ConvSpec::new(vec![2, 2], vec![stride; 2], vec![dilation; 2], vec![0; 2], 1).unwrap()
    }

    #[test]
    fn output_shape_matches_floor_formula() {
        let s = spec_2d(1, 1);
        assert_eq!(output_shape(&[4, 4], &s).unwrap(), vec![3, 3]);
        let s = spec_2d(2, 1);
        assert_eq!(output_shape(&[4, 4], &s).unwrap(), vec![2, 2]);
        let s = spec_2d(1, 2);
        assert_eq!(output_shape(&[4, 4], &s).unwrap(), vec![2, 2]);
    }

    #[test]
    fn output_shape_rejects_oversized_kernel() {
        let s = ConvSpec::plain(&[5]);
        assert!(matches!(
            output_shape(&[4], &s),
            Err(ConvError::KernelTooLarge { .. })
        ));
    }

    #[test]
    fn im2col_plain_4x4_example() {
        let cols = im2col(&symbolic_image(), &spec_2d(1, 1)).unwrap();
        assert_eq!(cols.shape(), &[4, 9]);
        let expect: [[f64; 9]; 4] = [
            [1., 2., 3., 5., 6., 7., 9., 10., 11.],
            [2., 3., 4., 6., 7., 8., 10., 11., 12.],
            [5., 6., 7., 9., 10., 11., 13., 14., 15.],
            [6., 7., 8., 10., 11., 12., 14., 15., 16.],
        ];
        for r in 0..4 {
            for c in 0..9 {
                assert_eq!(cols.at(&[r, c]), expect[r][c]);
            }
        }
    }

    #[test]
    fn im2col_stride2_example() {
        let cols = im2col(&symbolic_image(), &spec_2d(2, 1)).unwrap();
        assert_eq!(cols.shape(), &[4, 4]);
        let expect: [[f64; 4]; 4] = [
            [1., 3., 9., 11.],
            [2., 4., 10., 12.],
            [5., 7., 13., 15.],
            [6., 8., 14., 16.],
        ];
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(cols.at(&[r, c]), expect[r][c]);
            }
        }
    }

    #[test]
    fn im2col_dilation2_example() {
        let cols = im2col(&symbolic_image(), &spec_2d(1, 2)).unwrap();
        assert_eq!(cols.shape(), &[4, 4]);
        let expect: [[f64; 4]; 4] = [
            [1., 2., 5., 6.],
            [3., 4., 7., 8.],
            [9., 10., 13., 14.],
            [11., 12., 15., 16.],
        ];
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(cols.at(&[r, c]), expect[r][c]);
            }
        }
    }

    #[test]
    fn forward_matches_vec_w_times_cols_on_symbolic_example() {
        let img = symbolic_image();
        let w = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let spec = spec_2d(1, 1);
        let out = conv_forward(&img, &w, None, &spec).unwrap();
        assert_eq!(out.shape(), &[1, 1, 3, 3]);
        let cols = im2col(&img, &spec).unwrap();
        let w_vec = w.reshape(&[1, 4]).unwrap();
        let prod = w_vec.matmul(&cols).unwrap();
        for i in 0..9 {
            assert!((out.data()[i] - prod.data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn one_by_one_identity() {
        let x = Tensor::from_fn(&[1, 1, 3, 3], |i| (i[2] * 3 + i[3]) as f64).unwrap();
        let w = Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let out = conv_forward(&x, &w, None, &ConvSpec::plain(&[1, 1])).unwrap();
        assert_eq!(out.data(), x.data());
    }

    #[test]
    fn forward_matches_direct_oracle_across_sweep() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut cases = 0;
        for &d in &[1usize, 2] {
            for &stride in &[1usize, 2] {
                for &dilation in &[1usize, 2, 3] {
                    for &padding in &[0usize, 1, 2] {
                        for &grouped in &[false, true] {
                            let c_in = if grouped { 4 } else { 3 };
                            let groups = if grouped { c_in } else { 1 };
                            let c_out = if grouped { c_in } else { 2 };
                            let k = rng.random_range(1..=3usize);
                            let h = rng.random_range((k * dilation + 2)..(k * dilation + 8));
                            let spatial = vec![h; d];
                            let mut in_shape = vec![2, c_in];
                            in_shape.extend_from_slice(&spatial);
                            let x =
                                Tensor::<f64>::from_fn(&in_shape, |_| rng.random_range(-1.0..1.0))
                                    .unwrap();
                            let mut w_shape = vec![c_out, c_in / groups];
                            w_shape.extend_from_slice(&vec![k; d]);
                            let w =
                                Tensor::<f64>::from_fn(&w_shape, |_| rng.random_range(-1.0..1.0))
                                    .unwrap();
                            let bias =
                                Tensor::<f64>::from_fn(&[c_out], |_| rng.random_range(-1.0..1.0))
                                    .unwrap();
                            let spec = ConvSpec::new(
                                vec![k; d],
                                vec![stride; d],
                                vec![dilation; d],
                                vec![padding; d],
                                groups,
                            )
                            .unwrap();
                            let a = conv_forward(&x, &w, Some(&bias), &spec).unwrap();
                            let b = conv_forward_direct(&x, &w, Some(&bias), &spec).unwrap();
                            assert_eq!(a.shape(), b.shape());
                            for (u, v) in a.data().iter().zip(b.data()) {
                                assert!((u - v).abs() < 1e-10);
                            }
                            cases += 1;
                        }
                    }
                }
            }
        }
        assert!(cases >= 50, "only {cases} cases");
    }

    #[test]
    fn depthwise_equals_per_channel_single_convolutions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = 3;
        let x = Tensor::<f64>::from_fn(&[1, c, 6, 6], |_| rng.random_range(-1.0..1.0)).unwrap();
        let w = Tensor::<f64>::from_fn(&[c, 1, 3, 3], |_| rng.random_range(-1.0..1.0)).unwrap();
        let spec = ConvSpec::new(vec![3, 3], vec![1, 1], vec![1, 1], vec![0, 0], c).unwrap();
        let full = conv_forward(&x, &w, None, &spec).unwrap();
        for ch in 0..c {
            let xc = Tensor::from_vec(
                &[1, 1, 6, 6],
                x.data()[ch * 36..(ch + 1) * 36].to_vec(),
            )
            .unwrap();
            let wc = Tensor::from_vec(&[1, 1, 3, 3], w.data()[ch * 9..(ch + 1) * 9].to_vec()).unwrap();
            let single = conv_forward(&xc, &wc, None, &ConvSpec::plain(&[3, 3])).unwrap();
            for (i, v) in single.data().iter().enumerate() {
                assert!((full.data()[ch * 16 + i] - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pointwise_equals_channel_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f64>::from_fn(&[1, 3, 4, 4], |_| rng.random_range(-1.0..1.0)).unwrap();
        let w = Tensor::<f64>::from_fn(&[2, 3, 1, 1], |_| rng.random_range(-1.0..1.0)).unwrap();
        let out = conv_forward(&x, &w, None, &ConvSpec::plain(&[1, 1])).unwrap();
        for oc in 0..2 {
            for p in 0..16 {
                let mut acc = 0.0;
                for ic in 0..3 {
                    acc += w.data()[oc * 3 + ic] * x.data()[ic * 16 + p];
                }
                assert!((out.data()[oc * 16 + p] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linearity_without_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f64>::from_fn(&[1, 2, 5, 5], |_| rng.random_range(-1.0..1.0)).unwrap();
        let y = Tensor::<f64>::from_fn(&[1, 2, 5, 5], |_| rng.random_range(-1.0..1.0)).unwrap();
        let w = Tensor::<f64>::from_fn(&[2, 2, 3, 3], |_| rng.random_range(-1.0..1.0)).unwrap();
        let spec = ConvSpec::plain(&[3, 3]);
        let (alpha, beta) = (2.5, -0.75);
        let mut combo = x.map(|v| v * alpha);
        combo.add_assign(&y.map(|v| v * beta)).unwrap();
        let lhs = conv_forward(&combo, &w, None, &spec).unwrap();
        let cx = conv_forward(&x, &w, None, &spec).unwrap();
        let cy = conv_forward(&y, &w, None, &spec).unwrap();
        for i in 0..lhs.len() {
            assert!((lhs.data()[i] - (alpha * cx.data()[i] + beta * cy.data()[i])).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_grad_out_gives_zero_weight_grad() {
        let x = Tensor::<f64>::full(&[1, 1, 4, 4], 1.0).unwrap();
        let g = Tensor::<f64>::zeros(&[1, 1, 3, 3]).unwrap();
        let gw = conv_backward_weight(&x, &g, &spec_2d(1, 1)).unwrap();
        assert!(gw.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_by_one_weight_grad_is_dot_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::<f64>::from_fn(&[1, 1, 3, 3], |_| rng.random_range(-1.0..1.0)).unwrap();
        let g = Tensor::<f64>::from_fn(&[1, 1, 3, 3], |_| rng.random_range(-1.0..1.0)).unwrap();
        let gw = conv_backward_weight(&x, &g, &ConvSpec::plain(&[1, 1])).unwrap();
        let dot: f64 = x.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        assert!((gw.data()[0] - dot).abs() < 1e-12);
    }

    #[test]
    fn col2im_inverts_im2col_without_overlap() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::<f64>::from_fn(&[1, 2, 4, 4], |_| rng.random_range(-1.0..1.0)).unwrap();
        let spec = ConvSpec::new(vec![2, 2], vec![2, 2], vec![1, 1], vec![0, 0], 1).unwrap();
        let cols = im2col(&x, &spec).unwrap();
        let back = col2im(&cols, x.shape(), &spec).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn input_grad_counts_overlaps() {
        let w = Tensor::<f64>::full(&[1, 1, 2, 2], 1.0).unwrap();
        let g = Tensor::<f64>::full(&[1, 1, 3, 3], 1.0).unwrap();
        let gi = conv_backward_input(&g, &w, &[1, 1, 4, 4], &spec_2d(1, 1)).unwrap();
        let expect = [
            [1.0, 2.0, 2.0, 1.0],
            [2.0, 4.0, 4.0, 2.0],
            [2.0, 4.0, 4.0, 2.0],
            [1.0, 2.0, 2.0, 1.0],
        ];
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(gi.at(&[0, 0, i, j]), expect[i][j]);
            }
        }
    }

    #[test]
    fn inflated_2x2_kernel_layout() {
        let w = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let infl = inflate_kernel(&w, &[2, 2]);
        assert_eq!(infl.shape(), &[1, 1, 3, 3]);
        assert_eq!(
            infl.data(),
            &[1.0, 0.0, 2.0, 0.0, 0.0, 0.0, 3.0, 0.0, 4.0]
        );
        // Dilation 1 inflation is the identity.
        let same = inflate_kernel(&w, &[1, 1]);
        assert_eq!(same, w);
    }

    #[test]
    fn dilated_equivalence_randomized() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..20 {
            let d = rng.random_range(1..=2usize);
            let k = rng.random_range(2..=3usize);
            let df = rng.random_range(2..=3usize);
            let h = rng.random_range((df * (k - 1) + 2)..(df * (k - 1) + 8));
            let mut in_shape = vec![1, 2];
            in_shape.extend_from_slice(&vec![h; d]);
            let x = Tensor::<f64>::from_fn(&in_shape, |_| rng.random_range(-1.0..1.0)).unwrap();
            let mut w_shape = vec![2, 2];
            w_shape.extend_from_slice(&vec![k; d]);
            let w = Tensor::<f64>::from_fn(&w_shape, |_| rng.random_range(-1.0..1.0)).unwrap();
            let spec =
                ConvSpec::new(vec![k; d], vec![1; d], vec![df; d], vec![0; d], 1).unwrap();
            assert!(dilated_equivalence_check(&x, &w, &spec, 1e-12).unwrap());
        }
    }
}
