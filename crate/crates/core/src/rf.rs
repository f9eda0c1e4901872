//! Closed-form receptive-field sizes for layer chains and a
//! gradient-based effective-receptive-field estimator.
//!
//! The receptive field after layer `l` follows
//! `r_l = r_{l-1} + df_l (k_l - 1) * prod_{i<l} s_i` with
//! `r_0 = df_0 (k_0 - 1) + 1`; the stem stride enters the product from
//! the first block onward, which reproduces the published per-block
//! tables for ConvNeXt-T style chains.

use thiserror::Error;

use crate::conv::{self, ConvSpec};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Error)]
pub enum RfError {
    #[error("empty layer chain")]
    EmptyChain,
    #[error("conv failure in ERF estimation: {0}")]
    Conv(#[from] conv::ConvError),
    #[error("ERF input must be [B, C, H, W], got {0:?}")]
    BadInput(Vec<usize>),
}

/// One layer of a chain: kernel size, stride and dilation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
}

impl LayerSpec {
    pub fn new(kernel: usize, stride: usize) -> Self {
        Self {
            kernel,
            stride,
            dilation: 1,
        }
    }

    pub fn dilated(kernel: usize, stride: usize, dilation: usize) -> Self {
        Self {
            kernel,
            stride,
            dilation,
        }
    }
}

/// Per-layer receptive-field sizes of a chain, one entry per layer.
pub fn rf_chain(chain: &[LayerSpec]) -> Result<Vec<u64>, RfError> {
    if chain.is_empty() {
        return Err(RfError::EmptyChain);
    }
    let mut sizes = Vec::with_capacity(chain.len());
    let first = chain[0];
    let mut r = (first.dilation * (first.kernel - 1) + 1) as u64;
    sizes.push(r);
    let mut stride_product = first.stride as u64;
    for layer in &chain[1..] {
        r += (layer.dilation * (layer.kernel - 1)) as u64 * stride_product;
        sizes.push(r);
        stride_product *= layer.stride as u64;
    }
    Ok(sizes)
}

/// Named chains with per-block rows: stem, four stages of blocks with a
/// downsampling layer between stages, depths 3/3/9/3.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NamedChain {
    ConvNextT,
    ConvNextTDcls17,
    ConvNextTDcls23,
}

impl NamedChain {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "convnext-t" => Some(Self::ConvNextT),
            "convnext-t-dcls17" => Some(Self::ConvNextTDcls17),
            "convnext-t-dcls23" => Some(Self::ConvNextTDcls23),
            _ => None,
        }
    }

    pub fn block_kernel(self) -> usize {
        match self {
            Self::ConvNextT => 7,
            Self::ConvNextTDcls17 => 17,
            Self::ConvNextTDcls23 => 23,
        }
    }

    pub fn layers(self) -> Vec<LayerSpec> {
        convnext_t_chain(self.block_kernel())
    }

    /// Human-readable row labels matching [`Self::layers`].
    pub fn row_labels() -> Vec<String> {
        let mut labels = vec!["stem".to_string()];
        for (stage, depth) in [3usize, 3, 9, 3].iter().enumerate() {
            if stage > 0 {
                labels.push(format!("downsample{}", stage - 1));
            }
            for block in 0..*depth {
                labels.push(format!("stage{stage}.block{block}"));
            }
        }
        labels
    }
}

/// ConvNeXt-T shaped chain: stem k=4 s=4, stages of depths 3/3/9/3 with
/// `block_kernel` inside blocks and k=2 s=2 downsampling between stages.
pub fn convnext_t_chain(block_kernel: usize) -> Vec<LayerSpec> {
    let mut chain = vec![LayerSpec::new(4, 4)];
    for (stage, depth) in [3usize, 3, 9, 3].iter().enumerate() {
        if stage > 0 {
            chain.push(LayerSpec::new(2, 2));
        }
        for _ in 0..*depth {
            chain.push(LayerSpec::new(block_kernel, 1));
        }
    }
    chain
}

/// Gradient-based effective receptive field of a linear conv stack.
///
/// Forward-propagates the batch through the layers, seeds the gradient of
/// the center pixel of output channel 0, backpropagates to the input, and
/// returns the batch-averaged absolute input gradient summed over input
/// channels, normalized to `[0, 1]` by its maximum.
pub fn erf_estimate<T: Scalar>(
    layers: &[(Tensor<T>, ConvSpec)],
    input: &Tensor<T>,
) -> Result<Tensor<T>, RfError> {
    if layers.is_empty() {
        return Err(RfError::EmptyChain);
    }
    if input.ndim() != 4 {
        return Err(RfError::BadInput(input.shape().to_vec()));
    }

    let mut activations = vec![input.clone()];
    for (weight, spec) in layers {
        let next = conv::conv_forward(activations.last().unwrap(), weight, None, spec)?;
        activations.push(next);
    }

    let out = activations.last().unwrap();
    let out_shape = out.shape().to_vec();
    let (batch, h, w) = (out_shape[0], out_shape[2], out_shape[3]);
    let mut grad = Tensor::zeros(&out_shape).unwrap();
    for b in 0..batch {
        grad.set(&[b, 0, h / 2, w / 2], T::one());
    }

    for (idx, (weight, spec)) in layers.iter().enumerate().rev() {
        let in_shape = activations[idx].shape().to_vec();
        grad = conv::conv_backward_input(&grad, weight, &in_shape, spec)?;
    }

    let in_shape = input.shape();
    let (c_in, ih, iw) = (in_shape[1], in_shape[2], in_shape[3]);
    let mut heat = Tensor::zeros(&[ih, iw]).unwrap();
    for b in 0..batch {
        for c in 0..c_in {
            for y in 0..ih {
                for x in 0..iw {
                    let v = grad.at(&[b, c, y, x]).abs();
                    let cur = heat.at(&[y, x]);
                    heat.set(&[y, x], cur + v);
                }
            }
        }
    }
    let max = heat
        .data()
        .iter()
        .fold(T::zero(), |acc, &v| if v > acc { v } else { acc });
    if max > T::zero() {
        heat.scale(T::one() / max);
    }
    Ok(heat)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_layer_rf_is_kernel_size() {
        assert_eq!(rf_chain(&[LayerSpec::new(3, 1)]).unwrap(), vec![3]);
    }

    #[test]
    fn dilation_scales_first_layer() {
        assert_eq!(rf_chain(&[LayerSpec::dilated(3, 1, 2)]).unwrap(), vec![5]);
    }

    #[test]
    fn empty_chain_errors() {
        assert!(matches!(rf_chain(&[]), Err(RfError::EmptyChain)));
    }

    #[test]
    fn convnext_t_first_blocks() {
        let sizes = rf_chain(&convnext_t_chain(7)).unwrap();
        assert_eq!(&sizes[..5], &[4, 28, 52, 76, 80]);
        assert_eq!(*sizes.last().unwrap(), 1688);
    }

    #[test]
    fn dcls_chains_first_block_and_final() {
        let s17 = rf_chain(&convnext_t_chain(17)).unwrap();
        assert_eq!(s17[1], 68);
        assert_eq!(*s17.last().unwrap(), 4448);
        let s23 = rf_chain(&convnext_t_chain(23)).unwrap();
        assert_eq!(s23[1], 92);
        assert_eq!(*s23.last().unwrap(), 6104);
    }

    #[test]
    fn erf_of_single_layer_is_abs_kernel_at_center() {
        let w = Tensor::<f64>::from_vec(
            &[1, 1, 3, 3],
            vec![0.1, -0.2, 0.3, 0.4, 1.0, 0.6, 0.7, 0.8, 0.9],
        )
        .unwrap();
        let x = Tensor::<f64>::full(&[1, 1, 9, 9], 1.0).unwrap();
        let spec = ConvSpec::plain(&[3, 3]);
        let heat = erf_estimate(&[(w.clone(), spec)], &x).unwrap();
        // Output is 7x7 with center (3, 3); its patch covers input rows
        // and cols 3..=5. The heatmap is |W| normalized by max |w| = 1.
        for i in 0..3 {
            for j in 0..3 {
                let expect = w.at(&[0, 0, i, j]).abs();
                assert!((heat.at(&[3 + i, 3 + j]) - expect).abs() < 1e-12);
            }
        }
        assert_eq!(heat.at(&[0, 0]), 0.0);
    }

    #[test]
    fn two_stacked_boxes_give_tent() {
        // Independent oracle: the 5x5 tent is the direct convolution of
        // two 3x3 boxes of ones.
        let mut tent = [[0.0f64; 5]; 5];
        for a in 0..3 {
            for b in 0..3 {
                for c in 0..3 {
                    for d in 0..3 {
                        tent[a + c][b + d] += 1.0;
                    }
                }
            }
        }
        let w = Tensor::<f64>::full(&[1, 1, 3, 3], 1.0).unwrap();
        let x = Tensor::<f64>::full(&[1, 1, 11, 11], 1.0).unwrap();
        let layers = vec![
            (w.clone(), ConvSpec::plain(&[3, 3])),
            (w.clone(), ConvSpec::plain(&[3, 3])),
        ];
        let heat = erf_estimate(&layers, &x).unwrap();
        // Output is 7x7, center (3, 3); its theoretical RF is the 5x5
        // window at input rows/cols 3..=7.
        for i in 0..5 {
            for j in 0..5 {
                let expect = tent[i][j] / 9.0;
                assert!(
                    (heat.at(&[3 + i, 3 + j]) - expect).abs() < 1e-12,
                    "tent mismatch at {i},{j}"
                );
            }
        }
    }

    #[test]
    fn erf_support_inside_theoretical_rf() {
        let w1 = Tensor::<f64>::full(&[1, 1, 3, 3], 0.5).unwrap();
        let w2 = Tensor::<f64>::full(&[1, 1, 3, 3], 0.25).unwrap();
        let x = Tensor::<f64>::full(&[1, 1, 13, 13], 1.0).unwrap();
        let layers = vec![
            (w1, ConvSpec::plain(&[3, 3])),
            (w2, ConvSpec::plain(&[3, 3])),
        ];
        let heat = erf_estimate(&layers, &x).unwrap();
        let rf = *rf_chain(&[LayerSpec::new(3, 1), LayerSpec::new(3, 1)])
            .unwrap()
            .last()
            .unwrap() as usize;
        assert_eq!(rf, 5);
        // Non-zero heat must lie inside the 5x5 window around the center
        // pixel's preimage, and the center dominates the boundary.
        let lo = 4;
        let hi = lo + rf - 1;
        for y in 0..13 {
            for x2 in 0..13 {
                let v = heat.at(&[y, x2]);
                if v != 0.0 {
                    assert!((lo..=hi).contains(&y) && (lo..=hi).contains(&x2));
                }
            }
        }
        assert!(heat.at(&[6, 6]) >= heat.at(&[lo, lo]));
    }
}
