//! Dilated convolution with learnable spacings at desk scale: kernel
//! construction with analytic gradients, an im2col convolution engine,
//! receptive-field analytics, a small training harness and a spiking
//! network stack where synaptic delays are learned as 1-d temporal
//! convolutions.

pub mod conv;
pub mod gradcheck;
pub mod interp;
pub mod kernel;
pub mod rf;
pub mod snn;
pub mod tensor;
pub mod toy2d;
pub mod train;
