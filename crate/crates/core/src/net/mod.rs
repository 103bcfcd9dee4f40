//! Toy encoder/decoder and the gradient tape they are trained with.

pub mod decoder;
pub mod encoder;
pub mod ops;
pub mod tape;

pub use decoder::{DecoderNodes, DecoderParams, DECODER_CHANNELS};
pub use encoder::{Encoder, EncoderFeatures, ENCODER_CHANNELS, ENCODER_SEED, NUM_TAPS, SPATIAL_MULTIPLE};
pub use tape::{BackwardResult, GradTape, NodeId, Value};

use crate::rng::Rng;
use crate::tensor::{Matrix, Shape4, Tensor4};

/// One convolution: kernel `(C_out, C_in, k, k)` and `C_out` biases.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub kernel: Tensor4,
    pub bias: Vec<f64>,
}

impl ConvLayer {
    pub fn he_normal(out_channels: usize, in_channels: usize, k: usize, rng: &mut Rng) -> Self {
        let std = (2.0 / (in_channels * k * k) as f64).sqrt();
        ConvLayer {
            kernel: Tensor4::randn(Shape4::new(out_channels, in_channels, k, k), std, rng),
            bias: vec![0.0; out_channels],
        }
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape().n
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape().c
    }

    pub fn bias_row(&self) -> Matrix {
        Matrix::from_vec(1, self.bias.len(), self.bias.clone()).expect("bias row")
    }
}
