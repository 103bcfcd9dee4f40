//! Frozen perceptual encoder: four blocks of 3x3 conv and rectifier with
//! 2x average-pool downsampling between blocks. The activation after each
//! block's rectifier is one feature tap.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Shape4, Tensor4};

use super::ops;
use super::tape::{GradTape, NodeId, Value};
use super::ConvLayer;

pub const ENCODER_SEED: u64 = 0x6772_696E_656E_6331;
pub const ENCODER_CHANNELS: [usize; 5] = [3, 8, 16, 32, 64];
pub const NUM_TAPS: usize = 4;
/// Input spatial size must be a multiple of this.
pub const SPATIAL_MULTIPLE: usize = 8;

/// Activations at each tap, shallowest first.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderFeatures {
    pub taps: Vec<Tensor4>,
}

impl EncoderFeatures {
    pub fn deepest(&self) -> &Tensor4 {
        self.taps.last().expect("encoder produces taps")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    layers: Vec<ConvLayer>,
    seed: u64,
}

impl Default for Encoder {
    fn default() -> Self {
        Encoder::new(ENCODER_SEED)
    }
}

impl Encoder {
    /// He-normal kernels and small normal biases, drawn once from `seed`.
    pub fn new(seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let layers = ENCODER_CHANNELS
            .windows(2)
            .map(|w| {
                let mut layer = ConvLayer::he_normal(w[1], w[0], 3, &mut rng);
                layer.bias.iter_mut().for_each(|b| *b = 0.05 * rng.normal());
                layer
            })
            .collect();
        Encoder { layers, seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    pub fn tap_channels(&self) -> Vec<usize> {
        self.layers.iter().map(ConvLayer::out_channels).collect()
    }

    pub fn deepest_channels(&self) -> usize {
        *ENCODER_CHANNELS.last().unwrap()
    }

    pub fn check_input(img: Shape4) -> Result<()> {
        if img.c != ENCODER_CHANNELS[0] {
            return Err(Error::shape("encoder", format!("expected 3 channels, got {img}")));
        }
        if img.h % SPATIAL_MULTIPLE != 0 || img.w % SPATIAL_MULTIPLE != 0 {
            return Err(Error::shape(
                "encoder",
                format!("spatial size of {img} is not a multiple of {SPATIAL_MULTIPLE}"),
            ));
        }
        Ok(())
    }

    /// Shape of every tap for an input of shape `img`.
    pub fn tap_shapes(&self, img: Shape4) -> Vec<Shape4> {
        self.layers
            .iter()
            .enumerate()
            .map(|(i, l)| Shape4::new(img.n, l.out_channels(), img.h >> i, img.w >> i))
            .collect()
    }

    pub fn forward(&self, img: &Tensor4) -> Result<EncoderFeatures> {
        Self::check_input(img.shape())?;
        let mut taps = Vec::with_capacity(NUM_TAPS);
        let mut h = img.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h = ops::avg_pool2(&h)?;
            }
            h = ops::relu(&ops::conv2d(&h, &layer.kernel, &layer.bias)?);
            taps.push(h.clone());
        }
        Ok(EncoderFeatures { taps })
    }

    /// Records the encoder on `tape` with its weights as constants, so that
    /// gradients flow through to `img` but no parameters are registered.
    pub fn forward_taped(&self, tape: &mut GradTape, img: NodeId) -> Result<Vec<NodeId>> {
        let shape = tape
            .value(img)
            .as_tensor()
            .ok_or_else(|| Error::shape("encoder", "input node is not a tensor"))?
            .shape();
        Self::check_input(shape)?;
        let mut taps = Vec::with_capacity(NUM_TAPS);
        let mut h = img;
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h = tape.avg_pool2(h)?;
            }
            let k = tape.constant_tensor(layer.kernel.clone());
            let b = tape.constant(Value::Matrix(layer.bias_row()));
            h = tape.conv2d(h, k, b)?;
            h = tape.relu(h)?;
            taps.push(h);
        }
        Ok(taps)
    }
}
