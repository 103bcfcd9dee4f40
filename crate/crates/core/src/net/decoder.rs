//! Trainable decoder mirroring the encoder: 3x3 conv and rectifier followed
//! by nearest-neighbour 2x upsampling, three times, then a final 3-channel
//! conv with no activation.

use crate::error::{Error, Result};
use crate::params::NamedTensor;
use crate::rng::Rng;
use crate::tensor::{Shape4, Tensor4};

use super::ops;
use super::tape::{GradTape, NodeId, Value};
use super::ConvLayer;

pub const DECODER_CHANNELS: [usize; 5] = [64, 32, 16, 8, 3];

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub layers: Vec<ConvLayer>,
}

/// Parameter nodes of one decoder registration on a tape.
#[derive(Debug, Clone)]
pub struct DecoderNodes {
    layers: Vec<(NodeId, NodeId)>,
}

impl DecoderParams {
    /// He-normal kernels, zero biases.
    pub fn init(rng: &mut Rng) -> Self {
        Self::with_channels(&DECODER_CHANNELS, 3, rng)
    }

    pub fn with_channels(channels: &[usize], kernel: usize, rng: &mut Rng) -> Self {
        let layers = channels
            .windows(2)
            .map(|w| ConvLayer::he_normal(w[1], w[0], kernel, rng))
            .collect();
        DecoderParams { layers }
    }

    pub fn zeros_like(&self) -> Self {
        DecoderParams {
            layers: self
                .layers
                .iter()
                .map(|l| ConvLayer {
                    kernel: Tensor4::zeros(l.kernel.shape()),
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.layers[0].in_channels()
    }

    pub fn upsample_factor(&self) -> usize {
        1 << (self.layers.len() - 1)
    }

    pub fn kernel_name(i: usize) -> String {
        format!("decoder.{i}.kernel")
    }

    pub fn bias_name(i: usize) -> String {
        format!("decoder.{i}.bias")
    }

    pub fn to_named(&self) -> Vec<NamedTensor> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            out.push(NamedTensor::from_tensor(Self::kernel_name(i), &l.kernel));
            out.push(NamedTensor::new(Self::bias_name(i), vec![1, l.bias.len()], l.bias.clone()));
        }
        out
    }

    /// Overwrites every layer from `named`, checking each shape.
    pub fn assign_from(&mut self, named: &[NamedTensor]) -> Result<()> {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let kname = Self::kernel_name(i);
            let bname = Self::bias_name(i);
            let k = find(named, &kname)?;
            let s = layer.kernel.shape();
            if k.dims != [s.n, s.c, s.h, s.w] {
                return Err(Error::format(kname, format!("dims {:?}, expected {:?}", k.dims, [s.n, s.c, s.h, s.w])));
            }
            let b = find(named, &bname)?;
            if b.dims != [1, layer.bias.len()] {
                return Err(Error::format(bname, format!("dims {:?}, expected [1, {}]", b.dims, layer.bias.len())));
            }
            layer.kernel.data_mut().copy_from_slice(&k.data);
            layer.bias.copy_from_slice(&b.data);
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.kernel.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }

    fn check_input(&self, t: Shape4) -> Result<()> {
        if t.c != self.in_channels() {
            return Err(Error::shape(
                "decoder",
                format!("expected {} channels, got {t}", self.in_channels()),
            ));
        }
        Ok(())
    }

    pub fn forward(&self, t: &Tensor4) -> Result<Tensor4> {
        self.check_input(t.shape())?;
        let last = self.layers.len() - 1;
        let mut h = t.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = ops::conv2d(&h, &layer.kernel, &layer.bias)?;
            if i < last {
                h = ops::upsample2(&ops::relu(&h));
            }
        }
        Ok(h)
    }

    /// Registers every kernel and bias as a named parameter.
    pub fn register(&self, tape: &mut GradTape) -> Result<DecoderNodes> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let k = tape.param(Self::kernel_name(i), Value::Tensor(l.kernel.clone()))?;
            let b = tape.param(Self::bias_name(i), Value::Matrix(l.bias_row()))?;
            layers.push((k, b));
        }
        Ok(DecoderNodes { layers })
    }

    pub fn forward_taped(&self, tape: &mut GradTape, nodes: &DecoderNodes, t: NodeId) -> Result<NodeId> {
        let shape = tape
            .value(t)
            .as_tensor()
            .ok_or_else(|| Error::shape("decoder", "input node is not a tensor"))?
            .shape();
        self.check_input(shape)?;
        let last = nodes.layers.len() - 1;
        let mut h = t;
        for (i, &(k, b)) in nodes.layers.iter().enumerate() {
            h = tape.conv2d(h, k, b)?;
            if i < last {
                h = tape.relu(h)?;
                h = tape.upsample2(h)?;
            }
        }
        Ok(h)
    }
}

fn find<'a>(named: &'a [NamedTensor], name: &str) -> Result<&'a NamedTensor> {
    named
        .iter()
        .find(|t| t.name == name)
        .ok_or_else(|| Error::format(name, "missing"))
}
