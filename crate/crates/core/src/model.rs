//! The full style-transfer network: frozen encoder, graph-smoothed
//! normalization, trainable decoder, and the training objective.
//!
//! Every forward computation exists twice: a plain path built from the
//! public tensor functions, and a taped path used for gradients. The plain
//! path is what finite differences are taken through.

use crate::error::{Error, Result};
use crate::graph::{build_adjacency, Activation, AdjacencyVariant, GraphStack, Mode, ThetaForm};
use crate::graph::{DEFAULT_EPS_DEGREE, DEFAULT_NUM_LAYERS, DEFAULT_THETA_NOISE};
use crate::losses::{content_loss_with, style_loss_with, LossReport, LossWeights, Reduction};
use crate::net::{DecoderParams, Encoder, GradTape, NodeId, Value};
use crate::normalize::{grin, GrinConfig};
use crate::params::NamedTensor;
use crate::rng::Rng;
use crate::stats::{compute_stats, DEFAULT_EPS};
use crate::tensor::{Matrix, Tensor4};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub eps: f64,
    pub mode: Mode,
    pub adjacency_variant: AdjacencyVariant,
    pub eps_degree: f64,
    pub activation: Activation,
    pub num_layers: usize,
    pub theta_form: ThetaForm,
    pub theta_noise: f64,
    pub weights: LossWeights,
    /// Treat the normalized target as a constant in the content loss.
    pub detach_target: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            eps: DEFAULT_EPS,
            mode: Mode::Train,
            adjacency_variant: AdjacencyVariant::Gram,
            eps_degree: DEFAULT_EPS_DEGREE,
            activation: Activation::None,
            num_layers: DEFAULT_NUM_LAYERS,
            theta_form: ThetaForm::Full,
            theta_noise: DEFAULT_THETA_NOISE,
            weights: LossWeights::default(),
            detach_target: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        if !(self.eps_degree > 0.0) {
            return Err(Error::Config(format!("eps_degree must be positive, got {}", self.eps_degree)));
        }
        if self.num_layers == 0 {
            return Err(Error::Config("at least one graph layer is required".into()));
        }
        self.weights.validate()?;
        if let Some(&bad) = self.weights.style_layers.iter().find(|&&l| l >= crate::net::NUM_TAPS) {
            return Err(Error::Config(format!("style layer {bad} does not exist")));
        }
        Ok(())
    }
}

/// Encoder features of one content/style batch, computed once per step.
#[derive(Debug, Clone)]
pub struct BatchFeatures {
    /// Deepest content tap.
    pub content: Tensor4,
    /// Every style tap, shallowest first.
    pub style_taps: Vec<Tensor4>,
}

impl BatchFeatures {
    pub fn style_deepest(&self) -> &Tensor4 {
        self.style_taps.last().expect("style taps")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StyleNet {
    pub encoder: Encoder,
    pub decoder: DecoderParams,
    pub graph: GraphStack,
    pub config: ModelConfig,
}

impl StyleNet {
    /// Fresh decoder and graph weights drawn from `rng`; the encoder is the
    /// fixed default.
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let encoder = Encoder::default();
        let decoder = DecoderParams::init(rng);
        let graph = GraphStack::init(
            encoder.deepest_channels(),
            config.num_layers,
            config.theta_form,
            config.theta_noise,
            rng,
        )
        .with_activation(config.activation)
        .with_mode(config.mode);
        Ok(StyleNet {
            encoder,
            decoder,
            graph,
            config,
        })
    }

    /// Infer-mode network from saved parameters. Only decoder entries are
    /// read; graph weights may be absent.
    pub fn for_inference(named: &[NamedTensor]) -> Result<Self> {
        let config = ModelConfig {
            mode: Mode::Infer,
            ..ModelConfig::default()
        };
        let mut net = StyleNet::new(config, &mut Rng::new(0))?;
        net.decoder.assign_from(named)?;
        Ok(net)
    }

    pub fn encode_batch(&self, content: &Tensor4, style: &Tensor4) -> Result<BatchFeatures> {
        let content = self.encoder.forward(content)?.taps.pop().expect("taps");
        let style_taps = self.encoder.forward(style)?.taps;
        Ok(BatchFeatures { content, style_taps })
    }

    pub fn grin_config(&self) -> GrinConfig<'_> {
        GrinConfig {
            eps: self.config.eps,
            mode: self.config.mode,
            adjacency_variant: self.config.adjacency_variant,
            eps_degree: self.config.eps_degree,
            stack: Some(&self.graph),
        }
    }

    /// The normalized target features `t`.
    pub fn target(&self, feats: &BatchFeatures) -> Result<Tensor4> {
        grin(&feats.content, feats.style_deepest(), &self.grin_config())
    }

    pub fn loss(&self, feats: &BatchFeatures) -> Result<LossReport> {
        self.loss_inner(feats, None)
    }

    /// Loss with the content-loss target pinned to `target`.
    pub fn loss_with_target(&self, feats: &BatchFeatures, target: &Tensor4) -> Result<LossReport> {
        self.loss_inner(feats, Some(target))
    }

    fn loss_inner(&self, feats: &BatchFeatures, pinned: Option<&Tensor4>) -> Result<LossReport> {
        let w = &self.config.weights;
        let t = self.target(feats)?;
        let out = self.decoder.forward(&t)?;
        let reencoded = self.encoder.forward(&out)?;
        let content = content_loss_with(reencoded.deepest(), pinned.unwrap_or(&t), w.reduction)?;
        let outs: Vec<Tensor4> = w.style_layers.iter().map(|&i| reencoded.taps[i].clone()).collect();
        let stys: Vec<Tensor4> = w.style_layers.iter().map(|&i| feats.style_taps[i].clone()).collect();
        let (_, per_layer) = style_loss_with(&outs, &stys, self.config.eps, w.reduction)?;
        Ok(LossReport::new(content, per_layer, w))
    }

    /// Records the whole objective on `tape` and returns the loss node.
    pub fn loss_taped(&self, feats: &BatchFeatures, tape: &mut GradTape) -> Result<(NodeId, LossReport)> {
        let cfg = &self.config;
        let w = &cfg.weights;
        let y = feats.style_deepest();
        if feats.content.shape().n != y.shape().n || feats.content.shape().c != y.shape().c {
            return Err(Error::shape(
                "grin",
                format!("content {} vs style {}", feats.content.shape(), y.shape()),
            ));
        }

        let x = tape.constant_tensor(feats.content.clone());
        let z = tape.whiten(x, cfg.eps)?;
        let style = compute_stats(y, cfg.eps);
        let scale = tape.constant_matrix(style.std);
        let mut bias = tape.constant_matrix(style.mean);
        if cfg.mode == Mode::Train {
            let adj = build_adjacency(y, cfg.adjacency_variant, cfg.eps_degree);
            for (i, layer) in self.graph.layers.iter().enumerate() {
                if i > 0 && self.graph.activation == Activation::Relu {
                    bias = tape.relu(bias)?;
                }
                bias = tape.propagate(&adj.propagation, bias)?;
                let theta = tape.param(GraphStack::param_name(i), Value::Matrix(layer.clone()))?;
                bias = match self.graph.form {
                    ThetaForm::Full => tape.matmul(bias, theta)?,
                    ThetaForm::Diagonal => tape.scale_cols(bias, theta)?,
                };
            }
        }
        let t = tape.affine(z, scale, bias)?;

        let dec = self.decoder.register(tape)?;
        let out = self.decoder.forward_taped(tape, &dec, t)?;
        let taps = self.encoder.forward_taped(tape, out)?;

        let target = if cfg.detach_target {
            let v = tape.tensor(t).clone();
            tape.constant_tensor(v)
        } else {
            t
        };
        let deepest = *taps.last().expect("taps");
        let content_scale = reduction_scale(w.reduction, tape.tensor(deepest).data().len());
        let content = tape.sq_dist(deepest, target, content_scale)?;

        let mut terms = vec![(content, 1.0)];
        let mut per_layer = Vec::with_capacity(w.style_layers.len());
        for &i in &w.style_layers {
            let ref_stats = compute_stats(&feats.style_taps[i], cfg.eps);
            let stat_scale = reduction_scale(w.reduction, ref_stats.mean.data().len());
            let m = tape.channel_mean(taps[i])?;
            let s = tape.channel_std(taps[i], cfg.eps)?;
            let ref_m = tape.constant_matrix(ref_stats.mean);
            let ref_s = tape.constant_matrix(ref_stats.std);
            let lm = tape.sq_dist(m, ref_m, stat_scale)?;
            let ls = tape.sq_dist(s, ref_s, stat_scale)?;
            per_layer.push(tape.scalar(lm) + tape.scalar(ls));
            terms.push((lm, w.lambda));
            terms.push((ls, w.lambda));
        }
        let total = tape.weighted_sum(&terms)?;
        let report = LossReport::new(tape.scalar(content), per_layer, w);
        Ok((total, report))
    }

    /// Sign pattern of every rectifier input in one evaluation of the
    /// objective. Two parameter settings with equal patterns lie on the same
    /// linear piece of every rectifier.
    pub fn relu_pattern(&self, feats: &BatchFeatures) -> Result<Vec<bool>> {
        let mut tape = GradTape::new();
        self.loss_taped(feats, &mut tape)?;
        Ok(tape.relu_pattern())
    }

    /// Runs the infer-mode path: encode, plain AdaIN, decode.
    pub fn stylize(&self, content: &Tensor4, style: &Tensor4) -> Result<Tensor4> {
        let x = self.encoder.forward(content)?.taps.pop().expect("taps");
        let y = self.encoder.forward(style)?.taps.pop().expect("taps");
        let t = grin(&x, &y, &GrinConfig::infer().with_eps(self.config.eps))?;
        self.decoder.forward(&t)
    }

    pub fn graph_params(&self) -> Vec<NamedTensor> {
        self.graph
            .layers
            .iter()
            .enumerate()
            .map(|(i, m)| NamedTensor::from_matrix(GraphStack::param_name(i), m))
            .collect()
    }

    /// Decoder parameters followed by the graph weights.
    pub fn params(&self) -> Vec<NamedTensor> {
        let mut out = self.decoder.to_named();
        out.extend(self.graph_params());
        out
    }

    /// Loads parameters by name. Graph weights are optional: when absent the
    /// current ones are kept.
    pub fn assign_params(&mut self, named: &[NamedTensor]) -> Result<()> {
        self.decoder.assign_from(named)?;
        let present = (0..self.graph.num_layers())
            .filter(|&i| named.iter().any(|t| t.name == GraphStack::param_name(i)))
            .count();
        if present == 0 {
            return Ok(());
        }
        let mut layers = Vec::with_capacity(self.graph.num_layers());
        for (i, layer) in self.graph.layers.iter().enumerate() {
            let name = GraphStack::param_name(i);
            let t = named
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| Error::format(name.clone(), "missing while other graph layers are present"))?;
            if t.dims != [layer.rows(), layer.cols()] {
                return Err(Error::format(
                    name,
                    format!("dims {:?}, expected [{}, {}]", t.dims, layer.rows(), layer.cols()),
                ));
            }
            layers.push(Matrix::from_vec(layer.rows(), layer.cols(), t.data.clone())?);
        }
        self.graph.layers = layers;
        Ok(())
    }

    pub fn has_finite_params(&self) -> bool {
        self.decoder.is_finite() && self.graph.layers.iter().all(Matrix::is_finite)
    }
}

fn reduction_scale(r: Reduction, len: usize) -> f64 {
    match r {
        Reduction::Sum => 1.0,
        Reduction::Mean => 1.0 / len as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::normalize::adain;
    use crate::tensor::Shape4;

    fn batch(seed: u64, n: usize, size: usize) -> (Tensor4, Tensor4) {
        let mut rng = Rng::new(seed);
        let s = Shape4::new(n, 3, size, size);
        (Tensor4::rand_uniform(s, 0.0, 1.0, &mut rng), Tensor4::rand_uniform(s, 0.0, 1.0, &mut rng))
    }

    #[test]
    fn taped_loss_matches_plain_loss() {
        for detach in [false, true] {
            for reduction in [Reduction::Sum, Reduction::Mean] {
                let mut cfg = ModelConfig {
                    detach_target: detach,
                    ..ModelConfig::default()
                };
                cfg.weights.reduction = reduction;
                let net = StyleNet::new(cfg, &mut Rng::new(1)).unwrap();
                let (c, s) = batch(2, 2, 16);
                let feats = net.encode_batch(&c, &s).unwrap();
                let plain = net.loss(&feats).unwrap();
                let mut tape = GradTape::new();
                let (node, taped) = net.loss_taped(&feats, &mut tape).unwrap();
                assert!((plain.total - taped.total).abs() <= 1e-10 * plain.total.abs().max(1.0));
                assert!((tape.scalar(node) - taped.total).abs() <= 1e-10 * plain.total.abs().max(1.0));
                assert!((plain.content - taped.content).abs() <= 1e-10 * plain.content.abs().max(1.0));
            }
        }
    }

    #[test]
    fn report_total_identity() {
        let net = StyleNet::new(ModelConfig::default(), &mut Rng::new(3)).unwrap();
        let (c, s) = batch(4, 2, 16);
        let r = net.loss(&net.encode_batch(&c, &s).unwrap()).unwrap();
        assert_eq!(r.total, r.content + 10.0 * r.style);
        assert_eq!(r.per_layer_style.len(), 4);
    }

    #[test]
    fn infer_mode_registers_no_graph_params() {
        let cfg = ModelConfig {
            mode: Mode::Infer,
            ..ModelConfig::default()
        };
        let net = StyleNet::new(cfg, &mut Rng::new(5)).unwrap();
        let (c, s) = batch(6, 2, 16);
        let feats = net.encode_batch(&c, &s).unwrap();
        let mut tape = GradTape::new();
        let (loss, _) = net.loss_taped(&feats, &mut tape).unwrap();
        let g = tape.backward(loss, 1.0).unwrap();
        assert!(g.get("graph.0.theta").is_none());
        assert_eq!(g.len(), 8);
    }

    #[test]
    fn stylize_is_adain_then_decode() {
        let net = StyleNet::new(ModelConfig::default(), &mut Rng::new(7)).unwrap();
        let (c, s) = batch(8, 1, 16);
        let out = net.stylize(&c, &s).unwrap();
        let x = net.encoder.forward(&c).unwrap().taps.pop().unwrap();
        let y = net.encoder.forward(&s).unwrap().taps.pop().unwrap();
        let reference = net.decoder.forward(&adain(&x, &y, DEFAULT_EPS).unwrap()).unwrap();
        assert_eq!(out.data(), reference.data());
    }

    #[test]
    fn params_round_trip_and_optional_graph() {
        let a = StyleNet::new(ModelConfig::default(), &mut Rng::new(9)).unwrap();
        let mut b = StyleNet::new(ModelConfig::default(), &mut Rng::new(10)).unwrap();
        b.assign_params(&a.params()).unwrap();
        assert_eq!(a.params(), b.params());

        let mut c = StyleNet::new(ModelConfig::default(), &mut Rng::new(11)).unwrap();
        let graph_before = c.graph.clone();
        c.assign_params(&a.decoder.to_named()).unwrap();
        assert_eq!(c.decoder, a.decoder);
        assert_eq!(c.graph, graph_before);
    }

    #[test]
    fn bad_style_layer_rejected() {
        let mut cfg = ModelConfig::default();
        cfg.weights.style_layers = vec![0, 7];
        assert!(StyleNet::new(cfg, &mut Rng::new(0)).is_err());
    }
}
