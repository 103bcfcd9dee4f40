//! Content loss, multi-layer statistics style loss, and their weighted sum.

use crate::error::{Error, Result};
use crate::stats::compute_stats;
use crate::tensor::{max_abs_diff, Tensor4};

pub const DEFAULT_LAMBDA: f64 = 10.0;

/// How squared differences are reduced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reduction {
    /// Plain sum of squares.
    #[default]
    Sum,
    /// Sum of squares divided by the number of compared elements.
    Mean,
}

impl std::str::FromStr for Reduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Reduction::Sum),
            "mean" => Ok(Reduction::Mean),
            other => Err(Error::Config(format!("unknown reduction `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub lambda: f64,
    /// Encoder taps compared by the style loss.
    pub style_layers: Vec<usize>,
    pub reduction: Reduction,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: DEFAULT_LAMBDA,
            style_layers: vec![0, 1, 2, 3],
            reduction: Reduction::Sum,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if self.style_layers.is_empty() {
            return Err(Error::Config("at least one style layer is required".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub content: f64,
    pub style: f64,
    pub total: f64,
    pub per_layer_style: Vec<f64>,
}

fn squared_distance(a: &[f64], b: &[f64], reduction: Reduction) -> f64 {
    let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    match reduction {
        Reduction::Sum => s,
        Reduction::Mean => s / a.len() as f64,
    }
}

/// `‖reencoded - target‖²`.
pub fn content_loss(reencoded: &Tensor4, target: &Tensor4) -> Result<f64> {
    content_loss_with(reencoded, target, Reduction::Sum)
}

pub fn content_loss_with(reencoded: &Tensor4, target: &Tensor4, reduction: Reduction) -> Result<f64> {
    if reencoded.shape() != target.shape() {
        return Err(Error::shape(
            "content_loss",
            format!("{} vs {}", reencoded.shape(), target.shape()),
        ));
    }
    Ok(squared_distance(reencoded.data(), target.data(), reduction))
}

/// Sum over layers of squared mean and std gaps. Returns the total and the
/// per-layer contributions.
pub fn style_loss(output_feats: &[Tensor4], style_feats: &[Tensor4], eps: f64) -> Result<(f64, Vec<f64>)> {
    style_loss_with(output_feats, style_feats, eps, Reduction::Sum)
}

pub fn style_loss_with(
    output_feats: &[Tensor4],
    style_feats: &[Tensor4],
    eps: f64,
    reduction: Reduction,
) -> Result<(f64, Vec<f64>)> {
    if output_feats.len() != style_feats.len() {
        return Err(Error::shape(
            "style_loss",
            format!("{} output layers vs {} style layers", output_feats.len(), style_feats.len()),
        ));
    }
    let mut per_layer = Vec::with_capacity(output_feats.len());
    for (i, (o, s)) in output_feats.iter().zip(style_feats).enumerate() {
        let (os, ss) = (o.shape(), s.shape());
        if os.n != ss.n || os.c != ss.c {
            return Err(Error::shape("style_loss", format!("layer {i}: {os} vs {ss}")));
        }
        let a = compute_stats(o, eps);
        let b = compute_stats(s, eps);
        per_layer.push(
            squared_distance(a.mean.data(), b.mean.data(), reduction)
                + squared_distance(a.std.data(), b.std.data(), reduction),
        );
    }
    Ok((per_layer.iter().sum(), per_layer))
}

pub fn total_loss(content: f64, style: f64, weights: &LossWeights) -> f64 {
    content + weights.lambda * style
}

impl LossReport {
    pub fn new(content: f64, per_layer_style: Vec<f64>, weights: &LossWeights) -> Self {
        let style = per_layer_style.iter().sum();
        LossReport {
            content,
            style,
            total: total_loss(content, style, weights),
            per_layer_style,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.content.is_finite() && self.style.is_finite() && self.total.is_finite()
    }
}

/// True when all per-layer statistics of two feature lists agree within `tol`.
pub fn statistics_match(a: &[Tensor4], b: &[Tensor4], eps: f64, tol: f64) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            let (sx, sy) = (compute_stats(x, eps), compute_stats(y, eps));
            max_abs_diff(sx.mean.data(), sy.mean.data()) <= tol && max_abs_diff(sx.std.data(), sy.std.data()) <= tol
        })
}
