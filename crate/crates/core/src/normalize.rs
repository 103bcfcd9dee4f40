//! Adaptive instance normalization and its graph-smoothed variant.

use crate::error::{Error, Result};
use crate::graph::{build_adjacency, smooth_means, AdjacencyVariant, GraphStack, Mode, DEFAULT_EPS_DEGREE};
use crate::stats::{compute_stats, whiten, DEFAULT_EPS};
use crate::tensor::{Matrix, Tensor4};

#[derive(Debug, Clone, Copy)]
pub struct GrinConfig<'a> {
    pub eps: f64,
    pub mode: Mode,
    pub adjacency_variant: AdjacencyVariant,
    pub eps_degree: f64,
    /// Required in train mode, ignored in infer mode.
    pub stack: Option<&'a GraphStack>,
}

impl<'a> GrinConfig<'a> {
    pub fn train(stack: &'a GraphStack) -> Self {
        GrinConfig {
            eps: DEFAULT_EPS,
            mode: Mode::Train,
            adjacency_variant: AdjacencyVariant::Gram,
            eps_degree: DEFAULT_EPS_DEGREE,
            stack: Some(stack),
        }
    }

    pub fn infer() -> Self {
        GrinConfig {
            eps: DEFAULT_EPS,
            mode: Mode::Infer,
            adjacency_variant: AdjacencyVariant::Gram,
            eps_degree: DEFAULT_EPS_DEGREE,
            stack: None,
        }
    }

    pub fn with_eps(mut self, eps: f64) -> Self {
        self.eps = eps;
        self
    }

    pub fn with_variant(mut self, variant: AdjacencyVariant) -> Self {
        self.adjacency_variant = variant;
        self
    }
}

fn check_pair(x: &Tensor4, y: &Tensor4, op: &'static str) -> Result<()> {
    let (xs, ys) = (x.shape(), y.shape());
    if xs.n != ys.n || xs.c != ys.c {
        return Err(Error::shape(op, format!("content {xs} vs style {ys}")));
    }
    Ok(())
}

/// `σ(y) · whiten(x) + bias`, the shared tail of both normalizations.
fn recolor(x: &Tensor4, style_std: &Matrix, bias: &Matrix, eps: f64) -> Result<Tensor4> {
    let normalized = whiten(x, &compute_stats(x, eps))?;
    normalized.channel_mul(style_std)?.channel_add(bias)
}

pub fn adain(x: &Tensor4, y: &Tensor4, eps: f64) -> Result<Tensor4> {
    check_pair(x, y, "adain")?;
    let style = compute_stats(y, eps);
    recolor(x, &style.std, &style.mean, eps)
}

/// Graph instance normalization.
///
/// In train mode the style means are smoothed over the batch graph built
/// from `y`; the style std is never smoothed. In infer mode this is exactly
/// [`adain`].
pub fn grin(x: &Tensor4, y: &Tensor4, cfg: &GrinConfig<'_>) -> Result<Tensor4> {
    match cfg.mode {
        Mode::Infer => adain(x, y, cfg.eps),
        Mode::Train => {
            check_pair(x, y, "grin")?;
            let stack = cfg.stack.ok_or_else(|| {
                Error::Config("grin in train mode needs a graph stack".to_string())
            })?;
            let style = compute_stats(y, cfg.eps);
            let bias = smoothed_style_means(y, &style.mean, cfg, stack)?;
            recolor(x, &style.std, &bias, cfg.eps)
        }
    }
}

fn smoothed_style_means(y: &Tensor4, mean: &Matrix, cfg: &GrinConfig<'_>, stack: &GraphStack) -> Result<Matrix> {
    let adj = build_adjacency(y, cfg.adjacency_variant, cfg.eps_degree);
    smooth_means(mean, &adj, stack)
}
