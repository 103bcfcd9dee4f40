//! Per-instance, per-channel feature statistics and whitening.

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Tensor4};

pub const DEFAULT_EPS: f64 = 1e-5;

/// Mean and eps-guarded standard deviation of every `(n, c)` plane.
///
/// `std[n, c] = sqrt(var[n, c] + eps)` with the population variance, so
/// every std entry is at least `sqrt(eps)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: Matrix,
    pub std: Matrix,
    pub eps: f64,
}

fn plane_mean(plane: &[f64]) -> f64 {
    plane.iter().sum::<f64>() / plane.len() as f64
}

fn plane_variance(plane: &[f64], mean: f64) -> f64 {
    plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / plane.len() as f64
}

pub fn channel_means(x: &Tensor4) -> Matrix {
    let s = x.shape();
    let mut mean = Matrix::zeros(s.n, s.c);
    for n in 0..s.n {
        for c in 0..s.c {
            mean.set(n, c, plane_mean(x.plane(n, c)));
        }
    }
    mean
}

pub fn compute_stats(x: &Tensor4, eps: f64) -> ChannelStats {
    assert!(eps > 0.0, "eps must be positive");
    let s = x.shape();
    let mut mean = Matrix::zeros(s.n, s.c);
    let mut std = Matrix::zeros(s.n, s.c);
    for n in 0..s.n {
        for c in 0..s.c {
            let p = x.plane(n, c);
            let m = plane_mean(p);
            mean.set(n, c, m);
            std.set(n, c, (plane_variance(p, m) + eps).sqrt());
        }
    }
    ChannelStats { mean, std, eps }
}

impl ChannelStats {
    pub fn batch(&self) -> usize {
        self.mean.rows()
    }

    pub fn channels(&self) -> usize {
        self.mean.cols()
    }

    fn check_against(&self, x: &Tensor4, op: &'static str) -> Result<()> {
        let s = x.shape();
        if self.batch() != s.n || self.channels() != s.c {
            return Err(Error::shape(
                op,
                format!("stats for {}x{} applied to tensor {s}", self.batch(), self.channels()),
            ));
        }
        Ok(())
    }
}

/// `(x - mean) / std` per `(n, c)` plane.
pub fn whiten(x: &Tensor4, stats: &ChannelStats) -> Result<Tensor4> {
    stats.check_against(x, "whiten")?;
    let s = x.shape();
    let mut out = x.clone();
    for n in 0..s.n {
        for c in 0..s.c {
            let m = stats.mean.get(n, c);
            let inv = 1.0 / stats.std.get(n, c);
            out.plane_mut(n, c).iter_mut().for_each(|v| *v = (*v - m) * inv);
        }
    }
    Ok(out)
}
