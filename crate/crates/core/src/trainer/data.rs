//! Deterministic synthetic content and style images.
//!
//! Content images are flat backgrounds with a few filled rectangles and
//! discs. Style images are two-colour oriented stripe fields with grain;
//! every style belongs to one of a fixed set of clusters that share palette,
//! stripe frequency and orientation up to small jitter.

use crate::rng::Rng;
use crate::tensor::{Shape4, Tensor4};

pub const NUM_STYLE_CLUSTERS: usize = 4;
const CLUSTER_TABLE_SEED: u64 = 0x5354_594C_4553;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPair {
    /// `(1, 3, size, size)`, values in `[0, 1]`.
    pub content: Tensor4,
    pub style: Tensor4,
    pub cluster: usize,
}

/// A batch of pairs stacked along the batch axis.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticBatch {
    pub content: Tensor4,
    pub style: Tensor4,
    pub clusters: Vec<usize>,
}

#[derive(Debug, Clone, Copy)]
struct StyleFamily {
    colors: [[f64; 3]; 2],
    /// Stripe periods across the image.
    frequency: f64,
    angle: f64,
    grain: f64,
}

fn families() -> [StyleFamily; NUM_STYLE_CLUSTERS] {
    let mut rng = Rng::new(CLUSTER_TABLE_SEED);
    std::array::from_fn(|k| {
        let mut color = || [rng.uniform(), rng.uniform(), rng.uniform()];
        let colors = [color(), color()];
        StyleFamily {
            colors,
            frequency: 1.5 + 1.5 * k as f64 + rng.uniform(),
            angle: std::f64::consts::PI * (k as f64 + 0.5 * rng.uniform()) / NUM_STYLE_CLUSTERS as f64,
            grain: 0.02 + 0.06 * rng.uniform(),
        }
    })
}

fn to_tensor(size: usize, pixel: impl Fn(usize, usize, usize) -> f64) -> Tensor4 {
    let mut t = Tensor4::zeros(Shape4::new(1, 3, size, size));
    for c in 0..3 {
        for y in 0..size {
            for x in 0..size {
                t.set(0, c, y, x, pixel(c, y, x).clamp(0.0, 1.0));
            }
        }
    }
    t
}

pub fn generate_content(rng: &mut Rng, size: usize) -> Tensor4 {
    let background = [rng.uniform(), rng.uniform(), rng.uniform()];
    let mut canvas = vec![background; size * size];
    let shapes = 2 + rng.below(3);
    for _ in 0..shapes {
        let color = [rng.uniform(), rng.uniform(), rng.uniform()];
        let cx = rng.uniform_range(0.0, size as f64);
        let cy = rng.uniform_range(0.0, size as f64);
        let r = rng.uniform_range(0.1, 0.35) * size as f64;
        let disc = rng.uniform() < 0.5;
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let inside = if disc {
                    dx * dx + dy * dy <= r * r
                } else {
                    dx.abs() <= r && dy.abs() <= 0.6 * r
                };
                if inside {
                    canvas[y * size + x] = color;
                }
            }
        }
    }
    to_tensor(size, |c, y, x| canvas[y * size + x][c])
}

pub fn generate_style(rng: &mut Rng, size: usize, cluster: usize) -> Tensor4 {
    let fam = families()[cluster % NUM_STYLE_CLUSTERS];
    let jitter = |rng: &mut Rng, v: f64, a: f64| v + rng.uniform_range(-a, a);
    let colors: Vec<[f64; 3]> = fam
        .colors
        .iter()
        .map(|col| std::array::from_fn(|c| jitter(rng, col[c], 0.05)))
        .collect();
    let freq = fam.frequency * jitter(rng, 1.0, 0.1);
    let angle = jitter(rng, fam.angle, 0.1);
    let phase = rng.uniform_range(0.0, std::f64::consts::TAU);
    let noise: Vec<f64> = (0..3 * size * size).map(|_| fam.grain * rng.normal()).collect();
    let (ca, sa) = (angle.cos(), angle.sin());
    to_tensor(size, |c, y, x| {
        let u = (x as f64 * ca + y as f64 * sa) / size as f64;
        let mix = 0.5 + 0.5 * (std::f64::consts::TAU * freq * u + phase).sin();
        colors[0][c] * (1.0 - mix) + colors[1][c] * mix + noise[(c * size + y) * size + x]
    })
}

/// Content image, then a style from a uniformly drawn cluster.
pub fn generate_pair(rng: &mut Rng, size: usize) -> SyntheticPair {
    let content = generate_content(rng, size);
    let cluster = rng.below(NUM_STYLE_CLUSTERS);
    let style = generate_style(rng, size, cluster);
    SyntheticPair {
        content,
        style,
        cluster,
    }
}

pub fn generate_batch(rng: &mut Rng, batch: usize, size: usize) -> SyntheticBatch {
    let pairs: Vec<SyntheticPair> = (0..batch).map(|_| generate_pair(rng, size)).collect();
    let content: Vec<Tensor4> = pairs.iter().map(|p| p.content.clone()).collect();
    let style: Vec<Tensor4> = pairs.iter().map(|p| p.style.clone()).collect();
    SyntheticBatch {
        content: Tensor4::stack(&content).expect("equal shapes"),
        style: Tensor4::stack(&style).expect("equal shapes"),
        clusters: pairs.iter().map(|p| p.cluster).collect(),
    }
}
