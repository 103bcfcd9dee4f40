//! Central finite differences and the gradient certification suite.
//!
//! Each tape primitive is checked in isolation on every coordinate, then the
//! whole training objective is checked against the untaped forward path.

use crate::error::{Error, Result};
use crate::graph::{build_adjacency, AdjacencyVariant, DEFAULT_EPS_DEGREE};
use crate::model::{BatchFeatures, ModelConfig, StyleNet};
use crate::net::{GradTape, NodeId, Value};
use crate::params::{GradientSet, NamedTensor};
use crate::rng::Rng;
use crate::stats::DEFAULT_EPS;
use crate::tensor::{Matrix, Shape4, Tensor4};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Denominator floor for relative errors of coordinates whose true
/// gradient is zero.
pub const RELATIVE_FLOOR: f64 = 1e-8;

/// `|a - n| / max(|a|, |n|, RELATIVE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Central difference `(f(p + h) - f(p - h)) / 2h` for every coordinate of
/// every parameter.
pub fn finite_diff_grad<F>(f: F, params: &[NamedTensor], h: f64) -> GradientSet
where
    F: FnMut(&[NamedTensor]) -> f64,
{
    let all: Vec<Vec<usize>> = params.iter().map(|p| (0..p.len()).collect()).collect();
    let values = finite_diff_at(f, params, h, &all);
    GradientSet::new(
        params
            .iter()
            .zip(values)
            .map(|(p, v)| NamedTensor::new(p.name.clone(), p.dims.clone(), v))
            .collect(),
    )
}

/// Central differences at selected coordinates only; `coords[i]` lists the
/// flat indices probed in `params[i]`. The result is aligned with `coords`.
pub fn finite_diff_at<F>(mut f: F, params: &[NamedTensor], h: f64, coords: &[Vec<usize>]) -> Vec<Vec<f64>>
where
    F: FnMut(&[NamedTensor]) -> f64,
{
    assert!(h > 0.0, "finite difference step must be positive");
    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for (i, idx) in coords.iter().enumerate() {
        let mut g = vec![0.0; idx.len()];
        for (slot, &j) in idx.iter().enumerate() {
            let orig = work[i].data[j];
            work[i].data[j] = orig + h;
            let fp = f(&work);
            work[i].data[j] = orig - h;
            let fm = f(&work);
            work[i].data[j] = orig;
            g[slot] = (fp - fm) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupError {
    pub group: String,
    pub max_rel_error: f64,
    pub coords: usize,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
    /// Probed coordinates whose `±h` evaluations switched some rectifier
    /// relative to each other, so the central difference spans a kink.
    pub kinked: usize,
    /// Worst error over the coordinates that did not span a kink.
    pub max_rel_error_smooth: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub seed: u64,
    pub groups: Vec<GroupError>,
}

impl GradcheckReport {
    pub fn max_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }

    /// Groups at or above `tolerance`.
    pub fn failing(&self, tolerance: f64) -> Vec<&GroupError> {
        self.groups.iter().filter(|g| !(g.max_rel_error < tolerance)).collect()
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.failing(tolerance).is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct SuiteOptions {
    pub h: f64,
    pub batch: usize,
    pub image_size: usize,
    /// Coordinates probed per end-to-end parameter tensor; `None` probes all.
    pub samples_per_tensor: Option<usize>,
    pub model: ModelConfig,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            h: DEFAULT_STEP,
            batch: 2,
            image_size: 16,
            samples_per_tensor: Some(24),
            model: ModelConfig::default(),
        }
    }
}

/// Primitive checks followed by the end-to-end objective, with the content
/// target both differentiable and detached.
pub fn run_suite(seed: u64, opts: &SuiteOptions) -> Result<GradcheckReport> {
    let mut groups = check_primitives(seed, opts.h)?;
    for detach in [false, true] {
        let model = ModelConfig {
            detach_target: detach,
            ..opts.model.clone()
        };
        let prefix = if detach { "model-detached" } else { "model" };
        groups.extend(check_model(seed, &model, opts, prefix)?);
    }
    Ok(GradcheckReport { seed, groups })
}

fn value_from_named(t: &NamedTensor) -> Result<Value> {
    match t.dims.len() {
        0 => Ok(Value::Scalar(t.data[0])),
        2 => Ok(Value::Matrix(t.to_matrix()?)),
        4 => Ok(Value::Tensor(t.to_tensor()?)),
        r => Err(Error::shape("gradcheck", format!("unsupported rank {r} for {}", t.name))),
    }
}

fn random_like(v: &Value, rng: &mut Rng) -> Value {
    match v {
        Value::Tensor(t) => Value::Tensor(Tensor4::randn(t.shape(), 1.0, rng)),
        Value::Matrix(m) => Value::Matrix(Matrix::randn(m.rows(), m.cols(), 1.0, rng)),
        Value::Scalar(_) => Value::Scalar(rng.normal()),
    }
}

type Build = Box<dyn Fn(&mut GradTape, &[NodeId]) -> Result<NodeId>>;

struct Case {
    name: &'static str,
    inputs: Vec<NamedTensor>,
    build: Build,
}

/// Normal draws pushed at least `margin` away from zero.
fn off_kink(t: Tensor4, margin: f64) -> Tensor4 {
    t.map(|v| if v >= 0.0 { v + margin } else { v - margin })
}

fn cases(rng: &mut Rng) -> Vec<Case> {
    let t = |rng: &mut Rng, n, c, h, w| Tensor4::randn(Shape4::new(n, c, h, w), 1.0, rng);
    let m = |rng: &mut Rng, r, c| Matrix::randn(r, c, 1.0, rng);
    let tn = |name: &str, x: Tensor4| NamedTensor::from_tensor(name, &x);
    let mn = |name: &str, x: Matrix| NamedTensor::from_matrix(name, &x);

    let style = Tensor4::rand_uniform(Shape4::new(4, 3, 2, 2), 0.0, 1.0, rng);
    let propagation = build_adjacency(&style, AdjacencyVariant::Gram, DEFAULT_EPS_DEGREE).propagation;

    vec![
        Case {
            name: "conv2d",
            inputs: vec![
                tn("x", t(rng, 2, 3, 5, 5)),
                tn("kernel", t(rng, 4, 3, 3, 3)),
                mn("bias", m(rng, 1, 4)),
            ],
            build: Box::new(|tp, n| tp.conv2d(n[0], n[1], n[2])),
        },
        Case {
            name: "relu",
            inputs: vec![tn("x", off_kink(t(rng, 2, 2, 3, 3), 1e-2))],
            build: Box::new(|tp, n| tp.relu(n[0])),
        },
        Case {
            name: "relu_matrix",
            inputs: vec![mn("x", m(rng, 3, 4).map(|v| if v >= 0.0 { v + 1e-2 } else { v - 1e-2 }))],
            build: Box::new(|tp, n| tp.relu(n[0])),
        },
        Case {
            name: "avg_pool2",
            inputs: vec![tn("x", t(rng, 2, 3, 4, 6))],
            build: Box::new(|tp, n| tp.avg_pool2(n[0])),
        },
        Case {
            name: "upsample2",
            inputs: vec![tn("x", t(rng, 2, 2, 3, 3))],
            build: Box::new(|tp, n| tp.upsample2(n[0])),
        },
        Case {
            name: "channel_mean",
            inputs: vec![tn("x", t(rng, 2, 3, 4, 4))],
            build: Box::new(|tp, n| tp.channel_mean(n[0])),
        },
        Case {
            name: "channel_std",
            inputs: vec![tn("x", t(rng, 2, 3, 4, 4))],
            build: Box::new(|tp, n| tp.channel_std(n[0], DEFAULT_EPS)),
        },
        Case {
            name: "whiten",
            inputs: vec![tn("x", t(rng, 2, 3, 4, 4))],
            build: Box::new(|tp, n| tp.whiten(n[0], DEFAULT_EPS)),
        },
        Case {
            name: "affine",
            inputs: vec![tn("x", t(rng, 2, 3, 3, 3)), mn("scale", m(rng, 2, 3)), mn("bias", m(rng, 2, 3))],
            build: Box::new(|tp, n| tp.affine(n[0], n[1], n[2])),
        },
        Case {
            name: "propagate",
            inputs: vec![mn("x", m(rng, 4, 5))],
            build: Box::new(move |tp, n| tp.propagate(&propagation, n[0])),
        },
        Case {
            name: "matmul",
            inputs: vec![mn("a", m(rng, 3, 4)), mn("b", m(rng, 4, 5))],
            build: Box::new(|tp, n| tp.matmul(n[0], n[1])),
        },
        Case {
            name: "scale_cols",
            inputs: vec![mn("x", m(rng, 4, 5)), mn("d", m(rng, 1, 5))],
            build: Box::new(|tp, n| tp.scale_cols(n[0], n[1])),
        },
        Case {
            name: "sum",
            inputs: vec![tn("x", t(rng, 1, 2, 3, 3))],
            build: Box::new(|tp, n| tp.sum(n[0])),
        },
        Case {
            name: "sq_dist",
            inputs: vec![mn("a", m(rng, 2, 3)), mn("b", m(rng, 2, 3))],
            build: Box::new(|tp, n| tp.sq_dist(n[0], n[1], 0.7)),
        },
        Case {
            name: "weighted_sum",
            inputs: vec![mn("a", m(rng, 2, 3)), tn("x", t(rng, 1, 2, 2, 2))],
            build: Box::new(|tp, n| {
                let c = tp.constant_matrix(Matrix::filled(2, 3, 0.25));
                let d = tp.sq_dist(n[0], c, 1.0)?;
                let s = tp.sum(n[1])?;
                tp.weighted_sum(&[(d, 0.3), (s, -1.7)])
            }),
        },
    ]
}

/// Scalar loss on a fresh tape: the primitive output itself when scalar,
/// otherwise half its squared distance to a fixed random probe.
fn case_loss(case: &Case, params: &[NamedTensor], probe: &Option<Value>, tape: &mut GradTape) -> Result<NodeId> {
    let nodes = params
        .iter()
        .map(|p| tape.param(p.name.clone(), value_from_named(p)?))
        .collect::<Result<Vec<_>>>()?;
    let out = (case.build)(tape, &nodes)?;
    match probe {
        None => Ok(out),
        Some(r) => {
            let r = tape.constant(r.clone());
            tape.sq_dist(out, r, 0.5)
        }
    }
}

/// Checks every coordinate of every input of each primitive.
pub fn check_primitives(seed: u64, h: f64) -> Result<Vec<GroupError>> {
    let mut rng = Rng::new(seed);
    let mut groups = Vec::new();
    for case in cases(&mut rng) {
        let mut tape = GradTape::new();
        let nodes = case
            .inputs
            .iter()
            .map(|p| tape.param(p.name.clone(), value_from_named(p)?))
            .collect::<Result<Vec<_>>>()?;
        let out = (case.build)(&mut tape, &nodes)?;
        let probe = match tape.value(out) {
            Value::Scalar(_) => None,
            v => Some(random_like(v, &mut rng)),
        };
        let mut tape = GradTape::new();
        let loss = case_loss(&case, &case.inputs, &probe, &mut tape)?;
        let analytic = tape.backward(loss, 1.0)?;

        let numeric = finite_diff_grad(
            |p| {
                let mut tape = GradTape::new();
                let loss = case_loss(&case, p, &probe, &mut tape).expect("primitive forward");
                tape.scalar(loss)
            },
            &case.inputs,
            h,
        );
        for input in &case.inputs {
            let a = analytic.get(&input.name).expect("gradient for every input");
            let n = numeric.get(&input.name).expect("numeric gradient");
            let all: Vec<usize> = (0..input.len()).collect();
            groups.push(compare(format!("{}.{}", case.name, input.name), &a.data, &n.data, &all, &[]));
        }
    }
    Ok(groups)
}

fn compare(group: String, analytic: &[f64], numeric: &[f64], coords: &[usize], kinked: &[bool]) -> GroupError {
    let mut worst = (0.0, 0);
    let mut smooth = 0.0f64;
    for (k, &j) in coords.iter().enumerate() {
        let e = relative_error(analytic[j], numeric[k]);
        if e > worst.0 || e.is_nan() {
            worst = (e, j);
        }
        if !kinked.get(k).copied().unwrap_or(false) && !(e <= smooth) {
            smooth = e;
        }
    }
    GroupError {
        group,
        max_rel_error: worst.0,
        coords: coords.len(),
        worst_index: worst.1,
        kinked: kinked.iter().filter(|&&b| b).count(),
        max_rel_error_smooth: smooth,
    }
}

/// Random content and style images in `[0, 1]`.
pub fn random_batch(rng: &mut Rng, batch: usize, size: usize) -> (Tensor4, Tensor4) {
    let s = Shape4::new(batch, 3, size, size);
    let content = Tensor4::rand_uniform(s, 0.0, 1.0, rng);
    let style = Tensor4::rand_uniform(s, 0.0, 1.0, rng);
    (content, style)
}

/// Tape gradient of the full objective against central differences of the
/// untaped loss, per parameter tensor.
pub fn check_model(seed: u64, model: &ModelConfig, opts: &SuiteOptions, prefix: &str) -> Result<Vec<GroupError>> {
    let mut rng = Rng::new(seed);
    let net = StyleNet::new(model.clone(), &mut rng)?;
    let (content, style) = random_batch(&mut rng, opts.batch, opts.image_size);
    let feats = net.encode_batch(&content, &style)?;

    let mut tape = GradTape::new();
    let (loss, _) = net.loss_taped(&feats, &mut tape)?;
    let analytic = tape.backward(loss, 1.0)?;

    let params = net.params();
    let coords: Vec<Vec<usize>> = params
        .iter()
        .map(|p| match opts.samples_per_tensor {
            Some(k) if k < p.len() => {
                let mut idx = rng.permutation(p.len());
                idx.truncate(k);
                idx.sort_unstable();
                idx
            }
            _ => (0..p.len()).collect(),
        })
        .collect();

    let pinned = if model.detach_target { Some(net.target(&feats)?) } else { None };
    let mut probe = net.clone();
    let numeric = finite_diff_at(
        |p| eval_loss(&mut probe, p, &feats, pinned.as_ref()).expect("model forward"),
        &params,
        opts.h,
        &coords,
    );

    let mut groups = Vec::with_capacity(params.len());
    let mut work = params.clone();
    for (i, ((p, idx), n)) in params.iter().zip(&coords).zip(&numeric).enumerate() {
        let a = analytic
            .get(&p.name)
            .ok_or_else(|| Error::State(format!("no gradient for {}", p.name)))?;
        let mut kinked = Vec::with_capacity(idx.len());
        for &j in idx {
            let orig = work[i].data[j];
            work[i].data[j] = orig + opts.h;
            probe.assign_params(&work)?;
            let plus = probe.relu_pattern(&feats)?;
            work[i].data[j] = orig - opts.h;
            probe.assign_params(&work)?;
            let minus = probe.relu_pattern(&feats)?;
            work[i].data[j] = orig;
            kinked.push(plus != minus);
        }
        groups.push(compare(format!("{prefix}.{}", p.name), &a.data, n, idx, &kinked));
    }
    Ok(groups)
}

fn eval_loss(net: &mut StyleNet, params: &[NamedTensor], feats: &BatchFeatures, pinned: Option<&Tensor4>) -> Result<f64> {
    net.assign_params(params)?;
    let report = match pinned {
        Some(t) => net.loss_with_target(feats, t)?,
        None => net.loss(feats)?,
    };
    Ok(report.total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_at_three() {
        let p = [NamedTensor::scalar("p", 3.0)];
        let g = finite_diff_grad(|p| p[0].data[0] * p[0].data[0], &p, 1e-5);
        assert!((g.get("p").unwrap().data[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let p = [NamedTensor::new("w", vec![2, 2], vec![1.0, -2.0, 0.5, 4.0])];
        let g = finite_diff_grad(|_| 7.25, &p, 1e-5);
        assert!(g.get("w").unwrap().data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sampled_coords_align_with_selection() {
        let p = [NamedTensor::new("w", vec![1, 4], vec![1.0, 2.0, 3.0, 4.0])];
        let f = |p: &[NamedTensor]| p[0].data.iter().enumerate().map(|(i, v)| (i + 1) as f64 * v * v).sum();
        let g = finite_diff_at(f, &p, 1e-5, &[vec![3, 1]]);
        assert!((g[0][0] - 32.0).abs() < 1e-6);
        assert!((g[0][1] - 8.0).abs() < 1e-6);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
        assert!(relative_error(0.0, 1e-9) < 1.0);
    }

    #[test]
    fn every_primitive_passes() {
        for seed in 0..3 {
            let groups = check_primitives(seed, DEFAULT_STEP).unwrap();
            for g in &groups {
                assert!(g.max_rel_error < DEFAULT_TOLERANCE, "{} {}", g.group, g.max_rel_error);
            }
        }
    }

    #[test]
    fn zero_tolerance_always_fails() {
        let report = GradcheckReport {
            seed: 0,
            groups: check_primitives(0, DEFAULT_STEP).unwrap(),
        };
        assert!(!report.passes(0.0));
    }

    #[test]
    fn wrong_adjoint_is_caught() {
        // Gradient of 2x reported as x.
        let p = [NamedTensor::new("x", vec![1, 3], vec![0.5, -1.0, 2.0])];
        let numeric = finite_diff_grad(|p| p[0].data.iter().map(|v| v * v).sum(), &p, 1e-5);
        let g = compare("x".into(), &p[0].data, &numeric.get("x").unwrap().data, &[0, 1, 2], &[]);
        assert!(g.max_rel_error > 0.4);
    }
}
