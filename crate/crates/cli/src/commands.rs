use std::fmt::Write as _;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use grin::gradcheck::{run_suite, SuiteOptions, DEFAULT_STEP, DEFAULT_TOLERANCE};
use grin::net::Encoder;
use grin::trainer::data::{generate_style, NUM_STYLE_CLUSTERS};
use grin::trainer::{load_checkpoint, save_checkpoint, train_with, write_loss_csv, StepRecord, TrainConfig};
use grin::{build_adjacency, AdjacencyMatrix, AdjacencyVariant, Error, Matrix, ModelConfig, Rng, StyleNet, Tensor4};
use log::info;

use crate::config::FileConfig;
use crate::image_io::{read_fitted, write_png};
use crate::{GradcheckArgs, InspectArgs, StylizeArgs, TrainArgs};

/// Degrees at or below this are reported.
pub const NEAR_ZERO_DEGREE: f64 = 1e-6;
pub const DEFAULT_CHECKPOINT_EVERY: usize = 100;

#[derive(Debug)]
pub enum Failure {
    /// Exit 1.
    Verification(String),
    /// Exit 2.
    Input(String),
    /// Exit 3.
    Runtime(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Verification(_) => 1,
            Failure::Input(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Verification(m) | Failure::Input(m) | Failure::Runtime(m) => m,
        }
    }
}

/// Errors from reading or validating inputs are input failures; everything
/// else happened while running.
fn input(e: Error) -> Failure {
    Failure::Input(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn load_config(path: Option<&Path>) -> Result<FileConfig, Failure> {
    match path {
        Some(p) => FileConfig::load(p).map_err(input),
        None => Ok(FileConfig::default()),
    }
}

fn model_config(file: &FileConfig, a: &TrainArgs) -> grin::Result<ModelConfig> {
    let d = ModelConfig::default();
    let mut m = ModelConfig {
        eps: file.resolve("eps", a.eps, d.eps)?,
        mode: file.resolve("mode", a.mode, d.mode)?,
        adjacency_variant: file.resolve("adjacency", a.adjacency, d.adjacency_variant)?,
        eps_degree: file.resolve("eps_degree", a.eps_degree, d.eps_degree)?,
        activation: file.resolve("activation", a.activation, d.activation)?,
        num_layers: file.resolve("layers", a.layers, d.num_layers)?,
        theta_form: file.resolve("theta", a.theta, d.theta_form)?,
        detach_target: a.detach_target || file.get("detach_target")?.unwrap_or(false),
        ..d
    };
    m.weights.lambda = file.resolve("lambda", a.lambda, m.weights.lambda)?;
    m.weights.reduction = file.resolve("reduction", a.reduction, m.weights.reduction)?;
    Ok(m)
}

pub fn train_config(a: &TrainArgs) -> Result<TrainConfig, Failure> {
    let file = load_config(a.common.config.as_deref())?;
    let build = || -> grin::Result<TrainConfig> {
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            batch_size: file.resolve("batch", a.batch, d.batch_size)?,
            image_size: file.resolve("size", a.size, d.image_size)?,
            steps: file.resolve("steps", a.steps, d.steps)?,
            seed: file.resolve("seed", a.common.seed, d.seed)?,
            lr: file.resolve("lr", a.lr, d.lr)?,
            model: model_config(&file, a)?,
            checkpoint_every: Some(file.resolve("checkpoint_every", a.checkpoint_every, DEFAULT_CHECKPOINT_EVERY)?),
            checkpoint_path: Some(checkpoint_path(a)),
        };
        cfg.validate()?;
        Ok(cfg)
    };
    build().map_err(input)
}

fn checkpoint_path(a: &TrainArgs) -> PathBuf {
    a.common.out.clone().unwrap_or_else(|| PathBuf::from("grin.ckpt"))
}

fn csv_path(a: &TrainArgs) -> PathBuf {
    a.loss_csv
        .clone()
        .unwrap_or_else(|| checkpoint_path(a).with_extension("csv"))
}

fn save_csv(path: &Path, trace: &[StepRecord]) -> Result<(), Failure> {
    let file = File::create(path).map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))?;
    write_loss_csv(trace, BufWriter::new(file)).map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
}

pub fn cmd_train(a: &TrainArgs) -> Result<String, Failure> {
    let cfg = train_config(a)?;
    let ckpt = checkpoint_path(a);
    let csv = csv_path(a);
    let mut trace = Vec::with_capacity(cfg.steps);
    let result = train_with(&cfg, |r| {
        if r.step % 50 == 0 {
            info!("step {}: total {:.6e}", r.step, r.report.total);
        }
        trace.push(r.clone());
    });
    match result {
        Ok(out) => {
            save_checkpoint(&ckpt, &out.checkpoint()).map_err(runtime)?;
            save_csv(&csv, &out.trace)?;
            let last = out.trace.last().map(|r| format!(", final total {:.6e}", r.report.total));
            Ok(format!(
                "trained {} steps{}\ncheckpoint: {}\nloss trace: {}",
                out.trace.len(),
                last.unwrap_or_default(),
                ckpt.display(),
                csv.display()
            ))
        }
        Err(e @ (Error::Diverged { .. } | Error::NonFiniteGradient { .. })) => {
            save_csv(&csv, &trace)?;
            Err(Failure::Runtime(format!("{e}; last checkpoint kept at {}", ckpt.display())))
        }
        Err(e @ Error::Config(_)) => Err(input(e)),
        Err(e) => Err(runtime(e)),
    }
}

pub fn cmd_stylize(a: &StylizeArgs) -> Result<String, Failure> {
    let _ = load_config(a.common.config.as_deref())?;
    let ckpt = load_checkpoint(&a.checkpoint).map_err(|e| Failure::Input(format!("{}: {e}", a.checkpoint.display())))?;
    let net = StyleNet::for_inference(&ckpt.params).map_err(|e| Failure::Input(format!("{}: {e}", a.checkpoint.display())))?;
    let content = read_fitted(&a.content).map_err(|e| Failure::Input(e.0))?;
    let style = read_fitted(&a.style).map_err(|e| Failure::Input(e.0))?;
    let out = net.stylize(&content, &style).map_err(runtime)?;
    let path = a.common.out.clone().unwrap_or_else(|| PathBuf::from("stylized.png"));
    write_png(&path, &out).map_err(|e| Failure::Runtime(e.0))?;
    let s = out.shape();
    Ok(format!("wrote {}x{} image to {}", s.w, s.h, path.display()))
}

pub fn cmd_gradcheck(a: &GradcheckArgs) -> Result<String, Failure> {
    let file = load_config(a.common.config.as_deref())?;
    let resolve = || -> grin::Result<(u64, f64, f64, usize)> {
        Ok((
            file.resolve("seed", a.common.seed, 0)?,
            file.resolve("tolerance", a.tolerance, DEFAULT_TOLERANCE)?,
            file.resolve("step", a.step, DEFAULT_STEP)?,
            file.resolve("samples", a.samples, SuiteOptions::default().samples_per_tensor.unwrap_or(0))?,
        ))
    };
    let (seed, tolerance, h, samples) = resolve().map_err(input)?;
    if !(h > 0.0) {
        return Err(Failure::Input(format!("step must be positive, got {h}")));
    }
    let opts = SuiteOptions {
        h,
        samples_per_tensor: (samples > 0).then_some(samples),
        ..SuiteOptions::default()
    };
    let report = run_suite(seed, &opts).map_err(runtime)?;

    let mut text = format!("gradient check, seed {seed}, step {h:e}, tolerance {tolerance:e}\n");
    for g in &report.groups {
        let mark = if g.max_rel_error < tolerance { "ok  " } else { "FAIL" };
        let _ = write!(text, "{mark} {:<34} {:.3e}  ({} coords", g.group, g.max_rel_error, g.coords);
        if g.kinked > 0 {
            let _ = write!(text, ", {} across a rectifier kink, {:.3e} elsewhere", g.kinked, g.max_rel_error_smooth);
        }
        text.push_str(")\n");
    }
    let failing = report.failing(tolerance);
    if failing.is_empty() {
        let _ = write!(text, "all {} groups below tolerance", report.groups.len());
        Ok(text)
    } else {
        let names: Vec<&str> = failing.iter().map(|g| g.group.as_str()).collect();
        print!("{text}");
        Err(Failure::Verification(format!("groups over tolerance: {}", names.join(", "))))
    }
}

fn format_matrix(m: &Matrix) -> String {
    let mut s = String::new();
    for r in 0..m.rows() {
        for c in 0..m.cols() {
            let _ = write!(s, "{:>14.6e}", m.get(r, c));
        }
        s.push('\n');
    }
    s
}

pub fn graph_csv(adj: &AdjacencyMatrix) -> String {
    let mut s = String::from("kind,i,j,value\n");
    let n = adj.nodes();
    for (kind, m) in [("adjacency", &adj.a_tilde), ("propagation", &adj.propagation)] {
        for i in 0..n {
            for j in 0..n {
                let _ = writeln!(s, "{kind},{i},{j},{}", m.get(i, j));
            }
        }
    }
    for (i, d) in adj.degree.iter().enumerate() {
        let _ = writeln!(s, "degree,{i},{i},{d}");
    }
    s
}

/// Style batch for inspection: the given images, or a synthetic batch whose
/// first half comes from one cluster and second half from another.
fn inspect_batch(a: &InspectArgs, seed: u64, batch: usize) -> Result<(Tensor4, Vec<String>), Failure> {
    if !a.styles.is_empty() {
        let imgs = a
            .styles
            .iter()
            .map(|p| read_fitted(p).map_err(|e| Failure::Input(e.0)))
            .collect::<Result<Vec<_>, _>>()?;
        let first = imgs[0].shape();
        if let Some((p, t)) = a.styles.iter().zip(&imgs).find(|(_, t)| t.shape() != first) {
            return Err(Failure::Input(format!(
                "{} has shape {}, expected {first} like the first image",
                p.display(),
                t.shape()
            )));
        }
        let labels = a.styles.iter().map(|p| p.display().to_string()).collect();
        return Ok((Tensor4::stack(&imgs).map_err(input)?, labels));
    }
    if batch == 0 {
        return Err(Failure::Input("batch must be at least 1".into()));
    }
    let mut rng = Rng::new(seed);
    let first = rng.below(NUM_STYLE_CLUSTERS);
    let second = (first + 1 + rng.below(NUM_STYLE_CLUSTERS - 1)) % NUM_STYLE_CLUSTERS;
    let clusters: Vec<usize> = (0..batch).map(|i| if i < batch.div_ceil(2) { first } else { second }).collect();
    let imgs: Vec<Tensor4> = clusters.iter().map(|&k| generate_style(&mut rng, a.size, k)).collect();
    let labels = clusters.iter().map(|k| format!("synthetic cluster {k}")).collect();
    Ok((Tensor4::stack(&imgs).map_err(input)?, labels))
}

pub fn cmd_inspect_graph(a: &InspectArgs) -> Result<String, Failure> {
    let file = load_config(a.common.config.as_deref())?;
    let resolve = || -> grin::Result<(u64, usize, AdjacencyVariant, f64)> {
        Ok((
            file.resolve("seed", a.common.seed, 0)?,
            file.resolve("batch", a.batch, 4)?,
            file.resolve("adjacency", a.adjacency, AdjacencyVariant::Gram)?,
            file.resolve("eps_degree", a.eps_degree, grin::graph::DEFAULT_EPS_DEGREE)?,
        ))
    };
    let (seed, batch, variant, eps_degree) = resolve().map_err(input)?;
    if a.styles.is_empty() && (a.size == 0 || a.size % grin::net::SPATIAL_MULTIPLE != 0) {
        return Err(Failure::Input(format!("size must be a positive multiple of 8, got {}", a.size)));
    }
    let (styles, labels) = inspect_batch(a, seed, batch)?;
    let feats = Encoder::default().forward(&styles).map_err(input)?;
    let adj = build_adjacency(feats.deepest(), variant, eps_degree);

    let mut text = String::new();
    for (i, l) in labels.iter().enumerate() {
        let _ = writeln!(text, "node {i}: {l}");
    }
    let _ = write!(text, "\nadjacency ({variant})\n{}", format_matrix(&adj.a_tilde));
    text.push_str("\ndegree\n");
    for d in &adj.degree {
        let _ = write!(text, "{d:>14.6e}");
    }
    let _ = write!(text, "\n\npropagation\n{}", format_matrix(&adj.propagation));
    for (i, &d) in adj.degree.iter().enumerate() {
        if d <= NEAR_ZERO_DEGREE {
            let _ = writeln!(text, "warning: node {i} has near-zero degree {d:e}");
        }
    }

    let path = a.common.out.clone().unwrap_or_else(|| PathBuf::from("graph.csv"));
    std::fs::write(&path, graph_csv(&adj)).map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))?;
    let _ = write!(text, "\nwrote {}", path.display());
    Ok(text)
}
