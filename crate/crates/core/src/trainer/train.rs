//! The training loop: synthetic batch, taped objective, backward, Adam.

use std::io::Write;
use std::path::PathBuf;

use log::{debug, info};

use crate::error::{Error, Result};
use crate::losses::LossReport;
use crate::model::{ModelConfig, StyleNet};
use crate::net::{GradTape, SPATIAL_MULTIPLE};
use crate::rng::Rng;

use super::adam::{AdamState, DEFAULT_LR};
use super::checkpoint::{save_checkpoint, Checkpoint};
use super::data::generate_batch;

pub const DEFAULT_BATCH: usize = 8;
pub const DEFAULT_IMAGE_SIZE: usize = 32;
pub const DEFAULT_STEPS: usize = 500;
pub const CSV_HEADER: &str = "step,content,style,total";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub image_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub lr: f64,
    pub model: ModelConfig,
    /// Save every this many steps, and after the last step.
    pub checkpoint_every: Option<usize>,
    pub checkpoint_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: DEFAULT_BATCH,
            image_size: DEFAULT_IMAGE_SIZE,
            steps: DEFAULT_STEPS,
            seed: 0,
            lr: DEFAULT_LR,
            model: ModelConfig::default(),
            checkpoint_every: None,
            checkpoint_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.image_size == 0 || self.image_size % SPATIAL_MULTIPLE != 0 {
            return Err(Error::Config(format!(
                "image_size must be a positive multiple of {SPATIAL_MULTIPLE}, got {}",
                self.image_size
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::Config("checkpoint_every must be at least 1".into()));
        }
        self.model.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    /// 1-based.
    pub step: usize,
    pub report: LossReport,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: StyleNet,
    pub adam: AdamState,
    pub trace: Vec<StepRecord>,
}

impl TrainOutcome {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(self.net.params(), self.adam.clone())
    }
}

/// Initial network for `cfg`; the same draw `train` starts from.
pub fn initial_net(cfg: &TrainConfig) -> Result<StyleNet> {
    let mut rng = Rng::new(cfg.seed);
    StyleNet::new(cfg.model.clone(), &mut rng.fork())
}

pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(cfg, |_| {})
}

/// Runs training, calling `on_step` after every update.
pub fn train_with(cfg: &TrainConfig, mut on_step: impl FnMut(&StepRecord)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed);
    let mut net = StyleNet::new(cfg.model.clone(), &mut rng.fork())?;
    let mut data_rng = rng.fork();
    let mut params = net.params();
    let mut adam = AdamState::for_params(&params, cfg.lr);
    let mut trace = Vec::with_capacity(cfg.steps);
    info!(
        "training {} steps, batch {}, {}x{}, seed {}",
        cfg.steps, cfg.batch_size, cfg.image_size, cfg.image_size, cfg.seed
    );

    for step in 1..=cfg.steps {
        let batch = generate_batch(&mut data_rng, cfg.batch_size, cfg.image_size);
        let feats = net.encode_batch(&batch.content, &batch.style)?;
        let mut tape = GradTape::new();
        let (loss, report) = net.loss_taped(&feats, &mut tape)?;
        if !report.is_finite() {
            return Err(Error::Diverged { step });
        }
        let grads = tape.backward(loss, 1.0)?;
        adam.step(&mut params, &grads)?;
        net.assign_params(&params)?;

        let record = StepRecord { step, report };
        debug!(
            "step {step}: content {:.6e} style {:.6e} total {:.6e}",
            record.report.content, record.report.style, record.report.total
        );
        on_step(&record);
        trace.push(record);

        if let (Some(every), Some(path)) = (cfg.checkpoint_every, &cfg.checkpoint_path) {
            if step % every == 0 || step == cfg.steps {
                save_checkpoint(path, &Checkpoint::new(params.clone(), adam.clone()))?;
                debug!("checkpoint written at step {step}");
            }
        }
    }
    Ok(TrainOutcome { net, adam, trace })
}

/// Trailing moving average of total loss over `window` steps ending at
/// 1-based `step`.
pub fn moving_average(trace: &[StepRecord], step: usize, window: usize) -> Option<f64> {
    if window == 0 || step < window || step > trace.len() {
        return None;
    }
    let slice = &trace[step - window..step];
    Some(slice.iter().map(|r| r.report.total).sum::<f64>() / window as f64)
}

pub fn write_loss_csv(trace: &[StepRecord], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in trace {
        writeln!(out, "{},{},{},{}", r.step, r.report.content, r.report.style, r.report.total)?;
    }
    Ok(())
}

pub fn loss_csv(trace: &[StepRecord]) -> String {
    let mut buf = Vec::new();
    write_loss_csv(trace, &mut buf).expect("write to memory");
    String::from_utf8(buf).expect("ascii")
}
