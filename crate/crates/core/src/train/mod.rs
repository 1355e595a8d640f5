//! Optimization loop, checkpoints and the temporal × codebook ablation.
//!
//! Every step writes one row to `metrics.csv`
//! (`step,epoch,pred,embed,commit,sep,total`, batch means of the summed
//! terms) and every epoch one row to `epochs.csv`
//! (`epoch,steps,pred,total,codebook_used,seconds`). `last.ckpt` is
//! rewritten at the end of each epoch (and once before the first step),
//! `best.ckpt` whenever the epoch-mean total loss improves.

mod ablation;
pub mod checkpoint;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{load_dataset, windows_for, Dataset, LoadOptions};
use crate::detect::csv_err;
use crate::error::{Error, Result};
use crate::losses::{total_loss, total_loss_grads, LossInputs, LossWeights};
use crate::model::{stack_windows, Mode, NetworkConfig, VqUNet};
use crate::nn::{clip_grad_norm, zero_grads, Adam, Parameters, Phase};

pub use ablation::{run_ablation, AblationCell, AblationReport};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};

pub const DEFAULT_LR_PREDICTION: f64 = 2e-4;
pub const DEFAULT_LR_RECONSTRUCTION: f64 = 2e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Overrides `network.mode`; reconstruction also forces `network.n = 0`.
    pub mode: Mode,
    /// Overrides `network.use_codebook`.
    pub use_codebook: bool,
    /// Mode default when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub network: NetworkConfig,
    pub dataset_root: PathBuf,
    /// Registered dataset layout.
    pub layout: String,
    /// `[width, height]` frames are resampled to.
    pub image_size: [usize; 2],
    pub out_dir: PathBuf,
    /// Global gradient-norm cap; off when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Prediction,
            use_codebook: true,
            learning_rate: None,
            epochs: 60,
            batch_size: 8,
            seed: 0,
            weights: LossWeights::default(),
            network: NetworkConfig::default(),
            dataset_root: PathBuf::new(),
            layout: "ucsd_avenue".into(),
            image_size: [256, 256],
            out_dir: PathBuf::from("runs/train"),
            clip_grad_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn lr(&self) -> f64 {
        self.learning_rate.unwrap_or(match self.mode {
            Mode::Prediction => DEFAULT_LR_PREDICTION,
            Mode::Reconstruction => DEFAULT_LR_RECONSTRUCTION,
        })
    }

    /// Network configuration with the top-level switches applied.
    pub fn effective_network(&self) -> NetworkConfig {
        let mut net = self.network.clone();
        net.mode = self.mode;
        net.use_codebook = self.use_codebook;
        match self.mode {
            Mode::Reconstruction => net.n = 0,
            Mode::Prediction if net.n == 0 => net.n = NetworkConfig::default().n,
            Mode::Prediction => {}
        }
        net
    }

    pub fn validate(&self) -> Result<()> {
        let lr = self.lr();
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {lr}")));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if let Some(c) = self.clip_grad_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip_grad_norm must be positive, got {c}")));
            }
        }
        self.weights.validate()?;
        let net = self.effective_network();
        net.validate()?;
        let [w, h] = self.image_size;
        net.check_input([1, net.input_channels(), h, w])
    }

    pub fn load_options(&self) -> LoadOptions {
        LoadOptions {
            image_size: Some((self.image_size[0], self.image_size[1])),
            ..LoadOptions::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub mean_pred: f64,
    pub mean_total: f64,
    /// Distinct entries selected during the epoch.
    pub codebook_used: Option<usize>,
    pub seconds: f64,
}

pub struct TrainOutcome {
    pub model: VqUNet<f32>,
    pub last_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub metrics_csv: PathBuf,
    pub epochs: Vec<EpochSummary>,
    pub steps: u64,
}

/// Loads the configured dataset and trains into `cfg.out_dir`.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let opts = LoadOptions {
        skip_training: false,
        ..cfg.load_options()
    };
    let dataset = load_dataset(&cfg.dataset_root, &cfg.layout, &opts)?;
    train_on(cfg, &dataset, &cfg.out_dir)
}

fn all_finite(model: &mut VqUNet<f32>) -> bool {
    let mut ok = true;
    model.visit_params("", &mut |_, p| ok &= p.value.iter().all(|v| v.is_finite()));
    ok
}

/// Trains on the training split of an already loaded dataset.
pub fn train_on(cfg: &TrainConfig, dataset: &Dataset, out_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let net = cfg.effective_network();
    let windows = windows_for(&dataset.training, net.n);
    if windows.is_empty() {
        return Err(Error::Config(format!(
            "training split yields no windows for n={}",
            net.n
        )));
    }
    if let Some(f) = dataset.training.iter().find_map(|c| c.frames.first()) {
        net.check_input([1, net.input_channels(), f.height, f.width])?;
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut model = VqUNet::<f32>::new(net.clone(), cfg.seed)?;
    let mut order: Vec<usize> = (0..windows.len()).collect();
    if model.codebook.is_some() && crate::codebook::registry().get(&net.codebook_init)?.needs_features() {
        let mut probe = order.clone();
        probe.shuffle(&mut rng);
        let batch: Vec<_> = probe.iter().take(cfg.batch_size).map(|&i| windows[i]).collect();
        let (x, _) = stack_windows::<f32>(&batch)?;
        model.init_codebook_from(&x, cfg.seed.wrapping_add(1))?;
    }
    let mut adam = Adam::new(cfg.lr());
    let snapshot = serde_json::to_value(cfg).ok();
    let meta = |epoch: usize, step: u64| CheckpointMeta {
        epoch,
        step,
        image_size: dataset
            .training
            .iter()
            .find_map(|c| c.frame_size())
            .map(|(w, h)| [w, h]),
        train_config: snapshot.clone(),
    };
    let last = out_dir.join("last.ckpt");
    let best = out_dir.join("best.ckpt");
    save_checkpoint(&last, &mut model, &meta(0, 0), Some(&adam))?;

    let metrics_path = out_dir.join("metrics.csv");
    let mut metrics = csv::Writer::from_path(&metrics_path).map_err(|e| csv_err(&metrics_path, e))?;
    metrics
        .write_record(["step", "epoch", "pred", "embed", "commit", "sep", "total"])
        .map_err(|e| csv_err(&metrics_path, e))?;
    let epochs_path = out_dir.join("epochs.csv");
    let mut epoch_log = csv::Writer::from_path(&epochs_path).map_err(|e| csv_err(&epochs_path, e))?;
    epoch_log
        .write_record(["epoch", "steps", "pred", "total", "codebook_used", "seconds"])
        .map_err(|e| csv_err(&epochs_path, e))?;

    let k = net.codebook_size;
    let mut step: u64 = 0;
    let mut best_total = f64::INFINITY;
    let mut summaries = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        if let Some(cb) = model.codebook.as_mut() {
            cb.reset_usage();
        }
        let (mut sum_pred, mut sum_total, mut steps) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<_> = chunk.iter().map(|&i| windows[i]).collect();
            let (x, t) = stack_windows::<f32>(&batch)?;
            let (out, tape) = model.forward(&x, Phase::Train).map_err(|e| match e {
                Error::NonFinite(what) => Error::NonFinite(format!(
                    "{what} at epoch {epoch}, step {}; last good checkpoint kept at {}",
                    step + 1,
                    last.display()
                )),
                e => e,
            })?;
            let inputs = LossInputs {
                predicted: &out.predicted,
                target: &t,
                quantization: out.quantization.as_ref(),
            };
            let loss = total_loss(&inputs, &cfg.weights);
            step += 1;
            metrics
                .write_record([
                    step.to_string(),
                    epoch.to_string(),
                    loss.pred.to_string(),
                    loss.embed.to_string(),
                    loss.commit.to_string(),
                    loss.sep.to_string(),
                    loss.total.to_string(),
                ])
                .map_err(|e| csv_err(&metrics_path, e))?;
            if let Some(term) = loss.non_finite_term() {
                metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
                return Err(Error::NonFinite(format!(
                    "{term} loss at epoch {epoch}, step {step}; last good checkpoint kept at {}",
                    last.display()
                )));
            }
            let grads = total_loss_grads(&inputs, &cfg.weights, k);
            zero_grads(&mut model);
            model.backward(&tape, &grads.predicted, grads.encoder_output.as_ref());
            if let (Some(cb), Some(g)) = (model.codebook.as_mut(), grads.codebook) {
                cb.entries.grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            if let Some(max) = cfg.clip_grad_norm {
                clip_grad_norm(&mut model, max);
            }
            adam.step(&mut model);
            model.absorb(&tape);
            if let (Some(cb), Some(q)) = (model.codebook.as_mut(), out.quantization.as_ref()) {
                cb.record_usage(q);
            }
            sum_pred += loss.pred;
            sum_total += loss.total;
            steps += 1;
        }
        metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
        if !all_finite(&mut model) {
            return Err(Error::NonFinite(format!(
                "parameters after epoch {epoch}; last good checkpoint kept at {}",
                last.display()
            )));
        }
        let summary = EpochSummary {
            epoch,
            steps,
            mean_pred: sum_pred / steps as f64,
            mean_total: sum_total / steps as f64,
            codebook_used: model.codebook.as_ref().map(|c| c.utilization()),
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}/{}: pred {:.4} total {:.4} codebook {:?} ({:.1}s)",
            cfg.epochs,
            summary.mean_pred,
            summary.mean_total,
            summary.codebook_used,
            summary.seconds
        );
        epoch_log
            .write_record([
                epoch.to_string(),
                steps.to_string(),
                summary.mean_pred.to_string(),
                summary.mean_total.to_string(),
                summary.codebook_used.map(|u| u.to_string()).unwrap_or_default(),
                format!("{:.3}", summary.seconds),
            ])
            .map_err(|e| csv_err(&epochs_path, e))?;
        epoch_log.flush().map_err(|e| Error::io(&epochs_path, e))?;
        save_checkpoint(&last, &mut model, &meta(epoch, step), Some(&adam))?;
        if summary.mean_total < best_total {
            best_total = summary.mean_total;
            fs::copy(&last, &best).map_err(|e| Error::io(&best, e))?;
        }
        summaries.push(summary);
    }
    if let Some(cb) = &model.codebook {
        cb.write_csv(&out_dir.join("codebook.csv"))?;
    }
    Ok(TrainOutcome {
        model,
        last_checkpoint: last,
        best_checkpoint: best,
        metrics_csv: metrics_path,
        epochs: summaries,
        steps: step,
    })
}
