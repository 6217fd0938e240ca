//! Training: AdamW with a warmup + cosine schedule, the clean-to-hard
//! augmentation curriculum, validation-based checkpoint selection, and a
//! JSON-lines metrics log.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_batch, dropout_mask, AugmentConfig};
use crate::config::Config;
use crate::data::{EmbeddingTriplet, SplitData};
use crate::error::{Error, Result};
use crate::eval::{eval_masks, EvalReport};
use crate::losses::multitask_loss;
use crate::model::{ForwardOptions, ModelConfig, TrimodalModel};
use crate::modality::{ModalityId, ModalityMask};
use crate::numcore::{Checkpoint, Matrix, ParamStore, Tape};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CurriculumMode {
    /// Augmentation intensity ramps from zero to full over `ramp_epochs`.
    #[default]
    CleanToHard,
    /// Full intensity from the first epoch.
    Uniform,
}

/// Validation quantity that picks the saved checkpoint.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectMetric {
    /// Mean Top-1 over every validated mask.
    #[default]
    MeanMaskTop1,
    /// Top-1 with all three modalities.
    TrimodalTop1,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub lr_floor: f64,
    /// Warmup length as a fraction of all steps.
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; `null` disables clipping.
    pub grad_clip: Option<f64>,
    pub curriculum: CurriculumMode,
    pub ramp_epochs: usize,
    /// Dropout on the fusion classifier's hidden layer.
    pub fusion_dropout: f64,
    /// Validate under all seven masks (otherwise trimodal only).
    pub validate_all_masks: bool,
    pub select_metric: SelectMetric,
    /// Stop after this many optimiser steps.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            peak_lr: 1e-3,
            lr_floor: 1e-5,
            warmup_fraction: 0.05,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: Some(5.0),
            curriculum: CurriculumMode::CleanToHard,
            ramp_epochs: 5,
            fusion_dropout: 0.2,
            validate_all_masks: true,
            select_metric: SelectMetric::MeanMaskTop1,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("train.epochs and train.batch_size must be positive".into());
        }
        if !(self.peak_lr > 0.0 && self.lr_floor >= 0.0 && self.lr_floor <= self.peak_lr) {
            return bad(format!("need 0 <= lr_floor <= peak_lr, peak_lr > 0 (got {} / {})", self.lr_floor, self.peak_lr));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad(format!("train.warmup_fraction {} outside [0, 1)", self.warmup_fraction));
        }
        for (k, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("train.{k} {v} outside [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("train.adam_eps must be > 0 and train.weight_decay >= 0".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("train.grad_clip {c} must be > 0 (use null to disable)"));
            }
        }
        if !(0.0..1.0).contains(&self.fusion_dropout) {
            return bad(format!("train.fusion_dropout {} outside [0, 1)", self.fusion_dropout));
        }
        Ok(())
    }
}

/// Warmup + cosine schedule parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub floor: f64,
}

/// Linear `0 -> peak` over the warmup, then cosine decay to `floor` at `total_steps`.
pub fn lr_at(step: usize, s: &LrSchedule) -> f64 {
    if step < s.warmup_steps {
        return s.peak * step as f64 / s.warmup_steps as f64;
    }
    let span = s.total_steps.saturating_sub(s.warmup_steps);
    let progress = if span == 0 {
        1.0
    } else {
        ((step - s.warmup_steps) as f64 / span as f64).min(1.0)
    };
    s.floor + 0.5 * (s.peak - s.floor) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// AdamW with decoupled weight decay. Biases and loss log-variances are not decayed.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    decay: Vec<bool>,
}

impl AdamW {
    pub fn new(params: &ParamStore, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let shapes: Vec<(usize, usize)> = params.ids().map(|id| params.value(id).shape()).collect();
        AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            m: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            decay: params.ids().map(|id| Self::decays(params.name(id))).collect(),
        }
    }

    /// Whether a parameter name receives weight decay.
    pub fn decays(name: &str) -> bool {
        !(name.ends_with(".b") || name.starts_with("loss."))
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update from the gradients held in `params`.
    pub fn step(&mut self, params: &mut ParamStore, lr: f64) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(Error::Invalid("optimizer state does not match the parameter store".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let g = params.grad(id).as_slice().to_vec();
            let decay = if self.decay[i] { 1.0 - lr * self.weight_decay } else { 1.0 };
            let (m, v) = (self.m[i].as_mut_slice(), self.v[i].as_mut_slice());
            let w = params.value_mut(id).as_mut_slice();
            for j in 0..w.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                w[j] = w[j] * decay - lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Batches for one epoch and the augmentation intensity to use with them.
pub fn curriculum_sampler(
    epoch: usize,
    n_samples: usize,
    batch_size: usize,
    mode: CurriculumMode,
    ramp_epochs: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<Vec<usize>>, f64) {
    let mut order: Vec<usize> = (0..n_samples).collect();
    order.shuffle(rng);
    let batches = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    let intensity = match mode {
        CurriculumMode::Uniform => 1.0,
        CurriculumMode::CleanToHard if ramp_epochs == 0 => 1.0,
        CurriculumMode::CleanToHard => (epoch as f64 / ramp_epochs as f64).min(1.0),
    };
    (batches, intensity)
}

/// Per-modality standard deviation of the present training features.
pub fn feature_scales(samples: &[EmbeddingTriplet]) -> [f64; 3] {
    ModalityId::ALL.map(|m| {
        let (mut n, mut s, mut sq) = (0.0, 0.0, 0.0);
        for x in samples.iter().filter(|x| x.mask.has(m)) {
            for v in x.embedding(m) {
                n += 1.0;
                s += v;
                sq += v * v;
            }
        }
        if n == 0.0 {
            1.0
        } else {
            let mean = s / n;
            (sq / n - mean * mean).max(0.0).sqrt()
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskScore {
    pub mask: String,
    pub top1: f64,
    pub top5: f64,
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub steps: usize,
    pub lr: f64,
    pub intensity: f64,
    /// Mean weighted objective over the epoch.
    pub loss: f64,
    /// Mean focal loss per head.
    pub head_losses: BTreeMap<String, f64>,
    pub log_vars: BTreeMap<String, f64>,
    pub val: Vec<MaskScore>,
    pub val_score: f64,
    pub best: bool,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub epochs: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_score: f64,
    pub steps: usize,
}

fn validation_score(report: &EvalReport, metric: SelectMetric) -> f64 {
    match metric {
        SelectMetric::TrimodalTop1 => report.top1(&ModalityMask::ALL).unwrap_or(0.0),
        SelectMetric::MeanMaskTop1 => {
            let masks = report.masks();
            masks
                .iter()
                .map(|m| report.top1(&m.parse().expect("mask label")).unwrap_or(0.0))
                .sum::<f64>()
                / masks.len().max(1) as f64
        }
    }
}

/// Trains `model` in place; on return it holds the best-by-validation
/// parameters. Each epoch's metrics are written as one JSON line to `log`.
pub fn train(
    model: &mut TrimodalModel,
    data: &SplitData,
    cfg: &Config,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainReport> {
    cfg.validate()?;
    let tc = &cfg.train;
    if data.train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if data.num_classes != model.num_classes() {
        return Err(Error::Config(format!(
            "model has {} classes, data has {}",
            model.num_classes(),
            data.num_classes
        )));
    }
    let ablation = cfg.ablation;
    let augment = if ablation.no_augmentation {
        AugmentConfig::none()
    } else {
        cfg.augment.clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7EA1_0000_0000_0001);
    let scales = feature_scales(&data.train);
    let n = data.train.len();
    let steps_per_epoch = n.div_ceil(tc.batch_size);
    let planned = tc.epochs * steps_per_epoch;
    let total_steps = tc.max_steps.map_or(planned, |m| m.min(planned));
    let schedule = LrSchedule {
        peak: tc.peak_lr,
        warmup_steps: (tc.warmup_fraction * total_steps as f64).round() as usize,
        total_steps,
        floor: tc.lr_floor,
    };
    let mut opt = AdamW::new(model.params(), tc.beta1, tc.beta2, tc.adam_eps, tc.weight_decay);
    let val_masks: Vec<ModalityMask> = if tc.validate_all_masks {
        ModalityMask::CONDITIONS.to_vec()
    } else {
        vec![ModalityMask::ALL]
    };
    let model_cfg: ModelConfig = model.config().clone();
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut epochs = Vec::new();
    let mut step = 0usize;

    'outer: for epoch in 0..tc.epochs {
        let (batches, intensity) = curriculum_sampler(epoch, n, tc.batch_size, tc.curriculum, tc.ramp_epochs, &mut rng);
        let aug = augment.scaled(intensity);
        let mut loss_sum = 0.0;
        let mut head_sums: BTreeMap<String, f64> = BTreeMap::new();
        let mut n_batches = 0usize;
        let mut lr = 0.0;
        for idx in batches {
            if step >= total_steps {
                break;
            }
            let samples: Vec<&EmbeddingTriplet> = idx.iter().map(|&i| &data.train[i]).collect();
            let batch = augment_batch(
                &samples,
                &aug,
                scales,
                data.num_classes,
                cfg.loss.label_smoothing,
                &mut rng,
            )?;
            let drop = if tc.fusion_dropout > 0.0 {
                Some(dropout_mask(samples.len(), model_cfg.fusion_hidden, tc.fusion_dropout, &mut rng)?)
            } else {
                None
            };
            let grads = {
                let mut tape = Tape::new(model.params());
                let opts = ForwardOptions {
                    ablation,
                    fusion_dropout: drop.as_ref(),
                };
                let vars = TrimodalModel::forward(&model_cfg, &mut tape, &batch.input, &opts)?;
                let lv = multitask_loss(&mut tape, &vars, &batch.targets, &cfg.loss)?;
                let total = tape.scalar(lv.total)?;
                if !total.is_finite() {
                    return Err(Error::Invalid(format!("training loss became {total} at step {step}")));
                }
                loss_sum += total;
                for (h, v) in &lv.per_head {
                    *head_sums.entry(h.key().to_string()).or_default() += tape.scalar(*v)?;
                }
                tape.backward(lv.total)?
            };
            let params = model.params_mut();
            params.zero_grad();
            params.accumulate(&grads)?;
            if let Some(clip) = tc.grad_clip {
                let norm = params.grad_norm();
                if norm > clip {
                    params.scale_grads(clip / norm);
                }
            }
            step += 1;
            lr = lr_at(step, &schedule);
            opt.step(params, lr)?;
            n_batches += 1;
        }
        if n_batches == 0 {
            break 'outer;
        }

        let val_set = if data.val.is_empty() { &data.train } else { &data.val };
        let report = eval_masks(model, val_set, &data.multi_session, ablation, &val_masks, "")?;
        let score = validation_score(&report, tc.select_metric);
        let improved = best.as_ref().is_none_or(|(_, s, _)| score >= *s);
        if improved {
            best = Some((epoch + 1, score, model.params().clone()));
        }
        let log_vars = crate::losses::Head::ALL
            .iter()
            .filter(|h| cfg.loss.loss_heads.contains(h))
            .map(|h| {
                let v = model.params().get(&h.log_var_name()).map(|m| m.as_slice()[0]).unwrap_or(0.0);
                (h.key().to_string(), v)
            })
            .collect();
        let metrics = EpochMetrics {
            epoch: epoch + 1,
            steps: step,
            lr,
            intensity,
            loss: loss_sum / n_batches as f64,
            head_losses: head_sums.into_iter().map(|(k, v)| (k, v / n_batches as f64)).collect(),
            log_vars,
            val: val_masks
                .iter()
                .map(|m| MaskScore {
                    mask: m.label(),
                    top1: report.top1(m).unwrap_or(0.0),
                    top5: report.top5(m).unwrap_or(0.0),
                })
                .collect(),
            val_score: score,
            best: improved,
        };
        if let Some(w) = log.as_mut() {
            let line = serde_json::to_string(&metrics)?;
            writeln!(w, "{line}").map_err(|e| Error::Invalid(format!("writing metrics: {e}")))?;
        }
        epochs.push(metrics);
    }

    let (best_epoch, best_score, best_params) = best.ok_or_else(|| Error::Invalid("no training step was run".into()))?;
    model.params_mut().copy_values_from(&best_params)?;
    Ok(TrainReport {
        epochs,
        best_epoch,
        best_score,
        steps: step,
    })
}

/// Header stored alongside the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub num_classes: usize,
    pub model: ModelConfig,
    pub config: Config,
    pub config_hash: String,
    pub best_epoch: usize,
}

pub fn save_model(path: &Path, model: &TrimodalModel, cfg: &Config, best_epoch: usize) -> Result<()> {
    let header = ModelHeader {
        num_classes: model.num_classes(),
        model: model.config().clone(),
        config: cfg.clone(),
        config_hash: cfg.hash(),
        best_epoch,
    };
    Checkpoint::from_store(model.params(), serde_json::to_value(&header)?).save(path)
}

pub fn load_model(path: &Path) -> Result<(TrimodalModel, ModelHeader)> {
    let ckpt = Checkpoint::load(path)?;
    let header: ModelHeader = serde_json::from_value(ckpt.header.clone())
        .map_err(|e| Error::Checkpoint(format!("bad checkpoint header: {e}")))?;
    let mut model = TrimodalModel::new(ModelConfig {
        num_classes: header.num_classes,
        ..header.model.clone()
    })?;
    ckpt.restore_into(model.params_mut())?;
    Ok((model, header))
}

/// Builds a fresh model for `data` from `cfg` and trains it.
pub fn fit(data: &SplitData, cfg: &Config, log: Option<&mut dyn Write>) -> Result<(TrimodalModel, TrainReport)> {
    let mut model = TrimodalModel::new(cfg.model_for(data.num_classes))?;
    let report = train(&mut model, data, cfg, log)?;
    Ok((model, report))
}
