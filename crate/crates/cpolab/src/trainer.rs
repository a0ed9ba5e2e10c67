//! Training orchestration: each epoch probes every layer, selects the k
//! worst, and runs one pass over the training set updating only those
//! blocks with the contrastive objective. Includes the optimizer, the
//! warmup schedule, metrics, and per-epoch checkpointing with resumable
//! optimizer state.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::corpus::ByteTokenizer;
use crate::cpo::{self, CpoConfig, CpoError, CpoItem, InstructionPair, LossBreakdown};
use crate::model::{Model, ModelError};
use crate::probe::{self, ProbeConfig, ProbeError, ProbeRecord, ProbeReport};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("empty training dataset")]
    EmptyDataset,
    #[error("empty probe record set")]
    EmptyProbeSet,
    #[error("non-finite loss at step {step}; diagnostic checkpoint at {checkpoint}")]
    Diverged { step: usize, checkpoint: PathBuf },
    #[error("non-finite gradient in {param} at step {step}")]
    BadGradient { param: String, step: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Cpo(#[from] CpoError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

// ---------------------------------------------------------------------------
// Config

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub alpha: f64,
    pub k: usize,
    pub seed: u64,
    pub penalty_eps: f64,
    pub normalize_per_token: bool,
    pub probe: ProbeConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            epochs: 5,
            lr: 1e-5,
            weight_decay: 3e-7,
            warmup_ratio: 0.2,
            alpha: 0.05,
            k: 4,
            seed: 0,
            penalty_eps: 1e-7,
            normalize_per_token: true,
            probe: ProbeConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 || self.epochs == 0 || self.k == 0 {
            return Err(TrainError::BadConfig(
                "batch_size, epochs, and k must be positive".into(),
            ));
        }
        if self.lr <= 0.0 {
            return Err(TrainError::BadConfig("lr must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(TrainError::BadConfig("weight_decay must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return Err(TrainError::BadConfig("warmup_ratio must lie in [0,1]".into()));
        }
        Ok(())
    }

    pub fn cpo(&self) -> CpoConfig {
        CpoConfig {
            alpha: self.alpha,
            eps: self.penalty_eps,
            normalize_per_token: self.normalize_per_token,
        }
    }
}

/// Linear warmup from 0 to lr over warmup_ratio * total_steps optimizer
/// steps, constant afterwards. Step numbering starts at 0.
pub fn lr_schedule(step: usize, total_steps: usize, config: &TrainConfig) -> f64 {
    let warmup = (config.warmup_ratio * total_steps as f64).round() as usize;
    if warmup == 0 || step >= warmup {
        config.lr
    } else {
        config.lr * step as f64 / warmup as f64
    }
}

// ---------------------------------------------------------------------------
// Optimizer

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

/// Adam moments per parameter plus the previous epoch's selected-layer set.
/// Moments of a frozen layer are neither read nor updated; when a layer
/// re-enters the selected set its entries are dropped (reset to zero).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct OptimState {
    pub moments: BTreeMap<String, Moments>,
    pub prev_selected: Vec<usize>,
}

impl OptimState {
    /// Epoch-boundary bookkeeping: reset moments for layers that were out
    /// of the selected set and are now back in.
    pub fn enter_epoch(&mut self, selected: &[usize], first_epoch: bool) {
        if !first_epoch {
            for &layer in selected {
                if !self.prev_selected.contains(&layer) {
                    let prefix = format!("layer{layer}.");
                    self.moments.retain(|name, _| !name.starts_with(&prefix));
                }
            }
        }
        self.prev_selected = selected.to_vec();
    }
}

/// One decoupled-weight-decay Adam step over the given parameters, using
/// the gradients accumulated on their tapes scaled by `grad_scale`
/// (1/batch for mean gradients). Moments are kept in f64.
pub fn optimizer_step(
    params: &[(String, Tensor<f32>)],
    state: &mut OptimState,
    lr: f64,
    weight_decay: f64,
    grad_scale: f64,
    step: usize,
) -> Result<(), TrainError> {
    for (name, tensor) in params {
        let Some(grad) = tensor.grad() else { continue };
        let moments = state.moments.entry(name.clone()).or_insert_with(|| Moments {
            m: vec![0.0; grad.len()],
            v: vec![0.0; grad.len()],
            t: 0,
        });
        moments.t += 1;
        let t = moments.t as i32;
        let data = tensor.to_vec();
        let mut updated = Vec::with_capacity(data.len());
        for i in 0..data.len() {
            let g = f64::from(grad[i]) * grad_scale;
            if !g.is_finite() {
                return Err(TrainError::BadGradient {
                    param: name.clone(),
                    step,
                });
            }
            moments.m[i] = BETA1 * moments.m[i] + (1.0 - BETA1) * g;
            moments.v[i] = BETA2 * moments.v[i] + (1.0 - BETA2) * g * g;
            let m_hat = moments.m[i] / (1.0 - BETA1.powi(t));
            let v_hat = moments.v[i] / (1.0 - BETA2.powi(t));
            let p = f64::from(data[i]) * (1.0 - lr * weight_decay)
                - lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            updated.push(p as f32);
        }
        tensor.set_data(&updated);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Records and metrics

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub probe_report: ProbeReport,
    pub mean_loss: LossBreakdown,
    pub updated_layers: Vec<usize>,
    pub checkpoint_path: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub loss: f64,
    pub incentive: f64,
    pub penalty: f64,
    pub lr: f64,
}

pub fn metrics_to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("step,loss,incentive,penalty,lr\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.9},{:.9},{:.9},{:.9e}\n",
            r.step, r.loss, r.incentive, r.penalty, r.lr
        ));
    }
    out
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub epoch_records: Vec<EpochRecord>,
    pub metrics: Vec<MetricsRow>,
}

// ---------------------------------------------------------------------------
// The loop

/// Probe accuracies for a model snapshot; injectable for tests.
pub type LayerScorer<'a> = dyn FnMut(&Model<f32>, usize) -> Result<Vec<f64>, ProbeError> + 'a;

pub fn train(
    model: &mut Model<f32>,
    items: &[CpoItem],
    probe_records: &[ProbeRecord],
    pair: &InstructionPair,
    tokenizer: &ByteTokenizer,
    config: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainOutcome, TrainError> {
    let probe_cfg = config.probe.clone();
    let mut scorer = |m: &Model<f32>, _epoch: usize| {
        probe::probe_layers(m, pair, tokenizer, probe_records, &probe_cfg)
    };
    train_with_scorer(model, items, probe_records, config, out_dir, &mut scorer)
}

pub fn train_with_scorer(
    model: &mut Model<f32>,
    items: &[CpoItem],
    probe_records: &[ProbeRecord],
    config: &TrainConfig,
    out_dir: &Path,
    scorer: &mut LayerScorer,
) -> Result<TrainOutcome, TrainError> {
    run_epochs(
        model,
        items,
        probe_records,
        config,
        out_dir,
        scorer,
        0,
        &mut OptimState::default(),
    )
}

/// Continue a run from the state saved after `completed_epoch`: loads the
/// checkpoint and optimizer state, then trains the remaining epochs.
pub fn resume(
    model: &mut Model<f32>,
    items: &[CpoItem],
    probe_records: &[ProbeRecord],
    pair: &InstructionPair,
    tokenizer: &ByteTokenizer,
    config: &TrainConfig,
    out_dir: &Path,
    completed_epoch: usize,
) -> Result<TrainOutcome, TrainError> {
    model.load_checkpoint(&out_dir.join(format!("epoch-{completed_epoch}")))?;
    let optim_json = fs::read_to_string(out_dir.join(format!("epoch-{completed_epoch}.optim.json")))?;
    let mut optim: OptimState = serde_json::from_str(&optim_json)?;
    let probe_cfg = config.probe.clone();
    let mut scorer = |m: &Model<f32>, _epoch: usize| {
        probe::probe_layers(m, pair, tokenizer, probe_records, &probe_cfg)
    };
    run_epochs(
        model,
        items,
        probe_records,
        config,
        out_dir,
        &mut scorer,
        completed_epoch + 1,
        &mut optim,
    )
}

#[allow(clippy::too_many_arguments)]
fn run_epochs(
    model: &mut Model<f32>,
    items: &[CpoItem],
    probe_records: &[ProbeRecord],
    config: &TrainConfig,
    out_dir: &Path,
    scorer: &mut LayerScorer,
    start_epoch: usize,
    optim: &mut OptimState,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if items.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if probe_records.is_empty() {
        return Err(TrainError::EmptyProbeSet);
    }
    fs::create_dir_all(out_dir)?;
    let cpo_cfg = config.cpo();
    let steps_per_epoch = items.len().div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;

    let mut epoch_records = Vec::new();
    let mut metrics = Vec::new();
    let mut global_step = start_epoch * steps_per_epoch;

    for epoch in start_epoch..config.epochs {
        // 1. probe every layer on the current snapshot
        let layer_accuracy = scorer(model, epoch)?;
        let selected = probe::select_worst_layers(&layer_accuracy, config.k)?;
        let probe_report = ProbeReport {
            epoch,
            layer_accuracy,
            head_accuracy: None,
            selected: selected.clone(),
        };

        // 2. freeze everything else for the whole epoch
        model.set_trainable_layers(&selected)?;
        optim.enter_epoch(&selected, epoch == start_epoch && start_epoch == 0);
        let trainable = model.trainable_params();

        // 3. one pass over the training set in a seed-determined order
        let order = epoch_order(items.len(), config.seed, epoch);
        let mut sums = (0.0, 0.0, 0.0, 0.0, 0.0); // inc, pen, total, raw_inc, raw_pen
        let mut n_steps_this_epoch = 0usize;
        for chunk in order.chunks(config.batch_size) {
            model.zero_grads();
            let mut batch_loss = 0.0;
            let mut batch_inc = 0.0;
            let mut batch_pen = 0.0;
            for &idx in chunk {
                let (loss, breakdown) = cpo::item_loss(model, &items[idx], &cpo_cfg)?;
                if !breakdown.total.is_finite() {
                    let ckpt = out_dir.join("diverged");
                    model.save_checkpoint(&ckpt)?;
                    return Err(TrainError::Diverged {
                        step: global_step,
                        checkpoint: ckpt,
                    });
                }
                loss.backward()?;
                batch_loss += -breakdown.total;
                batch_inc += breakdown.incentive;
                batch_pen += breakdown.penalty;
                sums.0 += breakdown.incentive;
                sums.1 += breakdown.penalty;
                sums.2 += breakdown.total;
                sums.3 += breakdown.raw_incentive;
                sums.4 += breakdown.raw_penalty;
            }
            global_step += 1;
            n_steps_this_epoch += 1;
            let lr = lr_schedule(global_step, total_steps, config);
            let n = chunk.len() as f64;
            optimizer_step(
                &trainable,
                optim,
                lr,
                config.weight_decay,
                1.0 / n,
                global_step,
            )?;
            metrics.push(MetricsRow {
                step: global_step,
                loss: batch_loss / n,
                incentive: batch_inc / n,
                penalty: batch_pen / n,
                lr,
            });
        }

        // 4. persist epoch artifacts
        let n_items = items.len() as f64;
        let mean_loss = LossBreakdown {
            incentive: sums.0 / n_items,
            penalty: sums.1 / n_items,
            total: sums.2 / n_items,
            raw_incentive: sums.3 / n_items,
            raw_penalty: sums.4 / n_items,
            incentive_tokens: 0,
            penalty_tokens: 0,
            alpha: config.alpha,
        };
        let checkpoint_path = out_dir.join(format!("epoch-{epoch}"));
        model.save_checkpoint(&checkpoint_path)?;
        fs::write(
            out_dir.join(format!("epoch-{epoch}.optim.json")),
            serde_json::to_string(&optim)?,
        )?;
        let record = EpochRecord {
            epoch,
            probe_report,
            mean_loss,
            updated_layers: selected,
            checkpoint_path: checkpoint_path.clone(),
        };
        fs::write(
            out_dir.join(format!("epoch-{epoch}.record.json")),
            serde_json::to_string_pretty(&record)?,
        )?;
        epoch_records.push(record);
        let _ = n_steps_this_epoch;
    }
    fs::write(out_dir.join("metrics.csv"), metrics_to_csv(&metrics))?;
    Ok(TrainOutcome {
        epoch_records,
        metrics,
    })
}

/// Deterministic per-epoch permutation derived from (seed, epoch) only, so
/// a resumed run visits the same order as an uninterrupted one. Public so
/// external harnesses can replicate the exact batch order.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(
        seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(epoch as u64),
    );
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}
