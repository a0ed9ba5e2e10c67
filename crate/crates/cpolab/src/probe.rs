//! Probing harness: last-token hidden states under the contextual
//! instruction, per-layer (and per-head) binary linear classifiers, and
//! worst-layer selection used to pick which blocks an epoch trains.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::ByteTokenizer;
use crate::cpo::{CpoError, InstructionKind, InstructionPair};
use crate::model::{Model, ModelError};
use crate::tensor::Scalar;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("probe training data contains a single class")]
    SingleClass,
    #[error("empty probe record set")]
    EmptyRecords,
    #[error("empty held-out set")]
    EmptyHeldout,
    #[error("feature length {got} does not match probe dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("k must be at least 1")]
    BadK,
    #[error("empty accuracy vector")]
    EmptyAccuracies,
    #[error("probe record has an empty summary")]
    EmptySummary,
    #[error("head activations were not captured")]
    HeadsNotCaptured,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Cpo(#[from] CpoError),
}

/// One probing example: an article, a candidate summary, and whether the
/// summary is consistent with the article.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub article: String,
    pub summary: String,
    pub y: u8,
}

impl ProbeRecord {
    pub fn validate(&self) -> Result<(), ProbeError> {
        if self.summary.trim().is_empty() {
            return Err(ProbeError::EmptySummary);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub lr: f64,
    pub epochs: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { lr: 0.01, epochs: 200 }
    }
}

// ---------------------------------------------------------------------------
// Linear probe

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearProbe {
    pub weights: Vec<f64>,
    pub bias: f64,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl LinearProbe {
    pub fn predict(&self, features: &[f64]) -> Result<f64, ProbeError> {
        if features.len() != self.weights.len() {
            return Err(ProbeError::DimensionMismatch {
                expected: self.weights.len(),
                got: features.len(),
            });
        }
        let z: f64 = self
            .weights
            .iter()
            .zip(features)
            .map(|(w, x)| w * x)
            .sum::<f64>()
            + self.bias;
        Ok(sigmoid(z))
    }
}

/// Full-batch logistic regression from zero init: deterministic, no RNG.
/// Fails if the data carries only one class.
pub fn train_probe(
    data: &[(Vec<f64>, u8)],
    config: &ProbeConfig,
) -> Result<LinearProbe, ProbeError> {
    if data.is_empty() {
        return Err(ProbeError::EmptyRecords);
    }
    let positives = data.iter().filter(|(_, y)| *y == 1).count();
    if positives == 0 || positives == data.len() {
        return Err(ProbeError::SingleClass);
    }
    let dim = data[0].0.len();
    for (f, _) in data {
        if f.len() != dim {
            return Err(ProbeError::DimensionMismatch {
                expected: dim,
                got: f.len(),
            });
        }
    }
    let mut probe = LinearProbe {
        weights: vec![0.0; dim],
        bias: 0.0,
    };
    let n = data.len() as f64;
    for _ in 0..config.epochs {
        let mut grad_w = vec![0.0; dim];
        let mut grad_b = 0.0;
        for (f, y) in data {
            let p = probe.predict(f)?;
            let err = p - f64::from(*y);
            for (g, x) in grad_w.iter_mut().zip(f) {
                *g += err * x;
            }
            grad_b += err;
        }
        for (w, g) in probe.weights.iter_mut().zip(&grad_w) {
            *w -= config.lr * g / n;
        }
        probe.bias -= config.lr * grad_b / n;
    }
    Ok(probe)
}

/// Binary cross-entropy of a probe on a dataset; used to check that
/// training makes progress.
pub fn probe_loss(probe: &LinearProbe, data: &[(Vec<f64>, u8)]) -> Result<f64, ProbeError> {
    if data.is_empty() {
        return Err(ProbeError::EmptyRecords);
    }
    let mut total = 0.0;
    for (f, y) in data {
        let p = probe.predict(f)?.clamp(1e-12, 1.0 - 1e-12);
        total -= if *y == 1 { p.ln() } else { (1.0 - p).ln() };
    }
    Ok(total / data.len() as f64)
}

/// Fraction of held-out records where the thresholded prediction matches.
pub fn probe_accuracy(
    probe: &LinearProbe,
    heldout: &[(Vec<f64>, u8)],
) -> Result<f64, ProbeError> {
    if heldout.is_empty() {
        return Err(ProbeError::EmptyHeldout);
    }
    let correct = heldout
        .iter()
        .map(|(f, y)| probe.predict(f).map(|p| u8::from(p > 0.5) == *y))
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .filter(|&c| c)
        .count();
    Ok(correct as f64 / heldout.len() as f64)
}

/// The min(k, N) indices with the lowest accuracy; ties break toward the
/// lower index. Rank-based, so any strictly increasing rescale of the
/// accuracies leaves the selection unchanged.
pub fn select_worst_layers(accuracies: &[f64], k: usize) -> Result<Vec<usize>, ProbeError> {
    if k == 0 {
        return Err(ProbeError::BadK);
    }
    if accuracies.is_empty() {
        return Err(ProbeError::EmptyAccuracies);
    }
    let mut order: Vec<usize> = (0..accuracies.len()).collect();
    order.sort_by(|&a, &b| {
        accuracies[a]
            .partial_cmp(&accuracies[b])
            .expect("accuracies must be comparable")
            .then(a.cmp(&b))
    });
    let mut selected: Vec<usize> = order.into_iter().take(k.min(accuracies.len())).collect();
    selected.sort_unstable();
    Ok(selected)
}

// ---------------------------------------------------------------------------
// Feature extraction

/// Render the contextual instruction around the article, append the
/// summary, and read each layer's hidden state at the final token.
/// Returns one d_model-length vector per layer.
pub fn extract_features<S: Scalar>(
    model: &Model<S>,
    pair: &InstructionPair,
    tokenizer: &ByteTokenizer,
    record: &ProbeRecord,
) -> Result<Vec<Vec<f64>>, ProbeError> {
    record.validate()?;
    let prompt = pair.render(InstructionKind::Contextual, &record.article);
    let mut tokens = tokenizer.encode(&prompt);
    tokens.extend(tokenizer.encode(&record.summary));
    let out = model.forward(&tokens, false)?;
    let acts = out.activation_tensor();
    Ok((0..acts.n_layers)
        .map(|u| acts.last_token(u).to_vec())
        .collect())
}

/// Deterministic 80/20 split on a content hash of the record.
pub fn split_probe_records(records: &[ProbeRecord]) -> (Vec<&ProbeRecord>, Vec<&ProbeRecord>) {
    let mut train = Vec::new();
    let mut heldout = Vec::new();
    for r in records {
        let mut hasher = Sha256::new();
        hasher.update(r.article.as_bytes());
        hasher.update([0u8]);
        hasher.update(r.summary.as_bytes());
        let digest = hasher.finalize();
        let bucket = u64::from_le_bytes(digest[..8].try_into().unwrap()) % 10;
        if bucket < 8 {
            train.push(r);
        } else {
            heldout.push(r);
        }
    }
    (train, heldout)
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeReport {
    pub epoch: usize,
    pub layer_accuracy: Vec<f64>,
    pub head_accuracy: Option<Vec<Vec<f64>>>,
    pub selected: Vec<usize>,
}

impl ProbeReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,accuracy,selected\n");
        for (u, acc) in self.layer_accuracy.iter().enumerate() {
            let sel = u8::from(self.selected.contains(&u));
            out.push_str(&format!("{u},{acc:.6},{sel}\n"));
        }
        out
    }
}

/// Per-layer probe accuracies for one model snapshot: extract features for
/// every record, split 80/20, train a fresh probe per layer, score held-out.
pub fn probe_layers<S: Scalar>(
    model: &Model<S>,
    pair: &InstructionPair,
    tokenizer: &ByteTokenizer,
    records: &[ProbeRecord],
    config: &ProbeConfig,
) -> Result<Vec<f64>, ProbeError> {
    if records.is_empty() {
        return Err(ProbeError::EmptyRecords);
    }
    let features: Vec<(Vec<Vec<f64>>, u8)> = records
        .iter()
        .map(|r| extract_features(model, pair, tokenizer, r).map(|f| (f, r.y)))
        .collect::<Result<_, _>>()?;
    let (train_idx, held_idx) = split_indices(records);
    let n_layers = features[0].0.len();
    let mut accuracies = Vec::with_capacity(n_layers);
    for u in 0..n_layers {
        let train: Vec<(Vec<f64>, u8)> = train_idx
            .iter()
            .map(|&i| (features[i].0[u].clone(), features[i].1))
            .collect();
        let held: Vec<(Vec<f64>, u8)> = held_idx
            .iter()
            .map(|&i| (features[i].0[u].clone(), features[i].1))
            .collect();
        let probe = train_probe(&train, config)?;
        accuracies.push(probe_accuracy(&probe, &held)?);
    }
    Ok(accuracies)
}

fn split_indices(records: &[ProbeRecord]) -> (Vec<usize>, Vec<usize>) {
    let (train, held) = split_probe_records(records);
    let idx_of = |r: &ProbeRecord| -> usize {
        records
            .iter()
            .position(|x| std::ptr::eq(x, r))
            .expect("record comes from this slice")
    };
    (
        train.into_iter().map(idx_of).collect(),
        held.into_iter().map(idx_of).collect(),
    )
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeadProbeReport {
    /// (n_layers x n_heads) held-out accuracies.
    pub accuracy: Vec<Vec<f64>>,
    pub mean: f64,
    pub max: f64,
    pub min: f64,
}

impl HeadProbeReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,head,accuracy\n");
        for (u, row) in self.accuracy.iter().enumerate() {
            for (h, acc) in row.iter().enumerate() {
                out.push_str(&format!("{u},{h},{acc:.6}\n"));
            }
        }
        out
    }
}

/// Diagnostic per-(layer, head) probes over each head's last-token
/// activation slice, with summary statistics over all heads.
pub fn head_probe_report<S: Scalar>(
    model: &Model<S>,
    pair: &InstructionPair,
    tokenizer: &ByteTokenizer,
    records: &[ProbeRecord],
    config: &ProbeConfig,
) -> Result<HeadProbeReport, ProbeError> {
    if records.is_empty() {
        return Err(ProbeError::EmptyRecords);
    }
    let n_layers = model.config.n_layers;
    let n_heads = model.config.n_heads;
    let d_head = model.config.d_model / n_heads;
    // features[i][u][h] = d_head slice at the final token
    let mut features: Vec<Vec<Vec<Vec<f64>>>> = Vec::with_capacity(records.len());
    for r in records {
        r.validate()?;
        let prompt = pair.render(InstructionKind::Contextual, &r.article);
        let mut tokens = tokenizer.encode(&prompt);
        tokens.extend(tokenizer.encode(&r.summary));
        let out = model.forward(&tokens, true)?;
        let heads = out.head_activations.ok_or(ProbeError::HeadsNotCaptured)?;
        let seq_len = out.logits.shape()[0];
        let per_record: Vec<Vec<Vec<f64>>> = (0..n_layers)
            .map(|u| {
                (0..n_heads)
                    .map(|h| {
                        heads[u][h][(seq_len - 1) * d_head..seq_len * d_head]
                            .iter()
                            .map(|v| v.to_f64_lossy())
                            .collect()
                    })
                    .collect()
            })
            .collect();
        features.push(per_record);
    }
    let (train_idx, held_idx) = split_indices(records);
    let mut accuracy = vec![vec![0.0; n_heads]; n_layers];
    for u in 0..n_layers {
        for h in 0..n_heads {
            let train: Vec<(Vec<f64>, u8)> = train_idx
                .iter()
                .map(|&i| (features[i][u][h].clone(), records[i].y))
                .collect();
            let held: Vec<(Vec<f64>, u8)> = held_idx
                .iter()
                .map(|&i| (features[i][u][h].clone(), records[i].y))
                .collect();
            let probe = train_probe(&train, config)?;
            accuracy[u][h] = probe_accuracy(&probe, &held)?;
        }
    }
    let flat: Vec<f64> = accuracy.iter().flatten().copied().collect();
    let mean = flat.iter().sum::<f64>() / flat.len() as f64;
    let max = flat.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = flat.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(HeadProbeReport {
        accuracy,
        mean,
        max,
        min,
    })
}
