//! Contrastive preference objective: two contrastive instructions, the
//! summary-level flag Y, token masks from sentence labels, and the masked
//! incentive/penalty losses combined with a penalty weight alpha.
//!
//! Sign convention: both component terms are log-likelihood sums (<= 0);
//! training minimizes the negation of their weighted sum.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{AnnotatedSummary, ByteTokenizer, CorpusError, TokenizedSample};
use crate::model::{Model, ModelError};
use crate::tensor::{Scalar, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum CpoError {
    #[error("instruction template must contain exactly one [ARTICLE] placeholder, found {0}")]
    BadPlaceholder(usize),
    #[error("templates must differ only in the consistent/inconsistent wording")]
    TemplatesDiverge,
    #[error("empty sentence label sequence")]
    EmptyLabels,
    #[error("mask length {mask} does not match token count {tokens}")]
    MaskMismatch { mask: usize, tokens: usize },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

// ---------------------------------------------------------------------------
// Instructions

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InstructionKind {
    Contextual,
    Internal,
}

pub const ARTICLE_PLACEHOLDER: &str = "[ARTICLE]";

/// The contextual instruction (write a consistent summary) and the internal
/// instruction (write an inconsistent one), as renderable templates.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct InstructionPair {
    pub contextual: String,
    pub internal: String,
}

impl Default for InstructionPair {
    fn default() -> Self {
        InstructionPair {
            contextual: "Article: [ARTICLE]. Write a summary consistent with the above article in no more than 40 words:".into(),
            internal: "Article: [ARTICLE]. Write a summary inconsistent with the above article in no more than 40 words:".into(),
        }
    }
}

impl InstructionPair {
    pub fn validate(&self) -> Result<(), CpoError> {
        for template in [&self.contextual, &self.internal] {
            let count = template.matches(ARTICLE_PLACEHOLDER).count();
            if count != 1 {
                return Err(CpoError::BadPlaceholder(count));
            }
        }
        // swapping the single wording difference must map one onto the other
        if self.internal.replacen("inconsistent", "consistent", 1) != self.contextual {
            return Err(CpoError::TemplatesDiverge);
        }
        Ok(())
    }

    pub fn template(&self, kind: InstructionKind) -> &str {
        match kind {
            InstructionKind::Contextual => &self.contextual,
            InstructionKind::Internal => &self.internal,
        }
    }

    pub fn render(&self, kind: InstructionKind, article: &str) -> String {
        self.template(kind).replacen(ARTICLE_PLACEHOLDER, article, 1)
    }
}

// ---------------------------------------------------------------------------
// Y and masks

/// 1 iff no sentence label is 0.
pub fn compute_y(labels: &[u8]) -> Result<u8, CpoError> {
    if labels.is_empty() {
        return Err(CpoError::EmptyLabels);
    }
    Ok(u8::from(labels.iter().all(|&l| l != 0)))
}

/// Which instruction carries each loss term and which summary tokens
/// contribute to it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSet {
    pub incentive_instruction: InstructionKind,
    pub incentive_mask: Vec<bool>,
    pub penalty_instruction: InstructionKind,
    pub penalty_mask: Vec<bool>,
}

/// Y=1: incentive over all tokens under the contextual instruction and
/// penalty over all tokens under the internal one. Y=0: both terms cover
/// exactly the inconsistent-sentence tokens, with the instructions swapped;
/// consistent tokens of a Y=0 sample appear in neither mask.
pub fn build_masks(sample: &TokenizedSample) -> MaskSet {
    if sample.y == 1 {
        let all = vec![true; sample.summary_tokens.len()];
        MaskSet {
            incentive_instruction: InstructionKind::Contextual,
            incentive_mask: all.clone(),
            penalty_instruction: InstructionKind::Internal,
            penalty_mask: all,
        }
    } else {
        let neg: Vec<bool> = sample.token_label.iter().map(|&l| l == 0).collect();
        MaskSet {
            incentive_instruction: InstructionKind::Internal,
            incentive_mask: neg.clone(),
            penalty_instruction: InstructionKind::Contextual,
            penalty_mask: neg,
        }
    }
}

// ---------------------------------------------------------------------------
// Loss terms

fn mask_tensor<S: Scalar>(mask: &[bool]) -> Tensor<S> {
    Tensor::from_vec(
        &[mask.len()],
        mask.iter()
            .map(|&m| if m { S::one() } else { S::zero() })
            .collect(),
    )
}

fn check_mask<S: Scalar>(logprobs: &Tensor<S>, mask: &[bool]) -> Result<(), CpoError> {
    if logprobs.len() != mask.len() {
        return Err(CpoError::MaskMismatch {
            mask: mask.len(),
            tokens: logprobs.len(),
        });
    }
    Ok(())
}

/// Sum of per-token log-probabilities over masked tokens (a log-likelihood,
/// <= 0). `logprobs` must be computed under the mask set's incentive
/// instruction. Returns the graph node and the contributing token count.
pub fn incentive_loss<S: Scalar>(
    logprobs: &Tensor<S>,
    mask: &[bool],
) -> Result<(Tensor<S>, usize), CpoError> {
    check_mask(logprobs, mask)?;
    let count = mask.iter().filter(|&&m| m).count();
    let masked = logprobs.mul(&mask_tensor(mask))?;
    Ok((masked.sum(), count))
}

/// Sum over masked tokens of log(max(1 - P, eps)), with P = exp(logprob).
/// `logprobs` must be computed under the mask set's penalty instruction.
/// The clamp keeps the term finite when the model saturates at P -> 1.
pub fn penalty_loss<S: Scalar>(
    logprobs: &Tensor<S>,
    mask: &[bool],
    eps: f64,
) -> Result<(Tensor<S>, usize), CpoError> {
    check_mask(logprobs, mask)?;
    let count = mask.iter().filter(|&&m| m).count();
    let one_minus_p = logprobs.exp().scale(-S::one()).add_scalar(S::one());
    let log_terms = one_minus_p.clamp_min(S::from_f64(eps)).ln();
    let masked = log_terms.mul(&mask_tensor(mask))?;
    Ok((masked.sum(), count))
}

// ---------------------------------------------------------------------------
// Combined objective

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CpoConfig {
    pub alpha: f64,
    pub eps: f64,
    /// Divide each term by its contributing token count before combining,
    /// keeping alpha's meaning stable across variable-length batches.
    pub normalize_per_token: bool,
}

impl Default for CpoConfig {
    fn default() -> Self {
        CpoConfig {
            alpha: 0.05,
            eps: 1e-7,
            normalize_per_token: true,
        }
    }
}

/// Per-step loss report. `incentive`/`penalty`/`total` are the (optionally
/// per-token normalized) log-likelihood terms with
/// total = incentive + alpha * penalty; the training loss is -total.
/// Raw unnormalized sums are reported alongside.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub incentive: f64,
    pub penalty: f64,
    pub total: f64,
    pub raw_incentive: f64,
    pub raw_penalty: f64,
    pub incentive_tokens: usize,
    pub penalty_tokens: usize,
    pub alpha: f64,
}

/// Combine the two terms into the scalar minimized by the optimizer:
/// -(incentive + alpha * penalty).
pub fn total_objective<S: Scalar>(
    incentive: &Tensor<S>,
    penalty: &Tensor<S>,
    incentive_tokens: usize,
    penalty_tokens: usize,
    config: &CpoConfig,
) -> (Tensor<S>, LossBreakdown) {
    let raw_incentive = incentive.item().to_f64_lossy();
    let raw_penalty = penalty.item().to_f64_lossy();
    let (inc_term, pen_term) = if config.normalize_per_token {
        (
            incentive.scale(S::from_f64(1.0 / incentive_tokens.max(1) as f64)),
            penalty.scale(S::from_f64(1.0 / penalty_tokens.max(1) as f64)),
        )
    } else {
        (incentive.clone(), penalty.clone())
    };
    let alpha = S::from_f64(config.alpha);
    let total = inc_term.add(&pen_term.scale(alpha)).expect("scalar add");
    let loss = total.scale(-S::one());
    let breakdown = LossBreakdown {
        incentive: inc_term.item().to_f64_lossy(),
        penalty: pen_term.item().to_f64_lossy(),
        total: total.item().to_f64_lossy(),
        raw_incentive,
        raw_penalty,
        incentive_tokens,
        penalty_tokens,
        alpha: config.alpha,
    };
    (loss, breakdown)
}

// ---------------------------------------------------------------------------
// Model plumbing: per-sample loss through two forward passes

/// One training item: the summary sample plus both instruction renderings.
#[derive(Debug, Clone)]
pub struct CpoItem {
    pub contextual_prompt: Vec<usize>,
    pub internal_prompt: Vec<usize>,
    pub sample: TokenizedSample,
    pub article: String,
}

pub fn prepare_item(
    record: &AnnotatedSummary,
    pair: &InstructionPair,
    tokenizer: &ByteTokenizer,
) -> Result<CpoItem, CpoError> {
    let contextual = pair.render(InstructionKind::Contextual, &record.article);
    let internal = pair.render(InstructionKind::Internal, &record.article);
    let sample = crate::corpus::align_tokens(record, tokenizer, &contextual)?;
    Ok(CpoItem {
        contextual_prompt: tokenizer.encode(&contextual),
        internal_prompt: tokenizer.encode(&internal),
        sample,
        article: record.article.clone(),
    })
}

impl CpoItem {
    pub fn prompt(&self, kind: InstructionKind) -> &[usize] {
        match kind {
            InstructionKind::Contextual => &self.contextual_prompt,
            InstructionKind::Internal => &self.internal_prompt,
        }
    }
}

/// Teacher-forced log-probabilities of each summary token given the prompt,
/// as a length-M graph vector.
pub fn summary_token_logprobs<S: Scalar>(
    model: &Model<S>,
    prompt_tokens: &[usize],
    summary_tokens: &[usize],
) -> Result<Tensor<S>, CpoError> {
    let mut full = Vec::with_capacity(prompt_tokens.len() + summary_tokens.len());
    full.extend_from_slice(prompt_tokens);
    full.extend_from_slice(summary_tokens);
    let inputs = &full[..full.len() - 1];
    let out = model.forward(inputs, false)?;
    let logprobs = out.logits.log_softmax_rows()?;
    let p_len = prompt_tokens.len();
    let idx: Vec<(usize, usize)> = summary_tokens
        .iter()
        .enumerate()
        .map(|(m, &tok)| (p_len - 1 + m, tok))
        .collect();
    Ok(logprobs.gather_row_cols(&idx)?)
}

/// The full objective for one item: two forward passes (one per
/// instruction) against the same parameters, masked terms, weighted sum.
pub fn item_loss<S: Scalar>(
    model: &Model<S>,
    item: &CpoItem,
    config: &CpoConfig,
) -> Result<(Tensor<S>, LossBreakdown), CpoError> {
    let masks = build_masks(&item.sample);
    let inc_logprobs = summary_token_logprobs(
        model,
        item.prompt(masks.incentive_instruction),
        &item.sample.summary_tokens,
    )?;
    let pen_logprobs = summary_token_logprobs(
        model,
        item.prompt(masks.penalty_instruction),
        &item.sample.summary_tokens,
    )?;
    let (inc, inc_count) = incentive_loss(&inc_logprobs, &masks.incentive_mask)?;
    let (pen, pen_count) = penalty_loss(&pen_logprobs, &masks.penalty_mask, config.eps)?;
    Ok(total_objective(&inc, &pen, inc_count, pen_count, config))
}

/// Evaluation-only statistics under the contextual instruction: the sum of
/// log P over consistent-sentence tokens and the sum of P over
/// inconsistent-sentence tokens, with their counts.
pub struct ContextualTokenStats {
    pub splus_logprob_sum: f64,
    pub splus_count: usize,
    pub sminus_prob_sum: f64,
    pub sminus_count: usize,
}

pub fn contextual_token_stats<S: Scalar>(
    model: &Model<S>,
    item: &CpoItem,
) -> Result<ContextualTokenStats, CpoError> {
    let logprobs = summary_token_logprobs(model, &item.contextual_prompt, &item.sample.summary_tokens)?;
    let values = logprobs.to_vec();
    let mut stats = ContextualTokenStats {
        splus_logprob_sum: 0.0,
        splus_count: 0,
        sminus_prob_sum: 0.0,
        sminus_count: 0,
    };
    for (i, &label) in item.sample.token_label.iter().enumerate() {
        let lp = values[i].to_f64_lossy();
        if label == 1 {
            stats.splus_logprob_sum += lp;
            stats.splus_count += 1;
        } else {
            stats.sminus_prob_sum += lp.exp();
            stats.sminus_count += 1;
        }
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(token_label: &[u8]) -> TokenizedSample {
        let n = token_label.len();
        TokenizedSample {
            prompt_tokens: vec![65, 66],
            summary_tokens: (0..n).map(|i| 97 + i).collect(),
            sentence_of_token: token_label
                .iter()
                .scan((0usize, None::<u8>), |(idx, prev), &l| {
                    if prev.is_some() && *prev != Some(l) {
                        *idx += 1;
                    }
                    *prev = Some(l);
                    Some(*idx)
                })
                .collect(),
            token_label: token_label.to_vec(),
            y: u8::from(token_label.iter().all(|&l| l == 1)),
        }
    }

    #[test]
    fn default_templates_match_published_wording() {
        let pair = InstructionPair::default();
        pair.validate().unwrap();
        assert!(pair.contextual.contains("Write a summary consistent with the above article"));
        assert!(pair.internal.contains("Write a summary inconsistent with the above article"));
        assert!(pair.contextual.contains("in no more than 40 words"));
        let rendered = pair.render(InstructionKind::Contextual, "BODY");
        assert!(rendered.starts_with("Article: BODY."));
        assert!(!rendered.contains(ARTICLE_PLACEHOLDER));
    }

    #[test]
    fn template_validation_catches_divergence() {
        let mut pair = InstructionPair::default();
        pair.internal = "Article: [ARTICLE]. Write something else:".into();
        assert!(matches!(pair.validate(), Err(CpoError::TemplatesDiverge)));
        pair.internal = "no placeholder".into();
        assert!(matches!(pair.validate(), Err(CpoError::BadPlaceholder(0))));
    }

    #[test]
    fn compute_y_rules() {
        assert_eq!(compute_y(&[1, 1, 1]).unwrap(), 1);
        assert_eq!(compute_y(&[1, 0, 1]).unwrap(), 0);
        assert_eq!(compute_y(&[0]).unwrap(), 0);
        assert!(matches!(compute_y(&[]), Err(CpoError::EmptyLabels)));
    }

    #[test]
    fn masks_y1_cover_everything() {
        let masks = build_masks(&sample(&[1, 1, 1, 1]));
        assert_eq!(masks.incentive_instruction, InstructionKind::Contextual);
        assert_eq!(masks.penalty_instruction, InstructionKind::Internal);
        assert_eq!(masks.incentive_mask, vec![true; 4]);
        assert_eq!(masks.penalty_mask, vec![true; 4]);
    }

    #[test]
    fn masks_y0_cover_exactly_negative_tokens() {
        let masks = build_masks(&sample(&[1, 1, 0, 0]));
        assert_eq!(masks.incentive_instruction, InstructionKind::Internal);
        assert_eq!(masks.penalty_instruction, InstructionKind::Contextual);
        assert_eq!(masks.incentive_mask, vec![false, false, true, true]);
        assert_eq!(masks.penalty_mask, vec![false, false, true, true]);
    }

    #[test]
    fn masks_all_negative_sample() {
        let masks = build_masks(&sample(&[0, 0, 0]));
        assert_eq!(masks.incentive_instruction, InstructionKind::Internal);
        assert_eq!(masks.incentive_mask, vec![true; 3]);
        assert_eq!(masks.penalty_mask, vec![true; 3]);
    }

    #[test]
    fn incentive_uniform_model() {
        // 3 tokens at P = 0.25 each
        let lp = Tensor::<f64>::from_vec(&[3], vec![0.25f64.ln(); 3]);
        let (loss, count) = incentive_loss(&lp, &[true, true, true]).unwrap();
        assert_eq!(count, 3);
        assert!((loss.item() - 3.0 * 0.25f64.ln()).abs() < 1e-9);
        assert!((loss.item() + 4.1589).abs() < 1e-4);
    }

    #[test]
    fn incentive_y0_two_tokens_at_half() {
        let lp = Tensor::<f64>::from_vec(&[4], vec![0.1f64.ln(), 0.2f64.ln(), 0.5f64.ln(), 0.5f64.ln()]);
        let (loss, count) = incentive_loss(&lp, &[false, false, true, true]).unwrap();
        assert_eq!(count, 2);
        assert!((loss.item() - 2.0 * 0.5f64.ln()).abs() < 1e-12);
        assert!((loss.item() + 1.3863).abs() < 1e-4);
    }

    #[test]
    fn incentive_matches_per_token_enumeration() {
        // independent oracle: plain loop over masked entries
        let values = [-0.3f64, -1.7, -0.05, -2.2, -0.9];
        let mask = [true, false, true, true, false];
        let lp = Tensor::from_vec(&[5], values.to_vec());
        let (loss, _) = incentive_loss(&lp, &mask).unwrap();
        let expected: f64 = values
            .iter()
            .zip(mask.iter())
            .filter(|(_, &m)| m)
            .map(|(&v, _)| v)
            .sum();
        assert!((loss.item() - expected).abs() < 1e-6);
    }

    #[test]
    fn incentive_mask_mismatch() {
        let lp = Tensor::<f64>::from_vec(&[3], vec![-1.0; 3]);
        assert!(matches!(
            incentive_loss(&lp, &[true, true]),
            Err(CpoError::MaskMismatch { .. })
        ));
    }

    #[test]
    fn penalty_values() {
        // Y=1: 2 tokens at P(w|internal) = 0.25 -> 2 ln 0.75
        let lp = Tensor::<f64>::from_vec(&[2], vec![0.25f64.ln(); 2]);
        let (loss, _) = penalty_loss(&lp, &[true, true], 1e-7).unwrap();
        assert!((loss.item() - 2.0 * 0.75f64.ln()).abs() < 1e-12);
        assert!((loss.item() + 0.5754).abs() < 1e-4);

        // Y=0: one token at P(w|contextual) = 0.9 -> ln 0.1
        let lp = Tensor::<f64>::from_vec(&[1], vec![0.9f64.ln()]);
        let (loss, _) = penalty_loss(&lp, &[true], 1e-7).unwrap();
        assert!((loss.item() - 0.1f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn penalty_clamps_at_saturation() {
        // P = 1.0 exactly: 1 - P = 0 clamps to eps
        let lp = Tensor::<f64>::from_vec(&[1], vec![0.0]);
        let (loss, _) = penalty_loss(&lp, &[true], 1e-7).unwrap();
        assert!(loss.item().is_finite());
        assert!((loss.item() - 1e-7f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn total_objective_arithmetic() {
        let inc = Tensor::<f64>::from_vec(&[1], vec![-4.1589]);
        let pen = Tensor::<f64>::from_vec(&[1], vec![-0.5754]);
        let cfg = CpoConfig {
            alpha: 0.05,
            eps: 1e-7,
            normalize_per_token: false,
        };
        let (loss, breakdown) = total_objective(&inc, &pen, 3, 2, &cfg);
        assert!((loss.item() - 4.18767).abs() < 1e-5);
        assert!((breakdown.total - (breakdown.incentive + 0.05 * breakdown.penalty)).abs() < 1e-12);
        assert!(breakdown.incentive <= 0.0 && breakdown.penalty <= 0.0);
    }

    #[test]
    fn alpha_zero_is_pure_negative_log_likelihood() {
        let inc = Tensor::<f64>::from_vec(&[1], vec![-2.5]);
        let pen = Tensor::<f64>::from_vec(&[1], vec![-7.7]);
        let cfg = CpoConfig {
            alpha: 0.0,
            eps: 1e-7,
            normalize_per_token: false,
        };
        let (loss, _) = total_objective(&inc, &pen, 1, 1, &cfg);
        assert_eq!(loss.item(), 2.5);
    }

    #[test]
    fn default_alpha_matches_experimental_setting() {
        assert_eq!(CpoConfig::default().alpha, 0.05);
    }

    #[test]
    fn monotonicity_of_loss_terms() {
        let cfg = CpoConfig::default();
        // lowering a masked incentive token's probability raises the loss
        let low = Tensor::<f64>::from_vec(&[1], vec![0.2f64.ln()]);
        let high = Tensor::<f64>::from_vec(&[1], vec![0.4f64.ln()]);
        let pen = Tensor::<f64>::from_vec(&[1], vec![-0.1]);
        let (inc_lo, _) = incentive_loss(&low, &[true]).unwrap();
        let (inc_hi, _) = incentive_loss(&high, &[true]).unwrap();
        let (loss_lo, _) = total_objective(&inc_lo, &pen, 1, 1, &cfg);
        let (loss_hi, _) = total_objective(&inc_hi, &pen, 1, 1, &cfg);
        assert!(loss_lo.item() > loss_hi.item());

        // raising a masked penalty token's probability raises the loss
        let inc = Tensor::<f64>::from_vec(&[1], vec![-0.5]);
        let (pen_lo, _) = penalty_loss(&Tensor::from_vec(&[1], vec![0.2f64.ln()]), &[true], 1e-7).unwrap();
        let (pen_hi, _) = penalty_loss(&Tensor::from_vec(&[1], vec![0.8f64.ln()]), &[true], 1e-7).unwrap();
        let (loss_lo, _) = total_objective(&inc, &pen_lo, 1, 1, &cfg);
        let (loss_hi, _) = total_objective(&inc, &pen_hi, 1, 1, &cfg);
        assert!(loss_hi.item() > loss_lo.item());
    }
}
