//! Loss terms.
//!
//! * classification: softmax over cosine logits `cos(z, w_k) / tau`, negative
//!   log-likelihood of the true class, averaged over the batch;
//! * key matching: summed distance between `z` and its selected keys;
//! * prompt orthogonality: mean absolute cosine between standalone prompt
//!   embeddings, `1/(N(N-1)) · Σ_{i<j} |cos(g(P_i), g(P_j))|`;
//! * total: `L_m + λ_k·L_k + λ_p·L_p`.
//!
//! Keys only appear in the key-matching term and prompts only in the other
//! two, so gradients route accordingly without any masking.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{cosine_similarity, AutodiffError, Tape, Tensor, Var};
use crate::bank::{score, AttributeBank, BankError, BankVars, Selection};
use crate::encoders::{EncoderError, TextGraph};

pub const DEFAULT_TAU: f64 = 0.01;
pub const DEFAULT_TRIPLET_MARGIN: f64 = 0.2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error("label {label} out of range for {classes} candidate classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("need at least one candidate class")]
    NoClasses,
    #[error("empty batch")]
    EmptyBatch,
    #[error("temperature must be positive and finite, got {0}")]
    BadTemperature(f64),
    #[error("loss weights must be non-negative, got lambda_k={0}, lambda_p={1}")]
    NegativeWeight(f64, f64),
    #[error("triplet matching needs an unselected key, but all {0} keys are selected")]
    NoNegatives(usize),
    #[error("triplet margin must be positive, got {0}")]
    BadMargin(f64),
    #[error("non-finite embedding passed to {0}")]
    NonFinite(&'static str),
    #[error(transparent)]
    Bank(#[from] BankError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Distance used by the key-matching term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DistanceVariant {
    /// `1 - cos(z, k)`
    #[default]
    Cosine,
    /// `‖ẑ - k̂‖²` on unit-normalised vectors.
    Mse,
    /// `max(0, γ(z, k_sel) - γ(z, k_neg) + margin)` with the nearest
    /// unselected key as negative.
    Triplet { margin: f64 },
}

impl DistanceVariant {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        match *self {
            DistanceVariant::Triplet { margin } if !(margin > 0.0 && margin.is_finite()) => {
                Err(ObjectiveError::BadMargin(margin))
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DistanceVariant::Cosine => "cosine",
            DistanceVariant::Mse => "mse",
            DistanceVariant::Triplet { .. } => "triplet",
        }
    }
}

impl fmt::Display for DistanceVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DistanceVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cosine" => Ok(DistanceVariant::Cosine),
            "mse" => Ok(DistanceVariant::Mse),
            "triplet" => Ok(DistanceVariant::Triplet {
                margin: DEFAULT_TRIPLET_MARGIN,
            }),
            other => Err(format!("unknown distance variant `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_m: f64,
    pub l_k: f64,
    pub l_p: f64,
    pub total: f64,
    pub lambda_k: f64,
    pub lambda_p: f64,
    pub tau: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.l_m, self.l_k, self.l_p, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

fn check_tau(tau: f64) -> Result<(), ObjectiveError> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(ObjectiveError::BadTemperature(tau))
    }
}

/// Cosine logits `cos(z, w_k) / tau`.
pub fn cosine_logits(z: &[f64], text_embeddings: &[Vec<f64>], tau: f64) -> Result<Vec<f64>, ObjectiveError> {
    check_tau(tau)?;
    if text_embeddings.is_empty() {
        return Err(ObjectiveError::NoClasses);
    }
    if !z.iter().chain(text_embeddings.iter().flatten()).all(|v| v.is_finite()) {
        return Err(ObjectiveError::NonFinite("cosine_logits"));
    }
    Ok(text_embeddings
        .iter()
        .map(|w| cosine_similarity(z, w) / tau)
        .collect())
}

/// Class probabilities from cosine logits, max-shifted before exponentiation.
pub fn predict_probabilities(
    z: &[f64],
    text_embeddings: &[Vec<f64>],
    tau: f64,
) -> Result<Vec<f64>, ObjectiveError> {
    let logits = cosine_logits(z, text_embeddings, tau)?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// `-log p(label)` for one image against candidate embeddings on the tape.
pub fn classification_term(
    tape: &mut Tape,
    z: Var,
    text: &[Var],
    label: usize,
    tau: f64,
) -> Result<Var, ObjectiveError> {
    check_tau(tau)?;
    if text.is_empty() {
        return Err(ObjectiveError::NoClasses);
    }
    if label >= text.len() {
        return Err(ObjectiveError::LabelOutOfRange {
            label,
            classes: text.len(),
        });
    }
    let sims = text
        .iter()
        .map(|&w| tape.cosine_sim(z, w))
        .collect::<Result<Vec<_>, _>>()?;
    let stacked = tape.stack(&sims)?;
    let logits = tape.scale(stacked, 1.0 / tau)?;
    Ok(tape.neg_log_prob(logits, label)?)
}

/// One image's contribution to the classification loss.
pub struct ClassificationItem<'a> {
    pub z: Var,
    pub text: &'a [Var],
    pub label: usize,
}

/// Batch mean of [`classification_term`].
pub fn classification_loss(
    tape: &mut Tape,
    items: &[ClassificationItem<'_>],
    tau: f64,
) -> Result<Var, ObjectiveError> {
    if items.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    let terms = items
        .iter()
        .map(|it| classification_term(tape, it.z, it.text, it.label, tau))
        .collect::<Result<Vec<_>, _>>()?;
    let stacked = tape.stack(&terms)?;
    Ok(tape.mean(stacked)?)
}

/// Nearest key not in `sel`.
fn hardest_negative(z: &[f64], bank: &AttributeBank, sel: &Selection) -> Result<usize, ObjectiveError> {
    let mut best: Option<(f64, usize)> = None;
    for i in (0..bank.n()).filter(|i| !sel.contains(*i)) {
        let s = score(z, bank.key(i))?;
        if best.is_none_or(|(bs, _)| s < bs) {
            best = Some((s, i));
        }
    }
    best.map(|b| b.1).ok_or(ObjectiveError::NoNegatives(bank.n()))
}

/// Key-matching term for one image. `z` is a constant; only selected keys
/// are registered as leaves.
pub fn key_matching_loss(
    tape: &mut Tape,
    vars: &mut BankVars,
    bank: &AttributeBank,
    z: &[f64],
    sel: &Selection,
    variant: DistanceVariant,
) -> Result<Var, ObjectiveError> {
    variant.validate()?;
    if !z.iter().all(|v| v.is_finite()) {
        return Err(ObjectiveError::NonFinite("key_matching_loss"));
    }
    let zv = tape.constant(Tensor::vector(z.to_vec()));
    let negative = match variant {
        DistanceVariant::Triplet { .. } => {
            let j = hardest_negative(z, bank, sel)?;
            let kn = tape.constant(Tensor::vector(bank.key(j).to_vec()));
            let cos = tape.cosine_sim(zv, kn)?;
            Some(tape.scale(cos, -1.0)?)
        }
        _ => None,
    };
    let z_unit = if variant == DistanceVariant::Mse {
        let n = tape.l2norm(zv)?;
        Some(tape.div_scalar(zv, n)?)
    } else {
        None
    };
    let mut terms = Vec::with_capacity(sel.indices.len());
    for &i in &sel.indices {
        let k = vars.key(tape, bank, i);
        let term = match variant {
            DistanceVariant::Cosine => {
                let c = tape.cosine_sim(zv, k)?;
                tape.scale(c, -1.0).and_then(|t| tape.offset(t, 1.0))?
            }
            DistanceVariant::Mse => {
                let kn = tape.l2norm(k)?;
                let ku = tape.div_scalar(k, kn)?;
                let diff = tape.sub(z_unit.expect("mse"), ku)?;
                let sq = tape.mul(diff, diff)?;
                tape.sum(sq)?
            }
            DistanceVariant::Triplet { margin } => {
                // γ(z,k_sel) - γ(z,k_neg) = cos(z,k_neg) - cos(z,k_sel)
                let c = tape.cosine_sim(zv, k)?;
                let neg_c = tape.scale(c, -1.0)?;
                let neg_cos_neg = negative.expect("triplet");
                let cos_neg = tape.scale(neg_cos_neg, -1.0)?;
                let gap = tape.add(neg_c, cos_neg)?;
                let shifted = tape.offset(gap, margin)?;
                tape.relu(shifted)?
            }
        };
        terms.push(term);
    }
    let stacked = tape.stack(&terms)?;
    Ok(tape.sum(stacked)?)
}

/// Orthogonality penalty over all `N` prompts, each encoded on its own.
pub fn prompt_orthogonality_loss(
    tape: &mut Tape,
    vars: &mut BankVars,
    bank: &AttributeBank,
    text: &mut TextGraph<'_>,
) -> Result<Var, ObjectiveError> {
    let n = bank.n();
    if n < 2 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let embeds = (0..n)
        .map(|i| {
            let p = vars.prompt(tape, bank, i);
            text.encode(tape, p)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut pairs = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let c = tape.cosine_sim(embeds[i], embeds[j])?;
            pairs.push(tape.abs(c)?);
        }
    }
    let stacked = tape.stack(&pairs)?;
    let s = tape.sum(stacked)?;
    Ok(tape.scale(s, 1.0 / (n * (n - 1)) as f64)?)
}

/// `L_m + λ_k·L_k + λ_p·L_p`
pub fn total_loss(
    tape: &mut Tape,
    l_m: Var,
    l_k: Var,
    l_p: Var,
    lambda_k: f64,
    lambda_p: f64,
) -> Result<Var, ObjectiveError> {
    if !(lambda_k >= 0.0 && lambda_p >= 0.0) {
        return Err(ObjectiveError::NegativeWeight(lambda_k, lambda_p));
    }
    let wk = tape.scale(l_k, lambda_k)?;
    let wp = tape.scale(l_p, lambda_p)?;
    let s = tape.add(l_m, wk)?;
    Ok(tape.add(s, wp)?)
}
