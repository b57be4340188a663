//! Visual token editing: boost the patch embeddings inside a region of
//! interest by a gain derived from how little attention the region currently
//! receives.
//!
//! The gain is `β = s · κ · φ(ā_bg / ā_roi − 1)` where `ā_roi` and `ā_bg` are
//! the mean pre-softmax attention logits over ROI and background patches and
//! `s` is the detector confidence. Each ROI token is then moved along a fixed
//! direction: `v* = v + β · m · b`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum VteError {
    #[error("mask selects no ROI patches")]
    NoRoiPatches,
    #[error("mask selects no background patches")]
    NoBackgroundPatches,
    #[error("mean ROI logit is zero; gain is undefined")]
    DegenerateLogits,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("cannot read token fixture: {0}")]
    Io(String),
}

/// Patch embeddings with their ROI mask and attention logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualTokens {
    pub embeddings: Vec<Vec<f64>>,
    /// 1 marks an ROI patch, 0 a background patch.
    pub mask: Vec<u8>,
    pub attn_logits: Vec<f64>,
}

impl VisualTokens {
    pub fn new(embeddings: Vec<Vec<f64>>, mask: Vec<u8>, attn_logits: Vec<f64>) -> Result<Self, VteError> {
        let t = VisualTokens { embeddings, mask, attn_logits };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), VteError> {
        let n = self.embeddings.len();
        if self.mask.len() != n || self.attn_logits.len() != n {
            return Err(VteError::Shape(format!(
                "{} embeddings, {} mask entries, {} logits",
                n,
                self.mask.len(),
                self.attn_logits.len()
            )));
        }
        if let Some(first) = self.embeddings.first() {
            if self.embeddings.iter().any(|row| row.len() != first.len()) {
                return Err(VteError::Shape("embedding rows differ in length".into()));
            }
        }
        if self.mask.iter().any(|&m| m > 1) {
            return Err(VteError::Shape("mask entries must be 0 or 1".into()));
        }
        if !self.mask.contains(&0) {
            return Err(VteError::NoBackgroundPatches);
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        self.embeddings.len()
    }

    /// Reads a JSON fixture `{"embeddings": [[..]], "mask": [..], "attn_logits": [..]}`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, VteError> {
        let text = std::fs::read_to_string(path).map_err(|e| VteError::Io(e.to_string()))?;
        let tokens: VisualTokens = serde_json::from_str(&text).map_err(|e| VteError::Io(e.to_string()))?;
        tokens.validate()?;
        Ok(tokens)
    }
}

/// The non-negative, non-decreasing activation φ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Softplus,
    IdentityClampedNonneg,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu | Activation::IdentityClampedNonneg => x.max(0.0),
            // ln(1 + e^x) without overflow for large x
            Activation::Softplus => x.max(0.0) + (-x.abs()).exp().ln_1p(),
        }
    }
}

/// Boost direction `b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// `b = v_i`, i.e. the token is scaled by `1 + β`.
    #[default]
    #[serde(rename = "self")]
    SelfDirection,
    /// `b = 1`.
    Ones,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VteConfig {
    pub kappa: f64,
    pub activation: Activation,
    pub direction: Direction,
    /// Number of early attention layers the edit targets (1..=3). Carried for
    /// white-box integrations; the edit here is applied once at the input.
    pub layer_budget: u8,
}

impl Default for VteConfig {
    fn default() -> Self {
        VteConfig { kappa: 1.0, activation: Activation::Relu, direction: Direction::SelfDirection, layer_budget: 1 }
    }
}

impl VteConfig {
    pub fn validate(&self) -> Result<(), VteError> {
        if !(0.0..=1.0).contains(&self.kappa) {
            return Err(VteError::Parameter(format!("kappa {} outside [0, 1]", self.kappa)));
        }
        if !(1..=3).contains(&self.layer_budget) {
            return Err(VteError::Parameter(format!("layer_budget {} outside 1..=3", self.layer_budget)));
        }
        Ok(())
    }
}

/// Mean logit over ROI patches and over background patches.
pub fn mean_logits(tokens: &VisualTokens) -> Result<(f64, f64), VteError> {
    let (mut roi_sum, mut roi_n, mut bg_sum, mut bg_n) = (0.0, 0usize, 0.0, 0usize);
    for (&m, &a) in tokens.mask.iter().zip(&tokens.attn_logits) {
        if m == 1 {
            roi_sum += a;
            roi_n += 1;
        } else {
            bg_sum += a;
            bg_n += 1;
        }
    }
    if roi_n == 0 {
        return Err(VteError::NoRoiPatches);
    }
    if bg_n == 0 {
        return Err(VteError::NoBackgroundPatches);
    }
    Ok((roi_sum / roi_n as f64, bg_sum / bg_n as f64))
}

pub fn compute_gain(a_roi: f64, a_bg: f64, confidence: f64, cfg: &VteConfig) -> Result<f64, VteError> {
    cfg.validate()?;
    if !(0.0..=1.0).contains(&confidence) {
        return Err(VteError::Parameter(format!("confidence {confidence} outside [0, 1]")));
    }
    if !a_roi.is_finite() || !a_bg.is_finite() {
        return Err(VteError::Parameter("non-finite logit mean".into()));
    }
    if cfg.kappa == 0.0 {
        return Ok(0.0);
    }
    // The region already draws at least as much attention as the background.
    if a_roi >= a_bg {
        return Ok(0.0);
    }
    if a_roi == 0.0 {
        return Err(VteError::DegenerateLogits);
    }
    Ok(confidence * cfg.kappa * cfg.activation.apply(a_bg / a_roi - 1.0))
}

pub fn apply_token_boost(tokens: &VisualTokens, beta: f64, cfg: &VteConfig) -> Result<VisualTokens, VteError> {
    if !(beta >= 0.0) || !beta.is_finite() {
        return Err(VteError::Parameter(format!("gain {beta} must be finite and non-negative")));
    }
    let mut out = tokens.clone();
    if beta == 0.0 {
        return Ok(out);
    }
    for (row, &m) in out.embeddings.iter_mut().zip(&tokens.mask) {
        if m == 0 {
            continue;
        }
        for x in row.iter_mut() {
            let b = match cfg.direction {
                Direction::SelfDirection => *x,
                Direction::Ones => 1.0,
            };
            *x += beta * b;
        }
    }
    Ok(out)
}

/// Inverse of [`apply_token_boost`] for a known gain and direction.
pub fn revert_token_boost(tokens: &VisualTokens, beta: f64, cfg: &VteConfig) -> VisualTokens {
    let mut out = tokens.clone();
    for (row, &m) in out.embeddings.iter_mut().zip(&tokens.mask) {
        if m == 0 {
            continue;
        }
        for x in row.iter_mut() {
            *x = match cfg.direction {
                Direction::SelfDirection => *x / (1.0 + beta),
                Direction::Ones => *x - beta,
            };
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VteOutcome {
    pub a_roi: f64,
    pub a_bg: f64,
    pub beta: f64,
    pub tokens: VisualTokens,
}

/// Computes the gain from the supplied logits and applies it once.
pub fn vte_pipeline(tokens: &VisualTokens, confidence: f64, cfg: &VteConfig) -> Result<VteOutcome, VteError> {
    tokens.validate()?;
    let (a_roi, a_bg) = mean_logits(tokens)?;
    let beta = compute_gain(a_roi, a_bg, confidence, cfg)?;
    let boosted = apply_token_boost(tokens, beta, cfg)?;
    Ok(VteOutcome { a_roi, a_bg, beta, tokens: boosted })
}
