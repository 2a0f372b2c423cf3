//! Raw token activation maps and textual relevance.
//!
//! A raw map is the clamped projection of every visual feature onto the
//! classifier row of one token, the logit-space CAM. Since the classifier is
//! a single linear layer on top of the feature, the gradient-weighted variant
//! reduces to the same quantity, so this map is also the Grad-CAM baseline.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dump::{FeatureDump, Matrix};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ActivationError {
    #[error("dimension mismatch: features have {features} channels, weight has {weight}")]
    DimensionMismatch { features: usize, weight: usize },
    #[error("answer index {index} out of range (n_a = {n_answer})")]
    IndexOutOfRange { index: usize, n_answer: usize },
}

/// Processing stage a map has reached.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Raw,
    Causal,
    Denoised,
    Final,
}

/// Nonnegative map over the flattened visual grid of one token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationMap {
    pub values: Vec<f64>,
    /// Position in prompt-then-answer order.
    pub token_index: usize,
    pub stage: Stage,
}

impl ActivationMap {
    pub fn new(values: Vec<f64>, token_index: usize, stage: Stage) -> Self {
        ActivationMap {
            values,
            token_index,
            stage,
        }
    }

    pub fn zeros(len: usize, token_index: usize, stage: Stage) -> Self {
        ActivationMap::new(vec![0.0; len], token_index, stage)
    }

    pub fn with_token_index(mut self, token_index: usize) -> Self {
        self.token_index = token_index;
        self
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn clamp_nonnegative(&mut self) {
        for v in &mut self.values {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }
}

/// Relevance of every context token to one explained token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceVector {
    pub values: Vec<f64>,
    /// Positions zeroed because the context token equals the explained token.
    pub masked: Vec<bool>,
}

impl RelevanceVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// `max(0, <row, weight>)` for every visual row.
pub fn raw_map(features: &Matrix, weight: &[f32]) -> Result<ActivationMap, ActivationError> {
    if features.cols() != weight.len() {
        return Err(ActivationError::DimensionMismatch {
            features: features.cols(),
            weight: weight.len(),
        });
    }
    let values = features
        .iter_rows()
        .map(|row| dot(row, weight).max(0.0))
        .collect();
    Ok(ActivationMap::new(values, 0, Stage::Raw))
}

/// Raw maps for all tokens in prompt-then-answer order; map `j` uses weight row `j`.
pub fn all_raw_maps(dump: &FeatureDump) -> Result<Vec<ActivationMap>, ActivationError> {
    (0..dump.token_weights.rows())
        .into_par_iter()
        .map(|j| raw_map(&dump.visual_features, dump.token_weights.row(j)).map(|m| m.with_token_index(j)))
        .collect()
}

/// Relevance of the tokens preceding `token_index` (prompt-then-answer order)
/// to that token.
pub fn context_relevance(dump: &FeatureDump, token_index: usize, apply_same_token_mask: bool) -> RelevanceVector {
    let weight = dump.token_weights.row(token_index);
    let own_id = dump.token(token_index).token_id;
    let mut values = Vec::with_capacity(token_index);
    let mut masked = Vec::with_capacity(token_index);
    for k in 0..token_index {
        let same = apply_same_token_mask && dump.token(k).token_id == own_id;
        masked.push(same);
        values.push(if same {
            0.0
        } else {
            dot(dump.text_feature(k), weight).max(0.0)
        });
    }
    RelevanceVector { values, masked }
}

/// Relevance of the `n_p + answer_index` context tokens to answer token
/// `answer_index` (0-based).
pub fn textual_relevance(
    dump: &FeatureDump,
    answer_index: usize,
    apply_same_token_mask: bool,
) -> Result<RelevanceVector, ActivationError> {
    if answer_index >= dump.n_answer() {
        return Err(ActivationError::IndexOutOfRange {
            index: answer_index,
            n_answer: dump.n_answer(),
        });
    }
    Ok(context_relevance(
        dump,
        dump.n_prompt() + answer_index,
        apply_same_token_mask,
    ))
}
