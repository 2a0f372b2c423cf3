//! Per-token pipeline: causal subtraction, denoising, and joint
//! normalization of visual and textual evidence.

use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::activation::{self, ActivationError, ActivationMap, RelevanceVector, Stage};
use crate::causal::{self, CausalConfig, CausalError};
use crate::dump::FeatureDump;
use crate::filter::{self, FilterConfig, FilterError, FilterKind};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Activation(#[from] ActivationError),
    #[error(transparent)]
    Causal(#[from] CausalError),
    #[error(transparent)]
    Filter(#[from] FilterError),
}

/// `(x - min) / (max - min)`; all zeros when the range is degenerate.
pub fn min_max_normalize(values: &[f64]) -> Vec<f64> {
    min_max_with_range(values).0
}

fn min_max_with_range(values: &[f64]) -> (Vec<f64>, (f64, f64)) {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if values.is_empty() {
        return (Vec::new(), (0.0, 0.0));
    }
    let span = hi - lo;
    let out = if span > 0.0 {
        values.iter().map(|v| (v - lo) / span).collect()
    } else {
        vec![0.0; values.len()]
    };
    (out, (lo, hi))
}

/// Jointly normalized visual map and textual relevance of one answer token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultimodalMap {
    pub visual: Vec<f64>,
    /// Over the `n_p + i` context tokens.
    pub textual: Vec<f64>,
    /// Position in prompt-then-answer order.
    pub token_index: usize,
    pub normalization_range: (f64, f64),
}

impl MultimodalMap {
    /// Normalizes `visual` and `textual` with one shared min-max.
    pub fn from_parts(visual: &[f64], textual: &[f64], token_index: usize) -> Self {
        let joined: Vec<f64> = visual.iter().chain(textual).copied().collect();
        let (mut norm, range) = min_max_with_range(&joined);
        let textual = norm.split_off(visual.len());
        MultimodalMap {
            visual: norm,
            textual,
            token_index,
            normalization_range: range,
        }
    }

    pub fn visual_map(&self) -> ActivationMap {
        ActivationMap::new(self.visual.clone(), self.token_index, Stage::Final)
    }
}

/// Which pipeline modules run; the ablation axes of the method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PipelineStage {
    CamOnly,
    EciOnly,
    FilterOnly,
    Full,
}

impl PipelineStage {
    pub fn uses_causal(self) -> bool {
        matches!(self, PipelineStage::EciOnly | PipelineStage::Full)
    }

    pub fn uses_filter(self) -> bool {
        matches!(self, PipelineStage::FilterOnly | PipelineStage::Full)
    }

    pub fn name(self) -> &'static str {
        match self {
            PipelineStage::CamOnly => "cam-only",
            PipelineStage::EciOnly => "eci-only",
            PipelineStage::FilterOnly => "filter-only",
            PipelineStage::Full => "full",
        }
    }
}

impl FromStr for PipelineStage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "cam-only" => PipelineStage::CamOnly,
            "eci-only" => PipelineStage::EciOnly,
            "filter-only" => PipelineStage::FilterOnly,
            "full" => PipelineStage::Full,
            other => return Err(format!("unknown stage '{other}'")),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExplainConfig {
    pub causal: CausalConfig,
    pub filter: FilterConfig,
    pub stage: PipelineStage,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        ExplainConfig {
            causal: CausalConfig::default(),
            filter: FilterConfig::default(),
            stage: PipelineStage::Full,
        }
    }
}

impl ExplainConfig {
    pub fn with_stage(mut self, stage: PipelineStage) -> Self {
        self.stage = stage;
        self
    }

    /// Filter actually applied once the stage is taken into account.
    pub fn effective_filter(&self) -> FilterConfig {
        if self.stage.uses_filter() {
            self.filter
        } else {
            FilterConfig::new(FilterKind::None, self.filter.kernel_size)
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.causal.validate()?;
        self.filter.validate()?;
        Ok(())
    }
}

/// Intermediate products for one answer token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenTrace {
    pub raw: ActivationMap,
    pub causal: ActivationMap,
    pub scale: f64,
    pub refined: ActivationMap,
    pub relevance: RelevanceVector,
    pub result: MultimodalMap,
}

/// Raw maps of every token, computed once and shared across answer tokens.
///
/// Each answer token's context is the raw maps of earlier tokens, so tokens
/// can be explained in any order or in parallel.
pub struct Explainer<'a> {
    dump: &'a FeatureDump,
    raw: Vec<ActivationMap>,
}

impl<'a> Explainer<'a> {
    pub fn new(dump: &'a FeatureDump) -> Result<Self, PipelineError> {
        Ok(Explainer {
            dump,
            raw: activation::all_raw_maps(dump)?,
        })
    }

    pub fn dump(&self) -> &FeatureDump {
        self.dump
    }

    /// Raw maps in prompt-then-answer order.
    pub fn raw_maps(&self) -> &[ActivationMap] {
        &self.raw
    }

    pub fn trace(&self, answer_index: usize, cfg: &ExplainConfig) -> Result<TokenTrace, PipelineError> {
        let target = self.raw_answer_map(answer_index)?.clone();
        self.trace_with_target(answer_index, target, cfg)
    }

    fn raw_answer_map(&self, answer_index: usize) -> Result<&ActivationMap, PipelineError> {
        self.raw
            .get(self.dump.n_prompt() + answer_index)
            .filter(|_| answer_index < self.dump.n_answer())
            .ok_or(PipelineError::Activation(ActivationError::IndexOutOfRange {
                index: answer_index,
                n_answer: self.dump.n_answer(),
            }))
    }

    /// Runs the pipeline for `answer_index` with `target` standing in for its raw map.
    pub fn trace_with_target(
        &self,
        answer_index: usize,
        target: ActivationMap,
        cfg: &ExplainConfig,
    ) -> Result<TokenTrace, PipelineError> {
        cfg.validate()?;
        let token_index = self.dump.n_prompt() + answer_index;
        let raw_relevance = activation::textual_relevance(self.dump, answer_index, false)?;
        let target = target.with_token_index(token_index);
        let (causal, scale, relevance) = if cfg.stage.uses_causal() {
            let masked = activation::textual_relevance(self.dump, answer_index, true)?;
            let context = &self.raw[..token_index];
            let outcome = causal::causal_map(&target, context, &masked, &cfg.causal)?;
            (outcome.map, outcome.scale, masked)
        } else {
            let mut m = target.clone();
            m.stage = Stage::Causal;
            (m, 0.0, raw_relevance.clone())
        };
        let mut refined = filter::apply(&causal, &self.dump.layout, &cfg.effective_filter())?;
        refined.clamp_nonnegative();
        let result = MultimodalMap::from_parts(&refined.values, &raw_relevance.values, token_index);
        Ok(TokenTrace {
            raw: target,
            causal,
            scale,
            refined,
            relevance,
            result,
        })
    }

    pub fn explain(&self, answer_index: usize, cfg: &ExplainConfig) -> Result<MultimodalMap, PipelineError> {
        self.trace(answer_index, cfg).map(|t| t.result)
    }

    pub fn explain_all(&self, cfg: &ExplainConfig) -> Result<Vec<MultimodalMap>, PipelineError> {
        (0..self.dump.n_answer())
            .into_par_iter()
            .map(|i| self.explain(i, cfg))
            .collect()
    }
}

/// Final multimodal map for answer token `answer_index` (0-based).
pub fn explain_token(
    dump: &FeatureDump,
    answer_index: usize,
    cfg: &ExplainConfig,
) -> Result<MultimodalMap, PipelineError> {
    Explainer::new(dump)?.explain(answer_index, cfg)
}

/// Final multimodal maps for every answer token, in answer order.
pub fn explain_all(dump: &FeatureDump, cfg: &ExplainConfig) -> Result<Vec<MultimodalMap>, PipelineError> {
    Explainer::new(dump)?.explain_all(cfg)
}
