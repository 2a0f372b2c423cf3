//! Plausibility metrics for token activation maps.
//!
//! Object words (nouns with a ground-truth mask) are scored by the IoU of
//! their Otsu-binarized map with the mask. Function words have no visual
//! referent, so their ground truth is all background: they are thresholded at
//! the mean Otsu threshold of the conversation's nouns and scored by the
//! fraction of the map left below it. The two means are merged by their
//! harmonic mean.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::activation::{self, ActivationMap, Stage};
use crate::dump::FeatureDump;
use crate::fuse::{min_max_normalize, ExplainConfig, Explainer, MultimodalMap, PipelineError};

/// Version of the serialized [`EvalReport`] schema.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Penn Treebank tags counted as object words.
pub const NOUN_TAGS: [&str; 4] = ["NN", "NNS", "NNP", "NNPS"];

/// Penn Treebank tags counted as function words. `IN` and `CD` are left out
/// because prepositions and numerals carry location and quantity.
pub const FUNCTION_TAGS: [&str; 12] = [
    "CC", "DT", "EX", "MD", "POS", "PRP", "PRP$", "UH", "WDT", "WP", "WP$", "WRB",
];

pub const OTSU_BINS: usize = 256;

#[derive(Debug, Error, PartialEq, Eq, Clone)]
pub enum MetricsError {
    #[error("empty map")]
    EmptyMap,
    #[error("conversation has no ground-truth masks")]
    NoMasks,
    #[error("no noun token matches a mask name")]
    NoMatchingTokens,
    #[error("no noun tokens; function words skipped")]
    NoNouns,
    #[error("answer token {0} has no context token")]
    NoContext(usize),
    #[error("need at least 3 pairs with varying values, got {0}")]
    InsufficientPairs(usize),
    #[error("expected {expected} maps, got {actual}")]
    MapCount { expected: usize, actual: usize },
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

pub fn is_noun(tag: &str) -> bool {
    NOUN_TAGS.contains(&tag)
}

pub fn is_function_word(tag: &str) -> bool {
    FUNCTION_TAGS.contains(&tag)
}

/// 256-level quantization of `x` over `[min, max]`.
///
/// Values within 1e-7 of a level boundary snap upward so that rescaling the
/// map by a positive constant cannot move a value across a boundary.
pub fn quantize(x: f64, min: f64, max: f64) -> u8 {
    let span = max - min;
    if span <= 0.0 {
        return 0;
    }
    let t = (x - min) / span * OTSU_BINS as f64;
    (t + 1e-7).floor().clamp(0.0, (OTSU_BINS - 1) as f64) as u8
}

pub fn histogram(values: &[f64]) -> ([u64; OTSU_BINS], f64, f64) {
    let (min, max) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let mut hist = [0u64; OTSU_BINS];
    for &v in values {
        hist[quantize(v, min, max) as usize] += 1;
    }
    (hist, min, max)
}

/// Between-class variance of splitting at level `t`, up to a positive factor
/// shared by every `t`: `(S0 N - S n0)^2 / (n0 n1)`.
pub fn between_class_score(n0: u64, sum0: u64, total: u64, total_sum: u64) -> Option<f64> {
    let n1 = total - n0;
    if n0 == 0 || n1 == 0 {
        return None;
    }
    let diff = sum0 as i128 * total as i128 - total_sum as i128 * n0 as i128;
    let d = diff as f64;
    Some(d * d / (n0 as f64 * n1 as f64))
}

/// Otsu level over a histogram: background is `level <= t`. Ties go to the
/// lowest `t`. `None` when fewer than two levels are populated.
pub fn otsu_level(hist: &[u64; OTSU_BINS]) -> Option<u8> {
    let total: u64 = hist.iter().sum();
    let total_sum: u64 = hist.iter().enumerate().map(|(q, &c)| q as u64 * c).sum();
    let mut n0 = 0u64;
    let mut sum0 = 0u64;
    let mut best: Option<(u8, f64)> = None;
    for (t, &count) in hist.iter().enumerate().take(OTSU_BINS - 1) {
        n0 += count;
        sum0 += t as u64 * count;
        if let Some(score) = between_class_score(n0, sum0, total, total_sum) {
            if best.is_none_or(|(_, b)| score > b) {
                best = Some((t as u8, score));
            }
        }
    }
    best.map(|(t, _)| t)
}

/// Otsu split of one map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OtsuThreshold {
    /// Upper boundary of the last background level, in map units. For a
    /// constant map this is the constant itself.
    pub threshold: f64,
    pub level: Option<u8>,
    pub min: f64,
    pub max: f64,
}

impl OtsuThreshold {
    pub fn is_foreground(&self, x: f64) -> bool {
        match self.level {
            Some(t) => quantize(x, self.min, self.max) > t,
            None => false,
        }
    }

    pub fn binarize(&self, values: &[f64]) -> Vec<bool> {
        values.iter().map(|&v| self.is_foreground(v)).collect()
    }
}

pub fn otsu_threshold(values: &[f64]) -> Result<OtsuThreshold, MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::EmptyMap);
    }
    let (hist, min, max) = histogram(values);
    if max <= min {
        return Ok(OtsuThreshold {
            threshold: min,
            level: None,
            min,
            max,
        });
    }
    let level = otsu_level(&hist);
    let threshold = match level {
        Some(t) => min + (t as f64 + 1.0) * (max - min) / OTSU_BINS as f64,
        None => min,
    };
    Ok(OtsuThreshold {
        threshold,
        level,
        min,
        max,
    })
}

/// Intersection over union; two empty sets agree perfectly.
pub fn iou(pred: &[bool], truth: &[bool]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        inter += (p && t) as usize;
        union += (p || t) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Harmonic mean of the object and function scores; 0 when both are 0.
pub fn f1_iou(obj: f64, func: f64) -> f64 {
    let sum = obj + func;
    if sum <= 0.0 {
        0.0
    } else {
        2.0 * obj * func / sum
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryKind {
    Object,
    Function,
    Skipped,
}

/// One scored instance: an object word or a function token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub conversation: String,
    /// First answer token (0-based) of the instance.
    pub answer_index: usize,
    pub text: String,
    pub kind: EntryKind,
    pub threshold: Option<f64>,
    pub iou: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// Running sums; merging is order-independent up to float rounding.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub obj_sum: f64,
    pub objects: usize,
    pub func_sum: f64,
    pub functions: usize,
}

impl Totals {
    pub fn merge(&mut self, other: &Totals) {
        self.obj_sum += other.obj_sum;
        self.objects += other.objects;
        self.func_sum += other.func_sum;
        self.functions += other.functions;
    }

    pub fn obj_iou(&self) -> f64 {
        mean(self.obj_sum, self.objects)
    }

    pub fn func_iou(&self) -> f64 {
        mean(self.func_sum, self.functions)
    }

    pub fn f1_iou(&self) -> f64 {
        f1_iou(self.obj_iou(), self.func_iou())
    }
}

fn mean(sum: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub obj_iou: f64,
    pub func_iou: f64,
    pub f1_iou: f64,
    /// Object-word instances.
    pub o: usize,
    /// Function-word instances.
    pub u: usize,
    pub totals: Totals,
    pub per_token: Vec<EvalEntry>,
    pub issues: Vec<String>,
}

impl Default for EvalReport {
    fn default() -> Self {
        EvalReport::from_parts(Totals::default(), Vec::new(), Vec::new())
    }
}

impl EvalReport {
    pub fn from_parts(totals: Totals, per_token: Vec<EvalEntry>, issues: Vec<String>) -> Self {
        EvalReport {
            schema_version: REPORT_SCHEMA_VERSION,
            obj_iou: totals.obj_iou(),
            func_iou: totals.func_iou(),
            f1_iou: totals.f1_iou(),
            o: totals.objects,
            u: totals.functions,
            totals,
            per_token,
            issues,
        }
    }

    pub fn merge(&mut self, other: EvalReport) {
        let mut totals = self.totals;
        totals.merge(&other.totals);
        let mut per_token = std::mem::take(&mut self.per_token);
        per_token.extend(other.per_token);
        let mut issues = std::mem::take(&mut self.issues);
        issues.extend(other.issues);
        *self = EvalReport::from_parts(totals, per_token, issues);
    }

    /// Aligned summary table, columns in Obj / Func / F1 order, in percent.
    pub fn table(&self, label: &str) -> String {
        summary_table(&[(label.to_string(), self.totals)])
    }
}

/// Aligned table of several labelled runs.
pub fn summary_table(rows: &[(String, Totals)]) -> String {
    let width = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(7);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<width$}  {:>12}  {:>13}  {:>11}  {:>5}  {:>5}",
        "Setting", "Obj-IoU (%)", "Func-IoU (%)", "F1-IoU (%)", "o", "u"
    );
    for (label, t) in rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:>12.2}  {:>13.2}  {:>11.2}  {:>5}  {:>5}",
            label,
            100.0 * t.obj_iou(),
            100.0 * t.func_iou(),
            100.0 * t.f1_iou(),
            t.objects,
            t.functions
        );
    }
    out
}

/// Ground truth for `lemma` over the flat map: union of every matching mask,
/// placed at its frame. `None` when no mask matches.
pub fn ground_truth(dump: &FeatureDump, lemma: &str) -> Option<Vec<bool>> {
    if lemma.is_empty() {
        return None;
    }
    let frames = dump.layout.frames();
    let mut truth: Option<Vec<bool>> = None;
    for m in dump.masks.iter().filter(|m| m.name.eq_ignore_ascii_case(lemma)) {
        let slot = frames[m.frame];
        let t = truth.get_or_insert_with(|| vec![false; dump.n_visual()]);
        for (dst, &src) in t[slot.range()].iter_mut().zip(&m.cells) {
            *dst |= src;
        }
    }
    truth
}

/// Evaluation switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Replace the first answer token's map by the first prompt token's.
    pub first_token_substitution: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            first_token_substitution: true,
        }
    }
}

/// Replaces the first answer token's map by the first prompt token's raw map.
///
/// The prompt token has no earlier text, so its map has seen no causal
/// subtraction and carries the model's original response level. It is
/// normalized the same way a token without context would be, which keeps the
/// substitution independent of feature scale.
pub fn first_token_substitution(
    mut maps: Vec<ActivationMap>,
    dump: &FeatureDump,
) -> Result<Vec<ActivationMap>, PipelineError> {
    if maps.is_empty() || dump.n_prompt() == 0 {
        return Ok(maps);
    }
    let raw = activation::raw_map(&dump.visual_features, dump.token_weights.row(0))?;
    maps[0] = ActivationMap::new(min_max_normalize(&raw.values), dump.n_prompt(), Stage::Final);
    Ok(maps)
}

/// Final visual maps in answer order.
pub fn visual_maps(maps: &[MultimodalMap]) -> Vec<ActivationMap> {
    maps.iter().map(MultimodalMap::visual_map).collect()
}

struct Word {
    first: usize,
    tokens: Vec<usize>,
}

fn answer_words(dump: &FeatureDump) -> Vec<Word> {
    let mut words: Vec<Word> = Vec::new();
    for (i, t) in dump.answer_tokens.iter().enumerate() {
        match words.last_mut() {
            Some(w) if dump.answer_tokens[w.first].word_index == t.word_index => w.tokens.push(i),
            _ => words.push(Word {
                first: i,
                tokens: vec![i],
            }),
        }
    }
    words
}

/// Object-word IoUs of one conversation. Errors are reportable conditions.
pub fn obj_iou(
    conversation: &str,
    maps: &[ActivationMap],
    dump: &FeatureDump,
) -> Result<(Totals, Vec<EvalEntry>), MetricsError> {
    check_maps(maps, dump)?;
    if dump.masks.is_empty() {
        return Err(MetricsError::NoMasks);
    }
    let mut totals = Totals::default();
    let mut entries = Vec::new();
    for word in answer_words(dump) {
        let head = &dump.answer_tokens[word.first];
        if !is_noun(&head.pos_tag) {
            continue;
        }
        let text: String = word.tokens.iter().map(|&i| dump.answer_tokens[i].text.as_str()).collect();
        let Some(truth) = ground_truth(dump, &head.lemma) else {
            entries.push(EvalEntry {
                conversation: conversation.to_string(),
                answer_index: word.first,
                text,
                kind: EntryKind::Skipped,
                threshold: None,
                iou: None,
                note: Some(format!("no mask named '{}'", head.lemma)),
            });
            continue;
        };
        let mut best: Option<(f64, f64)> = None;
        for &i in &word.tokens {
            let otsu = otsu_threshold(&maps[i].values)?;
            let score = iou(&otsu.binarize(&maps[i].values), &truth);
            if best.is_none_or(|(b, _)| score > b) {
                best = Some((score, otsu.threshold));
            }
        }
        let (score, threshold) = best.expect("words are non-empty");
        totals.obj_sum += score;
        totals.objects += 1;
        entries.push(EvalEntry {
            conversation: conversation.to_string(),
            answer_index: word.first,
            text,
            kind: EntryKind::Object,
            threshold: Some(threshold),
            iou: Some(score),
            note: None,
        });
    }
    if totals.objects == 0 {
        return Err(MetricsError::NoMatchingTokens);
    }
    Ok((totals, entries))
}

/// Mean Otsu threshold over every noun token of the conversation.
pub fn noun_threshold(maps: &[ActivationMap], dump: &FeatureDump) -> Result<f64, MetricsError> {
    check_maps(maps, dump)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (t, m) in dump.answer_tokens.iter().zip(maps) {
        if is_noun(&t.pos_tag) {
            sum += otsu_threshold(&m.values)?.threshold;
            n += 1;
        }
    }
    if n == 0 {
        Err(MetricsError::NoNouns)
    } else {
        Ok(sum / n as f64)
    }
}

/// Fraction of cells strictly below `b`: background IoU against all ones.
pub fn background_iou(values: &[f64], b: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().filter(|&&v| v < b).count() as f64 / values.len() as f64
}

/// Function-word IoUs of one conversation.
pub fn func_iou(
    conversation: &str,
    maps: &[ActivationMap],
    dump: &FeatureDump,
) -> Result<(Totals, Vec<EvalEntry>), MetricsError> {
    let b = noun_threshold(maps, dump)?;
    let mut totals = Totals::default();
    let mut entries = Vec::new();
    for (i, (t, m)) in dump.answer_tokens.iter().zip(maps).enumerate() {
        if !is_function_word(&t.pos_tag) {
            continue;
        }
        let score = background_iou(&m.values, b);
        totals.func_sum += score;
        totals.functions += 1;
        entries.push(EvalEntry {
            conversation: conversation.to_string(),
            answer_index: i,
            text: t.text.clone(),
            kind: EntryKind::Function,
            threshold: Some(b),
            iou: Some(score),
            note: None,
        });
    }
    Ok((totals, entries))
}

fn check_maps(maps: &[ActivationMap], dump: &FeatureDump) -> Result<(), MetricsError> {
    if maps.len() != dump.n_answer() {
        return Err(MetricsError::MapCount {
            expected: dump.n_answer(),
            actual: maps.len(),
        });
    }
    Ok(())
}

/// Scores one conversation's final maps (answer order). Missing masks or
/// nouns are recorded as issues, never raised.
pub fn evaluate_maps(conversation: &str, maps: &[ActivationMap], dump: &FeatureDump) -> Result<EvalReport, MetricsError> {
    check_maps(maps, dump)?;
    let mut totals = Totals::default();
    let mut entries = Vec::new();
    let mut issues = Vec::new();
    match obj_iou(conversation, maps, dump) {
        Ok((t, e)) => {
            totals.merge(&t);
            entries.extend(e);
        }
        Err(MetricsError::NoMatchingTokens) if dump.answer_tokens.iter().any(|t| is_noun(&t.pos_tag)) => {
            issues.push(format!("{conversation}: {}", MetricsError::NoMatchingTokens));
            collect_skipped(conversation, dump, &mut entries);
        }
        Err(e) => issues.push(format!("{conversation}: {e}")),
    }
    match func_iou(conversation, maps, dump) {
        Ok((t, e)) => {
            totals.merge(&t);
            entries.extend(e);
        }
        Err(MetricsError::NoNouns) => {
            let skipped = dump
                .answer_tokens
                .iter()
                .enumerate()
                .filter(|(_, t)| is_function_word(&t.pos_tag));
            for (i, t) in skipped {
                entries.push(EvalEntry {
                    conversation: conversation.to_string(),
                    answer_index: i,
                    text: t.text.clone(),
                    kind: EntryKind::Skipped,
                    threshold: None,
                    iou: None,
                    note: Some("no noun threshold".into()),
                });
            }
            issues.push(format!("{conversation}: {}", MetricsError::NoNouns));
        }
        Err(e) => issues.push(format!("{conversation}: {e}")),
    }
    entries.sort_by_key(|e| e.answer_index);
    Ok(EvalReport::from_parts(totals, entries, issues))
}

fn collect_skipped(conversation: &str, dump: &FeatureDump, entries: &mut Vec<EvalEntry>) {
    for word in answer_words(dump) {
        let head = &dump.answer_tokens[word.first];
        if is_noun(&head.pos_tag) {
            entries.push(EvalEntry {
                conversation: conversation.to_string(),
                answer_index: word.first,
                text: word.tokens.iter().map(|&i| dump.answer_tokens[i].text.as_str()).collect(),
                kind: EntryKind::Skipped,
                threshold: None,
                iou: None,
                note: Some(format!("no mask named '{}'", head.lemma)),
            });
        }
    }
}

/// Explains every answer token and scores the result.
pub fn evaluate_dump(
    conversation: &str,
    dump: &FeatureDump,
    cfg: &ExplainConfig,
    opts: &EvalOptions,
) -> Result<EvalReport, EvalError> {
    let explainer = Explainer::new(dump)?;
    let maps = visual_maps(&explainer.explain_all(cfg)?);
    evaluate_final(conversation, maps, dump, opts)
}

fn evaluate_final(
    conversation: &str,
    maps: Vec<ActivationMap>,
    dump: &FeatureDump,
    opts: &EvalOptions,
) -> Result<EvalReport, EvalError> {
    let maps = if opts.first_token_substitution {
        first_token_substitution(maps, dump)?
    } else {
        maps
    };
    Ok(evaluate_maps(conversation, &maps, dump)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaceboReport {
    pub real_obj_iou: f64,
    pub placebo_obj_iou: f64,
    /// `real / placebo`; `None` when the placebo scores zero.
    pub ratio: Option<f64>,
    /// Context position substituted for each answer token.
    pub substitutes: Vec<usize>,
}

/// Reruns the pipeline with each answer token's raw map replaced by the raw
/// map of a uniformly drawn earlier context token.
pub fn placebo_test(
    dump: &FeatureDump,
    cfg: &ExplainConfig,
    opts: &EvalOptions,
    seed: u64,
) -> Result<PlaceboReport, EvalError> {
    let explainer = Explainer::new(dump)?;
    let n_p = dump.n_prompt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut substitutes = Vec::with_capacity(dump.n_answer());
    for i in 0..dump.n_answer() {
        if n_p + i == 0 {
            return Err(MetricsError::NoContext(i).into());
        }
        substitutes.push(rng.gen_range(0..n_p + i));
    }

    let real = visual_maps(&explainer.explain_all(cfg)?);
    let placebo = substitutes
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            explainer
                .trace_with_target(i, explainer.raw_maps()[k].clone(), cfg)
                .map(|t| t.result.visual_map())
        })
        .collect::<Result<Vec<_>, _>>()?;

    let real_obj = evaluate_final("real", real, dump, opts)?.obj_iou;
    let placebo_obj = evaluate_final("placebo", placebo, dump, opts)?.obj_iou;
    Ok(PlaceboReport {
        real_obj_iou: real_obj,
        placebo_obj_iou: placebo_obj,
        ratio: (placebo_obj > 0.0).then(|| real_obj / placebo_obj),
        substitutes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairingMode {
    Random,
    MostRelated,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairStat {
    pub earlier: usize,
    pub later: usize,
    pub distance: f64,
    pub relevance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterferenceStats {
    pub mode: PairingMode,
    pub pearson_r: f64,
    pub pairs: Vec<PairStat>,
}

/// Mean absolute difference between two maps.
pub fn l1_distance(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len();
    if n < 2 || ys.len() != n {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Samples (earlier, later) token pairs of one conversation with the L1
/// distance of their normalized raw maps and their textual relevance.
///
/// `Random` draws `pairs_per_dump` pairs; `MostRelated` pairs every token
/// with its most relevant earlier token.
pub fn sample_pairs(
    dump: &FeatureDump,
    mode: PairingMode,
    rng: &mut ChaCha8Rng,
    pairs_per_dump: usize,
) -> Result<Vec<PairStat>, EvalError> {
    let n = dump.n_prompt() + dump.n_answer();
    if n < 2 {
        return Ok(Vec::new());
    }
    let norm: Vec<Vec<f64>> = activation::all_raw_maps(dump)
        .map_err(PipelineError::from)?
        .iter()
        .map(|m| min_max_normalize(&m.values))
        .collect();
    let stat = |earlier: usize, later: usize, relevance: f64| PairStat {
        earlier,
        later,
        distance: l1_distance(&norm[earlier], &norm[later]),
        relevance,
    };
    let mut pairs = Vec::new();
    match mode {
        PairingMode::Random => {
            for _ in 0..pairs_per_dump {
                let later = rng.gen_range(1..n);
                let earlier = rng.gen_range(0..later);
                let weight = dump.token_weights.row(later);
                let r = activation::dot(dump.text_feature(earlier), weight).max(0.0);
                pairs.push(stat(earlier, later, r));
            }
        }
        PairingMode::MostRelated => {
            for later in 1..n {
                let rel = activation::context_relevance(dump, later, false);
                let (earlier, r) = rel
                    .values
                    .iter()
                    .copied()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (k, r)| if r > best.1 { (k, r) } else { best });
                pairs.push(stat(earlier, later, r));
            }
        }
    }
    Ok(pairs)
}

impl InterferenceStats {
    /// Pearson correlation of distance against relevance over `pairs`.
    pub fn from_pairs(mode: PairingMode, pairs: Vec<PairStat>) -> Result<Self, MetricsError> {
        let distances: Vec<f64> = pairs.iter().map(|p| p.distance).collect();
        let relevances: Vec<f64> = pairs.iter().map(|p| p.relevance).collect();
        let r = pearson(&distances, &relevances)
            .filter(|_| pairs.len() >= 3)
            .ok_or(MetricsError::InsufficientPairs(pairs.len()))?;
        Ok(InterferenceStats {
            mode,
            pearson_r: r,
            pairs,
        })
    }
}

/// Correlation between map distance and textual relevance over token pairs
/// of several conversations, sampled with one generator seeded by `seed`.
pub fn interference_stats(
    dumps: &[FeatureDump],
    mode: PairingMode,
    seed: u64,
    pairs_per_dump: usize,
) -> Result<InterferenceStats, EvalError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::new();
    for dump in dumps {
        pairs.extend(sample_pairs(dump, mode, &mut rng, pairs_per_dump)?);
    }
    Ok(InterferenceStats::from_pairs(mode, pairs)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bimodal_map_splits_cleanly() {
        let values: Vec<f64> = (0..16).map(|i| if i < 8 { 0.0 } else { 1.0 }).collect();
        let otsu = otsu_threshold(&values).unwrap();
        assert!(otsu.threshold > 0.0 && otsu.threshold < 1.0);
        let fg = otsu.binarize(&values);
        assert_eq!(fg, values.iter().map(|&v| v == 1.0).collect::<Vec<_>>());
    }

    #[test]
    fn constant_map_has_empty_foreground() {
        let values = vec![0.4; 10];
        let otsu = otsu_threshold(&values).unwrap();
        assert_eq!(otsu.threshold, 0.4);
        assert!(otsu.binarize(&values).iter().all(|&b| !b));
        assert_eq!(otsu_threshold(&[]), Err(MetricsError::EmptyMap));
    }

    #[test]
    fn otsu_is_affine_invariant() {
        let values = [0.1, 0.15, 0.2, 0.7, 0.75, 0.9, 0.33, 0.52];
        let base = otsu_threshold(&values).unwrap();
        let scaled: Vec<f64> = values.iter().map(|v| 7.3 * v + 2.0).collect();
        let other = otsu_threshold(&scaled).unwrap();
        assert_eq!(base.level, other.level);
        assert_eq!(base.binarize(&values), other.binarize(&scaled));
    }

    #[test]
    fn iou_cases() {
        let a = [true, false, true];
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&[true, false], &[false, true]), 0.0);
        // cells {1,2} vs {2,3}
        assert_eq!(iou(&[true, true, false], &[false, true, true]), 1.0 / 3.0);
        assert_eq!(iou(&[false; 3], &[false; 3]), 1.0);
    }

    #[test]
    fn background_iou_cases() {
        assert_eq!(background_iou(&[0.1, 0.2], 0.5), 1.0);
        assert_eq!(background_iou(&[0.5, 0.9], 0.5), 0.0);
        assert_eq!(background_iou(&[0.1, 0.9, 0.2, 0.8], 0.5), 0.5);
    }

    #[test]
    fn f1_cases() {
        assert!((f1_iou(0.2737, 0.6844) - 0.3910).abs() < 5e-4);
        assert!((f1_iou(0.0574, 0.9650) - 0.1083).abs() < 5e-4);
        assert!((f1_iou(0.42, 0.42) - 0.42).abs() < 1e-15);
        assert_eq!(f1_iou(0.0, 0.0), 0.0);
        assert_eq!(f1_iou(0.0, 0.7), 0.0);
    }

    #[test]
    fn pos_sets() {
        assert!(is_noun("NNPS") && !is_noun("VB"));
        assert!(is_function_word("PRP$") && is_function_word("WRB"));
        assert!(!is_function_word("IN") && !is_function_word("CD"));
    }

    #[test]
    fn totals_merge_is_commutative() {
        let a = Totals {
            obj_sum: 1.5,
            objects: 3,
            func_sum: 0.25,
            functions: 1,
        };
        let b = Totals {
            obj_sum: 0.5,
            objects: 1,
            func_sum: 2.0,
            functions: 4,
        };
        let mut ab = a;
        ab.merge(&b);
        let mut ba = b;
        ba.merge(&a);
        assert_eq!(ab, ba);
        assert_eq!(ab.obj_iou(), 0.5);
        assert_eq!(ab.func_iou(), 0.45);
    }

    #[test]
    fn pearson_basics() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!(pearson(&[1.0, 1.0], &[0.0, 1.0]).is_none());
        assert_eq!(l1_distance(&[0.2, 0.4], &[0.2, 0.4]), 0.0);
    }

    #[test]
    fn table_is_aligned() {
        let t = Totals {
            obj_sum: 0.2737,
            objects: 1,
            func_sum: 0.6844,
            functions: 1,
        };
        let table = summary_table(&[("full".into(), t), ("cam-only".into(), Totals::default())]);
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].contains("27.37") && lines[1].contains("68.44") && lines[1].contains("39.10"));
        assert_eq!(lines[0].len(), lines[1].len());
    }
}
