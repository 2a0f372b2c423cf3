//! Estimated causal inference.
//!
//! The visual evidence that earlier context tokens leave in a target map is
//! estimated as a relevance-weighted mixture of their raw maps, scaled by the
//! least-squares factor that best explains the target, and subtracted.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::activation::{ActivationMap, RelevanceVector, Stage};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CausalError {
    #[error("length mismatch: {what} ({left} vs {right})")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },
    #[error("epsilon must be positive")]
    BadEpsilon,
    #[error("noise floor must lie in [0, 1)")]
    BadNoiseFloor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    ClosedForm,
    /// Bracketed golden-section search; kept for cross-checking.
    Numeric,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CausalConfig {
    /// Guard added to the relevance sum.
    pub epsilon: f64,
    pub scale_mode: ScaleMode,
    /// Residuals at or below this fraction of the target's peak are zeroed.
    /// Features are single precision, so exact cancellation leaves rounding
    /// debris of about 1e-7 of the peak that must not survive normalization.
    pub noise_floor: f64,
}

impl Default for CausalConfig {
    fn default() -> Self {
        CausalConfig {
            epsilon: 1e-6,
            scale_mode: ScaleMode::ClosedForm,
            noise_floor: 1e-5,
        }
    }
}

impl CausalConfig {
    pub fn validate(&self) -> Result<(), CausalError> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(CausalError::BadEpsilon);
        }
        if !(0.0..1.0).contains(&self.noise_floor) {
            return Err(CausalError::BadNoiseFloor);
        }
        Ok(())
    }
}

fn check_len(what: &'static str, left: usize, right: usize) -> Result<(), CausalError> {
    if left == right {
        Ok(())
    } else {
        Err(CausalError::LengthMismatch { what, left, right })
    }
}

/// Relevance-weighted mixture of the context maps, `sum_k r_k / (sum r + eps) * A_k`.
///
/// `len` is the map length, needed when the context is empty.
pub fn estimate_interference(
    context_maps: &[ActivationMap],
    relevance: &RelevanceVector,
    len: usize,
    cfg: &CausalConfig,
) -> Result<ActivationMap, CausalError> {
    cfg.validate()?;
    check_len("context maps vs relevance", context_maps.len(), relevance.len())?;
    let mut out = vec![0.0; len];
    let total = relevance.sum();
    if total > 0.0 {
        let norm = total + cfg.epsilon;
        for (map, &r) in context_maps.iter().zip(&relevance.values) {
            check_len("context map vs target", map.len(), len)?;
            if r == 0.0 {
                continue;
            }
            let weight = r / norm;
            for (o, &v) in out.iter_mut().zip(&map.values) {
                *o += weight * v;
            }
        }
    }
    Ok(ActivationMap::new(out, usize::MAX, Stage::Causal))
}

/// Sum of squared residuals `sum_j (A_j - s E_j)^2`.
pub fn residual(target: &[f64], interference: &[f64], s: f64) -> f64 {
    target
        .iter()
        .zip(interference)
        .map(|(&a, &e)| {
            let r = a - s * e;
            r * r
        })
        .sum()
}

/// Least-squares factor minimizing `sum_j (A_j - s E_j)^2`; zero when `E` is zero.
pub fn solve_scale(target: &ActivationMap, interference: &ActivationMap) -> Result<f64, CausalError> {
    solve_scale_with(target, interference, ScaleMode::ClosedForm)
}

pub fn solve_scale_with(
    target: &ActivationMap,
    interference: &ActivationMap,
    mode: ScaleMode,
) -> Result<f64, CausalError> {
    check_len("target vs interference", target.len(), interference.len())?;
    let ee: f64 = interference.values.iter().map(|e| e * e).sum();
    if ee == 0.0 {
        return Ok(0.0);
    }
    Ok(match mode {
        ScaleMode::ClosedForm => {
            let ae: f64 = target
                .values
                .iter()
                .zip(&interference.values)
                .map(|(a, e)| a * e)
                .sum();
            ae / ee
        }
        ScaleMode::Numeric => golden_section(|s| residual(&target.values, &interference.values, s)),
    })
}

/// Minimizes a convex 1-D function: expand a bracket from 0, then golden-section.
fn golden_section(f: impl Fn(f64) -> f64) -> f64 {
    let mut step = 1.0;
    let (mut lo, mut hi);
    let f0 = f(0.0);
    let dir = if f(step) < f0 { 1.0 } else { -1.0 };
    if dir < 0.0 && f(-step) >= f0 {
        lo = -step;
        hi = step;
    } else {
        let mut prev: f64 = 0.0;
        let mut cur = dir * step;
        let mut f_cur = f(cur);
        loop {
            step *= 2.0;
            let next = cur + dir * step;
            let f_next = f(next);
            if f_next >= f_cur || step > 1e12 {
                lo = prev.min(next);
                hi = prev.max(next);
                break;
            }
            prev = cur;
            cur = next;
            f_cur = f_next;
        }
    }

    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    for _ in 0..200 {
        if (hi - lo).abs() <= 1e-12 * (1.0 + lo.abs().max(hi.abs())) {
            break;
        }
        if f1 < f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = f(x2);
        }
    }
    0.5 * (lo + hi)
}

/// Result of subtracting the scaled interference from a target map.
#[derive(Debug, Clone, PartialEq)]
pub struct CausalOutcome {
    pub map: ActivationMap,
    pub interference: ActivationMap,
    pub scale: f64,
}

/// `max(0, A - s E)`, less the noise floor, with `E` from [`estimate_interference`] and `s` from
/// [`solve_scale`]. The relevance must be the same-token-masked variant.
pub fn causal_map(
    target: &ActivationMap,
    context_maps: &[ActivationMap],
    relevance: &RelevanceVector,
    cfg: &CausalConfig,
) -> Result<CausalOutcome, CausalError> {
    let interference = estimate_interference(context_maps, relevance, target.len(), cfg)?;
    let scale = solve_scale_with(target, &interference, cfg.scale_mode)?;
    let peak = target.values.iter().fold(0.0f64, |m, &v| m.max(v));
    let floor = cfg.noise_floor * peak;
    let values = target
        .values
        .iter()
        .zip(&interference.values)
        .map(|(&a, &e)| {
            let r = a - scale * e;
            if r > floor {
                r
            } else {
                0.0
            }
        })
        .collect();
    Ok(CausalOutcome {
        map: ActivationMap::new(values, target.token_index, Stage::Causal),
        interference,
        scale,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(values: &[f64]) -> ActivationMap {
        ActivationMap::new(values.to_vec(), 0, Stage::Raw)
    }

    fn rel(values: &[f64]) -> RelevanceVector {
        RelevanceVector {
            values: values.to_vec(),
            masked: vec![false; values.len()],
        }
    }

    #[test]
    fn single_context_map_is_nearly_itself() {
        let cfg = CausalConfig::default();
        let e = estimate_interference(&[map(&[1.0, 2.0, 0.0])], &rel(&[1.0]), 3, &cfg).unwrap();
        let k = 1.0 / (1.0 + cfg.epsilon);
        assert_eq!(e.values, vec![k, 2.0 * k, 0.0]);
    }

    #[test]
    fn equal_relevance_averages() {
        let cfg = CausalConfig::default();
        let e = estimate_interference(&[map(&[2.0, 0.0]), map(&[0.0, 4.0])], &rel(&[0.5, 0.5]), 2, &cfg)
            .unwrap();
        assert!((e.values[0] - 1.0).abs() < 1e-5);
        assert!((e.values[1] - 2.0).abs() < 1e-5);
    }

    #[test]
    fn empty_and_zero_relevance_give_zero_map() {
        let cfg = CausalConfig::default();
        let e = estimate_interference(&[], &rel(&[]), 4, &cfg).unwrap();
        assert_eq!(e.values, vec![0.0; 4]);
        let e = estimate_interference(&[map(&[1.0, 1.0])], &rel(&[0.0]), 2, &cfg).unwrap();
        assert_eq!(e.values, vec![0.0; 2]);
    }

    #[test]
    fn length_mismatch() {
        let cfg = CausalConfig::default();
        assert!(matches!(
            estimate_interference(&[map(&[1.0])], &rel(&[1.0, 2.0]), 1, &cfg),
            Err(CausalError::LengthMismatch { .. })
        ));
        assert!(matches!(
            solve_scale(&map(&[1.0]), &map(&[1.0, 2.0])),
            Err(CausalError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn bad_epsilon() {
        let cfg = CausalConfig {
            epsilon: 0.0,
            ..Default::default()
        };
        assert_eq!(
            estimate_interference(&[], &rel(&[]), 1, &cfg),
            Err(CausalError::BadEpsilon)
        );
    }

    #[test]
    fn cancellation_debris_is_zeroed() {
        let target = map(&[1.0, 2.0, 3.0]);
        let ctx = [map(&[1.0, 2.0, 3.0 + 1e-7])];
        let out = causal_map(&target, &ctx, &rel(&[1.0]), &CausalConfig::default()).unwrap();
        assert_eq!(out.map.values, vec![0.0; 3]);
        let bad = CausalConfig {
            noise_floor: 1.0,
            ..Default::default()
        };
        assert_eq!(bad.validate(), Err(CausalError::BadNoiseFloor));
    }

    #[test]
    fn scale_exact_cases() {
        let a = map(&[0.3, 1.2, 0.0, 2.5]);
        assert_eq!(solve_scale(&a, &a).unwrap(), 1.0);
        assert_eq!(solve_scale(&map(&[1.0, 0.0]), &map(&[0.0, 1.0])).unwrap(), 0.0);
        let e = map(&[0.5, 1.0, 1.5]);
        let twice = map(&[1.0, 2.0, 3.0]);
        assert_eq!(solve_scale(&twice, &e).unwrap(), 2.0);
        assert_eq!(solve_scale(&twice, &map(&[0.0; 3])).unwrap(), 0.0);
    }

    #[test]
    fn scale_can_be_negative() {
        // anti-correlated interference is allowed, not clamped
        let e = map(&[1.0, 0.0]);
        let a = ActivationMap::new(vec![-1.0, 1.0], 0, Stage::Raw);
        assert_eq!(solve_scale(&a, &e).unwrap(), -1.0);
    }

    #[test]
    fn numeric_mode_agrees_with_closed_form() {
        let a = map(&[0.1, 0.9, 0.4, 0.0, 2.0]);
        let e = map(&[0.3, 0.2, 0.8, 1.1, 0.5]);
        let closed = solve_scale_with(&a, &e, ScaleMode::ClosedForm).unwrap();
        let numeric = solve_scale_with(&a, &e, ScaleMode::Numeric).unwrap();
        assert!((closed - numeric).abs() < 1e-6, "{closed} vs {numeric}");
        let neg = ActivationMap::new(vec![-3.0, -1.0], 0, Stage::Raw);
        let n = solve_scale_with(&neg, &map(&[1.0, 0.5]), ScaleMode::Numeric).unwrap();
        assert!((n - (-3.5 / 1.25)).abs() < 1e-6, "{n}");
    }

    #[test]
    fn zero_relevance_is_identity() {
        let cfg = CausalConfig::default();
        let a = map(&[0.2, 0.7, 0.1]);
        let out = causal_map(&a, &[map(&[1.0, 1.0, 1.0])], &rel(&[0.0]), &cfg).unwrap();
        assert_eq!(out.map.values, a.values);
        assert_eq!(out.scale, 0.0);
        assert_eq!(out.map.stage, Stage::Causal);
    }

    #[test]
    fn identical_context_cancels() {
        let cfg = CausalConfig::default();
        let a = map(&[0.2, 0.7, 0.1]);
        let out = causal_map(&a, std::slice::from_ref(&a), &rel(&[3.0]), &cfg).unwrap();
        assert!(out.map.values.iter().all(|&v| v.abs() < 1e-12), "{:?}", out.map.values);
    }
}
