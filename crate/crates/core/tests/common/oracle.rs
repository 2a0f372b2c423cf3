//! Brute-force references, written from the definitions without reusing
//! any library internals. Shared with the CLI acceptance suite.
#![allow(dead_code)]

use tam_core::dump::FeatureDump;

/// `max(0, F^v w)` for token `token` (prompt-then-answer order).
pub fn raw_map(dump: &FeatureDump, token: usize) -> Vec<f64> {
    let f = &dump.visual_features;
    let w = dump.token_weights.row(token);
    (0..f.rows())
        .map(|r| {
            let acc: f64 = f.row(r).iter().zip(w).map(|(&x, &y)| x as f64 * y as f64).sum();
            acc.max(0.0)
        })
        .collect()
}

fn text_row(dump: &FeatureDump, k: usize) -> &[f32] {
    if k < dump.n_prompt() {
        dump.prompt_features.row(k)
    } else {
        dump.answer_features.row(k - dump.n_prompt())
    }
}

/// Relevance of every context token of answer `i` (0-based).
pub fn relevance(dump: &FeatureDump, i: usize, masked: bool) -> Vec<f64> {
    let target = dump.n_prompt() + i;
    let w = dump.token_weights.row(target);
    let own = if target < dump.n_prompt() {
        dump.prompt_tokens[target].token_id
    } else {
        dump.answer_tokens[i].token_id
    };
    (0..target)
        .map(|k| {
            let id = if k < dump.n_prompt() {
                dump.prompt_tokens[k].token_id
            } else {
                dump.answer_tokens[k - dump.n_prompt()].token_id
            };
            if masked && id == own {
                return 0.0;
            }
            let dot: f64 = text_row(dump, k).iter().zip(w).map(|(&a, &b)| a as f64 * b as f64).sum();
            dot.max(0.0)
        })
        .collect()
}

/// `sum_k r_k / (sum r + eps) * A_k`, computed one cell at a time.
pub fn interference(context: &[Vec<f64>], r: &[f64], eps: f64, len: usize) -> Vec<f64> {
    let total: f64 = r.iter().sum();
    (0..len)
        .map(|j| {
            if total <= 0.0 {
                return 0.0;
            }
            let mut acc = 0.0;
            for (k, map) in context.iter().enumerate() {
                acc += r[k] / (total + eps) * map[j];
            }
            acc
        })
        .collect()
}

pub fn sse(a: &[f64], e: &[f64], s: f64) -> f64 {
    a.iter().zip(e).map(|(x, y)| (x - s * y).powi(2)).sum()
}

/// Dense grid search for the minimizer of `sse`, zooming in around the best
/// grid point. Starts from the Cauchy-Schwarz bound `|s*| <= |A| / |E|`.
pub fn scale_by_search(a: &[f64], e: &[f64]) -> f64 {
    let ee: f64 = e.iter().map(|v| v * v).sum();
    if ee == 0.0 {
        return 0.0;
    }
    let aa: f64 = a.iter().map(|v| v * v).sum();
    let mut half = (aa / ee).sqrt() + 1.0;
    let mut center = 0.0;
    for _ in 0..12 {
        let n = 400;
        let mut best = (f64::INFINITY, center);
        for step in 0..=n {
            let s = center - half + 2.0 * half * step as f64 / n as f64;
            let v = sse(a, e, s);
            if v < best.0 {
                best = (v, s);
            }
        }
        center = best.1;
        half *= 4.0 / n as f64 * 2.0;
    }
    center
}

fn clamp_at(values: &[f64], h: usize, w: usize, y: isize, x: isize) -> f64 {
    let yy = y.max(0).min(h as isize - 1) as usize;
    let xx = x.max(0).min(w as isize - 1) as usize;
    values[yy * w + xx]
}

fn window(values: &[f64], h: usize, w: usize, y: usize, x: usize, k: usize) -> Vec<f64> {
    let r = k as isize / 2;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            out.push(clamp_at(values, h, w, y as isize + dy, x as isize + dx));
        }
    }
    out
}

/// Rank Gaussian filter, one pixel at a time.
pub fn rank_gaussian(values: &[f64], h: usize, w: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut a = window(values, h, w, y, x, k);
            a.sort_by(|p, q| p.partial_cmp(q).unwrap());
            let n = a.len() as f64;
            let mu = a.iter().sum::<f64>() / n;
            let sigma = (a.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n).sqrt();
            let centre = (k * k / 2) as f64;
            out[y * w + x] = if mu <= 0.0 {
                0.0
            } else if sigma == 0.0 {
                a[k * k / 2]
            } else {
                let cv = sigma / mu;
                let g: Vec<f64> = (0..a.len())
                    .map(|i| (-((i as f64 - centre).powi(2)) / (2.0 * cv * cv)).exp())
                    .collect();
                let gs: f64 = g.iter().sum();
                a.iter().zip(&g).map(|(v, gi)| v * gi / gs).sum()
            };
        }
    }
    out
}

pub fn median(values: &[f64], h: usize, w: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut a = window(values, h, w, y, x, k);
            a.sort_by(|p, q| p.partial_cmp(q).unwrap());
            out[y * w + x] = a[a.len() / 2];
        }
    }
    out
}

/// Normalized 2-D Gaussian with sigma = k / 3.
pub fn gaussian(values: &[f64], h: usize, w: usize, k: usize) -> Vec<f64> {
    let sigma = k as f64 / 3.0;
    let r = k as isize / 2;
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (mut acc, mut norm) = (0.0, 0.0);
            for dy in -r..=r {
                for dx in -r..=r {
                    let g = (-((dy * dy + dx * dx) as f64) / (2.0 * sigma * sigma)).exp();
                    acc += g * clamp_at(values, h, w, y as isize + dy, x as isize + dx);
                    norm += g;
                }
            }
            out[y * w + x] = acc / norm;
        }
    }
    out
}

/// Adaptive median: grow from `k` to `k + 2` while the median is an
/// extremum of its window; keep the pixel unless it is itself an extremum.
pub fn adaptive_median(values: &[f64], h: usize, w: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let z = values[y * w + x];
            let mut result = None;
            let mut last_med = 0.0;
            for size in [k, k + 2] {
                let mut a = window(values, h, w, y, x, size);
                a.sort_by(|p, q| p.partial_cmp(q).unwrap());
                let (lo, med, hi) = (a[0], a[a.len() / 2], a[a.len() - 1]);
                last_med = med;
                if med > lo && med < hi {
                    result = Some(if z > lo && z < hi { z } else { med });
                    break;
                }
            }
            out[y * w + x] = result.unwrap_or(last_med);
        }
    }
    out
}

/// 256-level quantization with the same boundary snap as the library.
pub fn levels(values: &[f64]) -> Vec<usize> {
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    values
        .iter()
        .map(|&v| {
            if max <= min {
                0
            } else {
                (((v - min) / (max - min) * 256.0 + 1e-7).floor() as usize).min(255)
            }
        })
        .collect()
}

/// Exhaustive Otsu over the 255 split points. Between-class variance is
/// compared as exact rationals `(S0 n1 - S1 n0)^2 / (n0 n1)`; ties go to the
/// lower split. `None` when no split has both classes populated.
pub fn otsu_level(values: &[f64]) -> Option<usize> {
    let q = levels(values);
    let mut best: Option<(usize, u128, u128)> = None;
    for t in 0..255 {
        let back: Vec<usize> = q.iter().copied().filter(|&l| l <= t).collect();
        let fore: Vec<usize> = q.iter().copied().filter(|&l| l > t).collect();
        if back.is_empty() || fore.is_empty() {
            continue;
        }
        let (n0, n1) = (back.len() as i128, fore.len() as i128);
        let (s0, s1) = (back.iter().sum::<usize>() as i128, fore.iter().sum::<usize>() as i128);
        let num = (s0 * n1 - s1 * n0).unsigned_abs().pow(2);
        let den = (n0 * n1) as u128;
        let better = match best {
            None => true,
            Some((_, bn, bd)) => num * bd > bn * den,
        };
        if better {
            best = Some((t, num, den));
        }
    }
    best.map(|(t, _, _)| t)
}

/// Foreground of the exhaustive Otsu split.
pub fn otsu_foreground(values: &[f64]) -> Vec<bool> {
    let q = levels(values);
    match otsu_level(values) {
        Some(t) => q.iter().map(|&l| l > t).collect(),
        None => vec![false; values.len()],
    }
}

pub fn iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn min_max(values: &[f64]) -> Vec<f64> {
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max > min {
        values.iter().map(|v| (v - min) / (max - min)).collect()
    } else {
        vec![0.0; values.len()]
    }
}

/// Full pipeline for answer `i` of a single-frame dump, composed from the
/// oracles above: (visual, textual) after joint normalization.
pub fn explain(dump: &FeatureDump, i: usize, k: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let n_p = dump.n_prompt();
    let target = raw_map(dump, n_p + i);
    let context: Vec<Vec<f64>> = (0..n_p + i).map(|t| raw_map(dump, t)).collect();
    let e = interference(&context, &relevance(dump, i, true), eps, target.len());
    let ee: f64 = e.iter().map(|v| v * v).sum();
    let s = if ee == 0.0 {
        0.0
    } else {
        target.iter().zip(&e).map(|(a, b)| a * b).sum::<f64>() / ee
    };
    // residuals within 1e-5 of the target peak count as cancelled
    let floor = 1e-5 * target.iter().cloned().fold(0.0, f64::max);
    let causal: Vec<f64> = target
        .iter()
        .zip(&e)
        .map(|(a, b)| a - s * b)
        .map(|r| if r > floor { r } else { 0.0 })
        .collect();
    let g = &dump.layout.segments()[0];
    let filtered = rank_gaussian(&causal, g.height, g.width, k);
    let visual: Vec<f64> = filtered.iter().map(|v| v.max(0.0)).collect();
    let textual = relevance(dump, i, false);
    let joined: Vec<f64> = visual.iter().chain(&textual).copied().collect();
    let mut norm = min_max(&joined);
    let t = norm.split_off(visual.len());
    (norm, t)
}

/// Harmonic mean.
pub fn f1(a: f64, b: f64) -> f64 {
    if a + b == 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}
