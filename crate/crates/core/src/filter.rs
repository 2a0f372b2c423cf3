//! Sliding-window denoisers for activation maps.
//!
//! All filters center a `k x k` window on the output pixel, use replicate
//! padding at borders, and run independently on every frame of the layout.

use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::activation::{ActivationMap, Stage};
use crate::dump::Layout;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FilterError {
    #[error("kernel size must be odd and at least 1, got {0}")]
    BadKernel(usize),
    #[error("map has {map} cells but layout has {layout}")]
    LayoutMismatch { map: usize, layout: usize },
    #[error("unknown filter kind '{0}'")]
    UnknownKind(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterKind {
    RankGaussian,
    Median,
    Gaussian,
    AdaptiveMedian,
    None,
}

impl FilterKind {
    pub fn name(self) -> &'static str {
        match self {
            FilterKind::RankGaussian => "rank_gaussian",
            FilterKind::Median => "median",
            FilterKind::Gaussian => "gaussian",
            FilterKind::AdaptiveMedian => "adaptive_median",
            FilterKind::None => "none",
        }
    }
}

impl FromStr for FilterKind {
    type Err = FilterError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "rank_gaussian" => FilterKind::RankGaussian,
            "median" => FilterKind::Median,
            "gaussian" => FilterKind::Gaussian,
            "adaptive_median" => FilterKind::AdaptiveMedian,
            "none" => FilterKind::None,
            other => return Err(FilterError::UnknownKind(other.to_string())),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub kind: FilterKind,
    pub kernel_size: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            kind: FilterKind::RankGaussian,
            kernel_size: 3,
        }
    }
}

impl FilterConfig {
    pub fn new(kind: FilterKind, kernel_size: usize) -> Self {
        FilterConfig { kind, kernel_size }
    }

    pub fn validate(&self) -> Result<(), FilterError> {
        check_kernel(self.kernel_size)
    }
}

fn check_kernel(k: usize) -> Result<(), FilterError> {
    if k >= 1 && k % 2 == 1 {
        Ok(())
    } else {
        Err(FilterError::BadKernel(k))
    }
}

/// Row-major `h x w` view of one frame.
#[derive(Debug, Clone, Copy)]
pub struct Plane<'a> {
    pub values: &'a [f64],
    pub height: usize,
    pub width: usize,
}

impl<'a> Plane<'a> {
    pub fn new(values: &'a [f64], height: usize, width: usize) -> Self {
        debug_assert_eq!(values.len(), height * width);
        Plane {
            values,
            height,
            width,
        }
    }

    /// Value at (y, x) with replicate padding.
    pub fn at(&self, y: isize, x: isize) -> f64 {
        let y = y.clamp(0, self.height as isize - 1) as usize;
        let x = x.clamp(0, self.width as isize - 1) as usize;
        self.values[y * self.width + x]
    }

    /// The `k x k` window centered on (y, x), row-major, replicate-padded.
    pub fn window(&self, y: usize, x: usize, k: usize, out: &mut Vec<f64>) {
        out.clear();
        let r = (k / 2) as isize;
        for dy in -r..=r {
            for dx in -r..=r {
                out.push(self.at(y as isize + dy, x as isize + dx));
            }
        }
    }

    fn map_windows(&self, k: usize, mut f: impl FnMut(&mut Vec<f64>, usize, usize) -> f64) -> Vec<f64> {
        let mut window = Vec::with_capacity(k * k);
        let mut out = Vec::with_capacity(self.values.len());
        for y in 0..self.height {
            for x in 0..self.width {
                self.window(y, x, k, &mut window);
                out.push(f(&mut window, y, x));
            }
        }
        out
    }
}

fn sort_values(values: &mut [f64]) {
    values.sort_by(|a, b| a.total_cmp(b));
}

/// Weighted sum of an ascending window with Gaussian weights centered on the
/// median rank and spread by the window's coefficient of variation.
pub fn rank_gaussian_window(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    let mean = sorted.iter().sum::<f64>() / n as f64;
    if mean <= 0.0 {
        return 0.0;
    }
    let var = sorted.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    let mid = n / 2;
    if std == 0.0 {
        return sorted[mid];
    }
    let cv = std / mean;
    let denom = 2.0 * cv * cv;
    let mut weight_sum = 0.0;
    let mut acc = 0.0;
    for (i, &v) in sorted.iter().enumerate() {
        let d = i as f64 - mid as f64;
        let g = (-(d * d) / denom).exp();
        weight_sum += g;
        acc += g * v;
    }
    acc / weight_sum
}

pub fn rank_gaussian_plane(plane: Plane<'_>, k: usize) -> Result<Vec<f64>, FilterError> {
    check_kernel(k)?;
    Ok(plane.map_windows(k, |w, _, _| {
        sort_values(w);
        rank_gaussian_window(w)
    }))
}

pub fn median_plane(plane: Plane<'_>, k: usize) -> Result<Vec<f64>, FilterError> {
    check_kernel(k)?;
    Ok(plane.map_windows(k, |w, _, _| {
        sort_values(w);
        w[w.len() / 2]
    }))
}

/// Normalized `k x k` Gaussian kernel with sigma = k / 3, row-major.
pub fn gaussian_kernel(k: usize) -> Result<Vec<f64>, FilterError> {
    check_kernel(k)?;
    let sigma = k as f64 / 3.0;
    let r = (k / 2) as isize;
    let mut kernel = Vec::with_capacity(k * k);
    for dy in -r..=r {
        for dx in -r..=r {
            let d2 = (dy * dy + dx * dx) as f64;
            kernel.push((-d2 / (2.0 * sigma * sigma)).exp());
        }
    }
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|v| *v /= total);
    Ok(kernel)
}

pub fn gaussian_plane(plane: Plane<'_>, k: usize) -> Result<Vec<f64>, FilterError> {
    let kernel = gaussian_kernel(k)?;
    Ok(plane.map_windows(k, |w, _, _| w.iter().zip(&kernel).map(|(v, g)| v * g).sum()))
}

/// Largest window the adaptive median grows to for base size `k`.
pub fn adaptive_max_kernel(k: usize) -> usize {
    k + 2
}

pub fn adaptive_median_plane(plane: Plane<'_>, k: usize) -> Result<Vec<f64>, FilterError> {
    check_kernel(k)?;
    let k_max = adaptive_max_kernel(k);
    let mut window = Vec::with_capacity(k_max * k_max);
    let mut out = Vec::with_capacity(plane.values.len());
    for y in 0..plane.height {
        for x in 0..plane.width {
            let z = plane.values[y * plane.width + x];
            let mut size = k;
            let value = loop {
                plane.window(y, x, size, &mut window);
                sort_values(&mut window);
                let (lo, med, hi) = (window[0], window[window.len() / 2], window[window.len() - 1]);
                if lo < med && med < hi {
                    // median is not an impulse: keep z unless z itself is one
                    break if lo < z && z < hi { z } else { med };
                }
                size += 2;
                if size > k_max {
                    break med;
                }
            };
            out.push(value);
        }
    }
    Ok(out)
}

fn per_frame(
    map: &ActivationMap,
    layout: &Layout,
    k: usize,
    f: fn(Plane<'_>, usize) -> Result<Vec<f64>, FilterError>,
) -> Result<ActivationMap, FilterError> {
    check_kernel(k)?;
    if map.len() != layout.len() {
        return Err(FilterError::LayoutMismatch {
            map: map.len(),
            layout: layout.len(),
        });
    }
    let mut values = Vec::with_capacity(map.len());
    for slot in layout.frames() {
        let plane = Plane::new(&map.values[slot.range()], slot.height, slot.width);
        values.extend(f(plane, k)?);
    }
    Ok(ActivationMap::new(values, map.token_index, Stage::Denoised))
}

pub fn rank_gaussian(map: &ActivationMap, layout: &Layout, k: usize) -> Result<ActivationMap, FilterError> {
    per_frame(map, layout, k, rank_gaussian_plane)
}

pub fn median_filter(map: &ActivationMap, layout: &Layout, k: usize) -> Result<ActivationMap, FilterError> {
    per_frame(map, layout, k, median_plane)
}

pub fn gaussian_filter(map: &ActivationMap, layout: &Layout, k: usize) -> Result<ActivationMap, FilterError> {
    per_frame(map, layout, k, gaussian_plane)
}

pub fn adaptive_median_filter(
    map: &ActivationMap,
    layout: &Layout,
    k: usize,
) -> Result<ActivationMap, FilterError> {
    per_frame(map, layout, k, adaptive_median_plane)
}

/// Runs the filter selected by `cfg`. `FilterKind::None` copies the map.
pub fn apply(map: &ActivationMap, layout: &Layout, cfg: &FilterConfig) -> Result<ActivationMap, FilterError> {
    let k = cfg.kernel_size;
    match cfg.kind {
        FilterKind::RankGaussian => rank_gaussian(map, layout, k),
        FilterKind::Median => median_filter(map, layout, k),
        FilterKind::Gaussian => gaussian_filter(map, layout, k),
        FilterKind::AdaptiveMedian => adaptive_median_filter(map, layout, k),
        FilterKind::None => {
            check_kernel(k)?;
            Ok(ActivationMap::new(map.values.clone(), map.token_index, Stage::Denoised))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dump::Grid;

    fn spike_5x5() -> Vec<f64> {
        let mut v = vec![0.0; 25];
        v[12] = 1.0;
        v
    }

    #[test]
    fn bad_kernels() {
        let v = vec![1.0; 4];
        let p = Plane::new(&v, 2, 2);
        assert_eq!(rank_gaussian_plane(p, 2), Err(FilterError::BadKernel(2)));
        assert_eq!(median_plane(p, 0), Err(FilterError::BadKernel(0)));
        assert_eq!(gaussian_plane(p, 4), Err(FilterError::BadKernel(4)));
        assert_eq!(adaptive_median_plane(p, 6), Err(FilterError::BadKernel(6)));
    }

    #[test]
    fn constants_are_fixed_points() {
        let v = vec![0.7; 20];
        let p = Plane::new(&v, 4, 5);
        for k in [1, 3, 5] {
            assert_eq!(rank_gaussian_plane(p, k).unwrap(), v);
            assert_eq!(median_plane(p, k).unwrap(), v);
            assert_eq!(adaptive_median_plane(p, k).unwrap(), v);
            for g in gaussian_plane(p, k).unwrap() {
                assert!((g - 0.7).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn all_zero_stays_zero() {
        let v = vec![0.0; 9];
        assert_eq!(rank_gaussian_plane(Plane::new(&v, 3, 3), 3).unwrap(), v);
    }

    #[test]
    fn median_removes_isolated_spike() {
        let v = spike_5x5();
        assert_eq!(median_plane(Plane::new(&v, 5, 5), 3).unwrap(), vec![0.0; 25]);
        assert_eq!(adaptive_median_plane(Plane::new(&v, 5, 5), 3).unwrap(), vec![0.0; 25]);
    }

    #[test]
    fn rank_gaussian_suppresses_spike() {
        let v = spike_5x5();
        let out = rank_gaussian_plane(Plane::new(&v, 5, 5), 3).unwrap();
        // a lone spike gives a large coefficient of variation and a flat kernel
        assert!(out[12] < 0.1, "{}", out[12]);
        assert!(out.iter().all(|&x| (0.0..0.1).contains(&x)));
    }

    #[test]
    fn gaussian_impulse_response_is_kernel() {
        let v = spike_5x5();
        let out = gaussian_plane(Plane::new(&v, 5, 5), 3).unwrap();
        let kernel = gaussian_kernel(3).unwrap();
        for dy in 0..3 {
            for dx in 0..3 {
                // convolution flips the kernel; it is symmetric
                let got = out[(1 + dy) * 5 + 1 + dx];
                assert!((got - kernel[dy * 3 + dx]).abs() < 1e-15);
            }
        }
        assert!((kernel.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn adaptive_median_keeps_non_impulse_pixels() {
        // a smooth ramp has no impulses, so every pixel is kept
        let v: Vec<f64> = (0..25).map(|i| i as f64).collect();
        let out = adaptive_median_plane(Plane::new(&v, 5, 5), 3).unwrap();
        for y in 1..4 {
            for x in 1..4 {
                assert_eq!(out[y * 5 + x], v[y * 5 + x]);
            }
        }
    }

    #[test]
    fn adaptive_median_replaces_extreme_spike() {
        let mut v: Vec<f64> = (0..25).map(|i| (i % 5) as f64 * 0.1 + 0.2).collect();
        v[12] = 9.0;
        let out = adaptive_median_plane(Plane::new(&v, 5, 5), 3).unwrap();
        let mut w = Vec::new();
        Plane::new(&v, 5, 5).window(2, 2, 3, &mut w);
        sort_values(&mut w);
        assert_eq!(out[12], w[4]);
    }

    #[test]
    fn frames_are_filtered_independently() {
        let layout = Layout::single(Grid::new(2, 3, 3));
        let mut values = vec![0.0; 9];
        values.extend(vec![1.0; 9]);
        let map = ActivationMap::new(values.clone(), 4, Stage::Causal);
        let out = rank_gaussian(&map, &layout, 3).unwrap();
        assert_eq!(out.values, values);
        assert_eq!(out.token_index, 4);
        assert_eq!(out.stage, Stage::Denoised);
    }

    #[test]
    fn layout_mismatch() {
        let layout = Layout::single(Grid::image(2, 2));
        let map = ActivationMap::zeros(5, 0, Stage::Raw);
        assert!(matches!(
            apply(&map, &layout, &FilterConfig::default()),
            Err(FilterError::LayoutMismatch { .. })
        ));
    }

    #[test]
    fn kind_names_round_trip() {
        for kind in [
            FilterKind::RankGaussian,
            FilterKind::Median,
            FilterKind::Gaussian,
            FilterKind::AdaptiveMedian,
            FilterKind::None,
        ] {
            assert_eq!(kind.name().parse::<FilterKind>().unwrap(), kind);
        }
        assert!("box".parse::<FilterKind>().is_err());
    }
}
