//! Field error metrics, distribution divergence and line cuts. Every image
//! metric takes the blank mask; pixels with mask 0 never contribute.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interp::GridSpec;
use crate::tensor::Tensor;

pub const KLD_BINS: usize = 50;
pub const KLD_EPSILON: f64 = 1e-8;

pub fn to_f64(t: &Tensor<f32>) -> Vec<f64> {
    t.data().iter().map(|&v| f64::from(v)).collect()
}

fn check_lengths(a: &[f64], b: &[f64], mask: &[f64]) -> Result<()> {
    if a.len() != b.len() || a.len() != mask.len() {
        return Err(Error::Shape(format!(
            "fields of {} and {} values with a mask of {}",
            a.len(),
            b.len(),
            mask.len()
        )));
    }
    Ok(())
}

fn masked<'a>(field: &'a [f64], mask: &'a [f64]) -> impl Iterator<Item = f64> + 'a + Clone {
    field.iter().zip(mask).filter(|(_, &m)| m > 0.0).map(|(&v, _)| v)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stat {
    Max,
    Mean,
}

/// Per-image statistic over the in-mask pixels.
pub fn image_stat(field: &[f64], mask: &[f64], stat: Stat) -> Result<f64> {
    if field.len() != mask.len() {
        return Err(Error::Shape(format!(
            "field of {} values, mask of {}",
            field.len(),
            mask.len()
        )));
    }
    let vals = masked(field, mask);
    let count = vals.clone().count();
    if count == 0 {
        return Err(Error::EmptyRequest("mask selects no pixels"));
    }
    Ok(match stat {
        Stat::Max => vals.fold(f64::NEG_INFINITY, f64::max),
        Stat::Mean => vals.sum::<f64>() / count as f64,
    })
}

/// `|max(PD) - max(GT)|` over the in-mask pixels.
pub fn mae_max(pred: &[f64], truth: &[f64], mask: &[f64]) -> Result<f64> {
    check_lengths(pred, truth, mask)?;
    Ok((image_stat(pred, mask, Stat::Max)? - image_stat(truth, mask, Stat::Max)?).abs())
}

/// Mean squared error over the in-mask pixels.
pub fn masked_mse(pred: &[f64], truth: &[f64], mask: &[f64]) -> Result<f64> {
    check_lengths(pred, truth, mask)?;
    let mut sse = 0.0;
    let mut count = 0usize;
    for ((p, t), &m) in pred.iter().zip(truth).zip(mask) {
        if m > 0.0 {
            sse += (p - t).powi(2);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyRequest("mask selects no pixels"));
    }
    Ok(sse / count as f64)
}

/// Running `sum |y - y~| / sum |y|` across an evaluation set.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MreAccumulator {
    pub abs_error: f64,
    pub abs_truth: f64,
}

impl MreAccumulator {
    pub fn add(&mut self, pred: &[f64], truth: &[f64], mask: &[f64]) -> Result<()> {
        check_lengths(pred, truth, mask)?;
        for ((p, t), &m) in pred.iter().zip(truth).zip(mask) {
            if m > 0.0 {
                self.abs_error += (t - p).abs();
                self.abs_truth += t.abs();
            }
        }
        Ok(())
    }

    pub fn value(&self) -> Result<f64> {
        if self.abs_truth == 0.0 {
            return Err(Error::InvalidArgument("relative error of all-zero targets".into()));
        }
        Ok(self.abs_error / self.abs_truth)
    }
}

pub fn mre(pred: &[f64], truth: &[f64], mask: &[f64]) -> Result<f64> {
    let mut acc = MreAccumulator::default();
    acc.add(pred, truth, mask)?;
    acc.value()
}

/// `KL(p || q)` in nats for two mass vectors; zero-mass terms of `p` vanish.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::Shape(format!(
            "mass vectors of {} and {} bins",
            p.len(),
            q.len()
        )));
    }
    Ok(p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi).ln())
        .sum())
}

/// Both samples histogrammed on shared equal-width bins over their union
/// range, smoothed by `epsilon` per bin; returns `KL(gt || pd)`.
pub fn histogram_kld(gt: &[f64], pd: &[f64], bins: usize, epsilon: f64) -> Result<f64> {
    if gt.is_empty() || pd.is_empty() || bins == 0 {
        return Err(Error::EmptyRequest("divergence of empty samples"));
    }
    let all = gt.iter().chain(pd);
    let lo = all.clone().cloned().fold(f64::INFINITY, f64::min);
    let hi = all.cloned().fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() || !hi.is_finite() || hi <= lo {
        return Err(Error::InvalidArgument(format!("degenerate value range [{lo}, {hi}]")));
    }
    let width = (hi - lo) / bins as f64;
    let mass = |xs: &[f64]| {
        let mut h = vec![epsilon; bins];
        for &x in xs {
            let b = (((x - lo) / width) as usize).min(bins - 1);
            h[b] += 1.0;
        }
        let total: f64 = h.iter().sum();
        h.iter().map(|c| c / total).collect::<Vec<_>>()
    };
    kl_divergence(&mass(gt), &mass(pd))
}

/// Divergence between the distributions of a per-image statistic over
/// ground-truth and predicted sets.
pub fn kld_stats(gt: &[Vec<f64>], pd: &[Vec<f64>], masks: &[Vec<f64>], stat: Stat) -> Result<f64> {
    if gt.len() < 2 || gt.len() != pd.len() || gt.len() != masks.len() {
        return Err(Error::InvalidArgument(format!(
            "divergence needs at least 2 paired samples, got {} / {} / {} masks",
            gt.len(),
            pd.len(),
            masks.len()
        )));
    }
    let collect =
        |set: &[Vec<f64>]| -> Result<Vec<f64>> { set.iter().zip(masks).map(|(f, m)| image_stat(f, m, stat)).collect() };
    histogram_kld(&collect(gt)?, &collect(pd)?, KLD_BINS, KLD_EPSILON)
}

/// Bilinear sample of an `n x n` row-major field at fractional pixel
/// coordinates, clamped to the outermost pixel centres.
pub fn bilinear(field: &[f64], n: usize, row: f64, col: f64) -> f64 {
    let max = (n - 1) as f64;
    let (r, c) = (row.clamp(0.0, max), col.clamp(0.0, max));
    let (r0, c0) = (r.floor() as usize, c.floor() as usize);
    let (r1, c1) = ((r0 + 1).min(n - 1), (c0 + 1).min(n - 1));
    let (fr, fc) = (r - r0 as f64, c - c0 as f64);
    let at = |r: usize, c: usize| field[r * n + c];
    let top = at(r0, c0) * (1.0 - fc) + at(r0, c1) * fc;
    let bottom = at(r1, c0) * (1.0 - fc) + at(r1, c1) * fc;
    top * (1.0 - fr) + bottom * fr
}

/// Field values at `n_points` equally spaced points from `start` to `end`
/// (mm, endpoints included).
pub fn line_cut(field: &[f64], grid: GridSpec, start: [f64; 2], end: [f64; 2], n_points: usize) -> Result<Vec<f64>> {
    if field.len() != grid.len() {
        return Err(Error::Shape(format!(
            "field of {} values on a {}x{} grid",
            field.len(),
            grid.n,
            grid.n
        )));
    }
    let inside = |p: [f64; 2]| p.iter().all(|v| (0.0..=grid.frame_mm).contains(v));
    if !inside(start) || !inside(end) {
        return Err(Error::InvalidArgument(format!(
            "cut {start:?} -> {end:?} leaves the frame"
        )));
    }
    if start == end {
        return Err(Error::InvalidArgument("zero-length cut".into()));
    }
    if n_points < 2 {
        return Err(Error::InvalidArgument(format!("{n_points} points on a cut")));
    }
    Ok((0..n_points)
        .map(|i| {
            let t = i as f64 / (n_points - 1) as f64;
            let x = start[0] + t * (end[0] - start[0]);
            let y = start[1] + t * (end[1] - start[1]);
            let [r, c] = grid.to_pixel(x, y);
            bilinear(field, grid.n, r, c)
        })
        .collect())
}

/// Interior local maxima that rise at least `min_rise` above the lowest
/// point on each side before the next higher value (equal-height peaks
/// count once).
pub fn count_peaks(profile: &[f64], min_rise: f64) -> usize {
    let n = profile.len();
    let mut count = 0;
    let mut i = 1;
    while i + 1 < n {
        // plateau handling: walk to the end of equal values
        let mut j = i;
        while j + 1 < n && profile[j + 1] == profile[i] {
            j += 1;
        }
        if j + 1 < n && profile[i] > profile[i - 1] && profile[i] > profile[j + 1] {
            let v = profile[i];
            let left = profile[..i]
                .iter()
                .rev()
                .take_while(|&&x| x < v)
                .cloned()
                .fold(v, f64::min);
            let right = profile[j + 1..]
                .iter()
                .take_while(|&&x| x <= v)
                .cloned()
                .fold(v, f64::min);
            if v - left >= min_rise && v - right >= min_rise {
                count += 1;
            }
        }
        i = j + 1;
    }
    count
}
