//! Power-law tail fitting.
//!
//! The tail density above `x_high` is modelled as `y = k (x - x_high)^-alpha`,
//! which integrates to the tail mass
//! `P(X >= x) = k / (alpha - 1) * (x - x_high)^(1 - alpha)`.
//! The density is estimated on log-spaced bins and normalized by the total
//! sample count, so `k` is comparable across runs of different length.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MIN_TAIL: usize = 30;
const MIN_BINS: usize = 8;
const MIN_PER_BIN: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailFit {
    pub k: f64,
    pub alpha: f64,
    pub x_high: f64,
    pub n_tail: usize,
    pub r2: f64,
    /// `alpha > 1`; otherwise the tail mass diverges.
    pub integrable: bool,
}

impl TailFit {
    pub fn new(k: f64, alpha: f64, x_high: f64) -> Self {
        Self {
            k,
            alpha,
            x_high,
            n_tail: 0,
            r2: 1.0,
            integrable: alpha > 1.0,
        }
    }

    pub fn density(&self, x: f64) -> f64 {
        self.k * (x - self.x_high).powf(-self.alpha)
    }
}

/// Fits the tail above `x_high` by weighted log-log regression of binned
/// density, weights being bin counts.
pub fn fit_power_tail(samples: &[f64], x_high: f64) -> Result<TailFit> {
    let total = samples.len() as f64;
    let mut tail: Vec<f64> = samples
        .iter()
        .filter(|x| **x > x_high)
        .map(|x| x - x_high)
        .collect();
    if tail.len() < MIN_TAIL {
        return Err(Error::InsufficientData(format!(
            "{} samples above {x_high}, need {MIN_TAIL}",
            tail.len()
        )));
    }
    tail.sort_by(|a, b| a.total_cmp(b));
    let n_tail = tail.len();
    let lo = tail[0];

    // Retry with the sparse extreme trimmed when too few bins are populated.
    for keep in [1.0, 0.99, 0.95, 0.9, 0.8] {
        let hi_idx = ((n_tail as f64 * keep).ceil() as usize).clamp(MIN_TAIL, n_tail) - 1;
        let hi = tail[hi_idx] * (1.0 + 1e-12);
        if hi <= lo {
            continue;
        }
        let nbins = (n_tail / 10).clamp(MIN_BINS, 30);
        let (llo, lhi) = (lo.ln(), hi.ln());
        let step = (lhi - llo) / nbins as f64;
        let mut counts = vec![0usize; nbins];
        for &y in &tail[..=hi_idx] {
            let b = (((y.ln() - llo) / step) as usize).min(nbins - 1);
            counts[b] += 1;
        }
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        let mut ws = Vec::new();
        for (b, &c) in counts.iter().enumerate() {
            if c < MIN_PER_BIN {
                continue;
            }
            let left = (llo + step * b as f64).exp();
            let right = (llo + step * (b + 1) as f64).exp();
            let density = c as f64 / (total * (right - left));
            xs.push(0.5 * (left.ln() + right.ln()));
            ys.push(density.ln());
            ws.push(c as f64);
        }
        if xs.len() < MIN_BINS {
            continue;
        }
        let (intercept, slope, r2) = weighted_line(&xs, &ys, &ws);
        let alpha = -slope;
        return Ok(TailFit {
            k: intercept.exp(),
            alpha,
            x_high,
            n_tail,
            r2,
            integrable: alpha > 1.0,
        });
    }
    Err(Error::InsufficientData(format!(
        "tail above {x_high} does not populate {MIN_BINS} bins with {MIN_PER_BIN}+ samples"
    )))
}

fn weighted_line(x: &[f64], y: &[f64], w: &[f64]) -> (f64, f64, f64) {
    let sw: f64 = w.iter().sum();
    let mx = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let my = y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let sxx: f64 = x.iter().zip(w).map(|(a, b)| b * (a - mx).powi(2)).sum();
    let sxy: f64 = x
        .iter()
        .zip(y)
        .zip(w)
        .map(|((a, c), b)| b * (a - mx) * (c - my))
        .sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = y.iter().zip(w).map(|(c, b)| b * (c - my).powi(2)).sum();
    let ss_res: f64 = x
        .iter()
        .zip(y)
        .zip(w)
        .map(|((a, c), b)| b * (c - intercept - slope * a).powi(2))
        .sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    (intercept, slope, r2)
}

/// `P(X >= x)` under the fitted tail.
pub fn tail_mass(fit: &TailFit, x: f64) -> Result<f64> {
    if !(x > fit.x_high) {
        return Err(Error::Domain(format!(
            "tail mass needs x > x_high ({x} <= {})",
            fit.x_high
        )));
    }
    if !(fit.alpha > 1.0) {
        return Err(Error::Domain(format!(
            "alpha {} <= 1: tail mass is not integrable",
            fit.alpha
        )));
    }
    Ok(fit.k / (fit.alpha - 1.0) * (x - fit.x_high).powf(1.0 - fit.alpha))
}

/// Fraction of tail mass removed going from `baseline` to `improved` at `x`.
pub fn tail_slash(baseline: &TailFit, improved: &TailFit, x: f64) -> Result<f64> {
    Ok(1.0 - tail_mass(improved, x)? / tail_mass(baseline, x)?)
}

/// Empirical `P(X >= x)`.
pub fn empirical_ccdf(samples: &[f64], x: f64) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.iter().filter(|s| **s >= x).count() as f64 / samples.len() as f64
}
