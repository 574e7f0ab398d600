//! Cubic SAD -> SATD complexity model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::least_squares;

/// Smallest complexity the model will ever predict.
pub const SATD_FLOOR: f64 = 1e-3;

const MIN_SAMPLES: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SadCubicModel {
    pub betas: [f64; 4],
    pub fit_rms: f64,
    /// The cubic design was rank deficient and a lower-order fit was used.
    pub degenerate: bool,
}

impl SadCubicModel {
    pub fn new(betas: [f64; 4]) -> Self {
        Self {
            betas,
            fit_rms: 0.0,
            degenerate: false,
        }
    }

    pub fn predict(&self, sad: f64) -> f64 {
        satd_from_sad(sad, self)
    }
}

/// `b0 + b1 s + b2 s^2 + b3 s^3`, floored at a small positive value.
pub fn satd_from_sad(sad: f64, m: &SadCubicModel) -> f64 {
    let b = &m.betas;
    let v = b[0] + sad * (b[1] + sad * (b[2] + sad * b[3]));
    v.max(SATD_FLOOR)
}

/// Ordinary least-squares cubic through `(sad, satd)` samples.
///
/// Falls back to a straight line (and then a constant) when the samples
/// cannot identify a cubic.
pub fn fit_sad_cubic(samples: &[(f64, f64)]) -> Result<SadCubicModel> {
    if samples.len() < MIN_SAMPLES {
        return Err(Error::InsufficientData(format!(
            "cubic fit needs at least {MIN_SAMPLES} samples, got {}",
            samples.len()
        )));
    }
    // Fit on s / scale to keep the Vandermonde columns comparable.
    let scale = samples
        .iter()
        .map(|(s, _)| s.abs())
        .fold(0.0, f64::max)
        .max(1e-12);
    let y: Vec<f64> = samples.iter().map(|(_, c)| *c).collect();
    let design = |order: usize| -> Vec<f64> {
        samples
            .iter()
            .flat_map(|(s, _)| {
                let t = s / scale;
                (0..=order).map(move |k| t.powi(k as i32))
            })
            .collect()
    };
    let mut degenerate = false;
    let mut gammas = None;
    for order in [3usize, 1, 0] {
        if let Some(g) = least_squares(&design(order), order + 1, &y, 1e-9) {
            gammas = Some(g);
            break;
        }
        degenerate = true;
    }
    let gammas = gammas.ok_or_else(|| Error::InsufficientData("degenerate SAD samples".into()))?;
    let mut betas = [0.0; 4];
    for (k, g) in gammas.iter().enumerate() {
        betas[k] = g / scale.powi(k as i32);
    }
    let model = SadCubicModel {
        betas,
        fit_rms: 0.0,
        degenerate,
    };
    let raw = |s: f64| {
        let b = &model.betas;
        b[0] + s * (b[1] + s * (b[2] + s * b[3]))
    };
    let rms = (samples.iter().map(|(s, c)| (raw(*s) - c).powi(2)).sum::<f64>()
        / samples.len() as f64)
        .sqrt();
    Ok(SadCubicModel {
        fit_rms: rms,
        ..model
    })
}
