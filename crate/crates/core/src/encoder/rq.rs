//! Frame-level rate-quantization model `R(q, c) = c (a1/q + a2/q^2)`.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::least_squares;

/// Number of selectable quantizer steps.
pub const QUANT_STEPS: usize = 52;

/// Strictly increasing quantizer steps, geometric between `q_min` and `q_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantTable {
    steps: Vec<f64>,
    log_ratio: f64,
}

impl QuantTable {
    pub fn geometric(q_min: f64, q_max: f64) -> Result<Self> {
        if !(q_min > 0.0 && q_max > q_min) {
            return Err(Error::Config(format!(
                "quantizer range [{q_min}, {q_max}] invalid"
            )));
        }
        let log_ratio = (q_max / q_min).ln() / (QUANT_STEPS - 1) as f64;
        let mut steps: Vec<f64> = (0..QUANT_STEPS)
            .map(|i| q_min * (log_ratio * i as f64).exp())
            .collect();
        steps[QUANT_STEPS - 1] = q_max;
        Ok(Self { steps, log_ratio })
    }

    pub fn steps(&self) -> &[f64] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn q(&self, idx: usize) -> f64 {
        self.steps[idx]
    }

    pub fn min(&self) -> f64 {
        self.steps[0]
    }

    pub fn max(&self) -> f64 {
        self.steps[QUANT_STEPS - 1]
    }

    /// Fractional table position of an arbitrary quantizer (may lie outside
    /// `[0, 51]`).
    pub fn continuous_index(&self, q: f64) -> f64 {
        (q / self.steps[0]).ln() / self.log_ratio
    }

    /// Nearest table index in log space.
    pub fn nearest_index(&self, q: f64) -> usize {
        self.continuous_index(q).round().clamp(0.0, (QUANT_STEPS - 1) as f64) as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RqObservation {
    pub q: f64,
    pub c: f64,
    pub bits: f64,
}

/// Online R-Q model refitted from recent (q, c, R) observations.
#[derive(Debug, Clone, PartialEq)]
pub struct RqModel {
    pub alpha1: f64,
    pub alpha2: f64,
    history: VecDeque<RqObservation>,
    capacity: usize,
    forgetting: f64,
}

impl RqModel {
    pub fn new(alpha1: f64, alpha2: f64) -> Self {
        Self::with_window(alpha1, alpha2, 64, 0.95)
    }

    pub fn with_window(alpha1: f64, alpha2: f64, capacity: usize, forgetting: f64) -> Self {
        assert!(alpha1 >= 0.0 && alpha2 >= 0.0 && alpha1 + alpha2 > 0.0);
        Self {
            alpha1,
            alpha2,
            history: VecDeque::with_capacity(capacity),
            capacity: capacity.max(2),
            forgetting,
        }
    }

    pub fn history(&self) -> impl Iterator<Item = &RqObservation> {
        self.history.iter()
    }

    pub fn required_bits(&self, q: f64, c: f64) -> Result<f64> {
        rq_required_bits(q, c, self.alpha1, self.alpha2)
    }

    /// Bits for a quantizer known to be positive (table entries).
    pub fn bits(&self, q: f64, c: f64) -> f64 {
        c * (self.alpha1 / q + self.alpha2 / (q * q))
    }

    pub fn invert(&self, bits: f64, c: f64) -> Result<f64> {
        rq_invert(bits, c, self.alpha1, self.alpha2)
    }

    /// Appends an observation and refits over the exponentially weighted
    /// window. Coefficients stay non-negative; a window that cannot identify
    /// both coefficients leaves them unchanged.
    pub fn refit(&mut self, obs: RqObservation) {
        if !(obs.q > 0.0 && obs.c > 0.0 && obs.bits > 0.0) {
            return;
        }
        if self.history.len() == self.capacity {
            self.history.pop_front();
        }
        self.history.push_back(obs);
        if self.history.len() < 2 {
            return;
        }
        // Relative residuals: each row is scaled by 1/R so large frames do not
        // dominate the fit.
        let n = self.history.len();
        let mut rows = Vec::with_capacity(n * 2);
        let mut y = Vec::with_capacity(n);
        for (age, o) in self.history.iter().rev().enumerate() {
            let w = self.forgetting.powi(age as i32).sqrt();
            let u = 1.0 / o.q;
            rows.push(w * o.c * u / o.bits);
            rows.push(w * o.c * u * u / o.bits);
            y.push(w);
        }
        let Some(sol) = least_squares(&rows, 2, &y, 1e-7) else {
            return;
        };
        let (a1, a2) = (sol[0], sol[1]);
        if a1 >= 0.0 && a2 >= 0.0 {
            if a1 + a2 > 0.0 {
                self.alpha1 = a1;
                self.alpha2 = a2;
            }
            return;
        }
        // Constrained fit: best single-coefficient model.
        let single = |col: usize| -> (f64, f64) {
            let (mut num, mut den) = (0.0, 0.0);
            for i in 0..n {
                let x = rows[i * 2 + col];
                num += x * y[i];
                den += x * x;
            }
            let coef = if den > 0.0 { (num / den).max(0.0) } else { 0.0 };
            let resid: f64 = (0..n).map(|i| (y[i] - coef * rows[i * 2 + col]).powi(2)).sum();
            (coef, resid)
        };
        let (c1, r1) = single(0);
        let (c2, r2) = single(1);
        if r1 <= r2 && c1 > 0.0 {
            self.alpha1 = c1;
            self.alpha2 = 0.0;
        } else if c2 > 0.0 {
            self.alpha1 = 0.0;
            self.alpha2 = c2;
        }
    }
}

/// `c (a1/q + a2/q^2)`.
pub fn rq_required_bits(q: f64, c: f64, alpha1: f64, alpha2: f64) -> Result<f64> {
    if !(q > 0.0) {
        return Err(Error::Domain(format!("quantizer must be > 0, got {q}")));
    }
    if c < 0.0 {
        return Err(Error::Domain(format!("complexity must be >= 0, got {c}")));
    }
    Ok(c * (alpha1 / q + alpha2 / (q * q)))
}

/// Quantizer whose predicted size is exactly `bits`: the positive root of
/// `c a2 u^2 + c a1 u - R = 0` with `u = 1/q`.
pub fn rq_invert(bits: f64, c: f64, alpha1: f64, alpha2: f64) -> Result<f64> {
    if !(bits > 0.0) {
        return Err(Error::Domain(format!("bits must be > 0, got {bits}")));
    }
    if !(c > 0.0) {
        return Err(Error::Domain(format!("complexity must be > 0, got {c}")));
    }
    let b = c * alpha1;
    let a = c * alpha2;
    // Cancellation-free form of (-b + sqrt(b^2 + 4aR)) / 2a.
    let u = 2.0 * bits / (b + (b * b + 4.0 * a * bits).sqrt());
    Ok(1.0 / u)
}

/// [`rq_invert`] restricted to the table range; the flag reports clamping.
pub fn rq_invert_clamped(
    bits: f64,
    c: f64,
    model: &RqModel,
    table: &QuantTable,
) -> Result<(f64, bool)> {
    let q = model.invert(bits, c)?;
    if q < table.min() {
        Ok((table.min(), true))
    } else if q > table.max() {
        Ok((table.max(), true))
    } else {
        Ok((q, false))
    }
}
