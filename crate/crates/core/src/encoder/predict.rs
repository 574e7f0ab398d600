use std::collections::VecDeque;

use crate::numeric::fit_line;

/// Linear extrapolation of `(frame_idx, c)` history to the next frame.
///
/// Returns the last observed value when fewer than two points exist.
pub fn predict_complexity_linear(history: &[(f64, f64)]) -> Option<f64> {
    let last = history.last()?;
    if history.len() < 2 {
        return Some(last.1);
    }
    let xs: Vec<f64> = history.iter().map(|h| h.0).collect();
    let ys: Vec<f64> = history.iter().map(|h| h.1).collect();
    match fit_line(&xs, &ys) {
        Some((a, b)) => Some(a + b * (last.0 + 1.0)),
        None => Some(last.1),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComplexityPrediction {
    pub value: f64,
    /// False when the history was too short (e.g. just after an FPS change).
    pub confident: bool,
}

/// Keeps recent complexities at a fixed frame rate.
#[derive(Debug, Clone)]
pub struct ComplexityPredictor {
    fps: Option<u32>,
    history: VecDeque<(f64, f64)>,
    capacity: usize,
}

impl ComplexityPredictor {
    pub fn new(capacity: usize) -> Self {
        Self {
            fps: None,
            history: VecDeque::with_capacity(capacity),
            capacity: capacity.max(2),
        }
    }

    /// Records complexity `c` of frame `idx`; a new frame rate clears the
    /// history since complexity depends on inter-frame time.
    pub fn observe(&mut self, idx: usize, c: f64, fps: u32) {
        if self.fps != Some(fps) {
            self.fps = Some(fps);
            self.history.clear();
        }
        if self.history.len() == self.capacity {
            self.history.pop_front();
        }
        self.history.push_back((idx as f64, c));
    }

    pub fn predict(&self) -> Option<ComplexityPrediction> {
        let hist: Vec<(f64, f64)> = self.history.iter().copied().collect();
        let value = predict_complexity_linear(&hist)?;
        let last = hist.last().map(|h| h.1).unwrap_or(value);
        Some(ComplexityPrediction {
            // never extrapolate to a non-positive complexity
            value: if value > 0.0 { value } else { last },
            confident: hist.len() >= 2,
        })
    }

    /// Mean of the stored history.
    pub fn mean(&self) -> Option<f64> {
        if self.history.is_empty() {
            None
        } else {
            Some(self.history.iter().map(|h| h.1).sum::<f64>() / self.history.len() as f64)
        }
    }
}
