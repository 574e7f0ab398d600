//! Target-bitrate adaptation: a delay/loss rule baseline and an
//! actor-critic policy trained with a clipped surrogate.

pub mod nn;
mod policy;

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::config::{RateConfig, RlConfig};
use crate::error::{Error, Result};

pub use policy::{
    critic_gradient, critic_update, ppo_gradient, ppo_update, surrogate, Checkpoint, Policy, PpoSample, TdSample, CHECKPOINT_VERSION,
};

/// Weights of bitrate, FPS, QP, delay and stall terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights(pub [f64; 5]);

impl RewardWeights {
    pub fn new(w: [f64; 5]) -> Result<Self> {
        if w.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config(format!("reward weights must be positive: {w:?}")));
        }
        Ok(Self(w))
    }
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self(RlConfig::default().weights)
    }
}

/// Playback metrics averaged over one decision interval.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct RewardMetrics {
    pub bitrate_bps: f64,
    pub fps: f64,
    /// Quantizer index.
    pub qp: f64,
    pub delay_s: f64,
    /// Stalled fraction in `[0, 1]`.
    pub stall: f64,
}

pub fn reward(m: &RewardMetrics, w: &RewardWeights) -> f64 {
    let w = w.0;
    w[0] * m.bitrate_bps + w[1] * m.fps - w[2] * m.qp - w[3] * m.delay_s - w[4] * m.stall
}

/// `sum_k gamma^k r[t+k]` over at most `horizon` steps.
pub fn discounted_return(rewards: &[f64], gamma: f64, horizon: usize) -> f64 {
    rewards.iter().take(horizon).rev().fold(0.0, |acc, r| r + gamma * acc)
}

/// Discounted return from every step of an episode.
pub fn returns(rewards: &[f64], gamma: f64, horizon: usize) -> Vec<f64> {
    (0..rewards.len()).map(|t| discounted_return(&rewards[t..], gamma, horizon)).collect()
}

/// Geometric grid of target bitrates.
pub fn action_grid(n: usize, min_bps: f64, max_bps: f64) -> Vec<f64> {
    if n == 1 {
        return vec![min_bps];
    }
    let r = (max_bps / min_bps).powf(1.0 / (n - 1) as f64);
    (0..n).map(|i| min_bps * r.powi(i as i32)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GccFeedback {
    /// Queuing-delay gradient over the last interval (ms per s).
    pub delay_gradient_ms_per_s: f64,
    pub loss: f64,
}

/// Delay-gradient / loss rule. Keeps a smoothed gradient across calls.
#[derive(Debug, Clone)]
pub struct Gcc {
    cfg: RateConfig,
    smoothed: f64,
}

impl Gcc {
    pub fn new(cfg: &RateConfig) -> Self {
        Self { cfg: cfg.clone(), smoothed: 0.0 }
    }

    pub fn update(&mut self, fb: GccFeedback, rate: f64) -> f64 {
        let a = self.cfg.gcc_smoothing;
        self.smoothed = (1.0 - a) * self.smoothed + a * fb.delay_gradient_ms_per_s;
        gcc_rule(self.smoothed > self.cfg.gcc_overuse_ms_per_s, fb.loss, rate, &self.cfg)
    }
}

pub fn gcc_rule(overuse: bool, loss: f64, rate: f64, cfg: &RateConfig) -> f64 {
    let next = if overuse {
        rate * cfg.gcc_decrease
    } else if loss > cfg.gcc_loss_threshold {
        rate * (1.0 - 0.5 * loss)
    } else {
        rate * cfg.gcc_increase
    };
    next.clamp(cfg.min_bps, cfg.max_bps)
}

/// One grid sample of the observation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct StateSample {
    pub throughput_bps: f64,
    pub loss: f64,
    pub rtt_ms: f64,
    pub e2e_ms: f64,
    pub fps: f64,
    pub qp: f64,
    pub target_bps: f64,
    pub actual_bps: f64,
    pub dual_active: f64,
    pub dual_s1_bits: f64,
    pub dual_s2_bits: f64,
    pub b_prime: f64,
    pub b_dprime: f64,
}

pub const STATE_FEATURES: usize = 13;

/// Divisors bringing every feature to order one.
pub const STATE_NORMS: [f64; STATE_FEATURES] =
    [1e6, 0.1, 100.0, 100.0, 30.0, 51.0, 1e6, 1e6, 1.0, 1e5, 1e5, 1e6, 1e6];

impl StateSample {
    fn raw(&self) -> [f64; STATE_FEATURES] {
        [
            self.throughput_bps,
            self.loss,
            self.rtt_ms,
            self.e2e_ms,
            self.fps,
            self.qp,
            self.target_bps,
            self.actual_bps,
            self.dual_active,
            self.dual_s1_bits,
            self.dual_s2_bits,
            self.b_prime,
            self.b_dprime,
        ]
    }

    pub fn normalized(&self) -> [f64; STATE_FEATURES] {
        let mut v = self.raw();
        for (x, n) in v.iter_mut().zip(STATE_NORMS) {
            *x /= n;
        }
        v
    }
}

/// Fixed-length sliding window of samples, oldest first, zero-padded.
#[derive(Debug, Clone)]
pub struct StateHistory {
    len: usize,
    buf: VecDeque<[f64; STATE_FEATURES]>,
}

impl StateHistory {
    pub fn new(len: usize) -> Self {
        Self { len, buf: VecDeque::with_capacity(len) }
    }

    pub fn from_config(rl: &RlConfig, rate: &RateConfig) -> Self {
        Self::new(((rl.history_s * 1000.0) / rate.interval_ms).round().max(1.0) as usize)
    }

    pub fn dim(&self) -> usize {
        self.len * STATE_FEATURES
    }

    pub fn push(&mut self, s: &StateSample) {
        if self.buf.len() == self.len {
            self.buf.pop_front();
        }
        self.buf.push_back(s.normalized());
    }

    /// Feature-major layout: all samples of feature 0, then feature 1, ...
    pub fn vector(&self) -> Result<Vec<f64>> {
        let pad = self.len - self.buf.len();
        let mut v = vec![0.0; self.dim()];
        for (j, s) in self.buf.iter().enumerate() {
            for (f, x) in s.iter().enumerate() {
                if !x.is_finite() {
                    return Err(Error::Validation(format!("non-finite state feature {f} at sample {j}: {x}")));
                }
                v[f * self.len + pad + j] = *x;
            }
        }
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gcc_examples() {
        let cfg = RateConfig::default();
        assert!((gcc_rule(false, 0.0, 1e6, &cfg) - 1.05e6).abs() < 1e-6);
        assert!((gcc_rule(true, 0.0, 1e6, &cfg) - 0.85e6).abs() < 1e-6);
        assert_eq!(gcc_rule(false, 0.0, cfg.max_bps, &cfg), cfg.max_bps);
        assert!((gcc_rule(false, 0.2, 1e6, &cfg) - 0.9e6).abs() < 1e-6);
        assert_eq!(gcc_rule(true, 0.0, cfg.min_bps, &cfg), cfg.min_bps);
    }

    #[test]
    fn gcc_smooths_gradient() {
        let cfg = RateConfig::default();
        let mut g = Gcc::new(&cfg);
        let spike = GccFeedback { delay_gradient_ms_per_s: 50.0, loss: 0.0 };
        // 0.3 * 50 = 15 < 20: a single spike is not yet overuse
        assert!(g.update(spike, 1e6) > 1e6);
        assert!(g.update(spike, 1e6) < 1e6);
    }

    #[test]
    fn reward_examples() {
        let w = RewardWeights::default();
        let m = RewardMetrics { bitrate_bps: 2e6, fps: 30.0, qp: 30.0, delay_s: 0.1, stall: 0.01 };
        assert!((reward(&m, &w) + 40.0).abs() < 1e-9);
        assert_eq!(reward(&RewardMetrics::default(), &w), 0.0);
        let worse = RewardMetrics { delay_s: 0.2, ..m };
        assert!(reward(&worse, &w) < reward(&m, &w));
    }

    #[test]
    fn reward_signs() {
        let w = RewardWeights::default();
        let mut rng_state = 1u64;
        let mut next = || {
            rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (rng_state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..100 {
            let m = RewardMetrics {
                bitrate_bps: next() * 4e6,
                fps: next() * 30.0,
                qp: next() * 51.0,
                delay_s: next(),
                stall: next(),
            };
            let r = reward(&m, &w);
            assert!(reward(&RewardMetrics { bitrate_bps: m.bitrate_bps + 1e5, ..m }, &w) > r);
            assert!(reward(&RewardMetrics { delay_s: m.delay_s + 0.01, ..m }, &w) < r);
            assert!(reward(&RewardMetrics { stall: m.stall + 0.01, ..m }, &w) < r);
        }
        assert!(RewardWeights::new([1.0, 1.0, 0.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn discounted_return_examples() {
        assert!((discounted_return(&[1.0, 1.0, 1.0], 0.5, 20) - 1.75).abs() < 1e-12);
        assert_eq!(discounted_return(&[3.0, 9.0], 0.0, 20), 3.0);
        let r = vec![2.0; 50];
        let want = 2.0 * (1.0 - 0.98f64.powi(20)) / (1.0 - 0.98);
        assert!((discounted_return(&r, 0.98, 20) - want).abs() < 1e-9);
        assert_eq!(returns(&[1.0, 1.0], 0.5, 20), vec![1.5, 1.0]);
    }

    #[test]
    fn grid_is_geometric() {
        let g = action_grid(17, 3e5, 4e6);
        assert_eq!(g.len(), 17);
        assert!((g[0] - 3e5).abs() < 1e-6 && (g[16] - 4e6).abs() < 1e-3);
        let r = g[1] / g[0];
        assert!(g.windows(2).all(|w| (w[1] / w[0] - r).abs() < 1e-12));
    }

    #[test]
    fn history_layout_is_fixed() {
        let mut h = StateHistory::from_config(&RlConfig::default(), &RateConfig::default());
        assert_eq!(h.dim(), 260);
        assert!(h.vector().unwrap().iter().all(|v| *v == 0.0));
        h.push(&StateSample { throughput_bps: 2e6, ..Default::default() });
        let v = h.vector().unwrap();
        assert_eq!(v.len(), 260);
        assert_eq!(v[19], 2.0);
        for _ in 0..30 {
            h.push(&StateSample { fps: 30.0, ..Default::default() });
        }
        let v = h.vector().unwrap();
        assert!(v[..20].iter().all(|x| *x == 0.0));
        assert!(v[80..100].iter().all(|x| *x == 1.0));
        h.push(&StateSample { rtt_ms: f64::NAN, ..Default::default() });
        assert!(matches!(h.vector(), Err(Error::Validation(_))));
    }
}
