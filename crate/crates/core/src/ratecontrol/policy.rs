use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::nn::{softmax, Mlp};
use super::{action_grid, STATE_NORMS};
use crate::config::RlConfig;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Actor (softmax over the bitrate grid) and critic (scalar value).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub actor: Mlp,
    pub critic: Mlp,
    pub grid: Vec<f64>,
}

impl Policy {
    pub fn new(cfg: &RlConfig, inputs: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims = vec![inputs];
        dims.extend(&cfg.hidden);
        let mut actor_dims = dims.clone();
        actor_dims.push(cfg.actions);
        dims.push(1);
        let mut actor = Mlp::new(&actor_dims, cfg.leaky_slope, &mut rng);
        // Start close to uniform so early rollouts explore the whole grid.
        if let Some(last) = actor.layers.last_mut() {
            last.w.iter_mut().for_each(|w| *w *= 0.01);
        }
        Self {
            actor,
            critic: Mlp::new(&dims, cfg.leaky_slope, &mut rng),
            grid: action_grid(cfg.actions, cfg.action_min_bps, cfg.action_max_bps),
        }
    }

    pub fn inputs(&self) -> usize {
        self.actor.dims()[0]
    }

    fn check_state(&self, state: &[f64]) -> Result<()> {
        if state.len() != self.inputs() {
            return Err(Error::Validation(format!(
                "state has {} entries, policy expects {}",
                state.len(),
                self.inputs()
            )));
        }
        if let Some((i, v)) = state.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Validation(format!("non-finite state entry {i}: {v}")));
        }
        Ok(())
    }

    pub fn distribution(&self, state: &[f64]) -> Result<Vec<f64>> {
        self.check_state(state)?;
        Ok(softmax(&self.actor.output(state)))
    }

    /// Sampled (or greedy) action index and its log-probability.
    pub fn act<R: Rng>(&self, state: &[f64], rng: &mut R, greedy: bool) -> Result<(usize, f64)> {
        let p = self.distribution(state)?;
        let a = if greedy {
            p.iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap_or(0)
        } else {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            p.iter()
                .position(|v| {
                    acc += v;
                    u < acc
                })
                .unwrap_or(p.len() - 1)
        };
        Ok((a, p[a].max(f64::MIN_POSITIVE).ln()))
    }

    pub fn value(&self, state: &[f64]) -> Result<f64> {
        self.check_state(state)?;
        Ok(self.critic.output(state)[0])
    }

    pub fn is_finite(&self) -> bool {
        self.actor.is_finite() && self.critic.is_finite()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PpoSample {
    pub state: Vec<f64>,
    pub action: usize,
    pub logp_old: f64,
    pub advantage: f64,
}

/// Clipped surrogate of one sample.
pub fn surrogate(ratio: f64, advantage: f64, eps: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - eps, 1.0 + eps) * advantage)
}

/// One plain ascent step on the mean clipped surrogate. Returns the
/// objective before the step, or `None` for a degenerate batch.
pub fn ppo_update(actor: &mut Mlp, batch: &[PpoSample], eps: f64, lr: f64) -> Option<f64> {
    let (objective, grad) = ppo_gradient(actor, batch, eps)?;
    actor.apply(&grad, lr);
    Some(objective)
}

/// Mean clipped surrogate and its gradient.
pub fn ppo_gradient(actor: &Mlp, batch: &[PpoSample], eps: f64) -> Option<(f64, Vec<f64>)> {
    if batch.len() < 2 {
        log::warn!("skipping policy update on a batch of {}", batch.len());
        return None;
    }
    let mut grad = actor.zeros_like();
    let mut objective = 0.0;
    let n = batch.len() as f64;
    for s in batch {
        let tr = actor.forward(&s.state);
        let p = softmax(tr.output());
        let ratio = (p[s.action].max(f64::MIN_POSITIVE).ln() - s.logp_old).exp();
        objective += surrogate(ratio, s.advantage, eps) / n;
        // The gradient flows only where the unclipped term is the minimum.
        let clipped = (s.advantage > 0.0 && ratio > 1.0 + eps) || (s.advantage < 0.0 && ratio < 1.0 - eps);
        if clipped {
            continue;
        }
        let scale = s.advantage * ratio / n;
        let d: Vec<f64> = p
            .iter()
            .enumerate()
            .map(|(j, pj)| scale * (if j == s.action { 1.0 } else { 0.0 } - pj))
            .collect();
        actor.backward(&tr, &d, &mut grad);
    }
    Some((objective, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TdSample {
    pub state: Vec<f64>,
    /// Fixed regression target (semi-gradient: not differentiated).
    pub target: f64,
}

/// One plain descent step on the mean squared TD error; returns the loss
/// before the step, or `None` for an empty batch.
pub fn critic_update(critic: &mut Mlp, batch: &[TdSample], lr: f64) -> Option<f64> {
    let (loss, grad) = critic_gradient(critic, batch)?;
    critic.apply(&grad, -lr);
    Some(loss)
}

/// Mean squared TD error and its gradient.
pub fn critic_gradient(critic: &Mlp, batch: &[TdSample]) -> Option<(f64, Vec<f64>)> {
    if batch.is_empty() {
        log::warn!("skipping critic update on an empty batch");
        return None;
    }
    let n = batch.len() as f64;
    let mut grad = critic.zeros_like();
    let mut loss = 0.0;
    for s in batch {
        let tr = critic.forward(&s.state);
        let err = tr.output()[0] - s.target;
        loss += 0.5 * err * err / n;
        if err != 0.0 {
            critic.backward(&tr, &[err / n], &mut grad);
        }
    }
    Some((loss, grad))
}

/// Serialized policy plus what is needed to interpret it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub episode: usize,
    pub seed: u64,
    pub state_norms: Vec<f64>,
    pub policy: Policy,
}

impl Checkpoint {
    pub fn new(policy: Policy, episode: usize, seed: u64) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            episode,
            seed,
            state_norms: STATE_NORMS.to_vec(),
            policy,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string(self)?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    /// Loads and checks the layout against the configured network.
    pub fn load(path: &Path, cfg: &RlConfig, inputs: usize) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let c: Checkpoint = serde_json::from_str(&s)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        c.check(cfg, inputs)?;
        Ok(c)
    }

    pub fn check(&self, cfg: &RlConfig, inputs: usize) -> Result<()> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {}", self.version)));
        }
        let mut want = vec![inputs];
        want.extend(&cfg.hidden);
        want.push(cfg.actions);
        let got = self.policy.actor.dims();
        if got != want {
            return Err(Error::Checkpoint(format!("actor dims {got:?} do not match configured {want:?}")));
        }
        *want.last_mut().expect("non-empty") = 1;
        let got = self.policy.critic.dims();
        if got != want {
            return Err(Error::Checkpoint(format!("critic dims {got:?} do not match configured {want:?}")));
        }
        if self.state_norms != STATE_NORMS {
            return Err(Error::Checkpoint("state normalization constants differ".into()));
        }
        if !self.policy.is_finite() {
            return Err(Error::Checkpoint("non-finite parameters".into()));
        }
        Ok(())
    }
}
