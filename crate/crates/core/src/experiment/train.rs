//! Policy training: parallel rollouts over a seeded train split of trace
//! segments, then clipped-surrogate and TD updates.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{ExperimentConfig, Optimizer, RatePolicy};
use crate::error::{Error, Result};
use crate::netsim::BandwidthTrace;
use crate::par::{self, Execution};
use crate::ratecontrol::nn::Adam;
use crate::ratecontrol::{critic_gradient, ppo_gradient, returns, Checkpoint, Policy, PpoSample, TdSample};
use crate::sim::{simulate, Controller, Trajectory};

use super::{load_content, load_network, state_dim};

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub episodes: usize,
    pub out: PathBuf,
    pub resume: Option<PathBuf>,
    pub exec: Execution,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    /// `(episode, mean reward per decision)` for the episodes run now.
    pub curve: Vec<(usize, f64)>,
    pub last_checkpoint: PathBuf,
    pub train_segments: Vec<usize>,
    pub test_segments: Vec<usize>,
}

/// Seeded shuffle of `n` segment indices into train and test parts. A
/// single segment serves both.
pub fn split_segments(n: usize, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    if n <= 1 {
        return (idx.clone(), idx);
    }
    let k = ((n as f64 * train_fraction).round() as usize).clamp(1, n - 1);
    let test = idx.split_off(k);
    (idx, test)
}

struct Rollout {
    traj: Trajectory,
    mean_reward: f64,
}

fn rollout(cfg: &ExperimentConfig, policy: &Policy, trace: BandwidthTrace, seed: u64) -> Result<Rollout> {
    let mut c = cfg.clone();
    c.run.seed = seed;
    c.run.duration_s = cfg.rl.episode_s;
    c.run.policy = RatePolicy::Rl;
    let content = load_content(&c, c.run.duration_s, seed)?;
    let out = simulate(&c, &content, trace, Controller::Rl { policy: policy.clone(), greedy: false, seed })?;
    let mut traj = out.trajectory;
    let n = traj.rewards.len();
    traj.states.truncate(n + 1);
    let mean_reward = crate::analytics::mean(&traj.rewards);
    Ok(Rollout { traj, mean_reward })
}

fn diverged(what: &str, v: f64, episode: usize) -> Error {
    Error::Divergence(format!("{what} = {v} at episode {episode}"))
}

/// Trains from scratch or from `opts.resume`, writing `curve.csv` and
/// checkpoints into `opts.out`.
pub fn train(cfg: &ExperimentConfig, opts: &TrainOptions) -> Result<TrainSummary> {
    cfg.validate()?;
    let rl = &cfg.rl;
    let out = &opts.out;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let inputs = state_dim(cfg);

    let (mut policy, first_episode) = match &opts.resume {
        Some(p) => {
            let ck = Checkpoint::load(p, rl, inputs)?;
            (ck.policy, ck.episode + 1)
        }
        None => (Policy::new(rl, inputs, cfg.run.seed), 0),
    };

    let source = load_network(cfg)?;
    let seg_ms = rl.episode_s * 1000.0;
    let n_seg = ((source.span_ms() / seg_ms).floor() as usize).max(1);
    let (train_idx, test_idx) = split_segments(n_seg, rl.train_fraction, cfg.run.seed);
    let segments: Vec<BandwidthTrace> = (0..n_seg)
        .map(|i| if n_seg == 1 { Ok(source.clone()) } else { source.slice(i as f64 * seg_ms, seg_ms) })
        .collect::<Result<_>>()?;

    let curve_path = out.join("curve.csv");
    let fresh = opts.resume.is_none() || !curve_path.exists();
    let mut curve_file = std::fs::OpenOptions::new()
        .create(true)
        .append(!fresh)
        .write(true)
        .truncate(fresh)
        .open(&curve_path)
        .map_err(|e| Error::io(&curve_path, e))?;
    let io = |e| Error::io(&curve_path, e);
    if fresh {
        writeln!(curve_file, "# config_hash={} seed={}", cfg.hash(), cfg.run.seed).map_err(io)?;
        writeln!(curve_file, "episode,mean_reward,mean_action_bps,objective,critic_loss").map_err(io)?;
    }

    // Moment estimates are not checkpointed; a resumed run starts them afresh.
    let mut actor_opt = Adam::new(policy.actor.param_count(), rl.actor_lr);
    let mut critic_opt = Adam::new(policy.critic.param_count(), rl.critic_lr);
    let horizon = ((rl.horizon_s * 1000.0) / cfg.rate.interval_ms).round().max(1.0) as usize;
    let mut curve = Vec::new();
    let mut last_checkpoint = out.join("latest.json");
    for episode in first_episode..first_episode + opts.episodes {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.run.seed ^ (episode as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let jobs: Vec<(usize, u64)> = (0..rl.rollouts_per_episode)
            .map(|_| (train_idx[rng.random_range(0..train_idx.len())], rng.random()))
            .collect();
        let rollouts = par::map(opts.exec, &jobs, |(seg, seed)| rollout(cfg, &policy, segments[*seg].clone(), *seed))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;

        let mut ppo = Vec::new();
        let mut td = Vec::new();
        for r in &rollouts {
            let t = &r.traj;
            let scaled: Vec<f64> = t.rewards.iter().map(|x| x * rl.value_scale).collect();
            let g = returns(&scaled, rl.gamma, horizon);
            for i in 0..t.rewards.len() {
                let v = policy.value(&t.states[i])?;
                let next = match t.states.get(i + 1) {
                    Some(s) if i + 1 < t.rewards.len() => policy.value(s)?,
                    _ => 0.0,
                };
                td.push(TdSample { state: t.states[i].clone(), target: scaled[i] + rl.gamma * next });
                ppo.push(PpoSample {
                    state: t.states[i].clone(),
                    action: t.actions[i],
                    logp_old: t.logps[i],
                    advantage: g[i] - v,
                });
            }
        }
        if rl.normalize_advantages && ppo.len() > 1 {
            let a: Vec<f64> = ppo.iter().map(|s| s.advantage).collect();
            let (m, sd) = (crate::analytics::mean(&a), crate::analytics::std_dev(&a).max(1e-8));
            for s in &mut ppo {
                s.advantage = (s.advantage - m) / sd;
            }
        }

        let good = policy.clone();
        let mut objective = f64::NAN;
        let mut loss = f64::NAN;
        for _ in 0..rl.ppo_epochs {
            if let Some((o, g)) = ppo_gradient(&policy.actor, &ppo, rl.clip_eps) {
                objective = o;
                match rl.optimizer {
                    Optimizer::Sgd => policy.actor.apply(&g, rl.actor_lr),
                    Optimizer::Adam => policy.actor.apply(&actor_opt.step(&g), 1.0),
                }
            }
            if let Some((l, g)) = critic_gradient(&policy.critic, &td) {
                loss = l;
                match rl.optimizer {
                    Optimizer::Sgd => policy.critic.apply(&g, -rl.critic_lr),
                    Optimizer::Adam => policy.critic.apply(&critic_opt.step(&g), -1.0),
                }
            }
        }
        let mean_reward = crate::analytics::mean(&rollouts.iter().map(|r| r.mean_reward).collect::<Vec<_>>());
        let acts: Vec<f64> =
            rollouts.iter().flat_map(|r| r.traj.actions.iter().map(|a| policy.grid[*a])).collect();
        let mean_action = crate::analytics::mean(&acts);
        writeln!(curve_file, "{episode},{mean_reward},{mean_action},{objective},{loss}").map_err(io)?;

        let bad = [("mean reward", mean_reward), ("objective", objective), ("critic loss", loss)]
            .into_iter()
            .find(|(_, v)| !v.is_finite() && !(v.is_nan() && ppo.len() < 2));
        if bad.is_some() || !policy.is_finite() {
            let p = out.join("last_good.json");
            Checkpoint::new(good, episode.saturating_sub(1), cfg.run.seed).save(&p)?;
            let (what, v) = bad.unwrap_or(("network weights", f64::NAN));
            log::error!("training diverged; last good policy saved to {}", p.display());
            return Err(diverged(what, v, episode));
        }
        curve.push((episode, mean_reward));
        log::info!("episode {episode}: mean reward {mean_reward:.3}, mean action {mean_action:.0} bps");

        let last = episode + 1 == first_episode + opts.episodes;
        if rl.checkpoint_every > 0 && ((episode + 1) % rl.checkpoint_every == 0 || last) {
            let ck = Checkpoint::new(policy.clone(), episode, cfg.run.seed);
            ck.save(&out.join(format!("ckpt_{episode:05}.json")))?;
            ck.save(&out.join("latest.json"))?;
            last_checkpoint = out.join("latest.json");
        }
    }
    if rl.checkpoint_every == 0 {
        Checkpoint::new(policy, (first_episode + opts.episodes).saturating_sub(1), cfg.run.seed)
            .save(&last_checkpoint)?;
    }
    Ok(TrainSummary { curve, last_checkpoint, train_segments: train_idx, test_segments: test_idx })
}

/// Episode numbers recorded in a training curve file.
pub fn curve_episodes(path: &Path) -> Result<Vec<usize>> {
    let t = crate::analytics::Table::read(path)?;
    Ok(t.f64s("episode")?.into_iter().map(|e| e as usize).collect())
}
