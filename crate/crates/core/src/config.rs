//! Experiment configuration.
//!
//! The on-disk format is TOML (`key = value` grouped into sections). Every
//! knob has a default, so an empty file is a valid configuration. The shipped
//! `configs/default.toml` lists all keys with their defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::media::{Profile, ProfileParams};

/// Encoding / streaming scheme under test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "CBR_L")]
    CbrL,
    #[serde(rename = "CBR_S")]
    CbrS,
    #[serde(rename = "KEY_MIN")]
    KeyMin,
    #[serde(rename = "PDSTREAM")]
    PdStream,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::CbrL => "CBR_L",
            Mode::CbrS => "CBR_S",
            Mode::KeyMin => "KEY_MIN",
            Mode::PdStream => "PDSTREAM",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "CBR_L" => Ok(Mode::CbrL),
            "CBR_S" => Ok(Mode::CbrS),
            "KEY_MIN" => Ok(Mode::KeyMin),
            "PDSTREAM" => Ok(Mode::PdStream),
            other => Err(Error::Config(format!("unknown mode '{other}'"))),
        }
    }
}

/// How the overall target bitrate evolves during a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RatePolicy {
    #[serde(rename = "FIXED")]
    Fixed,
    #[serde(rename = "GCC")]
    Gcc,
    #[serde(rename = "RL")]
    Rl,
}

impl RatePolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            RatePolicy::Fixed => "FIXED",
            RatePolicy::Gcc => "GCC",
            RatePolicy::Rl => "RL",
        }
    }
}

impl std::str::FromStr for RatePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "FIXED" => Ok(RatePolicy::Fixed),
            "GCC" => Ok(RatePolicy::Gcc),
            "RL" => Ok(RatePolicy::Rl),
            other => Err(Error::Config(format!("unknown rate policy '{other}'"))),
        }
    }
}

/// What happens to stream-1 captures skipped while a keyframe drains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipPolicy {
    /// Skipped captures are never encoded on stream 1.
    Drop,
}

/// When the baseline pacer applies its burst multiplier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BurstPolicy {
    /// Only while more than one tick of budget is queued.
    Backlogged,
    /// On every tick.
    Always,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub policy: RatePolicy,
    pub seed: u64,
    /// Simulated duration in seconds.
    pub duration_s: f64,
    /// Initial (and, for FIXED, permanent) target bitrate.
    pub bitrate_bps: f64,
    /// Policy checkpoint used when `policy = "RL"`.
    pub checkpoint: Option<PathBuf>,
    /// Dump per-tick pacer state into events.csv.
    pub dump_pacer: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::PdStream,
            policy: RatePolicy::Fixed,
            seed: 1,
            duration_s: 60.0,
            bitrate_bps: 1_500_000.0,
            checkpoint: None,
            dump_pacer: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContentConfig {
    pub profile: Profile,
    /// Import a content trace instead of synthesizing one.
    pub trace: Option<PathBuf>,
    pub fps: u32,
    /// Overrides the built-in profile constants.
    pub params: Option<ProfileParams>,
    /// Exponent of the gap SAD model s(i, g) = s(i, 1) * g^rho.
    pub gap_rho: f64,
}

impl Default for ContentConfig {
    fn default() -> Self {
        Self {
            profile: Profile::Street,
            trace: None,
            fps: 30,
            params: None,
            gap_rho: 0.75,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Bandwidth trace CSV. When absent the link is fixed at
    /// `fixed_bw_factor` times the initial target bitrate.
    pub trace: Option<PathBuf>,
    pub fixed_bw_factor: f64,
    /// Propagation delay used when the trace has no `prop_ms` column.
    pub prop_delay_ms: f64,
    /// Loss rate used when the trace has no `loss_rate` column.
    pub loss_rate: f64,
    /// Drop-tail limit expressed as milliseconds of queued data.
    pub queue_cap_ms: f64,
    /// Start offset into the trace.
    pub trace_offset_ms: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            trace: None,
            fixed_bw_factor: 1.1,
            prop_delay_ms: 0.0,
            loss_rate: 0.0,
            queue_cap_ms: 300.0,
            trace_offset_ms: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Effective complexity multiplier for keyframes.
    pub kappa: f64,
    pub keyframe_period_s: f64,
    /// Trailing window of the loose CBR budget.
    pub cbr_l_window_s: f64,
    /// Feedback gain applied to the windowed budget error.
    pub cbr_l_gain: f64,
    /// Per-frame size tolerance of strict CBR.
    pub cbr_s_tolerance: f64,
    pub q_min: f64,
    pub q_max: f64,
    /// Ground-truth R-Q coefficients of the simulated codec.
    pub true_alpha1: f64,
    pub true_alpha2: f64,
    /// Initial coefficients of the encoder's online R-Q model.
    pub init_alpha1: f64,
    pub init_alpha2: f64,
    /// Log-normal sigma of actual frame size around the R-Q prediction.
    pub size_noise: f64,
    pub rq_window: usize,
    pub rq_forgetting: f64,
    /// Frames between SAD->SATD cubic refits.
    pub sad_refit_frames: usize,
    pub encode_base_ms: f64,
    pub encode_key_extra_ms: f64,
    pub mtu_bytes: usize,
    pub header_bytes: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            kappa: 7.0,
            keyframe_period_s: 2.0,
            cbr_l_window_s: 1.0,
            cbr_l_gain: 0.5,
            cbr_s_tolerance: 0.02,
            q_min: 0.625,
            q_max: 0.625 * 2f64.powf(51.0 / 6.0),
            true_alpha1: 6000.0,
            true_alpha2: 40000.0,
            init_alpha1: 5000.0,
            init_alpha2: 30000.0,
            size_noise: 0.05,
            rq_window: 64,
            rq_forgetting: 0.95,
            sad_refit_frames: 300,
            encode_base_ms: 4.0,
            encode_key_extra_ms: 2.0,
            mtu_bytes: 1200,
            header_bytes: 12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DualConfig {
    /// Deactivate once the latest stream-1 delta is within theta x average.
    pub theta: f64,
    /// EWMA half-life of the average delta size.
    pub avg_half_life_s: f64,
    pub s1_skip_policy: SkipPolicy,
}

impl Default for DualConfig {
    fn default() -> Self {
        Self {
            theta: 1.2,
            avg_half_life_s: 2.0,
            s1_skip_policy: SkipPolicy::Drop,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AllocatorConfig {
    /// Upper bound factor on the dual-stream duration: T <= 1/(eta f_k).
    pub eta: f64,
}

impl Default for AllocatorConfig {
    fn default() -> Self {
        Self { eta: 5.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PacerConfig {
    pub tick_ms: f64,
    pub burst_multiplier: f64,
    pub burst_policy: BurstPolicy,
}

impl Default for PacerConfig {
    fn default() -> Self {
        Self {
            tick_ms: 5.0,
            burst_multiplier: 2.5,
            burst_policy: BurstPolicy::Backlogged,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReceiverConfig {
    pub min_wait_ms: f64,
    pub max_wait_ms: f64,
    pub jitter_weight: f64,
    pub jitter_sigmas: f64,
    pub decode_key_ms: f64,
    pub decode_delta_ms: f64,
    pub stall_fps: f64,
    /// PSNR proxy at QP index 0.
    pub psnr_base_db: f64,
    pub psnr_per_qp: f64,
    pub degraded_penalty_db: f64,
}

impl Default for ReceiverConfig {
    fn default() -> Self {
        Self {
            min_wait_ms: 0.0,
            max_wait_ms: 500.0,
            jitter_weight: 0.05,
            jitter_sigmas: 3.0,
            decode_key_ms: 5.0,
            decode_delta_ms: 3.0,
            stall_fps: 12.0,
            psnr_base_db: 55.0,
            psnr_per_qp: 0.89,
            degraded_penalty_db: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RateConfig {
    /// Feedback / decision interval (the reward time unit).
    pub interval_ms: f64,
    pub min_bps: f64,
    pub max_bps: f64,
    pub gcc_interval_ms: f64,
    /// Smoothed queuing-delay gradient (ms per second) that signals overuse.
    pub gcc_overuse_ms_per_s: f64,
    pub gcc_smoothing: f64,
    pub gcc_increase: f64,
    pub gcc_decrease: f64,
    pub gcc_loss_threshold: f64,
}

impl Default for RateConfig {
    fn default() -> Self {
        Self {
            interval_ms: 100.0,
            min_bps: 300_000.0,
            max_bps: 4_000_000.0,
            gcc_interval_ms: 500.0,
            gcc_overuse_ms_per_s: 20.0,
            gcc_smoothing: 0.3,
            gcc_increase: 1.05,
            gcc_decrease: 0.85,
            gcc_loss_threshold: 0.10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlConfig {
    pub hidden: Vec<usize>,
    pub leaky_slope: f64,
    pub actions: usize,
    pub action_min_bps: f64,
    pub action_max_bps: f64,
    /// Reward weights w1..w5 for bitrate, FPS, QP, delay and stall.
    pub weights: [f64; 5],
    pub gamma: f64,
    pub horizon_s: f64,
    pub clip_eps: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub ppo_epochs: usize,
    pub rollouts_per_episode: usize,
    pub episode_s: f64,
    pub history_s: f64,
    pub checkpoint_every: usize,
    pub train_fraction: f64,
    pub normalize_advantages: bool,
    /// Scale applied to rewards before they reach the critic.
    pub value_scale: f64,
    pub optimizer: Optimizer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 64, 32],
            leaky_slope: 0.01,
            actions: 17,
            action_min_bps: 300_000.0,
            action_max_bps: 4_000_000.0,
            weights: [1e-5, 1.0, 1.0, 200.0, 4000.0],
            gamma: 0.98,
            horizon_s: 2.0,
            clip_eps: 0.1,
            actor_lr: 1e-4,
            critic_lr: 1e-3,
            ppo_epochs: 4,
            rollouts_per_episode: 4,
            episode_s: 20.0,
            history_s: 2.0,
            checkpoint_every: 10,
            train_fraction: 0.75,
            normalize_advantages: true,
            value_scale: 0.01,
            optimizer: Optimizer::Sgd,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run: RunConfig,
    pub content: ContentConfig,
    pub network: NetworkConfig,
    pub encoder: EncoderConfig,
    pub dual: DualConfig,
    pub allocator: AllocatorConfig,
    pub pacer: PacerConfig,
    pub receiver: ReceiverConfig,
    pub rate: RateConfig,
    pub rl: RlConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn profile_params(&self) -> ProfileParams {
        self.content
            .params
            .clone()
            .unwrap_or_else(|| self.content.profile.params())
    }

    /// Short stable digest of the canonical serialized configuration.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml_string().as_bytes());
        hex::encode(&digest[..8])
    }

    pub fn validate(&self) -> Result<()> {
        fn check(ok: bool, what: &str) -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(what.to_string()))
            }
        }
        let r = &self.run;
        check(r.duration_s > 0.0, "run.duration_s must be > 0")?;
        check(r.bitrate_bps > 0.0, "run.bitrate_bps must be > 0")?;
        check(
            (1..=120).contains(&self.content.fps),
            "content.fps must be in [1, 120]",
        )?;
        check(self.content.gap_rho > 0.0, "content.gap_rho must be > 0")?;
        let n = &self.network;
        check(n.fixed_bw_factor > 0.0, "network.fixed_bw_factor must be > 0")?;
        check(n.prop_delay_ms >= 0.0, "network.prop_delay_ms must be >= 0")?;
        check(
            (0.0..=0.5).contains(&n.loss_rate),
            "network.loss_rate must be in [0, 0.5]",
        )?;
        check(n.queue_cap_ms > 0.0, "network.queue_cap_ms must be > 0")?;
        let e = &self.encoder;
        check(e.kappa >= 1.0, "encoder.kappa must be >= 1")?;
        check(
            e.keyframe_period_s > 0.0,
            "encoder.keyframe_period_s must be > 0",
        )?;
        check(
            e.q_min > 0.0 && e.q_max > e.q_min,
            "encoder quantizer range must satisfy 0 < q_min < q_max",
        )?;
        check(
            e.true_alpha1 >= 0.0 && e.true_alpha2 >= 0.0 && e.true_alpha1 + e.true_alpha2 > 0.0,
            "encoder.true_alpha* must be non-negative and not both zero",
        )?;
        check(
            e.init_alpha1 >= 0.0 && e.init_alpha2 >= 0.0 && e.init_alpha1 + e.init_alpha2 > 0.0,
            "encoder.init_alpha* must be non-negative and not both zero",
        )?;
        check(e.mtu_bytes > 0, "encoder.mtu_bytes must be > 0")?;
        check(e.rq_window >= 2, "encoder.rq_window must be >= 2")?;
        check(
            e.rq_forgetting > 0.0 && e.rq_forgetting <= 1.0,
            "encoder.rq_forgetting must be in (0, 1]",
        )?;
        check(e.sad_refit_frames >= 8, "encoder.sad_refit_frames must be >= 8")?;
        check(self.dual.theta >= 1.0, "dual.theta must be >= 1")?;
        check(self.dual.avg_half_life_s > 0.0, "dual.avg_half_life_s must be > 0")?;
        check(self.allocator.eta > 0.0, "allocator.eta must be > 0")?;
        check(self.pacer.tick_ms > 0.0, "pacer.tick_ms must be > 0")?;
        check(
            self.pacer.burst_multiplier >= 1.0,
            "pacer.burst_multiplier must be >= 1",
        )?;
        let rc = &self.receiver;
        check(
            rc.min_wait_ms >= 0.0 && rc.max_wait_ms >= rc.min_wait_ms,
            "receiver wait bounds must satisfy 0 <= min <= max",
        )?;
        check(
            rc.jitter_weight > 0.0 && rc.jitter_weight <= 1.0,
            "receiver.jitter_weight must be in (0, 1]",
        )?;
        let rt = &self.rate;
        check(rt.interval_ms > 0.0, "rate.interval_ms must be > 0")?;
        check(
            rt.min_bps > 0.0 && rt.max_bps >= rt.min_bps,
            "rate bounds must satisfy 0 < min <= max",
        )?;
        let rl = &self.rl;
        check(!rl.hidden.is_empty(), "rl.hidden must list at least one layer")?;
        check(rl.actions >= 2, "rl.actions must be >= 2")?;
        check(
            rl.action_min_bps > 0.0 && rl.action_max_bps > rl.action_min_bps,
            "rl action grid bounds invalid",
        )?;
        check(
            rl.weights.iter().all(|w| *w > 0.0),
            "rl.weights must all be positive",
        )?;
        check((0.0..=1.0).contains(&rl.gamma), "rl.gamma must be in [0, 1]")?;
        check(
            rl.clip_eps > 0.0 && rl.clip_eps < 1.0,
            "rl.clip_eps must be in (0, 1)",
        )?;
        check(
            rl.train_fraction > 0.0 && rl.train_fraction < 1.0,
            "rl.train_fraction must be in (0, 1)",
        )?;
        check(rl.rollouts_per_episode >= 1, "rl.rollouts_per_episode must be >= 1")?;
        if r.policy == RatePolicy::Rl && r.checkpoint.is_none() {
            return Err(Error::Config(
                "policy RL requires run.checkpoint".to_string(),
            ));
        }
        Ok(())
    }
}
