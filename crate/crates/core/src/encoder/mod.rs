//! Analytic video encoder.
//!
//! Frame sizes come from a hidden "true" R-Q curve with log-normal noise; the
//! encoder only sees its own online [`RqModel`], refitted after every frame,
//! and picks quantizers from a 52-entry table.

mod cubic;
mod predict;
mod rq;

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use cubic::{fit_sad_cubic, satd_from_sad, SadCubicModel, SATD_FLOOR};
pub use predict::{predict_complexity_linear, ComplexityPrediction, ComplexityPredictor};
pub use rq::{
    rq_invert, rq_invert_clamped, rq_required_bits, QuantTable, RqModel, RqObservation,
    QUANT_STEPS,
};

use crate::config::EncoderConfig;
use crate::error::Result;
use crate::media::{EncodedFrame, FrameType, StreamId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RateMode {
    /// Windowed average budget.
    CbrL,
    /// Every frame at the per-frame budget.
    CbrS,
    /// Keyframes only at scene changes.
    KeyMin,
}

#[derive(Debug, Clone)]
pub struct EncoderMode {
    pub mode: RateMode,
    pub keyframe_period_s: f64,
    pub quant_table: QuantTable,
}

/// How the size of a frame is decided.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target {
    /// The mode's own rate control.
    RateControl,
    /// Best table quantizer whose predicted size fits the budget.
    Bits(f64),
    /// Fixed table entry.
    QuantIndex(usize),
}

#[derive(Debug, Clone, Copy)]
pub struct FrameRequest {
    pub stream: StreamId,
    pub frame_type: FrameType,
    pub target: Target,
    pub capture_idx: usize,
    pub capture_ts: f64,
    /// Cost of coding the frame against its reference.
    pub delta_complexity: f64,
    /// Cost of coding the frame intra.
    pub intra_complexity: f64,
    /// Capture ticks between this frame and its reference.
    pub gap: usize,
    /// SAD to the reference.
    pub sad_in: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSnapshot {
    pub alpha1: f64,
    pub alpha2: f64,
    pub betas: Option<[f64; 4]>,
    pub fit_rms: Option<f64>,
}

#[derive(Clone)]
pub struct Encoder {
    cfg: EncoderConfig,
    mode: EncoderMode,
    rq: RqModel,
    rng: ChaCha8Rng,
    noise: Normal<f64>,
    window: VecDeque<(f64, u64)>,
    target_bps: f64,
    fps: u32,
    first_ts: Option<f64>,
    last_key_ts: Option<f64>,
    next_frame_id: u64,
    sad_samples: VecDeque<(f64, f64)>,
    sad_model: Option<SadCubicModel>,
    frames_since_refit: usize,
    predictor: ComplexityPredictor,
}

const SAD_SAMPLE_CAP: usize = 900;

impl Encoder {
    pub fn new(cfg: &EncoderConfig, mode: RateMode, target_bps: f64, fps: u32, seed: u64) -> Result<Self> {
        let quant_table = QuantTable::geometric(cfg.q_min, cfg.q_max)?;
        Ok(Self {
            rq: RqModel::with_window(cfg.init_alpha1, cfg.init_alpha2, cfg.rq_window, cfg.rq_forgetting),
            mode: EncoderMode {
                mode,
                keyframe_period_s: cfg.keyframe_period_s,
                quant_table,
            },
            cfg: cfg.clone(),
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_e5c0_de00_0001),
            noise: Normal::new(0.0, cfg.size_noise.max(0.0)).expect("finite sigma"),
            window: VecDeque::new(),
            target_bps,
            fps,
            first_ts: None,
            last_key_ts: None,
            next_frame_id: 0,
            sad_samples: VecDeque::new(),
            sad_model: None,
            frames_since_refit: 0,
            predictor: ComplexityPredictor::new(8),
        })
    }

    pub fn table(&self) -> &QuantTable {
        &self.mode.quant_table
    }

    pub fn mode(&self) -> &EncoderMode {
        &self.mode
    }

    pub fn rq_model(&self) -> &RqModel {
        &self.rq
    }

    pub fn sad_model(&self) -> Option<&SadCubicModel> {
        self.sad_model.as_ref()
    }

    pub fn predictor(&self) -> &ComplexityPredictor {
        &self.predictor
    }

    pub fn target_bps(&self) -> f64 {
        self.target_bps
    }

    pub fn set_target_bps(&mut self, bps: f64) {
        self.target_bps = bps;
    }

    pub fn snapshot(&self) -> ModelSnapshot {
        ModelSnapshot {
            alpha1: self.rq.alpha1,
            alpha2: self.rq.alpha2,
            betas: self.sad_model.as_ref().map(|m| m.betas),
            fit_rms: self.sad_model.as_ref().map(|m| m.fit_rms),
        }
    }

    /// Average keyframe rate implied by the mode.
    pub fn keyframe_rate(&self) -> f64 {
        1.0 / self.mode.keyframe_period_s
    }

    /// Whether the mode's own policy wants a keyframe at this capture.
    pub fn key_due(&self, capture_ts: f64, scene_start: bool) -> bool {
        let Some(last) = self.last_key_ts else {
            return true;
        };
        match self.mode.mode {
            RateMode::KeyMin => scene_start,
            RateMode::CbrL | RateMode::CbrS => {
                let half_frame = 500.0 / self.fps as f64;
                scene_start || capture_ts - last >= self.mode.keyframe_period_s * 1000.0 - half_frame
            }
        }
    }

    fn true_bits(&self, q: f64, c: f64) -> f64 {
        c * (self.cfg.true_alpha1 / q + self.cfg.true_alpha2 / (q * q))
    }

    fn window_spent(&mut self, now: f64) -> f64 {
        let horizon = self.cfg.cbr_l_window_s * 1000.0;
        while let Some(&(ts, _)) = self.window.front() {
            if ts <= now - horizon {
                self.window.pop_front();
            } else {
                break;
            }
        }
        self.window.iter().map(|(_, b)| *b as f64).sum()
    }

    /// Per-frame delta budget of the loose CBR controller.
    fn loose_delta_budget(&mut self, now: f64) -> f64 {
        let f = self.fps as f64;
        let per_frame = self.target_bps / f;
        let key_rate = match self.mode.mode {
            RateMode::KeyMin => 0.0,
            _ => self.keyframe_rate(),
        };
        let base = per_frame / (1.0 + (self.cfg.kappa - 1.0) * key_rate / f);
        let w = self.cfg.cbr_l_window_s;
        let first = self.first_ts.unwrap_or(now);
        let span = (w).min((now - first) / 1000.0 + 1.0 / f);
        let expected = self.target_bps * (span - 1.0 / f).max(0.0);
        let spent = self.window_spent(now);
        let correction = self.cfg.cbr_l_gain * (spent - expected) / (f * w);
        (base - correction).clamp(0.2 * base, 3.0 * base)
    }

    /// Table index whose predicted size is closest (in log) to `bits`.
    fn nearest_index_for(&self, bits: f64, c: f64) -> usize {
        let t = &self.mode.quant_table;
        let mut best = (0usize, f64::INFINITY);
        for i in 0..t.len() {
            let d = (self.rq.bits(t.q(i), c) / bits).ln().abs();
            if d < best.1 {
                best = (i, d);
            }
        }
        best.0
    }

    /// Smallest table index whose predicted size does not exceed `bits`.
    fn fitting_index_for(&self, bits: f64, c: f64) -> (usize, bool) {
        let t = &self.mode.quant_table;
        match (0..t.len()).find(|&i| self.rq.bits(t.q(i), c) <= bits) {
            Some(0) => (0, self.rq.bits(t.q(0), c) < 0.5 * bits),
            Some(i) => (i, false),
            None => (t.len() - 1, true),
        }
    }

    fn sample_size(&mut self, q: f64, c: f64) -> u64 {
        let noise = self.noise.sample(&mut self.rng).exp();
        byte_align(self.true_bits(q, c) * noise)
    }

    /// Encodes one frame and updates all online models.
    pub fn encode(&mut self, req: FrameRequest) -> EncodedFrame {
        let now = req.capture_ts;
        self.first_ts.get_or_insert(now);
        let c_eff = match req.frame_type {
            FrameType::Key => req.intra_complexity,
            FrameType::Delta => req.delta_complexity.min(req.intra_complexity),
        };
        let table = self.mode.quant_table.clone();
        let (quant_step, qp_index, size_bits, saturated) = match req.target {
            Target::QuantIndex(i) => {
                let i = i.min(table.len() - 1);
                let q = table.q(i);
                (q, i as f64, self.sample_size(q, c_eff), false)
            }
            Target::Bits(bits) => {
                let (i, sat) = self.fitting_index_for(bits.max(8.0), c_eff);
                let q = table.q(i);
                (q, i as f64, self.sample_size(q, c_eff), sat)
            }
            Target::RateControl => match self.mode.mode {
                RateMode::CbrS => {
                    // Strict CBR lands every frame on the per-frame budget by
                    // adapting its quantizer inside the frame.
                    let budget = self.target_bps / self.fps as f64;
                    let q_exact = 1.0 / {
                        let b = c_eff * self.cfg.true_alpha1;
                        let a = c_eff * self.cfg.true_alpha2;
                        2.0 * budget / (b + (b * b + 4.0 * a * budget).sqrt())
                    };
                    if q_exact < table.min() || q_exact > table.max() {
                        let q = q_exact.clamp(table.min(), table.max());
                        (q, table.continuous_index(q), self.sample_size(q, c_eff), true)
                    } else {
                        let tol = 0.75 * self.cfg.cbr_s_tolerance;
                        let jitter = 1.0 + self.rng.random_range(-tol..=tol);
                        (
                            q_exact,
                            table.continuous_index(q_exact),
                            byte_align(budget * jitter),
                            false,
                        )
                    }
                }
                RateMode::CbrL | RateMode::KeyMin => {
                    let budget = self.loose_delta_budget(now);
                    let c_delta = req.delta_complexity.min(req.intra_complexity);
                    let i = self.nearest_index_for(budget, c_delta);
                    let q = table.q(i);
                    (q, i as f64, self.sample_size(q, c_eff), false)
                }
            },
        };

        self.rq.refit(RqObservation {
            q: quant_step,
            c: c_eff,
            bits: size_bits as f64,
        });
        self.window.push_back((now, size_bits));
        if req.frame_type == FrameType::Key {
            self.last_key_ts = Some(now);
        } else if req.gap == 1 {
            self.predictor.observe(req.capture_idx, req.delta_complexity, self.fps);
            self.observe_sad(req.sad_in, req.delta_complexity);
        }

        let encode_ms = self.cfg.encode_base_ms
            + if req.frame_type == FrameType::Key {
                self.cfg.encode_key_extra_ms
            } else {
                0.0
            };
        let frame = EncodedFrame {
            frame_id: self.next_frame_id,
            capture_idx: req.capture_idx,
            stream_id: req.stream,
            frame_type: req.frame_type,
            size_bits,
            quant_step,
            qp_index,
            capture_ts: now,
            encode_done_ts: now + encode_ms,
            saturated,
        };
        self.next_frame_id += 1;
        frame
    }

    fn observe_sad(&mut self, sad: f64, satd: f64) {
        if self.sad_samples.len() == SAD_SAMPLE_CAP {
            self.sad_samples.pop_front();
        }
        self.sad_samples.push_back((sad, satd));
        self.frames_since_refit += 1;
        let due = self.sad_model.is_none() || self.frames_since_refit >= self.cfg.sad_refit_frames;
        if due && self.sad_samples.len() >= 8 {
            let samples: Vec<(f64, f64)> = self.sad_samples.iter().copied().collect();
            if let Ok(m) = fit_sad_cubic(&samples) {
                self.sad_model = Some(m);
                self.frames_since_refit = 0;
            }
        }
    }
}

fn byte_align(bits: f64) -> u64 {
    let bytes = (bits / 8.0).ceil().max(1.0);
    bytes as u64 * 8
}
