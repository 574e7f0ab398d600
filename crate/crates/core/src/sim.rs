//! Discrete-event simulation of one sender/link/receiver session.
//!
//! Time is in milliseconds. Events at equal times are ordered by kind
//! (arrivals, then encoder output, captures, pacer ticks, rate decisions)
//! and then by insertion, so a run is fully determined by config and seed.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::allocator::{allocate, gap_sad, reallocate, AllocProblem, Allocation};
use crate::config::{ExperimentConfig, Mode, RatePolicy};
use crate::dualstream::{DirectiveTarget, DualStreamState, Phase, Transition};
use crate::encoder::{Encoder, FrameRequest, RateMode, Target};
use crate::error::{Error, Result};
use crate::media::{packetize, ContentTrace, EncodedFrame, FrameType, Packet, PriorityClass, ProfileParams, StreamId};
use crate::netsim::{BandwidthTrace, Link, LinkOutcome};
use crate::pacer::{Multiplier, PacerQueue};
use crate::ratecontrol::{
    reward, Gcc, GccFeedback, Policy, RewardMetrics, RewardWeights, StateHistory, StateSample,
};
use crate::receiver::{FrameMeta, FrameRecord, Receiver};

/// Extra simulated time after the last capture so in-flight frames land.
const DRAIN_MS: f64 = 3000.0;

#[derive(Debug, Clone, Serialize)]
pub struct EventRow {
    pub ts: f64,
    pub kind: &'static str,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct AllocRow {
    pub ts: f64,
    /// `keyframe`, `infeasible`, `no_reference` or `realloc`.
    pub status: &'static str,
    pub b: f64,
    pub r1: f64,
    pub allocation: Option<Allocation>,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct NetRow {
    pub ts: f64,
    pub bw_bps: f64,
    pub rtt_ms: f64,
    pub throughput_bps: f64,
    pub loss: f64,
    pub target_bps: f64,
    pub pacer_bytes: usize,
    pub dual_active: bool,
}

/// Samples collected by a learning policy during one run.
#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub logps: Vec<f64>,
    pub rewards: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// Who sets the target bitrate.
#[derive(Debug, Clone)]
pub enum Controller {
    Fixed,
    Gcc,
    Rl { policy: Policy, greedy: bool, seed: u64 },
}

impl Controller {
    pub fn policy(&self) -> RatePolicy {
        match self {
            Controller::Fixed => RatePolicy::Fixed,
            Controller::Gcc => RatePolicy::Gcc,
            Controller::Rl { .. } => RatePolicy::Rl,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub frames: Vec<FrameRecord>,
    pub events: Vec<EventRow>,
    pub allocs: Vec<AllocRow>,
    pub net: Vec<NetRow>,
    /// Rendered frames per 1 s window.
    pub fps_windows: Vec<usize>,
    pub trajectory: Trajectory,
    pub keyframes: usize,
    pub skips: u64,
}

#[derive(Debug)]
enum Kind {
    Arrival(Packet, f64),
    Loss(Packet, f64),
    Enqueue(Vec<Packet>),
    Capture(usize),
    Tick,
    Decision,
}

impl Kind {
    fn rank(&self) -> u8 {
        match self {
            Kind::Arrival(..) | Kind::Loss(..) => 0,
            Kind::Enqueue(_) => 1,
            Kind::Capture(_) => 2,
            Kind::Tick => 3,
            Kind::Decision => 4,
        }
    }
}

#[derive(Debug)]
struct Event {
    t: f64,
    rank: u8,
    seq: u64,
    kind: Kind,
}

impl PartialEq for Event {
    fn eq(&self, o: &Self) -> bool {
        self.cmp(o) == Ordering::Equal
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Event {
    // Reversed: BinaryHeap is a max-heap.
    fn cmp(&self, o: &Self) -> Ordering {
        o.t.total_cmp(&self.t)
            .then(o.rank.cmp(&self.rank))
            .then(o.seq.cmp(&self.seq))
    }
}

#[derive(Debug, Default, Clone, Copy)]
struct IntervalAcc {
    bytes_arrived: usize,
    pkts_lost: usize,
    pkts_done: usize,
    bits_encoded: u64,
}

struct RlState {
    policy: Policy,
    greedy: bool,
    rng: ChaCha8Rng,
}

struct DualRun {
    state: DualStreamState,
    s2: Option<Encoder>,
    q1_index: usize,
    s2_first_bits: f64,
}

pub struct Simulation<'a> {
    cfg: &'a ExperimentConfig,
    content: &'a ContentTrace,
    params: ProfileParams,
    heap: BinaryHeap<Event>,
    seq: u64,
    now: f64,
    end_capture_ms: f64,
    frame_interval: f64,

    s1: Encoder,
    dual: Option<DualRun>,
    pacer: PacerQueue,
    link: Link,
    receiver: Receiver,
    target_bps: f64,

    next_frame_id: u64,
    next_pkt_id: u64,
    last_s1_frame: Option<u64>,
    s1_awaiting_enqueue: bool,

    controller: Controller,
    gcc: Option<Gcc>,
    rl: Option<RlState>,
    history: StateHistory,
    weights: RewardWeights,
    acc: IntervalAcc,
    gcc_acc: IntervalAcc,
    last_gcc_rtt: f64,
    render_cursor: usize,
    recent_renders: VecDeque<f64>,
    last_e2e_ms: f64,
    last_qp: f64,
    dual_s1_bits: f64,
    dual_s2_bits: f64,

    out: SimOutput,
}

fn rate_mode(mode: Mode) -> RateMode {
    match mode {
        Mode::CbrL | Mode::PdStream => RateMode::CbrL,
        Mode::CbrS => RateMode::CbrS,
        Mode::KeyMin => RateMode::KeyMin,
    }
}

impl<'a> Simulation<'a> {
    pub fn new(
        cfg: &'a ExperimentConfig,
        content: &'a ContentTrace,
        trace: BandwidthTrace,
        controller: Controller,
    ) -> Result<Self> {
        let fps = cfg.content.fps;
        if content.fps_native != fps {
            return Err(Error::Config(format!(
                "content trace is {} fps, config asks for {fps}",
                content.fps_native
            )));
        }
        let captures = (cfg.run.duration_s * fps as f64).round() as usize;
        if captures > content.len() {
            return Err(Error::Config(format!(
                "content has {} frames, run needs {captures}",
                content.len()
            )));
        }
        let seed = cfg.run.seed;
        let b = cfg.run.bitrate_bps;
        let unit = cfg.run.mode == Mode::PdStream || matches!(controller, Controller::Rl { .. });
        let multiplier = if unit {
            Multiplier::Unit
        } else {
            Multiplier::Burst {
                factor: cfg.pacer.burst_multiplier,
                policy: cfg.pacer.burst_policy,
            }
        };
        let max_packet = cfg.encoder.mtu_bytes + cfg.encoder.header_bytes;
        let rl = match &controller {
            Controller::Rl { policy, greedy, seed } => Some(RlState {
                policy: policy.clone(),
                greedy: *greedy,
                rng: ChaCha8Rng::seed_from_u64(*seed),
            }),
            _ => None,
        };
        let history = StateHistory::from_config(&cfg.rl, &cfg.rate);
        if let Some(r) = &rl {
            if r.policy.inputs() != history.dim() {
                return Err(Error::Checkpoint(format!(
                    "policy takes {} inputs, state has {}",
                    r.policy.inputs(),
                    history.dim()
                )));
            }
        }
        let mut sim = Self {
            cfg,
            content,
            params: cfg.profile_params(),
            heap: BinaryHeap::new(),
            seq: 0,
            now: 0.0,
            end_capture_ms: captures as f64 * 1000.0 / fps as f64,
            frame_interval: 1000.0 / fps as f64,
            s1: Encoder::new(&cfg.encoder, rate_mode(cfg.run.mode), b, fps, seed)?,
            dual: (cfg.run.mode == Mode::PdStream).then(|| DualRun {
                state: DualStreamState::new(&cfg.dual),
                s2: None,
                q1_index: 0,
                s2_first_bits: 0.0,
            }),
            pacer: PacerQueue::new(b, multiplier, cfg.pacer.tick_ms, max_packet),
            link: Link::new(trace, cfg.network.queue_cap_ms, seed),
            receiver: Receiver::new(&cfg.receiver),
            target_bps: b,
            next_frame_id: 0,
            next_pkt_id: 0,
            last_s1_frame: None,
            s1_awaiting_enqueue: false,
            gcc: matches!(controller, Controller::Gcc).then(|| Gcc::new(&cfg.rate)),
            controller,
            rl,
            history,
            weights: RewardWeights::new(cfg.rl.weights)?,
            acc: IntervalAcc::default(),
            gcc_acc: IntervalAcc::default(),
            last_gcc_rtt: 0.0,
            render_cursor: 0,
            recent_renders: VecDeque::new(),
            last_e2e_ms: 0.0,
            last_qp: 0.0,
            dual_s1_bits: 0.0,
            dual_s2_bits: 0.0,
            out: SimOutput {
                frames: Vec::new(),
                events: Vec::new(),
                allocs: Vec::new(),
                net: Vec::new(),
                fps_windows: Vec::new(),
                trajectory: Trajectory::default(),
                keyframes: 0,
                skips: 0,
            },
        };
        for i in 0..captures {
            sim.push(i as f64 * sim.frame_interval, Kind::Capture(i));
        }
        let end = sim.end_capture_ms + DRAIN_MS;
        let tick = cfg.pacer.tick_ms;
        let mut t = 0.0;
        let mut k = 0u64;
        while t <= end {
            sim.push(t, Kind::Tick);
            k += 1;
            t = k as f64 * tick;
        }
        let step = cfg.rate.interval_ms;
        let mut k = 1u64;
        while (k as f64) * step <= sim.end_capture_ms {
            sim.push(k as f64 * step, Kind::Decision);
            k += 1;
        }
        Ok(sim)
    }

    fn push(&mut self, t: f64, kind: Kind) {
        self.seq += 1;
        self.heap.push(Event { t, rank: kind.rank(), seq: self.seq, kind });
    }

    fn log(&mut self, kind: &'static str, detail: String) {
        self.out.events.push(EventRow { ts: self.now, kind, detail });
    }

    pub fn run(mut self) -> Result<SimOutput> {
        while let Some(ev) = self.heap.pop() {
            self.now = ev.t;
            match ev.kind {
                Kind::Capture(i) => self.on_capture(i)?,
                Kind::Enqueue(pkts) => self.on_enqueue(pkts)?,
                Kind::Tick => self.on_tick(),
                Kind::Arrival(p, at) => {
                    self.acc.bytes_arrived += p.size_bytes;
                    self.acc.pkts_done += 1;
                    self.gcc_acc.pkts_done += 1;
                    if let Some(c) = self.receiver.assembler.on_packet(&p, at) {
                        self.receiver.on_complete(c);
                    }
                }
                Kind::Loss(p, at) => {
                    self.acc.pkts_lost += 1;
                    self.acc.pkts_done += 1;
                    self.gcc_acc.pkts_lost += 1;
                    self.gcc_acc.pkts_done += 1;
                    if let Some(c) = self.receiver.assembler.on_loss(&p, at) {
                        self.receiver.on_complete(c);
                    }
                }
                Kind::Decision => self.on_decision()?,
            }
        }
        self.out.fps_windows = self.receiver.finalize(self.end_capture_ms);
        self.out.skips = self.dual.as_ref().map(|d| d.state.skips).unwrap_or(0);
        self.out.frames = self.receiver.into_records();
        Ok(self.out)
    }

    fn request(&self, idx: usize, stream: StreamId, ft: FrameType, target: Target, gap: usize) -> Result<FrameRequest> {
        let rho = self.cfg.content.gap_rho;
        let (delta_c, sad_in) = if idx == 0 {
            (self.content.frames[0].satd_base, self.content.sad_median())
        } else {
            let gap = gap.min(idx);
            (
                self.content.satd_at_gap(idx, gap, rho, &self.params.satd_coeffs)?,
                self.content.sad_at_gap(idx, gap, rho)?,
            )
        };
        Ok(FrameRequest {
            stream,
            frame_type: ft,
            target,
            capture_idx: idx,
            capture_ts: self.now,
            delta_complexity: delta_c,
            intra_complexity: self.cfg.encoder.kappa * self.content.median_satd(),
            gap,
            sad_in,
        })
    }

    /// Stamps a global id, registers the frame at the receiver and schedules
    /// its packets for the pacer.
    fn emit(&mut self, mut f: EncodedFrame) -> EncodedFrame {
        f.frame_id = self.next_frame_id;
        self.next_frame_id += 1;
        let pkts = packetize(&f, self.cfg.encoder.mtu_bytes, self.cfg.encoder.header_bytes, self.next_pkt_id);
        self.next_pkt_id += pkts.len() as u64;
        self.receiver.assembler.register(FrameMeta {
            frame_id: f.frame_id,
            capture_idx: f.capture_idx,
            capture_ts: f.capture_ts,
            encode_done_ts: f.encode_done_ts,
            stream: f.stream_id,
            frame_type: f.frame_type,
            packets: pkts.len() as u32,
            qp_index: f.qp_index,
            size_bits: f.size_bits,
        });
        self.acc.bits_encoded += f.size_bits;
        if f.stream_id == StreamId::S1 {
            self.last_s1_frame = Some(f.frame_id);
            self.s1_awaiting_enqueue = true;
        }
        if f.frame_type == FrameType::Key {
            self.out.keyframes += 1;
        }
        self.push(f.encode_done_ts, Kind::Enqueue(pkts));
        f
    }

    fn s1_busy(&self) -> bool {
        self.s1_awaiting_enqueue
            || self
                .last_s1_frame
                .is_some_and(|id| self.pacer.holds_frame(PriorityClass::VideoS1, id))
    }

    fn on_capture(&mut self, idx: usize) -> Result<()> {
        let scene = self.content.starts_scene(idx);
        let key_due = self.s1.key_due(self.now, scene);
        if self.dual.is_none() {
            let ft = if key_due { FrameType::Key } else { FrameType::Delta };
            let req = self.request(idx, StreamId::S1, ft, Target::RateControl, 1)?;
            let f = self.s1.encode(req);
            self.emit(f);
            return Ok(());
        }
        self.capture_dual(idx, key_due)
    }

    fn capture_dual(&mut self, idx: usize, key_due: bool) -> Result<()> {
        let busy = self.s1_busy();
        let dual = self.dual.as_mut().expect("dual mode");
        let (directives, transition) = dual.state.on_frame_captured(self.now, key_due, busy);
        match transition {
            Transition::Deactivated => {
                self.pacer.set_dual_gate(false);
                self.log("deactivate", "time cap".into());
            }
            Transition::Skipped => self.log("skip", format!("capture {idx}")),
            _ => {}
        }
        for d in directives {
            let phase = self.dual.as_ref().expect("dual mode").state.phase;
            match (d.stream, d.target) {
                (StreamId::S1, DirectiveTarget::RateControl) if d.frame_type == FrameType::Key => {
                    self.keyframe_dual(idx)?;
                }
                (StreamId::S1, DirectiveTarget::RateControl) => {
                    let req = self.request(idx, StreamId::S1, FrameType::Delta, Target::RateControl, 1)?;
                    let f = self.s1.encode(req);
                    let f = self.emit(f);
                    let now = self.now;
                    let dual = self.dual.as_mut().expect("dual mode");
                    dual.state.on_s1_encoded(now, f.frame_type, f.size_bits as f64, 1);
                }
                (StreamId::S2, DirectiveTarget::KeyframeQuant) if phase == Phase::Dual => {
                    let q1 = self.dual.as_ref().expect("dual mode").q1_index;
                    let req = self.request(idx, StreamId::S2, FrameType::Delta, Target::QuantIndex(q1), 1)?;
                    let f = self.encode_s2(req)?;
                    self.dual.as_mut().expect("dual mode").s2_first_bits = f.size_bits as f64;
                }
                (StreamId::S2, DirectiveTarget::Stream2Budget) => {
                    let dual = self.dual.as_ref().expect("dual mode");
                    let a = dual.state.allocation.as_ref().ok_or_else(|| Error::Logic("dual phase without allocation".into()))?;
                    let f = self.cfg.content.fps as f64;
                    let rest = (a.t * f - 1.0).max(1.0);
                    let bits = ((a.b_dprime * a.t - dual.s2_first_bits) / rest).max(8.0);
                    let req = self.request(idx, StreamId::S2, FrameType::Delta, Target::Bits(bits), 1)?;
                    self.encode_s2(req)?;
                }
                (StreamId::S1, DirectiveTarget::Stream1Quant) => {
                    let dual = self.dual.as_ref().expect("dual mode");
                    let gap = dual.state.s1_gap;
                    let qi = dual.state.allocation.as_ref().map(|a| a.q_index).unwrap_or(0);
                    let req = self.request(idx, StreamId::S1, FrameType::Delta, Target::QuantIndex(qi), gap)?;
                    let f = self.s1.encode(req);
                    let f = self.emit(f);
                    self.dual_s1_bits = f.size_bits as f64;
                    let now = self.now;
                    let dual = self.dual.as_mut().expect("dual mode");
                    dual.state.on_s1_encoded(now, FrameType::Delta, f.size_bits as f64, gap);
                    if dual.state.should_deactivate(f.size_bits as f64, now)? {
                        dual.state.deactivate();
                        dual.s2 = None;
                        self.pacer.set_dual_gate(false);
                        self.log("deactivate", format!("s1 delta {} bits", f.size_bits));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn encode_s2(&mut self, req: FrameRequest) -> Result<EncodedFrame> {
        let dual = self.dual.as_mut().expect("dual mode");
        let enc = dual.s2.as_mut().ok_or_else(|| Error::Logic("stream 2 encoder missing".into()))?;
        let f = enc.encode(req);
        self.dual_s2_bits = f.size_bits as f64;
        Ok(self.emit(f))
    }

    /// Stream-1 keyframe under PDStream: encode, then try to open a dual phase.
    fn keyframe_dual(&mut self, idx: usize) -> Result<()> {
        let clone = self.s1.clone();
        let req = self.request(idx, StreamId::S1, FrameType::Key, Target::RateControl, 1)?;
        let key = self.s1.encode(req);
        let key = self.emit(key);
        let r1 = key.size_bits as f64;
        let q1 = key.quant_step;
        let b = self.target_bps;
        let problem = self.alloc_problem(idx, r1, q1);
        let now = self.now;
        let dual = self.dual.as_mut().expect("dual mode");
        dual.state.on_s1_encoded(now, FrameType::Key, r1, 1);
        let Some(problem) = problem else {
            dual.state.cancel_activation();
            self.out.allocs.push(AllocRow { ts: now, status: "no_reference", b, r1, allocation: None });
            self.fallback_burst();
            self.log("single", "keyframe without reference".into());
            return Ok(());
        };
        let a = allocate(&problem)?;
        if !a.feasible {
            dual.state.cancel_activation();
            self.out.allocs.push(AllocRow { ts: now, status: "infeasible", b, r1, allocation: Some(a) });
            self.fallback_burst();
            self.log("single", "allocation infeasible".into());
            return Ok(());
        }
        dual.q1_index = problem.table.nearest_index(q1);
        dual.s2 = Some(clone);
        let cap = problem.t_max();
        dual.state.activate(r1, a.clone(), cap);
        self.pacer.set_dual_gate(true);
        self.log(
            "activate",
            format!("f'={} T={:.4} q'={:.3} b'={:.0} b''={:.0}", a.f_prime, a.t, a.q_bar_prime, a.b_prime, a.b_dprime),
        );
        self.out.allocs.push(AllocRow { ts: now, status: "keyframe", b, r1, allocation: Some(a) });
        Ok(())
    }

    /// A keyframe that stays single-stream is paced like the CBR_L baseline.
    fn fallback_burst(&mut self) {
        self.pacer.override_until_drained(Multiplier::Burst {
            factor: self.cfg.pacer.burst_multiplier,
            policy: self.cfg.pacer.burst_policy,
        });
    }

    fn alloc_problem(&self, idx: usize, r1: f64, q1: f64) -> Option<AllocProblem> {
        if idx == 0 {
            return None;
        }
        let model = self.s1.sad_model()?;
        let c_bar = self.s1.predictor().mean()?;
        let f = self.cfg.content.fps;
        let s_bar = self.content.sad_median();
        let rho = self.cfg.content.gap_rho;
        let base = model.predict(s_bar);
        let c_prime = (1..=f)
            .map(|fp| c_bar * model.predict(gap_sad(s_bar, f as f64 / fp as f64, rho, 5.0 * s_bar)) / base)
            .collect();
        let c1 = self.content.frames[idx].satd_base;
        Some(AllocProblem {
            b: self.target_bps,
            f,
            f_k: self.s1.keyframe_rate(),
            eta: self.cfg.allocator.eta,
            r1,
            q1,
            c_bar,
            c1_dprime: c1,
            c_prime,
            t_min: 0.0,
            rq: self.s1.rq_model().clone(),
            table: self.s1.table().clone(),
        })
    }

    fn on_enqueue(&mut self, pkts: Vec<Packet>) -> Result<()> {
        if pkts.first().is_some_and(|p| Some(p.frame_id) == self.last_s1_frame) {
            self.s1_awaiting_enqueue = false;
        }
        for p in pkts {
            self.pacer.enqueue(p, self.now)?;
        }
        Ok(())
    }

    fn on_tick(&mut self) {
        let sent = self.pacer.pace_tick(self.now);
        if self.cfg.run.dump_pacer && !sent.is_empty() {
            let s = self.pacer.snapshot();
            let detail = format!("sent={} queued={} budget={:.1} mult={}", sent.len(), s.queued_bytes, s.budget, s.multiplier);
            self.log("pacer", detail);
        }
        for mut p in sent {
            match self.link.send(p.size_bytes, self.now) {
                LinkOutcome::Delivered { arrival } => {
                    p.ts_arrived = Some(arrival);
                    self.push(arrival, Kind::Arrival(p, arrival));
                }
                LinkOutcome::Lost { departure } => {
                    let at = departure + self.link.trace().at(departure).prop_ms;
                    p.lost = true;
                    self.push(at, Kind::Loss(p, at));
                }
                LinkOutcome::Dropped => {
                    p.lost = true;
                    let at = self.now;
                    self.push(at, Kind::Loss(p, at));
                }
            }
        }
    }

    /// Playback metrics over the last decision interval.
    fn interval_metrics(&mut self) -> (f64, f64, f64, usize) {
        let recs = self.receiver.records();
        let mut n = 0usize;
        let mut e2e = 0.0;
        let mut qp = 0.0;
        while self.render_cursor < recs.len() {
            let r = &recs[self.render_cursor];
            match r.render_ts {
                Some(t) if t > self.now => break,
                Some(t) => {
                    n += 1;
                    e2e += r.delay.d_e2e;
                    qp += r.qp_index;
                    self.recent_renders.push_back(t);
                }
                None => {}
            }
            self.render_cursor += 1;
        }
        while self.recent_renders.front().is_some_and(|&t| t <= self.now - 1000.0) {
            self.recent_renders.pop_front();
        }
        if n > 0 {
            self.last_e2e_ms = e2e / n as f64;
            self.last_qp = qp / n as f64;
        }
        (self.last_e2e_ms, self.last_qp, n as f64 * 1000.0 / self.cfg.rate.interval_ms, n)
    }

    fn on_decision(&mut self) -> Result<()> {
        let dt_s = self.cfg.rate.interval_ms / 1000.0;
        let (e2e_ms, qp, fps, _) = self.interval_metrics();
        let stalled = self.now >= 1000.0 && (self.recent_renders.len() as f64) < self.cfg.receiver.stall_fps;
        let acc = std::mem::take(&mut self.acc);
        let loss = if acc.pkts_done > 0 { acc.pkts_lost as f64 / acc.pkts_done as f64 } else { 0.0 };
        let throughput = acc.bytes_arrived as f64 * 8.0 / dt_s;
        let rtt = self.link.rtt(self.now);
        let (dual_active, alloc) = match &self.dual {
            Some(d) if d.state.phase == Phase::Dual => (true, d.state.allocation.clone()),
            _ => (false, None),
        };
        self.out.net.push(NetRow {
            ts: self.now,
            bw_bps: self.link.bandwidth_at(self.now),
            rtt_ms: rtt,
            throughput_bps: throughput,
            loss,
            target_bps: self.target_bps,
            pacer_bytes: self.pacer.queued_bytes(),
            dual_active,
        });
        self.history.push(&StateSample {
            throughput_bps: throughput,
            loss,
            rtt_ms: rtt,
            e2e_ms,
            fps,
            qp,
            target_bps: self.target_bps,
            actual_bps: acc.bits_encoded as f64 / dt_s,
            dual_active: if dual_active { 1.0 } else { 0.0 },
            dual_s1_bits: if dual_active { self.dual_s1_bits } else { 0.0 },
            dual_s2_bits: if dual_active { self.dual_s2_bits } else { 0.0 },
            b_prime: alloc.as_ref().map(|a| a.b_prime).unwrap_or(0.0),
            b_dprime: alloc.as_ref().map(|a| a.b_dprime).unwrap_or(0.0),
        });

        let next = match self.controller.policy() {
            RatePolicy::Fixed => None,
            RatePolicy::Gcc => {
                let step = self.cfg.rate.gcc_interval_ms;
                let k = (self.now / self.cfg.rate.interval_ms).round() as u64;
                let every = (step / self.cfg.rate.interval_ms).round().max(1.0) as u64;
                if k.is_multiple_of(every) {
                    let g = std::mem::take(&mut self.gcc_acc);
                    let fb = GccFeedback {
                        delay_gradient_ms_per_s: (rtt - self.last_gcc_rtt) / (step / 1000.0),
                        loss: if g.pkts_done > 0 { g.pkts_lost as f64 / g.pkts_done as f64 } else { 0.0 },
                    };
                    self.last_gcc_rtt = rtt;
                    let b = self.target_bps;
                    self.gcc.as_mut().map(|gcc| gcc.update(fb, b))
                } else {
                    None
                }
            }
            RatePolicy::Rl => {
                let metrics = RewardMetrics {
                    bitrate_bps: self.target_bps,
                    fps,
                    qp,
                    delay_s: e2e_ms / 1000.0,
                    stall: if stalled { 1.0 } else { 0.0 },
                };
                let r = reward(&metrics, &self.weights);
                let traj = &mut self.out.trajectory;
                if traj.rewards.len() < traj.actions.len() {
                    traj.rewards.push(r);
                }
                let state = self.history.vector()?;
                let rl = self.rl.as_mut().expect("rl state");
                let (a, logp) = rl.policy.act(&state, &mut rl.rng, rl.greedy)?;
                let bps = rl.policy.grid[a];
                let traj = &mut self.out.trajectory;
                traj.states.push(state);
                traj.actions.push(a);
                traj.logps.push(logp);
                Some(bps)
            }
        };
        if let Some(bps) = next {
            let bps = bps.clamp(self.cfg.rate.min_bps, self.cfg.rate.max_bps);
            if (bps - self.target_bps).abs() > 1e-9 {
                self.set_target(bps)?;
            }
        }
        Ok(())
    }

    fn set_target(&mut self, bps: f64) -> Result<()> {
        self.target_bps = bps;
        self.s1.set_target_bps(bps);
        self.pacer.set_pacing_rate(bps);
        let now = self.now;
        let Some(dual) = self.dual.as_mut() else {
            return Ok(());
        };
        if dual.state.phase != Phase::Dual {
            return Ok(());
        }
        let Some(prev) = dual.state.allocation.clone() else {
            return Ok(());
        };
        let elapsed = (now - dual.state.activation_ts.unwrap_or(now)) / 1000.0;
        let so_far = dual.state.encoded_bits_so_far;
        let Some(base) = self.alloc_problem_realloc(prev.b_prime + prev.b_dprime) else {
            return Ok(());
        };
        let a = reallocate(&base, bps, so_far, elapsed)?;
        let dual = self.dual.as_mut().expect("dual mode");
        self.out.allocs.push(AllocRow { ts: now, status: "realloc", b: bps, r1: so_far, allocation: Some(a.clone()) });
        if a.feasible {
            dual.state.allocation = Some(a);
        } else {
            dual.state.deactivate();
            dual.s2 = None;
            self.pacer.set_dual_gate(false);
            self.log("deactivate", "re-allocation infeasible".into());
        }
        Ok(())
    }

    fn alloc_problem_realloc(&self, b: f64) -> Option<AllocProblem> {
        let dual = self.dual.as_ref()?;
        let idx = ((self.now / self.frame_interval).round() as usize).max(1).min(self.content.len() - 1);
        let q1 = self.s1.table().q(dual.q1_index);
        let mut p = self.alloc_problem(idx, dual.state.keyframe_size_r1.max(1.0), q1)?;
        p.b = b;
        Some(p)
    }
}

/// Runs one session with the given network trace and rate controller.
pub fn simulate(
    cfg: &ExperimentConfig,
    content: &ContentTrace,
    trace: BandwidthTrace,
    controller: Controller,
) -> Result<SimOutput> {
    Simulation::new(cfg, content, trace, controller)?.run()
}
