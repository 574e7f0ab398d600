//! Frame reassembly, jitter buffer, playback and delay accounting.

use std::collections::HashMap;

use serde::Serialize;

use crate::config::ReceiverConfig;
use crate::media::{FrameType, Packet, StreamId};

/// Per-frame end-to-end delay split into its pipeline stages.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct DelayBreakdown {
    pub d_encode: f64,
    pub d_pacer: f64,
    pub d_trans: f64,
    pub d_jitter: f64,
    pub d_decode: f64,
    pub d_other: f64,
    pub d_e2e: f64,
}

impl DelayBreakdown {
    pub fn from_parts(d_encode: f64, d_pacer: f64, d_trans: f64, d_jitter: f64, d_decode: f64, d_other: f64) -> Self {
        Self {
            d_encode,
            d_pacer,
            d_trans,
            d_jitter,
            d_decode,
            d_other,
            d_e2e: d_encode + d_pacer + d_trans + d_jitter + d_decode + d_other,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JitterBufferState {
    pub target_wait: f64,
    pub delay_var_ewma: f64,
    pub min_wait: f64,
}

/// EWMA of inter-arrival deviation; the wait target is `min + k * ewma`.
#[derive(Debug, Clone)]
pub struct JitterBuffer {
    pub state: JitterBufferState,
    weight: f64,
    sigmas: f64,
    max_wait: f64,
    last: Option<(f64, f64)>,
}

impl JitterBuffer {
    pub fn new(cfg: &ReceiverConfig) -> Self {
        Self {
            state: JitterBufferState {
                target_wait: cfg.min_wait_ms,
                delay_var_ewma: 0.0,
                min_wait: cfg.min_wait_ms,
            },
            weight: cfg.jitter_weight,
            sigmas: cfg.jitter_sigmas,
            max_wait: cfg.max_wait_ms,
            last: None,
        }
    }

    /// Feeds one frame completion; `capture_ts` gives the expected spacing.
    pub fn update(&mut self, capture_ts: f64, completion: f64) -> JitterBufferState {
        if let Some((pc, pt)) = self.last {
            let dev = ((completion - pt) - (capture_ts - pc)).abs();
            self.state.delay_var_ewma = (1.0 - self.weight) * self.state.delay_var_ewma + self.weight * dev;
        }
        self.last = Some((capture_ts, completion));
        self.state.target_wait =
            (self.state.min_wait + self.sigmas * self.state.delay_var_ewma).clamp(0.0, self.max_wait);
        self.state
    }
}

/// Header information the receiver learns about every frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameMeta {
    pub frame_id: u64,
    pub capture_idx: usize,
    pub capture_ts: f64,
    pub encode_done_ts: f64,
    pub stream: StreamId,
    pub frame_type: FrameType,
    pub packets: u32,
    pub qp_index: f64,
    pub size_bits: u64,
}

#[derive(Debug, Clone)]
struct Pending {
    meta: FrameMeta,
    arrived: u32,
    lost: u32,
    first_enqueued: Option<f64>,
    first_sent: Option<f64>,
    last_arrival: f64,
}

/// A frame whose packets have all been accounted for.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompletedFrame {
    pub meta: FrameMeta,
    pub first_enqueued: f64,
    pub first_sent: f64,
    /// Arrival of the last packet (or of the last loss notification).
    pub completion: f64,
    pub decodable: bool,
}

#[derive(Debug, Default, Clone)]
pub struct Assembler {
    pending: HashMap<u64, Pending>,
}

impl Assembler {
    pub fn register(&mut self, meta: FrameMeta) {
        self.pending.insert(
            meta.frame_id,
            Pending {
                meta,
                arrived: 0,
                lost: 0,
                first_enqueued: None,
                first_sent: None,
                last_arrival: meta.encode_done_ts,
            },
        );
    }

    pub fn in_flight(&self) -> usize {
        self.pending.len()
    }

    fn account(&mut self, pkt: &Packet, at: f64, lost: bool) -> Option<CompletedFrame> {
        let p = self.pending.get_mut(&pkt.frame_id)?;
        if pkt.seq_in_frame == 0 {
            p.first_enqueued = pkt.ts_enqueued;
            p.first_sent = pkt.ts_sent;
        }
        if lost {
            p.lost += 1;
        } else {
            p.arrived += 1;
        }
        p.last_arrival = p.last_arrival.max(at);
        if p.arrived + p.lost < p.meta.packets {
            return None;
        }
        let p = self.pending.remove(&pkt.frame_id)?;
        let enq = p.first_enqueued.unwrap_or(p.meta.encode_done_ts);
        Some(CompletedFrame {
            meta: p.meta,
            first_enqueued: enq,
            first_sent: p.first_sent.unwrap_or(enq),
            completion: p.last_arrival,
            decodable: p.lost == 0,
        })
    }

    pub fn on_packet(&mut self, pkt: &Packet, ts_arrived: f64) -> Option<CompletedFrame> {
        self.account(pkt, ts_arrived, false)
    }

    /// A lost packet; the loss becomes known at `at`.
    pub fn on_loss(&mut self, pkt: &Packet, at: f64) -> Option<CompletedFrame> {
        self.account(pkt, at, true)
    }
}

/// One row of the per-frame output.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameRecord {
    pub frame_id: u64,
    pub capture_idx: usize,
    pub capture_ts: f64,
    pub stream: StreamId,
    pub frame_type: FrameType,
    pub qp_index: f64,
    pub size_bits: u64,
    pub decodable: bool,
    pub rendered: bool,
    pub degraded: bool,
    pub stalled: bool,
    pub completion: f64,
    pub render_ts: Option<f64>,
    /// Encode, pacer and transmission parts are known for any completed
    /// frame; jitter and decode only for rendered ones.
    pub delay: DelayBreakdown,
    pub psnr: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Receiver {
    cfg: ReceiverConfig,
    pub assembler: Assembler,
    pub jitter: JitterBuffer,
    last_render_ts: f64,
    last_rendered_capture: Option<f64>,
    s1_chain_broken: bool,
    records: Vec<FrameRecord>,
}

impl Receiver {
    pub fn new(cfg: &ReceiverConfig) -> Self {
        Self {
            cfg: cfg.clone(),
            assembler: Assembler::default(),
            jitter: JitterBuffer::new(cfg),
            last_render_ts: f64::NEG_INFINITY,
            last_rendered_capture: None,
            s1_chain_broken: false,
            records: Vec::new(),
        }
    }

    pub fn records(&self) -> &[FrameRecord] {
        &self.records
    }

    pub fn decode_ms(&self, t: FrameType) -> f64 {
        match t {
            FrameType::Key => self.cfg.decode_key_ms,
            FrameType::Delta => self.cfg.decode_delta_ms,
        }
    }

    /// Handles a completed frame: reference-chain bookkeeping, first-come
    /// playback and jitter-buffer wait. Returns the record index.
    pub fn on_complete(&mut self, c: CompletedFrame) -> usize {
        let m = c.meta;
        // Stream 1 is the reference chain; a lost frame corrupts it until the
        // next keyframe. Stream-2 errors are treated as quality-neutral.
        let degraded = match (m.stream, m.frame_type) {
            (StreamId::S1, FrameType::Key) => {
                self.s1_chain_broken = !c.decodable;
                false
            }
            (StreamId::S1, FrameType::Delta) => {
                if !c.decodable {
                    self.s1_chain_broken = true;
                }
                self.s1_chain_broken
            }
            (StreamId::S2, _) => false,
        };
        let d_encode = m.encode_done_ts - m.capture_ts;
        let d_pacer = c.first_sent - c.first_enqueued;
        let d_trans = c.completion - c.first_sent;
        let d_other = c.first_enqueued - m.encode_done_ts;
        let fresh = self.last_rendered_capture.is_none_or(|l| m.capture_ts > l);
        let mut record = FrameRecord {
            frame_id: m.frame_id,
            capture_idx: m.capture_idx,
            capture_ts: m.capture_ts,
            stream: m.stream,
            frame_type: m.frame_type,
            qp_index: m.qp_index,
            size_bits: m.size_bits,
            decodable: c.decodable,
            rendered: false,
            degraded,
            stalled: false,
            completion: c.completion,
            render_ts: None,
            delay: DelayBreakdown::from_parts(d_encode, d_pacer, d_trans, 0.0, 0.0, d_other),
            psnr: None,
        };
        if c.decodable && fresh {
            let jb = self.jitter.update(m.capture_ts, c.completion);
            let start = (c.completion + jb.target_wait).max(self.last_render_ts);
            let d_jitter = start - c.completion;
            let d_decode = self.decode_ms(m.frame_type);
            self.last_render_ts = start;
            self.last_rendered_capture = Some(m.capture_ts);
            record.rendered = true;
            record.render_ts = Some(start + d_decode);
            record.delay = DelayBreakdown::from_parts(d_encode, d_pacer, d_trans, d_jitter, d_decode, d_other);
            let penalty = if degraded { self.cfg.degraded_penalty_db } else { 0.0 };
            record.psnr = Some(self.cfg.psnr_base_db - self.cfg.psnr_per_qp * m.qp_index - penalty);
        }
        self.records.push(record);
        self.records.len() - 1
    }

    /// Marks 1 s display windows with fewer than the stall threshold of
    /// rendered frames over `[0, duration_ms)`; returns per-window FPS.
    pub fn finalize(&mut self, duration_ms: f64) -> Vec<usize> {
        let windows = (duration_ms / 1000.0).floor().max(1.0) as usize;
        let mut fps = vec![0usize; windows];
        for r in &self.records {
            if let Some(t) = r.render_ts {
                let w = (t / 1000.0).floor();
                if w >= 0.0 && (w as usize) < windows {
                    fps[w as usize] += 1;
                }
            }
        }
        for r in &mut self.records {
            let t = r.render_ts.unwrap_or(r.capture_ts);
            let w = ((t / 1000.0).floor().max(0.0) as usize).min(windows - 1);
            r.stalled = (fps[w] as f64) < self.cfg.stall_fps;
        }
        fps
    }

    pub fn into_records(self) -> Vec<FrameRecord> {
        self.records
    }
}
