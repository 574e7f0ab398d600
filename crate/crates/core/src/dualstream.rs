//! Keyframe-triggered switch between one stream and a pseudo-dual pair.
//!
//! While a large stream-1 keyframe drains, a cloned encoder emits a cheap
//! stream 2 at the full frame rate so playback never waits for the key.
//! Stream 1 meanwhile continues at a reduced rate and hands playback back
//! once its deltas are ordinary-sized again.

use serde::Serialize;

use crate::allocator::Allocation;
use crate::config::DualConfig;
use crate::error::{Error, Result};
use crate::media::{FrameType, StreamId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Phase {
    Single,
    Dual,
}

/// How the sender should size a requested frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DirectiveTarget {
    /// The stream-1 encoder's own rate control.
    RateControl,
    /// Quantizer of the keyframe that opened the dual phase.
    KeyframeQuant,
    /// Per-frame share of stream 2's budget.
    Stream2Budget,
    /// Allocated stream-1 quantizer.
    Stream1Quant,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Directive {
    pub stream: StreamId,
    pub frame_type: FrameType,
    pub target: DirectiveTarget,
}

impl Directive {
    fn new(stream: StreamId, frame_type: FrameType, target: DirectiveTarget) -> Self {
        Self { stream, frame_type, target }
    }
}

/// What happened at a capture, for the event log.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Transition {
    None,
    Activated,
    Deactivated,
    /// Stream 1 was still busy; the capture was not encoded on it.
    Skipped,
}

#[derive(Debug, Clone)]
pub struct DualStreamState {
    pub phase: Phase,
    pub activation_ts: Option<f64>,
    pub keyframe_size_r1: f64,
    /// Stream-1 bits since activation (keyframe included).
    pub encoded_bits_so_far: f64,
    pub allocation: Option<Allocation>,
    pub skips: u64,
    /// Captures since stream 1 last encoded.
    pub s1_gap: usize,
    avg_delta_size: Option<f64>,
    last_avg_ts: f64,
    theta: f64,
    half_life_ms: f64,
    cap_ms: f64,
}

impl DualStreamState {
    pub fn new(cfg: &DualConfig) -> Self {
        Self {
            phase: Phase::Single,
            activation_ts: None,
            keyframe_size_r1: 0.0,
            encoded_bits_so_far: 0.0,
            allocation: None,
            skips: 0,
            s1_gap: 1,
            avg_delta_size: None,
            last_avg_ts: 0.0,
            theta: cfg.theta,
            half_life_ms: cfg.avg_half_life_s * 1000.0,
            cap_ms: f64::INFINITY,
        }
    }

    pub fn avg_delta_size(&self) -> Option<f64> {
        self.avg_delta_size
    }

    /// Directives for one capture. `key_due` is the stream-1 keyframe policy;
    /// `s1_busy` means stream 1's previous frame is still in the pacer.
    pub fn on_frame_captured(&mut self, now: f64, key_due: bool, s1_busy: bool) -> (Vec<Directive>, Transition) {
        use DirectiveTarget::*;
        if self.phase == Phase::Dual {
            let elapsed = now - self.activation_ts.unwrap_or(now);
            if elapsed + 1e-6 >= self.cap_ms {
                self.deactivate();
                let (d, _) = self.on_frame_captured(now, key_due, s1_busy);
                return (d, Transition::Deactivated);
            }
            let mut d = vec![Directive::new(StreamId::S2, FrameType::Delta, Stream2Budget)];
            if s1_busy {
                self.skips += 1;
                self.s1_gap += 1;
                return (d, Transition::Skipped);
            }
            d.push(Directive::new(StreamId::S1, FrameType::Delta, Stream1Quant));
            return (d, Transition::None);
        }
        if key_due {
            self.phase = Phase::Dual;
            self.activation_ts = Some(now);
            self.encoded_bits_so_far = 0.0;
            self.s1_gap = 1;
            return (
                vec![
                    Directive::new(StreamId::S1, FrameType::Key, RateControl),
                    Directive::new(StreamId::S2, FrameType::Delta, KeyframeQuant),
                ],
                Transition::Activated,
            );
        }
        self.s1_gap = 1;
        (vec![Directive::new(StreamId::S1, FrameType::Delta, RateControl)], Transition::None)
    }

    /// Installs the allocation computed after the keyframe was encoded.
    /// `cap_s` bounds the dual phase (`1 / (eta f_k)`).
    pub fn activate(&mut self, r1: f64, allocation: Allocation, cap_s: f64) {
        self.keyframe_size_r1 = r1;
        self.allocation = Some(allocation);
        self.cap_ms = cap_s * 1000.0;
    }

    /// Abandons a dual phase whose allocation was infeasible.
    pub fn cancel_activation(&mut self) {
        self.deactivate();
    }

    pub fn deactivate(&mut self) {
        self.phase = Phase::Single;
        self.activation_ts = None;
        self.allocation = None;
        self.cap_ms = f64::INFINITY;
        self.s1_gap = 1;
    }

    /// Bookkeeping after a stream-1 frame was encoded.
    pub fn on_s1_encoded(&mut self, now: f64, frame_type: FrameType, size_bits: f64, gap: usize) {
        self.s1_gap = 1;
        if self.phase == Phase::Dual {
            self.encoded_bits_so_far += size_bits;
        }
        // The reference level is the ordinary full-rate delta.
        if frame_type == FrameType::Delta && gap == 1 && self.phase == Phase::Single {
            self.avg_delta_size = Some(match self.avg_delta_size {
                None => size_bits,
                Some(a) => {
                    let dt = (now - self.last_avg_ts).max(0.0);
                    let w = 1.0 - 0.5f64.powf(dt / self.half_life_ms);
                    a + w * (size_bits - a)
                }
            });
            self.last_avg_ts = now;
        }
    }

    /// Whether stream 1 may take playback back: its latest delta is back
    /// within `theta` of the average, or the phase hit its time cap.
    pub fn should_deactivate(&self, latest_s1_delta: f64, now: f64) -> Result<bool> {
        let Some(start) = self.activation_ts.filter(|_| self.phase == Phase::Dual) else {
            return Err(Error::Logic("deactivation check outside the dual phase".into()));
        };
        if now - start + 1e-6 >= self.cap_ms {
            return Ok(true);
        }
        Ok(self.avg_delta_size.is_some_and(|a| latest_s1_delta <= self.theta * a))
    }
}

/// Picks the copy of a capture to play: earliest completion, stream 2 on
/// exact ties (it never waits behind the keyframe).
pub fn choose_render(candidates: &[(StreamId, f64)]) -> Option<StreamId> {
    candidates
        .iter()
        .min_by(|a, b| {
            a.1.total_cmp(&b.1).then_with(|| b.0.number().cmp(&a.0.number()))
        })
        .map(|c| c.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn alloc() -> Allocation {
        Allocation {
            b_prime: 1.0e6,
            b_dprime: 0.5e6,
            f_prime: 10,
            n: 5,
            t: 0.5,
            q_bar_prime: 20.0,
            q_index: 30,
            q_bar: 25.0,
            delta_q: -5.0,
            delta_q_index: -4.0,
            scaled: false,
            feasible: true,
            grid_size: 1,
        }
    }

    fn warm(s: &mut DualStreamState, bits: f64) {
        for i in 0..60 {
            let t = i as f64 * 33.3;
            s.on_frame_captured(t, false, false);
            s.on_s1_encoded(t, FrameType::Delta, bits, 1);
        }
    }

    #[test]
    fn keyframe_activates_with_both_directives() {
        let mut s = DualStreamState::new(&DualConfig::default());
        let (d, tr) = s.on_frame_captured(0.0, true, false);
        assert_eq!(tr, Transition::Activated);
        assert_eq!(s.phase, Phase::Dual);
        assert_eq!(d.len(), 2);
        assert_eq!(d[0], Directive::new(StreamId::S1, FrameType::Key, DirectiveTarget::RateControl));
        assert_eq!(d[1], Directive::new(StreamId::S2, FrameType::Delta, DirectiveTarget::KeyframeQuant));
    }

    #[test]
    fn busy_stream1_skips_and_grows_gap() {
        let mut s = DualStreamState::new(&DualConfig::default());
        s.on_frame_captured(0.0, true, false);
        s.activate(4e5, alloc(), 2.0);
        for k in 1..=3 {
            let (d, tr) = s.on_frame_captured(k as f64 * 33.3, false, true);
            assert_eq!(tr, Transition::Skipped);
            assert_eq!(d.len(), 1);
            assert_eq!(d[0].stream, StreamId::S2);
        }
        assert_eq!(s.skips, 3);
        assert_eq!(s.s1_gap, 4);
        let (d, _) = s.on_frame_captured(133.3, false, false);
        assert_eq!(d.len(), 2);
        assert_eq!(d[1].target, DirectiveTarget::Stream1Quant);
    }

    #[test]
    fn deactivates_when_delta_returns_to_average() {
        let mut s = DualStreamState::new(&DualConfig::default());
        warm(&mut s, 40_000.0);
        s.on_frame_captured(2000.0, true, false);
        s.activate(4e5, alloc(), 2.0);
        assert!(!s.should_deactivate(60_000.0, 2100.0).unwrap());
        assert!(s.should_deactivate(47_000.0, 2100.0).unwrap());
    }

    #[test]
    fn time_cap_forces_single() {
        let mut s = DualStreamState::new(&DualConfig::default());
        warm(&mut s, 40_000.0);
        s.on_frame_captured(2000.0, true, false);
        s.activate(4e5, alloc(), 0.4);
        assert!(s.should_deactivate(1e9, 2400.0).unwrap());
        let (d, tr) = s.on_frame_captured(2400.0, false, false);
        assert_eq!(tr, Transition::Deactivated);
        assert_eq!(s.phase, Phase::Single);
        assert_eq!(d, vec![Directive::new(StreamId::S1, FrameType::Delta, DirectiveTarget::RateControl)]);
    }

    #[test]
    fn deactivation_check_in_single_is_a_logic_error() {
        let s = DualStreamState::new(&DualConfig::default());
        assert!(matches!(s.should_deactivate(1.0, 0.0), Err(Error::Logic(_))));
    }

    #[test]
    fn average_has_two_second_half_life() {
        let mut s = DualStreamState::new(&DualConfig::default());
        s.on_s1_encoded(0.0, FrameType::Delta, 1000.0, 1);
        s.on_s1_encoded(2000.0, FrameType::Delta, 3000.0, 1);
        assert!((s.avg_delta_size().unwrap() - 2000.0).abs() < 1e-9);
        // dual-phase and gapped frames leave it alone
        s.on_s1_encoded(2100.0, FrameType::Delta, 1e6, 3);
        s.on_s1_encoded(2100.0, FrameType::Key, 1e6, 1);
        assert!((s.avg_delta_size().unwrap() - 2000.0).abs() < 1e-9);
    }

    #[test]
    fn tie_goes_to_stream2() {
        assert_eq!(choose_render(&[(StreamId::S1, 110.0), (StreamId::S2, 110.0)]), Some(StreamId::S2));
        assert_eq!(choose_render(&[(StreamId::S2, 110.0), (StreamId::S1, 110.0)]), Some(StreamId::S2));
        assert_eq!(choose_render(&[(StreamId::S1, 100.0), (StreamId::S2, 110.0)]), Some(StreamId::S1));
        assert_eq!(choose_render(&[]), None);
    }

    #[test]
    fn bits_so_far_count_stream1_during_dual() {
        let mut s = DualStreamState::new(&DualConfig::default());
        s.on_frame_captured(0.0, true, false);
        s.on_s1_encoded(0.0, FrameType::Key, 4e5, 1);
        s.activate(4e5, alloc(), 2.0);
        s.on_frame_captured(33.3, false, false);
        s.on_s1_encoded(33.3, FrameType::Delta, 2e4, 1);
        assert_eq!(s.encoded_bits_so_far, 4.2e5);
    }
}
