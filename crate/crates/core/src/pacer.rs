//! Sender-side pacing queue with strict priority classes.

use std::collections::{HashSet, VecDeque};

use crate::config::BurstPolicy;
use crate::error::{Error, Result};
use crate::media::{Packet, PriorityClass};

/// How the pacing multiplier is chosen on each tick.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Multiplier {
    /// Always 1x.
    Unit,
    /// Baseline burst mode: `factor` while the policy says so, else 1x.
    Burst { factor: f64, policy: BurstPolicy },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PacerSnapshot {
    pub depths: [usize; 5],
    pub queued_bytes: usize,
    pub budget: f64,
    pub multiplier: f64,
}

#[derive(Debug, Clone)]
pub struct PacerQueue {
    queues: [VecDeque<Packet>; 5],
    seen: HashSet<u64>,
    queued_bytes: usize,
    pacing_rate: f64,
    multiplier: Multiplier,
    tick_ms: f64,
    budget: f64,
    last_multiplier: f64,
    dual_gate: bool,
    max_packet: usize,
    /// Temporary multiplier that lapses once the queue is empty.
    until_drained: Option<Multiplier>,
}

fn class_slot(c: PriorityClass) -> usize {
    c as usize
}

impl PacerQueue {
    pub fn new(pacing_rate: f64, multiplier: Multiplier, tick_ms: f64, max_packet: usize) -> Self {
        Self {
            queues: Default::default(),
            seen: HashSet::new(),
            queued_bytes: 0,
            pacing_rate,
            multiplier,
            tick_ms,
            budget: 0.0,
            last_multiplier: 1.0,
            dual_gate: false,
            max_packet,
            until_drained: None,
        }
    }

    pub fn pacing_rate(&self) -> f64 {
        self.pacing_rate
    }

    pub fn set_pacing_rate(&mut self, bps: f64) {
        self.pacing_rate = bps;
    }

    /// Enables the dual-phase gate: stream-1 video only moves once the
    /// stream-2 queue is empty.
    pub fn set_dual_gate(&mut self, on: bool) {
        self.dual_gate = on;
    }

    /// Uses `m` instead of the configured multiplier until the queue next
    /// runs empty.
    pub fn override_until_drained(&mut self, m: Multiplier) {
        self.until_drained = Some(m);
    }

    pub fn budget(&self) -> f64 {
        self.budget
    }

    pub fn queued_bytes(&self) -> usize {
        self.queued_bytes
    }

    pub fn is_empty(&self) -> bool {
        self.queued_bytes == 0 && self.queues.iter().all(|q| q.is_empty())
    }

    pub fn depth(&self, class: PriorityClass) -> usize {
        self.queues[class_slot(class)].len()
    }

    /// Whether any packet of `frame_id` is still waiting.
    pub fn holds_frame(&self, class: PriorityClass, frame_id: u64) -> bool {
        self.queues[class_slot(class)]
            .iter()
            .any(|p| p.frame_id == frame_id)
    }

    pub fn snapshot(&self) -> PacerSnapshot {
        let mut depths = [0; 5];
        for (d, q) in depths.iter_mut().zip(&self.queues) {
            *d = q.len();
        }
        PacerSnapshot {
            depths,
            queued_bytes: self.queued_bytes,
            budget: self.budget,
            multiplier: self.last_multiplier,
        }
    }

    /// Bytes one tick allows at multiplier 1.
    pub fn tick_allowance(&self) -> f64 {
        self.pacing_rate * self.tick_ms / 8000.0
    }

    pub fn enqueue(&mut self, mut pkt: Packet, now: f64) -> Result<()> {
        if !self.seen.insert(pkt.pkt_id) {
            return Err(Error::Logic(format!("packet {} enqueued twice", pkt.pkt_id)));
        }
        pkt.ts_enqueued = Some(now);
        self.queued_bytes += pkt.size_bytes;
        self.queues[class_slot(pkt.priority_class)].push_back(pkt);
        Ok(())
    }

    fn current_multiplier(&self) -> f64 {
        match self.until_drained.unwrap_or(self.multiplier) {
            Multiplier::Unit => 1.0,
            Multiplier::Burst { factor, policy } => match policy {
                BurstPolicy::Always => factor,
                BurstPolicy::Backlogged => {
                    if self.queued_bytes as f64 > self.tick_allowance() {
                        factor
                    } else {
                        1.0
                    }
                }
            },
        }
    }

    /// One pacing tick: tops up the budget and releases packets in strict
    /// priority order, stopping at the first packet that does not fit.
    pub fn pace_tick(&mut self, now: f64) -> Vec<Packet> {
        let mult = self.current_multiplier();
        self.last_multiplier = mult;
        let allowance = self.pacing_rate * mult * self.tick_ms / 8000.0;
        // Unused budget carries over, but never more than one tick's worth
        // (or one full packet, so low rates cannot starve).
        let carry_cap = allowance.max(self.max_packet as f64);
        self.budget = self.budget.min(carry_cap) + allowance;

        let mut out = Vec::new();
        'classes: for slot in 0..self.queues.len() {
            if self.dual_gate
                && slot == class_slot(PriorityClass::VideoS1)
                && !self.queues[class_slot(PriorityClass::VideoS2)].is_empty()
            {
                break;
            }
            while let Some(head) = self.queues[slot].front() {
                if head.size_bytes as f64 > self.budget {
                    break 'classes;
                }
                let mut pkt = self.queues[slot].pop_front().expect("non-empty");
                self.budget -= pkt.size_bytes as f64;
                self.queued_bytes -= pkt.size_bytes;
                pkt.ts_sent = Some(now);
                out.push(pkt);
            }
        }
        if self.is_empty() {
            self.budget = self.budget.min(carry_cap);
            if !out.is_empty() {
                self.until_drained = None;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::media::StreamId;
    use proptest::prelude::*;

    fn pkt(id: u64, class: PriorityClass, bytes: usize) -> Packet {
        Packet {
            pkt_id: id,
            frame_id: id,
            stream_id: if class == PriorityClass::VideoS2 { StreamId::S2 } else { StreamId::S1 },
            seq_in_frame: 0,
            packets_in_frame: 1,
            payload_bytes: bytes.saturating_sub(12),
            size_bytes: bytes,
            priority_class: class,
            ts_enqueued: None,
            ts_sent: None,
            ts_arrived: None,
            lost: false,
        }
    }

    #[test]
    fn override_lapses_once_drained() {
        let burst = Multiplier::Burst { factor: 2.5, policy: BurstPolicy::Always };
        let mut p = PacerQueue::new(1e6, Multiplier::Unit, 5.0, 1212);
        p.override_until_drained(burst);
        // nothing queued yet: the override waits for traffic
        assert!(p.pace_tick(0.0).is_empty());
        for i in 0..20 {
            p.enqueue(pkt(i, PriorityClass::VideoS1, 1000), 0.0).unwrap();
        }
        let mut t = 5.0;
        while !p.is_empty() {
            p.pace_tick(t);
            assert_eq!(p.snapshot().multiplier, 2.5);
            t += 5.0;
        }
        p.enqueue(pkt(99, PriorityClass::VideoS1, 1000), t).unwrap();
        p.pace_tick(t);
        assert_eq!(p.snapshot().multiplier, 1.0);
    }

    #[test]
    fn budget_arithmetic_example() {
        let mut p = PacerQueue::new(2.4e6, Multiplier::Unit, 5.0, 1212);
        p.enqueue(pkt(1, PriorityClass::VideoS1, 1212), 0.0).unwrap();
        p.enqueue(pkt(2, PriorityClass::VideoS1, 1212), 0.0).unwrap();
        let out = p.pace_tick(5.0);
        assert_eq!(out.len(), 1);
        assert!((p.budget() - 288.0).abs() < 1e-9);
        assert_eq!(out[0].ts_sent, Some(5.0));
    }

    #[test]
    fn empty_queue_budget_is_capped() {
        let mut p = PacerQueue::new(2.4e6, Multiplier::Unit, 5.0, 1212);
        for i in 0..100 {
            assert!(p.pace_tick(i as f64 * 5.0).is_empty());
        }
        assert!(p.budget() <= 1500.0 + 1e-9);
    }

    #[test]
    fn duplicate_enqueue_is_rejected() {
        let mut p = PacerQueue::new(1e6, Multiplier::Unit, 5.0, 1212);
        p.enqueue(pkt(7, PriorityClass::Audio, 100), 0.0).unwrap();
        assert!(matches!(p.enqueue(pkt(7, PriorityClass::Audio, 100), 0.0), Err(Error::Logic(_))));
    }

    #[test]
    fn priority_order() {
        let mut p = PacerQueue::new(1e8, Multiplier::Unit, 5.0, 1212);
        p.enqueue(pkt(1, PriorityClass::Fec, 100), 0.0).unwrap();
        p.enqueue(pkt(2, PriorityClass::VideoS1, 100), 0.0).unwrap();
        p.enqueue(pkt(3, PriorityClass::VideoS1, 100), 0.0).unwrap();
        p.enqueue(pkt(4, PriorityClass::VideoS2, 100), 0.0).unwrap();
        p.enqueue(pkt(5, PriorityClass::Audio, 100), 0.0).unwrap();
        let ids: Vec<u64> = p.pace_tick(5.0).iter().map(|p| p.pkt_id).collect();
        assert_eq!(ids, vec![5, 4, 2, 3, 1]);
    }

    #[test]
    fn s2_backlog_gates_s1() {
        let mut p = PacerQueue::new(2.4e6, Multiplier::Unit, 5.0, 1212);
        p.set_dual_gate(true);
        for i in 0..3 {
            p.enqueue(pkt(i, PriorityClass::VideoS2, 1212), 0.0).unwrap();
        }
        p.enqueue(pkt(10, PriorityClass::VideoS1, 200), 0.0).unwrap();
        let out = p.pace_tick(5.0);
        assert!(out.iter().all(|p| p.priority_class == PriorityClass::VideoS2));
        // drain s2, then s1 flows on leftover budget
        let mut sent_s1 = false;
        for t in 2..10 {
            for q in p.pace_tick(t as f64 * 5.0) {
                if q.priority_class == PriorityClass::VideoS1 {
                    sent_s1 = true;
                    assert_eq!(p.depth(PriorityClass::VideoS2), 0);
                }
            }
            assert!(p.budget() >= 0.0);
        }
        assert!(sent_s1);
    }

    fn drain_rate(mult: Multiplier) -> f64 {
        let mut p = PacerQueue::new(1e6, mult, 5.0, 1212);
        for i in 0..2000 {
            p.enqueue(pkt(i, PriorityClass::VideoS1, 1212), 0.0).unwrap();
        }
        let mut bytes = 0;
        for t in 1..=200 {
            bytes += p.pace_tick(t as f64 * 5.0).iter().map(|p| p.size_bytes).sum::<usize>();
        }
        bytes as f64 * 8.0
    }

    #[test]
    fn burst_multiplier_drains_faster() {
        let unit = drain_rate(Multiplier::Unit);
        let burst = drain_rate(Multiplier::Burst {
            factor: 2.5,
            policy: BurstPolicy::Backlogged,
        });
        assert!((unit / 1e6 - 1.0).abs() < 0.05, "{unit}");
        assert!((burst / 2.5e6 - 1.0).abs() < 0.05, "{burst}");
    }

    #[test]
    fn backlogged_policy_idles_at_unit_rate() {
        let mut p = PacerQueue::new(1e6, Multiplier::Burst { factor: 2.5, policy: BurstPolicy::Backlogged }, 5.0, 1212);
        p.enqueue(pkt(1, PriorityClass::VideoS1, 300), 0.0).unwrap();
        p.pace_tick(5.0);
        assert_eq!(p.snapshot().multiplier, 1.0);
    }

    proptest! {
        #[test]
        fn conservation_and_priority(
            arrivals in prop::collection::vec((0usize..5, 60usize..1212, 0u32..40), 1..300),
            rate in 3e5f64..5e6,
        ) {
            let mut p = PacerQueue::new(rate, Multiplier::Unit, 5.0, 1212);
            let mut sent = Vec::new();
            let mut next = 0usize;
            let mut arrivals = arrivals;
            arrivals.sort_by_key(|a| a.2);
            for tick in 0..20_000u32 {
                while next < arrivals.len() && arrivals[next].2 <= tick {
                    let (c, b, _) = arrivals[next];
                    p.enqueue(pkt(next as u64, PriorityClass::ALL[c], b), tick as f64 * 5.0).unwrap();
                    next += 1;
                }
                let before: Vec<usize> = PriorityClass::ALL.iter().map(|c| p.depth(*c)).collect();
                let out = p.pace_tick(tick as f64 * 5.0 + 5.0);
                prop_assert!(p.budget() >= 0.0);
                for q in &out {
                    // nothing of strictly higher priority may remain queued
                    for higher in PriorityClass::ALL.iter().filter(|h| **h < q.priority_class) {
                        prop_assert_eq!(p.depth(*higher), 0);
                    }
                }
                let released: usize = out.len();
                prop_assert_eq!(before.iter().sum::<usize>() - released, PriorityClass::ALL.iter().map(|c| p.depth(*c)).sum::<usize>());
                sent.extend(out);
                if next == arrivals.len() && p.is_empty() {
                    break;
                }
            }
            prop_assert!(p.is_empty());
            let mut ids: Vec<u64> = sent.iter().map(|s| s.pkt_id).collect();
            prop_assert_eq!(ids.len(), arrivals.len());
            ids.sort();
            ids.dedup();
            prop_assert_eq!(ids.len(), arrivals.len());
            // FIFO within a class
            for c in PriorityClass::ALL {
                let order: Vec<u64> = sent.iter().filter(|s| s.priority_class == c).map(|s| s.pkt_id).collect();
                let mut sorted = order.clone();
                sorted.sort();
                prop_assert_eq!(order, sorted);
            }
        }

        #[test]
        fn full_queue_rate_compliance(rate in 3e5f64..8e6, size in 200usize..1212) {
            let mut p = PacerQueue::new(rate, Multiplier::Unit, 5.0, 1212);
            let n = (rate * 3.0 / 8.0 / size as f64) as u64 + 10;
            for i in 0..n {
                p.enqueue(pkt(i, PriorityClass::VideoS1, size), 0.0).unwrap();
            }
            let mut per_tick = Vec::new();
            for t in 1..=400 {
                per_tick.push(p.pace_tick(t as f64 * 5.0).iter().map(|q| q.size_bytes).sum::<usize>());
            }
            for w in per_tick.windows(200).step_by(50) {
                let bytes: usize = w.iter().sum();
                let ratio = bytes as f64 * 8.0 / rate;
                prop_assert!((0.95..=1.05).contains(&ratio), "ratio {}", ratio);
            }
        }
    }
}
