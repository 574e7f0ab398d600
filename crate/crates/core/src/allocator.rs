//! Stream-level time-domain bitrate allocation for the dual phase.
//!
//! During a dual phase of length `T`, stream 1 carries the keyframe `R1`
//! followed by deltas at a reduced rate `f'`, and stream 2 carries a delta in
//! place of the keyframe followed by deltas at the full rate `f`. Both use the
//! delta quantizer `q'`. The solver picks `(f', T, q')` minimizing
//! `q' - q(T)`, where `q(T)` is the delta quantizer a single stream with the
//! same keyframe would afford, subject to `b' + b'' <= b`.

use serde::Serialize;

use crate::encoder::{QuantTable, RqModel};
use crate::error::{Error, Result};
use crate::par::{self, Execution};

const GRID_EPS: f64 = 1e-9;

fn check_span(tf: f64) -> Result<()> {
    if tf < 1.0 - GRID_EPS {
        Err(Error::Domain(format!("T*f = {tf} < 1")))
    } else {
        Ok(())
    }
}

/// Single stream over a window `T` that starts with a keyframe of `r1` bits.
pub fn model_single_stream_rate(f: f64, t: f64, q_bar: f64, c_bar: f64, r1: f64, rq: &RqModel) -> Result<f64> {
    check_span(t * f)?;
    Ok(r1 / t + (t * f - 1.0).max(0.0) / t * rq.required_bits(q_bar, c_bar)?)
}

/// Stream 1: the keyframe, then deltas at `f_prime` with gap-inflated
/// complexity `c_prime`.
pub fn model_stream1_rate(f_prime: f64, t: f64, q_prime: f64, c_prime: f64, r1: f64, rq: &RqModel) -> Result<f64> {
    model_single_stream_rate(f_prime, t, q_prime, c_prime, r1, rq)
}

/// Stream 2: a delta at the keyframe's quantizer `q1`, then deltas at `f`.
pub fn model_stream2_rate(
    f: f64,
    t: f64,
    q_prime: f64,
    q1: f64,
    c1_dprime: f64,
    c_bar: f64,
    rq: &RqModel,
) -> Result<f64> {
    check_span(t * f)?;
    Ok(rq.required_bits(q1, c1_dprime)? / t + (t * f - 1.0).max(0.0) / t * rq.required_bits(q_prime, c_bar)?)
}

/// Delta quantizer a single stream affords over `T` at bitrate `b`,
/// clamped to the table. `None` when the keyframe alone exhausts the budget
/// (the quantizer saturates at the table maximum).
pub fn single_stream_quant(b: f64, f: f64, t: f64, r1: f64, c_bar: f64, rq: &RqModel, table: &QuantTable) -> f64 {
    let deltas = t * f - 1.0;
    let per_delta = (b * t - r1) / deltas;
    if !(deltas > 0.0) || !(per_delta > 0.0) {
        return table.max();
    }
    match rq.invert(per_delta, c_bar) {
        Ok(q) => q.clamp(table.min(), table.max()),
        Err(_) => table.max(),
    }
}

/// Gap SAD model `s * g^rho`, capped at `cap` (but never below `s`).
pub fn gap_sad(base: f64, gap: f64, rho: f64, cap: f64) -> f64 {
    (base * gap.max(1.0).powf(rho)).min(cap.max(base))
}

#[derive(Debug, Clone)]
pub struct AllocProblem {
    /// Total bitrate budget (bps).
    pub b: f64,
    /// Capture frame rate.
    pub f: u32,
    /// Average keyframe rate of the original stream (Hz).
    pub f_k: f64,
    pub eta: f64,
    /// Keyframe size (or, on re-allocation, bits encoded so far).
    pub r1: f64,
    /// Keyframe quantizer.
    pub q1: f64,
    /// Mean delta complexity at the full frame rate.
    pub c_bar: f64,
    /// Complexity of stream 2's first frame.
    pub c1_dprime: f64,
    /// `c_prime[f' - 1]`: delta complexity when stream 1 runs at `f'`.
    pub c_prime: Vec<f64>,
    /// Candidates with `T` below this are excluded (re-allocation).
    pub t_min: f64,
    pub rq: RqModel,
    pub table: QuantTable,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Allocation {
    pub b_prime: f64,
    pub b_dprime: f64,
    pub f_prime: u32,
    /// `T = n / f'`.
    pub n: u32,
    pub t: f64,
    pub q_bar_prime: f64,
    pub q_index: usize,
    /// Single-stream reference quantizer `q(T)`.
    pub q_bar: f64,
    /// Objective in quantizer-step units.
    pub delta_q: f64,
    /// Objective in table-index units.
    pub delta_q_index: f64,
    pub scaled: bool,
    pub feasible: bool,
    /// `(f', T)` pairs times table entries in the search grid.
    pub grid_size: usize,
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    f_prime: u32,
    n: u32,
    q_index: usize,
    delta_q: f64,
    q_bar: f64,
    b_prime: f64,
    b_dprime: f64,
}

impl Candidate {
    /// Strict preference under the documented tie-break.
    fn better_than(&self, other: &Candidate) -> bool {
        let tol = 1e-12 * (1.0 + self.delta_q.abs().max(other.delta_q.abs()));
        if (self.delta_q - other.delta_q).abs() > tol {
            return self.delta_q < other.delta_q;
        }
        if self.q_index != other.q_index {
            return self.q_index < other.q_index;
        }
        if self.f_prime != other.f_prime {
            return self.f_prime > other.f_prime;
        }
        let (ts, to) = (self.n as f64 / self.f_prime as f64, other.n as f64 / other.f_prime as f64);
        ts < to
    }
}

impl AllocProblem {
    pub fn t_max(&self) -> f64 {
        1.0 / (self.eta * self.f_k)
    }

    fn validate(&self) -> Result<()> {
        if !(self.b > 0.0 && self.r1 > 0.0 && self.f_k > 0.0 && self.eta > 0.0 && self.f >= 1) {
            return Err(Error::Domain("allocation needs b, R1, f_k, eta > 0 and f >= 1".into()));
        }
        if self.c_prime.len() != self.f as usize {
            return Err(Error::Domain(format!(
                "c_prime has {} entries, expected {}",
                self.c_prime.len(),
                self.f
            )));
        }
        Ok(())
    }

    /// Valid `n` for a given `f'`: `T = n/f'` in `[t_min, t_max]` and `T f > 1`.
    fn spans(&self, f_prime: u32) -> impl Iterator<Item = u32> + '_ {
        let fp = f_prime as f64;
        let n_max = (self.t_max() * fp + GRID_EPS).floor() as u32;
        (1..=n_max).filter(move |&n| {
            let t = n as f64 / fp;
            t + GRID_EPS >= self.t_min && t * self.f as f64 > 1.0 + GRID_EPS
        })
    }

    pub fn grid_size(&self) -> usize {
        (1..=self.f).map(|fp| self.spans(fp).count()).sum::<usize>() * self.table.len()
    }

    fn rates(&self, f_prime: u32, t: f64, q: f64) -> (f64, f64) {
        let a = &self.rq;
        let f = self.f as f64;
        let fp = f_prime as f64;
        let b1 = self.r1 / t + (t * fp - 1.0) / t * a.bits(q, self.c_prime[f_prime as usize - 1]);
        let b2 = a.bits(self.q1, self.c1_dprime) / t + (t * f - 1.0) / t * a.bits(q, self.c_bar);
        (b1, b2)
    }

    /// Best feasible and least-violating candidates for one `f'`.
    fn solve_row(&self, f_prime: u32) -> (Option<Candidate>, Option<(f64, Candidate)>) {
        let mut best: Option<Candidate> = None;
        let mut least: Option<(f64, Candidate)> = None;
        for n in self.spans(f_prime) {
            let t = n as f64 / f_prime as f64;
            let q_bar = single_stream_quant(self.b, self.f as f64, t, self.r1, self.c_bar, &self.rq, &self.table);
            for qi in 0..self.table.len() {
                let q = self.table.q(qi);
                let (b1, b2) = self.rates(f_prime, t, q);
                let cand = Candidate {
                    f_prime,
                    n,
                    q_index: qi,
                    delta_q: q - q_bar,
                    q_bar,
                    b_prime: b1,
                    b_dprime: b2,
                };
                let excess = b1 + b2 - self.b;
                if excess <= 0.0 {
                    // rates fall with q, so the first fit is this span's best
                    if best.is_none_or(|b| cand.better_than(&b)) {
                        best = Some(cand);
                    }
                    break;
                }
                if qi + 1 == self.table.len() && least.is_none_or(|(e, _)| excess < e) {
                    least = Some((excess, cand));
                }
            }
        }
        (best, least)
    }

    fn finish(&self, c: Candidate, feasible: bool, grid_size: usize) -> Allocation {
        let total = c.b_prime + c.b_dprime;
        let (mut b_prime, mut b_dprime, mut scaled) = (c.b_prime, c.b_dprime, false);
        if feasible && total < self.b {
            let k = self.b / total;
            b_prime *= k;
            b_dprime *= k;
            scaled = true;
        }
        let q = self.table.q(c.q_index);
        Allocation {
            b_prime,
            b_dprime,
            f_prime: c.f_prime,
            n: c.n,
            t: c.n as f64 / c.f_prime as f64,
            q_bar_prime: q,
            q_index: c.q_index,
            q_bar: c.q_bar,
            delta_q: c.delta_q,
            delta_q_index: c.q_index as f64 - self.table.continuous_index(c.q_bar),
            scaled,
            feasible,
            grid_size,
        }
    }
}

/// Exhaustive traversal of the `(f', T, q')` grid.
///
/// Infeasible problems return the least-violating candidate with
/// `feasible = false`; an empty grid is an error.
pub fn allocate(p: &AllocProblem) -> Result<Allocation> {
    allocate_with(p, Execution::default())
}

pub fn allocate_with(p: &AllocProblem, exec: Execution) -> Result<Allocation> {
    p.validate()?;
    let rows: Vec<u32> = (1..=p.f).collect();
    let results = par::map(exec, &rows, |&fp| p.solve_row(fp));
    let mut best: Option<Candidate> = None;
    let mut least: Option<(f64, Candidate)> = None;
    for (b, l) in results {
        if let Some(b) = b {
            if best.is_none_or(|x| b.better_than(&x)) {
                best = Some(b);
            }
        }
        if let Some((e, c)) = l {
            if least.is_none_or(|(x, _)| e < x) {
                least = Some((e, c));
            }
        }
    }
    let grid = p.grid_size();
    match (best, least) {
        (Some(c), _) => Ok(p.finish(c, true, grid)),
        (None, Some((_, c))) => Ok(p.finish(c, false, grid)),
        (None, None) => Err(Error::Domain(format!(
            "empty allocation grid (T_max = {:.4} s, f = {})",
            p.t_max(),
            p.f
        ))),
    }
}

/// Re-solves after a target change, with `R1` replaced by everything
/// encoded since activation and `T` restricted to the remaining window.
pub fn reallocate(p: &AllocProblem, new_b: f64, encoded_bits_so_far: f64, elapsed_s: f64) -> Result<Allocation> {
    let mut q = p.clone();
    q.b = new_b;
    q.r1 = encoded_bits_so_far;
    q.t_min = elapsed_s;
    allocate(&q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn table() -> QuantTable {
        QuantTable::geometric(0.625, 0.625 * 2f64.powf(51.0 / 6.0)).unwrap()
    }

    pub(crate) fn instance(rng: &mut ChaCha8Rng, f: u32, f_k: f64) -> AllocProblem {
        let rq = RqModel::new(6000.0, 40000.0);
        let table = table();
        let c_bar = rng.random_range(80.0..200.0);
        let ratio = rng.random_range(5.0..10.0);
        let b = rng.random_range(5e5..2.5e6);
        // keyframe at the quantizer a plain stream would use
        let per = b / f as f64 / (1.0 + (ratio - 1.0) * f_k / f as f64);
        let q1 = table.q(table.nearest_index(rq.invert(per, c_bar).unwrap()));
        let r1 = rq.bits(q1, ratio * c_bar);
        let rho = 0.75;
        let c_prime = (1..=f)
            .map(|fp| c_bar * gap_sad(1.0, f as f64 / fp as f64, rho, 5.0))
            .collect();
        AllocProblem {
            b,
            f,
            f_k,
            eta: 5.0,
            r1,
            q1,
            c_bar,
            c1_dprime: c_bar,
            c_prime,
            t_min: 0.0,
            rq,
            table,
        }
    }

    /// Independent brute force: enumerate every triple, filter, sort.
    fn oracle(p: &AllocProblem) -> Option<(u32, u32, usize)> {
        let (a1, a2) = (p.rq.alpha1, p.rq.alpha2);
        let r = |q: f64, c: f64| c * a1 / q + c * a2 / (q * q);
        let f = p.f as f64;
        let mut all = Vec::new();
        for fp in 1..=p.f {
            let mut n = 1u32;
            loop {
                let t = n as f64 / fp as f64;
                if t > 1.0 / (p.eta * p.f_k) + 1e-9 {
                    break;
                }
                n += 1;
                if t * f <= 1.0 + 1e-9 {
                    continue;
                }
                // reference quantizer by bisection on the monotone rate
                let per = (p.b * t - p.r1) / (t * f - 1.0);
                let qbar = if per <= 0.0 {
                    p.table.max()
                } else {
                    let (mut lo, mut hi) = (1e-9f64, 1e12f64);
                    for _ in 0..200 {
                        let mid = (lo * hi).sqrt();
                        if r(mid, p.c_bar) > per { lo = mid } else { hi = mid }
                    }
                    hi.clamp(p.table.min(), p.table.max())
                };
                for (qi, &q) in p.table.steps().iter().enumerate() {
                    let s1 = (p.r1 + (t * fp as f64 - 1.0) * r(q, p.c_prime[fp as usize - 1])) / t;
                    let s2 = (r(p.q1, p.c1_dprime) + (t * f - 1.0) * r(q, p.c_bar)) / t;
                    if s1 + s2 <= p.b {
                        all.push((q - qbar, qi, fp, t, n - 1));
                    }
                }
            }
        }
        all.sort_by(|x, y| {
            let tol = 1e-9 * (1.0 + x.0.abs().max(y.0.abs()));
            if (x.0 - y.0).abs() > tol {
                return x.0.total_cmp(&y.0);
            }
            x.1.cmp(&y.1).then(y.2.cmp(&x.2)).then(x.3.total_cmp(&y.3))
        });
        all.first().map(|c| (c.2, c.4, c.1))
    }

    #[test]
    fn hand_evaluated_single_stream() {
        // choose q, c with R(q, c) = 40000: c (a1/q + a2/q^2) with a2 = 0
        let rq = RqModel::new(40000.0, 0.0);
        let v = model_single_stream_rate(30.0, 1.0, 1.0, 1.0, 500_000.0, &rq).unwrap();
        assert!((v - 1_660_000.0).abs() < 1e-6);
        let only_key = model_single_stream_rate(30.0, 1.0 / 30.0, 1.0, 1.0, 500_000.0, &rq).unwrap();
        assert!((only_key - 500_000.0 * 30.0).abs() < 1e-6);
        assert!(model_single_stream_rate(30.0, 0.01, 1.0, 1.0, 1.0, &rq).is_err());
    }

    #[test]
    fn doubling_t_halves_keyframe_share() {
        let rq = RqModel::new(1000.0, 0.0);
        let a = model_single_stream_rate(30.0, 1.0, 1.0, 0.0, 600_000.0, &rq).unwrap();
        let b = model_single_stream_rate(30.0, 2.0, 1.0, 0.0, 600_000.0, &rq).unwrap();
        assert!((a / b - 2.0).abs() < 1e-12);
    }

    #[test]
    fn stream1_at_full_rate_is_single_stream() {
        let rq = RqModel::new(6000.0, 40000.0);
        let a = model_stream1_rate(30.0, 0.4, 12.0, 150.0, 3e5, &rq).unwrap();
        let b = model_single_stream_rate(30.0, 0.4, 12.0, 150.0, 3e5, &rq).unwrap();
        assert_eq!(a, b);
        let key_only = model_stream1_rate(5.0, 0.2, 12.0, 150.0, 3e5, &rq).unwrap();
        assert!((key_only - 3e5 / 0.2).abs() < 1e-6);
    }

    #[test]
    fn stream2_homogeneous_case() {
        let rq = RqModel::new(6000.0, 40000.0);
        let v = model_stream2_rate(30.0, 1.0, 10.0, 10.0, 150.0, 150.0, &rq).unwrap();
        assert!((v - 30.0 * rq.bits(10.0, 150.0)).abs() < 1e-6);
    }

    #[test]
    fn split_streams_sum_to_single_at_matched_quantizer() {
        // Operating point of the bitrate drops: single 1676800 bps; stream 2
        // (keyframe replaced) 1068717; stream 1 at reduced rate 649760.
        let rq = RqModel::new(1.0, 0.0);
        let f = 30.0;
        let t = 1.0;
        let delta = 1_068_717.0 / 30.0;
        let r1 = 1_676_800.0 - 29.0 * delta;
        let single = model_single_stream_rate(f, t, 1.0, delta, r1, &rq).unwrap();
        let s2 = model_stream2_rate(f, t, 1.0, 1.0, delta, delta, &rq).unwrap();
        let s1 = model_stream1_rate(2.0, t, 1.0, 649_760.0 - r1, r1, &rq).unwrap();
        assert!((single - 1_676_800.0).abs() < 1e-6);
        assert!((s2 - 1_068_717.0).abs() < 1e-6);
        assert!(((s1 + s2) / single - 1.0).abs() < 0.03);
    }

    #[test]
    fn lower_f_prime_lowers_stream1_rate_on_profiles() {
        use crate::encoder::fit_sad_cubic;
        use crate::media::{gen_synthetic_content, Profile};
        let rq = RqModel::new(6000.0, 40000.0);
        for p in Profile::ALL {
            let tr = gen_synthetic_content(11, 60.0, 30, p).unwrap();
            let samples: Vec<(f64, f64)> = (1..tr.len())
                .filter(|&i| !tr.starts_scene(i))
                .map(|i| (tr.frames[i - 1].sad_next, tr.frames[i].satd_base))
                .collect();
            let cubic = fit_sad_cubic(&samples).unwrap();
            let s = tr.sad_median();
            let c_bar = cubic.predict(s);
            let r1 = rq.bits(8.0, 7.0 * c_bar);
            let mut prev = f64::INFINITY;
            for fp in [30u32, 15, 10, 6, 5, 3] {
                let c = cubic.predict(gap_sad(s, 30.0 / fp as f64, 0.75, 5.0 * s));
                let rate = model_stream1_rate(fp as f64, 1.0, 8.0, c, r1, &rq).unwrap();
                assert!(rate < prev, "{p}: f'={fp} rate {rate} not below {prev}");
                prev = rate;
            }
        }
    }

    #[test]
    fn matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut checked = 0;
        for i in 0..50 {
            let f = [15, 30, 60][i % 3];
            let f_k = [0.5, 0.25, 0.1][(i / 3) % 3];
            let p = instance(&mut rng, f, f_k);
            let got = allocate(&p).unwrap();
            match oracle(&p) {
                Some((fp, n, qi)) => {
                    assert!(got.feasible);
                    assert_eq!((got.f_prime, got.n, got.q_index), (fp, n, qi), "instance {i}");
                    checked += 1;
                }
                None => assert!(!got.feasible),
            }
            let seq = allocate_with(&p, Execution::Sequential).unwrap();
            assert_eq!(seq, got);
        }
        assert!(checked >= 40);
    }

    #[test]
    fn feasibility_and_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let p = instance(&mut rng, 30, 0.5);
            let a = allocate(&p).unwrap();
            if !a.feasible {
                continue;
            }
            assert!(a.t <= p.t_max() + 1e-9);
            assert!(a.f_prime >= 1 && a.f_prime <= 30);
            assert_eq!(p.table.q(a.q_index), a.q_bar_prime);
            assert!(a.delta_q.is_finite());
            // before scaling the pair fits the budget; after, it fills it
            let (b1, b2) = p.rates(a.f_prime, a.t, a.q_bar_prime);
            assert!(b1 + b2 <= p.b);
            if a.scaled {
                assert!(((a.b_prime + a.b_dprime) / p.b - 1.0).abs() < 1e-12);
                assert!((a.b_prime / a.b_dprime - b1 / b2).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn no_burst_keyframe_keeps_full_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut p = instance(&mut rng, 30, 0.5);
        // keyframe no larger than a delta, and a budget that never binds
        p.r1 = p.rq.bits(p.q1, p.c_bar);
        p.c_prime = vec![p.c_bar; 30];
        p.b = 1e9;
        let a = allocate(&p).unwrap();
        assert!(a.feasible);
        assert_eq!(a.delta_q, 0.0);
        assert_eq!(a.f_prime, 30);
    }

    #[test]
    fn infeasible_returns_flagged_least_violation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut p = instance(&mut rng, 30, 0.5);
        p.b = 1000.0;
        let a = allocate(&p).unwrap();
        assert!(!a.feasible);
        assert!(!a.scaled);
        assert_eq!(a.q_index, 51);
    }

    #[test]
    fn candidate_count_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (f, fk) in [(15u32, 0.5), (30, 0.25), (60, 0.1)] {
            let p = instance(&mut rng, f, fk);
            let bound = 52.0 * f as f64 * (f as f64 / (5.0 * fk));
            assert!(p.grid_size() as f64 <= bound);
            assert!(p.grid_size() > 0);
        }
    }

    #[test]
    fn reallocation_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut worse = 0;
        let mut total = 0;
        for _ in 0..30 {
            let p = instance(&mut rng, 30, 0.25);
            let a = allocate(&p).unwrap();
            let same = reallocate(&p, p.b, p.r1, 0.0).unwrap();
            assert_eq!(a, same);
            if !a.feasible {
                continue;
            }
            let half = reallocate(&p, p.b / 2.0, p.r1, 0.0).unwrap();
            total += 1;
            if !half.feasible || half.q_bar_prime > a.q_bar_prime {
                worse += 1;
            }
            if half.feasible && a.delta_q > 0.0 {
                assert!(half.delta_q > a.delta_q, "{} vs {}", half.delta_q, a.delta_q);
            }
        }
        assert_eq!(worse, total);
    }

    #[test]
    fn reallocation_near_window_end_has_one_span() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let p = instance(&mut rng, 15, 0.5);
        let a = reallocate(&p, p.b, p.r1 * 1.2, p.t_max() - 1e-6).unwrap();
        assert!((a.t - p.t_max()).abs() < 1e-9);
    }
}
