//! Trace-driven bottleneck link.
//!
//! Bandwidth is piecewise constant (zero-order hold; the last sample holds
//! forever). Packets serialize FIFO, wait behind a drop-tail queue measured
//! in milliseconds of backlog, and are lost i.i.d. with the sample's loss
//! rate.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceSample {
    pub t_ms: f64,
    pub bw_bps: f64,
    pub loss_rate: f64,
    pub prop_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BandwidthTrace {
    pub samples: Vec<TraceSample>,
    pub name: String,
}

const BUNDLED: [(&str, &str); 3] = [
    ("5g", include_str!("../traces/5g.csv")),
    ("4g", include_str!("../traces/4g.csv")),
    ("wifi", include_str!("../traces/wifi.csv")),
];

/// Statistical envelope (mean, std in Mbps) of a bundled trace family.
pub fn trace_envelope(kind: &str) -> Option<(f64, f64)> {
    match kind {
        "5g" => Some((2.23, 1.41)),
        "4g" => Some((1.83, 0.53)),
        "wifi" => Some((1.18, 0.20)),
        _ => None,
    }
}

impl BandwidthTrace {
    pub fn new(samples: Vec<TraceSample>, name: impl Into<String>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Validation("bandwidth trace is empty".into()));
        }
        for (i, s) in samples.iter().enumerate() {
            if i > 0 && !(s.t_ms > samples[i - 1].t_ms) {
                return Err(Error::Validation(format!(
                    "trace time not strictly increasing at sample {i} ({} after {})",
                    s.t_ms,
                    samples[i - 1].t_ms
                )));
            }
            if !(s.bw_bps > 0.0) {
                return Err(Error::Validation(format!("sample {i}: bandwidth must be > 0")));
            }
            if !(0.0..=0.5).contains(&s.loss_rate) {
                return Err(Error::Validation(format!("sample {i}: loss rate outside [0, 0.5]")));
            }
            if !(s.prop_ms >= 0.0) {
                return Err(Error::Validation(format!("sample {i}: negative propagation delay")));
            }
        }
        Ok(Self {
            samples,
            name: name.into(),
        })
    }

    /// Constant link at `factor` times `bitrate`.
    pub fn fixed(bitrate_bps: f64, factor: f64, prop_ms: f64, loss_rate: f64) -> Result<Self> {
        Self::new(
            vec![TraceSample {
                t_ms: 0.0,
                bw_bps: bitrate_bps * factor,
                loss_rate,
                prop_ms,
            }],
            format!("fixed-{:.0}", bitrate_bps * factor),
        )
    }

    /// Parses `t_ms,bw_kbps[,loss_rate,prop_ms]`. A non-numeric first line is
    /// treated as a header; `#` lines are comments.
    pub fn parse<R: Read>(r: R, source: &str, default_prop_ms: f64, default_loss: f64) -> Result<Self> {
        let mut text = String::new();
        let mut r = r;
        r.read_to_string(&mut text).map_err(|e| Error::io(source, e))?;
        let mut samples = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let lineno = n + 1;
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if samples.is_empty() && fields[0].parse::<f64>().is_err() && fields[0].starts_with(|c: char| c.is_ascii_alphabetic()) {
                continue;
            }
            let perr = |msg: String| Error::Parse {
                path: source.to_string(),
                line: lineno,
                msg,
            };
            if !(2..=4).contains(&fields.len()) {
                return Err(perr(format!("expected 2-4 columns, got {}", fields.len())));
            }
            let num = |i: usize, what: &str| -> Result<f64> {
                fields[i]
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| perr(format!("bad {what} '{}'", fields[i])))
            };
            let t_ms = num(0, "t_ms")?;
            let bw_bps = num(1, "bw_kbps")? * 1000.0;
            let loss_rate = if fields.len() > 2 { num(2, "loss_rate")? } else { default_loss };
            let prop_ms = if fields.len() > 3 { num(3, "prop_ms")? } else { default_prop_ms };
            samples.push(TraceSample {
                t_ms,
                bw_bps,
                loss_rate,
                prop_ms,
            });
        }
        let name = Path::new(source)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| source.to_string());
        Self::new(samples, name)
    }

    pub fn load(path: &Path, default_prop_ms: f64, default_loss: f64) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::parse(f, &path.display().to_string(), default_prop_ms, default_loss)
    }

    /// One of the bundled traces: `5g`, `4g` or `wifi`.
    pub fn bundled(kind: &str, default_prop_ms: f64, default_loss: f64) -> Result<Self> {
        let (_, text) = BUNDLED
            .iter()
            .find(|(k, _)| *k == kind)
            .ok_or_else(|| Error::Config(format!("no bundled trace '{kind}'")))?;
        let mut t = Self::parse(text.as_bytes(), kind, default_prop_ms, default_loss)?;
        t.name = kind.to_string();
        Ok(t)
    }

    /// Resolves a trace argument: a bundled name or a file path.
    pub fn resolve(spec: &Path, default_prop_ms: f64, default_loss: f64) -> Result<Self> {
        match spec.to_str() {
            Some(k) if BUNDLED.iter().any(|(b, _)| *b == k) => Self::bundled(k, default_prop_ms, default_loss),
            _ => Self::load(spec, default_prop_ms, default_loss),
        }
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let io = |e| Error::io(&self.name, e);
        writeln!(w, "t_ms,bw_kbps,loss_rate,prop_ms").map_err(io)?;
        for s in &self.samples {
            writeln!(w, "{},{:.3},{},{}", s.t_ms, s.bw_bps / 1000.0, s.loss_rate, s.prop_ms).map_err(io)?;
        }
        Ok(())
    }

    /// Index of the sample in force at `t` (zero-order hold).
    fn index_at(&self, t: f64) -> usize {
        match self.samples.partition_point(|s| s.t_ms <= t) {
            0 => 0,
            i => i - 1,
        }
    }

    pub fn at(&self, t: f64) -> &TraceSample {
        &self.samples[self.index_at(t)]
    }

    /// End of the last sample interval (last sample time; holds afterwards).
    pub fn span_ms(&self) -> f64 {
        self.samples.last().map(|s| s.t_ms).unwrap_or(0.0)
    }

    /// Mean and standard deviation of the sample bandwidths.
    pub fn bw_stats(&self) -> (f64, f64) {
        let v: Vec<f64> = self.samples.iter().map(|s| s.bw_bps).collect();
        (crate::analytics::mean(&v), crate::analytics::std_dev(&v))
    }

    /// Window `[start, start + len)` re-based to time zero.
    pub fn slice(&self, start_ms: f64, len_ms: f64) -> Result<Self> {
        let first = self.index_at(start_ms);
        let mut out: Vec<TraceSample> = Vec::new();
        for s in &self.samples[first..] {
            if s.t_ms >= start_ms + len_ms {
                break;
            }
            let mut s = *s;
            s.t_ms = (s.t_ms - start_ms).max(0.0);
            if out.last().is_some_and(|l| l.t_ms >= s.t_ms) {
                out.pop();
            }
            out.push(s);
        }
        Self::new(out, format!("{}@{}", self.name, start_ms))
    }
}

/// Synthetic mobile-like trace: log-normal AR(1) bandwidth, then an exact
/// affine match to the target mean/std.
pub fn gen_synthetic_trace(
    seed: u64,
    duration_s: f64,
    step_ms: f64,
    mean_mbps: f64,
    std_mbps: f64,
    ar: f64,
) -> Result<BandwidthTrace> {
    if !(duration_s > 0.0 && step_ms > 0.0 && mean_mbps > 0.0 && std_mbps >= 0.0) || !(0.0..1.0).contains(&ar) {
        return Err(Error::Config("invalid synthetic trace parameters".into()));
    }
    let n = (duration_s * 1000.0 / step_ms).ceil() as usize;
    let cv = std_mbps / mean_mbps;
    let sigma = (1.0 + cv * cv).ln().sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let innov = Normal::new(0.0, sigma * (1.0 - ar * ar).sqrt()).expect("finite");
    let mut z = Normal::new(0.0, sigma).expect("finite").sample(&mut rng);
    let mut raw = Vec::with_capacity(n);
    for _ in 0..n {
        raw.push(z.exp());
        z = ar * z + innov.sample(&mut rng);
    }
    let m = crate::analytics::mean(&raw);
    let s = crate::analytics::std_dev(&raw).max(1e-12);
    let floor = 0.05 * mean_mbps;
    let samples = raw
        .iter()
        .enumerate()
        .map(|(i, x)| TraceSample {
            t_ms: i as f64 * step_ms,
            bw_bps: (mean_mbps + (x - m) * std_mbps / s).max(floor) * 1e6,
            loss_rate: 0.0,
            prop_ms: 0.0,
        })
        .collect();
    BandwidthTrace::new(samples, format!("synthetic-{seed}"))
}

/// What happened to a packet handed to the link.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LinkOutcome {
    Delivered { arrival: f64 },
    /// Serialized but lost in transit.
    Lost { departure: f64 },
    /// Rejected by the full drop-tail queue.
    Dropped,
}

#[derive(Debug, Clone)]
pub struct Link {
    trace: BandwidthTrace,
    queue_cap_ms: f64,
    busy_until: f64,
    last_arrival: f64,
    rng: ChaCha8Rng,
}

impl Link {
    pub fn new(trace: BandwidthTrace, queue_cap_ms: f64, seed: u64) -> Self {
        Self {
            trace,
            queue_cap_ms,
            busy_until: 0.0,
            last_arrival: f64::NEG_INFINITY,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x114b_0000),
        }
    }

    pub fn trace(&self) -> &BandwidthTrace {
        &self.trace
    }

    pub fn bandwidth_at(&self, t: f64) -> f64 {
        self.trace.at(t).bw_bps
    }

    /// Queued data ahead of a packet arriving now, in milliseconds.
    pub fn backlog_ms(&self, now: f64) -> f64 {
        (self.busy_until - now).max(0.0)
    }

    /// `2 * prop + backlog`; the return path is uncongested.
    pub fn rtt(&self, now: f64) -> f64 {
        2.0 * self.trace.at(now).prop_ms + self.backlog_ms(now)
    }

    /// Time at which `bytes` finish serializing when started at `start`,
    /// integrating over the piecewise-constant bandwidth.
    pub fn serialization_end(&self, start: f64, bytes: usize) -> f64 {
        let mut bits = bytes as f64 * 8.0;
        let mut t = start;
        let mut i = self.trace.index_at(start);
        loop {
            let bw = self.trace.samples[i].bw_bps;
            let seg_end = self
                .trace
                .samples
                .get(i + 1)
                .map(|s| s.t_ms)
                .unwrap_or(f64::INFINITY);
            let need_ms = bits / bw * 1000.0;
            if t + need_ms <= seg_end {
                return t + need_ms;
            }
            bits -= (seg_end - t) / 1000.0 * bw;
            t = seg_end;
            i += 1;
        }
    }

    /// Offers one packet at time `now`.
    pub fn send(&mut self, bytes: usize, now: f64) -> LinkOutcome {
        if self.busy_until - now > self.queue_cap_ms {
            return LinkOutcome::Dropped;
        }
        let start = self.busy_until.max(now);
        let departure = self.serialization_end(start, bytes);
        self.busy_until = departure;
        let sample = *self.trace.at(departure);
        if sample.loss_rate > 0.0 && self.rng.random::<f64>() < sample.loss_rate {
            return LinkOutcome::Lost { departure };
        }
        let arrival = (departure + sample.prop_ms).max(self.last_arrival);
        self.last_arrival = arrival;
        LinkOutcome::Delivered { arrival }
    }
}
