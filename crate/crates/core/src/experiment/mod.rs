//! Orchestration: one run directory per experiment, tail fits and
//! side-by-side comparison of finished runs.

mod train;

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::analytics::{
    empirical_ccdf, fit_power_tail, format_table, percentile, qoe_report, tail_mass, tail_slash, QoeReport,
    ReportParams, Table, TailFit,
};
use crate::config::{ExperimentConfig, RatePolicy};
use crate::error::{Error, Result};
use crate::media::{gen_with_params, ContentTrace};
use crate::netsim::BandwidthTrace;
use crate::ratecontrol::{Checkpoint, StateHistory};
use crate::sim::{simulate, Controller, SimOutput};

pub use train::{curve_episodes, split_segments, train, TrainOptions, TrainSummary};

pub const FRAMES_CSV: &str = "frames.csv";
pub const EVENTS_CSV: &str = "events.csv";
pub const ALLOC_CSV: &str = "alloc.csv";
pub const NET_CSV: &str = "net.csv";
pub const REPORT_CSV: &str = "report.csv";
pub const TAILFIT_JSON: &str = "tailfit.json";
pub const CDF_CSV: &str = "cdf.csv";

/// Quantile used for `x_high` when none is given.
pub const DEFAULT_X_HIGH_PCT: f64 = 85.0;

/// The configured content trace, or a synthetic one covering the run.
pub fn load_content(cfg: &ExperimentConfig, duration_s: f64, seed: u64) -> Result<ContentTrace> {
    match &cfg.content.trace {
        Some(p) => ContentTrace::load(p, cfg.content.fps),
        None => gen_with_params(seed, duration_s, cfg.content.fps, cfg.content.profile.name(), &cfg.profile_params()),
    }
}

/// The configured bandwidth trace starting at `trace_offset_ms`, or a fixed
/// link at `fixed_bw_factor` times the initial target.
pub fn load_network(cfg: &ExperimentConfig) -> Result<BandwidthTrace> {
    let n = &cfg.network;
    match &n.trace {
        Some(p) => {
            let t = BandwidthTrace::resolve(p, n.prop_delay_ms, n.loss_rate)?;
            if n.trace_offset_ms > 0.0 {
                t.slice(n.trace_offset_ms, f64::INFINITY)
            } else {
                Ok(t)
            }
        }
        None => BandwidthTrace::fixed(cfg.run.bitrate_bps, n.fixed_bw_factor, n.prop_delay_ms, n.loss_rate),
    }
}

pub fn state_dim(cfg: &ExperimentConfig) -> usize {
    StateHistory::from_config(&cfg.rl, &cfg.rate).dim()
}

pub fn make_controller(cfg: &ExperimentConfig) -> Result<Controller> {
    Ok(match cfg.run.policy {
        RatePolicy::Fixed => Controller::Fixed,
        RatePolicy::Gcc => Controller::Gcc,
        RatePolicy::Rl => {
            let path = cfg
                .run
                .checkpoint
                .as_ref()
                .ok_or_else(|| Error::Config("policy RL needs run.checkpoint".into()))?;
            let ck = Checkpoint::load(path, &cfg.rl, state_dim(cfg))?;
            Controller::Rl { policy: ck.policy, greedy: true, seed: cfg.run.seed }
        }
    })
}

/// What `run_experiment` leaves behind.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub report: QoeReport,
    pub tail: TailReport,
    pub keyframes: usize,
    pub allocations: usize,
}

pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    let content = load_content(cfg, cfg.run.duration_s, cfg.run.seed)?;
    let trace = load_network(cfg)?;
    let controller = make_controller(cfg)?;
    let sim = simulate(cfg, &content, trace, controller)?;
    write_run(cfg, &sim, out)
}

fn header(cfg: &ExperimentConfig) -> String {
    format!("# config_hash={} seed={} duration_s={}\n", cfg.hash(), cfg.run.seed, cfg.run.duration_s)
}

fn csv_bytes<T: Serialize>(head: &str, rows: impl IntoIterator<Item = T>, columns: &[&str]) -> Result<Vec<u8>> {
    let mut buf = head.as_bytes().to_vec();
    {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(&mut buf);
        w.write_record(columns)?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io("<buffer>", e))?;
    }
    Ok(buf)
}

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    let p = dir.join(name);
    std::fs::write(&p, bytes).map_err(|e| Error::io(p, e))
}

#[derive(Serialize)]
struct FrameRow {
    frame_id: u64,
    capture_idx: usize,
    capture_ts: f64,
    stream: u8,
    frame_type: &'static str,
    qp_index: f64,
    size_bits: u64,
    decodable: bool,
    rendered: bool,
    degraded: bool,
    stalled: bool,
    completion: f64,
    render_ts: Option<f64>,
    d_encode: f64,
    d_pacer: f64,
    d_trans: f64,
    d_jitter: f64,
    d_decode: f64,
    d_other: f64,
    d_e2e: f64,
    psnr: Option<f64>,
}

const FRAME_HEADER: [&str; 21] = [
    "frame_id", "capture_idx", "capture_ts", "stream", "frame_type", "qp_index", "size_bits", "decodable",
    "rendered", "degraded", "stalled", "completion", "render_ts", "d_encode", "d_pacer", "d_trans", "d_jitter",
    "d_decode", "d_other", "d_e2e", "psnr",
];

const ALLOC_HEADER: [&str; 14] = [
    "ts", "b", "R1", "f_prime", "T", "q_bar_prime", "b_prime", "b_dprime", "delta_q", "scaled", "status", "q_index",
    "delta_q_index", "q_bar",
];

const NET_HEADER: [&str; 8] =
    ["ts", "bw_bps", "rtt_ms", "throughput_bps", "loss", "target_bps", "pacer_bytes", "dual_active"];

const REPORT_HEADER: [&str; 14] = [
    "label", "fps", "stall_rate_pct", "d_trans", "d_pacer", "d_jitter", "rtt", "loss_pct", "e2e_mean", "e2e_p97",
    "qp", "psnr", "bitrate_kbps", "rendered",
];

/// Writes every artifact of a finished simulation into `dir`.
pub fn write_run(cfg: &ExperimentConfig, sim: &SimOutput, dir: &Path) -> Result<RunSummary> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let head = header(cfg);

    let frames = csv_bytes(
        &head,
        sim.frames.iter().map(|f| FrameRow {
            frame_id: f.frame_id,
            capture_idx: f.capture_idx,
            capture_ts: f.capture_ts,
            stream: f.stream.number(),
            frame_type: f.frame_type.as_str(),
            qp_index: f.qp_index,
            size_bits: f.size_bits,
            decodable: f.decodable,
            rendered: f.rendered,
            degraded: f.degraded,
            stalled: f.stalled,
            completion: f.completion,
            render_ts: f.render_ts,
            d_encode: f.delay.d_encode,
            d_pacer: f.delay.d_pacer,
            d_trans: f.delay.d_trans,
            d_jitter: f.delay.d_jitter,
            d_decode: f.delay.d_decode,
            d_other: f.delay.d_other,
            d_e2e: f.delay.d_e2e,
            psnr: f.psnr,
        }),
        &FRAME_HEADER,
    )?;
    write_file(dir, FRAMES_CSV, &frames)?;

    let events = csv_bytes(&head, sim.events.iter().map(|e| (e.ts, e.kind, &e.detail)), &["ts", "kind", "detail"])?;
    write_file(dir, EVENTS_CSV, &events)?;

    let allocs = csv_bytes(
        &head,
        sim.allocs.iter().map(|a| {
            let x = a.allocation.as_ref();
            (
                a.ts,
                a.b,
                a.r1,
                x.map(|x| x.f_prime),
                x.map(|x| x.t),
                x.map(|x| x.q_bar_prime),
                x.map(|x| x.b_prime),
                x.map(|x| x.b_dprime),
                x.map(|x| x.delta_q),
                x.map(|x| x.scaled),
                a.status,
                x.map(|x| x.q_index),
                x.map(|x| x.delta_q_index),
                x.map(|x| x.q_bar),
            )
        }),
        &ALLOC_HEADER,
    )?;
    write_file(dir, ALLOC_CSV, &allocs)?;

    let net = csv_bytes(&head, sim.net.iter(), &NET_HEADER)?;
    write_file(dir, NET_CSV, &net)?;

    // The report is computed from the bytes just written, so it can always
    // be reproduced from the run directory alone.
    let params = ReportParams { duration_s: cfg.run.duration_s, stall_fps: cfg.receiver.stall_fps };
    // Labelled by configuration, not by directory, so reruns match byte for byte.
    let label = format!("{}+{}", cfg.run.mode.as_str(), cfg.run.policy.as_str());
    let ft = Table::from_reader(frames.as_slice(), FRAMES_CSV)?;
    let nt = Table::from_reader(net.as_slice(), NET_CSV)?;
    let report = qoe_report(&label, &ft, &nt, &params)?;
    write_file(dir, REPORT_CSV, &csv_bytes(&head, [&report], &REPORT_HEADER)?)?;

    let e2e = rendered_e2e(&ft)?;
    let tail = tail_report(&e2e, None, cfg.hash(), cfg.run.seed);
    tail.save(&dir.join(TAILFIT_JSON))?;
    write_file(dir, CDF_CSV, &cdf_bytes(&head, &e2e)?)?;

    Ok(RunSummary {
        dir: dir.to_path_buf(),
        report,
        tail,
        keyframes: sim.keyframes,
        allocations: sim.allocs.iter().filter(|a| a.status != "realloc").count(),
    })
}

/// E2E delays of rendered frames from a frames table.
pub fn rendered_e2e(frames: &Table) -> Result<Vec<f64>> {
    frames.require(&["rendered", "d_e2e"])?;
    let r = frames.bools("rendered")?;
    Ok(frames.f64s("d_e2e")?.into_iter().zip(r).filter(|(_, r)| *r).map(|(v, _)| v).collect())
}

/// Fitted against empirical tail mass at one delay.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CcdfCheck {
    pub x: f64,
    pub fitted: f64,
    pub empirical: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TailReport {
    pub config_hash: String,
    pub seed: u64,
    pub samples: usize,
    pub x_high: f64,
    pub fit: Option<TailFit>,
    /// Why no fit was produced.
    pub error: Option<String>,
    pub check: Vec<CcdfCheck>,
}

impl TailReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut json = serde_json::to_vec_pretty(self)?;
        json.push(b'\n');
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }
}

/// Power-law fit above `x_high` (default: the 85th percentile) together
/// with a comparison against the empirical tail mass.
pub fn tail_report(samples: &[f64], x_high: Option<f64>, config_hash: String, seed: u64) -> TailReport {
    let x_high = match x_high {
        Some(x) => x,
        None if samples.is_empty() => 0.0,
        None => percentile(samples, DEFAULT_X_HIGH_PCT).unwrap_or(0.0),
    };
    let (fit, error) = match fit_power_tail(samples, x_high) {
        Ok(f) => (Some(f), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let mut check = Vec::new();
    if let Some(f) = fit.as_ref().filter(|f| f.integrable) {
        let hi = samples.iter().cloned().fold(x_high, f64::max);
        for i in 1..=8 {
            let x = x_high + (hi - x_high) * i as f64 / 8.0;
            if let Ok(m) = tail_mass(f, x) {
                check.push(CcdfCheck { x, fitted: m, empirical: empirical_ccdf(samples, x) });
            }
        }
    }
    TailReport { config_hash, seed, samples: samples.len(), x_high, fit, error, check }
}

fn cdf_bytes(head: &str, samples: &[f64]) -> Result<Vec<u8>> {
    let mut s = samples.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let n = s.len() as f64;
    let mut rows = Vec::new();
    if let (Some(lo), Some(hi)) = (s.first(), s.last()) {
        let mut i = 0;
        for x in (lo.floor() as i64)..=(hi.ceil() as i64) {
            let x = x as f64;
            while i < s.len() && s[i] <= x {
                i += 1;
            }
            rows.push((x, i as f64 / n, 1.0 - i as f64 / n));
        }
    }
    csv_bytes(head, rows, &["x_ms", "cdf", "ccdf"])
}

/// Re-fits the tail of a finished run.
pub fn fit_tail_dir(run: &Path, x_high: Option<f64>) -> Result<TailReport> {
    let frames = Table::read(&run.join(FRAMES_CSV))?;
    let (hash, seed) = read_meta(&run.join(FRAMES_CSV))?;
    Ok(tail_report(&rendered_e2e(&frames)?, x_high, hash, seed))
}

/// Config hash and seed from a run file's metadata line.
pub fn read_meta(path: &Path) -> Result<(String, u64)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let line = text.lines().next().unwrap_or("");
    let field = |k: &str| {
        line.trim_start_matches('#')
            .split_whitespace()
            .find_map(|kv| kv.strip_prefix(k).and_then(|v| v.strip_prefix('=')))
            .map(str::to_string)
    };
    let bad = || Error::Schema(format!("{} has no config_hash/seed metadata", path.display()));
    let hash = field("config_hash").ok_or_else(bad)?;
    let seed = field("seed").and_then(|s| s.parse().ok()).ok_or_else(bad)?;
    Ok((hash, seed))
}

/// Side-by-side reports with deltas against the first run.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub columns: Vec<String>,
    pub labels: Vec<String>,
    pub values: Vec<Vec<f64>>,
    pub slashes: Vec<Slash>,
}

/// Tail-mass reduction of a run relative to the first one at delay `x`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Slash {
    pub label: String,
    pub x: f64,
    pub fitted: Option<f64>,
    pub empirical: Option<f64>,
}

impl Comparison {
    pub fn deltas(&self) -> Vec<Vec<f64>> {
        self.values.iter().map(|v| v.iter().zip(&self.values[0]).map(|(a, b)| a - b).collect()).collect()
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{:<16}", "run");
        for c in &self.columns {
            s += &format!(" {:>14}", c);
        }
        s.push('\n');
        let deltas = self.deltas();
        for (i, l) in self.labels.iter().enumerate() {
            s += &format!("{:<16}", l);
            for v in &self.values[i] {
                s += &format!(" {:>14.3}", v);
            }
            s.push('\n');
            if i > 0 {
                s += &format!("{:<16}", "  delta");
                for d in &deltas[i] {
                    s += &format!(" {:>+14.3}", d);
                }
                s.push('\n');
            }
        }
        for sl in &self.slashes {
            let pct = |v: Option<f64>| v.map(|v| format!("{:.1}%", 100.0 * v)).unwrap_or_else(|| "n/a".into());
            s += &format!(
                "tail slash {} at {} ms: fitted {} empirical {}\n",
                sl.label,
                sl.x,
                pct(sl.fitted),
                pct(sl.empirical)
            );
        }
        s
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut cols = vec!["label".to_string(), "row".to_string()];
        cols.extend(self.columns.iter().cloned());
        let mut buf = Vec::new();
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            w.write_record(&cols)?;
            let deltas = self.deltas();
            for (i, l) in self.labels.iter().enumerate() {
                for (kind, v) in [("value", &self.values[i]), ("delta", &deltas[i])] {
                    let mut rec = vec![l.clone(), kind.to_string()];
                    rec.extend(v.iter().map(|x| x.to_string()));
                    w.write_record(&rec)?;
                }
            }
            w.flush().map_err(|e| Error::io("<buffer>", e))?;
        }
        Ok(buf)
    }
}

/// Delays at which tail slash is reported.
pub const SLASH_AT_MS: [f64; 2] = [200.0, 250.0];

pub fn compare_runs(dirs: &[PathBuf]) -> Result<Comparison> {
    if dirs.len() < 2 {
        return Err(Error::Config("compare needs at least two run directories".into()));
    }
    let mut tables = Vec::new();
    for d in dirs {
        if !d.is_dir() {
            return Err(Error::Config(format!("run directory {} does not exist", d.display())));
        }
        tables.push(Table::read(&d.join(REPORT_CSV))?);
    }
    let base = &tables[0].headers;
    for (d, t) in dirs.iter().zip(&tables).skip(1) {
        if &t.headers != base {
            let mut odd: Vec<&str> = t.headers.iter().filter(|h| !base.contains(h)).map(String::as_str).collect();
            odd.extend(base.iter().filter(|h| !t.headers.contains(h)).map(String::as_str));
            if odd.is_empty() {
                odd.push("(column order)");
            }
            return Err(Error::Schema(format!(
                "{} does not match {}: {}",
                d.display(),
                dirs[0].display(),
                odd.join(", ")
            )));
        }
    }
    let columns: Vec<String> = base.iter().filter(|h| *h != "label").cloned().collect();
    let mut labels = Vec::new();
    let mut values = Vec::new();
    for (d, t) in dirs.iter().zip(&tables) {
        labels.push(d.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
        let mut row = Vec::new();
        for c in &columns {
            row.push(t.f64s(c)?.first().copied().unwrap_or(0.0));
        }
        values.push(row);
    }

    let fits: Vec<Option<TailFit>> = dirs
        .iter()
        .map(|d| {
            let text = std::fs::read_to_string(d.join(TAILFIT_JSON)).ok()?;
            let v: serde_json::Value = serde_json::from_str(&text).ok()?;
            serde_json::from_value(v.get("fit")?.clone()).ok()
        })
        .collect();
    let e2e: Vec<Vec<f64>> =
        dirs.iter().map(|d| rendered_e2e(&Table::read(&d.join(FRAMES_CSV))?)).collect::<Result<_>>()?;
    let mut slashes = Vec::new();
    for i in 1..dirs.len() {
        for x in SLASH_AT_MS {
            let fitted = match (&fits[0], &fits[i]) {
                (Some(a), Some(b)) => tail_slash(a, b, x).ok(),
                _ => None,
            };
            let p0 = empirical_ccdf(&e2e[0], x);
            let empirical = (p0 > 0.0).then(|| 1.0 - empirical_ccdf(&e2e[i], x) / p0);
            slashes.push(Slash { label: labels[i].clone(), x, fitted, empirical });
        }
    }
    Ok(Comparison { columns, labels, values, slashes })
}

/// Human-readable report table for one run directory.
pub fn print_report(report: &QoeReport, mut w: impl Write) -> Result<()> {
    w.write_all(format_table(std::slice::from_ref(report)).as_bytes()).map_err(|e| Error::io("<stdout>", e))
}
