//! Per-run QoE aggregation from the frame and network CSVs.

use std::io::Read;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

use super::stats::{mean, percentile};

/// A CSV file held as strings; `#` lines are metadata and skipped.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
    source: String,
}

impl Table {
    pub fn from_reader<R: Read>(r: R, source: &str) -> Result<Self> {
        let mut rd = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(r);
        let headers = rd.headers()?.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        for rec in rd.records() {
            rows.push(rec?.iter().map(str::to_string).collect());
        }
        Ok(Self { headers, rows, source: source.to_string() })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(f, &path.display().to_string())
    }

    /// Fails with every missing column named at once.
    pub fn require(&self, cols: &[&str]) -> Result<()> {
        let missing: Vec<&str> = cols.iter().copied().filter(|c| !self.headers.iter().any(|h| h == c)).collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::Schema(format!("{} lacks columns: {}", self.source, missing.join(", "))))
        }
    }

    pub fn index(&self, col: &str) -> Result<usize> {
        self.headers
            .iter()
            .position(|h| h == col)
            .ok_or_else(|| Error::Schema(format!("{} lacks column {col}", self.source)))
    }

    /// Numeric column; empty cells become `None`.
    pub fn opt_f64s(&self, col: &str) -> Result<Vec<Option<f64>>> {
        let i = self.index(col)?;
        self.rows
            .iter()
            .enumerate()
            .map(|(n, row)| {
                let cell = row.get(i).map(String::as_str).unwrap_or("");
                if cell.is_empty() {
                    return Ok(None);
                }
                cell.parse::<f64>().map(Some).map_err(|e| Error::Parse {
                    path: self.source.clone(),
                    line: n + 2,
                    msg: format!("{col}: {e}"),
                })
            })
            .collect()
    }

    pub fn f64s(&self, col: &str) -> Result<Vec<f64>> {
        Ok(self.opt_f64s(col)?.into_iter().map(|v| v.unwrap_or(0.0)).collect())
    }

    pub fn bools(&self, col: &str) -> Result<Vec<bool>> {
        let i = self.index(col)?;
        Ok(self.rows.iter().map(|r| r.get(i).is_some_and(|c| c == "true" || c == "1")).collect())
    }
}

/// Columns `qoe_report` reads from frames.csv.
pub const FRAME_COLUMNS: [&str; 8] =
    ["rendered", "render_ts", "d_trans", "d_pacer", "d_jitter", "d_e2e", "qp_index", "psnr"];
/// Columns `qoe_report` reads from net.csv.
pub const NET_COLUMNS: [&str; 3] = ["rtt_ms", "loss", "target_bps"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReportParams {
    pub duration_s: f64,
    /// Windows rendering fewer frames than this count as stalled.
    pub stall_fps: f64,
}

/// One row of the QoE table. Delays are means over rendered frames in ms.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QoeReport {
    pub label: String,
    pub fps: f64,
    pub stall_rate_pct: f64,
    pub d_trans: f64,
    pub d_pacer: f64,
    pub d_jitter: f64,
    pub rtt: f64,
    pub loss_pct: f64,
    pub e2e_mean: f64,
    pub e2e_p97: f64,
    pub qp: f64,
    pub psnr: f64,
    pub bitrate_kbps: f64,
    pub rendered: usize,
}

pub fn qoe_report(label: &str, frames: &Table, net: &Table, p: &ReportParams) -> Result<QoeReport> {
    frames.require(&FRAME_COLUMNS)?;
    net.require(&NET_COLUMNS)?;
    let rendered = frames.bools("rendered")?;
    let pick = |col: &str| -> Result<Vec<f64>> {
        Ok(frames.f64s(col)?.into_iter().zip(&rendered).filter(|(_, r)| **r).map(|(v, _)| v).collect())
    };
    let e2e = pick("d_e2e")?;
    let windows = (p.duration_s.floor() as usize).max(1);
    let mut per_window = vec![0usize; windows];
    for t in frames.opt_f64s("render_ts")?.into_iter().flatten() {
        let w = (t / 1000.0).floor();
        if w >= 0.0 && (w as usize) < windows {
            per_window[w as usize] += 1;
        }
    }
    let any_frames = !frames.rows.is_empty();
    let stalled = per_window.iter().filter(|n| (**n as f64) < p.stall_fps).count();
    let fps: Vec<f64> = per_window.iter().map(|n| *n as f64).collect();
    Ok(QoeReport {
        label: label.to_string(),
        fps: mean(&fps),
        stall_rate_pct: if any_frames { 100.0 * stalled as f64 / windows as f64 } else { 0.0 },
        d_trans: mean(&pick("d_trans")?),
        d_pacer: mean(&pick("d_pacer")?),
        d_jitter: mean(&pick("d_jitter")?),
        rtt: mean(&net.f64s("rtt_ms")?),
        loss_pct: 100.0 * mean(&net.f64s("loss")?),
        e2e_mean: mean(&e2e),
        e2e_p97: if e2e.is_empty() { 0.0 } else { percentile(&e2e, 97.0)? },
        qp: mean(&pick("qp_index")?),
        psnr: mean(&pick("psnr")?),
        bitrate_kbps: mean(&net.f64s("target_bps")?) / 1000.0,
        rendered: e2e.len(),
    })
}

/// Fixed-width text rendering of report rows.
pub fn format_table(rows: &[QoeReport]) -> String {
    let mut s = format!(
        "{:<16} {:>6} {:>7} {:>8} {:>8} {:>8} {:>7} {:>6} {:>8} {:>8} {:>6} {:>6} {:>8}\n",
        "run", "fps", "stall%", "d_trans", "d_pacer", "d_jitter", "rtt", "loss%", "e2e", "e2e_p97", "qp", "psnr", "kbps"
    );
    for r in rows {
        s += &format!(
            "{:<16} {:>6.2} {:>7.2} {:>8.2} {:>8.2} {:>8.2} {:>7.2} {:>6.2} {:>8.2} {:>8.2} {:>6.2} {:>6.2} {:>8.1}\n",
            r.label, r.fps, r.stall_rate_pct, r.d_trans, r.d_pacer, r.d_jitter, r.rtt, r.loss_pct, r.e2e_mean,
            r.e2e_p97, r.qp, r.psnr, r.bitrate_kbps
        );
    }
    s
}
