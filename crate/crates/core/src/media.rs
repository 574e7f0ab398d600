//! Frames, packets and content traces.
//!
//! A [`ContentTrace`] stands in for raw video: each frame carries a transform
//! domain complexity (`satd_base`, the cost of coding it against its
//! predecessor) and the pixel-domain difference to the next frame
//! (`sad_next`). Units are arbitrary but consistent; only ratios matter to the
//! rate models.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Synthetic content families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Street,
    Conference,
    Sports,
    Gaming,
}

impl Profile {
    pub const ALL: [Profile; 4] = [
        Profile::Street,
        Profile::Conference,
        Profile::Sports,
        Profile::Gaming,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Profile::Street => "street",
            Profile::Conference => "conference",
            Profile::Sports => "sports",
            Profile::Gaming => "gaming",
        }
    }

    /// Default generator constants for this profile.
    ///
    /// Conference and gaming content has little background motion, so their
    /// SAD medians sit well below street and sports.
    pub fn params(self) -> ProfileParams {
        match self {
            Profile::Street => ProfileParams {
                sad_median: 40.0,
                sad_log_sigma: 0.30,
                sad_ar: 0.90,
                scene_cut_rate_hz: 0.02,
                satd_coeffs: [20.0, 3.0, 0.0125, 0.0],
                satd_noise: 0.06,
            },
            Profile::Conference => ProfileParams {
                sad_median: 12.0,
                sad_log_sigma: 0.25,
                sad_ar: 0.95,
                scene_cut_rate_hz: 0.005,
                satd_coeffs: [15.0, 4.0, 0.02, 0.0001],
                satd_noise: 0.06,
            },
            Profile::Sports => ProfileParams {
                sad_median: 60.0,
                sad_log_sigma: 0.35,
                sad_ar: 0.85,
                scene_cut_rate_hz: 0.05,
                satd_coeffs: [25.0, 2.8, 0.008, 0.0],
                satd_noise: 0.07,
            },
            Profile::Gaming => ProfileParams {
                sad_median: 18.0,
                sad_log_sigma: 0.40,
                sad_ar: 0.90,
                scene_cut_rate_hz: 0.03,
                satd_coeffs: [20.0, 3.5, 0.015, 0.00005],
                satd_noise: 0.06,
            },
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "street" => Ok(Profile::Street),
            "conference" => Ok(Profile::Conference),
            "sports" => Ok(Profile::Sports),
            "gaming" => Ok(Profile::Gaming),
            other => Err(Error::Config(format!("unknown content profile '{other}'"))),
        }
    }
}

/// Generator constants for one content family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileParams {
    /// Median inter-frame SAD outside scene cuts.
    pub sad_median: f64,
    /// Standard deviation of log SAD.
    pub sad_log_sigma: f64,
    /// Lag-1 autocorrelation of log SAD.
    pub sad_ar: f64,
    pub scene_cut_rate_hz: f64,
    /// Cubic SAD -> SATD map used to synthesize complexity.
    pub satd_coeffs: [f64; 4],
    /// Log-normal sigma of SATD around the cubic.
    pub satd_noise: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContentFrame {
    pub satd_base: f64,
    pub sad_next: f64,
    pub scene_cut: bool,
}

/// Per-frame complexity and inter-frame difference sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ContentTrace {
    pub fps_native: u32,
    pub frames: Vec<ContentFrame>,
    pub profile_name: String,
    sad_median: f64,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

impl ContentTrace {
    pub fn new(fps_native: u32, frames: Vec<ContentFrame>, profile_name: impl Into<String>) -> Result<Self> {
        if !(1..=120).contains(&fps_native) {
            return Err(Error::Validation(format!(
                "fps {fps_native} outside [1, 120]"
            )));
        }
        if frames.is_empty() {
            return Err(Error::Validation("content trace has no frames".into()));
        }
        for (i, f) in frames.iter().enumerate() {
            if !(f.satd_base > 0.0) || !f.satd_base.is_finite() {
                return Err(Error::Validation(format!("frame {i}: satd_base must be > 0")));
            }
            if !(f.sad_next >= 0.0) || !f.sad_next.is_finite() {
                return Err(Error::Validation(format!("frame {i}: sad_next must be >= 0")));
            }
        }
        let mut sads: Vec<f64> = frames.iter().map(|f| f.sad_next).collect();
        let sad_median = median(&mut sads);
        for (i, f) in frames.iter().enumerate() {
            if f.scene_cut && f.sad_next < 5.0 * sad_median {
                return Err(Error::Validation(format!(
                    "frame {i}: scene cut with sad_next {} below 5x median {}",
                    f.sad_next, sad_median
                )));
            }
        }
        Ok(Self {
            fps_native,
            frames,
            profile_name: profile_name.into(),
            sad_median,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn sad_median(&self) -> f64 {
        self.sad_median
    }

    pub fn median_satd(&self) -> f64 {
        let mut v: Vec<f64> = self.frames.iter().map(|f| f.satd_base).collect();
        median(&mut v)
    }

    /// True when frame `idx` starts a new scene.
    pub fn starts_scene(&self, idx: usize) -> bool {
        idx > 0 && self.frames[idx - 1].scene_cut
    }

    /// SAD between frame `idx` and frame `idx - gap`.
    ///
    /// Grows as `s(idx, 1) * gap^rho`, capped at the scene-cut level
    /// (`max(5 x median, s(idx, 1))`). Spans containing a scene cut return at
    /// least the cut's SAD.
    pub fn sad_at_gap(&self, idx: usize, gap: usize, rho: f64) -> Result<f64> {
        if gap == 0 {
            return Err(Error::Domain("gap must be >= 1".into()));
        }
        if idx >= self.frames.len() || idx < gap {
            return Err(Error::Domain(format!(
                "frame {idx} with gap {gap} out of range for {} frames",
                self.frames.len()
            )));
        }
        let base = self.frames[idx - 1].sad_next;
        let cap = (5.0 * self.sad_median).max(base);
        let grown = (base * (gap as f64).powf(rho)).min(cap);
        let cut_level = self.frames[idx - gap..idx]
            .iter()
            .filter(|f| f.scene_cut)
            .map(|f| f.sad_next)
            .fold(0.0, f64::max);
        Ok(grown.max(cut_level))
    }

    /// True coding complexity of frame `idx` against frame `idx - gap`:
    /// the gap-1 SATD scaled by the profile cubic at the widened SAD.
    pub fn satd_at_gap(&self, idx: usize, gap: usize, rho: f64, coeffs: &[f64; 4]) -> Result<f64> {
        let base = self.frames[idx.min(self.frames.len() - 1)].satd_base;
        if gap == 1 {
            return Ok(base);
        }
        let s1 = self.sad_at_gap(idx, 1, rho)?;
        let sg = self.sad_at_gap(idx, gap, rho)?;
        let ratio = eval_cubic(coeffs, sg).max(1e-9) / eval_cubic(coeffs, s1).max(1e-9);
        Ok(base * ratio.max(1.0))
    }

    /// Writes `frame_idx,satd_base,sad_next,scene_cut` with a one-line header.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["frame_idx", "satd_base", "sad_next", "scene_cut"])?;
        for (i, f) in self.frames.iter().enumerate() {
            wr.write_record([
                i.to_string(),
                format!("{:.6}", f.satd_base),
                format!("{:.6}", f.sad_next),
                (f.scene_cut as u8).to_string(),
            ])?;
        }
        wr.flush().map_err(|e| Error::io("<content csv>", e))?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    pub fn read_csv<R: Read>(r: R, fps: u32, name: &str, source: &str) -> Result<Self> {
        let mut rd = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
        let mut frames = Vec::new();
        for (i, rec) in rd.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| Error::Parse {
                path: source.to_string(),
                line,
                msg: e.to_string(),
            })?;
            let field = |k: usize| -> Result<&str> {
                rec.get(k).map(str::trim).ok_or_else(|| Error::Parse {
                    path: source.to_string(),
                    line,
                    msg: format!("missing column {k}"),
                })
            };
            let num = |k: usize| -> Result<f64> {
                field(k)?.parse::<f64>().map_err(|e| Error::Parse {
                    path: source.to_string(),
                    line,
                    msg: e.to_string(),
                })
            };
            let idx = num(0)? as usize;
            if idx != frames.len() {
                return Err(Error::Parse {
                    path: source.to_string(),
                    line,
                    msg: format!("expected frame_idx {}, found {idx}", frames.len()),
                });
            }
            let cut = match field(3)? {
                "1" | "true" => true,
                "0" | "false" => false,
                other => {
                    return Err(Error::Parse {
                        path: source.to_string(),
                        line,
                        msg: format!("bad scene_cut value '{other}'"),
                    })
                }
            };
            frames.push(ContentFrame {
                satd_base: num(1)?,
                sad_next: num(2)?,
                scene_cut: cut,
            });
        }
        Self::new(fps, frames, name)
    }

    pub fn load(path: &Path, fps: u32) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "imported".into());
        Self::read_csv(file, fps, &name, &path.display().to_string())
    }
}

fn eval_cubic(c: &[f64; 4], s: f64) -> f64 {
    c[0] + s * (c[1] + s * (c[2] + s * c[3]))
}

/// Deterministic synthetic content for `duration_s` seconds at `fps`.
pub fn gen_synthetic_content(
    seed: u64,
    duration_s: f64,
    fps: u32,
    profile: Profile,
) -> Result<ContentTrace> {
    gen_with_params(seed, duration_s, fps, profile.name(), &profile.params())
}

pub fn gen_with_params(
    seed: u64,
    duration_s: f64,
    fps: u32,
    name: &str,
    p: &ProfileParams,
) -> Result<ContentTrace> {
    if !(duration_s > 0.0) {
        return Err(Error::Config("duration must be > 0".into()));
    }
    if !(1..=120).contains(&fps) {
        return Err(Error::Config(format!("fps {fps} outside [1, 120]")));
    }
    if !(p.sad_median > 0.0) || p.sad_log_sigma < 0.0 || !(0.0..1.0).contains(&p.sad_ar) {
        return Err(Error::Config("invalid profile parameters".into()));
    }
    let n = (duration_s * fps as f64).round().max(1.0) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let innovation = (1.0 - p.sad_ar * p.sad_ar).sqrt() * p.sad_log_sigma;
    let cut_prob = (p.scene_cut_rate_hz / fps as f64).clamp(0.0, 1.0);

    let mut x = std_normal.sample(&mut rng) * p.sad_log_sigma;
    let mut sads = Vec::with_capacity(n);
    let mut cuts = Vec::with_capacity(n);
    for i in 0..n {
        x = p.sad_ar * x + innovation * std_normal.sample(&mut rng);
        let cut = i + 1 < n && i > 0 && rng.random::<f64>() < cut_prob;
        let sad = if cut {
            p.sad_median * rng.random_range(6.0..10.0)
        } else {
            p.sad_median * x.exp()
        };
        sads.push(sad);
        cuts.push(cut);
    }
    let mut sorted = sads.clone();
    let med = median(&mut sorted);
    for (s, c) in sads.iter_mut().zip(&cuts) {
        if *c && *s < 5.0 * med {
            *s = 5.0 * med * 1.0001;
        }
    }

    let mut frames = Vec::with_capacity(n);
    for i in 0..n {
        // Frame 0 has no predecessor; give it a typical difference.
        let sad_in = if i == 0 { p.sad_median } else { sads[i - 1] };
        let noise = (p.satd_noise * std_normal.sample(&mut rng)).exp();
        let satd = (eval_cubic(&p.satd_coeffs, sad_in) * noise).max(1e-3);
        frames.push(ContentFrame {
            satd_base: satd,
            sad_next: sads[i],
            scene_cut: cuts[i],
        });
    }
    ContentTrace::new(fps, frames, name)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StreamId {
    S1 = 1,
    S2 = 2,
}

impl StreamId {
    pub fn number(self) -> u8 {
        self as u8
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FrameType {
    Key,
    Delta,
}

impl FrameType {
    pub fn as_str(self) -> &'static str {
        match self {
            FrameType::Key => "KEY",
            FrameType::Delta => "DELTA",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedFrame {
    pub frame_id: u64,
    /// Index of the captured content frame.
    pub capture_idx: usize,
    pub stream_id: StreamId,
    pub frame_type: FrameType,
    /// Always a whole number of bytes.
    pub size_bits: u64,
    pub quant_step: f64,
    /// Position of `quant_step` on the quantizer table (fractional for
    /// strict CBR, which is not restricted to table entries).
    pub qp_index: f64,
    pub capture_ts: f64,
    pub encode_done_ts: f64,
    /// Requested size or quantizer was outside the table.
    pub saturated: bool,
}

/// Transmission priority; lower sorts first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PriorityClass {
    Audio = 0,
    Retx = 1,
    VideoS2 = 2,
    VideoS1 = 3,
    Fec = 4,
}

impl PriorityClass {
    pub const ALL: [PriorityClass; 5] = [
        PriorityClass::Audio,
        PriorityClass::Retx,
        PriorityClass::VideoS2,
        PriorityClass::VideoS1,
        PriorityClass::Fec,
    ];

    pub fn for_stream(stream: StreamId) -> Self {
        match stream {
            StreamId::S1 => PriorityClass::VideoS1,
            StreamId::S2 => PriorityClass::VideoS2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Packet {
    pub pkt_id: u64,
    pub frame_id: u64,
    pub stream_id: StreamId,
    pub seq_in_frame: u32,
    pub packets_in_frame: u32,
    pub payload_bytes: usize,
    /// Payload plus header.
    pub size_bytes: usize,
    pub priority_class: PriorityClass,
    pub ts_enqueued: Option<f64>,
    pub ts_sent: Option<f64>,
    pub ts_arrived: Option<f64>,
    pub lost: bool,
}

/// Splits a frame into MTU-sized packets with ids starting at `first_pkt_id`.
pub fn packetize(frame: &EncodedFrame, mtu: usize, header: usize, first_pkt_id: u64) -> Vec<Packet> {
    let payload = frame.size_bits.div_ceil(8) as usize;
    let count = payload.div_ceil(mtu).max(1);
    let mut remaining = payload;
    (0..count)
        .map(|seq| {
            let chunk = remaining.min(mtu);
            remaining -= chunk;
            Packet {
                pkt_id: first_pkt_id + seq as u64,
                frame_id: frame.frame_id,
                stream_id: frame.stream_id,
                seq_in_frame: seq as u32,
                packets_in_frame: count as u32,
                payload_bytes: chunk,
                size_bytes: chunk + header,
                priority_class: PriorityClass::for_stream(frame.stream_id),
                ts_enqueued: None,
                ts_sent: None,
                ts_arrived: None,
                lost: false,
            }
        })
        .collect()
}

/// Frame size in bits recovered from a complete set of packets.
pub fn reassembled_bits(packets: &[Packet]) -> u64 {
    packets.iter().map(|p| p.payload_bytes as u64 * 8).sum()
}
