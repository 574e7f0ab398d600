use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use pdsim::analytics::format_table;
use pdsim::config::{Mode, RatePolicy};
use pdsim::experiment::{self, TrainOptions};
use pdsim::media::{gen_synthetic_content, Profile};
use pdsim::netsim::{gen_synthetic_trace, trace_envelope};
use pdsim::par::Execution;
use pdsim::ExperimentConfig;

#[derive(Parser)]
#[command(name = "pdsim", version, about = "Pseudo-dual streaming simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate one session and write a run directory.
    Run(RunArgs),
    /// Train the bitrate policy.
    Train(TrainArgs),
    /// Side-by-side report of finished runs (the first is the baseline).
    Compare {
        #[arg(required = true, num_args = 2..)]
        runs: Vec<PathBuf>,
        /// Also write the table as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit the power-law delay tail of a run.
    FitTail {
        run: PathBuf,
        /// Tail threshold in ms (default: 85th percentile).
        #[arg(long)]
        x_high: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic content trace.
    GenContent {
        #[arg(long, default_value = "street", value_parser = parse_profile)]
        profile: Profile,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 60.0)]
        duration: f64,
        #[arg(long, default_value_t = 30)]
        fps: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic bandwidth trace.
    GenTrace(GenTraceArgs),
}

#[derive(Args)]
struct GenTraceArgs {
    /// Envelope of a bundled family: 5g, 4g or wifi.
    #[arg(long, conflicts_with_all = ["mean_mbps", "std_mbps"])]
    kind: Option<String>,
    #[arg(long, requires = "std_mbps")]
    mean_mbps: Option<f64>,
    #[arg(long)]
    std_mbps: Option<f64>,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 1200.0)]
    duration: f64,
    #[arg(long, default_value_t = 200.0)]
    step_ms: f64,
    /// AR(1) coefficient of the log bandwidth.
    #[arg(long, default_value_t = 0.95)]
    ar: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Common {
    /// TOML configuration; built-in defaults otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    duration: Option<f64>,
    /// Initial target bitrate in bps.
    #[arg(long)]
    bitrate: Option<f64>,
    /// Bandwidth trace: a CSV path or 5g / 4g / wifi.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Fixed link as a multiple of the target bitrate.
    #[arg(long)]
    bw_factor: Option<f64>,
    #[arg(long, value_parser = parse_profile)]
    profile: Option<Profile>,
    /// Content trace CSV instead of synthetic content.
    #[arg(long)]
    content: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    policy: Option<RatePolicy>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Log every pacer tick into events.csv.
    #[arg(long)]
    dump_pacer: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 50)]
    episodes: usize,
    /// Continue from a checkpoint; episode numbering carries on.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    sequential: bool,
}

fn parse_profile(s: &str) -> std::result::Result<Profile, String> {
    Profile::ALL
        .into_iter()
        .find(|p| p.name().eq_ignore_ascii_case(s))
        .ok_or_else(|| format!("unknown profile '{s}' (street, conference, sports, gaming)"))
}

fn build_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.run.seed = c.seed;
    if let Some(m) = c.mode {
        cfg.run.mode = m;
    }
    if let Some(d) = c.duration {
        cfg.run.duration_s = d;
    }
    if let Some(b) = c.bitrate {
        cfg.run.bitrate_bps = b;
    }
    if let Some(t) = &c.trace {
        cfg.network.trace = Some(t.clone());
    }
    if let Some(f) = c.bw_factor {
        cfg.network.fixed_bw_factor = f;
    }
    if let Some(p) = c.profile {
        cfg.content.profile = p;
    }
    if let Some(p) = &c.content {
        cfg.content.trace = Some(p.clone());
    }
    Ok(cfg)
}

fn run(a: RunArgs) -> Result<()> {
    let mut cfg = build_config(&a.common)?;
    if let Some(p) = a.policy {
        cfg.run.policy = p;
    }
    if let Some(c) = a.checkpoint {
        cfg.run.checkpoint = Some(c);
    }
    cfg.run.dump_pacer |= a.dump_pacer;
    cfg.validate()?;
    let out = &a.common.out;
    let s = experiment::run_experiment(&cfg, out)?;
    std::fs::write(out.join("config.toml"), cfg.to_toml_string())
        .with_context(|| format!("writing {}", out.join("config.toml").display()))?;
    print!("{}", format_table(std::slice::from_ref(&s.report)));
    if let Some(f) = &s.tail.fit {
        println!("tail above {:.1} ms: k={:.4} alpha={:.3} r2={:.3}", f.x_high, f.k, f.alpha, f.r2);
    }
    println!("keyframes {} allocations {} -> {}", s.keyframes, s.allocations, out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = build_config(&a.common)?;
    cfg.validate()?;
    let opts = TrainOptions {
        episodes: a.episodes,
        out: a.common.out.clone(),
        resume: a.resume,
        exec: if a.sequential { Execution::Sequential } else { Execution::default() },
    };
    std::fs::create_dir_all(&opts.out)?;
    std::fs::write(opts.out.join("config.toml"), cfg.to_toml_string())?;
    let s = experiment::train(&cfg, &opts)?;
    if let (Some(first), Some(last)) = (s.curve.first(), s.curve.last()) {
        println!("episodes {}..={}: mean reward {:.2} -> {:.2}", first.0, last.0, first.1, last.1);
    }
    println!(
        "segments train {:?} test {:?}; checkpoint {}",
        s.train_segments,
        s.test_segments,
        s.last_checkpoint.display()
    );
    Ok(())
}

fn fit_tail(run: &Path, x_high: Option<f64>, out: Option<PathBuf>) -> Result<()> {
    let dir = if run.is_file() { run.parent().unwrap_or(Path::new(".")) } else { run };
    let r = experiment::fit_tail_dir(dir, x_high)?;
    match &r.fit {
        Some(f) => println!(
            "x_high {:.2} ms, {} tail samples: k={:.5} alpha={:.4} r2={:.4}{}",
            f.x_high,
            f.n_tail,
            f.k,
            f.alpha,
            f.r2,
            if f.integrable { "" } else { " (alpha <= 1: tail mass diverges)" }
        ),
        None => println!("no fit: {}", r.error.as_deref().unwrap_or("unknown")),
    }
    for c in &r.check {
        println!("  P(X >= {:7.1}) fitted {:.5} empirical {:.5}", c.x, c.fitted, c.empirical);
    }
    if let Some(p) = out {
        r.save(&p)?;
    }
    Ok(())
}

fn gen_trace(a: &GenTraceArgs) -> Result<()> {
    let (m, s) = match (&a.kind, a.mean_mbps, a.std_mbps) {
        (Some(k), _, _) => match trace_envelope(k) {
            Some(e) => e,
            None => bail!("unknown trace kind '{k}' (5g, 4g, wifi)"),
        },
        (None, Some(m), Some(s)) => (m, s),
        _ => bail!("give --kind or both --mean-mbps and --std-mbps"),
    };
    let t = gen_synthetic_trace(a.seed, a.duration, a.step_ms, m, s, a.ar)?;
    let out = &a.out;
    let f = std::fs::File::create(out).with_context(|| format!("creating {}", out.display()))?;
    t.write_csv(std::io::BufWriter::new(f))?;
    let (mean, sd) = t.bw_stats();
    println!("{} samples, mean {:.3} Mbps, std {:.3} Mbps -> {}", t.samples.len(), mean / 1e6, sd / 1e6, out.display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().cmd {
        Cmd::Run(a) => run(a),
        Cmd::Train(a) => train(a),
        Cmd::Compare { runs, out } => {
            let c = experiment::compare_runs(&runs)?;
            print!("{}", c.to_text());
            if let Some(p) = out {
                std::fs::write(&p, c.to_csv()?).with_context(|| format!("writing {}", p.display()))?;
            }
            Ok(())
        }
        Cmd::FitTail { run, x_high, out } => fit_tail(&run, x_high, out),
        Cmd::GenContent { profile, seed, duration, fps, out } => {
            let c = gen_synthetic_content(seed, duration, fps, profile)?;
            c.save(&out)?;
            println!("{} frames of {} content -> {}", c.len(), profile.name(), out.display());
            Ok(())
        }
        Cmd::GenTrace(a) => gen_trace(&a),
    }
}
