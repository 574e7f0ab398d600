use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use pdsim::allocator::{allocate_with, gap_sad, AllocProblem};
use pdsim::encoder::{QuantTable, RqModel};
use pdsim::media::{gen_synthetic_content, Profile};
use pdsim::netsim::BandwidthTrace;
use pdsim::par::{self, Execution};
use pdsim::sim::{simulate, Controller};
use pdsim::ExperimentConfig;

// 60 fps at a 10 s GOP: the largest allocation grid the tests exercise.
fn problem() -> AllocProblem {
    let rq = RqModel::new(6000.0, 40000.0);
    let table = QuantTable::geometric(0.625, 0.625 * 2f64.powf(51.0 / 6.0)).unwrap();
    let (f, c_bar) = (60u32, 140.0);
    let q1 = table.q(30);
    AllocProblem {
        b: 1.5e6,
        f,
        f_k: 0.1,
        eta: 5.0,
        r1: rq.bits(q1, 7.0 * c_bar),
        q1,
        c_bar,
        c1_dprime: c_bar,
        c_prime: (1..=f).map(|fp| c_bar * gap_sad(1.0, f as f64 / fp as f64, 0.75, 5.0)).collect(),
        t_min: 0.0,
        rq,
        table,
    }
}

fn sessions(exec: Execution, seeds: &[u64]) -> Vec<usize> {
    par::map(exec, seeds, |&seed| {
        let mut c = ExperimentConfig::default();
        c.run.seed = seed;
        c.run.duration_s = 10.0;
        let content = gen_synthetic_content(seed, 10.0, 30, Profile::Street).unwrap();
        let trace = BandwidthTrace::fixed(c.run.bitrate_bps, 1.1, 0.0, 0.0).unwrap();
        simulate(&c, &content, trace, Controller::Fixed).unwrap().frames.len()
    })
}

fn criterion_benchmark(c: &mut Criterion) {
    let p = problem();
    c.bench_function("allocate/sequential", |b| b.iter(|| allocate_with(black_box(&p), Execution::Sequential)));
    c.bench_function("allocate/rayon", |b| b.iter(|| allocate_with(black_box(&p), Execution::Parallel)));

    let seeds: Vec<u64> = (1..=8).collect();
    let mut g = c.benchmark_group("sessions");
    g.sample_size(10);
    g.bench_function("sequential", |b| b.iter(|| sessions(Execution::Sequential, black_box(&seeds))));
    g.bench_function("rayon", |b| b.iter(|| sessions(Execution::Parallel, black_box(&seeds))));
    g.finish();
}

criterion_group!(benches, criterion_benchmark);
criterion_main!(benches);
