//! Sequential vs rayon execution for the data-parallel loops.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use textwipe_core::data::{prepare_samples, synth_sample, SynthConfig};
use textwipe_core::geometry::{render_soft_mask_with, MaskMode};
use textwipe_core::metrics::{evaluate_pairs, SsimMode};
use textwipe_core::rtv::{rtv_smooth_with, RtvParams};
use textwipe_core::Exec;

const POLICIES: [Exec; 2] = [Exec::Sequential, Exec::Parallel];

fn samples(n: u64) -> Vec<textwipe_core::data::AnnotatedSample> {
    let cfg = SynthConfig::default();
    (0..n).map(|i| synth_sample(&cfg, i)).collect()
}

fn bench_mask(c: &mut Criterion) {
    let s = samples(8);
    let polys: Vec<_> = s.iter().flat_map(|s| s.polygons.clone()).collect();
    let mut g = c.benchmark_group("soft_mask_256");
    for exec in POLICIES {
        g.bench_with_input(
            BenchmarkId::from_parameter(format!("{exec:?}")),
            &exec,
            |b, &e| {
                b.iter(|| render_soft_mask_with(e, &polys, 256, 256, 0.9, MaskMode::Soft).unwrap())
            },
        );
    }
    g.finish();
}

fn bench_rtv(c: &mut Criterion) {
    let img = samples(1).remove(0).i_in;
    let params = RtvParams::default();
    let mut g = c.benchmark_group("rtv_smooth_64");
    g.sample_size(10);
    for exec in POLICIES {
        g.bench_with_input(
            BenchmarkId::from_parameter(format!("{exec:?}")),
            &exec,
            |b, &e| b.iter(|| rtv_smooth_with(e, &img, &params).unwrap()),
        );
    }
    g.finish();
}

fn bench_metrics(c: &mut Criterion) {
    let s = samples(16);
    let preds: Vec<_> = s.iter().map(|s| s.i_in.clone()).collect();
    let gts: Vec<_> = s.iter().map(|s| s.i_gt.clone()).collect();
    let mut g = c.benchmark_group("evaluate_pairs_16");
    for exec in POLICIES {
        g.bench_with_input(
            BenchmarkId::from_parameter(format!("{exec:?}")),
            &exec,
            |b, &e| b.iter(|| evaluate_pairs(e, &preds, &gts, SsimMode::Multiscale).unwrap()),
        );
    }
    g.finish();
}

fn bench_prepare(c: &mut Criterion) {
    let s = samples(4);
    let params = RtvParams {
        iterations: 2,
        ..RtvParams::default()
    };
    let mut g = c.benchmark_group("prepare_samples_4");
    g.sample_size(10);
    for exec in POLICIES {
        g.bench_with_input(
            BenchmarkId::from_parameter(format!("{exec:?}")),
            &exec,
            |b, &e| b.iter(|| prepare_samples(e, &s, 0.9, MaskMode::Soft, &params, None).unwrap()),
        );
    }
    g.finish();
}

criterion_group!(benches, bench_mask, bench_rtv, bench_metrics, bench_prepare);
criterion_main!(benches);
