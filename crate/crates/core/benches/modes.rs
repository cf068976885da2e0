//! End-to-end comparison of the four inference modes on a small synthetic
//! clip. Run with `--no-default-features` to time the sequential kernels
//! instead of the rayon ones; the two runs together show what the parallel
//! feature buys at clip level.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use streampaint_core::pipeline::{run_refined_clip, RefinerConfig};
use streampaint_core::scheduler::{run_clip, Mode, SchedulerConfig};
use streampaint_core::video::{stationary_mask, synth_video, Rect, SynthConfig, VideoClip};
use streampaint_core::weights::{StackConfig, WeightSet};

fn fixture(frame_count: usize) -> (VideoClip, WeightSet) {
    let cfg = SynthConfig {
        frame_count,
        ..SynthConfig::default()
    };
    let truth = synth_video(&cfg).unwrap();
    let masks = stationary_mask(
        &cfg,
        Rect {
            x: 12,
            y: 12,
            w: 8,
            h: 8,
        },
    )
    .unwrap();
    let clip = truth.with_masks(masks).unwrap();
    let weights = WeightSet::seeded(&StackConfig::default(), 7).unwrap();
    (clip, weights)
}

fn bench_modes(c: &mut Criterion) {
    let (clip, weights) = fixture(12);
    let sched = SchedulerConfig::default();
    let refiner = RefinerConfig::default();
    let mut group = c.benchmark_group("clip_12_frames");
    group.sample_size(10);
    for mode in [Mode::Offline, Mode::Online, Mode::Memory] {
        group.bench_with_input(BenchmarkId::new(mode.as_str(), 12), &mode, |b, mode| {
            b.iter(|| run_clip(&clip, *mode, &sched, &weights).unwrap())
        });
    }
    group.bench_with_input(BenchmarkId::new("refined", 12), &12, |b, _| {
        b.iter(|| run_refined_clip(&clip, &sched, &refiner, &weights).unwrap())
    });
    group.finish();
}

fn bench_context_growth(c: &mut Criterion) {
    let (clip, weights) = fixture(18);
    let mut group = c.benchmark_group("per_clip_by_context");
    group.sample_size(10);
    for context in [4u32, 8, 16] {
        let sched = SchedulerConfig {
            k: context - 2,
            s: context - 2,
            r: clip.len() as u32,
            r_refined: clip.len() as u32,
            ..SchedulerConfig::default()
        };
        group.bench_with_input(
            BenchmarkId::new("online", context),
            &sched,
            |b, sched| b.iter(|| run_clip(&clip, Mode::Online, sched, &weights).unwrap()),
        );
        group.bench_with_input(
            BenchmarkId::new("memory", context),
            &sched,
            |b, sched| b.iter(|| run_clip(&clip, Mode::Memory, sched, &weights).unwrap()),
        );
    }
    group.finish();
}

criterion_group!(benches, bench_modes, bench_context_growth);
criterion_main!(benches);
