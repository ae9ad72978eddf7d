//! Compares the rayon-backed mapper against the sequential reference on the
//! four workloads the runner actually fans out: batch gradients, annotator
//! simulation, window-local EM and the trace-recovery grid search. Build with
//! `--no-default-features` to measure the pure sequential tree instead.

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use std::time::Duration;

use nlsg_core::fusion::staple;
use nlsg_core::grid::{ImageTensor, LabelMap};
use nlsg_core::model::{backward, init_params, CmMode, ModelArch, ModelParams};
use nlsg_core::par::{map_indexed, map_indexed_seq};
use nlsg_core::rng::SeedRng;
use nlsg_core::sim::{apply_profile, synth_shapes, AnnotatorProfile};
use nlsg_core::theory::{brute_force_trace_recovery, sample_dominant_instance, SampledInstance};

fn tuned<'a>(
    c: &'a mut Criterion,
    name: &str,
) -> criterion::BenchmarkGroup<'a, criterion::measurement::WallTime> {
    let mut group = c.benchmark_group(name);
    group
        .sample_size(10)
        .warm_up_time(Duration::from_millis(500))
        .measurement_time(Duration::from_secs(2));
    group
}

struct GradCase {
    params: ModelParams,
    images: Vec<ImageTensor>,
    labels: Vec<Vec<Option<LabelMap>>>,
}

fn grad_case() -> GradCase {
    let arch = ModelArch {
        in_channels: 1,
        trunk_layers: 2,
        trunk_channels: 8,
        classes: 2,
        annotators: 3,
        cm_mode: CmMode::Full,
    };
    let seed = SeedRng::new(11);
    let params = init_params(&arch, &seed).unwrap();
    let data = synth_shapes(12, 16, 16, 2, &seed.child(1)).unwrap();
    let profiles = [
        AnnotatorProfile::good(1),
        AnnotatorProfile::over(2),
        AnnotatorProfile::under(1),
    ];
    let labels = data
        .iter()
        .enumerate()
        .map(|(i, (_, gt))| {
            profiles
                .iter()
                .enumerate()
                .map(|(r, p)| {
                    let mut rng = seed.child(100 + (i * 8 + r) as u64).rng();
                    Some(apply_profile(gt, p, &mut rng).unwrap())
                })
                .collect()
        })
        .collect();
    GradCase {
        params,
        images: data.into_iter().map(|(img, _)| img).collect(),
        labels,
    }
}

fn bench_batch_gradients(c: &mut Criterion) {
    let case = grad_case();
    let n = case.images.len();
    let eval = |i: usize| {
        let (loss, grad) = backward(&case.params, &case.images[i], &case.labels[i], 0.25).unwrap();
        loss.total + grad.iter().sum::<f64>()
    };
    let mut group = tuned(c, "batch_gradients");
    group.bench_function(BenchmarkId::from_parameter("parallel"), |b| {
        b.iter(|| black_box(map_indexed(n, eval)))
    });
    group.bench_function(BenchmarkId::from_parameter("sequential"), |b| {
        b.iter(|| black_box(map_indexed_seq(n, eval)))
    });
    group.finish();
}

fn bench_simulation(c: &mut Criterion) {
    let seed = SeedRng::new(23);
    let data = synth_shapes(32, 32, 32, 2, &seed).unwrap();
    let profile = AnnotatorProfile::over(2);
    let noisy = |i: usize| {
        let mut rng = seed.child(i as u64).rng();
        apply_profile(&data[i].1, &profile, &mut rng).unwrap()
    };
    let mut group = tuned(c, "simulate_annotators");
    group.bench_function(BenchmarkId::from_parameter("parallel"), |b| {
        b.iter(|| black_box(map_indexed(data.len(), noisy)))
    });
    group.bench_function(BenchmarkId::from_parameter("sequential"), |b| {
        b.iter(|| black_box(map_indexed_seq(data.len(), noisy)))
    });
    group.finish();
}

fn crop(map: &LabelMap, x0: usize, y0: usize, side: usize) -> LabelMap {
    let mut raw = Vec::with_capacity(side * side);
    for dy in 0..side {
        let start = (y0 + dy) * map.width() + x0;
        raw.extend_from_slice(&map.labels()[start..start + side]);
    }
    LabelMap::new(side, side, map.classes(), raw).unwrap()
}

fn bench_window_em(c: &mut Criterion) {
    let seed = SeedRng::new(37);
    let (_, gt) = synth_shapes(1, 48, 48, 2, &seed).unwrap().remove(0);
    let profiles = [
        AnnotatorProfile::good(1),
        AnnotatorProfile::over(2),
        AnnotatorProfile::under(1),
    ];
    let stack: Vec<LabelMap> = profiles
        .iter()
        .enumerate()
        .map(|(r, p)| apply_profile(&gt, p, &mut seed.child(r as u64).rng()).unwrap())
        .collect();
    let side = 8;
    let per_row = 48 / side;
    let windows = per_row * per_row;
    let em = |w: usize| {
        let (x0, y0) = ((w % per_row) * side, (w / per_row) * side);
        let local: Vec<LabelMap> = stack.iter().map(|m| crop(m, x0, y0, side)).collect();
        let result = staple(&local, 30, 1e-6).unwrap();
        *result.log_likelihood_trace.last().unwrap()
    };
    let mut group = tuned(c, "window_em");
    group.bench_function(BenchmarkId::from_parameter("parallel"), |b| {
        b.iter(|| black_box(map_indexed(windows, em)))
    });
    group.bench_function(BenchmarkId::from_parameter("sequential"), |b| {
        b.iter(|| black_box(map_indexed_seq(windows, em)))
    });
    group.finish();
}

fn bench_grid_enumeration(c: &mut Criterion) {
    let grid = 40;
    let seed = SeedRng::new(53);
    let instances: Vec<SampledInstance> = (0..6)
        .map(|i| sample_dominant_instance(2, 1 + i % 3, grid, &seed.child(i as u64)).unwrap())
        .collect();
    let recover = |i: usize| {
        let inst = &instances[i];
        brute_force_trace_recovery(2, &inst.true_cms, &inst.pi, inst.k, grid)
            .unwrap()
            .trace_gap
    };
    let mut group = tuned(c, "grid_enumeration");
    group.bench_function(BenchmarkId::from_parameter("parallel"), |b| {
        b.iter(|| black_box(map_indexed(instances.len(), recover)))
    });
    group.bench_function(BenchmarkId::from_parameter("sequential"), |b| {
        b.iter(|| black_box(map_indexed_seq(instances.len(), recover)))
    });
    group.finish();
}

criterion_group!(
    benches,
    bench_batch_gradients,
    bench_simulation,
    bench_window_em,
    bench_grid_enumeration
);
criterion_main!(benches);
