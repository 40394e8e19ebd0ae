//! Hot-path benchmarks: reference vs committee forwards, importance
//! scoring, full trace replay and the genetic search.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use pcmoe_core::committee::{handle_exchange, handle_skip, PCConfig, Strategy};
use pcmoe_core::importance_scores;
use pcmoe_core::moe::{expert_magnitudes, model_forward_reference, MoEModelSpec};
use pcmoe_core::planner::{
    fit_perf_models, genetic_search, random_configs, Constraints, GaParams, ModelShape,
    ProfileRecord,
};
use pcmoe_core::serve::{serve_trace, ServePolicy};
use pcmoe_core::swap::{CostModelParams, SwapMode};
use pcmoe_core::workload::{gen_model, gen_trace, Order, Trace, TraceSpec};

fn fixture() -> (MoEModelSpec, Trace, CostModelParams) {
    let model = gen_model(16, 32, 4, 16, 2, 8, 1).unwrap();
    let spec = TraceSpec {
        num_samples: 32,
        tokens_per_sample: 8,
        num_clusters: 4,
        drift_period: 8,
        noise_sigma: 0.25,
        order: Order::Sequential,
        seed: 2,
    };
    let trace = gen_trace(&spec, Some(&model)).unwrap();
    let cost = CostModelParams {
        compute_throughput: 1e6,
        io_bandwidth: 1e5,
        base_latency: 0.1,
        mode: SwapMode::Async,
    };
    (model, trace, cost)
}

fn bench_forwards(c: &mut Criterion) {
    let (model, trace, _) = fixture();
    let sample = &trace.samples[0];
    let layer = &model.layers[0];
    let resident: Vec<usize> = (0..8).collect();

    c.bench_function("model_forward_reference", |b| {
        b.iter(|| model_forward_reference(black_box(&model), black_box(sample)).unwrap())
    });
    c.bench_function("layer_forward_skip_half", |b| {
        b.iter(|| handle_skip(black_box(layer), &sample.tokens, &resident, 2).unwrap())
    });
    c.bench_function("layer_forward_exchange_half", |b| {
        b.iter(|| handle_exchange(black_box(layer), &sample.tokens, &resident, 2).unwrap())
    });
}

fn bench_importance(c: &mut Criterion) {
    let (model, trace, _) = fixture();
    let layer = &model.layers[0];
    let mags = expert_magnitudes(&model).unwrap();
    let tokens = &trace.samples[0].tokens;
    c.bench_function("importance_scores", |b| {
        b.iter(|| importance_scores(black_box(layer), tokens, &mags[0], 2).unwrap())
    });
}

fn bench_serve(c: &mut Criterion) {
    let (model, trace, cost) = fixture();
    let policy =
        ServePolicy::Pc(PCConfig::uniform_ratio(&model, 0.5, 4, Strategy::Exchange).unwrap());
    c.bench_function("serve_trace_pc_half_32_samples", |b| {
        b.iter(|| serve_trace(black_box(&model), &trace, &policy, &cost).unwrap())
    });
}

fn bench_search(c: &mut Criterion) {
    let shape = ModelShape {
        experts_per_layer: vec![16; 4],
        intervals: vec![1, 2, 4, 8, 16, 32],
    };
    let configs = random_configs(&shape, 64, 3);
    let records: Vec<ProfileRecord> = configs
        .into_iter()
        .map(|config| {
            let size: usize = config.num_experts.iter().sum();
            ProfileRecord {
                accuracy: 0.5 + 0.005 * size as f64,
                peak_memory: 4096 * size as u64,
                mean_latency: 1.0 + 0.01 * size as f64,
                config,
            }
        })
        .collect();
    let pm = fit_perf_models(&records).unwrap();
    let constraints = Constraints {
        limit_memory: 150_000.0,
        limit_latency: 1.4,
    };
    c.bench_function("genetic_search_500_generations", |b| {
        b.iter(|| {
            let ga = GaParams {
                generations: 500,
                ..GaParams::default()
            };
            genetic_search(black_box(&pm), &constraints, &shape, &ga)
        })
    });
}

criterion_group!(
    benches,
    bench_forwards,
    bench_importance,
    bench_serve,
    bench_search
);
criterion_main!(benches);
