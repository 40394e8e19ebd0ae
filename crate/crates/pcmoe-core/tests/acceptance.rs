//! Acceptance suite: one test per criterion, each printing a PASS/FAIL
//! line (run with `--nocapture` to see them on success).

use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use pcmoe_core::committee::{committee_size, PCConfig, Strategy};
use pcmoe_core::moe::{
    expert_magnitudes, gate_forward, route_topk, ExpertParams, GateParams, MoELayerSpec,
    MoEModelSpec,
};
use pcmoe_core::numkit::{magnitude, Matrix, Vector};
use pcmoe_core::planner::{
    build_profiling_trace, enumerate_configs, fit_perf_models, genetic_search, predict_metrics,
    random_configs, run_profile, Constraints, GaParams, ModelShape,
};
use pcmoe_core::serve::{serve_trace, ServePolicy};
use pcmoe_core::swap::{
    advance, commit_completed, discard_plan, plan_swap, CostModelParams, ParameterWarehouse,
    ResidentStore, SwapMode, SwapPlan,
};
use pcmoe_core::workload::{gen_model, gen_trace, Order, TraceSpec};
use pcmoe_core::{importance_scores, CommitteeState};

fn check(name: &str, ok: bool) {
    println!("acceptance {name}: {}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "{name} failed");
}

fn default_cost(mode: SwapMode) -> CostModelParams {
    CostModelParams {
        compute_throughput: 20_000.0,
        io_bandwidth: 2_000.0,
        base_latency: 0.25,
        mode,
    }
}

#[test]
fn criterion_01_full_committee_matches_reference() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for trial in 0..20 {
        let layers = rng.random_range(1..=3);
        let n = rng.random_range(2..=8);
        let d = rng.random_range(4..=16);
        let h = rng.random_range(4..=16);
        let k = rng.random_range(1..=n.min(3));
        let model = gen_model(d, h, layers, n, k, 4, 5000 + trial).unwrap();
        let spec = TraceSpec {
            num_samples: 20,
            tokens_per_sample: 3,
            num_clusters: 3,
            drift_period: 5,
            noise_sigma: 0.3,
            order: Order::Sequential,
            seed: 9000 + trial,
        };
        let trace = gen_trace(&spec, Some(&model)).unwrap();
        let reference = serve_trace(
            &model,
            &trace,
            &ServePolicy::Reference,
            &default_cost(SwapMode::Async),
        )
        .unwrap();
        for strategy in [Strategy::Skip, Strategy::Exchange] {
            let config = PCConfig::full(&model, 4, strategy);
            let pc = serve_trace(
                &model,
                &trace,
                &ServePolicy::Pc(config),
                &default_cost(SwapMode::Async),
            )
            .unwrap();
            for (a, b) in pc.logits.iter().zip(&reference.logits) {
                for (x, y) in a.iter().zip(b.iter()) {
                    worst = worst.max((x - y).abs());
                }
            }
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    check(
        "criterion 1 (full-committee equivalence)",
        worst <= 1e-12 && elapsed < 10.0,
    );
}

fn random_layer(rng: &mut ChaCha8Rng, d: usize, h: usize, n: usize, k: usize) -> MoELayerSpec {
    let mat = |rng: &mut ChaCha8Rng, r: usize, c: usize| {
        Matrix::new(
            r,
            c,
            (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    };
    let vec = |rng: &mut ChaCha8Rng, len: usize| {
        Vector::new((0..len).map(|_| rng.random_range(-1.0..1.0)).collect())
    };
    MoELayerSpec {
        k,
        gate: GateParams { wg: mat(rng, n, d) },
        experts: (0..n)
            .map(|_| ExpertParams::new(mat(rng, h, d), vec(rng, h), mat(rng, d, h), vec(rng, d)))
            .collect(),
    }
}

#[test]
fn criterion_02_importance_matches_brute_force_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut all_equal = true;
    for _ in 0..100 {
        let d = rng.random_range(2..=6);
        let h = rng.random_range(2..=6);
        let n = rng.random_range(2..=8);
        let k = rng.random_range(1..=n);
        let layer = random_layer(&mut rng, d, h, n, k);
        let mags: Vec<f64> = layer.experts.iter().map(|e| e.cached_magnitude).collect();
        let t = rng.random_range(1..=6);
        let tokens: Vec<Vector> = (0..t)
            .map(|_| Vector::new((0..d).map(|_| rng.random_range(-2.0..2.0)).collect()))
            .collect();
        let scores = importance_scores(&layer, &tokens, &mags, k).unwrap();

        // Brute-force re-evaluation, expert-major token loop.
        for i in 0..n {
            let mut expected = 0.0;
            for x in &tokens {
                let gate_out = gate_forward(&layer.gate, x).unwrap();
                let selected = route_topk(&gate_out, k).unwrap();
                if let Some(&(_, w)) = selected.iter().find(|&&(j, _)| j == i) {
                    expected += magnitude(x.as_slice()) * w * mags[i];
                }
            }
            all_equal &= scores[i].to_bits() == expected.to_bits();
        }
    }
    check(
        "criterion 2 (importance score brute-force oracle, bitwise)",
        all_equal,
    );
}

/// d = 1 model whose expert `i` multiplies positive inputs by `mults[i]`;
/// gate logits are `gains[i] * x`.
fn scalar_layer(mults: &[f64], gains: &[f64], k: usize) -> MoELayerSpec {
    MoELayerSpec {
        k,
        gate: GateParams {
            wg: Matrix::from_rows(&gains.iter().map(|&g| vec![g]).collect::<Vec<_>>()).unwrap(),
        },
        experts: mults
            .iter()
            .map(|&m| {
                ExpertParams::new(
                    Matrix::new(1, 1, vec![1.0]).unwrap(),
                    Vector::zeros(1),
                    Matrix::new(1, 1, vec![m]).unwrap(),
                    Vector::zeros(1),
                )
            })
            .collect(),
    }
}

/// Descending order with ties to the lower index, written independently of
/// the library's selection code.
fn symbolic_top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

#[test]
fn criterion_03_skip_exchange_match_symbolic_forms() {
    let mults = [2.0, -1.0, 0.5];
    let gains = [0.3f64, 0.9, 0.5];
    let x = 1.7;
    let exps: Vec<f64> = gains.iter().map(|g| (g * x).exp()).collect();
    let z: f64 = exps.iter().sum();
    let probs: Vec<f64> = exps.iter().map(|e| e / z).collect();

    let mut worst: f64 = 0.0;
    for k in [1usize, 2] {
        let layer = scalar_layer(&mults, &gains, k);
        let tokens = [Vector::new(vec![x])];
        for subset_bits in 0..8u32 {
            let resident: Vec<usize> = (0..3).filter(|i| subset_bits & (1 << i) != 0).collect();

            // Skip: unmasked top-k, resident experts run, others pass x through.
            let selected = symbolic_top_k(&probs, k);
            let mut skip_expected = 0.0;
            for &i in &selected {
                if resident.contains(&i) {
                    skip_expected += probs[i] * (mults[i] * x);
                } else {
                    skip_expected += probs[i] * x;
                }
            }
            let skip_out = pcmoe_core::handle_skip(&layer, &tokens, &resident, k).unwrap();
            worst = worst.max((skip_out[0][0] - skip_expected).abs());

            // Exchange: softmax over resident logits, top-min(k, |resident|).
            if !resident.is_empty() {
                let rz: f64 = resident.iter().map(|&i| exps[i]).sum();
                let masked: Vec<f64> = (0..3)
                    .map(|i| {
                        if resident.contains(&i) {
                            exps[i] / rz
                        } else {
                            f64::NEG_INFINITY
                        }
                    })
                    .collect();
                let chosen = symbolic_top_k(&masked, k.min(resident.len()));
                let mut exchange_expected = 0.0;
                for &i in &chosen {
                    exchange_expected += (exps[i] / rz) * (mults[i] * x);
                }
                let exchange_out =
                    pcmoe_core::handle_exchange(&layer, &tokens, &resident, k).unwrap();
                worst = worst.max((exchange_out[0][0] - exchange_expected).abs());
            }
        }
    }
    check(
        "criterion 3 (skip/exchange symbolic oracle)",
        worst <= 1e-12,
    );
}

#[test]
fn criterion_04_amortization_accounting() {
    let model = gen_model(4, 4, 1, 16, 2, 3, 404).unwrap();
    let config = PCConfig {
        interval: 4,
        num_experts: vec![8],
        strategies: vec![Strategy::Exchange],
    };
    let mags = expert_magnitudes(&model).unwrap();
    let mut state = CommitteeState::cold_start(&model, &config, &mags).unwrap();
    let warehouse = ParameterWarehouse::from_model(&model);
    let mut store = ResidentStore::cold_start(&warehouse, &state);
    let cost = default_cost(SwapMode::Async);

    let resident = state.layers[0].resident.clone();
    let target: Vec<usize> = (0..16).filter(|i| !resident.contains(i)).collect();
    assert_eq!(target.len(), 8, "8 pending loads");
    let mut plan = plan_swap(&resident, &target, 4).unwrap();

    let expert_bytes = warehouse.expert_bytes(0);
    let mut ok = true;
    for _ in 0..4 {
        let out = advance(&mut store, 0, &warehouse, &mut plan, &cost, 1000);
        ok &= out.io_bytes == 2 * expert_bytes;
        commit_completed(&mut store, 0, &mut state, &plan);
    }
    let mut expected = target.clone();
    expected.sort_unstable();
    ok &= state.layers[0].resident == expected;
    ok &= store.layers[0].resident_indices() == expected;
    ok &= plan.is_finished();
    check(
        "criterion 4 (amortized loads: 2 per sample over 4 samples)",
        ok,
    );
}

fn slots_match_warehouse(store: &ResidentStore, warehouse: &ParameterWarehouse) -> bool {
    store.layers.iter().enumerate().all(|(l, layer)| {
        layer.slots.iter().all(|slot| {
            let visible = slot.params.flatten();
            let truth = warehouse.expert(l, slot.expert_index).flatten();
            visible.len() == truth.len()
                && visible
                    .iter()
                    .zip(&truth)
                    .all(|(a, b)| a.to_bits() == b.to_bits())
        })
    })
}

#[test]
fn criterion_05_swap_atomicity_fuzz() {
    let model = gen_model(3, 3, 2, 6, 1, 3, 505).unwrap();
    let warehouse = ParameterWarehouse::from_model(&model);
    let mags = expert_magnitudes(&model).unwrap();
    let mut violations = 0usize;

    for seed in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let committee = rng.random_range(1..=3);
        let config = PCConfig {
            interval: rng.random_range(1..=4),
            num_experts: vec![committee; 2],
            strategies: vec![Strategy::Exchange; 2],
        };
        let mut state = CommitteeState::cold_start(&model, &config, &mags).unwrap();
        let mut store = ResidentStore::cold_start(&warehouse, &state);
        let mut plans = [SwapPlan::empty(), SwapPlan::empty()];
        let cost = default_cost(if rng.random_bool(0.5) {
            SwapMode::Sync
        } else {
            SwapMode::Async
        });

        for _ in 0..rng.random_range(4..20) {
            let l = rng.random_range(0..2);
            match rng.random_range(0..3) {
                0 => {
                    advance(&mut store, l, &warehouse, &mut plans[l], &cost, 100);
                }
                1 => {
                    commit_completed(&mut store, l, &mut state, &plans[l]);
                }
                _ => {
                    // A new request supersedes the current plan.
                    commit_completed(&mut store, l, &mut state, &plans[l]);
                    discard_plan(&mut store, l, &mut plans[l]);
                    let resident = state.layers[l].resident.clone();
                    let mut others: Vec<usize> = (0..6).filter(|i| !resident.contains(i)).collect();
                    let wanted = rng.random_range(0..=committee.min(others.len()));
                    others.truncate(wanted);
                    let mut target = others;
                    for &r in &resident {
                        if target.len() < committee {
                            target.push(r);
                        }
                    }
                    plans[l] = plan_swap(&resident, &target, config.interval).unwrap();
                    state.layers[l].pending = target
                        .iter()
                        .copied()
                        .filter(|i| !resident.contains(i))
                        .collect();
                }
            }
            if !slots_match_warehouse(&store, &warehouse) {
                violations += 1;
            }
        }
    }
    check(
        "criterion 5 (atomicity fuzz: 1000 interleavings, slots always complete)",
        violations == 0,
    );
}

fn r_squared(actual: &[f64], predicted: &[f64]) -> f64 {
    let mean = actual.iter().sum::<f64>() / actual.len() as f64;
    let ss_tot: f64 = actual.iter().map(|y| (y - mean).powi(2)).sum();
    let ss_res: f64 = actual
        .iter()
        .zip(predicted)
        .map(|(y, p)| (y - p).powi(2))
        .sum();
    1.0 - ss_res / ss_tot
}

#[test]
fn criterion_06_memory_model_exactness() {
    let model = gen_model(4, 4, 2, 4, 2, 3, 606).unwrap();
    let spec = TraceSpec {
        num_samples: 60,
        tokens_per_sample: 3,
        num_clusters: 2,
        drift_period: 8,
        noise_sigma: 0.25,
        order: Order::Sequential,
        seed: 66,
    };
    let base = gen_trace(&spec, Some(&model)).unwrap();
    let trace = build_profiling_trace(&base, 4).unwrap();
    let cost = default_cost(SwapMode::Async);
    let shape = ModelShape::of(&model).with_intervals(vec![1, 2, 4]);

    let configs = random_configs(&shape, 96, 660);
    let records = run_profile(&model, &trace, &configs, &cost).unwrap();
    let (train, held_out) = records.split_at(64);

    let pm = fit_perf_models(train).unwrap();
    let actual: Vec<f64> = held_out.iter().map(|r| r.peak_memory as f64).collect();
    let predicted: Vec<f64> = held_out
        .iter()
        .map(|r| predict_metrics(&pm, &r.config).1)
        .collect();
    let r2 = r_squared(&actual, &predicted);
    check(
        &format!("criterion 6 (memory model R^2 = {r2:.6} >= 0.999 on 32 held-out configs)"),
        r2 >= 0.999,
    );
}

#[test]
fn criterion_07_planner_matches_exhaustive_optimum() {
    let started = Instant::now();
    let model = gen_model(4, 4, 2, 4, 2, 3, 707).unwrap();
    let spec = TraceSpec {
        num_samples: 40,
        tokens_per_sample: 3,
        num_clusters: 2,
        drift_period: 4,
        noise_sigma: 0.25,
        order: Order::Sequential,
        seed: 77,
    };
    let base = gen_trace(&spec, Some(&model)).unwrap();
    let trace = build_profiling_trace(&base, 2).unwrap();
    let cost = default_cost(SwapMode::Async);
    let shape = ModelShape::of(&model).with_intervals(vec![1, 2]);

    let configs = random_configs(&shape, 32, 770);
    let records = run_profile(&model, &trace, &configs, &cost).unwrap();
    let pm = fit_perf_models(&records).unwrap();

    // Budgets sit mid-range so the feasible set is a strict subset.
    let space = enumerate_configs(&shape);
    assert_eq!(space.len(), 2 * 16 * 4);
    let mems: Vec<f64> = space.iter().map(|c| predict_metrics(&pm, c).1).collect();
    let lats: Vec<f64> = space.iter().map(|c| predict_metrics(&pm, c).2).collect();
    let mid = |v: &[f64]| {
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        lo + 0.7 * (hi - lo)
    };
    let constraints = Constraints {
        limit_memory: mid(&mems),
        limit_latency: mid(&lats),
    };

    let optimum = space
        .iter()
        .filter(|c| {
            let (_, m, l) = predict_metrics(&pm, c);
            m <= constraints.limit_memory && l <= constraints.limit_latency
        })
        .map(|c| predict_metrics(&pm, c).0)
        .fold(f64::NEG_INFINITY, f64::max);
    assert!(optimum.is_finite(), "constraints left no feasible config");

    let mut hits = 0;
    let mut always_feasible = true;
    for seed in 0..10 {
        let ga = GaParams {
            population: 50,
            mutation_rate: 0.5,
            crossover_rate: 0.01,
            generations: 5000,
            seed,
        };
        let best =
            genetic_search(&pm, &constraints, &shape, &ga).expect("feasible space is non-empty");
        let (acc, mem, lat) = predict_metrics(&pm, &best);
        always_feasible &= mem <= constraints.limit_memory && lat <= constraints.limit_latency;
        if acc >= optimum - 0.01 * optimum.abs() {
            hits += 1;
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    check(
        &format!(
            "criterion 7 (genetic search within 1% of optimum in {hits}/10 seeds, \
             always feasible: {always_feasible}, {elapsed:.1}s < 60s)"
        ),
        hits >= 9 && always_feasible && elapsed < 60.0,
    );
}

fn pc_half_policy(model: &MoEModelSpec) -> ServePolicy {
    ServePolicy::Pc(PCConfig::uniform_ratio(model, 0.5, 4, Strategy::Exchange).unwrap())
}

#[test]
fn criterion_08_locality_effect_on_accuracy() {
    let model = gen_model(8, 6, 2, 8, 2, 4, 808).unwrap();
    let cost = default_cost(SwapMode::Async);
    let mut seq_mean = 0.0;
    let mut shuf_mean = 0.0;
    for seed in 0..10u64 {
        let mut spec = TraceSpec {
            num_samples: 64,
            tokens_per_sample: 4,
            num_clusters: 4,
            drift_period: 16,
            noise_sigma: 0.3,
            order: Order::Sequential,
            seed: 8800 + seed,
        };
        let seq = gen_trace(&spec, Some(&model)).unwrap();
        spec.order = Order::Shuffled;
        let shuf = gen_trace(&spec, Some(&model)).unwrap();

        seq_mean += serve_trace(&model, &seq, &pc_half_policy(&model), &cost)
            .unwrap()
            .report
            .accuracy;
        shuf_mean += serve_trace(&model, &shuf, &pc_half_policy(&model), &cost)
            .unwrap()
            .report
            .accuracy;
    }
    seq_mean /= 10.0;
    shuf_mean /= 10.0;
    check(
        &format!(
            "criterion 8 (locality: sequential accuracy {seq_mean:.3} > shuffled {shuf_mean:.3})"
        ),
        seq_mean > shuf_mean,
    );
}

#[test]
fn criterion_09_baseline_dominance() {
    let model = gen_model(8, 6, 2, 8, 2, 4, 909).unwrap();
    let cost = default_cost(SwapMode::Async);
    let mut pc_mean = 0.0;
    let mut random_mean = 0.0;
    let mut magnitude_mean = 0.0;
    let mut on_demand_exact = true;
    let mut latency_dominates = true;

    for seed in 0..10u64 {
        let spec = TraceSpec {
            num_samples: 64,
            tokens_per_sample: 4,
            num_clusters: 4,
            drift_period: 16,
            noise_sigma: 0.3,
            order: Order::Sequential,
            seed: 9900 + seed,
        };
        let trace = gen_trace(&spec, Some(&model)).unwrap();

        let reference = serve_trace(&model, &trace, &ServePolicy::Reference, &cost).unwrap();
        let pc = serve_trace(&model, &trace, &pc_half_policy(&model), &cost).unwrap();
        let random = serve_trace(
            &model,
            &trace,
            &ServePolicy::RandomKeep {
                ratio: 0.5,
                seed: 1000 + seed,
            },
            &cost,
        )
        .unwrap();
        let magnitude = serve_trace(
            &model,
            &trace,
            &ServePolicy::MagnitudeKeep { ratio: 0.5 },
            &cost,
        )
        .unwrap();
        let on_demand =
            serve_trace(&model, &trace, &ServePolicy::OnDemand { ratio: 0.5 }, &cost).unwrap();

        pc_mean += pc.report.accuracy;
        random_mean += random.report.accuracy;
        magnitude_mean += magnitude.report.accuracy;
        on_demand_exact &= on_demand.report.accuracy == reference.report.accuracy;
        latency_dominates &= on_demand.report.mean_latency_ms > pc.report.mean_latency_ms;
    }
    pc_mean /= 10.0;
    random_mean /= 10.0;
    magnitude_mean /= 10.0;
    check(
        &format!(
            "criterion 9 (50% committees: pc {pc_mean:.3} >= random {random_mean:.3} and \
             >= magnitude {magnitude_mean:.3}; on-demand exact & slower: \
             {on_demand_exact}/{latency_dominates})"
        ),
        pc_mean >= random_mean && pc_mean >= magnitude_mean && on_demand_exact && latency_dominates,
    );
}

#[test]
fn criterion_10_tradeoff_monotonicity() {
    let model = gen_model(8, 6, 2, 8, 2, 4, 1010).unwrap();
    let cost = default_cost(SwapMode::Async);
    let spec = TraceSpec {
        num_samples: 64,
        tokens_per_sample: 4,
        num_clusters: 4,
        drift_period: 16,
        noise_sigma: 0.3,
        order: Order::Sequential,
        seed: 1100,
    };
    let trace = gen_trace(&spec, Some(&model)).unwrap();
    let reference = serve_trace(&model, &trace, &ServePolicy::Reference, &cost).unwrap();

    let ratios = [1.0, 0.75, 0.5, 0.25];
    let mut peaks = Vec::new();
    let mut computes = Vec::new();
    let mut full_matches_reference = false;
    for (i, &ratio) in ratios.iter().enumerate() {
        let config = PCConfig::uniform_ratio(&model, ratio, 4, Strategy::Exchange).unwrap();
        let out = serve_trace(&model, &trace, &ServePolicy::Pc(config), &cost).unwrap();
        peaks.push(out.report.peak_resident_bytes);
        computes.push(out.metrics.total_compute_ms());
        if i == 0 {
            full_matches_reference = out.report.accuracy == reference.report.accuracy;
        }
    }
    // Committee sizing at ratio r keeps clamp(round(r*n), 1, n) experts.
    let sizes: Vec<usize> = ratios.iter().map(|&r| committee_size(r, 8)).collect();
    assert_eq!(sizes, vec![8, 6, 4, 2]);

    let monotone_mem = peaks.windows(2).all(|w| w[1] <= w[0]);
    let monotone_compute = computes.windows(2).all(|w| w[1] <= w[0]);
    check(
        &format!(
            "criterion 10 (ratio sweep: memory {peaks:?} and compute non-increasing: \
             {monotone_mem}/{monotone_compute}; 100% accuracy equals reference: \
             {full_matches_reference})"
        ),
        monotone_mem && monotone_compute && full_matches_reference,
    );
}
