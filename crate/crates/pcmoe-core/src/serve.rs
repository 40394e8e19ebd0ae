//! Trace replay under the serving policies: the full reference model, the
//! committee runtime with amortized swapping, and the keep/on-demand
//! baselines, all metered by the virtual-time cost model.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::committee::{
    self, exchange_forward, select_committee, CommitteeState, CommitteeUpdate, PCConfig,
};
use crate::error::{Error, Result};
use crate::moe::{mean_pool, model_forward_reference, MoEModelSpec, Sample};
use crate::numkit::{magnitude, matvec, Vector};
use crate::swap::{
    self, CostModelParams, ParameterWarehouse, ResidentStore, RunMetrics, SampleMetrics, SwapMode,
    SwapPlan,
};
use crate::workload::Trace;

/// A serving policy for trace replay.
#[derive(Debug, Clone, PartialEq)]
pub enum ServePolicy {
    /// Full model, every expert resident.
    Reference,
    /// Committee runtime with swapping under the given configuration.
    Pc(PCConfig),
    /// A seeded random fixed committee per layer, exchange semantics, no
    /// swapping.
    RandomKeep { ratio: f64, seed: u64 },
    /// The top-magnitude fixed committee per layer, exchange semantics, no
    /// swapping.
    MagnitudeKeep { ratio: f64 },
    /// A top-magnitude fixed keep set; every other requested expert is
    /// loaded synchronously, executed, and discarded. Output matches the
    /// reference exactly; latency pays for every miss.
    OnDemand { ratio: f64 },
}

impl ServePolicy {
    pub fn label(&self) -> &'static str {
        match self {
            ServePolicy::Reference => "reference",
            ServePolicy::Pc(_) => "pc",
            ServePolicy::RandomKeep { .. } => "random-keep",
            ServePolicy::MagnitudeKeep { .. } => "magnitude-keep",
            ServePolicy::OnDemand { .. } => "on-demand",
        }
    }

    fn ratio(&self) -> Option<f64> {
        match self {
            ServePolicy::Reference | ServePolicy::Pc(_) => None,
            ServePolicy::RandomKeep { ratio, .. }
            | ServePolicy::MagnitudeKeep { ratio }
            | ServePolicy::OnDemand { ratio } => Some(*ratio),
        }
    }

    fn validate(&self) -> Result<()> {
        if let Some(r) = self.ratio() {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::invalid(format!("expert ratio {r} outside (0, 1]")));
            }
        }
        Ok(())
    }
}

/// Replay summary for one (model, trace, policy, cost) combination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServeReport {
    pub policy: String,
    /// Fraction of all experts resident, averaged over layers.
    pub expert_ratio: f64,
    /// Fraction of samples whose served argmax matches the label.
    pub accuracy: f64,
    /// Mean relative L2 distance between served and reference logits
    /// (0 = identical).
    pub fidelity: f64,
    pub num_samples: usize,
    pub peak_resident_bytes: u64,
    pub mean_latency_ms: f64,
    pub mean_compute_ms: f64,
    pub mean_stall_ms: f64,
    pub total_io_bytes: u64,
    pub mean_io_rate: f64,
    pub peak_io_rate: f64,
    /// Resident experts per layer when the replay ended.
    pub final_resident: Vec<Vec<usize>>,
}

impl ServeReport {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// Full replay result: the report plus per-sample metrics and logits.
#[derive(Debug, Clone)]
pub struct ServeOutcome {
    pub report: ServeReport,
    pub metrics: RunMetrics,
    pub logits: Vec<Vector>,
}

// ---------------------------------------------------------------------------
// Cost accounting. Op counts are coarse float-op tallies; they only need to
// be deterministic and monotone in the work actually performed.
// ---------------------------------------------------------------------------

fn ops_gate(n: usize, d: usize) -> u64 {
    (2 * n * d + 5 * n) as u64
}

fn ops_expert(d: usize, h: usize) -> u64 {
    (4 * d * h + 2 * h + d) as u64
}

fn ops_mix(d: usize) -> u64 {
    (2 * d) as u64
}

fn ops_head(classes: usize, d: usize, tokens: usize) -> u64 {
    ((tokens + 1) * d + 2 * classes * d) as u64
}

fn ops_importance(tokens: usize, d: usize, k: usize) -> u64 {
    (tokens * (2 * d + 3 * k)) as u64
}

/// Compute ops of one full-expert (reference / on-demand) sample forward.
fn reference_sample_ops(model: &MoEModelSpec, tokens: usize) -> u64 {
    let mut ops = 0;
    for layer in &model.layers {
        let per_token = ops_gate(layer.num_experts(), model.d)
            + layer.k as u64 * (ops_expert(model.d, model.h) + ops_mix(model.d));
        ops += tokens as u64 * per_token;
    }
    ops + ops_head(model.num_classes, model.d, tokens)
}

fn order_by_scores_desc(indices: &[usize], scores: &Vector) -> Vec<usize> {
    let mut order = indices.to_vec();
    order.sort_by(|&a, &b| match scores[b].partial_cmp(&scores[a]) {
        Some(std::cmp::Ordering::Equal) | None => a.cmp(&b),
        Some(ord) => ord,
    });
    order
}

// ---------------------------------------------------------------------------
// Committee runtime
// ---------------------------------------------------------------------------

/// How loads reach the staging area: staged in-line under virtual time, or
/// produced by a concurrent loader thread and collected at boundaries.
enum LoadBackend {
    Virtual,
    Threaded {
        loader: crate::swap::real_async::AsyncLoader,
        in_flight: Vec<usize>,
    },
}

/// The stepping committee runtime: one forward per call, with commits
/// between samples and amortized loads during them.
pub struct PcRuntime<'m> {
    model: &'m MoEModelSpec,
    config: PCConfig,
    cost: CostModelParams,
    magnitudes: Vec<Vec<f64>>,
    warehouse: ParameterWarehouse,
    store: ResidentStore,
    state: CommitteeState,
    plans: Vec<SwapPlan>,
    metrics: RunMetrics,
    backend: LoadBackend,
}

impl<'m> PcRuntime<'m> {
    pub fn new(model: &'m MoEModelSpec, config: PCConfig, cost: CostModelParams) -> Result<Self> {
        Self::with_backend(model, config, cost, LoadBackend::Virtual)
    }

    /// Real-async mode: expert copies are produced by a loader thread
    /// concurrent with compute and committed at the same boundaries as
    /// virtual-time mode, so outputs are identical.
    pub fn new_real_async(
        model: &'m MoEModelSpec,
        config: PCConfig,
        cost: CostModelParams,
    ) -> Result<Self> {
        let warehouse = ParameterWarehouse::from_model(model);
        let loader = crate::swap::real_async::AsyncLoader::spawn(std::sync::Arc::new(warehouse));
        let in_flight = vec![0; model.num_layers()];
        Self::with_backend(
            model,
            config,
            cost,
            LoadBackend::Threaded { loader, in_flight },
        )
    }

    fn with_backend(
        model: &'m MoEModelSpec,
        config: PCConfig,
        cost: CostModelParams,
        backend: LoadBackend,
    ) -> Result<Self> {
        cost.validate()?;
        config.validate(model)?;
        let magnitudes = crate::moe::expert_magnitudes(model)?;
        let state = CommitteeState::cold_start(model, &config, &magnitudes)?;
        let warehouse = ParameterWarehouse::from_model(model);
        let store = ResidentStore::cold_start(&warehouse, &state);
        let plans = vec![SwapPlan::empty(); model.num_layers()];
        let metrics = RunMetrics::new(cost.base_latency);
        Ok(PcRuntime {
            model,
            config,
            cost,
            magnitudes,
            warehouse,
            store,
            state,
            plans,
            metrics,
            backend,
        })
    }

    pub fn state(&self) -> &CommitteeState {
        &self.state
    }

    pub fn metrics(&self) -> &RunMetrics {
        &self.metrics
    }

    pub fn into_metrics(self) -> RunMetrics {
        self.metrics
    }

    pub fn resident_sets(&self) -> Vec<Vec<usize>> {
        self.state
            .layers
            .iter()
            .map(|l| l.resident.clone())
            .collect()
    }

    /// Slots currently visible to forwards, for inspection by tests.
    pub fn store(&self) -> &ResidentStore {
        &self.store
    }

    /// Serve one sample: commit finished loads, forward every layer with
    /// the current committees, rebuild swap plans at update boundaries and
    /// issue this sample's amortized load subset.
    pub fn step(&mut self, sample: &Sample) -> Result<Vector> {
        if let LoadBackend::Threaded { loader, in_flight } = &mut self.backend {
            // Collect everything the loader was asked for last sample; the
            // channel preserves request order, so staging order matches
            // virtual-time mode exactly.
            let expected: usize = in_flight.iter().sum();
            for _ in 0..expected {
                let done = loader.recv();
                self.store.stage(done.layer, done.expert_index, done.params);
            }
            in_flight.iter_mut().for_each(|c| *c = 0);
        }
        for l in 0..self.model.num_layers() {
            swap::commit_completed(&mut self.store, l, &mut self.state, &self.plans[l]);
        }

        let mut tokens = sample.tokens.clone();
        let mut ops: u64 = 0;
        let mut updates: Vec<(usize, CommitteeUpdate)> = Vec::new();
        for (l, layer) in self.model.layers.iter().enumerate() {
            let outcome = committee::layer_forward_pc_with(
                layer,
                &self.store.layers[l],
                &tokens,
                &mut self.state,
                l,
                &self.config,
                &self.magnitudes[l],
            )?;
            ops += tokens.len() as u64 * ops_gate(layer.num_experts(), self.model.d);
            ops += outcome.stats.executed_experts
                * (ops_expert(self.model.d, self.model.h) + ops_mix(self.model.d));
            ops += outcome.stats.passthroughs * ops_mix(self.model.d);
            if outcome.update.is_some() {
                ops += ops_importance(tokens.len(), self.model.d, layer.k);
            }
            if let Some(update) = outcome.update {
                updates.push((l, update));
            }
            tokens = outcome.outputs;
        }
        let pooled = mean_pool(&tokens)?;
        let logits = matvec(&self.model.head, &pooled)?;
        ops += ops_head(self.model.num_classes, self.model.d, sample.tokens.len());

        // A fresh request supersedes whatever was still scheduled.
        for (l, update) in updates {
            swap::discard_plan(&mut self.store, l, &mut self.plans[l]);
            let resident_by_score =
                order_by_scores_desc(&self.state.layers[l].resident, &update.scores);
            self.plans[l] =
                swap::plan_swap(&resident_by_score, &update.selected, self.config.interval)?;
        }

        let compute_ms = self.cost.compute_ms(ops);
        let mut io_bytes = 0u64;
        let mut io_ms_total = 0.0;
        let mut final_io_ms = 0.0;
        let mut any_final = false;
        for l in 0..self.model.num_layers() {
            let (subset_bytes, io_ms, reached_final) = match &mut self.backend {
                LoadBackend::Virtual => {
                    let out = swap::advance(
                        &mut self.store,
                        l,
                        &self.warehouse,
                        &mut self.plans[l],
                        &self.cost,
                        ops,
                    );
                    (out.io_bytes, out.io_ms, out.reached_final_subset)
                }
                LoadBackend::Threaded { loader, in_flight } => {
                    match swap::next_subset(&mut self.plans[l]) {
                        None => (0, 0.0, false),
                        Some((subset, reached_final)) => {
                            let bytes = subset.len() as u64 * self.warehouse.expert_bytes(l);
                            in_flight[l] = subset.len();
                            for index in subset {
                                loader.request(l, index);
                            }
                            (bytes, self.cost.io_ms(bytes), reached_final)
                        }
                    }
                }
            };
            io_bytes += subset_bytes;
            io_ms_total += io_ms;
            if reached_final {
                any_final = true;
                final_io_ms += io_ms;
            }
        }
        // All layers share the update boundary, so their final transfers
        // race the same deadline and queue on the same link.
        let stall_ms = match self.cost.mode {
            SwapMode::Sync => io_ms_total,
            SwapMode::Async => {
                if any_final {
                    (final_io_ms - compute_ms).max(0.0)
                } else {
                    0.0
                }
            }
        };

        self.metrics.record(SampleMetrics {
            sample_id: self.state.sample_counter,
            compute_ms,
            stall_ms,
            io_bytes,
            resident_bytes: self.store.resident_bytes(),
        });
        self.state.sample_counter += 1;
        Ok(logits)
    }
}

// ---------------------------------------------------------------------------
// Trace replay
// ---------------------------------------------------------------------------

fn labels_of(trace: &Trace) -> Result<Vec<usize>> {
    trace
        .samples
        .iter()
        .map(|s| {
            s.label
                .ok_or_else(|| Error::invalid("trace has unlabeled samples"))
        })
        .collect()
}

pub(crate) fn reference_logits(model: &MoEModelSpec, trace: &Trace) -> Result<Vec<Vector>> {
    trace
        .samples
        .iter()
        .map(|s| model_forward_reference(model, s).map(|(l, _)| l))
        .collect()
}

fn accuracy_of(logits: &[Vector], labels: &[usize]) -> f64 {
    let correct = logits
        .iter()
        .zip(labels)
        .filter(|(l, &y)| l.argmax() == Some(y))
        .count();
    correct as f64 / labels.len() as f64
}

fn fidelity_of(logits: &[Vector], reference: &[Vector]) -> f64 {
    let mut total = 0.0;
    for (served, refl) in logits.iter().zip(reference) {
        let diff: Vec<f64> = served.iter().zip(refl.iter()).map(|(a, b)| a - b).collect();
        total += magnitude(&diff) / magnitude(refl.as_slice()).max(1e-12);
    }
    total / reference.len() as f64
}

fn build_report(
    policy: &ServePolicy,
    expert_ratio: f64,
    logits: &[Vector],
    labels: &[usize],
    reference: &[Vector],
    metrics: &RunMetrics,
    final_resident: Vec<Vec<usize>>,
) -> ServeReport {
    ServeReport {
        policy: policy.label().to_string(),
        expert_ratio,
        accuracy: accuracy_of(logits, labels),
        fidelity: fidelity_of(logits, reference),
        num_samples: logits.len(),
        peak_resident_bytes: metrics.peak_resident_bytes,
        mean_latency_ms: metrics.mean_latency_ms(),
        mean_compute_ms: metrics.mean_compute_ms(),
        mean_stall_ms: metrics.mean_stall_ms(),
        total_io_bytes: metrics.total_io_bytes(),
        mean_io_rate: metrics.mean_io_rate(),
        peak_io_rate: metrics.peak_io_rate(),
        final_resident,
    }
}

fn fixed_keep_committees(model: &MoEModelSpec, policy: &ServePolicy) -> Result<Vec<Vec<usize>>> {
    use rand::SeedableRng;
    let mags = crate::moe::expert_magnitudes(model)?;
    match *policy {
        ServePolicy::RandomKeep { ratio, seed } => {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            model
                .layers
                .iter()
                .map(|layer| {
                    let n = layer.num_experts();
                    let size = committee::committee_size(ratio, n);
                    let mut keep = rand::seq::index::sample(&mut rng, n, size).into_vec();
                    keep.sort_unstable();
                    Ok(keep)
                })
                .collect()
        }
        ServePolicy::MagnitudeKeep { ratio } | ServePolicy::OnDemand { ratio } => model
            .layers
            .iter()
            .enumerate()
            .map(|(l, layer)| {
                let size = committee::committee_size(ratio, layer.num_experts());
                let mut keep = select_committee(&Vector::new(mags[l].clone()), size)?;
                keep.sort_unstable();
                Ok(keep)
            })
            .collect(),
        _ => Err(Error::invalid("not a keep policy")),
    }
}

/// Replay with a fixed per-layer committee under exchange semantics and no
/// swapping.
fn serve_fixed_committee(
    model: &MoEModelSpec,
    trace: &Trace,
    committees: &[Vec<usize>],
    cost: &CostModelParams,
) -> Result<(Vec<Vector>, RunMetrics)> {
    let warehouse = ParameterWarehouse::from_model(model);
    let keep_bytes: u64 = committees
        .iter()
        .enumerate()
        .map(|(l, c)| c.len() as u64 * warehouse.expert_bytes(l))
        .sum();
    let mut metrics = RunMetrics::new(cost.base_latency);
    let mut all_logits = Vec::with_capacity(trace.samples.len());
    for (sample_id, sample) in trace.samples.iter().enumerate() {
        let mut tokens = sample.tokens.clone();
        let mut ops = 0u64;
        for (l, layer) in model.layers.iter().enumerate() {
            let (outputs, stats) =
                exchange_forward(layer, layer, &tokens, &committees[l], layer.k)?;
            ops += tokens.len() as u64 * ops_gate(layer.num_experts(), model.d);
            ops += stats.executed_experts * (ops_expert(model.d, model.h) + ops_mix(model.d));
            tokens = outputs;
        }
        let pooled = mean_pool(&tokens)?;
        let logits = matvec(&model.head, &pooled)?;
        ops += ops_head(model.num_classes, model.d, sample.tokens.len());
        metrics.record(SampleMetrics {
            sample_id,
            compute_ms: cost.compute_ms(ops),
            stall_ms: 0.0,
            io_bytes: 0,
            resident_bytes: keep_bytes,
        });
        all_logits.push(logits);
    }
    Ok((all_logits, metrics))
}

/// Replay the reference model, with every expert resident and no IO.
fn serve_reference(
    model: &MoEModelSpec,
    trace: &Trace,
    cost: &CostModelParams,
    reference: &[Vector],
) -> Result<(Vec<Vector>, RunMetrics)> {
    let warehouse = ParameterWarehouse::from_model(model);
    let full_bytes: u64 = model
        .layers
        .iter()
        .enumerate()
        .map(|(l, layer)| layer.num_experts() as u64 * warehouse.expert_bytes(l))
        .sum();
    let mut metrics = RunMetrics::new(cost.base_latency);
    for (sample_id, sample) in trace.samples.iter().enumerate() {
        let ops = reference_sample_ops(model, sample.tokens.len());
        metrics.record(SampleMetrics {
            sample_id,
            compute_ms: cost.compute_ms(ops),
            stall_ms: 0.0,
            io_bytes: 0,
            resident_bytes: full_bytes,
        });
    }
    Ok((reference.to_vec(), metrics))
}

/// Replay with on-demand loading: output equals the reference, but every
/// distinct non-resident expert selected in a layer costs one synchronous
/// load per sample.
fn serve_on_demand(
    model: &MoEModelSpec,
    trace: &Trace,
    keep: &[Vec<usize>],
    cost: &CostModelParams,
) -> Result<(Vec<Vector>, RunMetrics)> {
    let warehouse = ParameterWarehouse::from_model(model);
    let keep_bytes: u64 = keep
        .iter()
        .enumerate()
        .map(|(l, c)| c.len() as u64 * warehouse.expert_bytes(l))
        .sum();
    let mut metrics = RunMetrics::new(cost.base_latency);
    let mut all_logits = Vec::with_capacity(trace.samples.len());
    for (sample_id, sample) in trace.samples.iter().enumerate() {
        let (logits, record) = model_forward_reference(model, sample)?;
        let ops = reference_sample_ops(model, sample.tokens.len());

        let mut io_bytes = 0u64;
        // One transient slot is reused for misses, so the instantaneous
        // footprint only ever grows by the largest missing expert.
        let mut transient_bytes = 0u64;
        for (l, layer_routing) in record.layers.iter().enumerate() {
            let mut misses = std::collections::BTreeSet::new();
            for selected in layer_routing {
                for &(i, _) in selected {
                    if !keep[l].contains(&i) {
                        misses.insert(i);
                    }
                }
            }
            if !misses.is_empty() {
                io_bytes += misses.len() as u64 * warehouse.expert_bytes(l);
                transient_bytes = transient_bytes.max(warehouse.expert_bytes(l));
            }
        }
        metrics.record(SampleMetrics {
            sample_id,
            compute_ms: cost.compute_ms(ops),
            stall_ms: cost.io_ms(io_bytes),
            io_bytes,
            resident_bytes: keep_bytes + transient_bytes,
        });
        all_logits.push(logits);
    }
    Ok((all_logits, metrics))
}

/// Replay `trace` under `policy` and summarize.
pub fn serve_trace(
    model: &MoEModelSpec,
    trace: &Trace,
    policy: &ServePolicy,
    cost: &CostModelParams,
) -> Result<ServeOutcome> {
    serve_trace_with_reference(model, trace, policy, cost, None)
}

/// As [`serve_trace`], reusing precomputed reference logits when the
/// caller replays the same trace many times.
pub fn serve_trace_with_reference(
    model: &MoEModelSpec,
    trace: &Trace,
    policy: &ServePolicy,
    cost: &CostModelParams,
    precomputed_reference: Option<&[Vector]>,
) -> Result<ServeOutcome> {
    cost.validate()?;
    policy.validate()?;
    if trace.samples.is_empty() {
        return Err(Error::invalid("trace has no samples"));
    }
    let labels = labels_of(trace)?;
    let owned_reference;
    let reference: &[Vector] = match precomputed_reference {
        Some(r) => r,
        None => {
            owned_reference = reference_logits(model, trace)?;
            &owned_reference
        }
    };

    let all_experts: Vec<Vec<usize>> = model
        .layers
        .iter()
        .map(|l| (0..l.num_experts()).collect())
        .collect();

    let (logits, metrics, expert_ratio, final_resident) = match policy {
        ServePolicy::Reference => {
            let (logits, metrics) = serve_reference(model, trace, cost, reference)?;
            (logits, metrics, 1.0, all_experts)
        }
        ServePolicy::Pc(config) => {
            let mut runtime = PcRuntime::new(model, config.clone(), *cost)?;
            let mut logits = Vec::with_capacity(trace.samples.len());
            for sample in &trace.samples {
                logits.push(runtime.step(sample)?);
            }
            let ratio = config.expert_ratio(model);
            let final_resident = runtime.resident_sets();
            (logits, runtime.into_metrics(), ratio, final_resident)
        }
        ServePolicy::RandomKeep { .. } | ServePolicy::MagnitudeKeep { .. } => {
            let committees = fixed_keep_committees(model, policy)?;
            let (logits, metrics) = serve_fixed_committee(model, trace, &committees, cost)?;
            let ratio = mean_ratio(model, &committees);
            (logits, metrics, ratio, committees)
        }
        ServePolicy::OnDemand { .. } => {
            let keep = fixed_keep_committees(model, policy)?;
            let (logits, metrics) = serve_on_demand(model, trace, &keep, cost)?;
            let ratio = mean_ratio(model, &keep);
            (logits, metrics, ratio, keep)
        }
    };

    let report = build_report(
        policy,
        expert_ratio,
        &logits,
        &labels,
        reference,
        &metrics,
        final_resident,
    );
    Ok(ServeOutcome {
        report,
        metrics,
        logits,
    })
}

fn mean_ratio(model: &MoEModelSpec, committees: &[Vec<usize>]) -> f64 {
    let total: usize = committees.iter().map(|c| c.len()).sum();
    let all: usize = model.layers.iter().map(|l| l.num_experts()).sum();
    total as f64 / all as f64
}
