//! Two-tier parameter store with amortized, optionally overlapped expert
//! swapping and deterministic virtual-time cost accounting.
//!
//! All expert parameters live in the [`ParameterWarehouse`] (secondary
//! tier). The [`ResidentStore`] holds the committee copies actually used by
//! forwards. Pending loads are split into near-equal subsets, one per
//! sample of the update interval; loads land in a staging area and become
//! visible only when [`commit_completed`] installs them between forwards,
//! so a reader always sees a complete old expert or a complete new one.

pub mod real_async;

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::committee::{CommitteeState, ExpertSource};
use crate::error::{Error, Result};
use crate::moe::{ExpertParams, MoEModelSpec};

/// Whether IO stalls the sample (`sync`) or overlaps compute (`async`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SwapMode {
    Sync,
    Async,
}

/// Deterministic stand-in for hardware: virtual milliseconds are derived
/// from float-op counts and byte counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModelParams {
    /// Float-ops per virtual millisecond.
    pub compute_throughput: f64,
    /// Bytes per virtual millisecond.
    pub io_bandwidth: f64,
    /// Fixed virtual milliseconds added to every sample.
    pub base_latency: f64,
    pub mode: SwapMode,
}

impl CostModelParams {
    pub fn validate(&self) -> Result<()> {
        if self.compute_throughput <= 0.0 || self.io_bandwidth <= 0.0 || self.base_latency <= 0.0 {
            return Err(Error::invalid(
                "cost model parameters must all be positive",
            ));
        }
        Ok(())
    }

    pub fn compute_ms(&self, ops: u64) -> f64 {
        ops as f64 / self.compute_throughput
    }

    pub fn io_ms(&self, bytes: u64) -> f64 {
        bytes as f64 / self.io_bandwidth
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let cost: CostModelParams = serde_json::from_str(&fs::read_to_string(path)?)?;
        cost.validate()?;
        Ok(cost)
    }
}

/// The secondary tier: every expert of the model, immutable after load.
#[derive(Debug, Clone)]
pub struct ParameterWarehouse {
    layers: Vec<Vec<ExpertParams>>,
    expert_bytes: Vec<u64>,
}

impl ParameterWarehouse {
    pub fn from_model(model: &MoEModelSpec) -> Self {
        let layers: Vec<Vec<ExpertParams>> =
            model.layers.iter().map(|l| l.experts.clone()).collect();
        let expert_bytes = layers
            .iter()
            .map(|experts| experts.first().map_or(0, |e| e.byte_size()))
            .collect();
        ParameterWarehouse {
            layers,
            expert_bytes,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_experts(&self, layer: usize) -> usize {
        self.layers[layer].len()
    }

    pub fn expert(&self, layer: usize, index: usize) -> &ExpertParams {
        &self.layers[layer][index]
    }

    /// Bytes of one expert in `layer` (parameter count times 8).
    pub fn expert_bytes(&self, layer: usize) -> u64 {
        self.expert_bytes[layer]
    }
}

/// One committee slot of the primary tier.
#[derive(Debug, Clone)]
pub struct ResidentSlot {
    pub expert_index: usize,
    pub params: ExpertParams,
    /// Bumped on every install so readers can detect replacement.
    pub version: u64,
}

/// A staged load: a complete parameter copy waiting for commit.
#[derive(Debug, Clone)]
struct StagedLoad {
    expert_index: usize,
    params: ExpertParams,
}

/// Primary-tier slots of one layer plus its staging area.
#[derive(Debug, Clone, Default)]
pub struct LayerStore {
    pub slots: Vec<ResidentSlot>,
    staged: Vec<StagedLoad>,
}

impl LayerStore {
    pub fn resident_indices(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = self.slots.iter().map(|s| s.expert_index).collect();
        idx.sort_unstable();
        idx
    }

    pub fn bytes(&self) -> u64 {
        self.slots.iter().map(|s| s.params.byte_size()).sum()
    }
}

impl ExpertSource for LayerStore {
    fn expert(&self, index: usize) -> &ExpertParams {
        &self
            .slots
            .iter()
            .find(|s| s.expert_index == index)
            .unwrap_or_else(|| panic!("expert {index} not resident in store"))
            .params
    }
}

/// Primary tier across all layers.
#[derive(Debug, Clone)]
pub struct ResidentStore {
    pub layers: Vec<LayerStore>,
}

impl ResidentStore {
    /// Populate slots from the committee state's initial resident sets.
    pub fn cold_start(warehouse: &ParameterWarehouse, state: &CommitteeState) -> Self {
        let layers = state
            .layers
            .iter()
            .enumerate()
            .map(|(l, lc)| LayerStore {
                slots: lc
                    .resident
                    .iter()
                    .map(|&i| ResidentSlot {
                        expert_index: i,
                        params: warehouse.expert(l, i).clone(),
                        version: 0,
                    })
                    .collect(),
                staged: Vec::new(),
            })
            .collect();
        ResidentStore { layers }
    }

    pub fn layer(&self, l: usize) -> &LayerStore {
        &self.layers[l]
    }

    pub fn resident_bytes(&self) -> u64 {
        self.layers.iter().map(|l| l.bytes()).sum()
    }

    /// Place a complete parameter copy into the staging area, to be
    /// installed by the next commit.
    pub(crate) fn stage(&mut self, layer: usize, expert_index: usize, params: ExpertParams) {
        self.layers[layer].staged.push(StagedLoad {
            expert_index,
            params,
        });
    }
}

/// Amortized load schedule for one layer's pending experts.
#[derive(Debug, Clone, PartialEq)]
pub struct SwapPlan {
    /// `interval` near-equal subsets of the pending list (earlier subsets
    /// take the extra element); empty when nothing is pending.
    pub subsets: Vec<Vec<usize>>,
    /// Which subset loads next.
    pub cursor: usize,
    /// `(incoming, evicted)` pairs; evictions take the lowest-scored
    /// departing residents first.
    pub evictions: Vec<(usize, usize)>,
}

impl SwapPlan {
    pub fn empty() -> Self {
        SwapPlan {
            subsets: Vec::new(),
            cursor: 0,
            evictions: Vec::new(),
        }
    }

    pub fn is_finished(&self) -> bool {
        self.cursor >= self.subsets.len()
    }

    pub fn pending_count(&self) -> usize {
        self.subsets.iter().skip(self.cursor).map(|s| s.len()).sum()
    }
}

/// Build the amortized schedule that moves `resident` to `target`.
///
/// Both index lists must be in descending-importance order; the pending
/// list inherits `target`'s order and is split into `interval` near-equal
/// subsets. Eviction pairs the i-th pending expert with the i-th
/// lowest-scored member of `resident \ target`.
pub fn plan_swap(resident: &[usize], target: &[usize], interval: usize) -> Result<SwapPlan> {
    if resident.len() != target.len() {
        return Err(Error::ShapeMismatch {
            op: "plan_swap",
            lhs: format!("resident set of {}", resident.len()),
            rhs: format!("target set of {}", target.len()),
        });
    }
    if interval < 1 {
        return Err(Error::invalid("plan_swap: interval must be at least 1"));
    }
    let pending: Vec<usize> = target
        .iter()
        .copied()
        .filter(|i| !resident.contains(i))
        .collect();
    if pending.is_empty() {
        return Ok(SwapPlan::empty());
    }
    let mut departing: Vec<usize> = resident
        .iter()
        .copied()
        .filter(|i| !target.contains(i))
        .collect();
    departing.reverse();
    let evictions: Vec<(usize, usize)> = pending
        .iter()
        .copied()
        .zip(departing.iter().copied())
        .collect();

    let base = pending.len() / interval;
    let extra = pending.len() % interval;
    let mut subsets = Vec::with_capacity(interval);
    let mut next = 0;
    for s in 0..interval {
        let take = base + usize::from(s < extra);
        subsets.push(pending[next..next + take].to_vec());
        next += take;
    }
    Ok(SwapPlan {
        subsets,
        cursor: 0,
        evictions,
    })
}

/// What one load step did, in the units the cost model understands.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdvanceOutcome {
    pub io_bytes: u64,
    pub io_ms: f64,
    pub compute_ms: f64,
    pub stall_ms: f64,
    /// True when this step issued the plan's final subset, i.e. the next
    /// update boundary is the deadline for this transfer.
    pub reached_final_subset: bool,
}

impl AdvanceOutcome {
    pub fn idle(compute_ms: f64) -> Self {
        AdvanceOutcome {
            io_bytes: 0,
            io_ms: 0.0,
            compute_ms,
            stall_ms: 0.0,
            reached_final_subset: false,
        }
    }
}

/// Pop the plan's next subset (with a flag for the final one), advancing
/// the cursor. `None` when the plan is drained.
pub fn next_subset(plan: &mut SwapPlan) -> Option<(Vec<usize>, bool)> {
    if plan.is_finished() {
        return None;
    }
    let subset = plan.subsets[plan.cursor].clone();
    let reached_final = plan.cursor == plan.subsets.len() - 1;
    plan.cursor += 1;
    Some((subset, reached_final))
}

/// Stall charged for one layer's transfer this sample. In sync mode the
/// whole transfer stalls; in async mode only a final subset can stall, by
/// whatever part of its transfer the sample's compute failed to cover —
/// earlier subsets always finish before their own boundary arrives.
pub(crate) fn stall_rule(mode: SwapMode, io_ms: f64, compute_ms: f64, reached_final: bool) -> f64 {
    match mode {
        SwapMode::Sync => io_ms,
        SwapMode::Async => {
            if reached_final {
                (io_ms - compute_ms).max(0.0)
            } else {
                0.0
            }
        }
    }
}

/// Load the plan's cursor subset into the staging area during one sample.
///
/// Advancing a finished plan is a no-op with zero IO.
pub fn advance(
    store: &mut ResidentStore,
    layer: usize,
    warehouse: &ParameterWarehouse,
    plan: &mut SwapPlan,
    cost: &CostModelParams,
    sample_compute_ops: u64,
) -> AdvanceOutcome {
    let compute_ms = cost.compute_ms(sample_compute_ops);
    let Some((subset, reached_final_subset)) = next_subset(plan) else {
        return AdvanceOutcome::idle(compute_ms);
    };
    let io_bytes = subset.len() as u64 * warehouse.expert_bytes(layer);
    let io_ms = cost.io_ms(io_bytes);
    for index in subset {
        store.stage(layer, index, warehouse.expert(layer, index).clone());
    }
    let stall_ms = stall_rule(cost.mode, io_ms, compute_ms, reached_final_subset);
    AdvanceOutcome {
        io_bytes,
        io_ms,
        compute_ms,
        stall_ms,
        reached_final_subset,
    }
}

/// Atomically install every staged expert of `layer` into its slot.
///
/// Must be called between forwards. Each install replaces the eviction
/// target chosen by the plan, updates the committee's resident set, drops
/// the expert from the pending list and bumps the layer version once per
/// batch. Returns how many experts were installed.
pub fn commit_completed(
    store: &mut ResidentStore,
    layer: usize,
    state: &mut CommitteeState,
    plan: &SwapPlan,
) -> usize {
    let layer_store = &mut store.layers[layer];
    let committee = &mut state.layers[layer];
    let staged = std::mem::take(&mut layer_store.staged);
    let installed = staged.len();
    for load in staged {
        let evicted = plan
            .evictions
            .iter()
            .find(|&&(incoming, _)| incoming == load.expert_index)
            .map(|&(_, out)| out)
            .expect("staged expert has no eviction target");
        let slot = layer_store
            .slots
            .iter_mut()
            .find(|s| s.expert_index == evicted)
            .expect("eviction target not resident");
        slot.expert_index = load.expert_index;
        slot.params = load.params;
        slot.version += 1;

        committee.resident.retain(|&i| i != evicted);
        committee.resident.push(load.expert_index);
        committee.resident.sort_unstable();
        committee.pending.retain(|&i| i != load.expert_index);
    }
    if installed > 0 {
        committee.version += 1;
    }
    installed
}

/// Discard a superseded plan: unloaded subsets are simply never issued,
/// and anything staged but uncommitted is dropped with it.
pub fn discard_plan(store: &mut ResidentStore, layer: usize, plan: &mut SwapPlan) {
    store.layers[layer].staged.clear();
    *plan = SwapPlan::empty();
}

/// Per-sample cost measurements.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub sample_id: usize,
    pub compute_ms: f64,
    pub stall_ms: f64,
    pub io_bytes: u64,
    pub resident_bytes: u64,
}

/// Accumulated run measurements; latency per sample is
/// `base_latency + compute_ms + stall_ms`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub base_latency: f64,
    pub per_sample: Vec<SampleMetrics>,
    pub peak_resident_bytes: u64,
}

impl RunMetrics {
    pub fn new(base_latency: f64) -> Self {
        RunMetrics {
            base_latency,
            per_sample: Vec::new(),
            peak_resident_bytes: 0,
        }
    }

    pub fn record(&mut self, entry: SampleMetrics) {
        self.peak_resident_bytes = self.peak_resident_bytes.max(entry.resident_bytes);
        self.per_sample.push(entry);
    }

    pub fn latency_ms(&self, entry: &SampleMetrics) -> f64 {
        self.base_latency + entry.compute_ms + entry.stall_ms
    }

    pub fn mean_latency_ms(&self) -> f64 {
        self.mean_of(|m, e| m.latency_ms(e))
    }

    pub fn mean_compute_ms(&self) -> f64 {
        self.mean_of(|_, e| e.compute_ms)
    }

    pub fn mean_stall_ms(&self) -> f64 {
        self.mean_of(|_, e| e.stall_ms)
    }

    pub fn total_io_bytes(&self) -> u64 {
        self.per_sample.iter().map(|e| e.io_bytes).sum()
    }

    pub fn total_compute_ms(&self) -> f64 {
        self.per_sample.iter().map(|e| e.compute_ms).sum()
    }

    /// Total IO over total virtual time, bytes per virtual ms.
    pub fn mean_io_rate(&self) -> f64 {
        let total_ms: f64 = self.per_sample.iter().map(|e| self.latency_ms(e)).sum();
        if total_ms == 0.0 {
            0.0
        } else {
            self.total_io_bytes() as f64 / total_ms
        }
    }

    /// Largest per-sample IO rate, bytes per virtual ms.
    pub fn peak_io_rate(&self) -> f64 {
        self.per_sample
            .iter()
            .map(|e| {
                let ms = self.latency_ms(e);
                if ms == 0.0 {
                    0.0
                } else {
                    e.io_bytes as f64 / ms
                }
            })
            .fold(0.0, f64::max)
    }

    fn mean_of(&self, f: impl Fn(&Self, &SampleMetrics) -> f64) -> f64 {
        if self.per_sample.is_empty() {
            return 0.0;
        }
        self.per_sample.iter().map(|e| f(self, e)).sum::<f64>() / self.per_sample.len() as f64
    }

    /// CSV with header `sample_id,compute_ms,stall_ms,io_bytes,resident_bytes`.
    pub fn write_csv(&self, writer: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for entry in &self.per_sample {
            w.serialize(entry)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = fs::File::create(path)?;
        self.write_csv(file)
    }
}
