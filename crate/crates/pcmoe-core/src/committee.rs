//! The committee runtime: importance scoring, committee selection, masked
//! gating and the skip/exchange request handlers.
//!
//! A committee is the per-layer subset of experts currently resident in the
//! primary store. Requests for non-resident experts are either skipped (the
//! token passes through with the expert's gate weight) or exchanged (the
//! gate is masked so selection falls on resident experts with renormalized
//! weights). Importance is always computed from unmasked routing so that
//! non-resident experts can re-enter the committee.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::{
    accumulate_scaled, expert_forward, gate_forward, gate_logits, route_topk, ExpertParams,
    MoELayerSpec, MoEModelSpec,
};
use crate::numkit::{magnitude, softmax, top_k_indices, Vector, MASKED};

/// How a layer handles requests for non-resident experts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Skip,
    Exchange,
}

/// Runtime configuration of the committee: update interval, per-layer
/// committee sizes and per-layer request-handling strategies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PCConfig {
    pub interval: usize,
    pub num_experts: Vec<usize>,
    pub strategies: Vec<Strategy>,
}

impl PCConfig {
    /// A configuration keeping every expert resident in every layer.
    pub fn full(model: &MoEModelSpec, interval: usize, strategy: Strategy) -> Self {
        PCConfig {
            interval,
            num_experts: model.layers.iter().map(|l| l.num_experts()).collect(),
            strategies: vec![strategy; model.layers.len()],
        }
    }

    /// Uniform committee sizes from an expert ratio in (0, 1]; each layer
    /// keeps `clamp(round(ratio * n), 1, n)` experts.
    pub fn uniform_ratio(
        model: &MoEModelSpec,
        ratio: f64,
        interval: usize,
        strategy: Strategy,
    ) -> Result<Self> {
        if !(ratio > 0.0 && ratio <= 1.0) {
            return Err(Error::invalid(format!(
                "expert ratio {ratio} outside (0, 1]"
            )));
        }
        let num_experts = model
            .layers
            .iter()
            .map(|l| committee_size(ratio, l.num_experts()))
            .collect();
        Ok(PCConfig {
            interval,
            num_experts,
            strategies: vec![strategy; model.layers.len()],
        })
    }

    pub fn validate(&self, model: &MoEModelSpec) -> Result<()> {
        if self.interval < 1 {
            return Err(Error::invalid("interval must be at least 1"));
        }
        let layers = model.num_layers();
        if self.num_experts.len() != layers || self.strategies.len() != layers {
            return Err(Error::invalid(format!(
                "config lists {} sizes / {} strategies for a {layers}-layer model",
                self.num_experts.len(),
                self.strategies.len()
            )));
        }
        for (l, (&count, layer)) in self.num_experts.iter().zip(&model.layers).enumerate() {
            let n = layer.num_experts();
            if count < 1 || count > n {
                return Err(Error::OutOfRange {
                    op: "PCConfig::validate",
                    what: "num_experts",
                    value: count,
                    min: 1,
                    max: n,
                })
                .map_err(|e| Error::invalid(format!("layer {l}: {e}")));
            }
        }
        Ok(())
    }

    /// Fraction of all experts kept resident, averaged over layers.
    pub fn expert_ratio(&self, model: &MoEModelSpec) -> f64 {
        let total: usize = self.num_experts.iter().sum();
        let all: usize = model.layers.iter().map(|l| l.num_experts()).sum();
        total as f64 / all as f64
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// Committee size for a uniform ratio over `n` experts.
pub fn committee_size(ratio: f64, n: usize) -> usize {
    ((ratio * n as f64).round() as usize).clamp(1, n)
}

/// Committee bookkeeping for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCommittee {
    /// Resident expert indices, sorted ascending.
    pub resident: Vec<usize>,
    /// Experts awaiting load, in descending-importance order.
    pub pending: Vec<usize>,
    /// Bumped once per committed swap batch.
    pub version: u64,
}

/// Mutable committee state across all layers plus the sample counter that
/// drives update boundaries.
#[derive(Debug, Clone, PartialEq)]
pub struct CommitteeState {
    pub layers: Vec<LayerCommittee>,
    pub sample_counter: usize,
}

impl CommitteeState {
    /// Initial committees: the top `num_experts[l]` experts by parameter
    /// magnitude (the magnitude-keep rule as a cold start).
    pub fn cold_start(
        model: &MoEModelSpec,
        config: &PCConfig,
        magnitudes: &[Vec<f64>],
    ) -> Result<Self> {
        config.validate(model)?;
        let mut layers = Vec::with_capacity(model.num_layers());
        for (l, mags) in magnitudes.iter().enumerate() {
            let mut resident = select_committee(&Vector::new(mags.clone()), config.num_experts[l])?;
            resident.sort_unstable();
            layers.push(LayerCommittee {
                resident,
                pending: Vec::new(),
                version: 0,
            });
        }
        Ok(CommitteeState {
            layers,
            sample_counter: 0,
        })
    }
}

/// Per-layer importance summary: scores plus the unmasked token counts per
/// expert. Counts always sum to `tokens * k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceReport {
    pub scores: Vector,
    pub assigned_tokens: Vec<usize>,
}

/// Importance of every expert over a token batch:
/// `score_i = sum over tokens x routed (unmasked) to i of ||x|| * G(x)_i * ||E_i||`.
///
/// Routing here is always unmasked, so experts outside the committee keep
/// accumulating importance and can be swapped back in.
pub fn importance_report(
    layer: &MoELayerSpec,
    tokens: &[Vector],
    magnitudes: &[f64],
    k: usize,
) -> Result<ImportanceReport> {
    let n = layer.num_experts();
    if magnitudes.len() != n {
        return Err(Error::ShapeMismatch {
            op: "importance_report",
            lhs: format!("layer with {n} experts"),
            rhs: format!("{} magnitudes", magnitudes.len()),
        });
    }
    let mut scores = vec![0.0; n];
    let mut counts = vec![0usize; n];
    for x in tokens {
        let gate_out = gate_forward(&layer.gate, x)?;
        let selected = route_topk(&gate_out, k)?;
        let token_norm = magnitude(x.as_slice());
        for (i, w) in selected {
            scores[i] += token_norm * w * magnitudes[i];
            counts[i] += 1;
        }
    }
    Ok(ImportanceReport {
        scores: Vector::new(scores),
        assigned_tokens: counts,
    })
}

/// Importance scores only; see [`importance_report`].
pub fn importance_scores(
    layer: &MoELayerSpec,
    tokens: &[Vector],
    magnitudes: &[f64],
    k: usize,
) -> Result<Vector> {
    Ok(importance_report(layer, tokens, magnitudes, k)?.scores)
}

/// The `count` highest-scored experts in descending-score order, ties to
/// the lower index.
pub fn select_committee(scores: &Vector, count: usize) -> Result<Vec<usize>> {
    top_k_indices(scores, count).map_err(|_| Error::OutOfRange {
        op: "select_committee",
        what: "count",
        value: count,
        min: 1,
        max: scores.dim(),
    })
}

fn membership_mask(n: usize, resident: &[usize]) -> Vec<bool> {
    let mut mask = vec![false; n];
    for &i in resident {
        if i < n {
            mask[i] = true;
        }
    }
    mask
}

/// Mask non-resident logits to negative infinity, recompute softmax over
/// the resident logits and take the top `min(k, |resident|)` experts with
/// their renormalized weights.
pub fn masked_selection(
    gate_logits: &Vector,
    resident: &[usize],
    k: usize,
) -> Result<Vec<(usize, f64)>> {
    let n = gate_logits.dim();
    let mask = membership_mask(n, resident);
    let resident_count = mask.iter().filter(|&&m| m).count();
    let mut masked = gate_logits.clone();
    for i in 0..n {
        if !mask[i] {
            masked[i] = MASKED;
        }
    }
    let probs = softmax(&masked)?;
    // Rank resident experts only, so a zero-probability resident expert can
    // never lose a tie against a masked one.
    let mut order: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
    order.sort_by(|&a, &b| match probs[b].partial_cmp(&probs[a]) {
        Some(std::cmp::Ordering::Equal) | None => a.cmp(&b),
        Some(ord) => ord,
    });
    order.truncate(k.min(resident_count));
    Ok(order.into_iter().map(|i| (i, probs[i])).collect())
}

/// Source of expert parameters for a forward pass. The model spec serves
/// its own experts; the swap engine's resident store serves committee
/// copies.
pub trait ExpertSource {
    fn expert(&self, index: usize) -> &ExpertParams;
}

impl ExpertSource for MoELayerSpec {
    fn expert(&self, index: usize) -> &ExpertParams {
        &self.experts[index]
    }
}

/// Execution counts of one committee-managed layer forward, used by the
/// cost model.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ForwardStats {
    /// Expert evaluations actually performed.
    pub executed_experts: u64,
    /// Weighted identity pass-throughs (skip strategy only).
    pub passthroughs: u64,
}

pub(crate) fn skip_forward<S: ExpertSource + ?Sized>(
    layer: &MoELayerSpec,
    source: &S,
    tokens: &[Vector],
    resident: &[usize],
    k: usize,
) -> Result<(Vec<Vector>, ForwardStats)> {
    let mask = membership_mask(layer.num_experts(), resident);
    let mut outputs = Vec::with_capacity(tokens.len());
    let mut stats = ForwardStats::default();
    for x in tokens {
        let gate_out = gate_forward(&layer.gate, x)?;
        let selected = route_topk(&gate_out, k)?;
        let mut y = Vector::zeros(x.dim());
        for (i, w) in selected {
            if mask[i] {
                let e_out = expert_forward(source.expert(i), x)?;
                accumulate_scaled(&mut y, w, &e_out);
                stats.executed_experts += 1;
            } else {
                accumulate_scaled(&mut y, w, x);
                stats.passthroughs += 1;
            }
        }
        outputs.push(y);
    }
    Ok((outputs, stats))
}

/// Skip handler: selection is unmasked; selected resident experts run
/// normally, selected non-resident experts contribute a weighted identity
/// pass-through of their input.
pub fn handle_skip_with<S: ExpertSource + ?Sized>(
    layer: &MoELayerSpec,
    source: &S,
    tokens: &[Vector],
    resident: &[usize],
    k: usize,
) -> Result<Vec<Vector>> {
    Ok(skip_forward(layer, source, tokens, resident, k)?.0)
}

/// Skip handler over the layer's own experts.
pub fn handle_skip(
    layer: &MoELayerSpec,
    tokens: &[Vector],
    resident: &[usize],
    k: usize,
) -> Result<Vec<Vector>> {
    handle_skip_with(layer, layer, tokens, resident, k)
}

pub(crate) fn exchange_forward<S: ExpertSource + ?Sized>(
    layer: &MoELayerSpec,
    source: &S,
    tokens: &[Vector],
    resident: &[usize],
    k: usize,
) -> Result<(Vec<Vector>, ForwardStats)> {
    let mut outputs = Vec::with_capacity(tokens.len());
    let mut stats = ForwardStats::default();
    for x in tokens {
        let logits = gate_logits(&layer.gate, x)?;
        let selected = masked_selection(&logits, resident, k)?;
        let mut y = Vector::zeros(x.dim());
        for (i, w) in selected {
            let e_out = expert_forward(source.expert(i), x)?;
            accumulate_scaled(&mut y, w, &e_out);
            stats.executed_experts += 1;
        }
        outputs.push(y);
    }
    Ok((outputs, stats))
}

/// Exchange handler: non-resident experts are masked out of the gate, so
/// every request lands on a resident expert with renormalized weight.
pub fn handle_exchange_with<S: ExpertSource + ?Sized>(
    layer: &MoELayerSpec,
    source: &S,
    tokens: &[Vector],
    resident: &[usize],
    k: usize,
) -> Result<Vec<Vector>> {
    Ok(exchange_forward(layer, source, tokens, resident, k)?.0)
}

/// Exchange handler over the layer's own experts.
pub fn handle_exchange(
    layer: &MoELayerSpec,
    tokens: &[Vector],
    resident: &[usize],
    k: usize,
) -> Result<Vec<Vector>> {
    handle_exchange_with(layer, layer, tokens, resident, k)
}

/// Everything a committee update decided at a boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct CommitteeUpdate {
    /// Importance of every expert at the boundary.
    pub scores: Vector,
    /// The newly selected committee, descending-importance order.
    pub selected: Vec<usize>,
    /// `selected` minus the current residents, descending-importance order.
    pub pending: Vec<usize>,
}

/// Result of one committee-managed layer forward.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerForwardOutcome {
    pub outputs: Vec<Vector>,
    pub stats: ForwardStats,
    pub update: Option<CommitteeUpdate>,
}

/// One committee-managed layer forward.
///
/// Outputs are always computed with the *current* resident set. When the
/// sample counter sits on an update boundary (`sample_counter % interval ==
/// 0`), importance is recomputed, a new committee is selected and the
/// layer's pending list is replaced (staling any earlier one). Resident
/// sets are mutated only by the swap engine's commit, never here.
pub fn layer_forward_pc_with<S: ExpertSource + ?Sized>(
    layer: &MoELayerSpec,
    source: &S,
    tokens: &[Vector],
    state: &mut CommitteeState,
    layer_idx: usize,
    config: &PCConfig,
    magnitudes: &[f64],
) -> Result<LayerForwardOutcome> {
    let resident = state.layers[layer_idx].resident.clone();
    let (outputs, stats) = match config.strategies[layer_idx] {
        Strategy::Skip => skip_forward(layer, source, tokens, &resident, layer.k)?,
        Strategy::Exchange => exchange_forward(layer, source, tokens, &resident, layer.k)?,
    };
    let update = if state.sample_counter.is_multiple_of(config.interval) {
        let scores = importance_scores(layer, tokens, magnitudes, layer.k)?;
        let selected = select_committee(&scores, config.num_experts[layer_idx])?;
        let pending: Vec<usize> = selected
            .iter()
            .copied()
            .filter(|i| !resident.contains(i))
            .collect();
        state.layers[layer_idx].pending = pending.clone();
        Some(CommitteeUpdate {
            scores,
            selected,
            pending,
        })
    } else {
        None
    };
    Ok(LayerForwardOutcome {
        outputs,
        stats,
        update,
    })
}

/// Committee layer forward over the layer's own experts, returning the
/// swap request (the pending list) when an update boundary was hit.
pub fn layer_forward_pc(
    layer: &MoELayerSpec,
    tokens: &[Vector],
    state: &mut CommitteeState,
    layer_idx: usize,
    config: &PCConfig,
    magnitudes: &[f64],
) -> Result<(Vec<Vector>, Option<Vec<usize>>)> {
    let outcome =
        layer_forward_pc_with(layer, layer, tokens, state, layer_idx, config, magnitudes)?;
    Ok((outcome.outputs, outcome.update.map(|u| u.pending)))
}
