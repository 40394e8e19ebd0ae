//! Toy gated expert-bank model and the full-expert reference forward pass.
//!
//! The reference path evaluates every selected expert with its true
//! parameters and serves as the correctness oracle for the committee
//! runtime. Experts are two-layer relu MLPs; the gate is a bias-free linear
//! map followed by softmax; the classifier head runs on mean-pooled tokens.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{magnitude, matvec, softmax, top_k_indices, Matrix, Vector};

/// Parameters of one expert: `w2 * relu(w1 * x + b1) + b2`.
///
/// `cached_magnitude` is the Euclidean norm of all parameters flattened in
/// `w1, b1, w2, b2` order; it is recomputed when a model file is read, so a
/// mismatch can only mean in-memory corruption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "ExpertParamsFile", into = "ExpertParamsFile")]
pub struct ExpertParams {
    pub w1: Matrix,
    pub b1: Vector,
    pub w2: Matrix,
    pub b2: Vector,
    pub cached_magnitude: f64,
}

#[derive(Serialize, Deserialize)]
struct ExpertParamsFile {
    w1: Matrix,
    b1: Vector,
    w2: Matrix,
    b2: Vector,
}

impl From<ExpertParamsFile> for ExpertParams {
    fn from(f: ExpertParamsFile) -> Self {
        ExpertParams::new(f.w1, f.b1, f.w2, f.b2)
    }
}

impl From<ExpertParams> for ExpertParamsFile {
    fn from(e: ExpertParams) -> Self {
        ExpertParamsFile {
            w1: e.w1,
            b1: e.b1,
            w2: e.w2,
            b2: e.b2,
        }
    }
}

impl ExpertParams {
    pub fn new(w1: Matrix, b1: Vector, w2: Matrix, b2: Vector) -> Self {
        let mut e = ExpertParams {
            w1,
            b1,
            w2,
            b2,
            cached_magnitude: 0.0,
        };
        e.cached_magnitude = magnitude(&e.flatten());
        e
    }

    /// All parameters flattened in `w1, b1, w2, b2` order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        out.extend_from_slice(self.w1.as_slice());
        out.extend_from_slice(self.b1.as_slice());
        out.extend_from_slice(self.w2.as_slice());
        out.extend_from_slice(self.b2.as_slice());
        out
    }

    pub fn param_count(&self) -> usize {
        self.w1.as_slice().len() + self.b1.dim() + self.w2.as_slice().len() + self.b2.dim()
    }

    /// Size in bytes when stored as packed 64-bit floats.
    pub fn byte_size(&self) -> u64 {
        (self.param_count() * 8) as u64
    }
}

/// Bias-free gating network; row `i` scores expert `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateParams {
    pub wg: Matrix,
}

/// One gated expert bank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoELayerSpec {
    pub k: usize,
    pub gate: GateParams,
    pub experts: Vec<ExpertParams>,
}

impl MoELayerSpec {
    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }
}

/// A stack of gated expert banks with a linear classifier head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoEModelSpec {
    pub model_id: String,
    pub seed: u64,
    pub d: usize,
    pub h: usize,
    pub num_classes: usize,
    pub layers: Vec<MoELayerSpec>,
    pub head: Matrix,
}

/// One input: a sequence of `d`-dimensional tokens, optionally labeled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub tokens: Vec<Vector>,
    pub label: Option<usize>,
}

/// Per-layer, per-token top-k routing decisions of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingRecord {
    /// `layers[l][t]` lists the (expert index, gate weight) pairs selected
    /// for token `t` at layer `l`, in descending-weight order.
    pub layers: Vec<Vec<Vec<(usize, f64)>>>,
}

impl MoEModelSpec {
    /// Structural validation of dimensions, ranges and finiteness.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::invalid("model must have at least one layer"));
        }
        if self.d == 0 || self.h == 0 || self.num_classes == 0 {
            return Err(Error::invalid("d, h and num_classes must be positive"));
        }
        if self.head.rows() != self.num_classes || self.head.cols() != self.d {
            return Err(Error::invalid(format!(
                "head is {}x{}, expected {}x{}",
                self.head.rows(),
                self.head.cols(),
                self.num_classes,
                self.d
            )));
        }
        if !self.head.is_finite() {
            return Err(Error::invalid("head has non-finite entries"));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            let n = layer.num_experts();
            if n == 0 {
                return Err(Error::invalid(format!("layer {l} has no experts")));
            }
            if layer.k < 1 || layer.k > n {
                return Err(Error::invalid(format!(
                    "layer {l}: k = {} outside [1, {n}]",
                    layer.k
                )));
            }
            let wg = &layer.gate.wg;
            if wg.rows() != n || wg.cols() != self.d || !wg.is_finite() {
                return Err(Error::invalid(format!(
                    "layer {l}: gate is {}x{}, expected {}x{}",
                    wg.rows(),
                    wg.cols(),
                    n,
                    self.d
                )));
            }
            for (i, e) in layer.experts.iter().enumerate() {
                let shape_ok = e.w1.rows() == self.h
                    && e.w1.cols() == self.d
                    && e.b1.dim() == self.h
                    && e.w2.rows() == self.d
                    && e.w2.cols() == self.h
                    && e.b2.dim() == self.d;
                if !shape_ok {
                    return Err(Error::invalid(format!(
                        "layer {l} expert {i}: shapes inconsistent with d={}, h={}",
                        self.d, self.h
                    )));
                }
                if !e.flatten().iter().all(|x| x.is_finite()) {
                    return Err(Error::invalid(format!(
                        "layer {l} expert {i}: non-finite parameter"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json_string()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&fs::read_to_string(path)?)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let model: MoEModelSpec = serde_json::from_str(text)?;
        model.validate()?;
        Ok(model)
    }
}

fn relu_in_place(v: &mut Vector) {
    for x in v.as_mut_slice() {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

/// Evaluate one expert: `w2 * relu(w1 * x + b1) + b2`.
pub fn expert_forward(e: &ExpertParams, x: &Vector) -> Result<Vector> {
    let mut hidden = matvec(&e.w1, x)?;
    for (hv, bv) in hidden.as_mut_slice().iter_mut().zip(e.b1.iter()) {
        *hv += bv;
    }
    relu_in_place(&mut hidden);
    let mut out = matvec(&e.w2, &hidden)?;
    for (ov, bv) in out.as_mut_slice().iter_mut().zip(e.b2.iter()) {
        *ov += bv;
    }
    Ok(out)
}

/// Gate logits for a token: `wg * x` (no bias).
pub fn gate_logits(g: &GateParams, x: &Vector) -> Result<Vector> {
    matvec(&g.wg, x)
}

/// Softmax gate output over all experts.
pub fn gate_forward(g: &GateParams, x: &Vector) -> Result<Vector> {
    softmax(&gate_logits(g, x)?)
}

/// The top-k (expert index, gate weight) pairs in descending-weight order.
/// Weights are the unmodified softmax values; nothing is renormalized.
pub fn route_topk(gate_out: &Vector, k: usize) -> Result<Vec<(usize, f64)>> {
    let idx = top_k_indices(gate_out, k)?;
    Ok(idx.into_iter().map(|i| (i, gate_out[i])).collect())
}

/// Accumulate `weight * expert_out` into `acc`.
pub(crate) fn accumulate_scaled(acc: &mut Vector, weight: f64, v: &Vector) {
    for (a, b) in acc.as_mut_slice().iter_mut().zip(v.iter()) {
        *a += weight * b;
    }
}

/// Full-expert forward of one layer: per token,
/// `y = sum over top-k selected experts of G(x)_i * E_i(x)`.
pub fn layer_forward_reference(layer: &MoELayerSpec, tokens: &[Vector]) -> Result<Vec<Vector>> {
    let mut outputs = Vec::with_capacity(tokens.len());
    for x in tokens {
        let gate_out = gate_forward(&layer.gate, x)?;
        let selected = route_topk(&gate_out, layer.k)?;
        let mut y = Vector::zeros(x.dim());
        for (i, w) in selected {
            let e_out = expert_forward(&layer.experts[i], x)?;
            accumulate_scaled(&mut y, w, &e_out);
        }
        outputs.push(y);
    }
    Ok(outputs)
}

/// Mean over a non-empty token list.
pub(crate) fn mean_pool(tokens: &[Vector]) -> Result<Vector> {
    let first = tokens
        .first()
        .ok_or_else(|| Error::invalid("sample has no tokens"))?;
    let mut acc = Vector::zeros(first.dim());
    for t in tokens {
        accumulate_scaled(&mut acc, 1.0, t);
    }
    let inv = 1.0 / tokens.len() as f64;
    for a in acc.as_mut_slice() {
        *a *= inv;
    }
    Ok(acc)
}

/// Reference forward of the whole model. Tokens pass through the layers
/// sequentially; logits are the head applied to the mean-pooled final
/// tokens. Also returns the per-layer, per-token routing decisions.
pub fn model_forward_reference(
    model: &MoEModelSpec,
    sample: &Sample,
) -> Result<(Vector, RoutingRecord)> {
    let mut tokens = sample.tokens.clone();
    let mut record = RoutingRecord {
        layers: Vec::with_capacity(model.layers.len()),
    };
    for layer in &model.layers {
        let mut layer_routing = Vec::with_capacity(tokens.len());
        let mut next = Vec::with_capacity(tokens.len());
        for x in &tokens {
            let gate_out = gate_forward(&layer.gate, x)?;
            let selected = route_topk(&gate_out, layer.k)?;
            let mut y = Vector::zeros(x.dim());
            for &(i, w) in &selected {
                let e_out = expert_forward(&layer.experts[i], x)?;
                accumulate_scaled(&mut y, w, &e_out);
            }
            layer_routing.push(selected);
            next.push(y);
        }
        record.layers.push(layer_routing);
        tokens = next;
    }
    let pooled = mean_pool(&tokens)?;
    let logits = matvec(&model.head, &pooled)?;
    Ok((logits, record))
}

/// Cached `||E_i||` per layer, revalidated against a recomputation. A
/// deviation beyond 1e-9 means the in-memory model is corrupt.
pub fn expert_magnitudes(model: &MoEModelSpec) -> Result<Vec<Vec<f64>>> {
    let mut per_layer = Vec::with_capacity(model.layers.len());
    for (l, layer) in model.layers.iter().enumerate() {
        let mut mags = Vec::with_capacity(layer.experts.len());
        for (i, e) in layer.experts.iter().enumerate() {
            let recomputed = magnitude(&e.flatten());
            if (recomputed - e.cached_magnitude).abs() > 1e-9 {
                return Err(Error::MagnitudeCacheMismatch {
                    layer: l,
                    expert: i,
                    cached: e.cached_magnitude,
                    recomputed,
                });
            }
            mags.push(e.cached_magnitude);
        }
        per_layer.push(mags);
    }
    Ok(per_layer)
}
