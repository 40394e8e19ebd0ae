//! Synthetic models and traces with controllable temporal locality.
//!
//! Models are generated with cluster-aligned gates: each expert owns a unit
//! direction, and cluster `c`'s center points at the directions of a
//! designated expert subset, so tokens near the center route there. Traces
//! walk through clusters (sequentially, at a speedup, or shuffled),
//! producing the activation locality the committee runtime exploits.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::{
    gate_forward, model_forward_reference, route_topk, ExpertParams, GateParams, MoELayerSpec,
    MoEModelSpec, Sample,
};
use crate::numkit::{magnitude, top_k_indices, Matrix, Vector};

/// Norm of generated cluster centers (and roughly of tokens).
const TOKEN_SCALE: f64 = 3.0;
/// Gate rows are unit directions scaled by this factor; larger values make
/// routing more decisive.
const GATE_SHARPNESS: f64 = 4.0;

/// Sample ordering of a trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Order {
    /// Clusters advance every `drift_period` samples.
    Sequential,
    /// Clusters advance `factor` times faster.
    Speedup(f64),
    /// The sequential trace, globally permuted.
    Shuffled,
}

impl FromStr for Order {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sequential" => Ok(Order::Sequential),
            "shuffled" => Ok(Order::Shuffled),
            other => match other.strip_prefix("speedup:") {
                Some(f) => {
                    let factor: f64 = f
                        .parse()
                        .map_err(|_| Error::invalid(format!("bad speedup factor '{f}'")))?;
                    Ok(Order::Speedup(factor))
                }
                None => Err(Error::invalid(format!(
                    "order '{other}' is not sequential, speedup:<f> or shuffled"
                ))),
            },
        }
    }
}

/// Generation recipe for a trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSpec {
    pub num_samples: usize,
    pub tokens_per_sample: usize,
    pub num_clusters: usize,
    /// Samples per cluster regime.
    pub drift_period: usize,
    pub noise_sigma: f64,
    pub order: Order,
    pub seed: u64,
}

impl TraceSpec {
    pub fn validate(&self) -> Result<()> {
        if self.drift_period < 1 {
            return Err(Error::invalid("drift_period must be at least 1"));
        }
        if self.num_samples < 1 || self.tokens_per_sample < 1 || self.num_clusters < 1 {
            return Err(Error::invalid(
                "num_samples, tokens_per_sample and num_clusters must be positive",
            ));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::invalid("noise_sigma must be non-negative"));
        }
        if let Order::Speedup(f) = self.order {
            if f < 1.0 {
                return Err(Error::invalid("speedup factor must be at least 1"));
            }
        }
        Ok(())
    }
}

/// An ordered sample stream; labels are present iff the trace was
/// generated against a model (self-labeled by the reference forward).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub spec: TraceSpec,
    pub samples: Vec<Sample>,
}

impl Trace {
    pub fn is_labeled(&self) -> bool {
        self.samples.iter().all(|s| s.label.is_some())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let trace: Trace = serde_json::from_str(&fs::read_to_string(path)?)?;
        if trace.samples.is_empty() {
            return Err(Error::invalid("trace has no samples"));
        }
        Ok(trace)
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Draw `n` unit directions; the first `min(n, d)` are orthonormalized so
/// distinct experts own clearly separated routing regions.
fn unit_directions(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(n);
    for i in 0..n {
        let mut v = normal_vec(rng, d);
        if i < d {
            for prev in &dirs[..i.min(dirs.len())] {
                let dot: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
                for (vj, pj) in v.iter_mut().zip(prev) {
                    *vj -= dot * pj;
                }
            }
        }
        let norm = magnitude(&v);
        if norm < 1e-9 {
            // Degenerate draw; fall back to a basis vector.
            v = vec![0.0; d];
            v[i % d] = 1.0;
        } else {
            for vj in &mut v {
                *vj /= norm;
            }
        }
        dirs.push(v);
    }
    dirs
}

fn scaled_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::new(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
            .collect(),
    )
    .expect("length is rows*cols by construction")
}

/// Generate a synthetic model whose layer gates point at per-expert unit
/// directions, deterministic under `seed`.
pub fn gen_model(
    d: usize,
    h: usize,
    layers: usize,
    n: usize,
    k: usize,
    num_classes: usize,
    seed: u64,
) -> Result<MoEModelSpec> {
    if n < k || k < 1 {
        return Err(Error::invalid(format!(
            "need n >= k >= 1, got n={n}, k={k}"
        )));
    }
    if d == 0 || h == 0 || layers == 0 || num_classes == 0 {
        return Err(Error::invalid(
            "d, h, layers and num_classes must be positive",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w1_scale = 1.0 / (d as f64).sqrt();
    let w2_scale = 1.0 / (h as f64).sqrt();

    let mut layer_specs = Vec::with_capacity(layers);
    for _ in 0..layers {
        let dirs = unit_directions(&mut rng, n, d);
        let gate_rows: Vec<Vec<f64>> = dirs
            .iter()
            .map(|u| u.iter().map(|x| GATE_SHARPNESS * x).collect())
            .collect();
        let experts = (0..n)
            .map(|_| {
                ExpertParams::new(
                    scaled_matrix(&mut rng, h, d, w1_scale),
                    Vector::zeros(h),
                    scaled_matrix(&mut rng, d, h, w2_scale),
                    Vector::zeros(d),
                )
            })
            .collect();
        layer_specs.push(MoELayerSpec {
            k,
            gate: GateParams {
                wg: Matrix::from_rows(&gate_rows)?,
            },
            experts,
        });
    }

    let model = MoEModelSpec {
        model_id: format!("gen-d{d}-h{h}-l{layers}-n{n}-k{k}-c{num_classes}-s{seed}"),
        seed,
        d,
        h,
        num_classes,
        layers: layer_specs,
        head: scaled_matrix(&mut rng, num_classes, d, w1_scale),
    };
    model.validate()?;
    Ok(model)
}

/// The expert subset cluster `c` is aimed at (derived from the first
/// layer's routing geometry).
pub fn cluster_experts(model: &MoEModelSpec, cluster: usize) -> Vec<usize> {
    let layer = &model.layers[0];
    let n = layer.num_experts();
    (0..layer.k).map(|j| (cluster * layer.k + j) % n).collect()
}

/// Center direction of cluster `c`: the normalized mean of its experts'
/// gate directions, scaled to token magnitude.
pub fn cluster_center(model: &MoEModelSpec, cluster: usize) -> Vector {
    let layer = &model.layers[0];
    let wg = &layer.gate.wg;
    let d = wg.cols();
    let mut acc = vec![0.0; d];
    for i in cluster_experts(model, cluster) {
        let row = wg.row(i);
        let norm = magnitude(row);
        for (a, r) in acc.iter_mut().zip(row) {
            *a += r / norm;
        }
    }
    let norm = magnitude(&acc);
    if norm > 1e-12 {
        for a in &mut acc {
            *a *= TOKEN_SCALE / norm;
        }
    }
    Vector::new(acc)
}

fn cluster_at(spec: &TraceSpec, sample_idx: usize) -> usize {
    let factor = match spec.order {
        Order::Speedup(f) => f,
        _ => 1.0,
    };
    let step = (sample_idx as f64 * factor / spec.drift_period as f64).floor() as usize;
    step % spec.num_clusters
}

/// Generate a trace per the spec, deterministic under its seed. With a
/// model, cluster centers come from the model's routing geometry and every
/// sample is labeled with the reference argmax class; without one, centers
/// are seeded random directions and labels are absent.
pub fn gen_trace(spec: &TraceSpec, model: Option<&MoEModelSpec>) -> Result<Trace> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let dim = match model {
        Some(m) => m.d,
        // Without a model there is no intrinsic dimensionality; use a small
        // fixed width.
        None => 8,
    };
    let centers: Vec<Vector> = match model {
        Some(m) => (0..spec.num_clusters)
            .map(|c| cluster_center(m, c))
            .collect(),
        None => (0..spec.num_clusters)
            .map(|_| {
                let mut v = normal_vec(&mut rng, dim);
                let norm = magnitude(&v).max(1e-12);
                for x in &mut v {
                    *x *= TOKEN_SCALE / norm;
                }
                Vector::new(v)
            })
            .collect(),
    };

    let mut samples = Vec::with_capacity(spec.num_samples);
    for s in 0..spec.num_samples {
        let center = &centers[cluster_at(spec, s)];
        let tokens: Vec<Vector> = (0..spec.tokens_per_sample)
            .map(|_| {
                Vector::new(
                    center
                        .iter()
                        .map(|&c| c + spec.noise_sigma * rng.sample::<f64, _>(StandardNormal))
                        .collect(),
                )
            })
            .collect();
        samples.push(Sample {
            tokens,
            label: None,
        });
    }

    if matches!(spec.order, Order::Shuffled) {
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5348_5546);
        samples.shuffle(&mut shuffle_rng);
    }

    if let Some(m) = model {
        for sample in &mut samples {
            let (logits, _) = model_forward_reference(m, sample)?;
            sample.label = logits.argmax();
        }
    }

    Ok(Trace {
        spec: spec.clone(),
        samples,
    })
}

/// Per-layer activated expert sets (union over tokens of each token's
/// unmasked top-`k`), while tokens propagate through the reference path.
pub fn activated_sets(
    model: &MoEModelSpec,
    sample: &Sample,
    k: usize,
) -> Result<Vec<BTreeSet<usize>>> {
    let mut tokens = sample.tokens.clone();
    let mut sets = Vec::with_capacity(model.layers.len());
    for layer in &model.layers {
        let mut active = BTreeSet::new();
        let mut next = Vec::with_capacity(tokens.len());
        for x in &tokens {
            let gate_out = gate_forward(&layer.gate, x)?;
            for i in top_k_indices(&gate_out, k.min(layer.num_experts()))? {
                active.insert(i);
            }
            // Propagate through the reference mixture with the layer's own k.
            let selected = route_topk(&gate_out, layer.k)?;
            let mut y = Vector::zeros(x.dim());
            for (i, w) in selected {
                let e_out = crate::moe::expert_forward(&layer.experts[i], x)?;
                crate::moe::accumulate_scaled(&mut y, w, &e_out);
            }
            next.push(y);
        }
        sets.push(active);
        tokens = next;
    }
    Ok(sets)
}

fn jaccard(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.union(b).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Mean over consecutive sample pairs of the per-layer Jaccard similarity
/// between activated expert sets, averaged over layers. 1.0 means the same
/// experts fire throughout; 0.0 means consecutive samples share none.
pub fn locality_index(trace: &Trace, model: &MoEModelSpec, k: usize) -> Result<f64> {
    if trace.samples.len() < 2 {
        return Err(Error::invalid("locality_index needs at least 2 samples"));
    }
    let sets: Vec<Vec<BTreeSet<usize>>> = trace
        .samples
        .iter()
        .map(|s| activated_sets(model, s, k))
        .collect::<Result<_>>()?;
    let layers = model.num_layers();
    let mut total = 0.0;
    for pair in sets.windows(2) {
        let layer_sum: f64 = pair[0]
            .iter()
            .zip(&pair[1])
            .map(|(a, b)| jaccard(a, b))
            .sum();
        total += layer_sum / layers as f64;
    }
    Ok(total / (sets.len() - 1) as f64)
}
