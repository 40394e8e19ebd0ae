//! Offline committee planner: profiling replay over candidate
//! configurations, least-squares performance models, and the constrained
//! genetic search over committee configurations.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::committee::{PCConfig, Strategy};
use crate::error::{Error, Result};
use crate::moe::MoEModelSpec;
use crate::numkit::Vector;
use crate::serve::{reference_logits, serve_trace_with_reference, ServePolicy};
use crate::swap::CostModelParams;
use crate::workload::Trace;

/// Interval values the planner searches over.
pub const DEFAULT_INTERVALS: [usize; 6] = [1, 2, 4, 8, 16, 32];

/// Resource budgets a plan must respect.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Constraints {
    #[serde(rename = "limit_memory_bytes")]
    pub limit_memory: f64,
    #[serde(rename = "limit_latency_ms")]
    pub limit_latency: f64,
}

impl Constraints {
    pub fn validate(&self) -> Result<()> {
        if self.limit_memory <= 0.0 || self.limit_latency <= 0.0 {
            return Err(Error::invalid("constraints must be positive"));
        }
        Ok(())
    }

    /// Shrink both budgets by a safety margin in `[0, 1)`.
    pub fn with_margin(&self, margin: f64) -> Result<Constraints> {
        if !(0.0..1.0).contains(&margin) {
            return Err(Error::invalid(format!("margin {margin} outside [0, 1)")));
        }
        Ok(Constraints {
            limit_memory: self.limit_memory * (1.0 - margin),
            limit_latency: self.limit_latency * (1.0 - margin),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let c: Constraints = serde_json::from_str(&fs::read_to_string(path)?)?;
        c.validate()?;
        Ok(c)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Metrics of one full trace replay under one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRecord {
    pub config: PCConfig,
    pub accuracy: f64,
    pub peak_memory: u64,
    pub mean_latency: f64,
}

pub fn save_records(records: &[ProfileRecord], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, serde_json::to_string(records)?)?;
    Ok(())
}

pub fn load_records(path: impl AsRef<Path>) -> Result<Vec<ProfileRecord>> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// What the profiling step writes to disk: the search shape plus one
/// record per profiled configuration. Carrying the shape lets the plan
/// step run from this file alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileDocument {
    pub shape: ModelShape,
    pub records: Vec<ProfileRecord>,
}

impl ProfileDocument {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// Search domain: per-layer expert counts and the interval grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelShape {
    pub experts_per_layer: Vec<usize>,
    pub intervals: Vec<usize>,
}

impl ModelShape {
    pub fn of(model: &MoEModelSpec) -> Self {
        ModelShape {
            experts_per_layer: model.layers.iter().map(|l| l.num_experts()).collect(),
            intervals: DEFAULT_INTERVALS.to_vec(),
        }
    }

    pub fn with_intervals(mut self, intervals: Vec<usize>) -> Self {
        self.intervals = intervals;
        self
    }

    pub fn num_layers(&self) -> usize {
        self.experts_per_layer.len()
    }
}

/// Feature map of a configuration:
/// `[1] ++ num_experts ++ exchange indicators ++ [1/interval]`,
/// so `feature_dim = 2L + 2`.
pub fn featurize(config: &PCConfig) -> Vector {
    let layers = config.num_experts.len();
    let mut f = Vec::with_capacity(2 * layers + 2);
    f.push(1.0);
    f.extend(config.num_experts.iter().map(|&c| c as f64));
    f.extend(
        config
            .strategies
            .iter()
            .map(|s| if *s == Strategy::Exchange { 1.0 } else { 0.0 }),
    );
    f.push(1.0 / config.interval as f64);
    Vector::new(f)
}

/// Three affine maps over the config feature space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerfModel {
    pub feature_dim: usize,
    pub accuracy: Vec<f64>,
    pub memory: Vec<f64>,
    pub latency: Vec<f64>,
}

/// Predicted (accuracy, memory, latency) for a configuration.
pub fn predict_metrics(pm: &PerfModel, config: &PCConfig) -> (f64, f64, f64) {
    let f = featurize(config);
    let dot = |w: &[f64]| w.iter().zip(f.iter()).map(|(a, b)| a * b).sum::<f64>();
    (dot(&pm.accuracy), dot(&pm.memory), dot(&pm.latency))
}

// ---------------------------------------------------------------------------
// Profiling
// ---------------------------------------------------------------------------

/// Profiling data rule: take the first 10% of the trace and tile it
/// (concatenating end to start) until it covers at least
/// `max_interval * 20` samples.
pub fn build_profiling_trace(trace: &Trace, max_interval: usize) -> Result<Trace> {
    if trace.samples.is_empty() {
        return Err(Error::invalid("trace has no samples"));
    }
    let prefix_len = trace.samples.len().div_ceil(10);
    let prefix = &trace.samples[..prefix_len];
    let target = max_interval.max(1) * 20;
    let mut samples = Vec::with_capacity(target + prefix_len);
    while samples.len() < target {
        samples.extend_from_slice(prefix);
    }
    let mut spec = trace.spec.clone();
    spec.num_samples = samples.len();
    Ok(Trace { spec, samples })
}

/// Draw `count` configurations uniformly over the bounded search space.
pub fn random_configs(shape: &ModelShape, count: usize, seed: u64) -> Vec<PCConfig> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| random_config(shape, &mut rng)).collect()
}

fn random_config(shape: &ModelShape, rng: &mut ChaCha8Rng) -> PCConfig {
    let interval = shape.intervals[rng.random_range(0..shape.intervals.len())];
    let num_experts = shape
        .experts_per_layer
        .iter()
        .map(|&n| rng.random_range(1..=n))
        .collect();
    let strategies = shape
        .experts_per_layer
        .iter()
        .map(|_| {
            if rng.random_bool(0.5) {
                Strategy::Exchange
            } else {
                Strategy::Skip
            }
        })
        .collect();
    PCConfig {
        interval,
        num_experts,
        strategies,
    }
}

/// Replay the trace once per configuration, collecting task accuracy, peak
/// resident bytes and mean latency. Configs are evaluated in parallel;
/// each replay owns its own state.
pub fn run_profile(
    model: &MoEModelSpec,
    trace: &Trace,
    configs: &[PCConfig],
    cost: &CostModelParams,
) -> Result<Vec<ProfileRecord>> {
    if trace.samples.is_empty() {
        return Err(Error::invalid("trace has no samples"));
    }
    let reference = reference_logits(model, trace)?;
    configs
        .par_iter()
        .map(|config| {
            let outcome = serve_trace_with_reference(
                model,
                trace,
                &ServePolicy::Pc(config.clone()),
                cost,
                Some(&reference),
            )?;
            Ok(ProfileRecord {
                config: config.clone(),
                accuracy: outcome.report.accuracy,
                peak_memory: outcome.report.peak_resident_bytes,
                mean_latency: outcome.report.mean_latency_ms,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Least-squares fit
// ---------------------------------------------------------------------------

/// Solve `a * x = b` by Gaussian elimination with partial pivoting;
/// `None` when the system is singular.
#[allow(clippy::needless_range_loop)]
fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot_row =
            (col..n).max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())?;
        if a[pivot_row][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, pivot_row);
        b.swap(col, pivot_row);
        for row in col + 1..n {
            let factor = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= factor * a[col][k];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for col in (0..n).rev() {
        let mut acc = b[col];
        for k in col + 1..n {
            acc -= a[col][k] * x[k];
        }
        x[col] = acc / a[col][col];
    }
    Some(x)
}

fn ols_fit(features: &[Vector], targets: &[f64]) -> Vec<f64> {
    let dim = features[0].dim();
    let mut xtx = vec![vec![0.0; dim]; dim];
    let mut xty = vec![0.0; dim];
    for (f, &y) in features.iter().zip(targets) {
        for i in 0..dim {
            xty[i] += f[i] * y;
            for j in 0..dim {
                xtx[i][j] += f[i] * f[j];
            }
        }
    }
    if let Some(w) = solve_dense(xtx.clone(), xty.clone()) {
        return w;
    }
    // Singular normal system: ridge fallback keeps the fit defined.
    log::warn!("normal system singular; falling back to ridge with penalty 1e-8");
    for (i, row) in xtx.iter_mut().enumerate() {
        row[i] += 1e-8;
    }
    solve_dense(xtx, xty).expect("ridge-regularized system is positive definite")
}

/// Ordinary least squares per metric over the profile records. Needs at
/// least two records; a singular normal system falls back to ridge with
/// penalty 1e-8 and a warning.
pub fn fit_perf_models(records: &[ProfileRecord]) -> Result<PerfModel> {
    if records.len() < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 profile records, got {}",
            records.len()
        )));
    }
    let features: Vec<Vector> = records.iter().map(|r| featurize(&r.config)).collect();
    let acc: Vec<f64> = records.iter().map(|r| r.accuracy).collect();
    let mem: Vec<f64> = records.iter().map(|r| r.peak_memory as f64).collect();
    let lat: Vec<f64> = records.iter().map(|r| r.mean_latency).collect();
    Ok(PerfModel {
        feature_dim: features[0].dim(),
        accuracy: ols_fit(&features, &acc),
        memory: ols_fit(&features, &mem),
        latency: ols_fit(&features, &lat),
    })
}

// ---------------------------------------------------------------------------
// Genetic search
// ---------------------------------------------------------------------------

/// Genetic algorithm parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaParams {
    pub population: usize,
    pub mutation_rate: f64,
    pub crossover_rate: f64,
    pub generations: usize,
    pub seed: u64,
}

impl Default for GaParams {
    fn default() -> Self {
        GaParams {
            population: 50,
            mutation_rate: 0.5,
            crossover_rate: 0.01,
            generations: 5000,
            seed: 0,
        }
    }
}

fn mutate_one_field(config: &mut PCConfig, shape: &ModelShape, rng: &mut ChaCha8Rng) {
    let layers = shape.num_layers();
    let field = rng.random_range(0..2 * layers + 1);
    if field == 0 {
        config.interval = shape.intervals[rng.random_range(0..shape.intervals.len())];
    } else if field <= layers {
        let l = field - 1;
        config.num_experts[l] = rng.random_range(1..=shape.experts_per_layer[l]);
    } else {
        let l = field - layers - 1;
        config.strategies[l] = if rng.random_bool(0.5) {
            Strategy::Exchange
        } else {
            Strategy::Skip
        };
    }
}

fn crossover(a: &PCConfig, b: &PCConfig, rng: &mut ChaCha8Rng) -> PCConfig {
    if rng.random_bool(0.5) {
        // Field-wise exchange.
        let layers = a.num_experts.len();
        let mut child = a.clone();
        if rng.random_bool(0.5) {
            child.interval = b.interval;
        }
        for l in 0..layers {
            if rng.random_bool(0.5) {
                child.num_experts[l] = b.num_experts[l];
            }
            if rng.random_bool(0.5) {
                child.strategies[l] = b.strategies[l];
            }
        }
        child
    } else {
        // Per-layer averaging of committee sizes; remaining fields come
        // from a random parent.
        let num_experts = a
            .num_experts
            .iter()
            .zip(&b.num_experts)
            .map(|(&x, &y)| (((x + y) as f64) / 2.0).round() as usize)
            .collect();
        let parent = if rng.random_bool(0.5) { a } else { b };
        PCConfig {
            interval: parent.interval,
            num_experts,
            strategies: parent.strategies.clone(),
        }
    }
}

fn is_feasible(pm: &PerfModel, constraints: &Constraints, config: &PCConfig) -> bool {
    let (_, mem, lat) = predict_metrics(pm, config);
    mem <= constraints.limit_memory && lat <= constraints.limit_latency
}

/// Maximize predicted accuracy subject to the predicted memory and latency
/// limits. Per generation every individual mutates one random field with
/// probability `mutation_rate`, offspring are created by field-wise
/// exchange or size-averaging with probability `crossover_rate`, infeasible
/// individuals are removed and the rest truncate elitist to the population
/// size. Returns `None` when no feasible individual was ever seen.
pub fn genetic_search(
    pm: &PerfModel,
    constraints: &Constraints,
    shape: &ModelShape,
    ga: &GaParams,
) -> Option<PCConfig> {
    let mut rng = ChaCha8Rng::seed_from_u64(ga.seed);
    let mut population: Vec<PCConfig> = (0..ga.population)
        .map(|_| random_config(shape, &mut rng))
        .collect();
    let mut best: Option<(f64, PCConfig)> = None;

    for _ in 0..ga.generations {
        for individual in &mut population {
            if rng.random::<f64>() < ga.mutation_rate {
                mutate_one_field(individual, shape, &mut rng);
            }
        }
        let len = population.len();
        let mut offspring = Vec::new();
        if len >= 2 {
            for i in 0..len {
                if rng.random::<f64>() < ga.crossover_rate {
                    let mut j = rng.random_range(0..len - 1);
                    if j >= i {
                        j += 1;
                    }
                    offspring.push(crossover(&population[i], &population[j], &mut rng));
                }
            }
        }
        population.extend(offspring);

        let mut scored: Vec<(f64, PCConfig)> = population
            .drain(..)
            .filter(|c| is_feasible(pm, constraints, c))
            .map(|c| {
                let (acc, _, _) = predict_metrics(pm, &c);
                (acc, c)
            })
            .collect();
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
        if let Some((acc, config)) = scored.first() {
            if best.as_ref().is_none_or(|(b, _)| *acc > *b) {
                best = Some((*acc, config.clone()));
            }
        }
        scored.truncate(ga.population);
        population = scored.into_iter().map(|(_, c)| c).collect();
        while population.len() < ga.population {
            population.push(random_config(shape, &mut rng));
        }
    }
    best.map(|(_, c)| c)
}

/// Enumerate the whole bounded space (exhaustive oracle for small shapes).
pub fn enumerate_configs(shape: &ModelShape) -> Vec<PCConfig> {
    let layers = shape.num_layers();
    let mut configs = Vec::new();
    let mut counts = vec![1usize; layers];
    loop {
        let mut strategies_idx = vec![0u8; layers];
        loop {
            for &interval in &shape.intervals {
                configs.push(PCConfig {
                    interval,
                    num_experts: counts.clone(),
                    strategies: strategies_idx
                        .iter()
                        .map(|&s| {
                            if s == 0 {
                                Strategy::Skip
                            } else {
                                Strategy::Exchange
                            }
                        })
                        .collect(),
                });
            }
            // Advance the strategy odometer.
            let mut l = 0;
            loop {
                if l == layers {
                    break;
                }
                strategies_idx[l] += 1;
                if strategies_idx[l] < 2 {
                    break;
                }
                strategies_idx[l] = 0;
                l += 1;
            }
            if l == layers {
                break;
            }
        }
        // Advance the counts odometer.
        let mut l = 0;
        loop {
            if l == layers {
                return configs;
            }
            counts[l] += 1;
            if counts[l] <= shape.experts_per_layer[l] {
                break;
            }
            counts[l] = 1;
            l += 1;
        }
    }
}

/// Plan summary written alongside the chosen configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanReport {
    pub predicted: Option<PredictedMetrics>,
    pub feasible: bool,
    pub generations_run: usize,
    pub seed: u64,
}

impl PlanReport {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictedMetrics {
    pub acc: f64,
    pub mem: f64,
    pub lat: f64,
}

/// Run the search and produce the report the CLI writes to disk.
pub fn plan(
    pm: &PerfModel,
    constraints: &Constraints,
    shape: &ModelShape,
    ga: &GaParams,
) -> (Option<PCConfig>, PlanReport) {
    let chosen = genetic_search(pm, constraints, shape, ga);
    let predicted = chosen.as_ref().map(|c| {
        let (acc, mem, lat) = predict_metrics(pm, c);
        PredictedMetrics { acc, mem, lat }
    });
    let report = PlanReport {
        predicted,
        feasible: chosen.is_some(),
        generations_run: ga.generations,
        seed: ga.seed,
    };
    (chosen, report)
}
