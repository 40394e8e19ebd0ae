//! Committee-based serving for gated expert-bank (MoE) models.
//!
//! A layer's *committee* is the subset of its experts kept resident in the
//! primary store; requests for non-resident experts are skipped or
//! exchanged onto resident ones. Committees are re-selected from
//! importance scores at a fixed sample interval, with the resulting loads
//! amortized across the interval and overlapped with compute. An offline
//! planner profiles candidate configurations, fits linear performance
//! models and searches the configuration space with a genetic algorithm
//! under memory and latency budgets.
//!
//! Modules:
//! - [`numkit`]: dense vectors/matrices, softmax, top-k, magnitudes.
//! - [`moe`]: the toy model and the full-expert reference forward.
//! - [`committee`]: importance scoring, committee selection, masked
//!   gating, skip/exchange handling.
//! - [`swap`]: two-tier parameter store, amortized swap plans,
//!   virtual-time cost accounting and the real-async loader.
//! - [`workload`]: synthetic models and traces with tunable temporal
//!   locality.
//! - [`serve`]: trace replay under the reference, committee and baseline
//!   policies.
//! - [`planner`]: profiling, least-squares performance models, genetic
//!   configuration search.
//! - [`report`]: tradeoff-table CSV emission.

pub mod committee;
pub mod error;
pub mod moe;
pub mod numkit;
pub mod planner;
pub mod report;
pub mod serve;
pub mod swap;
pub mod workload;

pub use committee::{
    handle_exchange, handle_skip, importance_report, importance_scores, layer_forward_pc,
    masked_selection, select_committee, CommitteeState, ImportanceReport, PCConfig, Strategy,
};
pub use error::{Error, Result};
pub use moe::{
    expert_forward, expert_magnitudes, gate_forward, layer_forward_reference,
    model_forward_reference, route_topk, ExpertParams, GateParams, MoELayerSpec, MoEModelSpec,
    RoutingRecord, Sample,
};
pub use numkit::{magnitude, matvec, softmax, top_k_indices, Matrix, Vector};
pub use planner::{
    featurize, fit_perf_models, genetic_search, predict_metrics, run_profile, Constraints,
    GaParams, ModelShape, PerfModel, ProfileRecord,
};
pub use serve::{serve_trace, PcRuntime, ServeOutcome, ServePolicy, ServeReport};
pub use swap::{
    advance, commit_completed, plan_swap, CostModelParams, ParameterWarehouse, ResidentStore,
    RunMetrics, SampleMetrics, SwapMode, SwapPlan,
};
pub use workload::{gen_model, gen_trace, locality_index, Order, Trace, TraceSpec};
