//! `pcmoe`: generate synthetic MoE models and traces, replay them under
//! committee serving or the baseline policies, profile configurations,
//! plan under resource budgets and tabulate tradeoffs.
//!
//! Exit codes: 0 on success, 2 when planning finds no feasible
//! configuration, 1 on any error.

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use pcmoe_core::committee::PCConfig;
use pcmoe_core::moe::MoEModelSpec;
use pcmoe_core::planner::{
    build_profiling_trace, fit_perf_models, plan, random_configs, Constraints, GaParams,
    ModelShape, ProfileDocument,
};
use pcmoe_core::report::save_tradeoff;
use pcmoe_core::serve::{serve_trace, ServePolicy, ServeReport};
use pcmoe_core::swap::CostModelParams;
use pcmoe_core::workload::{gen_model, gen_trace, Order, Trace, TraceSpec};

#[derive(Parser)]
#[command(name = "pcmoe", version, about = "Committee-based MoE serving sandbox")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic model with cluster-aligned gates.
    GenModel {
        #[arg(long)]
        d: usize,
        #[arg(long)]
        h: usize,
        #[arg(long)]
        layers: usize,
        /// Experts per layer.
        #[arg(long)]
        experts: usize,
        /// Top-k experts per token.
        #[arg(long)]
        k: usize,
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a (self-labeled) trace against a model.
    GenTrace {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        samples: usize,
        /// Tokens per sample.
        #[arg(long)]
        tokens: usize,
        #[arg(long)]
        clusters: usize,
        /// Samples per cluster regime.
        #[arg(long)]
        drift: usize,
        #[arg(long)]
        noise: f64,
        /// sequential | speedup:<f> | shuffled
        #[arg(long)]
        order: String,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Replay a trace under a serving policy.
    Serve {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        trace: PathBuf,
        /// reference | pc:<config.json> | random-keep:<r>:<seed> |
        /// magnitude-keep:<r> | on-demand:<r>
        #[arg(long)]
        policy: String,
        #[arg(long)]
        cost: PathBuf,
        /// Per-sample metrics CSV.
        #[arg(long)]
        metrics: PathBuf,
        /// Summary report JSON.
        #[arg(long)]
        report: PathBuf,
    },
    /// Profile random configurations on the tiled profiling slice of a trace.
    Profile {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, default_value_t = 64)]
        num_configs: usize,
        #[arg(long)]
        cost: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit performance models from profile records and search for the best
    /// feasible configuration.
    Plan {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        constraints: PathBuf,
        #[arg(long, default_value_t = 0)]
        ga_seed: u64,
        /// Optional safety margin in [0, 1) shrinking both budgets.
        #[arg(long, default_value_t = 0.0)]
        margin: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Merge serve reports into a tradeoff CSV.
    Report {
        #[arg(long = "in", required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_ratio(s: &str, what: &str) -> anyhow::Result<f64> {
    let r: f64 = s
        .parse()
        .with_context(|| format!("bad {what} ratio '{s}'"))?;
    if !(r > 0.0 && r <= 1.0) {
        bail!("{what} ratio {r} outside (0, 1]");
    }
    Ok(r)
}

fn parse_policy(s: &str) -> anyhow::Result<ServePolicy> {
    if s == "reference" {
        return Ok(ServePolicy::Reference);
    }
    if let Some(path) = s.strip_prefix("pc:") {
        let config =
            PCConfig::load(path).with_context(|| format!("loading committee config '{path}'"))?;
        return Ok(ServePolicy::Pc(config));
    }
    if let Some(rest) = s.strip_prefix("random-keep:") {
        let (ratio, seed) = rest
            .split_once(':')
            .context("random-keep needs <ratio>:<seed>")?;
        return Ok(ServePolicy::RandomKeep {
            ratio: parse_ratio(ratio, "random-keep")?,
            seed: seed.parse().with_context(|| format!("bad seed '{seed}'"))?,
        });
    }
    if let Some(ratio) = s.strip_prefix("magnitude-keep:") {
        return Ok(ServePolicy::MagnitudeKeep {
            ratio: parse_ratio(ratio, "magnitude-keep")?,
        });
    }
    if let Some(ratio) = s.strip_prefix("on-demand:") {
        return Ok(ServePolicy::OnDemand {
            ratio: parse_ratio(ratio, "on-demand")?,
        });
    }
    bail!(
        "unknown policy '{s}'; expected reference, pc:<config.json>, \
         random-keep:<r>:<seed>, magnitude-keep:<r> or on-demand:<r>"
    )
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::GenModel {
            d,
            h,
            layers,
            experts,
            k,
            classes,
            seed,
            out,
        } => {
            let model = gen_model(d, h, layers, experts, k, classes, seed)?;
            model.save(&out)?;
            println!(
                "wrote {} ({layers} layers, {experts} experts/layer, k={k}, d={d}, h={h})",
                out.display()
            );
        }
        Command::GenTrace {
            model,
            samples,
            tokens,
            clusters,
            drift,
            noise,
            order,
            seed,
            out,
        } => {
            let model = MoEModelSpec::load(&model)?;
            let spec = TraceSpec {
                num_samples: samples,
                tokens_per_sample: tokens,
                num_clusters: clusters,
                drift_period: drift,
                noise_sigma: noise,
                order: Order::from_str(&order)?,
                seed,
            };
            let trace = gen_trace(&spec, Some(&model))?;
            trace.save(&out)?;
            println!(
                "wrote {} ({samples} samples, {tokens} tokens each)",
                out.display()
            );
        }
        Command::Serve {
            model,
            trace,
            policy,
            cost,
            metrics,
            report,
        } => {
            let model = MoEModelSpec::load(&model)?;
            let trace = Trace::load(&trace)?;
            let policy = parse_policy(&policy)?;
            let cost = CostModelParams::load(&cost)?;
            let outcome = serve_trace(&model, &trace, &policy, &cost)?;
            outcome.metrics.save_csv(&metrics)?;
            outcome.report.save(&report)?;
            println!(
                "{}: accuracy {:.4}, fidelity {:.6}, peak {} B, mean latency {:.3} ms",
                outcome.report.policy,
                outcome.report.accuracy,
                outcome.report.fidelity,
                outcome.report.peak_resident_bytes,
                outcome.report.mean_latency_ms,
            );
        }
        Command::Profile {
            model,
            trace,
            num_configs,
            cost,
            seed,
            out,
        } => {
            let model = MoEModelSpec::load(&model)?;
            let trace = Trace::load(&trace)?;
            let cost = CostModelParams::load(&cost)?;
            let shape = ModelShape::of(&model);
            let max_interval = shape.intervals.iter().copied().max().unwrap_or(1);
            let profiling = build_profiling_trace(&trace, max_interval)?;
            let configs = random_configs(&shape, num_configs, seed);
            let records = pcmoe_core::planner::run_profile(&model, &profiling, &configs, &cost)?;
            ProfileDocument { shape, records }.save(&out)?;
            println!(
                "wrote {} ({num_configs} configs over {} profiling samples)",
                out.display(),
                profiling.samples.len()
            );
        }
        Command::Plan {
            records,
            constraints,
            ga_seed,
            margin,
            out,
            report,
        } => {
            let doc = ProfileDocument::load(&records)?;
            let constraints = Constraints::load(&constraints)?.with_margin(margin)?;
            let pm = fit_perf_models(&doc.records)?;
            let ga = GaParams {
                seed: ga_seed,
                ..GaParams::default()
            };
            let (chosen, plan_report) = plan(&pm, &constraints, &doc.shape, &ga);
            plan_report.save(&report)?;
            match chosen {
                Some(config) => {
                    config.save(&out)?;
                    let p = plan_report
                        .predicted
                        .expect("feasible plan has predictions");
                    println!(
                        "wrote {} (predicted accuracy {:.4}, memory {:.0} B, latency {:.3} ms)",
                        out.display(),
                        p.acc,
                        p.mem,
                        p.lat
                    );
                }
                None => {
                    eprintln!("no feasible configuration under the given constraints");
                    return Ok(ExitCode::from(2));
                }
            }
        }
        Command::Report { inputs, out } => {
            let reports = inputs
                .iter()
                .map(ServeReport::load)
                .collect::<pcmoe_core::Result<Vec<_>>>()?;
            save_tradeoff(&reports, &out)?;
            println!("wrote {} ({} rows)", out.display(), reports.len());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
