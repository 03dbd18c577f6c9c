//! Command-line front end: run configs, parameter sweeps, threshold
//! estimation and trace management.
//!
//! Exit codes: 0 success, 2 usage or validation error, 3 I/O error,
//! 4 internal invariant violation.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{ClusterSpec, ModelPreset, ModelSpec};
use crate::engine::{simulate_run, SimFlags};
use crate::error::{Error, Result};
use crate::metrics::{
    mean_ttft, throughput, throughput_variance, write_batches_csv, write_breakdown_csv,
    write_ecdf_csv, Summary,
};
use crate::policies::{
    estimate_token_threshold, token_threshold_bound, PlacementKind, Policy, SchedulerConfig,
};
use crate::workload::{generate_trace, read_trace, write_trace, Trace, WorkloadSpec};

/// Environment variable naming the default output directory.
pub const OUTPUT_DIR_ENV: &str = "MOESIM_OUTPUT_DIR";
const DEFAULT_OUTPUT_DIR: &str = "moesim-out";

/// Model section: either a preset, explicit dimensions, or a preset with
/// matching dimensions spelled out (the form echoed back in summaries).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<ModelPreset>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_layers: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_experts: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_model: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_ff: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dtype_bytes: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub non_moe_layer_time: Option<f64>,
}

impl ModelConfig {
    pub fn preset(preset: ModelPreset) -> Self {
        ModelConfig {
            preset: Some(preset),
            ..ModelConfig::default()
        }
    }

    pub fn resolve(&self) -> Result<ModelSpec> {
        let spec = match self.preset {
            Some(preset) => {
                let base = preset.spec();
                let pinned = [
                    ("num_layers", self.num_layers.map(|v| v as u64), base.num_layers as u64),
                    ("num_experts", self.num_experts.map(|v| v as u64), base.num_experts as u64),
                    ("d_model", self.d_model, base.d_model),
                    ("d_ff", self.d_ff, base.d_ff),
                    ("dtype_bytes", self.dtype_bytes, base.dtype_bytes),
                ];
                for (name, given, expected) in pinned {
                    if given.is_some_and(|v| v != expected) {
                        return Err(Error::invalid(
                            format!("model.{name}"),
                            format!("preset {} fixes this to {expected}", preset.name()),
                        ));
                    }
                }
                ModelSpec {
                    non_moe_layer_time: self.non_moe_layer_time.unwrap_or(base.non_moe_layer_time),
                    ..base
                }
            }
            None => {
                let need = |name: &str| Error::invalid(format!("model.{name}"), "required without a preset");
                ModelSpec {
                    num_layers: self.num_layers.ok_or_else(|| need("num_layers"))?,
                    num_experts: self.num_experts.ok_or_else(|| need("num_experts"))?,
                    d_model: self.d_model.ok_or_else(|| need("d_model"))?,
                    d_ff: self.d_ff.ok_or_else(|| need("d_ff"))?,
                    dtype_bytes: self.dtype_bytes.ok_or_else(|| need("dtype_bytes"))?,
                    non_moe_layer_time: self.non_moe_layer_time.unwrap_or(0.0),
                }
            }
        };
        spec.validate("model.")?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulerSection {
    pub policy: Policy,
    /// Defaults to the analytic estimate from the cluster and model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_threshold_q: Option<u64>,
    #[serde(default)]
    pub placement: PlacementKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub affinity_refresh_batches: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub cluster: ClusterSpec,
    pub model: ModelConfig,
    pub scheduler: SchedulerSection,
    #[serde(default)]
    pub flags: SimFlags,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workload: Option<WorkloadSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<PathBuf>,
}

/// A validated config with every default filled in.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedRun {
    /// Echo form: model dimensions and `q` spelled out.
    pub config: RunConfig,
    pub model: ModelSpec,
    pub scheduler: SchedulerConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map_or(1, |s| text[..s.start.min(text.len())].matches('\n').count() + 1);
            Error::Parse {
                path: origin.to_path_buf(),
                line,
                reason: e.message().to_string(),
            }
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    pub fn resolve(&self) -> Result<ResolvedRun> {
        self.cluster.validate("cluster.")?;
        let model = self.model.resolve()?;
        match (&self.workload, &self.trace) {
            (Some(w), None) => w.validate(model.num_experts, "workload.")?,
            (None, Some(_)) => {}
            _ => {
                return Err(Error::invalid(
                    "workload",
                    "exactly one of `workload` and `trace` must be given",
                ))
            }
        }
        let q = match self.scheduler.token_threshold_q {
            Some(0) => {
                return Err(Error::invalid("scheduler.token_threshold_q", "must be at least 1"))
            }
            Some(q) => q,
            None => estimate_token_threshold(
                self.cluster.gpu_flops,
                model.dtype_bytes as f64,
                self.cluster.pcie_bandwidth,
            )?,
        };
        let scheduler = SchedulerConfig {
            token_threshold_q: q,
            policy: self.scheduler.policy,
            placement: self.scheduler.placement,
            affinity_refresh_batches: self.scheduler.affinity_refresh_batches,
        };
        if matches!(self.scheduler.policy, Policy::Harmoeny | Policy::EvenSplit | Policy::RoundRobin) {
            let kind = match self.scheduler.policy {
                Policy::RoundRobin => PlacementKind::RoundRobin,
                _ => self.scheduler.placement,
            };
            kind.build(model.num_experts, self.cluster.num_gpus)
                .check_capacity(self.cluster.expert_slots_per_gpu)?;
        } else if model.num_experts > self.cluster.num_gpus * self.cluster.expert_slots_per_gpu {
            return Err(Error::invalid(
                "cluster.expert_slots_per_gpu",
                "not enough slots to home every expert",
            ));
        }

        let mut config = self.clone();
        config.model = ModelConfig {
            preset: self.model.preset,
            num_layers: Some(model.num_layers),
            num_experts: Some(model.num_experts),
            d_model: Some(model.d_model),
            d_ff: Some(model.d_ff),
            dtype_bytes: Some(model.dtype_bytes),
            non_moe_layer_time: Some(model.non_moe_layer_time),
        };
        config.scheduler.token_threshold_q = Some(q);
        Ok(ResolvedRun {
            config,
            model,
            scheduler,
        })
    }
}

impl ResolvedRun {
    pub fn load_trace(&self) -> Result<Trace> {
        let trace = match (&self.config.workload, &self.config.trace) {
            (Some(w), _) => generate_trace(w, &self.model, self.config.cluster.num_gpus)?,
            (None, Some(path)) => read_trace(path)?,
            (None, None) => unreachable!("checked in resolve"),
        };
        if trace.num_gpus != self.config.cluster.num_gpus
            || trace.num_experts != self.model.num_experts
            || trace.num_layers != self.model.num_layers
        {
            return Err(Error::ShapeMismatch(format!(
                "trace is {} GPUs x {} experts x {} layers, config expects {} x {} x {}",
                trace.num_gpus,
                trace.num_experts,
                trace.num_layers,
                self.config.cluster.num_gpus,
                self.model.num_experts,
                self.model.num_layers
            )));
        }
        Ok(trace)
    }
}

/// Headline numbers from one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub throughput: f64,
    pub mean_ttft: f64,
    pub variance: Option<f64>,
}

fn default_output_dir() -> PathBuf {
    std::env::var_os(OUTPUT_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR))
}

/// Simulates `config` and writes `summary.json`, `batches.csv`,
/// `breakdown.csv` and `ecdf.csv` into `out_dir`.
pub fn run_to_dir(config: &RunConfig, out_dir: &Path) -> Result<RunOutcome> {
    let started = Instant::now();
    let resolved = config.resolve()?;
    let trace = resolved.load_trace()?;
    let metrics = simulate_run(
        &trace,
        &resolved.model,
        &resolved.config.cluster,
        &resolved.scheduler,
        resolved.config.flags,
    )?;

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_batches_csv(&metrics, &out_dir.join("batches.csv"))?;
    write_breakdown_csv(&metrics, &out_dir.join("breakdown.csv"))?;
    write_ecdf_csv(&metrics, &out_dir.join("ecdf.csv"))?;
    let echo = serde_json::to_value(&resolved.config).map_err(|e| Error::Invariant(e.to_string()))?;
    let summary = Summary::build(&metrics, echo, started.elapsed().as_secs_f64())?;
    summary.write(&out_dir.join("summary.json"))?;

    Ok(RunOutcome {
        throughput: throughput(&metrics)?,
        mean_ttft: mean_ttft(&metrics)?,
        variance: throughput_variance(&metrics).ok(),
    })
}

#[derive(Debug, Parser)]
#[command(name = "moesim", version, about = "Expert-parallel MoE inference simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate one config and write reports.
    Run {
        config: PathBuf,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Print the token threshold for a GPU / PCIe pair.
    EstimateQ(EstimateArgs),
    /// Run a grid of configs varying one parameter.
    Sweep(SweepArgs),
    /// Generate or inspect routing traces.
    #[command(subcommand)]
    Trace(TraceCommand),
}

#[derive(Debug, Args)]
struct EstimateArgs {
    /// GPU throughput, FLOP/s.
    #[arg(long)]
    flops: f64,
    /// Bytes per weight element.
    #[arg(long)]
    dtype_bytes: f64,
    /// Host-to-GPU bandwidth, bytes/s.
    #[arg(long)]
    pcie_bandwidth: f64,
}

#[derive(Debug, Args)]
struct SweepArgs {
    config: PathBuf,
    /// One of alpha, q, policy, tokens_per_gpu.
    #[arg(long)]
    param: String,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    values: Vec<String>,
    /// Comma-separated policies; defaults to the config's policy.
    #[arg(long, value_delimiter = ',')]
    policies: Vec<String>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum TraceCommand {
    /// Write the trace described by a config's workload section.
    Generate { config: PathBuf, out: PathBuf },
    /// Print dimensions, per-layer skew and per-batch alpha.
    Inspect { path: PathBuf },
}

/// Entry point used by the binary. Returns the process exit code.
pub fn main_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Run { config, output_dir } => cmd_run(&config, output_dir),
        Command::EstimateQ(args) => cmd_estimate_q(&args),
        Command::Sweep(args) => cmd_sweep(&args),
        Command::Trace(TraceCommand::Generate { config, out }) => cmd_trace_generate(&config, &out),
        Command::Trace(TraceCommand::Inspect { path }) => cmd_trace_inspect(&path),
    }
}

fn cmd_run(config_path: &Path, output_dir: Option<PathBuf>) -> Result<()> {
    let config = RunConfig::load(config_path)?;
    let out = output_dir
        .or_else(|| config.output_dir.clone())
        .unwrap_or_else(default_output_dir);
    let r = run_to_dir(&config, &out)?;
    println!(
        "policy={} throughput={:.3} tok/s mean_ttft={:.6} s variance={} out={}",
        config.scheduler.policy.name(),
        r.throughput,
        r.mean_ttft,
        r.variance.map_or("n/a".to_string(), |v| format!("{v:.3}")),
        out.display()
    );
    Ok(())
}

fn cmd_estimate_q(args: &EstimateArgs) -> Result<()> {
    let bound = token_threshold_bound(args.flops, args.dtype_bytes, args.pcie_bandwidth)?;
    let q = estimate_token_threshold(args.flops, args.dtype_bytes, args.pcie_bandwidth)?;
    println!("bound {bound}");
    println!("q {q}");
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SweepParam {
    Alpha,
    Q,
    Policy,
    TokensPerGpu,
}

impl SweepParam {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "alpha" => Ok(SweepParam::Alpha),
            "q" => Ok(SweepParam::Q),
            "policy" => Ok(SweepParam::Policy),
            "tokens_per_gpu" => Ok(SweepParam::TokensPerGpu),
            other => Err(Error::invalid(
                "--param",
                format!("unknown parameter `{other}` (expected alpha, q, policy, tokens_per_gpu)"),
            )),
        }
    }

    fn name(self) -> &'static str {
        match self {
            SweepParam::Alpha => "alpha",
            SweepParam::Q => "q",
            SweepParam::Policy => "policy",
            SweepParam::TokensPerGpu => "tokens_per_gpu",
        }
    }
}

#[derive(Debug, Clone)]
struct SweepCell {
    policy: Policy,
    value: String,
    config: RunConfig,
}

fn parse_policy(s: &str) -> Result<Policy> {
    Policy::parse(s).ok_or_else(|| Error::invalid("--policies", format!("unknown policy `{s}`")))
}

fn workload_of(config: &mut RunConfig, param: SweepParam) -> Result<&mut WorkloadSpec> {
    config.workload.as_mut().ok_or_else(|| {
        Error::invalid("workload", format!("sweeping `{}` needs a workload section", param.name()))
    })
}

fn apply_param(config: &mut RunConfig, param: SweepParam, value: &str) -> Result<()> {
    let bad = |reason: String| Error::invalid("--values", reason);
    match param {
        SweepParam::Alpha => {
            let alpha: f64 = value.parse().map_err(|_| bad(format!("`{value}` is not a number")))?;
            workload_of(config, param)?.skew.alpha = alpha;
        }
        SweepParam::Q => {
            let q: u64 = value.parse().map_err(|_| bad(format!("`{value}` is not an integer")))?;
            config.scheduler.token_threshold_q = Some(q);
        }
        SweepParam::TokensPerGpu => {
            let t: u64 = value.parse().map_err(|_| bad(format!("`{value}` is not an integer")))?;
            workload_of(config, param)?.tokens_per_gpu_per_batch = t;
        }
        SweepParam::Policy => config.scheduler.policy = parse_policy(value)?,
    }
    Ok(())
}

fn sweep_cells(base: &RunConfig, args: &SweepArgs) -> Result<(SweepParam, Vec<SweepCell>)> {
    let param = SweepParam::parse(&args.param)?;
    let values: Vec<&str> = args.values.iter().map(|v| v.trim()).filter(|v| !v.is_empty()).collect();
    if values.is_empty() {
        return Err(Error::invalid("--values", "at least one value is required"));
    }
    let policies = if param == SweepParam::Policy || args.policies.is_empty() {
        vec![base.scheduler.policy]
    } else {
        args.policies.iter().map(|p| parse_policy(p.trim())).collect::<Result<_>>()?
    };
    let mut cells = Vec::new();
    for &policy in &policies {
        for value in &values {
            let mut config = base.clone();
            config.scheduler.policy = policy;
            apply_param(&mut config, param, value)?;
            cells.push(SweepCell {
                policy: config.scheduler.policy,
                value: value.to_string(),
                config,
            });
        }
    }
    Ok((param, cells))
}

#[derive(Serialize)]
struct SweepRow<'a> {
    policy: &'a str,
    param: &'a str,
    value: &'a str,
    throughput: f64,
    mean_ttft: f64,
    variance: Option<f64>,
}

fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let base = RunConfig::load(&args.config)?;
    let out = args
        .output_dir
        .clone()
        .or_else(|| base.output_dir.clone())
        .unwrap_or_else(default_output_dir);
    let (param, cells) = sweep_cells(&base, args)?;
    for cell in &cells {
        cell.config.resolve()?;
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs.max(1))
        .build()
        .map_err(|e| Error::Invariant(e.to_string()))?;
    let outcomes: Vec<Result<RunOutcome>> = pool.install(|| {
        cells
            .par_iter()
            .map(|cell| {
                let dir = out.join(format!("{}_{}-{}", cell.policy.name(), param.name(), cell.value));
                run_to_dir(&cell.config, &dir)
            })
            .collect()
    });

    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let path = out.join("sweep.csv");
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for (cell, outcome) in cells.iter().zip(outcomes) {
        let r = outcome?;
        w.serialize(SweepRow {
            policy: cell.policy.name(),
            param: param.name(),
            value: &cell.value,
            throughput: r.throughput,
            mean_ttft: r.mean_ttft,
            variance: r.variance,
        })
        .map_err(|e| Error::io(&path, std::io::Error::other(e)))?;
        println!(
            "{} {}={} throughput={:.3} mean_ttft={:.6}",
            cell.policy.name(),
            param.name(),
            cell.value,
            r.throughput,
            r.mean_ttft
        );
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(())
}

fn cmd_trace_generate(config_path: &Path, out: &Path) -> Result<()> {
    let config = RunConfig::load(config_path)?;
    let resolved = config.resolve()?;
    let workload = resolved
        .config
        .workload
        .as_ref()
        .ok_or_else(|| Error::invalid("workload", "trace generation needs a workload section"))?;
    let trace = generate_trace(workload, &resolved.model, resolved.config.cluster.num_gpus)?;
    write_trace(&trace, out)?;
    println!(
        "wrote {} batches ({} GPUs x {} experts x {} layers) to {}",
        trace.batches.len(),
        trace.num_gpus,
        trace.num_experts,
        trace.num_layers,
        out.display()
    );
    Ok(())
}

/// Mean over batches of the largest single-expert share of tokens, per layer.
pub fn max_expert_share_per_layer(trace: &Trace) -> Vec<f64> {
    (0..trace.num_layers)
        .map(|l| {
            let shares: Vec<f64> = trace
                .batches
                .iter()
                .filter(|b| b.layers[l].total() > 0)
                .map(|b| {
                    let totals = b.layers[l].expert_totals();
                    *totals.iter().max().unwrap_or(&0) as f64 / b.layers[l].total() as f64
                })
                .collect();
            if shares.is_empty() {
                0.0
            } else {
                shares.iter().sum::<f64>() / shares.len() as f64
            }
        })
        .collect()
}

fn cmd_trace_inspect(path: &Path) -> Result<()> {
    let trace = read_trace(path)?;
    println!(
        "gpus {} experts {} layers {} batches {} rng {} seed {}",
        trace.num_gpus,
        trace.num_experts,
        trace.num_layers,
        trace.batches.len(),
        trace.rng,
        trace.seed
    );
    for (l, share) in max_expert_share_per_layer(&trace).iter().enumerate() {
        println!("layer {l} max_expert_share {share:.4}");
    }
    for (b, batch) in trace.batches.iter().enumerate() {
        println!("batch {b} alpha {} tokens {}", batch.alpha, batch.tokens());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[cluster]
num_gpus = 1
expert_slots_per_gpu = 4
link_bandwidth = 1e11
link_latency = 1e-5
pcie_bandwidth = 1.6e10
gpu_flops = 1.4e13

[model]
num_layers = 2
num_experts = 4
d_model = 64
d_ff = 128
dtype_bytes = 2

[scheduler]
policy = "harmoeny"

[workload]
num_batches = 3
tokens_per_gpu_per_batch = 256
seed = 1

[workload.skew]
alpha = 0.5
skewed_experts = [0]
"#;

    fn parse(text: &str) -> Result<RunConfig> {
        RunConfig::from_toml(text, Path::new("cfg.toml"))
    }

    #[test]
    fn minimal_config_resolves() {
        let r = parse(MINIMAL).unwrap().resolve().unwrap();
        assert_eq!(r.model.num_experts, 4);
        // 1.4e13 * 2 / 3.2e10 = 875
        assert_eq!(r.scheduler.token_threshold_q, 876);
        assert_eq!(r.config.scheduler.token_threshold_q, Some(876));
    }

    #[test]
    fn unknown_key_is_an_error() {
        let text = MINIMAL.replace("expert_slots_per_gpu", "expert_slot_per_gpu");
        let err = parse(&text).unwrap_err();
        match err {
            Error::Parse { line, reason, .. } => {
                assert_eq!(line, 4);
                assert!(reason.contains("expert_slot_per_gpu"), "{reason}");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn alpha_out_of_range_names_field() {
        let text = MINIMAL.replace("alpha = 0.5", "alpha = 2.0");
        let err = parse(&text).unwrap().resolve().unwrap_err();
        assert!(err.to_string().contains("workload.skew.alpha"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn preset_dims_must_match() {
        let text = MINIMAL.replace(
            "num_layers = 2\nnum_experts = 4\nd_model = 64\nd_ff = 128\ndtype_bytes = 2",
            "preset = \"switch128\"\nd_model = 1024",
        );
        let err = parse(&text).unwrap().resolve().unwrap_err();
        assert!(err.to_string().contains("model.d_model"), "{err}");
    }

    #[test]
    fn workload_and_trace_are_exclusive() {
        let text = format!("trace = \"x.jsonl\"\n{MINIMAL}");
        let err = parse(&text).unwrap().resolve().unwrap_err();
        assert!(err.to_string().contains("workload"));
    }

    #[test]
    fn echo_reparses_to_equivalent_config() {
        let text = MINIMAL.replace(
            "num_layers = 2\nnum_experts = 4\nd_model = 64\nd_ff = 128\ndtype_bytes = 2",
            "preset = \"qwen\"",
        );
        let text = text.replace("expert_slots_per_gpu = 4", "expert_slots_per_gpu = 64");
        let resolved = parse(&text).unwrap().resolve().unwrap();
        let echo = serde_json::to_value(&resolved.config).unwrap();
        assert_eq!(echo["model"]["d_model"], 2048);
        let back: RunConfig = serde_json::from_value(echo).unwrap();
        assert_eq!(back, resolved.config);
        assert_eq!(back.resolve().unwrap(), resolved);
    }

    #[test]
    fn sweep_rejects_unknown_param_and_empty_values() {
        let base = parse(MINIMAL).unwrap();
        let args = |param: &str, values: Vec<&str>| SweepArgs {
            config: PathBuf::new(),
            param: param.into(),
            values: values.into_iter().map(String::from).collect(),
            policies: vec!["harmoeny".into(), "round_robin".into()],
            jobs: 1,
            output_dir: None,
        };
        assert!(sweep_cells(&base, &args("beta", vec!["1"])).is_err());
        assert!(sweep_cells(&base, &args("alpha", vec![])).is_err());
        let (_, cells) = sweep_cells(&base, &args("alpha", vec!["0", "0.9"])).unwrap();
        assert_eq!(cells.len(), 4);
        assert_eq!(cells[3].policy, Policy::RoundRobin);
        assert_eq!(cells[3].config.workload.as_ref().unwrap().skew.alpha, 0.9);
    }
}
