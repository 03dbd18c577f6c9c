//! Run-level statistics and report files.
//!
//! Time to first token is approximated by the latency of one full forward
//! pass of a batch; decode steps are not simulated.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::engine::{Breakdown, EventKind, GpuTimeline, LayerResult};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub total_tokens: u64,
    /// Sum of batch latencies, seconds.
    pub duration: f64,
    pub per_batch_latency: Vec<f64>,
    pub per_batch_throughput: Vec<f64>,
    pub per_batch_alpha: Vec<f64>,
    pub per_batch_tokens: Vec<u64>,
    pub expert_swaps_per_batch: Vec<u64>,
    /// `[batch][layer]` barrier-to-barrier latency.
    pub per_batch_layer_latency: Vec<Vec<f64>>,
    /// `[layer][gpu]`, summed over batches.
    pub per_layer_breakdown: Vec<Vec<Breakdown>>,
    /// Per GPU, sum of layer spans over the whole run.
    pub per_gpu_span: Vec<f64>,
    /// `[batch][layer][gpu]` tokens executed.
    pub per_gpu_token_loads: Vec<Vec<Vec<u64>>>,
    /// `[batch][layer][expert]` tokens routed.
    pub per_expert_token_counts: Vec<Vec<Vec<u64>>>,
}

impl RunMetrics {
    pub fn new(num_gpus: usize, num_layers: usize) -> Self {
        RunMetrics {
            total_tokens: 0,
            duration: 0.0,
            per_batch_latency: Vec::new(),
            per_batch_throughput: Vec::new(),
            per_batch_alpha: Vec::new(),
            per_batch_tokens: Vec::new(),
            expert_swaps_per_batch: Vec::new(),
            per_batch_layer_latency: Vec::new(),
            per_layer_breakdown: vec![vec![Breakdown::default(); num_gpus]; num_layers],
            per_gpu_span: vec![0.0; num_gpus],
            per_gpu_token_loads: Vec::new(),
            per_expert_token_counts: Vec::new(),
        }
    }

    pub fn num_gpus(&self) -> usize {
        self.per_gpu_span.len()
    }

    pub fn push_batch(
        &mut self,
        alpha: f64,
        tokens: u64,
        latency: f64,
        swaps: u64,
        layer_latencies: Vec<f64>,
    ) {
        self.total_tokens += tokens;
        self.duration += latency;
        self.per_batch_latency.push(latency);
        self.per_batch_throughput.push(if latency > 0.0 {
            tokens as f64 / latency
        } else {
            0.0
        });
        self.per_batch_alpha.push(alpha);
        self.per_batch_tokens.push(tokens);
        self.expert_swaps_per_batch.push(swaps);
        self.per_batch_layer_latency.push(layer_latencies);
    }

    /// Run-wide breakdown per GPU, summed over layers.
    pub fn gpu_breakdown(&self, gpu: usize) -> Breakdown {
        let mut b = Breakdown::default();
        for layer in &self.per_layer_breakdown {
            b.accumulate(&layer[gpu]);
        }
        b
    }

    /// Fraction of each GPU's time spent waiting, over the whole run.
    pub fn wait_fractions(&self) -> Vec<f64> {
        (0..self.num_gpus())
            .map(|g| {
                let span = self.per_gpu_span[g];
                if span > 0.0 {
                    self.gpu_breakdown(g).wait / span
                } else {
                    0.0
                }
            })
            .collect()
    }

    pub fn mean_layer_latency(&self) -> f64 {
        let all: Vec<f64> = self.per_batch_layer_latency.iter().flatten().copied().collect();
        if all.is_empty() {
            0.0
        } else {
            all.iter().sum::<f64>() / all.len() as f64
        }
    }
}

/// Tokens per second over the whole run.
pub fn throughput(m: &RunMetrics) -> Result<f64> {
    if m.duration.is_nan() || m.duration <= 0.0 {
        return Err(Error::invalid("duration", "throughput needs a positive run duration"));
    }
    Ok(m.total_tokens as f64 / m.duration)
}

/// Mean batch latency, standing in for time to first token.
pub fn mean_ttft(m: &RunMetrics) -> Result<f64> {
    mean(&m.per_batch_latency).ok_or_else(|| Error::invalid("per_batch_latency", "no batches"))
}

/// Population variance of per-batch throughput.
pub fn throughput_variance(m: &RunMetrics) -> Result<f64> {
    let xs = &m.per_batch_throughput;
    if xs.len() < 2 {
        return Err(Error::invalid(
            "per_batch_throughput",
            "variance needs at least two batches",
        ));
    }
    let mu = mean(xs).expect("non-empty");
    Ok(xs.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / xs.len() as f64)
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Empirical CDF: distinct values ascending with the fraction of samples
/// at or below each.
pub fn load_ecdf(loads: &[u64]) -> Result<Vec<(u64, f64)>> {
    if loads.is_empty() {
        return Err(Error::invalid("loads", "ECDF of an empty sample"));
    }
    let mut sorted = loads.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    let mut out: Vec<(u64, f64)> = Vec::new();
    for (i, &v) in sorted.iter().enumerate() {
        if i + 1 == n || sorted[i + 1] != v {
            out.push((v, (i + 1) as f64 / n as f64));
        }
    }
    Ok(out)
}

/// Share of `gpu`'s time spent waiting, over a sequence of layers.
pub fn wait_fraction(layers: &[LayerResult], gpu: usize) -> Result<f64> {
    let timelines: Vec<&GpuTimeline> = layers
        .iter()
        .map(|l| {
            l.timelines
                .get(gpu)
                .ok_or_else(|| Error::invalid("gpu", format!("no GPU {gpu}")))
        })
        .collect::<Result<_>>()?;
    let span: f64 = timelines.iter().map(|t| t.span).sum();
    if span.is_nan() || span <= 0.0 {
        return Err(Error::invalid("span", "wait fraction of a zero-length timeline"));
    }
    let wait: f64 = timelines.iter().map(|t| t.breakdown().wait).sum();
    Ok((wait / span).clamp(0.0, 1.0))
}

#[derive(Serialize)]
struct BatchRow {
    batch_id: usize,
    alpha: f64,
    latency_s: f64,
    throughput_tok_s: f64,
    expert_swaps: u64,
}

#[derive(Serialize)]
struct BreakdownRow {
    layer: usize,
    gpu: usize,
    category: &'static str,
    seconds: f64,
}

#[derive(Serialize)]
struct EcdfRow {
    series: &'static str,
    value: u64,
    fraction: f64,
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(BufWriter::new(file)))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

pub fn write_batches_csv(m: &RunMetrics, path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    for b in 0..m.per_batch_latency.len() {
        w.serialize(BatchRow {
            batch_id: b,
            alpha: m.per_batch_alpha[b],
            latency_s: m.per_batch_latency[b],
            throughput_tok_s: m.per_batch_throughput[b],
            expert_swaps: m.expert_swaps_per_batch[b],
        })
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_breakdown_csv(m: &RunMetrics, path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    for (layer, gpus) in m.per_layer_breakdown.iter().enumerate() {
        for (gpu, b) in gpus.iter().enumerate() {
            for kind in EventKind::ALL {
                w.serialize(BreakdownRow {
                    layer,
                    gpu,
                    category: kind.name(),
                    seconds: b.get(kind),
                })
                .map_err(|e| csv_err(path, e))?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `gpu_load`: tokens executed per (batch, layer, GPU).
/// `expert_load`: tokens routed per (batch, layer, expert).
pub fn write_ecdf_csv(m: &RunMetrics, path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    let series: [(&'static str, Vec<u64>); 2] = [
        (
            "gpu_load",
            m.per_gpu_token_loads.iter().flatten().flatten().copied().collect(),
        ),
        (
            "expert_load",
            m.per_expert_token_counts.iter().flatten().flatten().copied().collect(),
        ),
    ];
    for (name, sample) in series {
        if sample.is_empty() {
            continue;
        }
        for (value, fraction) in load_ecdf(&sample)? {
            w.serialize(EcdfRow {
                series: name,
                value,
                fraction,
            })
            .map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Machine-readable run summary. `config` is echoed verbatim.
#[derive(Debug, Serialize)]
pub struct Summary {
    pub config: serde_json::Value,
    pub total_tokens: u64,
    pub duration_s: f64,
    pub throughput_tok_s: f64,
    pub mean_ttft_s: f64,
    /// `None` for single-batch runs.
    pub throughput_variance: Option<f64>,
    pub mean_layer_latency_s: f64,
    pub wait_fractions: Vec<f64>,
    pub expert_swaps: u64,
    pub notes: Notes,
    /// Host time spent simulating. Not reproducible across runs.
    pub wall_clock_s: f64,
}

#[derive(Debug, Serialize)]
pub struct Notes {
    pub ttft: &'static str,
    pub execution_order: &'static str,
}

impl Summary {
    pub fn build(m: &RunMetrics, config: serde_json::Value, wall_clock_s: f64) -> Result<Self> {
        Ok(Summary {
            config,
            total_tokens: m.total_tokens,
            duration_s: m.duration,
            throughput_tok_s: throughput(m)?,
            mean_ttft_s: mean_ttft(m)?,
            throughput_variance: throughput_variance(m).ok(),
            mean_layer_latency_s: m.mean_layer_latency(),
            wait_fractions: m.wait_fractions(),
            expert_swaps: m.expert_swaps_per_batch.iter().sum(),
            notes: Notes {
                ttft: "batch forward-pass latency; decode steps are not simulated",
                execution_order: "resident experts first, then fetched experts, each by descending token count",
            },
            wall_clock_s,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer_pretty(&mut w, self).map_err(|e| Error::io(path, e.into()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}
