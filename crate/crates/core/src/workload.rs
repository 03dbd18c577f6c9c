//! Synthetic routing workloads with configurable expert-popularity skew,
//! and the line-delimited trace format used to replay them.
//!
//! The router is replaced by a sampler: a designated set of "skewed"
//! experts shares probability mass `alpha`, everyone else splits `1 - alpha`
//! evenly, and each GPU's tokens are a multinomial draw over that vector.
//! Every layer of every batch is drawn independently.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::domain::{ModelSpec, RoutingMatrix};
use crate::error::{Error, Result};

/// Generator used for every trace. Recorded in the trace header.
pub type SimRng = ChaCha8Rng;
pub const RNG_NAME: &str = "chacha8";
pub const TRACE_VERSION: u32 = 1;

/// How `alpha` evolves from batch to batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SkewMode {
    #[default]
    Fixed,
    /// `alpha` redrawn uniformly from `[lo, hi]` for each batch.
    ResampleUniform { lo: f64, hi: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkewSpec {
    pub alpha: f64,
    #[serde(default)]
    pub skewed_experts: Vec<usize>,
    #[serde(default)]
    pub per_batch_mode: SkewMode,
}

impl SkewSpec {
    pub fn uniform() -> Self {
        SkewSpec {
            alpha: 0.0,
            skewed_experts: Vec::new(),
            per_batch_mode: SkewMode::Fixed,
        }
    }

    pub fn validate(&self, num_experts: usize, prefix: &str) -> Result<()> {
        let field = |name: &str| format!("{prefix}{name}");
        check_alpha(self.alpha, &field("alpha"))?;
        check_skewed(&self.skewed_experts, num_experts, &field("skewed_experts"))?;
        match self.per_batch_mode {
            SkewMode::Fixed => {
                if self.alpha > 0.0 && self.skewed_experts.is_empty() {
                    return Err(Error::invalid(
                        field("skewed_experts"),
                        "must be non-empty when alpha > 0",
                    ));
                }
            }
            SkewMode::ResampleUniform { lo, hi } => {
                check_alpha(lo, &field("per_batch_mode.lo"))?;
                check_alpha(hi, &field("per_batch_mode.hi"))?;
                if lo > hi {
                    return Err(Error::invalid(field("per_batch_mode"), "lo must be <= hi"));
                }
                if hi > 0.0 && self.skewed_experts.is_empty() {
                    return Err(Error::invalid(
                        field("skewed_experts"),
                        "must be non-empty when alpha can exceed 0",
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Synthetic workload driving a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    pub num_batches: usize,
    pub tokens_per_gpu_per_batch: u64,
    pub skew: SkewSpec,
    pub seed: u64,
}

impl WorkloadSpec {
    pub fn validate(&self, num_experts: usize, prefix: &str) -> Result<()> {
        if self.num_batches == 0 {
            return Err(Error::invalid(format!("{prefix}num_batches"), "must be positive"));
        }
        if self.tokens_per_gpu_per_batch == 0 {
            return Err(Error::invalid(
                format!("{prefix}tokens_per_gpu_per_batch"),
                "must be positive",
            ));
        }
        self.skew.validate(num_experts, &format!("{prefix}skew."))
    }
}

fn check_alpha(alpha: f64, field: &str) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(field, format!("{alpha} is outside [0, 1]")));
    }
    Ok(())
}

fn check_skewed(skewed: &[usize], num_experts: usize, field: &str) -> Result<()> {
    let mut seen = vec![false; num_experts];
    for &e in skewed {
        if e >= num_experts {
            return Err(Error::invalid(
                field,
                format!("expert {e} out of range for {num_experts} experts"),
            ));
        }
        if std::mem::replace(&mut seen[e], true) {
            return Err(Error::invalid(field, format!("expert {e} listed twice")));
        }
    }
    Ok(())
}

/// Routing probabilities for skew `alpha` concentrated on `skewed`.
///
/// Each skewed expert gets `alpha / |skewed|`, every other expert
/// `(1 - alpha) / (E - |skewed|)`. When all experts are skewed the vector
/// is uniform regardless of `alpha`.
pub fn skew_probabilities(alpha: f64, skewed: &[usize], num_experts: usize) -> Result<Vec<f64>> {
    if num_experts == 0 {
        return Err(Error::invalid("num_experts", "must be positive"));
    }
    check_alpha(alpha, "alpha")?;
    check_skewed(skewed, num_experts, "skewed_experts")?;
    if skewed.is_empty() {
        if alpha > 0.0 {
            return Err(Error::invalid("skewed_experts", "must be non-empty when alpha > 0"));
        }
        return Ok(vec![1.0 / num_experts as f64; num_experts]);
    }
    if alpha == 0.0 || skewed.len() == num_experts {
        return Ok(vec![1.0 / num_experts as f64; num_experts]);
    }
    let hot = alpha / skewed.len() as f64;
    let cold = (1.0 - alpha) / (num_experts - skewed.len()) as f64;
    let mut probs = vec![cold; num_experts];
    for &e in skewed {
        probs[e] = hot;
    }
    Ok(probs)
}

/// Draws one multinomial row of `tokens_per_gpu` trials per GPU.
///
/// Sampling is sequential binomial conditioning, so row sums are exact and
/// the result is a pure function of the generator state.
pub fn sample_routing<R: Rng + ?Sized>(
    probs: &[f64],
    tokens_per_gpu: u64,
    num_gpus: usize,
    rng: &mut R,
) -> RoutingMatrix {
    let mut m = RoutingMatrix::zeros(num_gpus, probs.len());
    let last = probs.iter().rposition(|&p| p > 0.0).unwrap_or(0);
    for g in 0..num_gpus {
        let mut remaining = tokens_per_gpu;
        let mut mass_left = 1.0;
        for (e, &p) in probs.iter().enumerate() {
            if remaining == 0 {
                break;
            }
            let drawn = if e == last {
                remaining
            } else if p <= 0.0 {
                0
            } else {
                let cond = (p / mass_left).clamp(0.0, 1.0);
                // p in [0, 1] so construction cannot fail
                Binomial::new(remaining, cond)
                    .expect("conditional probability in [0, 1]")
                    .sample(rng)
            };
            m.set(g, e, drawn);
            remaining -= drawn;
            mass_left -= p;
        }
    }
    m
}

/// One batch of a trace: the skew it was drawn with, and one routing
/// matrix per MoE layer.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceBatch {
    pub alpha: f64,
    pub layers: Vec<RoutingMatrix>,
}

impl TraceBatch {
    /// Tokens entering the batch (row sums of the first layer).
    pub fn tokens(&self) -> u64 {
        self.layers.first().map_or(0, RoutingMatrix::total)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub num_gpus: usize,
    pub num_experts: usize,
    pub num_layers: usize,
    pub rng: String,
    pub seed: u64,
    pub batches: Vec<TraceBatch>,
}

impl Trace {
    pub fn empty(num_gpus: usize, num_experts: usize, num_layers: usize, seed: u64) -> Self {
        Trace {
            num_gpus,
            num_experts,
            num_layers,
            rng: RNG_NAME.to_string(),
            seed,
            batches: Vec::new(),
        }
    }
}

/// Generates `spec.num_batches` batches; layers are sampled independently
/// with the batch's alpha.
pub fn generate_trace(spec: &WorkloadSpec, model: &ModelSpec, num_gpus: usize) -> Result<Trace> {
    spec.validate(model.num_experts, "workload.")?;
    let mut rng = SimRng::seed_from_u64(spec.seed);
    let mut trace = Trace::empty(num_gpus, model.num_experts, model.num_layers, spec.seed);
    for _ in 0..spec.num_batches {
        let alpha = match spec.skew.per_batch_mode {
            SkewMode::Fixed => spec.skew.alpha,
            SkewMode::ResampleUniform { lo, hi } if lo == hi => lo,
            SkewMode::ResampleUniform { lo, hi } => rng.random_range(lo..=hi),
        };
        let probs = skew_probabilities(alpha, &spec.skew.skewed_experts, model.num_experts)?;
        let layers = (0..model.num_layers)
            .map(|_| sample_routing(&probs, spec.tokens_per_gpu_per_batch, num_gpus, &mut rng))
            .collect();
        trace.batches.push(TraceBatch { alpha, layers });
    }
    Ok(trace)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    num_gpus: usize,
    num_experts: usize,
    num_layers: usize,
    rng: String,
    seed: u64,
}

#[derive(Serialize)]
struct BatchOut<'a> {
    batch_id: usize,
    alpha_used: f64,
    layers: Vec<Vec<&'a [u64]>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct BatchIn {
    batch_id: usize,
    alpha_used: f64,
    layers: Vec<Vec<Vec<i64>>>,
}

pub fn write_trace_to<W: Write>(trace: &Trace, mut w: W) -> std::io::Result<()> {
    let header = Header {
        version: TRACE_VERSION,
        num_gpus: trace.num_gpus,
        num_experts: trace.num_experts,
        num_layers: trace.num_layers,
        rng: trace.rng.clone(),
        seed: trace.seed,
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for (batch_id, batch) in trace.batches.iter().enumerate() {
        let rec = BatchOut {
            batch_id,
            alpha_used: batch.alpha,
            layers: batch.layers.iter().map(|m| m.rows().collect()).collect(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn write_trace(trace: &Trace, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_trace_to(trace, BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

pub fn read_trace(path: &Path) -> Result<Trace> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_trace_from(BufReader::new(file), path)
}

/// serde_json locates errors within the single line it was given; the
/// trace line number is reported separately.
fn json_reason(e: &serde_json::Error) -> String {
    let text = e.to_string();
    let msg = text.rfind(" at line ").map_or(text.as_str(), |i| &text[..i]);
    format!("{msg} (column {})", e.column())
}

/// Parses a trace; `origin` only labels error messages.
pub fn read_trace_from<R: Read>(reader: R, origin: &Path) -> Result<Trace> {
    let parse_err = |line: usize, reason: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        reason,
    };
    let mut lines = BufReader::new(reader).lines().enumerate();
    let (_, first) = lines
        .next()
        .ok_or_else(|| parse_err(1, "missing header".into()))?;
    let first = first.map_err(|e| Error::io(origin, e))?;
    let header: Header =
        serde_json::from_str(&first).map_err(|e| parse_err(1, format!("bad header: {}", json_reason(&e))))?;
    if header.version != TRACE_VERSION {
        return Err(parse_err(1, format!("unsupported version {}", header.version)));
    }
    if header.num_gpus == 0 || header.num_experts == 0 || header.num_layers == 0 {
        return Err(parse_err(1, "dimensions must be positive".into()));
    }
    let mut trace = Trace {
        num_gpus: header.num_gpus,
        num_experts: header.num_experts,
        num_layers: header.num_layers,
        rng: header.rng,
        seed: header.seed,
        batches: Vec::new(),
    };
    for (idx, line) in lines {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(origin, e))?;
        let rec: BatchIn =
            serde_json::from_str(&line).map_err(|e| parse_err(lineno, json_reason(&e)))?;
        if rec.batch_id != trace.batches.len() {
            return Err(parse_err(
                lineno,
                format!("expected batch_id {}, found {}", trace.batches.len(), rec.batch_id),
            ));
        }
        if !(0.0..=1.0).contains(&rec.alpha_used) {
            return Err(parse_err(lineno, format!("alpha_used {} outside [0, 1]", rec.alpha_used)));
        }
        if rec.layers.len() != trace.num_layers {
            return Err(parse_err(
                lineno,
                format!("expected {} layers, found {}", trace.num_layers, rec.layers.len()),
            ));
        }
        let mut layers = Vec::with_capacity(rec.layers.len());
        for (l, rows) in rec.layers.into_iter().enumerate() {
            if rows.len() != trace.num_gpus || rows.iter().any(|r| r.len() != trace.num_experts) {
                return Err(parse_err(
                    lineno,
                    format!(
                        "layer {l}: expected a {}x{} matrix",
                        trace.num_gpus, trace.num_experts
                    ),
                ));
            }
            let mut m = RoutingMatrix::zeros(trace.num_gpus, trace.num_experts);
            for (g, row) in rows.iter().enumerate() {
                for (e, &c) in row.iter().enumerate() {
                    if c < 0 {
                        return Err(parse_err(
                            lineno,
                            format!("layer {l}: negative count {c} at gpu {g}, expert {e}"),
                        ));
                    }
                    m.set(g, e, c as u64);
                }
            }
            layers.push(m);
        }
        let sums = layers[0].row_sums();
        if let Some(l) = layers.iter().position(|m| m.row_sums() != sums) {
            return Err(parse_err(
                lineno,
                format!("layer {l}: per-GPU token counts differ from layer 0"),
            ));
        }
        trace.batches.push(TraceBatch {
            alpha: rec.alpha_used,
            layers,
        });
    }
    Ok(trace)
}
