//! Cluster, model and schedule types shared by every other module.
//!
//! GPUs and experts are dense 0-based indices. Token identity is not
//! tracked: everything here is a count.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hardware description of the expert-parallel cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSpec {
    pub num_gpus: usize,
    /// Expert cache capacity per GPU for one layer.
    pub expert_slots_per_gpu: usize,
    /// GPU-to-GPU interconnect bandwidth, bytes/s.
    pub link_bandwidth: f64,
    /// Fixed cost of one all-to-all step, seconds.
    pub link_latency: f64,
    /// Host-to-GPU bandwidth used for expert fetches, bytes/s.
    pub pcie_bandwidth: f64,
    /// Sustained GPU throughput, FLOP/s.
    pub gpu_flops: f64,
}

impl ClusterSpec {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let field = |name: &str| format!("{prefix}{name}");
        if self.num_gpus < 1 {
            return Err(Error::invalid(field("num_gpus"), "must be at least 1"));
        }
        if self.expert_slots_per_gpu < 2 {
            return Err(Error::invalid(
                field("expert_slots_per_gpu"),
                "at least two experts must fit in GPU memory",
            ));
        }
        for (name, value) in [
            ("link_bandwidth", self.link_bandwidth),
            ("pcie_bandwidth", self.pcie_bandwidth),
            ("gpu_flops", self.gpu_flops),
        ] {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::invalid(field(name), "must be finite and > 0"));
            }
        }
        if !(self.link_latency.is_finite() && self.link_latency >= 0.0) {
            return Err(Error::invalid(field("link_latency"), "must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Shape of the MoE model being served.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Number of MoE blocks.
    pub num_layers: usize,
    /// Experts per MoE block.
    pub num_experts: usize,
    /// Hidden dimension (`m`).
    pub d_model: u64,
    /// Expert inner dimension (`p`).
    pub d_ff: u64,
    /// Bytes per weight element.
    pub dtype_bytes: u64,
    /// Attention and dense work between MoE blocks, seconds per layer.
    pub non_moe_layer_time: f64,
}

impl ModelSpec {
    /// Size of one two-matrix expert in bytes: `(m*p + p*m) * dtype`.
    pub fn expert_bytes(&self) -> u64 {
        2 * self.d_model * self.d_ff * self.dtype_bytes
    }

    /// Bytes carried per token in scatter and gather.
    pub fn token_bytes(&self) -> u64 {
        self.d_model * self.dtype_bytes
    }

    pub fn validate(&self, prefix: &str) -> Result<()> {
        let field = |name: &str| format!("{prefix}{name}");
        for (name, value) in [
            ("num_layers", self.num_layers as u64),
            ("num_experts", self.num_experts as u64),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("dtype_bytes", self.dtype_bytes),
        ] {
            if value == 0 {
                return Err(Error::invalid(field(name), "must be positive"));
            }
        }
        if !(self.non_moe_layer_time.is_finite() && self.non_moe_layer_time >= 0.0) {
            return Err(Error::invalid(
                field("non_moe_layer_time"),
                "must be finite and >= 0",
            ));
        }
        Ok(())
    }
}

/// Model presets. Layer and expert counts and expert sizes follow the
/// published model statistics; `(d_model, d_ff, dtype)` are chosen so that
/// `2 * d_model * d_ff * dtype` hits the stated expert size exactly
/// (18 MiB and 33 MiB).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelPreset {
    Switch128,
    Qwen,
}

impl ModelPreset {
    pub fn spec(self) -> ModelSpec {
        match self {
            // 2 * 768 * 3072 * 4 B = 18 MiB
            ModelPreset::Switch128 => ModelSpec {
                num_layers: 12,
                num_experts: 128,
                d_model: 768,
                d_ff: 3072,
                dtype_bytes: 4,
                non_moe_layer_time: 0.0,
            },
            // 2 * 2048 * 2112 * 4 B = 33 MiB
            ModelPreset::Qwen => ModelSpec {
                num_layers: 24,
                num_experts: 60,
                d_model: 2048,
                d_ff: 2112,
                dtype_bytes: 4,
                non_moe_layer_time: 0.0,
            },
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelPreset::Switch128 => "switch128",
            ModelPreset::Qwen => "qwen",
        }
    }
}

/// Per-source token-to-expert counts for one layer of one batch:
/// `counts[g][e]` tokens on GPU `g` routed to expert `e`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoutingMatrix {
    num_gpus: usize,
    num_experts: usize,
    counts: Vec<u64>,
}

impl RoutingMatrix {
    pub fn zeros(num_gpus: usize, num_experts: usize) -> Self {
        RoutingMatrix {
            num_gpus,
            num_experts,
            counts: vec![0; num_gpus * num_experts],
        }
    }

    pub fn from_rows(rows: Vec<Vec<u64>>) -> Result<Self> {
        let num_gpus = rows.len();
        let num_experts = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != num_experts) {
            return Err(Error::ShapeMismatch(
                "routing matrix rows have different lengths".into(),
            ));
        }
        Ok(RoutingMatrix {
            num_gpus,
            num_experts,
            counts: rows.into_iter().flatten().collect(),
        })
    }

    pub fn num_gpus(&self) -> usize {
        self.num_gpus
    }

    pub fn num_experts(&self) -> usize {
        self.num_experts
    }

    pub fn get(&self, gpu: usize, expert: usize) -> u64 {
        self.counts[gpu * self.num_experts + expert]
    }

    pub fn set(&mut self, gpu: usize, expert: usize, value: u64) {
        self.counts[gpu * self.num_experts + expert] = value;
    }

    pub fn row(&self, gpu: usize) -> &[u64] {
        &self.counts[gpu * self.num_experts..(gpu + 1) * self.num_experts]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u64]> {
        self.counts.chunks(self.num_experts.max(1)).take(self.num_gpus)
    }

    pub fn row_sums(&self) -> Vec<u64> {
        (0..self.num_gpus).map(|g| self.row(g).iter().sum()).collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Tokens per expert summed over all source GPUs.
    pub fn expert_totals(&self) -> Vec<u64> {
        let mut totals = vec![0; self.num_experts];
        for row in self.rows() {
            for (t, c) in totals.iter_mut().zip(row) {
                *t += c;
            }
        }
        totals
    }
}

/// `counts[from][e][to]`: tokens originating on GPU `from`, routed to expert
/// `e`, executed on GPU `to`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ScheduleTensor {
    num_gpus: usize,
    num_experts: usize,
    counts: Vec<u64>,
}

impl ScheduleTensor {
    pub fn zeros(num_gpus: usize, num_experts: usize) -> Self {
        ScheduleTensor {
            num_gpus,
            num_experts,
            counts: vec![0; num_gpus * num_experts * num_gpus],
        }
    }

    pub fn num_gpus(&self) -> usize {
        self.num_gpus
    }

    pub fn num_experts(&self) -> usize {
        self.num_experts
    }

    #[inline]
    fn index(&self, from: usize, expert: usize, to: usize) -> usize {
        (from * self.num_experts + expert) * self.num_gpus + to
    }

    pub fn get(&self, from: usize, expert: usize, to: usize) -> u64 {
        self.counts[self.index(from, expert, to)]
    }

    pub fn set(&mut self, from: usize, expert: usize, to: usize, value: u64) {
        let i = self.index(from, expert, to);
        self.counts[i] = value;
    }

    pub fn add(&mut self, from: usize, expert: usize, to: usize, value: u64) {
        let i = self.index(from, expert, to);
        self.counts[i] += value;
    }

    pub fn sub(&mut self, from: usize, expert: usize, to: usize, value: u64) {
        let i = self.index(from, expert, to);
        self.counts[i] -= value;
    }

    /// Tokens each GPU executes: sum over sources and experts.
    pub fn load_per_gpu(&self) -> Vec<u64> {
        let mut loads = vec![0; self.num_gpus];
        for fiber in self.counts.chunks(self.num_gpus.max(1)) {
            for (l, c) in loads.iter_mut().zip(fiber) {
                *l += c;
            }
        }
        loads
    }

    pub fn total_tokens(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Tokens of each expert executed on `gpu`, summed over sources.
    pub fn expert_work_on(&self, gpu: usize) -> Vec<u64> {
        (0..self.num_experts)
            .map(|e| (0..self.num_gpus).map(|from| self.get(from, e, gpu)).sum())
            .collect()
    }

    /// Non-zero cells as `(from, expert, to, count)`.
    pub fn nonzero(&self) -> impl Iterator<Item = (usize, usize, usize, u64)> + '_ {
        let (g, e) = (self.num_gpus, self.num_experts);
        self.counts
            .iter()
            .enumerate()
            .filter(|(_, c)| **c > 0)
            .map(move |(i, c)| (i / (e * g), (i / g) % e, i % g, *c))
    }

    /// Whether the schedule routes exactly the tokens of `m`: for every
    /// `(from, e)` the destinations sum to `m[from][e]`.
    pub fn validate_against(&self, m: &RoutingMatrix) -> Result<bool> {
        if m.num_gpus() != self.num_gpus || m.num_experts() != self.num_experts {
            return Err(Error::ShapeMismatch(format!(
                "schedule is {}x{} but routing matrix is {}x{}",
                self.num_gpus,
                self.num_experts,
                m.num_gpus(),
                m.num_experts()
            )));
        }
        for from in 0..self.num_gpus {
            for e in 0..self.num_experts {
                let start = self.index(from, e, 0);
                let routed: u64 = self.counts[start..start + self.num_gpus].iter().sum();
                if routed != m.get(from, e) {
                    return Ok(false);
                }
            }
        }
        Ok(true)
    }

    /// Bytes each GPU sends to and receives from other GPUs when every
    /// token carries `token_bytes`. Tokens that stay local cost nothing.
    pub fn exchange_bytes(&self, token_bytes: u64) -> (Vec<u64>, Vec<u64>) {
        let mut out = vec![0; self.num_gpus];
        let mut inb = vec![0; self.num_gpus];
        for (from, _, to, c) in self.nonzero() {
            if from != to {
                out[from] += c * token_bytes;
                inb[to] += c * token_bytes;
            }
        }
        (out, inb)
    }
}

/// Static expert-to-GPU home assignment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Placement {
    num_gpus: usize,
    home: Vec<usize>,
}

impl Placement {
    pub fn new(home: Vec<usize>, num_gpus: usize) -> Result<Self> {
        if let Some(e) = home.iter().position(|&g| g >= num_gpus) {
            return Err(Error::invalid(
                "placement",
                format!("expert {e} homed on GPU {} but only {num_gpus} GPUs", home[e]),
            ));
        }
        Ok(Placement { num_gpus, home })
    }

    pub fn num_gpus(&self) -> usize {
        self.num_gpus
    }

    pub fn num_experts(&self) -> usize {
        self.home.len()
    }

    pub fn home_of(&self, expert: usize) -> usize {
        self.home[expert]
    }

    pub fn homes(&self) -> &[usize] {
        &self.home
    }

    pub fn experts_on(&self, gpu: usize) -> Vec<usize> {
        (0..self.home.len()).filter(|&e| self.home[e] == gpu).collect()
    }

    pub fn experts_per_gpu(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_gpus];
        for &g in &self.home {
            counts[g] += 1;
        }
        counts
    }

    /// Checks that no GPU homes more experts than it has slots.
    pub fn check_capacity(&self, slots: usize) -> Result<()> {
        let counts = self.experts_per_gpu();
        match counts.iter().position(|&c| c > slots) {
            Some(g) => Err(Error::invalid(
                "cluster.expert_slots_per_gpu",
                format!(
                    "GPU {g} homes {} experts but has only {slots} slots",
                    counts[g]
                ),
            )),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn three_gpu_initial() -> ScheduleTensor {
        let mut s = ScheduleTensor::zeros(3, 3);
        for (from, row) in [[1, 1, 3], [1, 1, 3], [0, 2, 3]].iter().enumerate() {
            for (e, &c) in row.iter().enumerate() {
                s.set(from, e, e, c);
            }
        }
        s
    }

    #[test]
    fn zero_tensor_loads() {
        let s = ScheduleTensor::zeros(2, 2);
        assert_eq!(s.load_per_gpu(), vec![0, 0]);
        assert_eq!(s.total_tokens(), 0);
    }

    #[test]
    fn three_gpu_loads_and_total() {
        let s = three_gpu_initial();
        assert_eq!(s.load_per_gpu(), vec![2, 4, 9]);
        assert_eq!(s.total_tokens(), 15);
    }

    #[test]
    fn hand_summed_loads() {
        let mut s = ScheduleTensor::zeros(2, 2);
        s.set(0, 1, 1, 3);
        s.set(1, 1, 1, 2);
        assert_eq!(s.load_per_gpu(), vec![0, 5]);
    }

    #[test]
    fn single_entry_total() {
        let mut s = ScheduleTensor::zeros(3, 4);
        s.set(0, 0, 0, 7);
        assert_eq!(s.total_tokens(), 7);
        assert_eq!(s.nonzero().collect::<Vec<_>>(), vec![(0, 0, 0, 7)]);
    }

    #[test]
    fn validate_detects_missing_token() {
        let m = RoutingMatrix::from_rows(vec![vec![1, 1, 3], vec![1, 1, 3], vec![0, 2, 3]]).unwrap();
        let mut s = three_gpu_initial();
        assert!(s.validate_against(&m).unwrap());
        s.sub(2, 2, 2, 1);
        assert!(!s.validate_against(&m).unwrap());
    }

    #[test]
    fn validate_shape_mismatch_errors() {
        let m = RoutingMatrix::zeros(2, 3);
        let s = ScheduleTensor::zeros(3, 3);
        assert!(matches!(s.validate_against(&m), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn nonzero_decodes_indices() {
        let mut s = ScheduleTensor::zeros(3, 5);
        s.set(2, 4, 1, 9);
        s.set(0, 3, 2, 1);
        let cells: Vec<_> = s.nonzero().collect();
        assert_eq!(cells, vec![(0, 3, 2, 1), (2, 4, 1, 9)]);
    }

    #[test]
    fn exchange_bytes_skip_local_tokens() {
        let mut s = ScheduleTensor::zeros(2, 1);
        s.set(0, 0, 0, 5);
        s.set(0, 0, 1, 2);
        let (out, inb) = s.exchange_bytes(10);
        assert_eq!(out, vec![20, 0]);
        assert_eq!(inb, vec![0, 20]);
    }

    #[test]
    fn preset_expert_sizes() {
        assert_eq!(ModelPreset::Switch128.spec().expert_bytes(), 18 * 1024 * 1024);
        assert_eq!(ModelPreset::Qwen.spec().expert_bytes(), 33 * 1024 * 1024);
        assert_eq!(ModelPreset::Switch128.spec().num_layers, 12);
        assert_eq!(ModelPreset::Qwen.spec().num_experts, 60);
    }

    #[test]
    fn cluster_requires_two_slots() {
        let c = ClusterSpec {
            num_gpus: 1,
            expert_slots_per_gpu: 1,
            link_bandwidth: 1.0,
            link_latency: 0.0,
            pcie_bandwidth: 1.0,
            gpu_flops: 1.0,
        };
        let err = c.validate("cluster.").unwrap_err();
        assert!(err.to_string().contains("cluster.expert_slots_per_gpu"));
    }

    #[test]
    fn placement_capacity() {
        let p = Placement::new(vec![0, 0, 0, 1], 2).unwrap();
        assert_eq!(p.experts_per_gpu(), vec![3, 1]);
        assert!(p.check_capacity(3).is_ok());
        assert!(p.check_capacity(2).is_err());
        assert!(Placement::new(vec![0, 2], 2).is_err());
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        fn tensor() -> impl Strategy<Value = ScheduleTensor> {
            (1usize..5, 1usize..6).prop_flat_map(|(g, e)| {
                proptest::collection::vec(0u64..50, g * e * g).prop_map(move |v| {
                    let mut s = ScheduleTensor::zeros(g, e);
                    s.counts = v;
                    s
                })
            })
        }

        proptest! {
            #[test]
            fn loads_sum_to_total(s in tensor()) {
                prop_assert_eq!(s.load_per_gpu().iter().sum::<u64>(), s.total_tokens());
            }
        }
    }
}
