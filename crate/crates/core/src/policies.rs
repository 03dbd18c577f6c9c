//! Expert placement and token scheduling policies.
//!
//! The load-aware policy builds a naive schedule that sends every token to
//! its expert's home GPU and then greedily moves whole or partial
//! `(source, expert)` buckets from the most loaded GPU to the least loaded
//! one. Baselines: static round-robin placement, even split of every expert
//! over all GPUs, and a simplified popularity-driven placement (greedy LPT
//! bin packing on a profiled popularity vector).

use serde::{Deserialize, Serialize};

use crate::domain::{Placement, RoutingMatrix, ScheduleTensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    /// Initial assignment followed by token rebalancing.
    Harmoeny,
    /// Static round-robin expert placement, no rebalancing.
    RoundRobin,
    /// Every expert's tokens split evenly over all GPUs.
    EvenSplit,
    /// Greedy placement from a popularity profile, no rebalancing.
    Affinity,
}

impl Policy {
    pub const ALL: [Policy; 4] = [
        Policy::Harmoeny,
        Policy::RoundRobin,
        Policy::EvenSplit,
        Policy::Affinity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Policy::Harmoeny => "harmoeny",
            Policy::RoundRobin => "round_robin",
            Policy::EvenSplit => "even_split",
            Policy::Affinity => "affinity",
        }
    }

    pub fn parse(s: &str) -> Option<Policy> {
        Policy::ALL.into_iter().find(|p| p.name() == s)
    }
}

/// Static home layout for policies that do not derive their own.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PlacementKind {
    #[default]
    RoundRobin,
    Blocked,
}

impl PlacementKind {
    pub fn build(self, num_experts: usize, num_gpus: usize) -> Placement {
        match self {
            PlacementKind::RoundRobin => round_robin_placement(num_experts, num_gpus),
            PlacementKind::Blocked => blocked_placement(num_experts, num_gpus),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulerConfig {
    /// Minimum bucket size worth moving to another GPU (`q`).
    pub token_threshold_q: u64,
    pub policy: Policy,
    /// Home layout for `harmoeny` and `even_split`.
    #[serde(default)]
    pub placement: PlacementKind,
    /// Batches between affinity re-profiling; `None` profiles once.
    #[serde(default)]
    pub affinity_refresh_batches: Option<usize>,
}

impl SchedulerConfig {
    pub fn new(policy: Policy, token_threshold_q: u64) -> Self {
        SchedulerConfig {
            token_threshold_q,
            policy,
            placement: PlacementKind::RoundRobin,
            affinity_refresh_batches: None,
        }
    }
}

/// Cumulative per-expert token counts over a profiling window.
#[derive(Debug, Clone, PartialEq)]
pub struct PopularityProfile {
    pub counts: Vec<u64>,
    pub window_batches: usize,
}

impl PopularityProfile {
    pub fn from_layers<'a>(layers: impl IntoIterator<Item = &'a RoutingMatrix>) -> Self {
        let mut counts: Vec<u64> = Vec::new();
        let mut window_batches = 0;
        for m in layers {
            let totals = m.expert_totals();
            if counts.is_empty() {
                counts = totals;
            } else {
                for (c, t) in counts.iter_mut().zip(totals) {
                    *c += t;
                }
            }
            window_batches += 1;
        }
        PopularityProfile {
            counts,
            window_batches,
        }
    }
}

/// Expert `e` lives on GPU `e mod G`.
pub fn round_robin_placement(num_experts: usize, num_gpus: usize) -> Placement {
    let home = (0..num_experts).map(|e| e % num_gpus).collect();
    Placement::new(home, num_gpus).expect("e mod G < G")
}

/// Contiguous blocks of `ceil(E/G)` experts per GPU.
pub fn blocked_placement(num_experts: usize, num_gpus: usize) -> Placement {
    let block = num_experts.div_ceil(num_gpus).max(1);
    let home = (0..num_experts)
        .map(|e| (e / block).min(num_gpus - 1))
        .collect();
    Placement::new(home, num_gpus).expect("clamped to G - 1")
}

/// Sends every bucket `m[from][e]` to the home GPU of `e`.
pub fn initial_assign(m_all: &RoutingMatrix, placement: &Placement) -> Result<ScheduleTensor> {
    if placement.num_experts() != m_all.num_experts() || placement.num_gpus() != m_all.num_gpus() {
        return Err(Error::ShapeMismatch(format!(
            "placement covers {} experts on {} GPUs, routing is {}x{}",
            placement.num_experts(),
            placement.num_gpus(),
            m_all.num_gpus(),
            m_all.num_experts()
        )));
    }
    let mut s = ScheduleTensor::zeros(m_all.num_gpus(), m_all.num_experts());
    for from in 0..m_all.num_gpus() {
        for (e, &c) in m_all.row(from).iter().enumerate() {
            if c > 0 {
                s.set(from, e, placement.home_of(e), c);
            }
        }
    }
    Ok(s)
}

fn argmax(values: impl IntoIterator<Item = u64>) -> usize {
    let mut best = (0, None);
    for (i, v) in values.into_iter().enumerate() {
        if best.1.is_none_or(|b| v > b) {
            best = (i, Some(v));
        }
    }
    best.0
}

fn argmin(values: &[u64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v < values[best] {
            best = i;
        }
    }
    best
}

/// Greedy token rebalancing with threshold `q`.
///
/// While some GPU holds more than `floor(total / G)` tokens, take the most
/// loaded GPU, the source contributing most to it, and that source's
/// largest expert bucket there, and move as much of it as fits under the
/// average onto the least loaded GPU. Stops when the bucket is smaller than
/// `q` or the least loaded GPU cannot take `q` more tokens. Ties break to
/// the lowest index.
pub fn rebalance(s_initial: &ScheduleTensor, q: u64) -> Result<ScheduleTensor> {
    rebalance_counted(s_initial, q).map(|(s, _)| s)
}

/// [`rebalance`], also returning the number of transfers performed.
pub fn rebalance_counted(s_initial: &ScheduleTensor, q: u64) -> Result<(ScheduleTensor, usize)> {
    if q < 1 {
        return Err(Error::invalid("scheduler.token_threshold_q", "must be at least 1"));
    }
    let mut s = s_initial.clone();
    let num_gpus = s.num_gpus();
    let num_experts = s.num_experts();
    if num_gpus == 0 {
        return Ok((s, 0));
    }
    let t_avg = s.total_tokens() / num_gpus as u64;
    let mut t_g = s.load_per_gpu();
    let mut moves = 0;

    while t_g.iter().any(|&t| t > t_avg) {
        let g_max = argmax(t_g.iter().copied());
        let g_from = argmax(
            (0..num_gpus).map(|from| (0..num_experts).map(|e| s.get(from, e, g_max)).sum::<u64>()),
        );
        let e_max = argmax((0..num_experts).map(|e| s.get(g_from, e, g_max)));

        let t_move = s.get(g_from, e_max, g_max);
        if t_move < q {
            break;
        }
        let g_min = argmin(&t_g);
        if g_min == g_max || t_g[g_min] + q > t_avg {
            break;
        }
        let t_s = t_move.min(t_avg - t_g[g_min]);
        s.sub(g_from, e_max, g_max, t_s);
        s.add(g_from, e_max, g_min, t_s);
        t_g[g_max] -= t_s;
        t_g[g_min] += t_s;
        moves += 1;
    }
    Ok((s, moves))
}

/// Splits every bucket over all GPUs. Remainder tokens are dealt
/// round-robin per expert, starting at GPU 0, so each expert adds at most
/// one token of skew between any two GPUs.
pub fn even_split_assign(m_all: &RoutingMatrix, num_gpus: usize) -> Result<ScheduleTensor> {
    if m_all.num_gpus() != num_gpus {
        return Err(Error::ShapeMismatch(format!(
            "routing matrix has {} GPUs, expected {num_gpus}",
            m_all.num_gpus()
        )));
    }
    let g = num_gpus as u64;
    let mut s = ScheduleTensor::zeros(num_gpus, m_all.num_experts());
    let mut cursor = vec![0u64; m_all.num_experts()];
    for from in 0..num_gpus {
        for (e, &c) in m_all.row(from).iter().enumerate() {
            let (base, rem) = (c / g, c % g);
            for to in 0..num_gpus {
                let extra = (to as u64 + g - cursor[e]) % g < rem;
                s.set(from, e, to, base + u64::from(extra));
            }
            cursor[e] = (cursor[e] + rem) % g;
        }
    }
    Ok(s)
}

/// Greedy longest-processing-time placement: experts in descending
/// popularity go to the GPU with the least popularity mass that still has
/// a free slot. A simplified stand-in for integer-programming placement.
pub fn affinity_placement(
    profile: &PopularityProfile,
    num_gpus: usize,
    slots: usize,
) -> Result<Placement> {
    let num_experts = profile.counts.len();
    if num_gpus == 0 || num_experts > num_gpus * slots {
        return Err(Error::InfeasiblePlacement {
            experts: num_experts,
            gpus: num_gpus,
            slots,
        });
    }
    let mut order: Vec<usize> = (0..num_experts).collect();
    order.sort_by(|&a, &b| profile.counts[b].cmp(&profile.counts[a]).then(a.cmp(&b)));

    let mut mass = vec![0u64; num_gpus];
    let mut used = vec![0usize; num_gpus];
    let mut home = vec![0; num_experts];
    for e in order {
        let g = (0..num_gpus)
            .filter(|&g| used[g] < slots)
            .min_by_key(|&g| (mass[g], g))
            .expect("capacity checked above");
        home[e] = g;
        mass[g] += profile.counts[e];
        used[g] += 1;
    }
    Placement::new(home, num_gpus)
}

/// Raw lower bound `phi * d_type / (2 * beta)` on the token threshold.
pub fn token_threshold_bound(gpu_flops: f64, dtype_bytes: f64, pcie_bandwidth: f64) -> Result<f64> {
    for (name, v) in [
        ("gpu_flops", gpu_flops),
        ("dtype_bytes", dtype_bytes),
        ("pcie_bandwidth", pcie_bandwidth),
    ] {
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::invalid(name, "must be finite and > 0"));
        }
    }
    Ok(gpu_flops * dtype_bytes / (2.0 * pcie_bandwidth))
}

/// Token threshold `q = ceil(bound) + 1`, so that an expert's compute on
/// `q` tokens outlasts loading its weights.
pub fn estimate_token_threshold(gpu_flops: f64, dtype_bytes: f64, pcie_bandwidth: f64) -> Result<u64> {
    let bound = token_threshold_bound(gpu_flops, dtype_bytes, pcie_bandwidth)?;
    Ok((bound.ceil() as u64 + 1).max(1))
}
