//! Per-layer simulation of expert-parallel MoE execution.
//!
//! One MoE layer runs in six steps on every GPU: routing, metadata
//! exchange, token scheduling, scatter (all-to-all), expert processing with
//! expert fetches, and gather (all-to-all). Scatter and gather are barriers,
//! so every GPU spends the same wall time in a layer; whatever it does not
//! spend busy is recorded as `wait`.
//!
//! Within the processing step each GPU owns two resources: a compute track
//! and a single transfer channel for expert weights. Experts already
//! resident run first, then fetched ones, both by descending token count.
//! A fetch overwrites any slot whose expert has no remaining work.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::domain::{ClusterSpec, ModelSpec, Placement, RoutingMatrix, ScheduleTensor};
use crate::error::{Error, Result};
use crate::metrics::RunMetrics;
use crate::policies::{
    affinity_placement, even_split_assign, initial_assign, rebalance_counted,
    round_robin_placement, Policy, PopularityProfile, SchedulerConfig,
};
use crate::workload::Trace;

/// Size of the routing summary each GPU broadcasts before scheduling.
pub const METADATA_BYTES: f64 = 4096.0;

/// Timing parameters derived from the cluster and model.
#[derive(Debug, Clone, PartialEq)]
pub struct CostModel {
    pub d_model: u64,
    pub d_ff: u64,
    pub expert_bytes: u64,
    pub token_bytes: u64,
    pub gpu_flops: f64,
    pub pcie_bandwidth: f64,
    /// Duration of the metadata exchange, seconds.
    pub metadata_time: f64,
}

impl CostModel {
    pub fn new(cluster: &ClusterSpec, model: &ModelSpec) -> Self {
        CostModel {
            d_model: model.d_model,
            d_ff: model.d_ff,
            expert_bytes: model.expert_bytes(),
            token_bytes: model.token_bytes(),
            gpu_flops: cluster.gpu_flops,
            pcie_bandwidth: cluster.pcie_bandwidth,
            metadata_time: METADATA_BYTES / cluster.link_bandwidth + cluster.link_latency,
        }
    }

    /// FLOPs for `tokens` tokens through `x W1 W2`: `n p (2m-1) + n m (2p-1)`.
    pub fn expert_flops(&self, tokens: u64) -> f64 {
        let (n, m, p) = (tokens as f64, self.d_model as f64, self.d_ff as f64);
        n * p * (2.0 * m - 1.0) + n * m * (2.0 * p - 1.0)
    }

    pub fn expert_compute_time(&self, tokens: u64) -> f64 {
        self.expert_flops(tokens) / self.gpu_flops
    }

    /// Host-to-GPU weight transfer. Fetches overwrite a slot in place, so no
    /// write-back of the evicted expert is charged.
    pub fn expert_load_time(&self) -> f64 {
        self.expert_bytes as f64 / self.pcie_bandwidth
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimFlags {
    pub rebalancing_enabled: bool,
    pub async_loading_enabled: bool,
    /// Charge the host time actually spent scheduling. Makes runs
    /// non-reproducible.
    #[serde(default)]
    pub include_scheduler_walltime: bool,
}

impl Default for SimFlags {
    fn default() -> Self {
        SimFlags {
            rebalancing_enabled: true,
            async_loading_enabled: true,
            include_scheduler_walltime: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Schedule,
    Metadata,
    Scatter,
    Compute,
    ExpertLoadSync,
    /// Runs on the transfer channel and may overlap compute.
    ExpertLoadAsync,
    Gather,
    Wait,
}

impl EventKind {
    pub const ALL: [EventKind; 8] = [
        EventKind::Schedule,
        EventKind::Metadata,
        EventKind::Scatter,
        EventKind::Compute,
        EventKind::ExpertLoadSync,
        EventKind::ExpertLoadAsync,
        EventKind::Gather,
        EventKind::Wait,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EventKind::Schedule => "schedule",
            EventKind::Metadata => "metadata",
            EventKind::Scatter => "scatter",
            EventKind::Compute => "compute",
            EventKind::ExpertLoadSync => "expert_load_sync",
            EventKind::ExpertLoadAsync => "expert_load_async",
            EventKind::Gather => "gather",
            EventKind::Wait => "wait",
        }
    }

    /// Whether the event occupies the GPU's critical path.
    pub fn on_critical_path(self) -> bool {
        self != EventKind::ExpertLoadAsync
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub kind: EventKind,
    pub start: f64,
    pub duration: f64,
    pub expert: Option<usize>,
    pub tokens: Option<u64>,
}

impl Event {
    fn new(kind: EventKind, start: f64, duration: f64) -> Self {
        Event {
            kind,
            start,
            duration,
            expert: None,
            tokens: None,
        }
    }

    pub fn end(&self) -> f64 {
        self.start + self.duration
    }

    fn shifted(mut self, by: f64) -> Self {
        self.start += by;
        self
    }
}

/// Seconds per event category.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Breakdown {
    pub schedule: f64,
    pub metadata: f64,
    pub scatter: f64,
    pub compute: f64,
    pub expert_load_sync: f64,
    pub expert_load_async: f64,
    pub gather: f64,
    pub wait: f64,
}

impl Breakdown {
    pub fn get(&self, kind: EventKind) -> f64 {
        match kind {
            EventKind::Schedule => self.schedule,
            EventKind::Metadata => self.metadata,
            EventKind::Scatter => self.scatter,
            EventKind::Compute => self.compute,
            EventKind::ExpertLoadSync => self.expert_load_sync,
            EventKind::ExpertLoadAsync => self.expert_load_async,
            EventKind::Gather => self.gather,
            EventKind::Wait => self.wait,
        }
    }

    fn slot(&mut self, kind: EventKind) -> &mut f64 {
        match kind {
            EventKind::Schedule => &mut self.schedule,
            EventKind::Metadata => &mut self.metadata,
            EventKind::Scatter => &mut self.scatter,
            EventKind::Compute => &mut self.compute,
            EventKind::ExpertLoadSync => &mut self.expert_load_sync,
            EventKind::ExpertLoadAsync => &mut self.expert_load_async,
            EventKind::Gather => &mut self.gather,
            EventKind::Wait => &mut self.wait,
        }
    }

    pub fn add_event(&mut self, e: &Event) {
        *self.slot(e.kind) += e.duration;
    }

    pub fn accumulate(&mut self, other: &Breakdown) {
        for kind in EventKind::ALL {
            *self.slot(kind) += other.get(kind);
        }
    }

    /// Sum of the categories that partition wall time (async loads excluded).
    pub fn critical_path(&self) -> f64 {
        EventKind::ALL
            .into_iter()
            .filter(|k| k.on_critical_path())
            .map(|k| self.get(k))
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GpuTimeline {
    pub gpu: usize,
    /// Sorted by start time, then category.
    pub events: Vec<Event>,
    pub span: f64,
}

impl GpuTimeline {
    pub fn breakdown(&self) -> Breakdown {
        let mut b = Breakdown::default();
        for e in &self.events {
            b.add_event(e);
        }
        b
    }

    pub fn fetches(&self) -> usize {
        self.events
            .iter()
            .filter(|e| matches!(e.kind, EventKind::ExpertLoadSync | EventKind::ExpertLoadAsync))
            .count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerResult {
    /// Barrier-to-barrier latency of the layer (max span over GPUs).
    pub layer_latency: f64,
    pub timelines: Vec<GpuTimeline>,
    /// Experts fetched across all GPUs.
    pub expert_swaps: usize,
    /// Tokens executed per GPU.
    pub gpu_loads: Vec<u64>,
    /// The executed schedule.
    pub schedule: ScheduleTensor,
    /// Instant at which every GPU leaves the scatter barrier.
    pub scatter_barrier: f64,
    /// Instant at which every GPU enters the gather exchange.
    pub gather_barrier: f64,
}

/// Duration of one all-to-all: fixed latency plus the busiest GPU's
/// larger direction over the link.
pub fn all_to_all_time(bytes_out: &[u64], bytes_in: &[u64], cluster: &ClusterSpec) -> f64 {
    let busiest = bytes_out
        .iter()
        .zip(bytes_in)
        .map(|(&o, &i)| o.max(i))
        .max()
        .unwrap_or(0);
    cluster.link_latency + busiest as f64 / cluster.link_bandwidth
}

/// Execution plan for one GPU's processing step, times relative to the
/// end of the scatter barrier.
#[derive(Debug, Clone, PartialEq)]
pub struct GpuPlan {
    /// Experts in execution order.
    pub order: Vec<usize>,
    pub events: Vec<Event>,
    /// When the compute track goes idle.
    pub end: f64,
    pub fetches: usize,
    /// Stall time on the compute track waiting for weights.
    pub fetch_wait: f64,
}

/// Orders and times the experts one GPU must run.
///
/// `work` lists `(expert, tokens)`; zero-token entries are ignored.
/// `resident` are experts already in memory at the start of the layer.
pub fn plan_gpu_execution(
    work: &[(usize, u64)],
    resident: &[usize],
    slots: usize,
    flags: SimFlags,
    cost: &CostModel,
) -> Result<GpuPlan> {
    if slots < 2 {
        return Err(Error::invalid("cluster.expert_slots_per_gpu", "must be at least 2"));
    }
    if resident.len() > slots {
        return Err(Error::invalid(
            "cluster.expert_slots_per_gpu",
            format!("{} resident experts exceed {slots} slots", resident.len()),
        ));
    }

    let is_resident = |e: usize| resident.contains(&e);
    let mut hot: Vec<(usize, u64)> = work.iter().copied().filter(|&(_, n)| n > 0).collect();
    hot.sort_by(|a, b| {
        is_resident(b.0)
            .cmp(&is_resident(a.0))
            .then(b.1.cmp(&a.1))
            .then(a.0.cmp(&b.0))
    });

    // Times at which a slot can be overwritten. Free slots and residents
    // with no work this layer are available immediately.
    let mut slot_free: Vec<f64> = Vec::with_capacity(slots);
    slot_free.resize(slots - resident.len(), 0.0);
    for &e in resident {
        if !hot.iter().any(|&(x, _)| x == e) {
            slot_free.push(0.0);
        }
    }

    let load = cost.expert_load_time();
    let mut events = Vec::new();
    let mut track = 0.0_f64;
    let mut channel = 0.0_f64;
    let mut fetches = 0;
    let mut fetch_wait = 0.0;

    for &(expert, tokens) in &hot {
        let mut ready = track;
        if !is_resident(expert) {
            let (idx, avail) = slot_free
                .iter()
                .copied()
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .ok_or_else(|| Error::Invariant(format!("no overwritable slot for expert {expert}")))?;
            slot_free.swap_remove(idx);
            let (kind, start) = if flags.async_loading_enabled {
                (EventKind::ExpertLoadAsync, channel.max(avail))
            } else {
                (EventKind::ExpertLoadSync, track.max(avail))
            };
            if !flags.async_loading_enabled && start > track {
                events.push(Event::new(EventKind::Wait, track, start - track));
                fetch_wait += start - track;
            }
            let mut ev = Event::new(kind, start, load);
            ev.expert = Some(expert);
            events.push(ev);
            channel = start + load;
            if !flags.async_loading_enabled {
                track = channel;
            }
            ready = ready.max(channel);
            fetches += 1;
        }
        if ready > track {
            events.push(Event::new(EventKind::Wait, track, ready - track));
            fetch_wait += ready - track;
        }
        let duration = cost.expert_compute_time(tokens);
        let mut ev = Event::new(EventKind::Compute, ready, duration);
        ev.expert = Some(expert);
        ev.tokens = Some(tokens);
        events.push(ev);
        track = ready + duration;
        slot_free.push(track);
    }

    Ok(GpuPlan {
        order: hot.iter().map(|&(e, _)| e).collect(),
        events,
        end: track,
        fetches,
        fetch_wait,
    })
}

/// Builds the executed schedule for one layer according to the policy.
fn build_schedule(
    m_all: &RoutingMatrix,
    placement: &Placement,
    config: &SchedulerConfig,
    flags: SimFlags,
) -> Result<ScheduleTensor> {
    match config.policy {
        Policy::Harmoeny => {
            let initial = initial_assign(m_all, placement)?;
            if flags.rebalancing_enabled {
                Ok(rebalance_counted(&initial, config.token_threshold_q)?.0)
            } else {
                Ok(initial)
            }
        }
        Policy::RoundRobin | Policy::Affinity => initial_assign(m_all, placement),
        Policy::EvenSplit => even_split_assign(m_all, m_all.num_gpus()),
    }
}

/// Simulates one MoE layer across the cluster.
///
/// The metadata exchange is only paid by the rebalancing policy; the
/// baselines schedule from local information. With a single GPU there is
/// no all-to-all.
pub fn simulate_layer(
    m_all: &RoutingMatrix,
    placement: &Placement,
    config: &SchedulerConfig,
    flags: SimFlags,
    cost: &CostModel,
    cluster: &ClusterSpec,
) -> Result<LayerResult> {
    let num_gpus = cluster.num_gpus;
    if m_all.num_gpus() != num_gpus || placement.num_gpus() != num_gpus {
        return Err(Error::ShapeMismatch(format!(
            "cluster has {num_gpus} GPUs, routing has {}, placement has {}",
            m_all.num_gpus(),
            placement.num_gpus()
        )));
    }
    if placement.num_experts() != m_all.num_experts() {
        return Err(Error::ShapeMismatch(format!(
            "placement covers {} experts, routing has {}",
            placement.num_experts(),
            m_all.num_experts()
        )));
    }
    placement.check_capacity(cluster.expert_slots_per_gpu)?;

    let metadata = if config.policy == Policy::Harmoeny {
        cost.metadata_time
    } else {
        0.0
    };

    let started = Instant::now();
    let schedule = build_schedule(m_all, placement, config, flags)?;
    let scheduling = if flags.include_scheduler_walltime {
        started.elapsed().as_secs_f64()
    } else {
        0.0
    };

    let (bytes_out, bytes_in) = schedule.exchange_bytes(cost.token_bytes);
    let (scatter, gather) = if num_gpus > 1 {
        (
            all_to_all_time(&bytes_out, &bytes_in, cluster),
            // results travel the reverse way
            all_to_all_time(&bytes_in, &bytes_out, cluster),
        )
    } else {
        (0.0, 0.0)
    };

    let plans = (0..num_gpus)
        .map(|g| {
            let work: Vec<(usize, u64)> = schedule
                .expert_work_on(g)
                .into_iter()
                .enumerate()
                .filter(|&(_, n)| n > 0)
                .collect();
            plan_gpu_execution(
                &work,
                &placement.experts_on(g),
                cluster.expert_slots_per_gpu,
                flags,
                cost,
            )
        })
        .collect::<Result<Vec<_>>>()?;

    let scatter_start = metadata + scheduling;
    let scatter_barrier = scatter_start + scatter;
    let processing = plans.iter().map(|p| p.end).fold(0.0, f64::max);
    let gather_barrier = scatter_barrier + processing;
    let span = gather_barrier + gather;

    let mut timelines = Vec::with_capacity(num_gpus);
    let mut expert_swaps = 0;
    for (gpu, plan) in plans.into_iter().enumerate() {
        let mut events = Vec::new();
        let mut push = |kind, start, duration: f64| {
            if duration > 0.0 {
                events.push(Event::new(kind, start, duration));
            }
        };
        push(EventKind::Metadata, 0.0, metadata);
        push(EventKind::Schedule, metadata, scheduling);
        push(EventKind::Scatter, scatter_start, scatter);
        push(
            EventKind::Wait,
            scatter_barrier + plan.end,
            processing - plan.end,
        );
        push(EventKind::Gather, gather_barrier, gather);
        events.extend(plan.events.into_iter().map(|e| e.shifted(scatter_barrier)));
        events.sort_by(|a, b| {
            a.start
                .total_cmp(&b.start)
                .then((a.kind as u8).cmp(&(b.kind as u8)))
        });
        expert_swaps += plan.fetches;
        timelines.push(GpuTimeline { gpu, events, span });
    }

    Ok(LayerResult {
        layer_latency: span,
        timelines,
        expert_swaps,
        gpu_loads: schedule.load_per_gpu(),
        schedule,
        scatter_barrier,
        gather_barrier,
    })
}

/// Picks the home layout each layer uses under the configured policy.
struct PlacementPlanner<'a> {
    config: &'a SchedulerConfig,
    num_gpus: usize,
    num_experts: usize,
    slots: usize,
    /// Per-layer placement for the affinity policy.
    affinity: Vec<Placement>,
}

impl<'a> PlacementPlanner<'a> {
    fn new(config: &'a SchedulerConfig, trace: &Trace, slots: usize) -> Self {
        PlacementPlanner {
            config,
            num_gpus: trace.num_gpus,
            num_experts: trace.num_experts,
            slots,
            affinity: Vec::new(),
        }
    }

    /// Refreshes affinity placements before `batch` runs. The first batch
    /// doubles as the held-out profiling sample; afterwards placements are
    /// rebuilt every `affinity_refresh_batches` from the preceding window.
    fn before_batch(&mut self, trace: &Trace, batch: usize) -> Result<()> {
        if self.config.policy != Policy::Affinity {
            return Ok(());
        }
        let window = match (batch, self.config.affinity_refresh_batches) {
            (0, _) => 0..1,
            (b, Some(n)) if n > 0 && b % n == 0 => b - n..b,
            _ => return Ok(()),
        };
        self.affinity = (0..trace.num_layers)
            .map(|layer| {
                let profile = PopularityProfile::from_layers(
                    trace.batches[window.clone()].iter().map(|b| &b.layers[layer]),
                );
                affinity_placement(&profile, self.num_gpus, self.slots)
            })
            .collect::<Result<_>>()?;
        Ok(())
    }

    fn placement(&self, layer: usize) -> Placement {
        match self.config.policy {
            Policy::RoundRobin => round_robin_placement(self.num_experts, self.num_gpus),
            Policy::Harmoeny | Policy::EvenSplit => {
                self.config.placement.build(self.num_experts, self.num_gpus)
            }
            Policy::Affinity => self.affinity[layer].clone(),
        }
    }
}

/// Runs every batch of `trace` through every layer, sequentially.
pub fn simulate_run(
    trace: &Trace,
    model: &ModelSpec,
    cluster: &ClusterSpec,
    config: &SchedulerConfig,
    flags: SimFlags,
) -> Result<RunMetrics> {
    simulate_run_with_cost(trace, model, cluster, config, flags, &CostModel::new(cluster, model))
}

pub fn simulate_run_with_cost(
    trace: &Trace,
    model: &ModelSpec,
    cluster: &ClusterSpec,
    config: &SchedulerConfig,
    flags: SimFlags,
    cost: &CostModel,
) -> Result<RunMetrics> {
    if trace.num_gpus != cluster.num_gpus {
        return Err(Error::ShapeMismatch(format!(
            "trace has {} GPUs, cluster has {}",
            trace.num_gpus, cluster.num_gpus
        )));
    }
    if trace.num_experts != model.num_experts || trace.num_layers != model.num_layers {
        return Err(Error::ShapeMismatch(format!(
            "trace is {} layers x {} experts, model is {} x {}",
            trace.num_layers, trace.num_experts, model.num_layers, model.num_experts
        )));
    }
    if config.token_threshold_q < 1 {
        return Err(Error::invalid("scheduler.token_threshold_q", "must be at least 1"));
    }

    let mut metrics = RunMetrics::new(cluster.num_gpus, model.num_layers);
    let mut planner = PlacementPlanner::new(config, trace, cluster.expert_slots_per_gpu);
    let placements: Vec<Placement> = if config.policy == Policy::Affinity {
        Vec::new()
    } else {
        (0..model.num_layers).map(|l| planner.placement(l)).collect()
    };

    for (b, batch) in trace.batches.iter().enumerate() {
        planner.before_batch(trace, b)?;
        let mut latency = 0.0;
        let mut swaps = 0;
        let mut layer_latencies = Vec::with_capacity(model.num_layers);
        let mut gpu_loads = Vec::with_capacity(model.num_layers);
        let mut expert_loads = Vec::with_capacity(model.num_layers);
        for (layer, m_all) in batch.layers.iter().enumerate() {
            let placement = match placements.get(layer) {
                Some(p) => p.clone(),
                None => planner.placement(layer),
            };
            let result = simulate_layer(m_all, &placement, config, flags, cost, cluster)?;
            for tl in &result.timelines {
                metrics.per_layer_breakdown[layer][tl.gpu].accumulate(&tl.breakdown());
                metrics.per_gpu_span[tl.gpu] += tl.span;
            }
            latency += result.layer_latency + model.non_moe_layer_time;
            swaps += result.expert_swaps as u64;
            layer_latencies.push(result.layer_latency);
            gpu_loads.push(result.gpu_loads);
            expert_loads.push(m_all.expert_totals());
        }
        metrics.push_batch(batch.alpha, batch.tokens(), latency, swaps, layer_latencies);
        metrics.per_gpu_token_loads.push(gpu_loads);
        metrics.per_expert_token_counts.push(expert_loads);
    }
    Ok(metrics)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policies::PlacementKind;

    fn unit_cost(load: f64) -> CostModel {
        // m = p = 1: flops(n) = 2n, so 1 token = 1 s at 2 FLOP/s
        CostModel {
            d_model: 1,
            d_ff: 1,
            expert_bytes: 1,
            token_bytes: 1,
            gpu_flops: 2.0,
            pcie_bandwidth: 1.0 / load,
            metadata_time: 0.0,
        }
    }

    fn cluster(g: usize, slots: usize) -> ClusterSpec {
        ClusterSpec {
            num_gpus: g,
            expert_slots_per_gpu: slots,
            link_bandwidth: 1e9,
            link_latency: 0.0,
            pcie_bandwidth: 1e9,
            gpu_flops: 1e12,
        }
    }

    #[test]
    fn flops_formula() {
        let c = CostModel {
            d_model: 3,
            d_ff: 5,
            ..unit_cost(1.0)
        };
        // 2 * 5 * 5 + 2 * 3 * 9
        assert_eq!(c.expert_flops(2), 104.0);
    }

    #[test]
    fn all_to_all_examples() {
        let mut c = cluster(2, 2);
        c.link_latency = 1e-5;
        assert_eq!(all_to_all_time(&[0, 0], &[0, 0], &c), 1e-5);
        c.link_latency = 0.0;
        assert!((all_to_all_time(&[1_000_000, 0], &[0, 1_000_000], &c) - 1e-3).abs() < 1e-15);
        c.link_latency = 1e-5;
        let t = all_to_all_time(&[2_000_000; 2], &[2_000_000; 2], &c);
        assert!((t - (1e-5 + 2e-3)).abs() < 1e-15);
    }

    #[test]
    fn resident_only_plan() {
        let cost = unit_cost(1.0);
        let plan = plan_gpu_execution(&[(0, 100)], &[0], 2, SimFlags::default(), &cost).unwrap();
        assert_eq!(plan.events.len(), 1);
        assert_eq!(plan.events[0].kind, EventKind::Compute);
        assert_eq!(plan.fetches, 0);
        assert_eq!(plan.fetch_wait, 0.0);
        assert_eq!(plan.end, 100.0);
    }

    #[test]
    fn async_fetch_masked_by_compute() {
        let n = 10;
        let cost = unit_cost(4.0);
        assert!(cost.expert_compute_time(n) >= cost.expert_load_time());
        let plan =
            plan_gpu_execution(&[(0, n), (2, n)], &[0, 1], 2, SimFlags::default(), &cost).unwrap();
        assert_eq!(plan.order, vec![0, 2]);
        let fetch = plan
            .events
            .iter()
            .find(|e| e.kind == EventKind::ExpertLoadAsync)
            .unwrap();
        assert_eq!(fetch.start, 0.0);
        assert!(fetch.end() <= 10.0);
        assert_eq!(plan.fetch_wait, 0.0);
        assert_eq!(plan.end, 20.0);
    }

    #[test]
    fn sync_fetch_serializes() {
        let n = 10;
        let cost = unit_cost(4.0);
        let flags = SimFlags {
            async_loading_enabled: false,
            ..SimFlags::default()
        };
        let plan = plan_gpu_execution(&[(0, n), (2, n)], &[0, 1], 2, flags, &cost).unwrap();
        assert_eq!(plan.end, 10.0 + 4.0 + 10.0);
        let sync = plan
            .events
            .iter()
            .find(|e| e.kind == EventKind::ExpertLoadSync)
            .unwrap();
        assert_eq!(sync.start, 10.0);
    }

    #[test]
    fn full_slots_wait_for_first_finisher() {
        // both slots hold busy residents: the fetch can only start once
        // expert 0 finishes
        let cost = unit_cost(3.0);
        let plan =
            plan_gpu_execution(&[(0, 5), (1, 2), (2, 4)], &[0, 1], 2, SimFlags::default(), &cost)
                .unwrap();
        assert_eq!(plan.order, vec![0, 1, 2]);
        let fetch = plan
            .events
            .iter()
            .find(|e| e.kind == EventKind::ExpertLoadAsync)
            .unwrap();
        assert_eq!(fetch.start, 5.0);
        // compute of 1 ends at 7, fetch ends at 8
        assert_eq!(plan.fetch_wait, 1.0);
        assert_eq!(plan.end, 12.0);
    }

    #[test]
    fn plan_rejects_overfull_residency() {
        let cost = unit_cost(1.0);
        assert!(plan_gpu_execution(&[], &[0, 1, 2], 2, SimFlags::default(), &cost).is_err());
        assert!(plan_gpu_execution(&[], &[], 1, SimFlags::default(), &cost).is_err());
    }

    fn three_gpu_skew() -> (RoutingMatrix, Placement) {
        (
            RoutingMatrix::from_rows(vec![vec![1, 1, 3], vec![1, 1, 3], vec![0, 2, 3]]).unwrap(),
            Placement::new(vec![0, 1, 2], 3).unwrap(),
        )
    }

    fn partition_holds(r: &LayerResult) {
        for tl in &r.timelines {
            let b = tl.breakdown();
            assert!((b.critical_path() - tl.span).abs() < 1e-9, "gpu {}", tl.gpu);
        }
    }

    #[test]
    fn single_gpu_layer() {
        let m = RoutingMatrix::from_rows(vec![vec![3, 2]]).unwrap();
        let p = Placement::new(vec![0, 0], 1).unwrap();
        let mut cost = unit_cost(1.0);
        cost.metadata_time = 0.5;
        let cfg = SchedulerConfig::new(Policy::Harmoeny, 1);
        let r = simulate_layer(&m, &p, &cfg, SimFlags::default(), &cost, &cluster(1, 2)).unwrap();
        assert_eq!(r.layer_latency, 0.5 + 5.0);
        assert_eq!(r.timelines[0].breakdown().wait, 0.0);
        partition_holds(&r);
    }

    #[test]
    fn three_gpu_with_and_without_rebalancing() {
        let (m, p) = three_gpu_skew();
        let cost = unit_cost(0.5);
        let cl = cluster(3, 3);
        let cfg = SchedulerConfig::new(Policy::Harmoeny, 1);

        let on = simulate_layer(&m, &p, &cfg, SimFlags::default(), &cost, &cl).unwrap();
        assert_eq!(on.gpu_loads, vec![5, 5, 5]);
        for tl in &on.timelines {
            let b = tl.breakdown();
            assert_eq!(b.compute, 5.0);
            assert!(b.wait.abs() < 1e-12, "gpu {} waits {}", tl.gpu, b.wait);
        }
        assert_eq!(on.expert_swaps, 2);
        partition_holds(&on);

        let flags = SimFlags {
            rebalancing_enabled: false,
            ..SimFlags::default()
        };
        let off = simulate_layer(&m, &p, &cfg, flags, &cost, &cl).unwrap();
        let waits: Vec<f64> = off.timelines.iter().map(|t| t.breakdown().wait).collect();
        assert_eq!(waits, vec![7.0, 5.0, 0.0]);
        partition_holds(&off);
    }

    #[test]
    fn empty_layer_costs_metadata_and_two_latencies() {
        let m = RoutingMatrix::zeros(2, 4);
        let p = round_robin_placement(4, 2);
        let mut cl = cluster(2, 2);
        cl.link_latency = 1e-4;
        let cost = CostModel::new(&cl, &crate::domain::ModelPreset::Switch128.spec());
        let cfg = SchedulerConfig::new(Policy::Harmoeny, 1);
        let r = simulate_layer(&m, &p, &cfg, SimFlags::default(), &cost, &cl).unwrap();
        assert!((r.layer_latency - (cost.metadata_time + 2e-4)).abs() < 1e-15);
    }

    #[test]
    fn barriers_are_shared() {
        let (m, p) = three_gpu_skew();
        let cfg = SchedulerConfig {
            placement: PlacementKind::RoundRobin,
            ..SchedulerConfig::new(Policy::Harmoeny, 1)
        };
        let r = simulate_layer(&m, &p, &cfg, SimFlags::default(), &unit_cost(0.5), &cluster(3, 3))
            .unwrap();
        for tl in &r.timelines {
            let scatter_end = tl
                .events
                .iter()
                .filter(|e| e.kind == EventKind::Scatter)
                .map(Event::end)
                .next()
                .unwrap_or(r.scatter_barrier);
            assert_eq!(scatter_end, r.scatter_barrier);
            assert_eq!(tl.span, r.layer_latency);
        }
    }
}
