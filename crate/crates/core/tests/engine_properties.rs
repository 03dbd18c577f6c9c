use moesim::domain::{ClusterSpec, ModelPreset, Placement, RoutingMatrix};
use moesim::engine::{plan_gpu_execution, simulate_layer, CostModel, EventKind, SimFlags};
use moesim::metrics::wait_fraction;
use moesim::policies::{
    blocked_placement, estimate_token_threshold, round_robin_placement, Policy, SchedulerConfig,
};
use moesim::workload::{generate_trace, SkewMode, SkewSpec, WorkloadSpec};
use proptest::prelude::*;

const EPS: f64 = 1e-9;

/// One token costs one second; a fetch costs `load` seconds.
fn unit_cost(load: u64) -> CostModel {
    CostModel {
        d_model: 1,
        d_ff: 1,
        expert_bytes: load,
        token_bytes: 1,
        gpu_flops: 2.0,
        pcie_bandwidth: 1.0,
        metadata_time: 0.0,
    }
}

fn cluster(num_gpus: usize, slots: usize) -> ClusterSpec {
    ClusterSpec {
        num_gpus,
        expert_slots_per_gpu: slots,
        link_bandwidth: 1e9,
        link_latency: 1e-5,
        pcie_bandwidth: 1e9,
        gpu_flops: 1e12,
    }
}

fn flags(rebalancing: bool, async_loading: bool) -> SimFlags {
    SimFlags {
        rebalancing_enabled: rebalancing,
        async_loading_enabled: async_loading,
        include_scheduler_walltime: false,
    }
}

#[derive(Debug, Clone)]
struct LayerCase {
    m: RoutingMatrix,
    placement: Placement,
    slots: usize,
    policy: Policy,
    q: u64,
    cost: CostModel,
}

fn layer_case() -> impl Strategy<Value = LayerCase> {
    (1usize..=6, 1usize..=16).prop_flat_map(|(g, e)| {
        (
            prop::collection::vec(prop::collection::vec(0u64..400, e), g),
            any::<bool>(),
            0usize..3,
            prop::sample::select(Policy::ALL.to_vec()),
            1u64..200,
            1u64..5,
            1u64..4000,
        )
            .prop_map(move |(rows, blocked, extra, policy, q, dm, load)| {
                let placement = if blocked {
                    blocked_placement(e, g)
                } else {
                    round_robin_placement(e, g)
                };
                let per_gpu = placement.experts_per_gpu().into_iter().max().unwrap();
                LayerCase {
                    m: RoutingMatrix::from_rows(rows).unwrap(),
                    placement,
                    slots: per_gpu.max(2) + extra,
                    policy,
                    q,
                    cost: CostModel {
                        d_model: dm,
                        d_ff: 2 * dm,
                        expert_bytes: load,
                        token_bytes: 4 * dm,
                        gpu_flops: 1e6,
                        pcie_bandwidth: 1e5,
                        metadata_time: 1e-4,
                    },
                }
            })
    })
}

fn run_case(c: &LayerCase, f: SimFlags) -> moesim::LayerResult {
    let config = SchedulerConfig::new(c.policy, c.q);
    let cl = cluster(c.m.num_gpus(), c.slots);
    simulate_layer(&c.m, &c.placement, &config, f, &c.cost, &cl).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn timelines_partition_the_span(c in layer_case(), rb in any::<bool>(), asy in any::<bool>()) {
        let r = run_case(&c, flags(rb, asy));
        for t in &r.timelines {
            prop_assert!((t.span - r.layer_latency).abs() < EPS);
            let sum = t.breakdown().critical_path();
            prop_assert!((sum - t.span).abs() < EPS * t.span.max(1.0), "{sum} vs {}", t.span);
            let mut on_track: Vec<_> = t.events.iter().filter(|e| e.kind != EventKind::ExpertLoadAsync).collect();
            on_track.sort_by(|a, b| a.start.total_cmp(&b.start));
            for w in on_track.windows(2) {
                prop_assert!(w[0].end() <= w[1].start + EPS, "{:?} overlaps {:?}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn computed_tokens_match_schedule(c in layer_case(), rb in any::<bool>(), asy in any::<bool>()) {
        let r = run_case(&c, flags(rb, asy));
        let computed: u64 = r.timelines.iter()
            .flat_map(|t| &t.events)
            .filter(|e| e.kind == EventKind::Compute)
            .map(|e| e.tokens.unwrap())
            .sum();
        prop_assert_eq!(computed, r.schedule.total_tokens());
        prop_assert_eq!(computed, c.m.total());
    }

    #[test]
    fn barriers_are_shared(c in layer_case()) {
        let r = run_case(&c, flags(true, true));
        for t in &r.timelines {
            let scatter_end = t.events.iter().filter(|e| e.kind == EventKind::Scatter).map(|e| e.end()).next();
            if let Some(end) = scatter_end {
                prop_assert!((end - r.scatter_barrier).abs() < EPS);
            }
            let gather_start = t.events.iter().filter(|e| e.kind == EventKind::Gather).map(|e| e.start).next();
            if let Some(start) = gather_start {
                prop_assert!((start - r.gather_barrier).abs() < EPS);
            }
        }
    }

    #[test]
    fn async_loading_never_hurts(c in layer_case(), rb in any::<bool>()) {
        let a = run_case(&c, flags(rb, true));
        let s = run_case(&c, flags(rb, false));
        prop_assert!(a.layer_latency <= s.layer_latency + EPS);
        if a.expert_swaps == 0 {
            prop_assert_eq!(a.layer_latency, s.layer_latency);
        }
    }

    #[test]
    fn wait_fraction_in_unit_interval(c in layer_case()) {
        let r = run_case(&c, flags(true, true));
        for g in 0..c.m.num_gpus() {
            let f = wait_fraction(std::slice::from_ref(&r), g).unwrap();
            prop_assert!((0.0..=1.0).contains(&f));
        }
    }

    /// Fetches are fully hidden when there are enough slots and the work
    /// ahead of the k-th fetched expert is at least k load times.
    #[test]
    fn covered_fetches_never_stall(
        load in 1u64..50,
        resident in prop::collection::vec(0u64..200, 0..5),
        fetched in prop::collection::vec(0u64..200, 1..6),
    ) {
        let resident_work: u64 = resident.iter().sum();
        let covered = resident_work >= load && fetched.iter().all(|&n| n >= load);
        prop_assume!(covered);
        let cost = unit_cost(load);
        let homes: Vec<usize> = (0..resident.len()).collect();
        let mut work: Vec<(usize, u64)> = resident.iter().copied().enumerate().collect();
        work.extend(fetched.iter().enumerate().map(|(i, &n)| (100 + i, n)));
        let slots = (homes.len() + fetched.len()).max(2);
        let plan = plan_gpu_execution(&work, &homes, slots, flags(true, true), &cost).unwrap();
        prop_assert_eq!(plan.fetches, fetched.len());
        prop_assert_eq!(plan.fetch_wait, 0.0);
        prop_assert!(!plan.events.iter().any(|e| e.kind == EventKind::Wait));
    }
}

#[test]
fn rebalancing_reduces_max_wait_under_skew() {
    let model = ModelPreset::Switch128.spec();
    let cl = ClusterSpec {
        expert_slots_per_gpu: 18,
        link_bandwidth: 150e9,
        pcie_bandwidth: 16e9,
        gpu_flops: 14e12,
        ..cluster(8, 18)
    };
    let spec = WorkloadSpec {
        num_batches: 1,
        tokens_per_gpu_per_batch: 32768,
        skew: SkewSpec {
            alpha: 0.9,
            skewed_experts: (0..10).collect(),
            per_batch_mode: SkewMode::Fixed,
        },
        seed: 3,
    };
    let trace = generate_trace(&spec, &model, 8).unwrap();
    let q = estimate_token_threshold(cl.gpu_flops, model.dtype_bytes as f64, cl.pcie_bandwidth).unwrap();
    let mut config = SchedulerConfig::new(Policy::Harmoeny, q);
    config.placement = moesim::policies::PlacementKind::Blocked;
    let cost = CostModel::new(&cl, &model);
    let placement = blocked_placement(model.num_experts, 8);
    let max_wait = |rebalance: bool| {
        let r = simulate_layer(&trace.batches[0].layers[0], &placement, &config, flags(rebalance, true), &cost, &cl).unwrap();
        r.timelines.iter().map(|t| t.breakdown().wait).fold(0.0, f64::max)
    };
    assert!(max_wait(true) < max_wait(false));
}
