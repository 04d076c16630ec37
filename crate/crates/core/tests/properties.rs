mod common;

use std::collections::HashSet;

use prefix_attn::forest::Dims;
use prefix_attn::metrics::{count_kv_reads, sharing_fraction, weighted_avg_sharing, Mode, TrafficReport};
use prefix_attn::scheduler::{
    greedy_assign, identity_plan, is_exact_split, lower_bound, makespan, slice_ranges, tasks_from_forest,
};
use prefix_attn::workloads::{gen_full_tree, gen_shared_ratio, gen_two_level};
use prefix_attn::{
    divide_and_schedule, execute, naive_attention, por, AffineCost, BlockPool, CostEstimator, CostTable, NodeId,
    PartialResult, RequestId, Task,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::any_forest;

const DIMS: Dims = Dims { h_q: 2, h_kv: 1, d: 4 };

fn partial(n_q: usize, h: usize, d: usize, vals: &[(f64, f64, f64)]) -> PartialResult<f64> {
    let out = (0..n_q * h * d).map(|i| vals[i % vals.len()].0).collect();
    let max = (0..n_q * h).map(|i| vals[i % vals.len()].1).collect();
    let sum = (0..n_q * h).map(|i| vals[i % vals.len()].2).collect();
    PartialResult::from_parts(n_q, h, d, out, max, sum).unwrap()
}

fn task_list() -> impl Strategy<Value = Vec<Task>> {
    prop::collection::vec((1usize..=40, 1usize..=20_000), 1..=6).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (q, n))| Task::new(NodeId(i + 1), q, n))
            .collect()
    })
}

fn affine() -> impl Strategy<Value = AffineCost> {
    (0.0f64..0.1, 0.0f64..1e-4, 0.0f64..1e-6).prop_map(|(alpha, beta, gamma)| AffineCost { alpha, beta, gamma })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_forests_are_valid_and_flatten_bijectively(seed in any::<u64>()) {
        let (f, q) = any_forest(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert!(f.validate().is_empty());
        let mut seen = HashSet::new();
        for n in f.kv_nodes() {
            for t in 0..n.len() {
                let k = f.flat_index(n.id(), t).unwrap();
                prop_assert!(k < f.total_len());
                prop_assert!(seen.insert(k));
            }
            prop_assert!(f.flat_index(n.id(), n.len()).is_none());
        }
        prop_assert_eq!(seen.len(), f.total_len());
        for r in 0..q.bs() {
            let r = RequestId(r);
            let path = f.prefix_path(r).unwrap();
            for pair in path.windows(2) {
                prop_assert_eq!(f.node(pair[1]).unwrap().parent(), pair[0]);
            }
            for &n in path {
                prop_assert!(f.node_query_set(n).unwrap().contains(&r));
            }
        }
    }

    #[test]
    fn por_is_commutative(
        a in prop::collection::vec((-3.0f64..3.0, -40.0f64..40.0, 1.0f64..30.0), 1..6),
        b in prop::collection::vec((-3.0f64..3.0, -40.0f64..40.0, 1.0f64..30.0), 1..6),
    ) {
        let (x, y) = (partial(2, 2, 3, &a), partial(2, 2, 3, &b));
        let (xy, yx) = (por(&x, &y).unwrap(), por(&y, &x).unwrap());
        prop_assert_eq!(xy.max_slice(), yx.max_slice());
        for (p, q) in xy.out_slice().iter().zip(yx.out_slice()) {
            prop_assert!((p - q).abs() <= 1e-12 * q.abs().max(1.0));
        }
        for (p, q) in xy.sum_slice().iter().zip(yx.sum_slice()) {
            prop_assert!((p - q).abs() <= 1e-12 * q.abs());
        }
    }

    #[test]
    fn greedy_makespan_ignores_input_order(
        costs in prop::collection::vec(0.0f64..10.0, 1..30),
        m in 1usize..8,
        rot in 0usize..30,
    ) {
        let base = greedy_assign(&costs, m).unwrap();
        let mut shuffled = costs.clone();
        shuffled.rotate_left(rot % costs.len());
        shuffled.reverse();
        let other = greedy_assign(&shuffled, m).unwrap();
        prop_assert_eq!(base.makespan(), other.makespan());
        let total: f64 = costs.iter().sum();
        prop_assert!((base.loads.iter().sum::<f64>() - total).abs() <= 1e-9 * total.max(1.0));
        prop_assert!(base.block_of.iter().all(|&b| b < m));
    }

    #[test]
    fn search_is_bounded_and_consistent(tasks in task_list(), m in 1usize..=16, model in affine()) {
        let table = CostTable::bundled();
        let ests: [&dyn CostEstimator; 2] = [&table, &model];
        for est in ests {
            let plan = divide_and_schedule(&tasks, est, m).unwrap();
            let identity = identity_plan(&tasks, est, m).unwrap();
            let bound = lower_bound(&tasks, est, m).unwrap();
            prop_assert!(plan.is_consistent());
            prop_assert!(plan.makespan_ms() <= identity.makespan_ms() * (1.0 + 1e-12));
            prop_assert!(plan.makespan_ms() >= bound * (1.0 - 1e-9));
            prop_assert!((makespan(&plan, est) - plan.makespan_ms()).abs() <= 1e-12 * plan.makespan_ms());
            for (t, b) in tasks.iter().zip(plan.b_k()) {
                prop_assert!(is_exact_split(t.n, b));
            }
        }
    }

    #[test]
    fn slices_tile_the_task(n in 1usize..5000, b in 1usize..64) {
        let ranges = slice_ranges(n, b);
        prop_assert_eq!(ranges.first().unwrap().start, 0);
        prop_assert_eq!(ranges.last().unwrap().end, n);
        for pair in ranges.windows(2) {
            prop_assert_eq!(pair[0].end, pair[1].start);
        }
        prop_assert!(ranges.iter().all(|r| !r.is_empty()));
    }

    #[test]
    fn interpolation_stays_within_its_cell(n_q in 1usize..150, n in 1usize..40_000) {
        let table = CostTable::bundled();
        let c = table.estimate(n_q, n);
        let k = table.surrounding_knots(n_q, n);
        let (lo, hi) = k.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
        prop_assert!(c >= lo - 1e-15 && c <= hi + 1e-15);
    }

    #[test]
    fn traffic_identity_holds(seed in any::<u64>()) {
        let (f, q) = any_forest(&mut ChaCha8Rng::seed_from_u64(seed));
        let codec = count_kv_reads(&f, Mode::Codec);
        let baseline = count_kv_reads(&f, Mode::Baseline);
        prop_assert_eq!(codec, f.total_len() as u64);
        let weighted: u64 = f.kv_nodes().map(|n| (n.len() * n.query_set().len()) as u64).sum();
        prop_assert_eq!(baseline, weighted);
        prop_assert!(baseline >= codec);
        let (num, den) = sharing_fraction(&f);
        prop_assert_eq!((num, den), (baseline, codec));
        prop_assert!((weighted_avg_sharing(&f) - baseline as f64 / codec as f64).abs() < 1e-12);
        let unshared = f.unshare(&q).unwrap();
        prop_assert_eq!(count_kv_reads(&unshared, Mode::Codec), count_kv_reads(&unshared, Mode::Baseline));
    }

    #[test]
    fn executor_matches_reference(seed in any::<u64>(), m in 1usize..=8, workers in 1usize..=4) {
        let (f, q) = any_forest(&mut ChaCha8Rng::seed_from_u64(seed));
        let plan = divide_and_schedule(&tasks_from_forest(&f), &CostTable::bundled(), m).unwrap();
        let out = execute(&f, &q, &plan, &BlockPool::new(workers).unwrap()).unwrap();
        let reference = naive_attention(&q, &f).unwrap();
        prop_assert!(out.max_rel_err(&reference) <= 1e-10);
    }

    #[test]
    fn two_level_counts(shared in 1usize..200, leaf in 1usize..20, batch in 1usize..12, seed in any::<u64>()) {
        let (f, q) = gen_two_level::<f32>(shared, leaf, batch, DIMS, seed).unwrap();
        prop_assert_eq!(f.node_count(), batch + 1);
        prop_assert_eq!(q.bs(), batch);
        prop_assert_eq!(f.total_len(), shared + batch * leaf);
        for r in 0..batch {
            prop_assert_eq!(f.context_len(RequestId(r)).unwrap(), shared + leaf);
        }
    }

    #[test]
    fn full_tree_counts(arity in 2usize..=4, depth in 1usize..=5, len in 1usize..8) {
        let (f, q) = gen_full_tree::<f32>(arity, depth, len, DIMS, 0).unwrap();
        // One root node, then `depth - 1` levels of fan-out.
        let nodes: usize = (0..depth).map(|l| arity.pow(l as u32)).sum();
        prop_assert_eq!(f.node_count(), nodes);
        prop_assert_eq!(q.bs(), arity.pow(depth as u32 - 1));
        prop_assert!(f.validate().is_empty());
    }
}

#[test]
fn nq_bar_grows_with_shared_ratio() {
    let mut last = 0.0;
    for ratio in [0.1, 0.3, 0.5, 0.7, 0.9, 1.0] {
        let (f, _) = gen_shared_ratio::<f32>(1024, ratio, 8, DIMS, 5).unwrap();
        let nq_bar = TrafficReport::of(&f).nq_bar;
        assert!(nq_bar > last, "ratio {ratio}: {nq_bar} after {last}");
        last = nq_bar;
    }
}
