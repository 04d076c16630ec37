//! Plans and executes a two-level workload on a worker pool, then compares
//! the result with per-request reference attention.

use prefix_attn::executor::{execute_traced, Phase, ReduceOrder};
use prefix_attn::forest::Dims;
use prefix_attn::scheduler::tasks_from_forest;
use prefix_attn::workloads::gen_two_level;
use prefix_attn::{divide_and_schedule, naive_attention, BlockPool, CostTable};

fn main() {
    let dims = Dims { h_q: 8, h_kv: 2, d: 32 };
    let (forest, queries) = gen_two_level::<f64>(2048, 32, 6, dims, 7).expect("workload");

    let est = CostTable::bundled();
    let plan = divide_and_schedule(&tasks_from_forest(&forest), &est, 8).expect("plan");
    println!(
        "split counts {:?}, {} subtasks, makespan {:.4} ms",
        plan.b_k(),
        plan.total_subtasks(),
        plan.makespan_ms()
    );

    let reference = naive_attention(&queries, &forest).unwrap();
    for reduce in [ReduceOrder::Balanced, ReduceOrder::Sequential] {
        let pool = BlockPool::new(4).unwrap().with_reduce(reduce);
        let (out, trace) = execute_traced(&forest, &queries, &plan, &pool).expect("execute");
        let rounds = trace.por().filter_map(|e| e.round).max().map_or(0, |r| r + 1);
        println!(
            "{reduce:?}: {} pac events, {} merge rounds, error vs reference {:.2e}",
            trace.events.iter().filter(|e| e.phase == Phase::Pac).count(),
            rounds,
            out.max_rel_err(&reference)
        );
    }
}
