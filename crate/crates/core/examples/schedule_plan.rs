//! Compares the division search with no splitting and with fixed splits.

use prefix_attn::scheduler::{division_caps, identity_plan, lower_bound, uniform_plan};
use prefix_attn::{divide_and_schedule, CostTable, NodeId, Task};

fn main() {
    let est = CostTable::bundled();
    // One long shared prefix and a handful of short leaves.
    let mut tasks = vec![Task::new(NodeId(1), 16, 12288)];
    tasks.extend((0..16).map(|i| Task::new(NodeId(i + 2), 1, 256)));

    for m in [4, 16, 64] {
        let bound = lower_bound(&tasks, &est, m).unwrap();
        let caps = division_caps(&tasks, &est, bound);
        let searched = divide_and_schedule(&tasks, &est, m).unwrap();
        let identity = identity_plan(&tasks, &est, m).unwrap();
        let uniform = uniform_plan(&tasks, 4, &est, m).unwrap();
        println!("m = {m}");
        println!("  lower bound {bound:.4} ms, prefix cap {}", caps[0]);
        println!(
            "  searched  {:.4} ms, prefix split {}",
            searched.makespan_ms(),
            searched.b_k()[0]
        );
        println!("  uniform 4 {:.4} ms", uniform.makespan_ms());
        println!("  identity  {:.4} ms", identity.makespan_ms());
        assert!(searched.makespan_ms() <= identity.makespan_ms());
    }
}
