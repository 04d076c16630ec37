//! Counts KV rows read with and without prefix sharing across workload shapes.

use prefix_attn::forest::Dims;
use prefix_attn::metrics::{simulate_speedup, TrafficReport};
use prefix_attn::workloads::{gen_degenerate, gen_full_tree, gen_two_level};
use prefix_attn::CostTable;

fn main() {
    let dims = Dims { h_q: 8, h_kv: 8, d: 64 };
    let est = CostTable::bundled();
    let shapes = [
        (
            "two-level 4096 + 8x32",
            gen_two_level::<f32>(4096, 32, 8, dims, 1).unwrap().0,
        ),
        (
            "binary tree depth 5",
            gen_full_tree::<f32>(2, 5, 256, dims, 1).unwrap().0,
        ),
        ("degenerate depth 6", gen_degenerate::<f32>(6, 256, dims, 1).unwrap().0),
    ];
    for (name, forest) in shapes {
        let t = TrafficReport::of(&forest);
        let s = simulate_speedup(&forest, &est, 8).unwrap();
        println!(
            "{name:<24} rows {:>6} vs {:>6}  bytes {:>9} vs {:>9}  reduction {:.2}x  nq_bar {:.2}  sim speedup {:.2}x",
            t.kv_rows_codec, t.kv_rows_baseline, t.bytes_codec, t.bytes_baseline, t.reduction_ratio, t.nq_bar, s.ratio
        );
    }
}
