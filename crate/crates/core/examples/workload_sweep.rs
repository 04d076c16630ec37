//! Sweeps the shared fraction of a batch and reports traffic savings.

use prefix_attn::forest::Dims;
use prefix_attn::metrics::TrafficReport;
use prefix_attn::workloads::{Axis, Family, WorkloadSpec};

fn main() {
    let base = WorkloadSpec {
        family: Family::SharedRatio {
            total_len: 4096,
            ratio: 0.5,
            batch: 16,
        },
        seed: 3,
        dims: Dims { h_q: 4, h_kv: 4, d: 32 },
    };
    println!("{}", base.to_json());
    for value in ["0.1", "0.25", "0.5", "0.75", "0.9", "1"] {
        let spec = base.with_axis(Axis::SharedRatio, value).expect("valid ratio");
        let (forest, _) = spec.generate::<f32>().expect("workload");
        let t = TrafficReport::of(&forest);
        println!(
            "ratio {value:>4}: {:>2} nodes, reduction {:>6.2}x, nq_bar {:>5.2}",
            forest.node_count(),
            t.reduction_ratio,
            t.nq_bar
        );
    }
}
