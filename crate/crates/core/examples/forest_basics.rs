//! Builds a small prefix forest by hand and inspects its structure.

use prefix_attn::forest::NodeSpec;
use prefix_attn::tensor::Tensor3;
use prefix_attn::{build_forest, NodeId, QueryBatch, RequestId};

fn ramp(rows: usize, heads: usize, d: usize, seed: f64) -> Tensor3<f64> {
    let mut x = seed;
    Tensor3::from_fn(rows, heads, d, || {
        x = (x * 1.7 + 0.3).fract();
        x - 0.5
    })
}

fn main() {
    let (h_kv, d) = (1, 4);
    // Node 1 is a 6-token system prompt shared by three requests.
    // Request 2 sees only the first 2 tokens of its leaf.
    let specs = vec![
        NodeSpec::new(NodeId(0), ramp(6, h_kv, d, 0.1), ramp(6, h_kv, d, 0.2)),
        NodeSpec::new(NodeId(1), ramp(3, h_kv, d, 0.3), ramp(3, h_kv, d, 0.4)),
        NodeSpec::new(NodeId(1), ramp(4, h_kv, d, 0.5), ramp(4, h_kv, d, 0.6)).with_visible(RequestId(2), 2),
    ];
    let paths = vec![
        vec![NodeId(1), NodeId(2)],
        vec![NodeId(1), NodeId(3)],
        vec![NodeId(1), NodeId(3)],
    ];
    let queries = QueryBatch::new(ramp(3, 2, d, 0.7), h_kv).expect("head layout");
    let forest = build_forest(specs, paths, &queries).expect("valid forest");

    println!(
        "nodes: {}, requests: {}, tokens: {}",
        forest.node_count(),
        forest.num_requests(),
        forest.total_len()
    );
    for node in forest.kv_nodes() {
        let flat = forest.flat_range(node.id()).expect("kv node");
        let set: Vec<String> = node.query_set().iter().map(|r| r.to_string()).collect();
        println!(
            "node {} parent {} len {} flat {:?} queries [{}]",
            node.id(),
            node.parent(),
            node.len(),
            flat,
            set.join(", ")
        );
    }
    for r in 0..forest.num_requests() {
        let r = RequestId(r);
        let path: Vec<String> = forest.prefix_path(r).unwrap().iter().map(|n| n.to_string()).collect();
        println!(
            "request {r}: path [{}], context {}",
            path.join(" -> "),
            forest.context_len(r).unwrap()
        );
    }
    assert!(forest.validate().is_empty());

    let doc = forest.to_document(Some(&queries));
    println!("serialized document: {} bytes of JSON", doc.to_json().len());
}
