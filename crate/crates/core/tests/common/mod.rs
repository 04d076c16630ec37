#![allow(dead_code)]

use prefix_attn::forest::NodeSpec;
use prefix_attn::tensor::Tensor3;
use prefix_attn::{build_forest, Forest, NodeId, QueryBatch, RequestId};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Limits for random forests.
#[derive(Debug, Clone, Copy)]
pub struct Shape {
    pub max_depth: usize,
    pub max_arity: usize,
    pub max_len: usize,
    pub max_bs: usize,
    pub d: usize,
    pub group: usize,
    pub h_kv: usize,
}

pub fn normal(rng: &mut ChaCha8Rng, rows: usize, heads: usize, d: usize, scale: f64) -> Tensor3<f64> {
    Tensor3::from_fn(rows, heads, d, || {
        let x: f64 = StandardNormal.sample(rng);
        x * scale
    })
}

/// Random prefix forest built by walking requests down from the root,
/// reusing or adding children. Some requests stop early and some see only a
/// prefix of their last node.
pub fn random_forest(rng: &mut ChaCha8Rng, s: Shape) -> (Forest<f64>, QueryBatch<f64>) {
    let bs = rng.random_range(1..=s.max_bs);
    let arity = rng.random_range(1..=s.max_arity);
    let h_q = s.h_kv * s.group;
    // (parent, len, children) with index 0 as the virtual root.
    let mut tree: Vec<(usize, usize, Vec<usize>)> = vec![(0, 0, Vec::new())];
    let mut paths = Vec::with_capacity(bs);
    let mut tails = Vec::new();
    for r in 0..bs {
        let depth = rng.random_range(1..=s.max_depth);
        let mut cur = 0;
        let mut path = Vec::new();
        for _ in 0..depth {
            let kids = tree[cur].2.clone();
            let reuse = !kids.is_empty() && (kids.len() >= arity || rng.random_bool(0.6));
            let next = if reuse {
                kids[rng.random_range(0..kids.len())]
            } else {
                tree.push((cur, rng.random_range(1..=s.max_len), Vec::new()));
                let id = tree.len() - 1;
                tree[cur].2.push(id);
                id
            };
            path.push(NodeId(next));
            cur = next;
        }
        if rng.random_bool(0.2) {
            tails.push((cur, r, rng.random_range(1..=tree[cur].1)));
        }
        paths.push(path);
    }
    let scale = 1.0 / (s.d as f64).sqrt();
    let mut specs: Vec<NodeSpec<f64>> = tree[1..]
        .iter()
        .map(|&(parent, len, _)| {
            let k = normal(rng, len, s.h_kv, s.d, 1.0);
            let v = normal(rng, len, s.h_kv, s.d, 1.0);
            NodeSpec::new(NodeId(parent), k, v)
        })
        .collect();
    for (node, r, vis) in tails {
        specs[node - 1].visible.insert(RequestId(r), vis);
    }
    let q = QueryBatch::new(normal(rng, bs, h_q, s.d, scale * 4.0), s.h_kv).expect("valid head layout");
    let f = build_forest(specs, paths, &q).expect("random forest is valid");
    (f, q)
}

/// Random forest within the acceptance limits.
pub fn any_forest(rng: &mut ChaCha8Rng) -> (Forest<f64>, QueryBatch<f64>) {
    let shape = random_shape(rng);
    random_forest(rng, shape)
}

pub fn random_shape(rng: &mut ChaCha8Rng) -> Shape {
    Shape {
        max_depth: 6,
        max_arity: 5,
        max_len: 64,
        max_bs: 16,
        d: [4, 16, 64][rng.random_range(0..3)],
        group: [1, 2, 4][rng.random_range(0..3)],
        h_kv: rng.random_range(1..=2),
    }
}

/// Reference kernel timings (ms), rows n = 512..16384, columns n_q = 1, 2, 5, 10, 20, 50, 100.
pub const KNOT_NQ: [usize; 7] = [1, 2, 5, 10, 20, 50, 100];
pub const KNOT_N: [usize; 6] = [512, 1024, 2048, 4096, 8192, 16384];
pub const KNOT_MS: [[f64; 7]; 6] = [
    [0.036, 0.035, 0.036, 0.043, 0.048, 0.074, 0.112],
    [0.043, 0.043, 0.044, 0.054, 0.062, 0.109, 0.122],
    [0.060, 0.059, 0.059, 0.079, 0.094, 0.124, 0.145],
    [0.092, 0.092, 0.093, 0.126, 0.147, 0.156, 0.183],
    [0.156, 0.157, 0.156, 0.199, 0.189, 0.195, 0.266],
    [0.283, 0.282, 0.283, 0.301, 0.303, 0.471, 0.746],
];

/// Softmax attention per request over its materialized context, shifted by
/// the row maximum. Returns `[bs × h_q × d]` flattened.
pub fn shifted_softmax_oracle(f: &Forest<f64>, q: &QueryBatch<f64>) -> Vec<f64> {
    let (h_q, d, g) = (q.h_q(), q.d(), q.group_size());
    let mut out = Vec::with_capacity(q.bs() * h_q * d);
    for r in 0..q.bs() {
        let (k, v) = f.materialize_context(RequestId(r)).unwrap();
        for h in 0..h_q {
            let qv = q.tensor().vector(r, h);
            let scores: Vec<f64> = (0..k.rows())
                .map(|t| qv.iter().zip(k.vector(t, h / g)).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = w.iter().sum();
            for c in 0..d {
                out.push((0..k.rows()).map(|t| w[t] * v.vector(t, h / g)[c]).sum::<f64>() / z);
            }
        }
    }
    out
}
