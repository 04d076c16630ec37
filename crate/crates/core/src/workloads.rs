//! Seeded synthetic workloads: two-level, full trees, degenerate trees and
//! shared-ratio batches.
//!
//! Tensor entries are standard normal scaled by `1/sqrt(d)`, drawn from one
//! ChaCha8 stream in node id order (keys, then values), then the queries.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::element::Element;
use crate::forest::{build_forest, Dims, Forest, ForestError, NodeId, NodeSpec, QueryBatch};
use crate::tensor::Tensor3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WorkloadError {
    #[error("invalid workload: {0}")]
    Invalid(String),
    #[error("{rest} unshared tokens cannot give each of {batch} requests a leaf")]
    RemainderInfeasible { rest: usize, batch: usize },
    #[error("unknown sweep axis {0:?}")]
    UnknownAxis(String),
    #[error("axis {axis} does not apply to {family}")]
    AxisNotApplicable { axis: Axis, family: &'static str },
    #[error("bad sweep value {0:?}")]
    BadValue(String),
    #[error("workload spec: {0}")]
    Parse(String),
    #[error(transparent)]
    Forest(#[from] ForestError),
}

/// Shape of the prefix forest and its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", content = "params", rename_all = "snake_case")]
pub enum Family {
    /// One shared root, one private leaf per request.
    TwoLevel {
        shared_len: usize,
        leaf_len: usize,
        batch: usize,
    },
    /// Complete tree, one request per leaf.
    FullTree {
        arity: usize,
        depth: usize,
        node_len: usize,
    },
    /// Spine where only left children branch further.
    Degenerate { depth: usize, node_len: usize },
    /// Two-level batch with `floor(total_len * ratio)` shared tokens.
    SharedRatio { total_len: usize, ratio: f64, batch: usize },
}

impl Family {
    pub fn name(&self) -> &'static str {
        match self {
            Family::TwoLevel { .. } => "two_level",
            Family::FullTree { .. } => "full_tree",
            Family::Degenerate { .. } => "degenerate",
            Family::SharedRatio { .. } => "shared_ratio",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    #[serde(flatten)]
    pub family: Family,
    pub seed: u64,
    pub dims: Dims,
}

impl WorkloadSpec {
    pub fn from_json(s: &str) -> Result<Self, WorkloadError> {
        let spec: Self = serde_json::from_str(s).map_err(|e| WorkloadError::Parse(e.to_string()))?;
        spec.check()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("workload spec serializes")
    }

    pub fn check(&self) -> Result<(), WorkloadError> {
        let bad = |m: &str| Err(WorkloadError::Invalid(m.into()));
        let Dims { h_q, h_kv, d } = self.dims;
        if h_kv == 0 || d == 0 || h_q == 0 || h_q % h_kv != 0 {
            return bad("dims need h_kv, d >= 1 and h_q a positive multiple of h_kv");
        }
        match self.family {
            Family::TwoLevel {
                shared_len,
                leaf_len,
                batch,
            } if shared_len == 0 || leaf_len == 0 || batch == 0 => bad("lengths and batch must be >= 1"),
            Family::FullTree { arity, .. } if !(2..=5).contains(&arity) => bad("arity must be in 2..=5"),
            Family::FullTree { depth, node_len, .. } if depth == 0 || node_len == 0 => {
                bad("depth and node_len must be >= 1")
            }
            Family::Degenerate { depth, node_len } if depth < 2 || node_len == 0 => {
                bad("degenerate trees need depth >= 2 and node_len >= 1")
            }
            Family::SharedRatio { ratio, .. } if !(ratio > 0.0 && ratio <= 1.0) => bad("ratio must be in (0, 1]"),
            Family::SharedRatio {
                total_len,
                ratio,
                batch,
            } if batch == 0 || shared_len(total_len, ratio) == 0 => {
                bad("shared_ratio needs batch >= 1 and at least one shared token")
            }
            _ => Ok(()),
        }
    }

    /// Builds the forest and queries in element type `T`.
    pub fn generate<T: Element>(&self) -> Result<(Forest<T>, QueryBatch<T>), WorkloadError> {
        self.check()?;
        let (parents, paths) = match self.family {
            Family::TwoLevel {
                shared_len,
                leaf_len,
                batch,
            } => two_level_shape(shared_len, &vec![leaf_len; batch]),
            Family::FullTree { arity, depth, node_len } => full_tree_shape(arity, depth, node_len),
            Family::Degenerate { depth, node_len } => degenerate_shape(depth, node_len),
            Family::SharedRatio {
                total_len,
                ratio,
                batch,
            } => {
                let shared = shared_len(total_len, ratio);
                let rest = total_len - shared;
                if rest == 0 {
                    (vec![(0, shared)], vec![vec![NodeId(1)]; batch])
                } else if rest < batch {
                    return Err(WorkloadError::RemainderInfeasible { rest, batch });
                } else {
                    let leaves: Vec<usize> = (0..batch)
                        .map(|i| rest / batch + usize::from(i < rest % batch))
                        .collect();
                    two_level_shape(shared, &leaves)
                }
            }
        };
        materialize(&parents, paths, self.dims, self.seed)
    }

    /// Replaces one parameter, as a sweep point.
    pub fn with_axis(&self, axis: Axis, value: &str) -> Result<Self, WorkloadError> {
        let int = || {
            value
                .trim()
                .parse::<usize>()
                .map_err(|_| WorkloadError::BadValue(value.into()))
        };
        let na = || WorkloadError::AxisNotApplicable {
            axis,
            family: self.family.name(),
        };
        let mut out = self.clone();
        match (axis, &mut out.family) {
            (Axis::SeqLen, Family::TwoLevel { shared_len: v, .. })
            | (Axis::SeqLen, Family::SharedRatio { total_len: v, .. })
            | (Axis::SeqLen, Family::FullTree { node_len: v, .. })
            | (Axis::SeqLen, Family::Degenerate { node_len: v, .. })
            | (Axis::Batch, Family::TwoLevel { batch: v, .. })
            | (Axis::Batch, Family::SharedRatio { batch: v, .. })
            | (Axis::Depth, Family::FullTree { depth: v, .. })
            | (Axis::Depth, Family::Degenerate { depth: v, .. }) => *v = int()?,
            (Axis::SharedRatio, Family::SharedRatio { ratio, .. }) => {
                *ratio = value
                    .trim()
                    .parse()
                    .map_err(|_| WorkloadError::BadValue(value.into()))?;
            }
            (Axis::Shape, Family::FullTree { depth, node_len, .. } | Family::Degenerate { depth, node_len }) => {
                let (depth, node_len) = (*depth, *node_len);
                out.family = match value.trim() {
                    "DT" => Family::Degenerate { depth, node_len },
                    s => {
                        let arity = s
                            .strip_suffix('T')
                            .and_then(|a| a.parse().ok())
                            .ok_or_else(|| WorkloadError::BadValue(value.into()))?;
                        Family::FullTree { arity, depth, node_len }
                    }
                };
            }
            _ => return Err(na()),
        }
        out.check()?;
        Ok(out)
    }
}

fn shared_len(total_len: usize, ratio: f64) -> usize {
    // The slack absorbs products such as 102 * (100 / 102) landing just below 100.
    (total_len as f64 * ratio + 1e-9).floor() as usize
}

/// `(parent index, len)` per node in id order, and per-request paths.
type Shape = (Vec<(usize, usize)>, Vec<Vec<NodeId>>);

fn two_level_shape(shared: usize, leaves: &[usize]) -> Shape {
    let mut parents = vec![(0, shared)];
    let mut paths = Vec::with_capacity(leaves.len());
    for (i, &len) in leaves.iter().enumerate() {
        parents.push((1, len));
        paths.push(vec![NodeId(1), NodeId(i + 2)]);
    }
    (parents, paths)
}

fn full_tree_shape(arity: usize, depth: usize, node_len: usize) -> Shape {
    let mut parents = vec![(0, node_len)];
    let mut paths = Vec::new();
    let mut queue = VecDeque::from([(NodeId(1), 1usize, vec![NodeId(1)])]);
    while let Some((id, level, path)) = queue.pop_front() {
        if level == depth {
            paths.push(path);
            continue;
        }
        for _ in 0..arity {
            parents.push((id.0, node_len));
            let child = NodeId(parents.len());
            let mut p = path.clone();
            p.push(child);
            queue.push_back((child, level + 1, p));
        }
    }
    (parents, paths)
}

fn degenerate_shape(depth: usize, node_len: usize) -> Shape {
    let mut parents = vec![(0, node_len)];
    let mut leaves = Vec::new();
    let mut spine = vec![NodeId(1)];
    for level in 1..depth {
        let tip = *spine.last().expect("spine is nonempty");
        parents.push((tip.0, node_len));
        let left = NodeId(parents.len());
        parents.push((tip.0, node_len));
        let right = NodeId(parents.len());
        let mut p = spine.clone();
        p.push(right);
        leaves.push(p);
        if level + 1 < depth {
            spine.push(left);
        } else {
            let mut p = spine.clone();
            p.push(left);
            leaves.push(p);
        }
    }
    leaves.sort_by_key(|p| *p.last().expect("paths are nonempty"));
    (parents, leaves)
}

fn materialize<T: Element>(
    parents: &[(usize, usize)],
    paths: Vec<Vec<NodeId>>,
    dims: Dims,
    seed: u64,
) -> Result<(Forest<T>, QueryBatch<T>), WorkloadError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (dims.d as f64).sqrt();
    let mut draw = |rows: usize, heads: usize| {
        Tensor3::from_fn(rows, heads, dims.d, || {
            let x: f64 = StandardNormal.sample(&mut rng);
            T::from_f64(x * scale)
        })
    };
    let specs: Vec<NodeSpec<T>> = parents
        .iter()
        .map(|&(parent, len)| {
            let keys = draw(len, dims.h_kv);
            let values = draw(len, dims.h_kv);
            NodeSpec::new(NodeId(parent), keys, values)
        })
        .collect();
    let queries = QueryBatch::new(draw(paths.len(), dims.h_q), dims.h_kv)?;
    let forest = build_forest(specs, paths, &queries)?;
    Ok((forest, queries))
}

fn spec(family: Family, dims: Dims, seed: u64) -> WorkloadSpec {
    WorkloadSpec { family, seed, dims }
}

pub fn gen_two_level<T: Element>(
    shared_len: usize,
    leaf_len: usize,
    batch: usize,
    dims: Dims,
    seed: u64,
) -> Result<(Forest<T>, QueryBatch<T>), WorkloadError> {
    let f = Family::TwoLevel {
        shared_len,
        leaf_len,
        batch,
    };
    spec(f, dims, seed).generate()
}

pub fn gen_full_tree<T: Element>(
    arity: usize,
    depth: usize,
    node_len: usize,
    dims: Dims,
    seed: u64,
) -> Result<(Forest<T>, QueryBatch<T>), WorkloadError> {
    spec(Family::FullTree { arity, depth, node_len }, dims, seed).generate()
}

pub fn gen_degenerate<T: Element>(
    depth: usize,
    node_len: usize,
    dims: Dims,
    seed: u64,
) -> Result<(Forest<T>, QueryBatch<T>), WorkloadError> {
    spec(Family::Degenerate { depth, node_len }, dims, seed).generate()
}

pub fn gen_shared_ratio<T: Element>(
    total_len: usize,
    ratio: f64,
    batch: usize,
    dims: Dims,
    seed: u64,
) -> Result<(Forest<T>, QueryBatch<T>), WorkloadError> {
    spec(
        Family::SharedRatio {
            total_len,
            ratio,
            batch,
        },
        dims,
        seed,
    )
    .generate()
}

/// Benchmark sweep dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    SeqLen,
    Batch,
    Depth,
    SharedRatio,
    Shape,
}

impl Axis {
    pub const ALL: [Axis; 5] = [Axis::SeqLen, Axis::Batch, Axis::Depth, Axis::SharedRatio, Axis::Shape];

    pub fn name(self) -> &'static str {
        match self {
            Axis::SeqLen => "seq_len",
            Axis::Batch => "batch",
            Axis::Depth => "depth",
            Axis::SharedRatio => "shared_ratio",
            Axis::Shape => "shape",
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Axis {
    type Err = WorkloadError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Axis::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| WorkloadError::UnknownAxis(s.into()))
    }
}
