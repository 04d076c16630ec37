//! Tree-of-tensors KV cache.
//!
//! Every node holds the keys and values of one chunk of tokens; the chunk of a
//! parent is a prefix of the chunks of its children. A virtual root with id 0
//! connects all prefix roots, so requests with unrelated prompts can be
//! batched together. Each request follows one root-to-node path whose
//! concatenated chunks form its context, and each node records the sorted set
//! of requests whose path goes through it.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::element::Element;
use crate::tensor::{concat_rows, Tensor3, View3};

/// Dense node index. `NodeId::ROOT` (0) is the virtual root.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub usize);

impl NodeId {
    pub const ROOT: NodeId = NodeId(0);

    pub fn index(self) -> usize {
        self.0
    }

    pub fn is_root(self) -> bool {
        self.0 == 0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

/// Index of a decoding request (one query row of the batch).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RequestId(pub usize);

impl RequestId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for RequestId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

/// Head layout shared by queries and KV nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub h_q: usize,
    pub h_kv: usize,
    pub d: usize,
}

impl Dims {
    pub fn group_size(&self) -> usize {
        self.h_q / self.h_kv
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ForestError {
    #[error("parent chain of {node} contains a cycle")]
    CycleDetected { node: NodeId },
    #[error("{node} references missing parent {parent}")]
    DanglingParent { node: NodeId, parent: NodeId },
    #[error("path of {request} is not a parent-to-child chain starting under the root")]
    PathNotPrefixChain { request: RequestId },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("unknown request {0}")]
    UnknownRequest(RequestId),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("forest violates {} invariant(s), first: {:?}", .0.len(), .0.first())]
    Invalid(Vec<Violation>),
    #[error("malformed forest document: {0}")]
    Document(String),
}

/// A broken forest invariant, reported by [`Forest::validate`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum Violation {
    RootNotEmpty,
    EmptyNonRootNode { node: NodeId },
    KeyValueLenMismatch { node: NodeId },
    HeadLayoutMismatch { node: NodeId },
    BrokenParent { node: NodeId },
    ChildIndexMismatch { node: NodeId },
    PathNotChain { request: RequestId },
    QuerySetPathMismatch { node: NodeId, request: RequestId },
    QuerySetUnsorted { node: NodeId },
    UnreferencedNode { node: NodeId },
    VisibleLenOutOfRange { node: NodeId, request: RequestId },
    FlattenNotBijective,
}

/// Input description of one node for [`build_forest`].
#[derive(Debug, Clone)]
pub struct NodeSpec<T> {
    pub parent: NodeId,
    pub keys: Tensor3<T>,
    pub values: Tensor3<T>,
    /// Per-request visible token count for requests whose prefix ends inside
    /// this node. Absent entries see the whole node.
    pub visible: BTreeMap<RequestId, usize>,
}

impl<T: Element> NodeSpec<T> {
    pub fn new(parent: NodeId, keys: Tensor3<T>, values: Tensor3<T>) -> Self {
        Self {
            parent,
            keys,
            values,
            visible: BTreeMap::new(),
        }
    }

    pub fn with_visible(mut self, request: RequestId, len: usize) -> Self {
        self.visible.insert(request, len);
        self
    }
}

/// One chunk of KV cache plus the requests sharing it.
#[derive(Debug, Clone, PartialEq)]
pub struct KvNode<T> {
    pub(crate) id: NodeId,
    pub(crate) parent: NodeId,
    pub(crate) keys: Tensor3<T>,
    pub(crate) values: Tensor3<T>,
    pub(crate) query_set: Vec<RequestId>,
    pub(crate) visible_len: BTreeMap<RequestId, usize>,
}

impl<T: Element> KvNode<T> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn parent(&self) -> NodeId {
        self.parent
    }

    /// Token count `|n|`.
    pub fn len(&self) -> usize {
        self.keys.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn keys(&self) -> &Tensor3<T> {
        &self.keys
    }

    pub fn values(&self) -> &Tensor3<T> {
        &self.values
    }

    /// Requests whose prefix path contains this node, ascending.
    pub fn query_set(&self) -> &[RequestId] {
        &self.query_set
    }

    /// Tokens of this node visible to `request`.
    pub fn visible_len(&self, request: RequestId) -> usize {
        self.visible_len.get(&request).copied().unwrap_or_else(|| self.len())
    }

    pub fn partial_visibility(&self) -> &BTreeMap<RequestId, usize> {
        &self.visible_len
    }
}

/// Stacked decode queries, one row per request: `[bs × h_q × d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryBatch<T> {
    queries: Tensor3<T>,
    h_kv: usize,
}

impl<T: Element> QueryBatch<T> {
    pub fn new(queries: Tensor3<T>, h_kv: usize) -> Result<Self, ForestError> {
        let h_q = queries.heads();
        if h_kv == 0 || h_q == 0 || !h_q.is_multiple_of(h_kv) {
            return Err(ForestError::DimensionMismatch(format!(
                "h_q = {h_q} must be a positive multiple of h_kv = {h_kv}"
            )));
        }
        if queries.dim() == 0 {
            return Err(ForestError::DimensionMismatch("head dim is 0".into()));
        }
        Ok(Self { queries, h_kv })
    }

    pub fn tensor(&self) -> &Tensor3<T> {
        &self.queries
    }

    pub fn bs(&self) -> usize {
        self.queries.rows()
    }

    pub fn h_q(&self) -> usize {
        self.queries.heads()
    }

    pub fn h_kv(&self) -> usize {
        self.h_kv
    }

    pub fn d(&self) -> usize {
        self.queries.dim()
    }

    pub fn dims(&self) -> Dims {
        Dims {
            h_q: self.h_q(),
            h_kv: self.h_kv,
            d: self.d(),
        }
    }

    /// Query heads per KV head.
    pub fn group_size(&self) -> usize {
        self.h_q() / self.h_kv
    }

    pub fn cast<U: Element>(&self) -> QueryBatch<U> {
        QueryBatch {
            queries: self.queries.cast(),
            h_kv: self.h_kv,
        }
    }
}

/// Immutable KV cache forest with request paths, per-node query sets and a
/// preorder flattening of all tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Forest<T> {
    pub(crate) nodes: Vec<KvNode<T>>,
    pub(crate) children: Vec<Vec<NodeId>>,
    pub(crate) paths: Vec<Vec<NodeId>>,
    pub(crate) flat_offset: Vec<usize>,
    pub(crate) total_len: usize,
    pub(crate) h_kv: usize,
    pub(crate) d: usize,
}

/// Builds a forest. Node `i` of `node_specs` receives id `i + 1`.
///
/// Query sets are derived from `request_paths`; `queries` supplies the batch
/// size and head layout that every node must agree with.
pub fn build_forest<T: Element>(
    node_specs: Vec<NodeSpec<T>>,
    request_paths: Vec<Vec<NodeId>>,
    queries: &QueryBatch<T>,
) -> Result<Forest<T>, ForestError> {
    let (h_kv, d) = (queries.h_kv(), queries.d());
    if request_paths.len() != queries.bs() {
        return Err(ForestError::DimensionMismatch(format!(
            "{} request paths for a batch of {} queries",
            request_paths.len(),
            queries.bs()
        )));
    }
    let count = node_specs.len() + 1;

    for (i, spec) in node_specs.iter().enumerate() {
        let id = NodeId(i + 1);
        if spec.parent.index() >= count {
            return Err(ForestError::DanglingParent {
                node: id,
                parent: spec.parent,
            });
        }
        if spec.keys.heads() != h_kv || spec.values.heads() != h_kv {
            return Err(ForestError::DimensionMismatch(format!(
                "{id} has {} kv heads, queries expect {h_kv}",
                spec.keys.heads()
            )));
        }
        if spec.keys.dim() != d || spec.values.dim() != d {
            return Err(ForestError::DimensionMismatch(format!(
                "{id} has head dim {}, queries have {d}",
                spec.keys.dim()
            )));
        }
        if spec.keys.rows() != spec.values.rows() {
            return Err(ForestError::DimensionMismatch(format!(
                "{id} has {} keys but {} values",
                spec.keys.rows(),
                spec.values.rows()
            )));
        }
    }

    // Every parent chain must reach the root within `count` steps.
    for i in 1..count {
        let mut cur = i;
        let mut steps = 0;
        while cur != 0 {
            cur = node_specs[cur - 1].parent.index();
            steps += 1;
            if steps > count {
                return Err(ForestError::CycleDetected { node: NodeId(i) });
            }
        }
    }

    let mut nodes = Vec::with_capacity(count);
    nodes.push(KvNode {
        id: NodeId::ROOT,
        parent: NodeId::ROOT,
        keys: Tensor3::zeros(0, h_kv, d),
        values: Tensor3::zeros(0, h_kv, d),
        query_set: Vec::new(),
        visible_len: BTreeMap::new(),
    });
    for (i, spec) in node_specs.into_iter().enumerate() {
        nodes.push(KvNode {
            id: NodeId(i + 1),
            parent: spec.parent,
            keys: spec.keys,
            values: spec.values,
            query_set: Vec::new(),
            visible_len: spec.visible,
        });
    }

    for (r, path) in request_paths.iter().enumerate() {
        let request = RequestId(r);
        let mut prev = NodeId::ROOT;
        if path.is_empty() {
            return Err(ForestError::PathNotPrefixChain { request });
        }
        for &n in path {
            if n.is_root() || n.index() >= count || nodes[n.index()].parent != prev {
                return Err(ForestError::PathNotPrefixChain { request });
            }
            // Path ids are strictly deeper each step, so a node cannot repeat.
            nodes[n.index()].query_set.push(request);
            prev = n;
        }
    }

    let mut children = vec![Vec::new(); count];
    for n in &nodes[1..] {
        children[n.parent.index()].push(n.id);
    }

    let (flat_offset, total_len) = preorder_offsets(&nodes, &children);

    let forest = Forest {
        nodes,
        children,
        paths: request_paths,
        flat_offset,
        total_len,
        h_kv,
        d,
    };
    let violations = forest.validate();
    if violations.is_empty() {
        Ok(forest)
    } else {
        Err(ForestError::Invalid(violations))
    }
}

fn preorder_offsets<T: Element>(nodes: &[KvNode<T>], children: &[Vec<NodeId>]) -> (Vec<usize>, usize) {
    let mut offsets = vec![0; nodes.len()];
    let mut next = 0;
    let mut stack = vec![NodeId::ROOT];
    while let Some(n) = stack.pop() {
        offsets[n.index()] = next;
        next += nodes[n.index()].len();
        // Reverse so the smallest child id is visited first.
        stack.extend(children[n.index()].iter().rev().copied());
    }
    (offsets, next)
}

impl<T: Element> Forest<T> {
    /// All nodes including the virtual root at index 0.
    pub fn nodes(&self) -> &[KvNode<T>] {
        &self.nodes
    }

    /// Nodes that carry tokens, in id order.
    pub fn kv_nodes(&self) -> impl Iterator<Item = &KvNode<T>> {
        self.nodes[1..].iter()
    }

    pub fn node(&self, id: NodeId) -> Result<&KvNode<T>, ForestError> {
        self.nodes.get(id.index()).ok_or(ForestError::UnknownNode(id))
    }

    pub fn children(&self, id: NodeId) -> &[NodeId] {
        &self.children[id.index()]
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn num_requests(&self) -> usize {
        self.paths.len()
    }

    pub fn h_kv(&self) -> usize {
        self.h_kv
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// `L_tot`: token count over all nodes.
    pub fn total_len(&self) -> usize {
        self.total_len
    }

    pub fn paths(&self) -> &[Vec<NodeId>] {
        &self.paths
    }

    /// Ordered nodes whose concatenation is the context of `request`.
    pub fn prefix_path(&self, request: RequestId) -> Result<&[NodeId], ForestError> {
        self.paths
            .get(request.index())
            .map(Vec::as_slice)
            .ok_or(ForestError::UnknownRequest(request))
    }

    /// Requests sharing `node`, ascending.
    pub fn node_query_set(&self, node: NodeId) -> Result<&[RequestId], ForestError> {
        if node.is_root() {
            return Err(ForestError::UnknownNode(node));
        }
        Ok(self.node(node)?.query_set())
    }

    /// Number of tokens visible to `request` along its path.
    pub fn context_len(&self, request: RequestId) -> Result<usize, ForestError> {
        Ok(self
            .prefix_path(request)?
            .iter()
            .map(|&n| self.nodes[n.index()].visible_len(request))
            .sum())
    }

    /// Global flattened index of token `local` of `node`, in `0..total_len()`.
    pub fn flat_index(&self, node: NodeId, local: usize) -> Option<usize> {
        let n = self.nodes.get(node.index())?;
        (local < n.len()).then(|| self.flat_offset[node.index()] + local)
    }

    /// Contiguous global index range occupied by `node`.
    pub fn flat_range(&self, node: NodeId) -> Option<Range<usize>> {
        let n = self.nodes.get(node.index())?;
        let start = self.flat_offset[node.index()];
        Some(start..start + n.len())
    }

    /// Checks every structural invariant; an empty list means the forest is valid.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let count = self.nodes.len();

        if !self.nodes[0].is_empty() {
            out.push(Violation::RootNotEmpty);
        }

        for n in &self.nodes[1..] {
            let id = n.id;
            if n.keys.rows() == 0 {
                out.push(Violation::EmptyNonRootNode { node: id });
            }
            if n.keys.rows() != n.values.rows() {
                out.push(Violation::KeyValueLenMismatch { node: id });
            }
            if n.keys.heads() != self.h_kv
                || n.values.heads() != self.h_kv
                || n.keys.dim() != self.d
                || n.values.dim() != self.d
            {
                out.push(Violation::HeadLayoutMismatch { node: id });
            }
            let mut cur = id;
            let mut steps = 0;
            while !cur.is_root() {
                let p = self.nodes[cur.index()].parent;
                steps += 1;
                if p.index() >= count || steps > count {
                    out.push(Violation::BrokenParent { node: id });
                    break;
                }
                cur = p;
            }
        }

        for (i, kids) in self.children.iter().enumerate() {
            for &c in kids {
                if c.index() >= count || self.nodes[c.index()].parent.index() != i || c.is_root() {
                    out.push(Violation::ChildIndexMismatch { node: NodeId(i) });
                }
            }
        }
        let listed: usize = self.children.iter().map(Vec::len).sum();
        if listed != count - 1 {
            out.push(Violation::ChildIndexMismatch { node: NodeId::ROOT });
        }

        let mut on_path = vec![Vec::new(); count];
        for (r, path) in self.paths.iter().enumerate() {
            let request = RequestId(r);
            let mut prev = NodeId::ROOT;
            let chain_ok = !path.is_empty()
                && path.iter().all(|&n| {
                    let ok = !n.is_root() && n.index() < count && self.nodes[n.index()].parent == prev;
                    prev = n;
                    ok
                });
            if !chain_ok {
                out.push(Violation::PathNotChain { request });
                continue;
            }
            for &n in path {
                on_path[n.index()].push(request);
            }
        }

        for n in &self.nodes[1..] {
            let id = n.id;
            if !n.query_set.windows(2).all(|w| w[0] < w[1]) {
                out.push(Violation::QuerySetUnsorted { node: id });
            }
            for &r in &n.query_set {
                if !on_path[id.index()].contains(&r) {
                    out.push(Violation::QuerySetPathMismatch { node: id, request: r });
                }
            }
            for &r in &on_path[id.index()] {
                if !n.query_set.contains(&r) {
                    out.push(Violation::QuerySetPathMismatch { node: id, request: r });
                }
            }
            if n.query_set.is_empty() && on_path[id.index()].is_empty() {
                out.push(Violation::UnreferencedNode { node: id });
            }
            for (&r, &v) in &n.visible_len {
                if v == 0 || v > n.len() || !n.query_set.contains(&r) {
                    out.push(Violation::VisibleLenOutOfRange { node: id, request: r });
                }
            }
        }

        let mut ranges: Vec<(usize, usize)> = self.nodes[1..]
            .iter()
            .map(|n| (self.flat_offset[n.id.index()], n.len()))
            .collect();
        ranges.sort_unstable();
        let mut next = 0;
        let mut bijective = self.flat_offset.len() == count;
        for (start, len) in ranges {
            if start != next {
                bijective = false;
            }
            next = start + len;
        }
        if !bijective || next != self.total_len {
            out.push(Violation::FlattenNotBijective);
        }

        out
    }

    /// Keys and values visible to `request`, concatenated along its path.
    pub fn materialize_context(&self, request: RequestId) -> Result<(Tensor3<T>, Tensor3<T>), ForestError> {
        let path = self.prefix_path(request)?;
        let mut keys: Vec<View3<'_, T>> = Vec::with_capacity(path.len());
        let mut values = Vec::with_capacity(path.len());
        for &n in path {
            let node = &self.nodes[n.index()];
            let vis = node.visible_len(request);
            keys.push(node.keys.view().slice_rows(0, vis));
            values.push(node.values.view().slice_rows(0, vis));
        }
        let k = concat_rows(&keys).ok_or(ForestError::UnknownRequest(request))?;
        let v = concat_rows(&values).ok_or(ForestError::UnknownRequest(request))?;
        Ok((k, v))
    }

    /// A forest with no sharing: every request owns a single node holding its
    /// whole visible context. Used to model per-request KV access.
    pub fn unshare(&self, queries: &QueryBatch<T>) -> Result<Forest<T>, ForestError> {
        let mut specs = Vec::with_capacity(self.num_requests());
        let mut paths = Vec::with_capacity(self.num_requests());
        for r in 0..self.num_requests() {
            let (k, v) = self.materialize_context(RequestId(r))?;
            specs.push(NodeSpec::new(NodeId::ROOT, k, v));
            paths.push(vec![NodeId(r + 1)]);
        }
        build_forest(specs, paths, queries)
    }

    /// Same structure with every tensor converted to `U`.
    pub fn cast<U: Element>(&self) -> Forest<U> {
        Forest {
            nodes: self
                .nodes
                .iter()
                .map(|n| KvNode {
                    id: n.id,
                    parent: n.parent,
                    keys: n.keys.cast(),
                    values: n.values.cast(),
                    query_set: n.query_set.clone(),
                    visible_len: n.visible_len.clone(),
                })
                .collect(),
            children: self.children.clone(),
            paths: self.paths.clone(),
            flat_offset: self.flat_offset.clone(),
            total_len: self.total_len,
            h_kv: self.h_kv,
            d: self.d,
        }
    }

    /// Serializable snapshot of structure, tensors and (optionally) queries.
    pub fn to_document(&self, queries: Option<&QueryBatch<T>>) -> ForestDocument {
        let h_q = queries.map_or(self.h_kv, QueryBatch::h_q);
        ForestDocument {
            dims: Dims {
                h_q,
                h_kv: self.h_kv,
                d: self.d,
            },
            nodes: self.nodes[1..]
                .iter()
                .map(|n| NodeEntry {
                    id: n.id.index(),
                    parent: n.parent.index(),
                    len: n.len(),
                    visible: n.visible_len.iter().map(|(r, &v)| (r.index(), v)).collect(),
                })
                .collect(),
            paths: self
                .paths
                .iter()
                .map(|p| p.iter().map(|n| n.index()).collect())
                .collect(),
            tensors: TensorPayload {
                keys: self.nodes[1..].iter().map(|n| to_f64_vec(n.keys.as_slice())).collect(),
                values: self.nodes[1..]
                    .iter()
                    .map(|n| to_f64_vec(n.values.as_slice()))
                    .collect(),
                queries: queries.map(|q| to_f64_vec(q.tensor().as_slice())),
            },
        }
    }
}

fn to_f64_vec<T: Element>(xs: &[T]) -> Vec<f64> {
    xs.iter().map(|x| Element::to_f64(*x)).collect()
}

/// JSON form of a forest.
///
/// ```json
/// {
///   "dims": {"h_q": 2, "h_kv": 1, "d": 4},
///   "nodes": [{"id": 1, "parent": 0, "len": 8}, {"id": 2, "parent": 1, "len": 2, "visible": {"0": 1}}],
///   "paths": [[1, 2]],
///   "tensors": {"keys": [[...len*h_kv*d...], ...], "values": [...], "queries": [...bs*h_q*d...]}
/// }
/// ```
///
/// Node ids are `1..=N` in order; `tensors.keys[i]` belongs to node `i + 1`
/// and is row-major `[len × h_kv × d]`. `queries` is optional and defaults to
/// zeros.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestDocument {
    pub dims: Dims,
    pub nodes: Vec<NodeEntry>,
    pub paths: Vec<Vec<usize>>,
    pub tensors: TensorPayload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeEntry {
    pub id: usize,
    pub parent: usize,
    pub len: usize,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub visible: BTreeMap<usize, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorPayload {
    pub keys: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub queries: Option<Vec<f64>>,
}

impl ForestDocument {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("forest document serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, ForestError> {
        serde_json::from_str(s).map_err(|e| ForestError::Document(e.to_string()))
    }

    /// Rebuilds the forest and query batch described by this document.
    pub fn load<T: Element>(&self) -> Result<(Forest<T>, QueryBatch<T>), ForestError> {
        let Dims { h_q, h_kv, d } = self.dims;
        let bad = |msg: String| ForestError::Document(msg);
        if self.tensors.keys.len() != self.nodes.len() || self.tensors.values.len() != self.nodes.len() {
            return Err(bad("tensor count does not match node count".into()));
        }
        let bs = self.paths.len();
        let qdata = match &self.tensors.queries {
            Some(q) => q.iter().map(|&x| T::from_f64(x)).collect(),
            None => vec![T::zero(); bs * h_q * d],
        };
        let qt = Tensor3::from_vec(bs, h_q, d, qdata).ok_or_else(|| bad("query tensor has wrong length".into()))?;
        let queries = QueryBatch::new(qt, h_kv)?;

        let mut specs = Vec::with_capacity(self.nodes.len());
        for (i, entry) in self.nodes.iter().enumerate() {
            if entry.id != i + 1 {
                return Err(bad(format!(
                    "node ids must be 1..=N in order, found {} at position {i}",
                    entry.id
                )));
            }
            let to_tensor = |xs: &[f64]| {
                Tensor3::from_vec(entry.len, h_kv, d, xs.iter().map(|&x| T::from_f64(x)).collect())
                    .ok_or_else(|| bad(format!("tensor of node {} has wrong length", entry.id)))
            };
            let mut spec = NodeSpec::new(
                NodeId(entry.parent),
                to_tensor(&self.tensors.keys[i])?,
                to_tensor(&self.tensors.values[i])?,
            );
            for (&r, &v) in &entry.visible {
                spec = spec.with_visible(RequestId(r), v);
            }
            specs.push(spec);
        }
        let paths = self
            .paths
            .iter()
            .map(|p| p.iter().map(|&n| NodeId(n)).collect())
            .collect();
        let forest = build_forest(specs, paths, &queries)?;
        Ok((forest, queries))
    }
}
