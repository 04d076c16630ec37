//! Two-phase execution on a simulated block pool.
//!
//! Phase one runs every subtask of a [`DivisionPlan`] as a partial attention
//! over the node's token slice and the node's sharing queries. After a single
//! barrier, phase two merges, for each request independently, the partials of
//! every slice of every node on its prefix path.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Mutex, OnceLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{finalize, pac_masked, AttentionError, Output, PartialResult};
use crate::element::Element;
use crate::forest::{Forest, NodeId, QueryBatch, RequestId};
use crate::scheduler::DivisionPlan;
use crate::tensor::Tensor3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExecError {
    #[error("plan does not match forest: {0}")]
    PlanForestMismatch(String),
    #[error("request {query} has no visible tokens")]
    NoVisibleTokens { query: usize },
    #[error("missing partial for {node} slice {slice}")]
    IncompletePartials { node: NodeId, slice: usize },
    #[error("worker count must be at least 1")]
    NoWorkers,
    #[error(transparent)]
    Attention(#[from] AttentionError),
}

/// Order in which a request's partials are merged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReduceOrder {
    /// Pairwise rounds, `ceil(log2 P)` deep.
    #[default]
    Balanced,
    /// Left fold along the path, `P - 1` deep.
    Sequential,
}

/// Fixed set of workers standing in for thread blocks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockPool {
    worker_count: usize,
    /// Fixed merge order; outputs are then bit-identical for any worker count.
    /// When false, each request folds its partials in PAC completion order.
    pub deterministic: bool,
    pub reduce: ReduceOrder,
    /// Simulated duration of one merge round, for traces.
    pub por_cost_ms: f64,
}

impl BlockPool {
    pub fn new(worker_count: usize) -> Result<Self, ExecError> {
        if worker_count == 0 {
            return Err(ExecError::NoWorkers);
        }
        Ok(Self {
            worker_count,
            deterministic: true,
            reduce: ReduceOrder::Balanced,
            por_cost_ms: 0.0,
        })
    }

    pub fn worker_count(&self) -> usize {
        self.worker_count
    }

    pub fn with_reduce(mut self, reduce: ReduceOrder) -> Self {
        self.reduce = reduce;
        self
    }

    pub fn nondeterministic(mut self) -> Self {
        self.deterministic = false;
        self
    }
}

/// One merge of two partial slots; the result replaces `left`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeStep {
    pub round: usize,
    pub left: usize,
    pub right: usize,
}

/// Balanced pairwise merge order over a request's partials, numbered along
/// its path (all slices of the first node, then the next node, ...).
///
/// Each round merges neighbours `(0,1), (2,3), ...` of the surviving slots; an
/// odd slot carries over. `P` partials take `ceil(log2 P)` rounds and `P - 1`
/// merges, and the final result lands in slot 0.
pub fn merge_schedule(slices_per_node: &[usize]) -> Vec<MergeStep> {
    let total: usize = slices_per_node.iter().sum();
    let mut live: Vec<usize> = (0..total).collect();
    let mut steps = Vec::new();
    let mut round = 0;
    while live.len() > 1 {
        let mut next = Vec::with_capacity(live.len().div_ceil(2));
        for pair in live.chunks(2) {
            if let [l, r] = *pair {
                steps.push(MergeStep {
                    round,
                    left: l,
                    right: r,
                });
            }
            next.push(pair[0]);
        }
        live = next;
        round += 1;
    }
    steps
}

/// Left fold: slot 0 absorbs slots 1, 2, ... one per round.
pub fn sequential_schedule(total: usize) -> Vec<MergeStep> {
    (1..total)
        .map(|i| MergeStep {
            round: i - 1,
            left: 0,
            right: i,
        })
        .collect()
}

/// Depth of a schedule.
pub fn round_count(steps: &[MergeStep]) -> usize {
    steps.iter().map(|s| s.round + 1).max().unwrap_or(0)
}

/// Partial of one node slice over the node's query set.
#[derive(Debug, Clone)]
pub struct SlicePartial<T> {
    pub result: PartialResult<T>,
    /// Subtask that produced it.
    pub subtask: usize,
    /// Completion order in the PAC phase.
    pub finished: u64,
}

/// Write-once store of PAC results keyed by `(node, slice index)`.
#[derive(Debug, Clone)]
pub struct PartialTree<T> {
    pub partials: BTreeMap<(NodeId, usize), SlicePartial<T>>,
    pub slices_per_node: BTreeMap<NodeId, usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pac,
    Por,
}

/// One executed unit of work.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub phase: Phase,
    pub worker: usize,
    /// PAC: subtask id. POR: merge index within the request's schedule.
    pub subtask: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub block: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub query: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub round: Option<usize>,
    /// PAC subtasks whose results flow into this merge.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub inputs: Vec<usize>,
    pub t_start_sim: f64,
    pub t_end_sim: f64,
    /// Logical clock ticks taken when the work started and ended.
    pub seq_start: u64,
    pub seq_end: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub events: Vec<TraceEvent>,
}

impl Trace {
    /// One JSON object per line, in start order.
    pub fn to_jsonl(&self) -> String {
        self.events
            .iter()
            .map(|e| serde_json::to_string(e).expect("trace event serializes") + "\n")
            .collect()
    }

    pub fn pac(&self) -> impl Iterator<Item = &TraceEvent> {
        self.events.iter().filter(|e| e.phase == Phase::Pac)
    }

    pub fn por(&self) -> impl Iterator<Item = &TraceEvent> {
        self.events.iter().filter(|e| e.phase == Phase::Por)
    }
}

struct Recorder {
    clock: AtomicU64,
    events: Mutex<Vec<TraceEvent>>,
    enabled: bool,
}

impl Recorder {
    fn new(enabled: bool) -> Self {
        Self {
            clock: AtomicU64::new(0),
            events: Mutex::new(Vec::new()),
            enabled,
        }
    }

    fn tick(&self) -> u64 {
        self.clock.fetch_add(1, Ordering::SeqCst)
    }

    fn push(&self, e: TraceEvent) {
        if self.enabled {
            self.events.lock().expect("trace lock").push(e);
        }
    }

    fn into_trace(self) -> Trace {
        let mut events = self.events.into_inner().expect("trace lock");
        events.sort_by_key(|e| e.seq_start);
        Trace { events }
    }
}

/// Runs `f(i)` for every `i < count` on `workers` threads; returns the first error.
fn run_parallel<E: Send>(
    workers: usize,
    count: usize,
    f: impl Fn(usize, usize) -> Result<(), E> + Sync,
) -> Result<(), E> {
    let cursor = AtomicUsize::new(0);
    let failure: Mutex<Option<E>> = Mutex::new(None);
    std::thread::scope(|s| {
        for w in 0..workers.min(count.max(1)) {
            let (cursor, failure, f) = (&cursor, &failure, &f);
            s.spawn(move || loop {
                let i = cursor.fetch_add(1, Ordering::Relaxed);
                if i >= count {
                    break;
                }
                if let Err(e) = f(w, i) {
                    failure.lock().expect("error lock").get_or_insert(e);
                    cursor.store(count, Ordering::Relaxed);
                    break;
                }
            });
        }
    });
    match failure.into_inner().expect("error lock") {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn check_plan<T: Element>(forest: &Forest<T>, plan: &DivisionPlan) -> Result<(), ExecError> {
    let mismatch = |m: String| Err(ExecError::PlanForestMismatch(m));
    if !plan.is_consistent() {
        return mismatch("plan subtasks do not tile their tasks".into());
    }
    let mut seen = vec![false; forest.nodes().len()];
    for t in &plan.tasks {
        if t.kv_head.is_some() {
            return mismatch("per-head tasks cannot be executed".into());
        }
        let node = forest
            .node(t.node)
            .map_err(|_| ExecError::PlanForestMismatch(format!("unknown node {}", t.node)))?;
        if t.node.is_root() || seen[t.node.index()] {
            return mismatch(format!("{} planned twice or is the root", t.node));
        }
        seen[t.node.index()] = true;
        if t.n != node.len() || t.n_q != node.query_set().len() {
            return mismatch(format!("task for {} has shape ({}, {})", t.node, t.n_q, t.n));
        }
    }
    if let Some(n) = forest.kv_nodes().find(|n| !seen[n.id().index()]) {
        return mismatch(format!("{} is not covered", n.id()));
    }
    Ok(())
}

/// Computes decode attention for every request by running `plan` on `pool`.
pub fn execute<T: Element>(
    forest: &Forest<T>,
    queries: &QueryBatch<T>,
    plan: &DivisionPlan,
    pool: &BlockPool,
) -> Result<Output<T>, ExecError> {
    run(forest, queries, plan, pool, false).map(|(o, _)| o)
}

/// [`execute`] plus the event trace of both phases.
pub fn execute_traced<T: Element>(
    forest: &Forest<T>,
    queries: &QueryBatch<T>,
    plan: &DivisionPlan,
    pool: &BlockPool,
) -> Result<(Output<T>, Trace), ExecError> {
    run(forest, queries, plan, pool, true)
}

fn run<T: Element>(
    forest: &Forest<T>,
    queries: &QueryBatch<T>,
    plan: &DivisionPlan,
    pool: &BlockPool,
    trace: bool,
) -> Result<(Output<T>, Trace), ExecError> {
    if pool.worker_count == 0 {
        return Err(ExecError::NoWorkers);
    }
    if queries.bs() != forest.num_requests() || queries.h_kv() != forest.h_kv() || queries.d() != forest.d() {
        return Err(ExecError::Attention(AttentionError::DimensionMismatch(
            "queries do not match forest".into(),
        )));
    }
    check_plan(forest, plan)?;
    for r in 0..forest.num_requests() {
        if forest.context_len(RequestId(r)).unwrap_or(0) == 0 {
            return Err(ExecError::NoVisibleTokens { query: r });
        }
    }

    // Work queue in simulated start-time order of the assigned blocks.
    let costs: Vec<f64> = plan.subtasks.iter().map(|s| s.cost_ms).collect();
    let mut sim = vec![(0.0, 0.0); plan.subtasks.len()];
    for block in plan.assignment.per_block() {
        let mut t = 0.0;
        for s in block {
            sim[s] = (t, t + costs[s]);
            t += costs[s];
        }
    }
    let mut queue: Vec<usize> = (0..plan.subtasks.len()).collect();
    queue.sort_by(|&a, &b| {
        sim[a]
            .0
            .total_cmp(&sim[b].0)
            .then(plan.assignment.block_of[a].cmp(&plan.assignment.block_of[b]))
            .then(a.cmp(&b))
    });

    // Query rows of every node, gathered once.
    let gathered: BTreeMap<NodeId, Tensor3<T>> = forest
        .kv_nodes()
        .map(|n| {
            let rows: Vec<usize> = n.query_set().iter().map(|r| r.index()).collect();
            (n.id(), queries.tensor().gather_rows(&rows))
        })
        .collect();

    let recorder = Recorder::new(trace);
    let slots: Vec<OnceLock<SlicePartial<T>>> = (0..plan.subtasks.len()).map(|_| OnceLock::new()).collect();
    run_parallel(pool.worker_count, queue.len(), |worker, i| {
        let sid = queue[i];
        let sub = &plan.subtasks[sid];
        let node = forest.node(plan.tasks[sub.task].node).expect("checked");
        let (a, b) = (sub.tokens.start, sub.tokens.end);
        let visible: Vec<usize> = node
            .query_set()
            .iter()
            .map(|&r| node.visible_len(r).saturating_sub(a).min(b - a))
            .collect();
        let seq_start = recorder.tick();
        let result = pac_masked(
            gathered[&node.id()].view(),
            node.keys().view().slice_rows(a, b),
            node.values().view().slice_rows(a, b),
            &visible,
        )?;
        let seq_end = recorder.tick();
        let _ = slots[sid].set(SlicePartial {
            result,
            subtask: sid,
            finished: seq_end,
        });
        recorder.push(TraceEvent {
            phase: Phase::Pac,
            worker,
            subtask: sid,
            block: Some(plan.assignment.block_of[sid]),
            query: None,
            round: None,
            inputs: Vec::new(),
            t_start_sim: sim[sid].0,
            t_end_sim: sim[sid].1,
            seq_start,
            seq_end,
        });
        Ok::<(), ExecError>(())
    })?;
    // The scope join above is the barrier between the two phases.

    let mut tree = PartialTree {
        partials: BTreeMap::new(),
        slices_per_node: BTreeMap::new(),
    };
    let mut slice_index: BTreeMap<usize, usize> = BTreeMap::new();
    for (sid, (slot, sub)) in slots.into_iter().zip(&plan.subtasks).enumerate() {
        let node = plan.tasks[sub.task].node;
        let idx = slice_index.entry(sub.task).or_insert(0);
        if let Some(p) = slot.into_inner() {
            tree.partials.insert((node, *idx), p);
        }
        debug_assert!(tree.partials.get(&(node, *idx)).is_none_or(|p| p.subtask == sid));
        *idx += 1;
        tree.slices_per_node.insert(node, *idx);
    }

    let barrier = plan.makespan_ms();
    let output = reduce(&tree, forest, pool, &recorder, barrier)?;
    Ok((output, recorder.into_trace()))
}

/// Merges every request's partials along its path and finalizes the output.
pub fn reduce_tree<T: Element>(
    partials: &PartialTree<T>,
    forest: &Forest<T>,
    pool: &BlockPool,
) -> Result<Output<T>, ExecError> {
    if pool.worker_count == 0 {
        return Err(ExecError::NoWorkers);
    }
    reduce(partials, forest, pool, &Recorder::new(false), 0.0)
}

fn reduce<T: Element>(
    tree: &PartialTree<T>,
    forest: &Forest<T>,
    pool: &BlockPool,
    recorder: &Recorder,
    barrier_sim: f64,
) -> Result<Output<T>, ExecError> {
    let bs = forest.num_requests();
    let rows: Vec<OnceLock<PartialResult<T>>> = (0..bs).map(|_| OnceLock::new()).collect();

    run_parallel(pool.worker_count, bs, |worker, r| {
        let request = RequestId(r);
        let path = forest.prefix_path(request).expect("request in range");
        let mut slots: Vec<PartialResult<T>> = Vec::new();
        let mut feeds: Vec<Vec<usize>> = Vec::new();
        let mut finished: Vec<u64> = Vec::new();
        let mut slices = Vec::with_capacity(path.len());
        for &n in path {
            let node = forest.node(n).expect("path nodes exist");
            let pos = node
                .query_set()
                .binary_search(&request)
                .expect("request is in the query set of its path nodes");
            let count = *tree
                .slices_per_node
                .get(&n)
                .ok_or(ExecError::IncompletePartials { node: n, slice: 0 })?;
            slices.push(count);
            for s in 0..count {
                let p = tree
                    .partials
                    .get(&(n, s))
                    .ok_or(ExecError::IncompletePartials { node: n, slice: s })?;
                slots.push(p.result.select_query(pos));
                feeds.push(vec![p.subtask]);
                finished.push(p.finished);
            }
        }

        let schedule = if !pool.deterministic {
            // Arrival order: relabel slots by completion time, then fold.
            let mut order: Vec<usize> = (0..slots.len()).collect();
            order.sort_by_key(|&i| finished[i]);
            let mut reordered = Vec::with_capacity(slots.len());
            let mut refeeds = Vec::with_capacity(slots.len());
            for &i in &order {
                reordered.push(slots[i].clone());
                refeeds.push(feeds[i].clone());
            }
            slots = reordered;
            feeds = refeeds;
            sequential_schedule(slots.len())
        } else {
            match pool.reduce {
                ReduceOrder::Balanced => merge_schedule(&slices),
                ReduceOrder::Sequential => sequential_schedule(slots.len()),
            }
        };

        for (k, step) in schedule.iter().enumerate() {
            let seq_start = recorder.tick();
            let right = slots[step.right].clone();
            slots[step.left].merge_from(&right)?;
            let moved = std::mem::take(&mut feeds[step.right]);
            feeds[step.left].extend(moved);
            let seq_end = recorder.tick();
            let t0 = barrier_sim + step.round as f64 * pool.por_cost_ms;
            let mut inputs = feeds[step.left].clone();
            inputs.sort_unstable();
            recorder.push(TraceEvent {
                phase: Phase::Por,
                worker,
                subtask: k,
                block: None,
                query: Some(r),
                round: Some(step.round),
                inputs,
                t_start_sim: t0,
                t_end_sim: t0 + pool.por_cost_ms,
                seq_start,
                seq_end,
            });
        }
        let merged = slots.swap_remove(0);
        let _ = rows[r].set(merged);
        Ok::<(), ExecError>(())
    })?;

    let (h_q, d) = {
        let first = rows[0].get().expect("every request reduced");
        (first.h_q(), first.d())
    };
    let mut out = Tensor3::zeros(bs, h_q, d);
    for (r, row) in rows.into_iter().enumerate() {
        let row = row.into_inner().expect("every request reduced");
        let fin = finalize(&row).map_err(|e| match e {
            AttentionError::NoVisibleTokens { .. } => ExecError::NoVisibleTokens { query: r },
            other => ExecError::Attention(other),
        })?;
        for h in 0..h_q {
            out.vector_mut(r, h).copy_from_slice(fin.out.vector(0, h));
        }
    }
    Ok(Output { out })
}
