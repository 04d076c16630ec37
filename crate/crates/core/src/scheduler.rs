//! Task division and block scheduling.
//!
//! Each KV node becomes a task `(n_q, n)`. A task may be split along the token
//! axis into `b_k` contiguous slices (the query axis is never split, `b_q = 1`).
//! Subtasks are placed on `m` blocks to minimize the largest block load, with
//! each subtask priced by a [`CostEstimator`].
//!
//! The search is pruned the same way for every instance: bisect a lower bound
//! on the achievable makespan, cap each task's split count at
//! `ceil(C(task) / lower_bound)`, then enumerate all split vectors within the
//! caps and schedule each one with longest-processing-time-first.

use std::collections::HashSet;
use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost_model::CostEstimator;
use crate::element::Element;
use crate::forest::{Forest, NodeId};

/// Default bound on the number of split vectors enumerated exhaustively.
pub const DEFAULT_SEARCH_LIMIT: u64 = 1_000_000;

const MAX_DESCENT_PASSES: usize = 16;

/// Plan ordering: makespan, then subtask count, then split counts.
type Key = (f64, usize, Vec<usize>);

/// Largest instance [`brute_force_optimal`] accepts.
pub const BRUTE_FORCE_MAX_TASKS: usize = 4;
pub const BRUTE_FORCE_MAX_CAP: usize = 8;
pub const BRUTE_FORCE_MAX_BLOCKS: usize = 4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScheduleError {
    #[error("at least one block is required")]
    NoBlocks,
    #[error("no tasks to schedule")]
    NoTasks,
    #[error("instance too large for exhaustive search (t <= 4, caps <= 8, m <= 4)")]
    InstanceTooLarge,
    #[error("task {task} cannot be split into {b_k} non-empty slices")]
    InvalidDivision { task: usize, b_k: usize },
}

/// Partial attention work of one node: `n_q` sharing queries over `n` tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub node: NodeId,
    pub n_q: usize,
    pub n: usize,
    /// Set when tasks are expanded per KV head.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kv_head: Option<usize>,
}

impl Task {
    pub fn new(node: NodeId, n_q: usize, n: usize) -> Self {
        Self {
            node,
            n_q,
            n,
            kv_head: None,
        }
    }
}

/// One task per non-root node with `n_q = |I_n|` and `n = |n|`.
pub fn tasks_from_forest<T: Element>(forest: &Forest<T>) -> Vec<Task> {
    forest
        .kv_nodes()
        .map(|node| Task::new(node.id(), node.query_set().len(), node.len()))
        .collect()
}

/// Replicates every task once per KV head. Only used for planning studies;
/// the executor runs per-node plans.
pub fn expand_heads(tasks: &[Task], h_kv: usize) -> Vec<Task> {
    tasks
        .iter()
        .flat_map(|t| (0..h_kv).map(move |h| Task { kv_head: Some(h), ..*t }))
        .collect()
}

/// Token ranges of a `b_k`-way split: slices of `ceil(n / b_k)` tokens, the
/// last one possibly shorter.
pub fn slice_ranges(n: usize, b_k: usize) -> Vec<Range<usize>> {
    if b_k == 0 || n == 0 {
        return Vec::new();
    }
    let size = n.div_ceil(b_k);
    (0..n).step_by(size).map(|s| s..(s + size).min(n)).collect()
}

/// True when `b_k` slices of `ceil(n / b_k)` tokens are all non-empty.
pub fn is_exact_split(n: usize, b_k: usize) -> bool {
    b_k >= 1 && b_k <= n && n.div_ceil(n.div_ceil(b_k)) == b_k
}

fn slice_costs<E: CostEstimator + ?Sized>(task: &Task, b_k: usize, est: &E) -> Vec<f64> {
    slice_ranges(task.n, b_k)
        .into_iter()
        .map(|r| est.estimate(task.n_q, r.len()))
        .collect()
}

/// Every distinct exact split of a task with its total and largest subtask cost.
fn split_profile<E: CostEstimator + ?Sized>(task: &Task, est: &E) -> Vec<(usize, f64, f64)> {
    let n = task.n;
    let mut out = Vec::new();
    let mut b = 1;
    while b <= n {
        let size = n.div_ceil(b);
        let count = n.div_ceil(size);
        let full = est.estimate(task.n_q, size);
        let last = est.estimate(task.n_q, n - (count - 1) * size);
        out.push((count, full * (count - 1) as f64 + last, full.max(last)));
        if size == 1 {
            break;
        }
        b = n.div_ceil(size - 1);
    }
    out
}

/// Lower bound on the makespan of any split-and-schedule of `tasks` on `m` blocks.
///
/// For a candidate makespan `c`, each task must be split finely enough that
/// every subtask costs at most `c`; the cheapest such split gives the least
/// total work `W_j(c)`. Since the largest block load is at least the average,
/// `c` is feasible only if `sum_j W_j(c) <= m * c`. The predicate is monotone
/// in `c`, and the returned value is the largest `c` found infeasible by
/// bisection, within `1e-12` relative of the threshold.
pub fn lower_bound<E: CostEstimator + ?Sized>(tasks: &[Task], est: &E, m: usize) -> Result<f64, ScheduleError> {
    if m == 0 {
        return Err(ScheduleError::NoBlocks);
    }
    if tasks.is_empty() {
        return Err(ScheduleError::NoTasks);
    }
    let profiles: Vec<_> = tasks.iter().map(|t| split_profile(t, est)).collect();
    let feasible = |c: f64| {
        let mut work = 0.0;
        for prof in &profiles {
            let best = prof
                .iter()
                .filter(|&&(_, _, max)| max <= c)
                .map(|&(_, total, _)| total)
                .fold(f64::INFINITY, f64::min);
            work += best;
        }
        work <= m as f64 * c
    };
    let mut lo = 0.0;
    let mut hi: f64 = tasks.iter().map(|t| est.estimate(t.n_q, t.n)).sum();
    debug_assert!(feasible(hi));
    for _ in 0..200 {
        if hi - lo <= 1e-12 * hi {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if feasible(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(lo)
}

/// Upper bound on the split count of each task: `ceil(C(task) / cost_l)`,
/// never more than the token count.
pub fn division_caps<E: CostEstimator + ?Sized>(tasks: &[Task], est: &E, cost_l: f64) -> Vec<usize> {
    tasks
        .iter()
        .map(|t| {
            let ratio = est.estimate(t.n_q, t.n) / cost_l;
            // Absorbs the bisection error of cost_l.
            let cap = (ratio - 1e-6).ceil().max(1.0);
            (cap as usize).min(t.n).max(1)
        })
        .collect()
}

/// Subtask-to-block mapping with per-block loads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub block_of: Vec<usize>,
    pub loads: Vec<f64>,
}

impl Assignment {
    pub fn makespan(&self) -> f64 {
        self.loads.iter().copied().fold(0.0, f64::max)
    }

    pub fn blocks(&self) -> usize {
        self.loads.len()
    }

    /// Subtask ids per block in assignment order.
    pub fn per_block(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.loads.len()];
        for (s, &b) in self.block_of.iter().enumerate() {
            out[b].push(s);
        }
        out
    }
}

/// Longest-processing-time-first list scheduling.
///
/// Costs are taken in descending order (ties by index) and each goes to the
/// least-loaded block (ties by lowest block index).
pub fn greedy_assign(costs: &[f64], m: usize) -> Result<Assignment, ScheduleError> {
    if m == 0 {
        return Err(ScheduleError::NoBlocks);
    }
    let mut order: Vec<usize> = (0..costs.len()).collect();
    order.sort_by(|&a, &b| costs[b].total_cmp(&costs[a]).then(a.cmp(&b)));
    let mut loads = vec![0.0; m];
    let mut block_of = vec![0; costs.len()];
    for i in order {
        let mut best = 0;
        for b in 1..m {
            if loads[b] < loads[best] {
                best = b;
            }
        }
        loads[best] += costs[i];
        block_of[i] = best;
    }
    Ok(Assignment { block_of, loads })
}

/// Split factors of one task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Division {
    pub b_q: usize,
    pub b_k: usize,
}

/// One token slice of one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subtask {
    pub task: usize,
    pub tokens: Range<usize>,
    pub cost_ms: f64,
}

/// How the split vector was chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    /// Every split vector within the caps was evaluated.
    Exhaustive,
    /// The cap product exceeded the search limit; tasks were tuned one at a time.
    PerTask,
    /// Split counts were given by the caller.
    Fixed,
    /// Exhaustive over splits and assignments.
    BruteForce,
}

/// Split counts, subtasks and their block assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivisionPlan {
    pub tasks: Vec<Task>,
    pub divisions: Vec<Division>,
    pub subtasks: Vec<Subtask>,
    pub assignment: Assignment,
    pub cost_l_ms: Option<f64>,
    pub search: SearchMode,
}

impl DivisionPlan {
    /// Largest block load, as priced when the plan was built.
    pub fn makespan_ms(&self) -> f64 {
        self.assignment.makespan()
    }

    pub fn total_subtasks(&self) -> usize {
        self.subtasks.len()
    }

    pub fn b_k(&self) -> Vec<usize> {
        self.divisions.iter().map(|d| d.b_k).collect()
    }

    /// Checks that every task's subtasks are all assigned exactly once and
    /// cover its tokens with contiguous, disjoint slices.
    pub fn is_consistent(&self) -> bool {
        if self.divisions.len() != self.tasks.len() || self.assignment.block_of.len() != self.subtasks.len() {
            return false;
        }
        let m = self.assignment.blocks();
        if self.assignment.block_of.iter().any(|&b| b >= m) {
            return false;
        }
        for (j, (task, div)) in self.tasks.iter().zip(&self.divisions).enumerate() {
            if div.b_q != 1 {
                return false;
            }
            let mine: Vec<&Subtask> = self.subtasks.iter().filter(|s| s.task == j).collect();
            if mine.len() != div.b_q * div.b_k {
                return false;
            }
            let mut next = 0;
            for s in mine {
                if s.tokens.start != next || s.tokens.is_empty() {
                    return false;
                }
                next = s.tokens.end;
            }
            if next != task.n {
                return false;
            }
        }
        true
    }

    /// JSON summary: per-task split, per-subtask block, makespan and bound.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "tasks": self.tasks.iter().zip(&self.divisions).map(|(t, d)| serde_json::json!({
                "node": t.node.index(),
                "n_q": t.n_q,
                "n": t.n,
                "b_q": d.b_q,
                "b_k": d.b_k,
            })).collect::<Vec<_>>(),
            "subtasks": self.subtasks.iter().map(|s| serde_json::json!({
                "task": s.task,
                "start": s.tokens.start,
                "end": s.tokens.end,
                "cost_ms": s.cost_ms,
            })).collect::<Vec<_>>(),
            "assignment": self.assignment.block_of,
            "makespan_ms": self.makespan_ms(),
            "cost_l_ms": self.cost_l_ms,
        })
    }
}

/// Largest block load with subtask costs re-priced by `est`.
pub fn makespan<E: CostEstimator + ?Sized>(plan: &DivisionPlan, est: &E) -> f64 {
    let mut loads = vec![0.0; plan.assignment.blocks()];
    for (s, &b) in plan.subtasks.iter().zip(&plan.assignment.block_of) {
        loads[b] += est.estimate(plan.tasks[s.task].n_q, s.tokens.len());
    }
    loads.into_iter().fold(0.0, f64::max)
}

fn assemble<E: CostEstimator + ?Sized>(
    tasks: &[Task],
    b_k: &[usize],
    est: &E,
    assignment: Option<Assignment>,
    m: usize,
    cost_l: Option<f64>,
    search: SearchMode,
) -> Result<DivisionPlan, ScheduleError> {
    let mut subtasks = Vec::new();
    for (j, (task, &b)) in tasks.iter().zip(b_k).enumerate() {
        if !is_exact_split(task.n, b) {
            return Err(ScheduleError::InvalidDivision { task: j, b_k: b });
        }
        for r in slice_ranges(task.n, b) {
            let cost_ms = est.estimate(task.n_q, r.len());
            subtasks.push(Subtask {
                task: j,
                tokens: r,
                cost_ms,
            });
        }
    }
    let assignment = match assignment {
        Some(a) => a,
        None => greedy_assign(&subtasks.iter().map(|s| s.cost_ms).collect::<Vec<_>>(), m)?,
    };
    Ok(DivisionPlan {
        tasks: tasks.to_vec(),
        divisions: b_k.iter().map(|&b| Division { b_q: 1, b_k: b }).collect(),
        subtasks,
        assignment,
        cost_l_ms: cost_l,
        search,
    })
}

/// Plan with caller-chosen split counts, scheduled greedily.
pub fn plan_with_divisions<E: CostEstimator + ?Sized>(
    tasks: &[Task],
    b_k: &[usize],
    est: &E,
    m: usize,
) -> Result<DivisionPlan, ScheduleError> {
    if m == 0 {
        return Err(ScheduleError::NoBlocks);
    }
    assemble(tasks, b_k, est, None, m, None, SearchMode::Fixed)
}

/// No division: one subtask per task.
pub fn identity_plan<E: CostEstimator + ?Sized>(
    tasks: &[Task],
    est: &E,
    m: usize,
) -> Result<DivisionPlan, ScheduleError> {
    plan_with_divisions(tasks, &vec![1; tasks.len()], est, m)
}

/// Splits every task into `b_k` slices, reduced to the largest exact split
/// that fits the task.
pub fn uniform_plan<E: CostEstimator + ?Sized>(
    tasks: &[Task],
    b_k: usize,
    est: &E,
    m: usize,
) -> Result<DivisionPlan, ScheduleError> {
    let divs: Vec<usize> = tasks
        .iter()
        .map(|t| {
            (1..=b_k.clamp(1, t.n))
                .rev()
                .find(|&b| is_exact_split(t.n, b))
                .unwrap_or(1)
        })
        .collect();
    plan_with_divisions(tasks, &divs, est, m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScheduleOptions {
    /// Largest cap product searched exhaustively.
    pub search_limit: u64,
    /// After the capped search, let single tasks exceed their cap (up to
    /// `max(cap, 2m)` slices) when that strictly lowers the makespan.
    pub refine: bool,
}

impl Default for ScheduleOptions {
    fn default() -> Self {
        Self {
            search_limit: DEFAULT_SEARCH_LIMIT,
            refine: true,
        }
    }
}

/// Candidate ordering: lower makespan, then fewer subtasks, then smaller split vector.
fn better(a: &Key, b: &Key) -> bool {
    a.0.total_cmp(&b.0)
        .then(a.1.cmp(&b.1))
        .then_with(|| a.2.cmp(&b.2))
        .is_lt()
}

fn evaluate(costs: &[Vec<Vec<f64>>], choice: &[usize], b_k: Vec<usize>, m: usize) -> Key {
    let flat: Vec<f64> = costs
        .iter()
        .zip(choice)
        .flat_map(|(per_b, &c)| per_b[c].iter().copied())
        .collect();
    let n = flat.len();
    let a = greedy_assign(&flat, m).expect("m > 0");
    (a.makespan(), n, b_k)
}

/// Chooses split counts and a schedule minimizing the simulated makespan.
pub fn divide_and_schedule<E: CostEstimator + ?Sized>(
    tasks: &[Task],
    est: &E,
    m: usize,
) -> Result<DivisionPlan, ScheduleError> {
    divide_and_schedule_with(tasks, est, m, &ScheduleOptions::default())
}

pub fn divide_and_schedule_with<E: CostEstimator + ?Sized>(
    tasks: &[Task],
    est: &E,
    m: usize,
    opts: &ScheduleOptions,
) -> Result<DivisionPlan, ScheduleError> {
    let cost_l = lower_bound(tasks, est, m)?;
    let caps = division_caps(tasks, est, cost_l);

    // Exact split counts per task within its cap; 1 is always first.
    let options: Vec<Vec<usize>> = tasks
        .iter()
        .zip(&caps)
        .map(|(t, &cap)| (1..=cap).filter(|&b| is_exact_split(t.n, b)).collect())
        .collect();
    let costs: Vec<Vec<Vec<f64>>> = tasks
        .iter()
        .zip(&options)
        .map(|(t, opts)| opts.iter().map(|&b| slice_costs(t, b, est)).collect())
        .collect();

    let space = options
        .iter()
        .try_fold(1u64, |acc, o| acc.checked_mul(o.len() as u64))
        .unwrap_or(u64::MAX);

    let to_bk = |choice: &[usize]| -> Vec<usize> { choice.iter().zip(&options).map(|(&c, o)| o[c]).collect() };

    let (best_choice, search) = if space <= opts.search_limit {
        let radices: Vec<usize> = options.iter().map(Vec::len).collect();
        let decode = |mut idx: u64| -> Vec<usize> {
            let mut choice = vec![0; radices.len()];
            for (c, &r) in choice.iter_mut().zip(&radices).rev() {
                *c = (idx % r as u64) as usize;
                idx /= r as u64;
            }
            choice
        };
        let best = (0..space)
            .into_par_iter()
            .map(|idx| {
                let choice = decode(idx);
                let key = evaluate(&costs, &choice, to_bk(&choice), m);
                (key, choice)
            })
            .reduce_with(|a, b| if better(&b.0, &a.0) { b } else { a })
            .expect("search space is non-empty");
        (best.1, SearchMode::Exhaustive)
    } else {
        // Tune one task at a time starting from no division.
        let b_k = descend(tasks, est, m, &options, vec![1; tasks.len()]);
        let choice = b_k
            .iter()
            .zip(&options)
            .map(|(b, o)| o.iter().position(|x| x == b).expect("in options"))
            .collect();
        (choice, SearchMode::PerTask)
    };
    let mut b_k = to_bk(&best_choice);
    if opts.refine {
        let wider: Vec<Vec<usize>> = tasks
            .iter()
            .zip(&caps)
            .map(|(t, &cap)| {
                (1..=cap.max(2 * m).min(t.n))
                    .filter(|&b| is_exact_split(t.n, b))
                    .collect()
            })
            .collect();
        b_k = descend(tasks, est, m, &wider, b_k);
    }
    assemble(tasks, &b_k, est, None, m, Some(cost_l), search)
}

/// Per-task coordinate descent over `candidates`, accepting only strictly
/// better split vectors.
fn descend<E: CostEstimator + ?Sized>(
    tasks: &[Task],
    est: &E,
    m: usize,
    candidates: &[Vec<usize>],
    mut b_k: Vec<usize>,
) -> Vec<usize> {
    let key_of = |b_k: &[usize]| {
        let costs: Vec<f64> = tasks
            .iter()
            .zip(b_k)
            .flat_map(|(t, &b)| slice_costs(t, b, est))
            .collect();
        let a = greedy_assign(&costs, m).expect("m > 0");
        (a.makespan(), costs.len(), b_k.to_vec())
    };
    let mut best = key_of(&b_k);
    for _ in 0..MAX_DESCENT_PASSES {
        let mut improved = false;
        for j in 0..tasks.len() {
            for &b in &candidates[j] {
                let mut cand = b_k.clone();
                cand[j] = b;
                let key = key_of(&cand);
                if better(&key, &best) {
                    best = key;
                    b_k = cand;
                    improved = true;
                }
            }
        }
        if !improved {
            break;
        }
    }
    b_k
}

/// Exact optimum over all split vectors within `caps` and all assignments.
/// Only for tiny instances: `t <= 4`, `caps <= 8`, `m <= 4`.
pub fn brute_force_optimal<E: CostEstimator + ?Sized>(
    tasks: &[Task],
    est: &E,
    m: usize,
    caps: &[usize],
) -> Result<DivisionPlan, ScheduleError> {
    if m == 0 {
        return Err(ScheduleError::NoBlocks);
    }
    if tasks.is_empty() {
        return Err(ScheduleError::NoTasks);
    }
    if tasks.len() > BRUTE_FORCE_MAX_TASKS
        || m > BRUTE_FORCE_MAX_BLOCKS
        || caps.len() != tasks.len()
        || caps.iter().any(|&c| c == 0 || c > BRUTE_FORCE_MAX_CAP)
    {
        return Err(ScheduleError::InstanceTooLarge);
    }
    let options: Vec<Vec<usize>> = tasks
        .iter()
        .zip(caps)
        .map(|(t, &cap)| (1..=cap).filter(|&b| is_exact_split(t.n, b)).collect())
        .collect();

    let mut best: Option<(Key, Vec<usize>)> = None;
    let mut choice = vec![0usize; tasks.len()];
    loop {
        let b_k: Vec<usize> = choice.iter().zip(&options).map(|(&c, o)| o[c]).collect();
        let costs: Vec<f64> = tasks
            .iter()
            .zip(&b_k)
            .flat_map(|(t, &b)| slice_costs(t, b, est))
            .collect();
        // No assignment beats max(largest subtask, mean load).
        let floor = (costs.iter().sum::<f64>() / m as f64).max(costs.iter().copied().fold(0.0, f64::max));
        let hopeful = (floor, costs.len(), b_k.clone());
        if best.as_ref().is_none_or(|(k, _)| better(&hopeful, k)) {
            let (span, blocks) = optimal_assignment(&costs, m);
            let key = (span, costs.len(), b_k);
            if best.as_ref().is_none_or(|(k, _)| better(&key, k)) {
                best = Some((key, blocks));
            }
        }
        // Next split vector, odometer order.
        let mut j = tasks.len();
        loop {
            if j == 0 {
                let ((_, _, b_k), blocks) = best.expect("at least one candidate");
                let mut loads = vec![0.0; m];
                let mut subtask_costs = Vec::new();
                for (t, &b) in tasks.iter().zip(&b_k) {
                    subtask_costs.extend(slice_costs(t, b, est));
                }
                for (c, &blk) in subtask_costs.iter().zip(&blocks) {
                    loads[blk] += c;
                }
                let assignment = Assignment {
                    block_of: blocks,
                    loads,
                };
                return assemble(tasks, &b_k, est, Some(assignment), m, None, SearchMode::BruteForce);
            }
            j -= 1;
            choice[j] += 1;
            if choice[j] < options[j].len() {
                break;
            }
            choice[j] = 0;
        }
    }
}

/// Minimum-makespan assignment by depth-first search with symmetry pruning.
fn optimal_assignment(costs: &[f64], m: usize) -> (f64, Vec<usize>) {
    let greedy = greedy_assign(costs, m).expect("m > 0");
    let mut best_span = greedy.makespan();
    let mut best = greedy.block_of;

    let mut order: Vec<usize> = (0..costs.len()).collect();
    order.sort_by(|&a, &b| costs[b].total_cmp(&costs[a]).then(a.cmp(&b)));
    let total: f64 = costs.iter().sum();
    let floor = (total / m as f64).max(costs.iter().copied().fold(0.0, f64::max));
    if best_span <= floor {
        return (best_span, best);
    }

    struct Search<'a> {
        costs: &'a [f64],
        order: &'a [usize],
        loads: Vec<f64>,
        current: Vec<usize>,
        best_span: f64,
        best: Vec<usize>,
        floor: f64,
        // (depth, sorted loads) already expanded. Items are added in a fixed
        // order, so equivalent partial assignments have bit-identical loads.
        seen: HashSet<(usize, Vec<u64>)>,
    }

    impl Search<'_> {
        fn go(&mut self, k: usize) {
            if self.best_span <= self.floor {
                return;
            }
            if k == self.order.len() {
                let span = self.loads.iter().copied().fold(0.0, f64::max);
                if span < self.best_span {
                    self.best_span = span;
                    self.best = self.current.clone();
                }
                return;
            }
            let mut key: Vec<u64> = self.loads.iter().map(|l| l.to_bits()).collect();
            key.sort_unstable();
            if !self.seen.insert((k, key)) {
                return;
            }
            let item = self.order[k];
            let c = self.costs[item];
            let mut tried: Vec<f64> = Vec::new();
            for b in 0..self.loads.len() {
                let load = self.loads[b];
                if tried.contains(&load) || load + c >= self.best_span {
                    continue;
                }
                tried.push(load);
                self.loads[b] += c;
                self.current[item] = b;
                self.go(k + 1);
                self.loads[b] = load;
            }
        }
    }

    let mut s = Search {
        costs,
        order: &order,
        loads: vec![0.0; m],
        current: vec![0; costs.len()],
        best_span,
        best: best.clone(),
        floor,
        seen: HashSet::new(),
    };
    s.go(0);
    if s.best_span < best_span {
        best_span = s.best_span;
        best = s.best;
    }
    (best_span, best)
}

/// Re-plans every `every` decode steps and otherwise keeps the previous split
/// counts, rescheduling them for the current task lengths.
#[derive(Debug)]
pub struct Replanner<'a, E: ?Sized> {
    est: &'a E,
    blocks: usize,
    every: usize,
    cached: Option<Vec<usize>>,
}

impl<'a, E: CostEstimator + ?Sized> Replanner<'a, E> {
    pub const DEFAULT_EVERY: usize = 4;

    pub fn new(est: &'a E, blocks: usize, every: usize) -> Self {
        Self {
            est,
            blocks,
            every: every.max(1),
            cached: None,
        }
    }

    /// Plan for decode step `step`; the flag reports whether the search ran.
    pub fn plan(&mut self, step: usize, tasks: &[Task]) -> Result<(DivisionPlan, bool), ScheduleError> {
        let reuse = match &self.cached {
            Some(b_k) if !step.is_multiple_of(self.every) && b_k.len() == tasks.len() => Some(b_k.clone()),
            _ => None,
        };
        if let Some(b_k) = reuse {
            let b_k: Vec<usize> = tasks
                .iter()
                .zip(b_k)
                .map(|(t, b)| (1..=b.min(t.n)).rev().find(|&x| is_exact_split(t.n, x)).unwrap_or(1))
                .collect();
            return Ok((plan_with_divisions(tasks, &b_k, self.est, self.blocks)?, false));
        }
        let plan = divide_and_schedule(tasks, self.est, self.blocks)?;
        self.cached = Some(plan.b_k());
        Ok((plan, true))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost_model::{AffineCost, CostTable};

    const LINEAR: AffineCost = AffineCost {
        alpha: 0.0,
        beta: 1.0,
        gamma: 0.0,
    };

    fn task(n_q: usize, n: usize) -> Task {
        Task::new(NodeId(1), n_q, n)
    }

    #[test]
    fn slices_use_ceiling_sizes() {
        assert_eq!(slice_ranges(10, 4), vec![0..3, 3..6, 6..9, 9..10]);
        assert_eq!(slice_ranges(8, 1), vec![0..8]);
        assert!(is_exact_split(10, 4));
        assert!(!is_exact_split(5, 4));
        assert!(!is_exact_split(3, 4));
    }

    #[test]
    fn lower_bound_linear_proxy() {
        let lb = lower_bound(&[task(1, 100)], &LINEAR, 4).unwrap();
        assert!((lb - 25.0).abs() < 1e-4);
        assert!(lb <= 25.0);
    }

    #[test]
    fn lower_bound_single_block_is_total() {
        let est = AffineCost {
            alpha: 0.5,
            beta: 0.01,
            gamma: 0.001,
        };
        let tasks = [task(2, 300), task(1, 40), task(5, 7)];
        let total: f64 = tasks.iter().map(|t| est.estimate(t.n_q, t.n)).sum();
        let lb = lower_bound(&tasks, &est, 1).unwrap();
        assert!((lb - total).abs() < 1e-4);
    }

    #[test]
    fn lower_bound_stops_at_launch_floor() {
        let table = CostTable::bundled();
        let lb = lower_bound(&[task(1, 512)], &table, 8).unwrap();
        assert!((lb - 0.036).abs() < 1e-4);
    }

    #[test]
    fn caps_from_formula() {
        assert_eq!(division_caps(&[task(1, 100)], &LINEAR, 25.0), vec![4]);
        assert_eq!(division_caps(&[task(1, 10)], &LINEAR, 25.0), vec![1]);

        let table = CostTable::bundled();
        let mut tasks = vec![task(2, 16384)];
        tasks.extend(std::iter::repeat_n(task(1, 512), 4));
        let lb = lower_bound(&tasks, &table, 4).unwrap();
        let caps = division_caps(&tasks, &table, lb);
        assert!(caps[1..].iter().all(|&c| c == 1), "{caps:?}");
        assert!(caps[0] > 1);
    }

    #[test]
    fn greedy_lpt_example() {
        let a = greedy_assign(&[5.0, 4.0, 3.0, 3.0, 2.0], 2).unwrap();
        let mut loads = a.loads.clone();
        loads.sort_by(f64::total_cmp);
        assert_eq!(loads, vec![8.0, 9.0]);
        assert_eq!(a.makespan(), 9.0);
        // Exhaustive check that 9 is optimal.
        let costs = [5.0, 4.0, 3.0, 3.0, 2.0];
        let best = (0u32..32)
            .map(|mask| {
                let a: f64 = (0..5).filter(|i| mask & (1 << i) != 0).map(|i| costs[i]).sum();
                a.max(17.0 - a)
            })
            .fold(f64::INFINITY, f64::min);
        assert_eq!(best, 9.0);
    }

    #[test]
    fn greedy_trivial_cases() {
        assert_eq!(greedy_assign(&[2.5], 3).unwrap().makespan(), 2.5);
        assert_eq!(greedy_assign(&[1.5; 4], 4).unwrap().makespan(), 1.5);
        assert_eq!(greedy_assign(&[1.0], 0), Err(ScheduleError::NoBlocks));
    }

    #[test]
    fn divide_single_task_linear() {
        let plan = divide_and_schedule(&[task(1, 100)], &LINEAR, 4).unwrap();
        assert_eq!(plan.b_k(), vec![4]);
        assert_eq!(plan.makespan_ms(), 25.0);
        assert_eq!(makespan(&plan, &LINEAR), 25.0);
        assert!(plan.is_consistent());
    }

    #[test]
    fn divide_leaves_small_tasks_alone() {
        let tasks = [task(1, 10), task(1, 10), task(1, 10)];
        let plan = divide_and_schedule(&tasks, &LINEAR, 4).unwrap();
        assert_eq!(plan.b_k(), vec![1, 1, 1]);
        assert_eq!(
            plan.makespan_ms(),
            identity_plan(&tasks, &LINEAR, 4).unwrap().makespan_ms()
        );
    }

    #[test]
    fn divide_splits_only_the_shared_root() {
        let table = CostTable::bundled();
        let mut tasks = vec![Task::new(NodeId(1), 8, 16384)];
        tasks.extend((0..8).map(|i| Task::new(NodeId(i + 2), 1, 512)));
        let plan = divide_and_schedule(&tasks, &table, 8).unwrap();
        assert!(plan.b_k()[0] > 1);
        assert!(plan.b_k()[1..].iter().all(|&b| b == 1));
        let none = identity_plan(&tasks, &table, 8).unwrap();
        assert!(plan.makespan_ms() < none.makespan_ms());
        assert!(plan.is_consistent());
    }

    #[test]
    fn brute_force_agrees_on_linear_task() {
        let plan = brute_force_optimal(&[task(1, 100)], &LINEAR, 4, &[4]).unwrap();
        assert_eq!(plan.makespan_ms(), 25.0);
        assert_eq!(plan.search, SearchMode::BruteForce);
    }

    #[test]
    fn brute_force_two_equal_tasks() {
        let plan = brute_force_optimal(&[task(1, 10), task(1, 10)], &LINEAR, 2, &[1, 1]).unwrap();
        assert_ne!(plan.assignment.block_of[0], plan.assignment.block_of[1]);
        assert_eq!(plan.makespan_ms(), 10.0);
    }

    #[test]
    fn brute_force_rejects_large_instances() {
        let tasks = vec![task(1, 10); 5];
        assert_eq!(
            brute_force_optimal(&tasks, &LINEAR, 2, &[1; 5]),
            Err(ScheduleError::InstanceTooLarge)
        );
        assert_eq!(
            brute_force_optimal(&[task(1, 10)], &LINEAR, 2, &[9]),
            Err(ScheduleError::InstanceTooLarge)
        );
        assert_eq!(
            brute_force_optimal(&[task(1, 10)], &LINEAR, 5, &[1]),
            Err(ScheduleError::InstanceTooLarge)
        );
    }

    #[test]
    fn search_limit_falls_back_per_task() {
        let tasks: Vec<Task> = (0..6).map(|i| task(1, 100 + i)).collect();
        let opts = ScheduleOptions {
            search_limit: 10,
            ..Default::default()
        };
        let plan = divide_and_schedule_with(&tasks, &LINEAR, 16, &opts).unwrap();
        assert_eq!(plan.search, SearchMode::PerTask);
        assert!(plan.is_consistent());
        assert!(plan.makespan_ms() <= identity_plan(&tasks, &LINEAR, 16).unwrap().makespan_ms());
    }

    #[test]
    fn refinement_splits_below_the_cap() {
        // The optimum splits the second task although it costs less than cost_l.
        let est = AffineCost {
            alpha: 0.047049979260814626,
            beta: 5.846626558562842e-5,
            gamma: 6.182240619162638e-8,
        };
        let tasks = [task(2, 8027), task(23, 6303), task(10, 18735), task(20, 47)];
        let capped = ScheduleOptions {
            refine: false,
            ..Default::default()
        };
        let plain = divide_and_schedule_with(&tasks, &est, 3, &capped).unwrap();
        let caps = division_caps(&tasks, &est, plain.cost_l_ms.unwrap());
        assert!(plain.b_k().iter().zip(&caps).all(|(b, c)| b <= c));
        let refined = divide_and_schedule(&tasks, &est, 3).unwrap();
        let optimum = brute_force_optimal(&tasks, &est, 3, &[4, 4, 4, 4])
            .unwrap()
            .makespan_ms();
        assert!(plain.makespan_ms() > 1.2 * optimum);
        assert!(refined.makespan_ms() <= 1.05 * optimum);
        assert!(refined.b_k().iter().zip(&caps).any(|(b, c)| b > c));
    }

    #[test]
    fn uniform_plan_clamps_to_task_length() {
        let plan = uniform_plan(&[task(1, 3), task(1, 100)], 8, &LINEAR, 4).unwrap();
        assert_eq!(plan.b_k(), vec![3, 8]);
    }

    #[test]
    fn replanner_reuses_divisions_between_replans() {
        let mut r = Replanner::new(&LINEAR, 4, 4);
        let (p0, fresh0) = r.plan(0, &[task(1, 100)]).unwrap();
        assert!(fresh0);
        let (p1, fresh1) = r.plan(1, &[task(1, 101)]).unwrap();
        assert!(!fresh1);
        assert_eq!(p0.b_k(), p1.b_k());
        let (_, fresh4) = r.plan(4, &[task(1, 104)]).unwrap();
        assert!(fresh4);
    }

    #[test]
    fn head_expansion() {
        let t = expand_heads(&[task(2, 10)], 3);
        assert_eq!(t.len(), 3);
        assert_eq!(t[2].kv_head, Some(2));
    }
}
