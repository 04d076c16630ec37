//! Global-memory KV traffic and simulated speedup.

use serde::{Deserialize, Serialize};

use crate::cost_model::CostEstimator;
use crate::element::Element;
use crate::forest::{Forest, NodeId, RequestId};
use crate::scheduler::{divide_and_schedule, ScheduleError, Task};

/// How KV rows are streamed from memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Each node is read once for all requests sharing it.
    Codec,
    /// Each request reads its whole prefix on its own.
    Baseline,
}

/// Rows of K (and of V) read from global memory.
pub fn count_kv_reads<T: Element>(forest: &Forest<T>, mode: Mode) -> u64 {
    forest
        .kv_nodes()
        .map(|n| {
            let reads = match mode {
                Mode::Codec => 1,
                Mode::Baseline => n.query_set().len(),
            };
            (n.len() * reads) as u64
        })
        .sum()
}

/// `Σ n·n_q` and `Σ n` over non-root nodes.
pub fn sharing_fraction<T: Element>(forest: &Forest<T>) -> (u64, u64) {
    let num = forest.kv_nodes().map(|n| (n.len() * n.query_set().len()) as u64).sum();
    let den = forest.kv_nodes().map(|n| n.len() as u64).sum();
    (num, den)
}

/// Token-weighted mean number of requests sharing a token.
pub fn weighted_avg_sharing<T: Element>(forest: &Forest<T>) -> f64 {
    let (num, den) = sharing_fraction(forest);
    num as f64 / den as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficReport {
    pub kv_rows_codec: u64,
    pub kv_rows_baseline: u64,
    /// Rows × h_kv × d × element bytes × 2 (K and V).
    pub bytes_codec: u64,
    pub bytes_baseline: u64,
    pub reduction_ratio: f64,
    pub nq_bar: f64,
}

impl TrafficReport {
    pub fn of<T: Element>(forest: &Forest<T>) -> Self {
        let codec = count_kv_reads(forest, Mode::Codec);
        let baseline = count_kv_reads(forest, Mode::Baseline);
        let row_bytes = (forest.h_kv() * forest.d() * T::BYTES * 2) as u64;
        Self {
            kv_rows_codec: codec,
            kv_rows_baseline: baseline,
            bytes_codec: codec * row_bytes,
            bytes_baseline: baseline * row_bytes,
            reduction_ratio: baseline as f64 / codec as f64,
            nq_bar: weighted_avg_sharing(forest),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedupReport {
    pub makespan_codec: f64,
    pub makespan_baseline: f64,
    /// `makespan_baseline / makespan_codec`.
    pub ratio: f64,
}

/// One task per request covering its whole prefix, as a per-request kernel sees it.
pub fn baseline_tasks<T: Element>(forest: &Forest<T>) -> Vec<Task> {
    (0..forest.num_requests())
        .map(|r| {
            let n = forest.context_len(RequestId(r)).expect("request in range");
            Task::new(NodeId(r + 1), 1, n)
        })
        .filter(|t| t.n > 0)
        .collect()
}

/// Compares the planned makespan of shared tasks with per-request tasks.
///
/// Both sides get the same division search and greedy assignment, so an
/// unshared forest scores 1.
pub fn simulate_speedup<T: Element, E: CostEstimator + ?Sized>(
    forest: &Forest<T>,
    est: &E,
    m: usize,
) -> Result<SpeedupReport, ScheduleError> {
    let codec = divide_and_schedule(&crate::scheduler::tasks_from_forest(forest), est, m)?.makespan_ms();
    let baseline = divide_and_schedule(&baseline_tasks(forest), est, m)?.makespan_ms();
    Ok(SpeedupReport {
        makespan_codec: codec,
        makespan_baseline: baseline,
        ratio: baseline / codec,
    })
}
