//! Prefix-shared decode attention.
//!
//! Requests that share prompt prefixes keep a single copy of the shared KV
//! cache in a tree ([`forest::Forest`]). Decode attention is computed per tree
//! node against every query that shares the node ([`attention::pac`]), and the
//! per-node partial results are merged per query with a numerically stable
//! log-sum-exp reduction ([`attention::por`]). Because node sizes and sharing
//! degrees vary wildly, nodes are split into subtasks and scheduled onto a
//! fixed number of simulated blocks using a profiled cost model
//! ([`cost_model`], [`scheduler`]).
//!
//! The crate is exactly verifiable on a CPU: [`attention::naive_attention`]
//! is the full-softmax oracle, [`metrics`] counts KV reads, and
//! [`scheduler::brute_force_optimal`] solves small scheduling instances
//! exhaustively.
//!
//! See the `examples/` directory for one runnable program per capability.

pub mod attention;
pub mod cli;
pub mod cost_model;
pub mod element;
pub mod executor;
pub mod forest;
pub mod metrics;
pub mod scheduler;
pub mod tensor;
pub mod workloads;

pub use attention::{empty_partial, finalize, naive_attention, pac, por, Output, PartialResult};
pub use cost_model::{AffineCost, CostEstimator, CostTable};
pub use element::Element;
pub use executor::{execute, BlockPool};
pub use forest::{build_forest, Forest, NodeId, QueryBatch, RequestId};
pub use scheduler::{divide_and_schedule, DivisionPlan, Task};
