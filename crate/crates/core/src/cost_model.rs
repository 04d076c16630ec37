//! Profiled execution-cost estimates for one partial-attention subtask.
//!
//! A [`CostTable`] is a complete grid of measured block execution times over
//! query counts `n_q` and KV lengths `n`. Between knots the estimate is
//! bilinear: linear in `n_q` and linear in `log2(n)`. Outside the grid the
//! query is clamped to the nearest knot.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The bundled A100, d = 128 block-time profile in CSV form.
pub const BUNDLED_PROFILE_CSV: &str = include_str!("../profiles/a100_d128.csv");

/// Query-count knots of the bundled profile.
pub const PROFILE_NQ_KNOTS: [usize; 7] = [1, 2, 5, 10, 20, 50, 100];
/// KV-length knots of the bundled profile.
pub const PROFILE_N_KNOTS: [usize; 6] = [512, 1024, 2048, 4096, 8192, 16384];

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("grid cell (n_q = {n_q}, n = {n}) is missing")]
    IncompleteGrid { n_q: usize, n: usize },
    #[error("cost at (n_q = {n_q}, n = {n}) is not a positive finite number")]
    NonPositiveCost { n_q: usize, n: usize },
    #[error("grid cell (n_q = {n_q}, n = {n}) appears more than once")]
    DuplicateKnot { n_q: usize, n: usize },
    #[error("profile parse error: {0}")]
    Parse(String),
    #[error("profile is empty")]
    Empty,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Anything that can price a subtask of `n_q` queries over `n` tokens, in ms.
pub trait CostEstimator: Sync {
    fn estimate(&self, n_q: usize, n: usize) -> f64;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileMeta {
    pub d: Option<usize>,
    pub label: String,
}

/// Measured `(n_q, n) -> ms` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CostTable {
    nq_knots: Vec<usize>,
    n_knots: Vec<usize>,
    // Row-major over n: cost_ms[n_idx * nq_knots.len() + nq_idx].
    cost_ms: Vec<f64>,
    meta: ProfileMeta,
}

#[derive(Debug, Deserialize)]
struct ProfileRow {
    n_q: usize,
    n: usize,
    cost_ms: f64,
}

impl CostTable {
    /// Builds a table from a full grid; `cost_ms[i][j]` is the cost at
    /// `n_knots[i]`, `nq_knots[j]`.
    pub fn from_grid(
        nq_knots: Vec<usize>,
        n_knots: Vec<usize>,
        cost_ms: Vec<Vec<f64>>,
        meta: ProfileMeta,
    ) -> Result<Self, ProfileError> {
        if nq_knots.is_empty() || n_knots.is_empty() {
            return Err(ProfileError::Empty);
        }
        for w in nq_knots.windows(2) {
            if w[0] >= w[1] {
                return Err(ProfileError::DuplicateKnot {
                    n_q: w[1],
                    n: n_knots[0],
                });
            }
        }
        for w in n_knots.windows(2) {
            if w[0] >= w[1] {
                return Err(ProfileError::DuplicateKnot {
                    n_q: nq_knots[0],
                    n: w[1],
                });
            }
        }
        if nq_knots[0] == 0 || n_knots[0] == 0 {
            return Err(ProfileError::Parse("knots must be positive".into()));
        }
        let mut flat = Vec::with_capacity(nq_knots.len() * n_knots.len());
        for (i, &n) in n_knots.iter().enumerate() {
            let row = cost_ms
                .get(i)
                .ok_or(ProfileError::IncompleteGrid { n_q: nq_knots[0], n })?;
            for (j, &n_q) in nq_knots.iter().enumerate() {
                let c = *row.get(j).ok_or(ProfileError::IncompleteGrid { n_q, n })?;
                if !(c.is_finite() && c > 0.0) {
                    return Err(ProfileError::NonPositiveCost { n_q, n });
                }
                flat.push(c);
            }
        }
        Ok(Self {
            nq_knots,
            n_knots,
            cost_ms: flat,
            meta,
        })
    }

    /// Parses a `n_q,n,cost_ms` CSV profile.
    pub fn load_profile<R: Read>(source: R, meta: ProfileMeta) -> Result<Self, ProfileError> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
        let headers = reader.headers().map_err(|e| ProfileError::Parse(e.to_string()))?;
        if headers.iter().collect::<Vec<_>>() != ["n_q", "n", "cost_ms"] {
            return Err(ProfileError::Parse(format!(
                "expected header n_q,n,cost_ms, found {}",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut cells = BTreeMap::new();
        for row in reader.deserialize::<ProfileRow>() {
            let row = row.map_err(|e| ProfileError::Parse(e.to_string()))?;
            if row.n_q == 0 || row.n == 0 {
                return Err(ProfileError::Parse("knots must be positive".into()));
            }
            if !(row.cost_ms.is_finite() && row.cost_ms > 0.0) {
                return Err(ProfileError::NonPositiveCost { n_q: row.n_q, n: row.n });
            }
            if cells.insert((row.n, row.n_q), row.cost_ms).is_some() {
                return Err(ProfileError::DuplicateKnot { n_q: row.n_q, n: row.n });
            }
        }
        let nq_knots: Vec<usize> = cells
            .keys()
            .map(|&(_, q)| q)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let n_knots: Vec<usize> = cells
            .keys()
            .map(|&(n, _)| n)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        if cells.is_empty() {
            return Err(ProfileError::Empty);
        }
        let mut grid = Vec::with_capacity(n_knots.len());
        for &n in &n_knots {
            let mut row = Vec::with_capacity(nq_knots.len());
            for &n_q in &nq_knots {
                row.push(*cells.get(&(n, n_q)).ok_or(ProfileError::IncompleteGrid { n_q, n })?);
            }
            grid.push(row);
        }
        Self::from_grid(nq_knots, n_knots, grid, meta)
    }

    pub fn from_csv_str(csv: &str, meta: ProfileMeta) -> Result<Self, ProfileError> {
        Self::load_profile(csv.as_bytes(), meta)
    }

    pub fn from_path(path: &Path) -> Result<Self, ProfileError> {
        let file = std::fs::File::open(path)?;
        let label = path
            .file_stem()
            .map_or_else(String::new, |s| s.to_string_lossy().into_owned());
        Self::load_profile(file, ProfileMeta { d: None, label })
    }

    /// The bundled A100 profile at d = 128.
    pub fn bundled() -> Self {
        Self::from_csv_str(
            BUNDLED_PROFILE_CSV,
            ProfileMeta {
                d: Some(128),
                label: "a100_d128".into(),
            },
        )
        .expect("bundled profile is well formed")
    }

    /// Canonical CSV: header, then one row per cell ordered by `n`, then `n_q`.
    pub fn dump(&self) -> String {
        let mut s = String::from("n_q,n,cost_ms\n");
        for (i, &n) in self.n_knots.iter().enumerate() {
            for (j, &n_q) in self.nq_knots.iter().enumerate() {
                s.push_str(&format!(
                    "{},{},{}\n",
                    n_q,
                    n,
                    self.cost_ms[i * self.nq_knots.len() + j]
                ));
            }
        }
        s
    }

    pub fn nq_knots(&self) -> &[usize] {
        &self.nq_knots
    }

    pub fn n_knots(&self) -> &[usize] {
        &self.n_knots
    }

    pub fn meta(&self) -> &ProfileMeta {
        &self.meta
    }

    /// Measured cost at a grid cell, if `(n_q, n)` is a knot pair.
    pub fn knot_cost(&self, n_q: usize, n: usize) -> Option<f64> {
        let j = self.nq_knots.binary_search(&n_q).ok()?;
        let i = self.n_knots.binary_search(&n).ok()?;
        Some(self.cell(i, j))
    }

    /// All `(n_q, n, cost_ms)` cells in canonical order.
    pub fn cells(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.n_knots.iter().enumerate().flat_map(move |(i, &n)| {
            self.nq_knots
                .iter()
                .enumerate()
                .map(move |(j, &n_q)| (n_q, n, self.cell(i, j)))
        })
    }

    fn cell(&self, n_idx: usize, nq_idx: usize) -> f64 {
        self.cost_ms[n_idx * self.nq_knots.len() + nq_idx]
    }

    /// The (up to) four knot values that bound the estimate at `(n_q, n)`.
    pub fn surrounding_knots(&self, n_q: usize, n: usize) -> [f64; 4] {
        let (i0, i1, _) = bracket(&self.n_knots, n, |x| (x as f64).log2());
        let (j0, j1, _) = bracket(&self.nq_knots, n_q, |x| x as f64);
        [
            self.cell(i0, j0),
            self.cell(i0, j1),
            self.cell(i1, j0),
            self.cell(i1, j1),
        ]
    }
}

/// Locates `x` among `knots`: returns lower and upper index and the fraction
/// in `coord` space. Values outside the grid clamp to the end knot.
fn bracket(knots: &[usize], x: usize, coord: impl Fn(usize) -> f64) -> (usize, usize, f64) {
    let last = knots.len() - 1;
    match knots.binary_search(&x) {
        Ok(i) => (i, i, 0.0),
        Err(0) => (0, 0, 0.0),
        Err(i) if i > last => (last, last, 0.0),
        Err(i) => {
            let (lo, hi) = (coord(knots[i - 1]), coord(knots[i]));
            (i - 1, i, (coord(x) - lo) / (hi - lo))
        }
    }
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 0.0 {
        a
    } else {
        a + t * (b - a)
    }
}

impl CostEstimator for CostTable {
    fn estimate(&self, n_q: usize, n: usize) -> f64 {
        let (i0, i1, tn) = bracket(&self.n_knots, n, |x| (x as f64).log2());
        let (j0, j1, tq) = bracket(&self.nq_knots, n_q, |x| x as f64);
        let c00 = self.cell(i0, j0);
        let c01 = self.cell(i0, j1);
        let c10 = self.cell(i1, j0);
        let c11 = self.cell(i1, j1);
        let v = lerp(lerp(c00, c01, tq), lerp(c10, c11, tq), tn);
        let lo = c00.min(c01).min(c10).min(c11);
        let hi = c00.max(c01).max(c10).max(c11);
        v.clamp(lo, hi)
    }
}

/// Launch + bandwidth + compute proxy: `alpha + beta * n + gamma * n * n_q`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineCost {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl CostEstimator for AffineCost {
    fn estimate(&self, n_q: usize, n: usize) -> f64 {
        let (n, n_q) = (n as f64, n_q as f64);
        self.alpha + self.beta * n + self.gamma * n * n_q
    }
}

/// Evaluates the affine proxy on the bundled profile's knot grid.
pub fn profile_synthetic(alpha: f64, beta: f64, gamma: f64) -> Result<CostTable, ProfileError> {
    let model = AffineCost { alpha, beta, gamma };
    let grid = PROFILE_N_KNOTS
        .iter()
        .map(|&n| PROFILE_NQ_KNOTS.iter().map(|&q| model.estimate(q, n)).collect())
        .collect();
    CostTable::from_grid(
        PROFILE_NQ_KNOTS.to_vec(),
        PROFILE_N_KNOTS.to_vec(),
        grid,
        ProfileMeta {
            d: None,
            label: format!("synthetic(alpha={alpha}, beta={beta}, gamma={gamma})"),
        },
    )
}

/// Least-squares affine fit of a profile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineFit {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub max_residual: f64,
    pub rms_residual: f64,
}

impl AffineFit {
    pub fn model(&self) -> AffineCost {
        AffineCost {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
        }
    }
}

/// Fits `cost ≈ alpha + beta * n + gamma * n * n_q` over every grid cell.
pub fn fit_affine(table: &CostTable) -> AffineFit {
    let cells: Vec<(usize, usize, f64)> = table.cells().collect();
    let rows = cells.len();
    let features = |n_q: usize, n: usize| [1.0, n as f64, n as f64 * n_q as f64];

    // Column scaling keeps the SVD well conditioned.
    let mut scale = [0.0f64; 3];
    for &(q, n, _) in &cells {
        for (s, f) in scale.iter_mut().zip(features(q, n)) {
            *s = s.max(f.abs());
        }
    }
    let a = DMatrix::from_fn(rows, 3, |r, c| features(cells[r].0, cells[r].1)[c] / scale[c]);
    let b = DVector::from_iterator(rows, cells.iter().map(|c| c.2));
    let x = a.svd(true, true).solve(&b, 1e-14).expect("svd computed with u and v");
    let coef: Vec<f64> = (0..3).map(|c| x[c] / scale[c]).collect();

    let mut max_residual: f64 = 0.0;
    let mut sq = 0.0;
    for &(q, n, c) in &cells {
        let f = features(q, n);
        let pred = coef[0] * f[0] + coef[1] * f[1] + coef[2] * f[2];
        let r = (pred - c).abs();
        max_residual = max_residual.max(r);
        sq += r * r;
    }
    AffineFit {
        alpha: coef[0],
        beta: coef[1],
        gamma: coef[2],
        max_residual,
        rms_residual: (sq / rows as f64).sqrt(),
    }
}
