//! Round-based gradient evaluation.
//!
//! A round evaluates the gradient at `R` points. With a worker budget of
//! `w`, the round is executed as `⌈R/w⌉` sequential batches and charged that
//! many sequential rounds. Results always land in the slot of their input
//! index, so completion order never leaks into the output.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use web_time::Instant;

use crate::error::{Error, Result};
use crate::potentials::GradientOracle;

/// How many gradients may be evaluated at once.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParallelWidth {
    /// One slot per point ("unlimited units").
    #[default]
    Unbounded,
    Limited(usize),
}

impl ParallelWidth {
    pub fn from_option(width: Option<usize>) -> Result<Self> {
        match width {
            None => Ok(Self::Unbounded),
            Some(0) => Err(Error::config("parallel width must be positive")),
            Some(w) => Ok(Self::Limited(w)),
        }
    }

    pub fn effective(self, points: usize) -> usize {
        match self {
            Self::Unbounded => points.max(1),
            Self::Limited(w) => w.max(1),
        }
    }

    /// Sequential rounds needed for `points` gradients.
    pub fn rounds_for(self, points: usize) -> u64 {
        points.div_ceil(self.effective(points)) as u64
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RoundPlan<'a> {
    pub points: &'a [Vec<f64>],
    pub round_index: usize,
    pub width: ParallelWidth,
}

#[derive(Clone, Debug)]
pub struct RoundResult {
    pub gradients: Vec<Vec<f64>>,
    pub wall_time: Duration,
    pub rounds_consumed: u64,
}

/// Where gradient batches run.
///
/// `Inline` evaluates on the calling thread; it is what ensembles use, where
/// parallelism comes from running chains side by side. `Pool` fans each batch
/// out over a dedicated rayon pool and is what the speedup measurements use.
/// Both charge identical round counts.
#[derive(Clone, Default)]
pub enum Executor {
    #[default]
    Inline,
    #[cfg(feature = "parallel")]
    Pool(std::sync::Arc<rayon::ThreadPool>),
}

impl std::fmt::Debug for Executor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Inline => f.write_str("Executor::Inline"),
            #[cfg(feature = "parallel")]
            Self::Pool(pool) => write!(f, "Executor::Pool({} threads)", pool.current_num_threads()),
        }
    }
}

fn evaluate(oracle: &GradientOracle<'_>, index: usize, x: &[f64], out: &mut [f64]) -> Result<()> {
    match catch_unwind(AssertUnwindSafe(|| oracle.gradient_into(x, out))) {
        Ok(Ok(())) => Ok(()),
        Ok(Err(e)) => Err(Error::Worker {
            index,
            message: e.to_string(),
        }),
        Err(panic) => {
            let message = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "worker panicked".to_string());
            Err(Error::Worker { index, message })
        }
    }
}

impl Executor {
    pub fn inline() -> Self {
        Self::Inline
    }

    /// A dedicated pool with `threads` workers.
    #[cfg(feature = "parallel")]
    pub fn pool(threads: usize) -> Result<Self> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .thread_name(|i| format!("parmid-grad-{i}"))
            .build()
            .map_err(|e| Error::config(format!("cannot build worker pool: {e}")))?;
        Ok(Self::Pool(std::sync::Arc::new(pool)))
    }

    pub fn execute_round(&self, plan: &RoundPlan<'_>, oracle: &GradientOracle<'_>) -> Result<RoundResult> {
        let p = oracle.dimension();
        let mut gradients = vec![vec![0.0; p]; plan.points.len()];
        let start = Instant::now();
        let rounds_consumed = self.execute_into(oracle, plan.points, plan.width, &mut gradients)?;
        Ok(RoundResult {
            gradients,
            wall_time: start.elapsed(),
            rounds_consumed,
        })
    }

    /// Evaluates `points` into the pre-sized `out` slots and updates the
    /// counters. Returns the number of sequential rounds charged.
    pub fn execute_into(
        &self,
        oracle: &GradientOracle<'_>,
        points: &[Vec<f64>],
        width: ParallelWidth,
        out: &mut [Vec<f64>],
    ) -> Result<u64> {
        if out.len() != points.len() {
            return Err(Error::config(format!(
                "{} output slots for {} points",
                out.len(),
                points.len()
            )));
        }
        let w = width.effective(points.len());
        let start = Instant::now();
        for (batch, (pts, slots)) in points.chunks(w).zip(out.chunks_mut(w)).enumerate() {
            let offset = batch * w;
            match self {
                Self::Inline => {
                    for (i, (x, g)) in pts.iter().zip(slots.iter_mut()).enumerate() {
                        evaluate(oracle, offset + i, x, g)?;
                    }
                }
                #[cfg(feature = "parallel")]
                Self::Pool(pool) => {
                    use rayon::prelude::*;
                    pool.install(|| {
                        pts.par_iter()
                            .zip(slots.par_iter_mut())
                            .enumerate()
                            .with_max_len(1)
                            .try_for_each(|(i, (x, g))| evaluate(oracle, offset + i, x, g))
                    })?;
                }
            }
        }
        let rounds = width.rounds_for(points.len());
        oracle.counter.add_rounds(rounds);
        oracle.counter.record_round_time(start.elapsed());
        Ok(rounds)
    }
}

/// Row-major lower-triangular weights; row `r` (0-based) holds `r + 1` entries.
#[derive(Clone, Debug, PartialEq)]
pub struct LowerTriangular {
    n: usize,
    data: Vec<f64>,
}

impl LowerTriangular {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; n * (n + 1) / 2],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let mut w = Self::zeros(rows.len());
        for (r, row) in rows.iter().enumerate() {
            if row.len() != r + 1 {
                return Err(Error::config(format!(
                    "weight row {r} has {} entries, expected {}",
                    row.len(),
                    r + 1
                )));
            }
            w.row_mut(r).copy_from_slice(row);
        }
        Ok(w)
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let start = r * (r + 1) / 2;
        &self.data[start..start + r + 1]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let start = r * (r + 1) / 2;
        &mut self.data[start..start + r + 1]
    }
}

/// `out[r] = Σ_{j ≤ r} w[r][j] g[j]`, summed in ascending `j`.
pub fn weighted_prefix_combine(gradients: &[Vec<f64>], weights: &LowerTriangular) -> Result<Vec<Vec<f64>>> {
    if weights.size() != gradients.len() {
        return Err(Error::config(format!(
            "{} weight rows for {} gradients",
            weights.size(),
            gradients.len()
        )));
    }
    let p = gradients.first().map_or(0, Vec::len);
    if gradients.iter().any(|g| g.len() != p) {
        return Err(Error::config("gradients have inconsistent lengths"));
    }
    let mut out = vec![vec![0.0; p]; gradients.len()];
    for (r, acc) in out.iter_mut().enumerate() {
        prefix_row_into(gradients, weights.row(r), acc);
    }
    Ok(out)
}

/// `acc = Σ_j w[j] g[j]` in ascending `j`, starting from zero.
#[inline]
pub(crate) fn prefix_row_into(gradients: &[Vec<f64>], row: &[f64], acc: &mut [f64]) {
    acc.fill(0.0);
    for (w, g) in row.iter().zip(gradients) {
        for (a, gi) in acc.iter_mut().zip(g) {
            *a += w * gi;
        }
    }
}
