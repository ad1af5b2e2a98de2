//! Recursive-least-squares orthogonal projectors.
//!
//! A projector starts at the identity and absorbs one input direction per
//! rank-one update. With a constant regularizer `α` the recursion yields
//! `P = α(AAᵀ + αI)⁻¹ = I − A(αI + AᵀA)⁻¹Aᵀ` for the stacked inputs `A`,
//! which [`direct_projector`] computes independently.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::linalg::{self, mat_mul, solve_spd, sym_eigvals, Matrix};

pub const DEFAULT_ALPHA0: f64 = 1e-3;
pub const DEFAULT_LAMBDA: f64 = 0.9;

/// Counts multiply-accumulate operations as they execute.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacCounter {
    pub macs: u64,
}

impl MacCounter {
    pub fn add(&mut self, n: usize) {
        self.macs += n as u64;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrthoProjector {
    p: Matrix,
    updates_applied: u64,
    alpha0: f64,
    lambda: f64,
    n_total: u64,
}

impl OrthoProjector {
    pub fn new(d: usize, alpha0: f64, lambda: f64, n_total: u64) -> Result<Self> {
        if d == 0 {
            return Err(LabError::contract("projector dimension must be at least 1"));
        }
        if !(alpha0 > 0.0 && alpha0.is_finite()) {
            return Err(LabError::contract(format!("alpha0 must be positive, got {alpha0}")));
        }
        if !(lambda > 0.0 && lambda <= 1.0) {
            return Err(LabError::contract(format!("lambda must lie in (0, 1], got {lambda}")));
        }
        Ok(Self {
            p: Matrix::identity(d),
            updates_applied: 0,
            alpha0,
            lambda,
            n_total,
        })
    }

    /// Rebuilds a projector from stored parts (checkpoint restore).
    pub fn from_parts(p: Matrix, updates_applied: u64, alpha0: f64, lambda: f64, n_total: u64) -> Result<Self> {
        let mut fresh = Self::new(p.rows(), alpha0, lambda, n_total)?;
        if !p.is_square() {
            return Err(LabError::contract("projector matrix must be square"));
        }
        fresh.p = p;
        fresh.updates_applied = updates_applied;
        Ok(fresh)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.p
    }

    pub fn dim(&self) -> usize {
        self.p.rows()
    }

    pub fn updates_applied(&self) -> u64 {
        self.updates_applied
    }

    pub fn alpha0(&self) -> f64 {
        self.alpha0
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn n_total(&self) -> u64 {
        self.n_total
    }

    /// `α₀ · λ^(i / n_total)`.
    pub fn alpha_at(&self, i: u64) -> Result<f64> {
        if self.n_total == 0 {
            return Err(LabError::contract("alpha schedule needs n_total > 0"));
        }
        if i > self.n_total {
            return Err(LabError::contract(format!(
                "batch index {i} beyond planned total {}",
                self.n_total
            )));
        }
        Ok(self.alpha0 * self.lambda.powf(i as f64 / self.n_total as f64))
    }

    /// Rank-one update `k = P x / (α + xᵀ P x)`, `P ← P − k xᵀ P`.
    pub fn rls_update(&mut self, x: &[f64], alpha: f64) -> Result<()> {
        self.rls_update_counted(x, alpha, &mut MacCounter::default())
    }

    pub fn rls_update_counted(&mut self, x: &[f64], alpha: f64, counter: &mut MacCounter) -> Result<()> {
        let n = self.dim();
        if x.len() != n {
            return Err(LabError::contract(format!(
                "input of length {} for a {n}-dimensional projector",
                x.len()
            )));
        }
        if !(alpha > 0.0) {
            return Err(LabError::contract(format!("alpha must be positive, got {alpha}")));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(LabError::contract("projector input must be finite"));
        }

        // P x
        let mut px = vec![0.0; n];
        for (r, out) in px.iter_mut().enumerate() {
            *out = linalg::dot(self.p.row(r), x);
            counter.add(n);
        }
        // xᵀ P
        let mut xp = vec![0.0; n];
        for (r, xr) in x.iter().enumerate() {
            for (o, prc) in xp.iter_mut().zip(self.p.row(r)) {
                *o += xr * prc;
            }
            counter.add(n);
        }
        let denom = alpha + linalg::dot(x, &px);
        counter.add(n);
        let k: Vec<f64> = px.iter().map(|v| v / denom).collect();
        counter.add(n);
        for (r, kr) in k.iter().enumerate() {
            for (pv, xpc) in self.p.row_mut(r).iter_mut().zip(&xp) {
                *pv -= kr * xpc;
            }
            counter.add(n);
        }
        self.updates_applied += 1;
        Ok(())
    }

    /// Number of eigenvalues strictly above `tau`.
    pub fn effective_rank(&self, tau: f64) -> Result<usize> {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(LabError::contract(format!("tau must lie in (0, 1), got {tau}")));
        }
        Ok(self.eigenvalues()?.into_iter().filter(|v| *v > tau).count())
    }

    pub fn eigenvalues(&self) -> Result<Vec<f64>> {
        sym_eigvals(&self.p)
    }
}

/// Closed-form multiply-accumulate count of one [`OrthoProjector::rls_update`]
/// on an `n`-dimensional projector: `3n²` for `P x`, `xᵀ P` and the outer
/// update, plus `2n` for the denominator and the gain.
pub fn rls_update_macs(n: usize) -> u64 {
    let n = n as u64;
    3 * n * n + 2 * n
}

/// Oracle projector `I − A(αI + AᵀA)⁻¹Aᵀ` for the columns of `a`.
pub fn direct_projector(a: &Matrix, alpha: f64) -> Result<Matrix> {
    if !(alpha > 0.0) {
        return Err(LabError::contract(format!("alpha must be positive, got {alpha}")));
    }
    let d = a.rows();
    let m = a.cols();
    if m == 0 {
        return Ok(Matrix::identity(d));
    }
    let at = a.transpose();
    let gram = mat_mul(&at, a)?.add(&Matrix::identity(m).scale(alpha))?;
    let solved = solve_spd(&gram, &at)?;
    Matrix::identity(d).sub(&mat_mul(a, &solved)?)
}

/// One buffered mean input awaiting consumption by an orthogonal step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BufferedMean {
    pub mean: Vec<f64>,
    /// Mini-batch counter value when the mean was produced.
    pub batch_index: u64,
    /// Position in the run's sequence of accumulating batches; drives α decay.
    pub ordinal: u64,
}

/// Mean inputs gathered during the accumulating phase, in batch order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AccumBuffer {
    entries: Vec<BufferedMean>,
}

impl AccumBuffer {
    pub fn push(&mut self, entry: BufferedMean) -> Result<()> {
        if let Some(last) = self.entries.last() {
            if entry.batch_index <= last.batch_index {
                return Err(LabError::contract(format!(
                    "buffered batch index {} not after {}",
                    entry.batch_index, last.batch_index
                )));
            }
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn drain(&mut self) -> Vec<BufferedMean> {
        std::mem::take(&mut self.entries)
    }

    pub fn entries(&self) -> &[BufferedMean] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
