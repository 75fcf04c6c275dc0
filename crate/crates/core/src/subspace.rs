//! Query subspace extraction and deviation measurement.
//!
//! Query tensors of a prompt tend to concentrate in a low-dimensional
//! subspace. We take the thin SVD of the stacked prompt queries and keep the
//! top `r` right singular directions, scaled by their singular values, as the
//! matrix that the solver regularizes against. The unscaled directions are
//! kept alongside for projections.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative singular-value cutoff below which a direction counts as numerically zero.
const RANK_CUTOFF: f64 = 1e-10;

/// Top singular directions of a query matrix.
///
/// `basis` rows are singular vectors scaled by their singular values, in
/// decreasing singular-value order; `orthonormal_basis` holds the unscaled
/// vectors. Both have the requested number of rows; rows past the effective
/// rank are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySubspace {
    basis: DMatrix<f64>,
    orthonormal_basis: DMatrix<f64>,
    singular_values: Vec<f64>,
    rank: usize,
    dim: usize,
}

impl QuerySubspace {
    /// Rebuild from stored parts; used by deserialization.
    pub fn from_parts(
        basis: DMatrix<f64>,
        orthonormal_basis: DMatrix<f64>,
        singular_values: Vec<f64>,
        rank: usize,
    ) -> Result<Self> {
        let dim = basis.ncols();
        if basis.nrows() != orthonormal_basis.nrows()
            || orthonormal_basis.ncols() != dim
            || singular_values.len() != basis.nrows()
            || rank > basis.nrows()
        {
            return Err(Error::Manifest("inconsistent subspace parts".into()));
        }
        Ok(Self {
            basis,
            orthonormal_basis,
            singular_values,
            rank,
            dim,
        })
    }

    /// Singular-value-scaled directions, one per row.
    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    /// Orthonormal directions, one per row.
    pub fn orthonormal_basis(&self) -> &DMatrix<f64> {
        &self.orthonormal_basis
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    /// Effective rank: requested rank capped at the numerical rank.
    pub fn rank(&self) -> usize {
        self.rank
    }

    /// Number of rows in the basis matrices (the requested rank).
    pub fn requested_rank(&self) -> usize {
        self.basis.nrows()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Orthogonal projection of `q` onto the subspace.
    pub fn project(&self, q: &DVector<f64>) -> Result<DVector<f64>> {
        if q.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: q.len(),
            });
        }
        let mut out = DVector::zeros(self.dim);
        for i in 0..self.rank {
            let row = self.orthonormal_basis.row(i);
            let coeff = row.transpose().dot(q);
            out.axpy(coeff, &row.transpose(), 1.0);
        }
        Ok(out)
    }

    /// Distance of `q` from the subspace, `‖q − Proj(q)‖₂`.
    pub fn deviation(&self, q: &DVector<f64>) -> Result<f64> {
        let proj = self.project(q)?;
        Ok((q - proj).norm())
    }
}

/// Build the subspace from the thin SVD of `queries` (rows are query vectors).
///
/// The sign of each direction is fixed so its largest-magnitude component is
/// positive. If `rank` exceeds the numerical rank, trailing rows are zero and
/// the effective rank is capped.
pub fn build_subspace(queries: &DMatrix<f64>, rank: usize) -> Result<QuerySubspace> {
    let (n, d) = queries.shape();
    if n == 0 || d == 0 {
        return Err(Error::EmptyMatrix);
    }
    if rank < 1 || rank > d {
        return Err(Error::InvalidRank { rank, dim: d });
    }

    let svd = queries.clone().svd(false, true);
    let v_t = svd.v_t.ok_or(Error::InversionFailed)?;
    let mut spectrum: Vec<(f64, usize)> = svd
        .singular_values
        .iter()
        .copied()
        .enumerate()
        .map(|(i, s)| (s, i))
        .collect();
    // nalgebra returns them sorted, but the ordering is load-bearing here.
    spectrum.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));

    let sigma_max = spectrum.first().map(|&(s, _)| s).unwrap_or(0.0);
    let numerical_rank = spectrum
        .iter()
        .take_while(|&&(s, _)| s > RANK_CUTOFF * sigma_max && s > 0.0)
        .count();
    let effective = rank.min(numerical_rank).min(n);

    let mut orthonormal = DMatrix::zeros(rank, d);
    let mut scaled = DMatrix::zeros(rank, d);
    let mut singular_values = vec![0.0; rank];
    for (row, &(sigma, src)) in spectrum.iter().take(effective).enumerate() {
        let mut direction: Vec<f64> = v_t.row(src).iter().copied().collect();
        let mut max_abs = 0.0;
        let mut max_idx = 0;
        for (j, &x) in direction.iter().enumerate() {
            if x.abs() > max_abs {
                max_abs = x.abs();
                max_idx = j;
            }
        }
        if direction[max_idx] < 0.0 {
            for x in direction.iter_mut() {
                *x = -*x;
            }
        }
        for (j, &x) in direction.iter().enumerate() {
            orthonormal[(row, j)] = x;
            scaled[(row, j)] = sigma * x;
        }
        singular_values[row] = sigma;
    }

    Ok(QuerySubspace {
        basis: scaled,
        orthonormal_basis: orthonormal,
        singular_values,
        rank: effective,
        dim: d,
    })
}

/// Stack matrices row-wise; used to pool query heads that share one KV head.
pub fn concat_rows(mats: &[&DMatrix<f64>]) -> Result<DMatrix<f64>> {
    if mats.is_empty() {
        return Err(Error::EmptyMatrix);
    }
    let d = mats[0].ncols();
    let total: usize = mats.iter().map(|m| m.nrows()).sum();
    let mut out = DMatrix::zeros(total, d);
    let mut row = 0;
    for m in mats {
        if m.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                actual: m.ncols(),
            });
        }
        out.view_mut((row, 0), (m.nrows(), d)).copy_from(*m);
        row += m.nrows();
    }
    Ok(out)
}

/// Mean deviation of (normalized) rows from the rank-`r` subspace, for every
/// `r` in `1..=max_rank`, from a single SVD.
pub fn mean_deviation_curve(queries: &DMatrix<f64>, max_rank: usize) -> Result<Vec<f64>> {
    let sub = build_subspace(queries, max_rank)?;
    deviation_curve_for(&sub, queries)
}

/// Mean deviation of (normalized) `rows` from the leading `r` directions of
/// `sub`, for every `r` up to the subspace's requested rank.
///
/// Uses the Pythagorean split `dev²(r) = ‖q‖² − Σ_{i≤r} ⟨q, u_i⟩²`, so the
/// curve is monotone non-increasing by construction and matches per-rank
/// [`build_subspace`] calls on the same matrix.
pub fn deviation_curve_for(sub: &QuerySubspace, rows: &DMatrix<f64>) -> Result<Vec<f64>> {
    if rows.ncols() != sub.dim() {
        return Err(Error::DimensionMismatch {
            expected: sub.dim(),
            actual: rows.ncols(),
        });
    }
    let max_rank = sub.requested_rank();
    let n = rows.nrows();
    let mut curve = vec![0.0; max_rank];
    for i in 0..n {
        let q = rows.row(i).transpose();
        let norm = q.norm();
        if norm == 0.0 {
            continue;
        }
        let qn = &q / norm;
        let mut remaining = qn.norm_squared();
        for r in 0..max_rank {
            if r < sub.rank() {
                let c = sub.orthonormal_basis.row(r).transpose().dot(&qn);
                remaining -= c * c;
            }
            curve[r] += remaining.max(0.0).sqrt();
        }
    }
    for v in curve.iter_mut() {
        *v /= n as f64;
    }
    Ok(curve)
}
