//! Orthogonality-preserving key quantization.
//!
//! Quantizing a key vector block by block leaves a residual after each block.
//! The solver distributes that residual over the not-yet-quantized channels so
//! that the accumulated error stays as orthogonal to the query subspace as the
//! regularization weight `lambda` demands. The update that achieves this is
//! closed-form: with `P = I + λQ̂ᵀQ̂` and `P_inv` partitioned at channel `tg`
//! into
//!
//! ```text
//! P_inv = [ A_t  B_tᵀ ]
//!         [ B_t  C_t  ]
//! ```
//!
//! the free channels move by `B_t · H_t · d`, where `H_t` is the last `g`
//! columns of `A_t⁻¹` and `d` is the block's quantization residual. The chain
//! `A_T⁻¹ → A_{T-1}⁻¹ → … → A_1⁻¹` is computed once per prompt by a
//! Schur-complement downdate instead of one inversion per step, which takes
//! the precomputation from O(d⁴) to O(d³).
//!
//! [`kkt_oracle`] solves the same per-iteration problem as an explicit
//! equality-constrained least-squares system; it exists so the closed form
//! can be checked against an independent route.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::quant::{quantize_group, QuantizedGroup};
use crate::subspace::QuerySubspace;

/// Condition-estimate ceiling for the trailing block in a downdate.
const CONDITION_LIMIT: f64 = 1e12;

/// Relative symmetry tolerance on downdate inputs.
const SYMMETRY_TOL: f64 = 1e-8;

/// Precomputed solver matrices, shared read-only across a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverState {
    lambda: f64,
    block: usize,
    iterations: usize,
    dim: usize,
    p_inv: DMatrix<f64>,
    a_inv_seq: Vec<DMatrix<f64>>,
    corrections: Vec<DMatrix<f64>>,
    passthrough: bool,
}

impl SolverState {
    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Channels quantized per iteration (`g`).
    pub fn block(&self) -> usize {
        self.block
    }

    /// Number of iterations `T = d / g`.
    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn p_inv(&self) -> &DMatrix<f64> {
        &self.p_inv
    }

    /// `A_t⁻¹` for `t` in `1..=T`.
    pub fn a_inv(&self, t: usize) -> &DMatrix<f64> {
        &self.a_inv_seq[t - 1]
    }

    pub fn a_inv_seq(&self) -> &[DMatrix<f64>] {
        &self.a_inv_seq
    }

    /// `B_t·H_t` for `t` in `1..T`; the per-token correction is this times the
    /// block residual.
    pub fn correction(&self, t: usize) -> &DMatrix<f64> {
        &self.corrections[t - 1]
    }

    /// True when the update step is a no-op (`λ = 0` or an empty subspace).
    pub fn is_passthrough(&self) -> bool {
        self.passthrough
    }

    /// State that performs plain per-channel quantization (no correction).
    pub fn identity(dim: usize, block: usize) -> Result<Self> {
        if block == 0 || dim % block != 0 {
            return Err(Error::BlockMismatch { block, dim });
        }
        let iterations = dim / block;
        let a_inv_seq = (1..=iterations)
            .map(|t| DMatrix::identity(t * block, t * block))
            .collect();
        let corrections = (1..iterations)
            .map(|t| DMatrix::zeros(dim - t * block, block))
            .collect();
        Ok(Self {
            lambda: 0.0,
            block,
            iterations,
            dim,
            p_inv: DMatrix::identity(dim, dim),
            a_inv_seq,
            corrections,
            passthrough: true,
        })
    }

    /// Quantize a group of key rows (`G×d`) block by block, applying the
    /// closed-form correction to the remaining channels after each block.
    ///
    /// Returns one quantized group per channel (in channel order) and the
    /// final dequantized keys: every coordinate of the result is a grid point
    /// of its channel's group.
    pub fn quantize_key_block(
        &self,
        keys: &DMatrix<f64>,
        bits: u8,
    ) -> Result<(Vec<QuantizedGroup>, DMatrix<f64>)> {
        let trace = self.quantize_key_block_traced(keys, bits)?;
        let final_keys = trace
            .snapshots
            .last()
            .expect("trace has at least the initial snapshot")
            .clone();
        let groups = trace
            .updates
            .into_iter()
            .flat_map(|u| u.channel_groups)
            .collect();
        Ok((groups, final_keys))
    }

    /// Same as [`Self::quantize_key_block`] but records every iteration:
    /// the snapshot after each block and the residual/correction pair that
    /// produced it. Used by the verification suite.
    pub fn quantize_key_block_traced(
        &self,
        keys: &DMatrix<f64>,
        bits: u8,
    ) -> Result<KeyBlockTrace> {
        if keys.ncols() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: keys.ncols(),
            });
        }
        if keys.nrows() == 0 {
            return Err(Error::EmptyMatrix);
        }
        let rows = keys.nrows();
        let (g, t_total, d) = (self.block, self.iterations, self.dim);

        let mut work = keys.clone();
        let mut snapshots = Vec::with_capacity(t_total + 1);
        let mut updates = Vec::with_capacity(t_total);
        snapshots.push(work.clone());

        for t in 1..=t_total {
            let first = (t - 1) * g;
            let mut residuals = DMatrix::zeros(rows, g);
            let mut channel_groups = Vec::with_capacity(g);
            for j in 0..g {
                let c = first + j;
                let column: Vec<f64> = work.column(c).iter().copied().collect();
                let group = quantize_group(&column, bits)?;
                let deq = group.dequantize()?;
                for i in 0..rows {
                    residuals[(i, j)] = deq[i] - work[(i, c)];
                    work[(i, c)] = deq[i];
                }
                channel_groups.push(group);
            }

            let correction = if t < t_total && !self.passthrough {
                // work[:, tg:] += residuals · (B_t H_t)ᵀ
                let update = &residuals * self.corrections[t - 1].transpose();
                work.view_mut((0, t * g), (rows, d - t * g))
                    .zip_apply(&update, |w, u| *w += u);
                update
            } else {
                DMatrix::zeros(rows, 0)
            };

            snapshots.push(work.clone());
            updates.push(KeyBlockUpdate {
                channel_groups,
                residuals,
                correction,
            });
        }

        Ok(KeyBlockTrace { snapshots, updates })
    }
}

/// One iteration's record: the per-channel groups of the quantized block, the
/// residual `d` per token, and the correction `B_t H_t d` applied to the
/// remaining channels (empty on the last iteration).
#[derive(Debug, Clone)]
pub struct KeyBlockUpdate {
    pub channel_groups: Vec<QuantizedGroup>,
    pub residuals: DMatrix<f64>,
    pub correction: DMatrix<f64>,
}

/// Full iteration history of a key-group quantization.
#[derive(Debug, Clone)]
pub struct KeyBlockTrace {
    /// `T + 1` matrices: the input, then the state after each iteration.
    pub snapshots: Vec<DMatrix<f64>>,
    pub updates: Vec<KeyBlockUpdate>,
}

/// Build the solver state for a subspace: `P_inv`, the `A_t⁻¹` chain from the
/// downdate recursion, and the per-iteration correction operators.
pub fn precompute(sub: &QuerySubspace, lambda: f64, block: usize) -> Result<SolverState> {
    let dim = sub.dim();
    if lambda < 0.0 {
        return Err(Error::NegativeLambda(lambda));
    }
    if block == 0 || dim % block != 0 {
        return Err(Error::BlockMismatch { block, dim });
    }
    if lambda == 0.0 || sub.rank() == 0 {
        let mut state = SolverState::identity(dim, block)?;
        state.lambda = lambda;
        return Ok(state);
    }

    let iterations = dim / block;
    let penalty = regularizer(sub, lambda);
    let p_inv = invert_regularizer(sub, lambda, &penalty)?;

    // A_T⁻¹ is the penalty matrix itself; walk it down one block at a time.
    let mut a_inv_seq = vec![DMatrix::zeros(0, 0); iterations];
    a_inv_seq[iterations - 1] = penalty;
    for t in (1..iterations).rev() {
        a_inv_seq[t - 1] = downdate(&a_inv_seq[t], block)?;
    }

    let mut corrections = Vec::with_capacity(iterations.saturating_sub(1));
    for t in 1..iterations {
        let tg = t * block;
        let h_t = a_inv_seq[t - 1].view((0, tg - block), (tg, block));
        let b_t = p_inv.view((tg, 0), (dim - tg, tg));
        corrections.push(&b_t * &h_t);
    }

    Ok(SolverState {
        lambda,
        block,
        iterations,
        dim,
        p_inv,
        a_inv_seq,
        corrections,
        passthrough: false,
    })
}

/// Reference construction of the same state with one direct inversion per
/// block index instead of the downdate recursion. O(d⁴); used to verify the
/// recursion and to measure the complexity gap.
pub fn precompute_direct(sub: &QuerySubspace, lambda: f64, block: usize) -> Result<SolverState> {
    let mut state = precompute(sub, lambda, block)?;
    if state.passthrough {
        return Ok(state);
    }
    state.a_inv_seq = invert_leading_blocks_direct(&state.p_inv, block)?;
    let dim = state.dim;
    state.corrections = (1..state.iterations)
        .map(|t| {
            let tg = t * block;
            let h_t = state.a_inv_seq[t - 1].view((0, tg - block), (tg, block));
            let b_t = state.p_inv.view((tg, 0), (dim - tg, tg));
            &b_t * &h_t
        })
        .collect();
    Ok(state)
}

/// Directly invert every leading `tg×tg` block of `p_inv`.
pub fn invert_leading_blocks_direct(
    p_inv: &DMatrix<f64>,
    block: usize,
) -> Result<Vec<DMatrix<f64>>> {
    let dim = p_inv.nrows();
    if block == 0 || dim % block != 0 {
        return Err(Error::BlockMismatch { block, dim });
    }
    (1..=dim / block)
        .map(|t| {
            let tg = t * block;
            p_inv
                .view((0, 0), (tg, tg))
                .clone_owned()
                .try_inverse()
                .ok_or(Error::InversionFailed)
        })
        .collect()
}

/// `I + λ Q̂ᵀ Q̂` for the subspace's scaled basis.
pub fn regularizer(sub: &QuerySubspace, lambda: f64) -> DMatrix<f64> {
    let basis = sub.basis();
    let mut penalty = basis.transpose() * basis * lambda;
    for i in 0..sub.dim() {
        penalty[(i, i)] += 1.0;
    }
    penalty
}

fn invert_regularizer(
    sub: &QuerySubspace,
    lambda: f64,
    penalty: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let dim = sub.dim();
    let rank = sub.rank();
    let mut p_inv = if rank * 4 < dim {
        // Woodbury: (I + λVᵀV)⁻¹ = I − λVᵀ(I_r + λVVᵀ)⁻¹V with V the scaled
        // basis restricted to its effective rows.
        let v = sub.basis().view((0, 0), (rank, dim)).clone_owned();
        let mut small = &v * v.transpose() * lambda;
        for i in 0..rank {
            small[(i, i)] += 1.0;
        }
        let small_inv = small.try_inverse().ok_or(Error::InversionFailed)?;
        let mut out = v.transpose() * small_inv * &v * (-lambda);
        for i in 0..dim {
            out[(i, i)] += 1.0;
        }
        out
    } else {
        penalty
            .clone()
            .cholesky()
            .map(|c| c.inverse())
            .or_else(|| penalty.clone().try_inverse())
            .ok_or(Error::InversionFailed)?
    };
    // Exact symmetry keeps the downdate chain clean.
    let transposed = p_inv.transpose();
    p_inv.zip_apply(&transposed, |a, b| *a = 0.5 * (*a + b));
    Ok(p_inv)
}

/// One Schur-complement downdate: from `A_{t+1}⁻¹` (size `(t+1)g`) to
/// `A_t⁻¹` (size `tg`), via `M − Nᵀ O⁻¹ N` on the partition
/// `[[M, Nᵀ], [N, O]]` with `O` of size `g×g`.
pub fn downdate(a_inv_next: &DMatrix<f64>, block: usize) -> Result<DMatrix<f64>> {
    let n = a_inv_next.nrows();
    if a_inv_next.ncols() != n || n <= block || block == 0 {
        return Err(Error::BlockMismatch { block, dim: n });
    }
    let scale = a_inv_next.amax();
    let mut asym = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            asym = asym.max((a_inv_next[(i, j)] - a_inv_next[(j, i)]).abs());
        }
    }
    if asym > SYMMETRY_TOL * (1.0 + scale) {
        return Err(Error::NotSymmetric(asym));
    }

    let m = n - block;
    let top_left = a_inv_next.view((0, 0), (m, m));
    let top_right = a_inv_next.view((0, m), (m, block));
    let trailing = a_inv_next.view((m, m), (block, block)).clone_owned();

    let trailing_inv = trailing.clone().try_inverse().ok_or(Error::SingularBlock {
        cond: f64::INFINITY,
    })?;
    // Amplification of the trailing solve relative to the whole matrix.
    let cond = matrix_norm1(a_inv_next) * matrix_norm1(&trailing_inv);
    if !cond.is_finite() || cond > CONDITION_LIMIT {
        return Err(Error::SingularBlock { cond });
    }

    let mut out = top_left.clone_owned();
    out.gemm(-1.0, &(&top_right * &trailing_inv), &top_right.transpose(), 1.0);
    let transposed = out.transpose();
    out.zip_apply(&transposed, |a, b| *a = 0.5 * (*a + b));
    Ok(out)
}

fn matrix_norm1(m: &DMatrix<f64>) -> f64 {
    let mut best = 0.0f64;
    for j in 0..m.ncols() {
        let s: f64 = m.column(j).iter().map(|x| x.abs()).sum();
        best = best.max(s);
    }
    best
}

/// Objective of the per-iteration update problem: `‖δ‖² + λ‖Q̂δ‖²`.
pub fn update_objective(delta: &DVector<f64>, sub: &QuerySubspace, lambda: f64) -> f64 {
    let projected = sub.basis() * delta;
    delta.norm_squared() + lambda * projected.norm_squared()
}

/// Reference solver for one iteration of the update problem.
///
/// Solves `min_δ δᵀ(I + λQ̂ᵀQ̂)δ` subject to the first `tg` coordinates of
/// `k_prev + δ` being pinned: the prefix to `fixed_prefix`, the current block
/// to `quantized_block`. Assembles the full KKT saddle system and solves it
/// densely. Returns the updated vector `k_prev + δ`.
pub fn kkt_oracle(
    k_prev: &DVector<f64>,
    fixed_prefix: &[f64],
    quantized_block: &[f64],
    q_hat: &QuerySubspace,
    lambda: f64,
) -> Result<DVector<f64>> {
    let d = k_prev.len();
    if q_hat.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: q_hat.dim(),
        });
    }
    if lambda < 0.0 {
        return Err(Error::NegativeLambda(lambda));
    }
    let tg = fixed_prefix.len() + quantized_block.len();
    if tg == 0 || tg > d {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: tg,
        });
    }

    let penalty = regularizer(q_hat, lambda);
    let size = d + tg;
    let mut kkt = DMatrix::zeros(size, size);
    for i in 0..d {
        for j in 0..d {
            kkt[(i, j)] = 2.0 * penalty[(i, j)];
        }
    }
    for i in 0..tg {
        kkt[(d + i, i)] = 1.0;
        kkt[(i, d + i)] = 1.0;
    }
    let mut rhs = DVector::zeros(size);
    for (i, &v) in fixed_prefix.iter().enumerate() {
        rhs[d + i] = v - k_prev[i];
    }
    let offset = fixed_prefix.len();
    for (i, &v) in quantized_block.iter().enumerate() {
        rhs[d + offset + i] = v - k_prev[offset + i];
    }

    let solution = kkt.lu().solve(&rhs).ok_or(Error::SingularSystem)?;
    let delta = solution.rows(0, d).clone_owned();
    Ok(k_prev + delta)
}
