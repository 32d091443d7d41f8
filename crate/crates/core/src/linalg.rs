//! Dense linear-algebra kernels.
//!
//! Everything here is a pure, deterministic function of its inputs. The
//! singular value decomposition itself is delegated to `nalgebra`, with a
//! checked Jacobi fallback; the kernels layered on top of it (pseudo-inverse,
//! numerical rank, principal angles, the Wedin sin-theta check and block-wise
//! Procrustes alignment of perturbed decompositions) live here.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};

/// Dense real matrix used throughout the crate.
pub type Matrix = DMatrix<f64>;

/// Singular values at or below `DEFAULT_RANK_TOL * sigma_max` count as zero.
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

/// Relative tolerance used to group nearly equal singular values into blocks.
pub const GROUP_TOL: f64 = 1e-8;

const SVD_MAX_ITERS: usize = 10_000;
const JACOBI_SWEEPS: usize = 80;

pub fn ensure_finite(m: &Matrix) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite)
    }
}

/// Largest absolute entry, i.e. the entrywise infinity norm.
pub fn max_abs(m: &Matrix) -> f64 {
    m.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

/// A singular value decomposition `M = U diag(S) V^T`.
///
/// `singular_values` is non-increasing. For a thin decomposition `u` and `v`
/// have `min(rows, cols)` columns; [`full_svd`] returns square factors.
#[derive(Debug, Clone, PartialEq)]
pub struct Svd {
    pub u: Matrix,
    pub singular_values: Vec<f64>,
    pub v: Matrix,
}

impl Svd {
    pub fn reconstruct(&self) -> Matrix {
        let (m, n) = (self.u.nrows(), self.v.nrows());
        let mut sigma = Matrix::zeros(self.u.ncols(), self.v.ncols());
        for (i, s) in self.singular_values.iter().enumerate() {
            sigma[(i, i)] = *s;
        }
        let out = &self.u * sigma * self.v.transpose();
        debug_assert_eq!(out.shape(), (m, n));
        out
    }

    pub fn sigma_max(&self) -> f64 {
        self.singular_values.first().copied().unwrap_or(0.0)
    }

    /// Number of singular values above `tol * sigma_max`.
    pub fn rank(&self, tol: f64) -> usize {
        let cutoff = tol * self.sigma_max();
        self.singular_values.iter().filter(|s| **s > cutoff).count()
    }
}

/// Thin SVD with singular values sorted in non-increasing order.
///
/// The `nalgebra` decomposition is checked before it is returned: on some
/// matrices with clustered singular values its bidiagonal iteration stops
/// with a visibly wrong factorisation. Those cases are recomputed with
/// one-sided Jacobi, which is slower but accurate to working precision.
pub fn svd(m: &Matrix) -> Result<Svd> {
    ensure_finite(m)?;
    let (rows, cols) = m.shape();
    let k = rows.min(cols);
    if k == 0 {
        return Ok(Svd {
            u: Matrix::zeros(rows, 0),
            singular_values: Vec::new(),
            v: Matrix::zeros(cols, 0),
        });
    }
    if let Some(dec) = nalgebra::SVD::try_new(m.clone(), true, true, f64::EPSILON, SVD_MAX_ITERS) {
        if let (Some(u), Some(v_t)) = (dec.u, dec.v_t) {
            let candidate = Svd {
                u,
                singular_values: dec.singular_values.iter().copied().collect(),
                v: v_t.transpose(),
            };
            if is_accurate(&candidate, m) {
                return Ok(candidate);
            }
        }
    }
    let out = if rows >= cols {
        jacobi_svd(m)
    } else {
        let t = jacobi_svd(&m.transpose());
        Svd {
            u: t.v,
            singular_values: t.singular_values,
            v: t.u,
        }
    };
    if is_accurate(&out, m) {
        Ok(out)
    } else {
        Err(Error::DecompositionFailed)
    }
}

fn is_accurate(dec: &Svd, m: &Matrix) -> bool {
    let k = dec.singular_values.len();
    let sorted = dec.singular_values.windows(2).all(|w| w[0] >= w[1]);
    let finite = dec
        .singular_values
        .iter()
        .all(|s| s.is_finite() && *s >= 0.0);
    if !(sorted && finite) {
        return false;
    }
    let tol = 1e-12 * (m.nrows().max(m.ncols()) as f64);
    let eye = Matrix::identity(k, k);
    max_abs(&(dec.u.transpose() * &dec.u - &eye)) <= tol
        && max_abs(&(dec.v.transpose() * &dec.v - &eye)) <= tol
        && max_abs(&(dec.reconstruct() - m)) <= tol * m.norm()
}

/// One-sided (Hestenes) Jacobi SVD for `rows >= cols`.
fn jacobi_svd(m: &Matrix) -> Svd {
    let n = m.ncols();
    let mut a = m.clone();
    let mut v = Matrix::identity(n, n);
    for _ in 0..JACOBI_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = a.column(p).norm_squared();
                let beta = a.column(q).norm_squared();
                let gamma = a.column(p).dot(&a.column(q));
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_columns(&mut a, p, q, c, s);
                rotate_columns(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }
    let norms: Vec<f64> = a.column_iter().map(|c| c.norm()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));
    let mut u = Matrix::zeros(m.nrows(), n);
    let mut v_sorted = Matrix::zeros(n, n);
    let mut singular_values = Vec::with_capacity(n);
    // columns this small carry no reliable direction; their left singular
    // vectors are taken from the complement instead
    let floor = n as f64 * f64::EPSILON * norms[order[0]];
    let mut nonzero = 0;
    for (slot, &idx) in order.iter().enumerate() {
        let s = norms[idx];
        if s > floor {
            u.set_column(slot, &(a.column(idx) / s));
            nonzero += 1;
        }
        v_sorted.set_column(slot, &v.column(idx));
        singular_values.push(s);
    }
    if nonzero < n {
        let fill = orthonormal_complement(&u.columns(0, nonzero).into_owned());
        u.columns_mut(nonzero, n - nonzero)
            .copy_from(&fill.columns(0, n - nonzero));
    }
    Svd {
        u,
        singular_values,
        v: v_sorted,
    }
}

fn rotate_columns(a: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    for i in 0..a.nrows() {
        let (x, y) = (a[(i, p)], a[(i, q)]);
        a[(i, p)] = c * x - s * y;
        a[(i, q)] = s * x + c * y;
    }
}

/// SVD with square orthogonal factors: `u` is rows x rows and `v` is
/// cols x cols. The extra columns span the orthogonal complements.
pub fn full_svd(m: &Matrix) -> Result<Svd> {
    let thin = svd(m)?;
    Ok(Svd {
        u: complete_basis(&thin.u),
        singular_values: thin.singular_values,
        v: complete_basis(&thin.v),
    })
}

/// Extends a matrix with orthonormal columns to a square orthogonal matrix.
pub fn complete_basis(q: &Matrix) -> Matrix {
    let n = q.nrows();
    let extra = orthonormal_complement(q);
    let mut out = Matrix::zeros(n, n);
    out.columns_mut(0, q.ncols()).copy_from(q);
    out.columns_mut(q.ncols(), extra.ncols()).copy_from(&extra);
    out
}

/// Orthonormal basis of the orthogonal complement of the column space of
/// `q` (whose columns must be orthonormal).
///
/// Coordinate vectors are projected out greedily, always taking the one with
/// the largest remaining component (lowest index on ties), so the result is
/// deterministic.
pub fn orthonormal_complement(q: &Matrix) -> Matrix {
    let n = q.nrows();
    let need = n.saturating_sub(q.ncols());
    let mut basis: Vec<DVector<f64>> = q.column_iter().map(|c| c.into_owned()).collect();
    let mut out = Matrix::zeros(n, need);
    for slot in 0..need {
        let mut best: Option<(f64, DVector<f64>)> = None;
        for j in 0..n {
            let mut v = DVector::zeros(n);
            v[j] = 1.0;
            // two passes of classical Gram-Schmidt
            for _ in 0..2 {
                for b in &basis {
                    let c = b.dot(&v);
                    v.axpy(-c, b, 1.0);
                }
            }
            let norm = v.norm();
            if best.as_ref().is_none_or(|(bn, _)| norm > *bn) {
                best = Some((norm, v));
            }
        }
        let (norm, v) = best.expect("complement requested for a non-empty space");
        let v = v / norm;
        out.set_column(slot, &v);
        basis.push(v);
    }
    out
}

/// Moore-Penrose pseudo-inverse. Singular values at or below
/// `tol * sigma_max` are treated as zero; the zero matrix maps to zero.
pub fn pseudo_inverse(m: &Matrix, tol: f64) -> Result<Matrix> {
    let dec = svd(m)?;
    let cutoff = tol.max(0.0) * dec.sigma_max();
    let mut out = Matrix::zeros(m.ncols(), m.nrows());
    for (i, s) in dec.singular_values.iter().enumerate() {
        if *s > cutoff && *s > 0.0 {
            let vi = dec.v.column(i);
            let ui = dec.u.column(i);
            out += (vi * ui.transpose()) / *s;
        }
    }
    Ok(out)
}

/// Best rank-`k` approximation in Frobenius norm (truncated SVD).
pub fn truncate_rank(m: &Matrix, k: usize) -> Result<Matrix> {
    let mut dec = svd(m)?;
    for s in dec.singular_values.iter_mut().skip(k) {
        *s = 0.0;
    }
    Ok(dec.reconstruct())
}

/// Count of singular values strictly above `tol * sigma_max`.
pub fn numerical_rank(m: &Matrix, tol: f64) -> Result<usize> {
    Ok(svd(m)?.rank(tol))
}

/// Sines of the principal angles between the column spaces of `u1` and `u2`,
/// sorted in non-decreasing order.
///
/// Computed as the singular values of `(I - U1 U1^T) U2`, which keeps small
/// angles accurate.
pub fn subspace_sin_angles(u1: &Matrix, u2: &Matrix) -> Result<Vec<f64>> {
    if u1.shape() != u2.shape() {
        return Err(Error::shape("subspace_sin_angles", u1.shape(), u2.shape()));
    }
    let residual = u2 - u1 * (u1.transpose() * u2);
    let mut sines: Vec<f64> = svd(&residual)?
        .singular_values
        .into_iter()
        .map(|s| s.clamp(0.0, 1.0))
        .collect();
    sines.sort_by(|a, b| a.total_cmp(b));
    Ok(sines)
}

/// Both sides of the Wedin sin-theta inequality for the leading `k`
/// singular subspaces of a perturbed pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WedinReport {
    pub rho: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

impl WedinReport {
    pub fn slack(&self) -> f64 {
        self.rhs - self.lhs
    }
}

/// Evaluates the Wedin bound for `mbar` (reference) and `m` (perturbed).
///
/// The gap `rho` pairs the leading `k` singular values of `m` with the
/// trailing singular values of `mbar`, and the residuals are formed with the
/// leading singular vectors of `m`.
pub fn wedin_bound_check(mbar: &Matrix, m: &Matrix, k: usize) -> Result<WedinReport> {
    if mbar.shape() != m.shape() {
        return Err(Error::shape("wedin_bound_check", mbar.shape(), m.shape()));
    }
    let (rows, cols) = m.shape();
    if rows < cols {
        return Err(Error::Precondition(format!(
            "Wedin check needs rows >= cols, got {rows}x{cols}"
        )));
    }
    if k == 0 || k >= cols {
        return Err(Error::Precondition(format!(
            "leading subspace size k={k} must satisfy 1 <= k < {cols}"
        )));
    }
    let pert = svd(m)?;
    let refr = svd(mbar)?;
    let s = &pert.singular_values;
    let sbar = &refr.singular_values;

    let mut rho = s[..k].iter().copied().fold(f64::INFINITY, f64::min);
    for si in &s[..k] {
        for sj in &sbar[k..] {
            rho = rho.min((si - sj).abs());
        }
    }
    if rho <= 0.0 {
        return Err(Error::GapViolation { rho });
    }

    let u1 = pert.u.columns(0, k).into_owned();
    let v1 = pert.v.columns(0, k).into_owned();
    let u1bar = refr.u.columns(0, k).into_owned();
    let v1bar = refr.v.columns(0, k).into_owned();
    let sin_u = subspace_sin_angles(&u1, &u1bar)?;
    let sin_v = subspace_sin_angles(&v1, &v1bar)?;
    let lhs = sin_u
        .iter()
        .chain(sin_v.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();

    let diff = mbar - m;
    let right = (&diff * &v1).norm_squared();
    let left = (diff.transpose() * &u1).norm_squared();
    let rhs = (right + left).sqrt() / rho;
    Ok(WedinReport {
        rho,
        lhs,
        rhs,
        holds: lhs <= rhs + 1e-9,
    })
}

/// Orthogonal polar factor of a square matrix: the orthogonal `Q` closest to
/// `a` in Frobenius norm.
pub fn polar_factor(a: &Matrix) -> Result<Matrix> {
    if !a.is_square() {
        return Err(Error::shape(
            "polar_factor",
            (a.nrows(), a.nrows()),
            a.shape(),
        ));
    }
    if a.nrows() == 0 {
        return Ok(a.clone());
    }
    let dec = svd(a)?;
    Ok(&dec.u * dec.v.transpose())
}

/// Groups a non-increasing list into runs of nearly equal values.
///
/// A value joins the current run when it lies within `tol` (relative to the
/// run's leading value) of that leading value. Values that are zero up to
/// rounding relative to the largest value are grouped together.
pub fn group_by_tolerance(values: &[f64], tol: f64) -> Vec<Range<usize>> {
    let floor = values.first().copied().unwrap_or(0.0).abs() * f64::EPSILON;
    let mut groups = Vec::new();
    let mut start = 0;
    for i in 1..=values.len() {
        let split = i == values.len() || {
            let lead = values[start];
            (lead - values[i]).abs() > tol * lead.abs().max(floor)
        };
        if split {
            groups.push(start..i);
            start = i;
        }
    }
    groups
}

/// A decomposition `M = U C V^T` with `U`, `V` square orthogonal and `C`
/// block diagonal, aligned to a reference decomposition.
///
/// When the reference has distinct singular values the core `C` is diagonal
/// (up to rounding) and this is an ordinary SVD with signs matched to the
/// reference. Within a repeated singular value of the reference, a nearby
/// matrix generally splits the value and its singular vectors can point
/// anywhere inside the block; the aligned form keeps `U` and `V` close to the
/// reference and absorbs the splitting into a small symmetric-looking block
/// of `C` instead.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedSvd {
    pub u: Matrix,
    pub core: Matrix,
    pub v: Matrix,
}

impl AlignedSvd {
    pub fn reconstruct(&self) -> Matrix {
        &self.u * &self.core * self.v.transpose()
    }

    /// Largest off-diagonal entry of the core, relative to its largest entry.
    pub fn off_diagonal_ratio(&self) -> f64 {
        let scale = max_abs(&self.core).max(f64::MIN_POSITIVE);
        let (rows, cols) = self.core.shape();
        let mut worst = 0.0_f64;
        for i in 0..rows {
            for j in (0..cols).filter(|j| *j != i) {
                worst = worst.max(self.core[(i, j)].abs());
            }
        }
        worst / scale
    }

    /// Diagonal of the core; these are the singular values when the core is
    /// diagonal.
    pub fn core_diagonal(&self) -> Vec<f64> {
        let k = self.core.nrows().min(self.core.ncols());
        (0..k).map(|i| self.core[(i, i)]).collect()
    }

    pub fn into_svd(self) -> Svd {
        let singular_values = self.core_diagonal();
        Svd {
            u: self.u,
            singular_values,
            v: self.v,
        }
    }
}

/// An SVD of `m` rotated, block by block, onto the singular vectors of the
/// full-rank reference `mbar`.
///
/// Blocks are the groups of equal singular values of `mbar` (relative
/// tolerance [`GROUP_TOL`]); the surplus columns of the taller factor form
/// one more block. Within each block the left and right factors are each
/// rotated by the orthogonal Procrustes solution, which minimizes their
/// Frobenius distance to the reference.
pub fn perturbed_svd_align(mbar: &Matrix, m: &Matrix) -> Result<AlignedSvd> {
    if mbar.shape() != m.shape() {
        return Err(Error::shape("perturbed_svd_align", mbar.shape(), m.shape()));
    }
    ensure_finite(m)?;
    let reference = full_svd(mbar)?;
    let full = mbar.nrows().min(mbar.ncols());
    let rank = reference.rank(DEFAULT_RANK_TOL);
    if rank < full {
        return Err(Error::Precondition(format!(
            "reference matrix has numerical rank {rank}, expected full rank {full}"
        )));
    }
    let blocks = group_by_tolerance(&reference.singular_values, GROUP_TOL);
    align_to_reference(&reference, &blocks, m)
}

/// Aligns a full SVD of `m` to a full reference decomposition.
///
/// `blocks` partitions the leading singular indices of the reference; all
/// columns past the last block (on either side) form one trailing block.
pub(crate) fn align_to_reference(
    reference: &Svd,
    blocks: &[Range<usize>],
    m: &Matrix,
) -> Result<AlignedSvd> {
    let target = full_svd(m)?;
    let covered = blocks.last().map_or(0, |b| b.end);
    let mut u = target.u;
    let mut v = target.v;
    let mut u_blocks: Vec<Range<usize>> = blocks.to_vec();
    let mut v_blocks: Vec<Range<usize>> = blocks.to_vec();
    if covered < u.ncols() {
        u_blocks.push(covered..u.ncols());
    }
    if covered < v.ncols() {
        v_blocks.push(covered..v.ncols());
    }
    rotate_blocks(&mut u, &reference.u, &u_blocks)?;
    rotate_blocks(&mut v, &reference.v, &v_blocks)?;
    let core = u.transpose() * m * &v;
    Ok(AlignedSvd { u, core, v })
}

fn rotate_blocks(basis: &mut Matrix, reference: &Matrix, blocks: &[Range<usize>]) -> Result<()> {
    for b in blocks {
        let width = b.end - b.start;
        let cur = basis.columns(b.start, width).into_owned();
        let refb = reference.columns(b.start, width);
        let q = polar_factor(&(cur.transpose() * refb))?;
        basis.columns_mut(b.start, width).copy_from(&(cur * q));
    }
    Ok(())
}

/// Eigenvalues of a symmetric matrix in ascending order.
pub fn symmetric_eigenvalues(m: &Matrix) -> Result<Vec<f64>> {
    if !m.is_square() {
        return Err(Error::shape(
            "symmetric_eigenvalues",
            (m.nrows(), m.nrows()),
            m.shape(),
        ));
    }
    ensure_finite(m)?;
    if m.nrows() == 0 {
        return Ok(Vec::new());
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = nalgebra::SymmetricEigen::try_new(sym, f64::EPSILON, SVD_MAX_ITERS)
        .ok_or(Error::DecompositionFailed)?;
    let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    vals.sort_by(|a, b| a.total_cmp(b));
    Ok(vals)
}

/// Symmetric eigendecomposition with eigenvalues in descending order and the
/// matching unit eigenvectors as columns.
pub fn symmetric_eigen(m: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    if !m.is_square() {
        return Err(Error::shape(
            "symmetric_eigen",
            (m.nrows(), m.nrows()),
            m.shape(),
        ));
    }
    ensure_finite(m)?;
    let n = m.nrows();
    if n == 0 {
        return Ok((Vec::new(), Matrix::zeros(0, 0)));
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = nalgebra::SymmetricEigen::try_new(sym, f64::EPSILON, SVD_MAX_ITERS)
        .ok_or(Error::DecompositionFailed)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|a, b| {
        eig.eigenvalues[*b]
            .total_cmp(&eig.eigenvalues[*a])
            .then(a.cmp(b))
    });
    let mut vecs = Matrix::zeros(n, n);
    let mut vals = Vec::with_capacity(n);
    for (slot, idx) in order.into_iter().enumerate() {
        vals.push(eig.eigenvalues[idx]);
        vecs.set_column(slot, &eig.eigenvectors.column(idx));
    }
    Ok((vals, vecs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn assert_close(a: &Matrix, b: &Matrix, tol: f64) {
        assert_eq!(a.shape(), b.shape());
        let d = max_abs(&(a - b));
        assert!(d <= tol, "max deviation {d:e} > {tol:e}\n{a}\n{b}");
    }

    fn check_triple(m: &Matrix, dec: &Svd) {
        let scale = dec.sigma_max().max(1.0);
        assert_close(&dec.reconstruct(), m, 1e-10 * scale);
        let k = dec.u.ncols();
        assert_close(
            &(dec.u.transpose() * &dec.u),
            &Matrix::identity(k, k),
            1e-10,
        );
        let k = dec.v.ncols();
        assert_close(
            &(dec.v.transpose() * &dec.v),
            &Matrix::identity(k, k),
            1e-10,
        );
        for w in dec.singular_values.windows(2) {
            assert!(w[0] >= w[1]);
        }
        assert!(dec.singular_values.iter().all(|s| *s >= 0.0));
    }

    #[test]
    fn svd_of_identity() {
        let dec = svd(&Matrix::identity(2, 2)).unwrap();
        assert_eq!(dec.singular_values, vec![1.0, 1.0]);
        check_triple(&Matrix::identity(2, 2), &dec);
    }

    #[test]
    fn svd_of_diagonal() {
        let m = Matrix::from_diagonal(&DVector::from_vec(vec![3.0, 2.0, 1.0]));
        let dec = svd(&m).unwrap();
        for (s, e) in dec.singular_values.iter().zip([3.0, 2.0, 1.0]) {
            assert!((s - e).abs() < 1e-14);
        }
    }

    #[test]
    fn svd_random_shapes_reconstruct() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (r, c) in [(4, 3), (3, 4), (5, 5), (1, 4), (6, 1)] {
            let m = random(r, c, &mut rng);
            check_triple(&m, &svd(&m).unwrap());
            let full = full_svd(&m).unwrap();
            assert_eq!(full.u.shape(), (r, r));
            assert_eq!(full.v.shape(), (c, c));
            assert_close(
                &(full.u.transpose() * &full.u),
                &Matrix::identity(r, r),
                1e-12,
            );
            assert_close(
                &(full.v.transpose() * &full.v),
                &Matrix::identity(c, c),
                1e-12,
            );
        }
    }

    #[test]
    fn svd_rejects_nan() {
        let mut m = Matrix::identity(2, 2);
        m[(0, 1)] = f64::NAN;
        assert_eq!(svd(&m), Err(Error::NonFinite));
    }

    #[test]
    fn pinv_examples() {
        let m = Matrix::from_diagonal(&DVector::from_vec(vec![2.0, 0.0]));
        let p = pseudo_inverse(&m, DEFAULT_RANK_TOL).unwrap();
        assert_close(
            &p,
            &Matrix::from_diagonal(&DVector::from_vec(vec![0.5, 0.0])),
            1e-15,
        );
        assert_close(
            &pseudo_inverse(&Matrix::identity(3, 3), DEFAULT_RANK_TOL).unwrap(),
            &Matrix::identity(3, 3),
            1e-15,
        );
        let z = pseudo_inverse(&Matrix::zeros(2, 3), DEFAULT_RANK_TOL).unwrap();
        assert_eq!(z, Matrix::zeros(3, 2));
    }

    #[test]
    fn pinv_left_inverse_of_tall_full_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = random(4, 2, &mut rng);
        let p = pseudo_inverse(&m, DEFAULT_RANK_TOL).unwrap();
        assert_close(&(p * m), &Matrix::identity(2, 2), 1e-9);
    }

    #[test]
    fn rank_examples() {
        let m = Matrix::from_diagonal(&DVector::from_vec(vec![1.0, 1e-14]));
        assert_eq!(numerical_rank(&m, 1e-10).unwrap(), 1);
        assert_eq!(numerical_rank(&Matrix::identity(3, 3), 1e-10).unwrap(), 3);
        assert_eq!(numerical_rank(&Matrix::zeros(3, 2), 1e-10).unwrap(), 0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u = random(5, 1, &mut rng);
        let v = random(4, 1, &mut rng);
        assert_eq!(numerical_rank(&(u * v.transpose()), 1e-10).unwrap(), 1);
    }

    #[test]
    fn sin_angle_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = svd(&random(5, 2, &mut rng)).unwrap().u;
        assert!(subspace_sin_angles(&q, &q)
            .unwrap()
            .iter()
            .all(|s| *s < 1e-12));

        let e1 = Matrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let e2 = Matrix::from_column_slice(2, 1, &[0.0, 1.0]);
        let s = subspace_sin_angles(&e1, &e2).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-15);

        let h = std::f64::consts::FRAC_1_SQRT_2;
        let d = Matrix::from_column_slice(2, 1, &[h, h]);
        let s = subspace_sin_angles(&e1, &d).unwrap();
        assert!((s[0] - (std::f64::consts::PI / 4.0).sin()).abs() < 1e-15);

        let wide = Matrix::identity(2, 2);
        assert!(matches!(
            subspace_sin_angles(&e1, &wide),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn wedin_identical_matrices() {
        let m = Matrix::from_diagonal(&DVector::from_vec(vec![3.0, 2.0, 1.0]));
        let r = wedin_bound_check(&m, &m, 1).unwrap();
        assert!(r.lhs < 1e-15);
        assert!(r.holds);
    }

    #[test]
    fn wedin_small_perturbation_of_diag() {
        let mbar = Matrix::from_diagonal(&DVector::from_vec(vec![3.0, 1.0]));
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut e = random(2, 2, &mut rng);
        e *= 1e-3 / e.norm();
        let r = wedin_bound_check(&mbar, &(&mbar + e), 1).unwrap();
        assert!(r.rho > 1.9);
        assert!(r.holds, "{r:?}");
        assert!(r.lhs > 0.0);
    }

    #[test]
    fn wedin_gap_violation() {
        // leading value of m equals a trailing value of mbar
        let mbar = Matrix::from_diagonal(&DVector::from_vec(vec![2.0, 1.0]));
        let m = Matrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.5]));
        assert!(matches!(
            wedin_bound_check(&mbar, &m, 1),
            Err(Error::GapViolation { .. })
        ));
    }

    #[test]
    fn aligned_svd_identity_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mbar = random(4, 3, &mut rng);
        let a = perturbed_svd_align(&mbar, &mbar).unwrap();
        let r = full_svd(&mbar).unwrap();
        assert_close(&a.u, &r.u, 1e-10);
        assert_close(&a.v, &r.v, 1e-10);
        for (x, y) in a.core_diagonal().iter().zip(&r.singular_values) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn aligned_svd_distinct_values() {
        let mbar = Matrix::from_diagonal(&DVector::from_vec(vec![2.0, 1.0]));
        let e = Matrix::from_row_slice(2, 2, &[0.3, -0.7, 0.5, 0.2]);
        let m = &mbar + e * 1e-6;
        let a = perturbed_svd_align(&mbar, &m).unwrap();
        assert!(max_abs(&(&a.u - Matrix::identity(2, 2))) <= 1e-4);
        assert!(max_abs(&(&a.v - Matrix::identity(2, 2))) <= 1e-4);
        assert!(a.off_diagonal_ratio() < 1e-12);
        assert_close(&a.reconstruct(), &m, 1e-14);
    }

    #[test]
    fn aligned_svd_repeated_value() {
        let e = Matrix::from_row_slice(2, 2, &[0.4, 0.9, 0.9, -0.2]);
        let m = Matrix::identity(2, 2) + e * 1e-6;
        let a = perturbed_svd_align(&Matrix::identity(2, 2), &m).unwrap();
        assert!(max_abs(&(&a.u - Matrix::identity(2, 2))) <= 1e-4);
        assert!(max_abs(&(&a.v - Matrix::identity(2, 2))) <= 1e-4);
        assert_close(&a.reconstruct(), &m, 1e-14);
    }

    #[test]
    fn aligned_svd_rejects_rank_deficient_reference() {
        let mbar = Matrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0]));
        assert!(matches!(
            perturbed_svd_align(&mbar, &Matrix::identity(2, 2)),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn grouping() {
        let g = group_by_tolerance(&[3.0, 3.0 * (1.0 - 1e-10), 2.0, 1.0, 1.0, 0.0], 1e-8);
        assert_eq!(g, vec![0..2, 2..3, 3..5, 5..6]);
        assert!(group_by_tolerance(&[], 1e-8).is_empty());
    }

    #[test]
    fn complement_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = svd(&random(6, 2, &mut rng)).unwrap().u;
        let full = complete_basis(&q);
        assert_close(&(full.transpose() * &full), &Matrix::identity(6, 6), 1e-13);
    }

    #[test]
    fn eigen_descending() {
        let m = Matrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let (vals, vecs) = symmetric_eigen(&m).unwrap();
        assert!((vals[0] - 3.0).abs() < 1e-14 && (vals[1] - 1.0).abs() < 1e-14);
        assert_close(
            &(&m * &vecs),
            &(&vecs * Matrix::from_diagonal(&DVector::from_vec(vals))),
            1e-13,
        );
        assert_eq!(symmetric_eigenvalues(&m).unwrap().len(), 2);
    }
}
