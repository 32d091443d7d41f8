//! The rank-constrained shallow problem
//! `F(R) = 1/2 ||R X - Y||_F^2  subject to  rank(R) <= k`.
//!
//! Both the deep and the shallow objective carry the factor 1/2 in this
//! crate, so a deep minimum and its end-to-end matrix have identical values.
//!
//! Rotating by the SVD of `X` and then of `Y V_1` turns `F` into
//! `1/2 ||T - Sigma_2||_F^2 + c` with a diagonal target `Sigma_2` (see
//! [`ReducedProblem`]). Candidate minima of the diagonal problem are block
//! diagonal, each block a multiple of a projection, and a candidate is
//! global exactly when its rank is allocated greedily to the largest
//! singular values. Any other allocation admits the rank-preserving descent
//! path of [`descent_path`].

use std::ops::Range;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{
    full_svd, group_by_tolerance, max_abs, numerical_rank, svd, symmetric_eigen, Matrix,
    DEFAULT_RANK_TOL, GROUP_TOL,
};
use crate::model::Dataset;

/// `1/2 ||R X - Y||_F^2`.
pub fn shallow_loss(r: &Matrix, data: &Dataset) -> Result<f64> {
    let expected = (data.output_dim(), data.input_dim());
    if r.shape() != expected {
        return Err(Error::shape("shallow_loss", expected, r.shape()));
    }
    Ok(0.5 * (r * data.x() - data.y()).norm_squared())
}

/// Distinct singular values `lambda_1 > ... > lambda_r >= 0` with their
/// multiplicities.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockSpectrum {
    values: Vec<f64>,
    multiplicities: Vec<usize>,
}

impl BlockSpectrum {
    pub fn new(values: Vec<f64>, multiplicities: Vec<usize>) -> Result<Self> {
        if values.len() != multiplicities.len() {
            return Err(Error::Dimension {
                context: "block spectrum",
                expected: format!("{} multiplicities", values.len()),
                found: multiplicities.len().to_string(),
            });
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Precondition(
                "block values must be finite and non-negative".into(),
            ));
        }
        if values.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::Precondition(
                "block values must be strictly decreasing".into(),
            ));
        }
        if multiplicities.contains(&0) {
            return Err(Error::Precondition(
                "multiplicities must be positive".into(),
            ));
        }
        Ok(Self {
            values,
            multiplicities,
        })
    }

    /// Groups a list of singular values (any order) into blocks using the
    /// relative tolerance [`GROUP_TOL`]. Each block takes its largest member
    /// as its value.
    pub fn from_singular_values(singular_values: &[f64]) -> Self {
        let mut sorted: Vec<f64> = singular_values.iter().map(|s| s.max(0.0)).collect();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let groups = group_by_tolerance(&sorted, GROUP_TOL);
        Self {
            values: groups.iter().map(|g| sorted[g.start]).collect(),
            multiplicities: groups.iter().map(|g| g.len()).collect(),
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn multiplicities(&self) -> &[usize] {
        &self.multiplicities
    }

    pub fn num_blocks(&self) -> usize {
        self.values.len()
    }

    /// Total size `m_1 + ... + m_r`.
    pub fn dimension(&self) -> usize {
        self.multiplicities.iter().sum()
    }

    /// Index range of each block along the diagonal.
    pub fn ranges(&self) -> Vec<Range<usize>> {
        let mut at = 0;
        self.multiplicities
            .iter()
            .map(|m| {
                let r = at..at + m;
                at += m;
                r
            })
            .collect()
    }

    /// Square diagonal matrix with each value repeated by its multiplicity.
    pub fn diagonal_matrix(&self) -> Matrix {
        let n = self.dimension();
        let mut d = Matrix::zeros(n, n);
        for (r, v) in self.ranges().into_iter().zip(&self.values) {
            for i in r {
                d[(i, i)] = *v;
            }
        }
        d
    }
}

/// Per-block ranks `d_{p_1}, ..., d_{p_r}` of a candidate solution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RankAllocation {
    pub ranks: Vec<usize>,
}

impl RankAllocation {
    pub fn total(&self) -> usize {
        self.ranks.iter().sum()
    }

    /// `key: value` text form.
    pub fn to_text(&self) -> String {
        format!("ranks: {}\ntotal: {}\n", join(&self.ranks), self.total())
    }
}

fn join<T: std::fmt::Display>(items: &[T]) -> String {
    items
        .iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Greedy allocation of `k` units of rank to the largest blocks first.
/// Blocks with value zero never receive rank.
pub fn rank_allocation(spectrum: &BlockSpectrum, k: usize) -> RankAllocation {
    let mut left = k;
    let ranks = spectrum
        .values
        .iter()
        .zip(&spectrum.multiplicities)
        .map(|(v, m)| {
            if *v <= 0.0 {
                return 0;
            }
            let take = left.min(*m);
            left -= take;
            take
        })
        .collect();
    RankAllocation { ranks }
}

/// Optimal value `1/2 sum_i (m_i - d_{p_i}) lambda_i^2` of the diagonal
/// problem under the greedy allocation.
pub fn global_min_value(spectrum: &BlockSpectrum, k: usize) -> f64 {
    allocation_value(spectrum, &rank_allocation(spectrum, k))
}

/// Value `1/2 sum_i (m_i - d_{p_i}) lambda_i^2` of an arbitrary allocation.
pub fn allocation_value(spectrum: &BlockSpectrum, alloc: &RankAllocation) -> f64 {
    0.5 * spectrum
        .values
        .iter()
        .zip(&spectrum.multiplicities)
        .zip(&alloc.ranks)
        .map(|((v, m), d)| (m.saturating_sub(*d)) as f64 * v * v)
        .sum::<f64>()
}

/// The rotated problem `1/2 ||T - Sigma_2||_F^2 + constant`.
///
/// With `X = U_1 Sigma_1 V_1^T` (thin) and `Y V_1 = U_2 Sigma_2 V_2^T`
/// (full), a shallow matrix `R` corresponds to
/// `T = U_2^T R U_1 Sigma_1 V_2` and `constant = 1/2 ||Y (I - V_1 V_1^T)||_F^2`
/// is the energy of `Y` outside the row space of `X`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedProblem {
    /// `d_H x d_0` diagonal target.
    pub sigma2: Matrix,
    pub u1: Matrix,
    /// Singular values of `X`.
    pub sigma1: Vec<f64>,
    pub v1: Matrix,
    pub u2: Matrix,
    pub v2: Matrix,
    pub constant: f64,
}

/// Rotates a dataset into the diagonal form of [`ReducedProblem`].
pub fn reduce_to_diagonal(data: &Dataset) -> Result<ReducedProblem> {
    let x = svd(data.x())?;
    let d0 = data.input_dim();
    if x.rank(DEFAULT_RANK_TOL) < d0 {
        return Err(Error::Precondition("X must have full row rank".into()));
    }
    let v1 = x.v.clone();
    let y_hat = data.y() * &v1;
    let outside = data.y() - &y_hat * v1.transpose();
    let inner = full_svd(&y_hat)?;
    let mut sigma2 = Matrix::zeros(data.output_dim(), d0);
    for (i, s) in inner.singular_values.iter().enumerate() {
        sigma2[(i, i)] = *s;
    }
    Ok(ReducedProblem {
        sigma2,
        u1: x.u,
        sigma1: x.singular_values,
        v1,
        u2: inner.u,
        v2: inner.v,
        constant: 0.5 * outside.norm_squared(),
    })
}

impl ReducedProblem {
    pub fn spectrum(&self) -> BlockSpectrum {
        let k = self.sigma2.nrows().min(self.sigma2.ncols());
        let diag: Vec<f64> = (0..k).map(|i| self.sigma2[(i, i)]).collect();
        BlockSpectrum::from_singular_values(&diag)
    }

    /// `T = U_2^T R U_1 Sigma_1 V_2`.
    pub fn map_forward(&self, r: &Matrix) -> Matrix {
        let mut s = r * &self.u1;
        for (j, sig) in self.sigma1.iter().enumerate() {
            s.column_mut(j).scale_mut(*sig);
        }
        self.u2.transpose() * s * &self.v2
    }

    /// Inverse of [`ReducedProblem::map_forward`].
    pub fn map_back(&self, t: &Matrix) -> Matrix {
        let mut s = &self.u2 * t * self.v2.transpose();
        for (j, sig) in self.sigma1.iter().enumerate() {
            s.column_mut(j).scale_mut(1.0 / sig);
        }
        s * self.u1.transpose()
    }

    /// `1/2 ||T - Sigma_2||_F^2 + constant`, equal to `F` at the mapped-back point.
    pub fn value(&self, t: &Matrix) -> f64 {
        0.5 * (t - &self.sigma2).norm_squared() + self.constant
    }

    /// Diagonal target truncated to its leading `k` entries.
    pub fn truncated_target(&self, k: usize) -> Matrix {
        let mut t = self.sigma2.clone();
        let n = t.nrows().min(t.ncols());
        for i in k.min(n)..n {
            t[(i, i)] = 0.0;
        }
        t
    }

    /// Optimal value of the shallow problem with rank budget `k`.
    pub fn optimal_value(&self, k: usize) -> f64 {
        global_min_value(&self.spectrum(), k) + self.constant
    }
}

/// A rank-`k` global minimizer of the shallow problem.
///
/// When the boundary singular value is repeated the minimizer is not unique;
/// the leading coordinates of the diagonal target are kept.
pub fn global_minimizer(data: &Dataset, k: usize) -> Result<Matrix> {
    let limit = data.output_dim().min(data.input_dim());
    if k > limit {
        return Err(Error::Precondition(format!(
            "rank budget {k} exceeds min(d_H, d_0) = {limit}"
        )));
    }
    let red = reduce_to_diagonal(data)?;
    Ok(red.map_back(&red.truncated_target(k)))
}

/// Optimal value of the shallow problem with rank budget `k`.
pub fn optimal_value(data: &Dataset, k: usize) -> Result<f64> {
    Ok(reduce_to_diagonal(data)?.optimal_value(k))
}

/// Structure of a candidate minimum of the diagonal problem.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockReport {
    pub is_block_diagonal: bool,
    pub is_symmetric: bool,
    /// `||(T_i/lambda_i)^2 - T_i/lambda_i||_F` per block; for a zero block,
    /// `||T_i||_F` relative to the largest value.
    pub projection_defects: Vec<f64>,
    pub is_projection: bool,
    pub allocation: RankAllocation,
    /// Greedy allocation with the same total rank.
    pub greedy: RankAllocation,
    /// Structure checks pass and the allocation is greedy.
    pub is_global: bool,
    /// `1/2 ||T - Sigma_2||_F^2` in reduced coordinates.
    pub value: f64,
}

impl BlockReport {
    pub fn passes_structure(&self) -> bool {
        self.is_block_diagonal && self.is_symmetric && self.is_projection
    }

    /// `key: value` text form, one field per line.
    pub fn to_text(&self) -> String {
        let defects: Vec<String> = self
            .projection_defects
            .iter()
            .map(|d| format!("{d:e}"))
            .collect();
        format!(
            "is_block_diagonal: {}\nis_symmetric: {}\nis_projection: {}\nprojection_defects: {}\n\
             allocation: {}\ngreedy: {}\nis_global: {}\nvalue: {:.16e}\n",
            self.is_block_diagonal,
            self.is_symmetric,
            self.is_projection,
            defects.join(","),
            join(&self.allocation.ranks),
            join(&self.greedy.ranks),
            self.is_global,
            self.value,
        )
    }
}

/// Checks whether `t` (in reduced coordinates) has the structure of a
/// minimum: block diagonal along the spectrum, symmetric blocks, each block
/// a multiple of a projection; then reads off its rank allocation.
///
/// `t` is either square of the spectrum's dimension `n` or the rectangular
/// `d_H x d_0` form with `min(d_H, d_0) = n`; entries outside the leading
/// `n x n` block count as off-block mass.
pub fn analyze_candidate(t: &Matrix, spectrum: &BlockSpectrum, tol: f64) -> Result<BlockReport> {
    let n = spectrum.dimension();
    if t.nrows().min(t.ncols()) != n {
        return Err(Error::shape("analyze_candidate", (n, n), t.shape()));
    }
    let mut outside = 0.0_f64;
    for j in 0..t.ncols() {
        for i in 0..t.nrows() {
            if i >= n || j >= n {
                outside = outside.max(t[(i, j)].abs());
            }
        }
    }
    let padding = t.norm_squared() - t.view((0, 0), (n, n)).norm_squared();
    let t = &t.view((0, 0), (n, n)).into_owned();
    let scale = spectrum
        .values
        .first()
        .copied()
        .unwrap_or(0.0)
        .max(f64::MIN_POSITIVE);
    let ranges = spectrum.ranges();
    let mut block_of = vec![0; n];
    for (b, r) in ranges.iter().enumerate() {
        for i in r.clone() {
            block_of[i] = b;
        }
    }
    let mut off_block = outside;
    for i in 0..n {
        for j in 0..n {
            if block_of[i] != block_of[j] {
                off_block = off_block.max(t[(i, j)].abs());
            }
        }
    }
    let mut asym = 0.0_f64;
    let mut defects = Vec::with_capacity(ranges.len());
    let mut ranks = Vec::with_capacity(ranges.len());
    for (r, lambda) in ranges.iter().zip(&spectrum.values) {
        let len = r.end - r.start;
        let block = t.view((r.start, r.start), (len, len)).into_owned();
        asym = asym.max(max_abs(&(&block - block.transpose())));
        let defect = if *lambda > 0.0 {
            let p = &block / *lambda;
            (&p * &p - &p).norm()
        } else {
            block.norm() / scale
        };
        defects.push(defect);
        let cutoff = tol * scale;
        ranks.push(
            svd(&block)?
                .singular_values
                .iter()
                .filter(|s| **s > cutoff)
                .count(),
        );
    }
    let allocation = RankAllocation { ranks };
    let greedy = rank_allocation(spectrum, allocation.total());
    let is_block_diagonal = off_block <= tol * scale;
    let is_symmetric = asym <= tol * scale;
    let is_projection = defects.iter().all(|d| *d <= tol);
    let value = 0.5 * ((t - spectrum.diagonal_matrix()).norm_squared() + padding.max(0.0));
    Ok(BlockReport {
        is_block_diagonal,
        is_symmetric,
        is_projection,
        is_global: is_block_diagonal && is_symmetric && is_projection && allocation == greedy,
        projection_defects: defects,
        allocation,
        greedy,
        value,
    })
}

/// `||T - Sigma_2||_F^2` without the 1/2 factor, with `Sigma_2` the square
/// diagonal matrix of the spectrum.
pub fn diagonal_residual(t: &Matrix, spectrum: &BlockSpectrum) -> f64 {
    (t - spectrum.diagonal_matrix()).norm_squared()
}

/// Weight `c(theta) = lambda_{i1} sin^2(theta) + lambda_{i2} cos^2(theta)`
/// placed on the rotated direction along the descent path.
pub fn path_weight(lambda_i1: f64, lambda_i2: f64, theta: f64) -> f64 {
    let (s, c) = theta.sin_cos();
    lambda_i1 * s * s + lambda_i2 * c * c
}

/// Point `T(theta)` on the rank-preserving descent path out of a
/// non-greedy candidate `t_star`.
///
/// One unit of rank held by block `i2` (a smaller singular value) is rotated
/// towards a free direction of block `i1` (a larger one):
/// `T(theta) = T* - lambda_{i2} u u^T + c(theta) w w^T` with
/// `w = u cos(theta) + u_bar sin(theta)`. The un-halved objective then moves
/// by exactly `lambda_{i2}^2 - c(theta)^2`, which is zero at `theta = 0` and
/// strictly decreasing on `(0, pi/2]`.
///
/// `u` is the leading eigenvector of block `i2` of `T*`; `u_bar` is the first
/// coordinate vector of block `i1` orthogonal to the eigenvectors `T*`
/// retains there, or, if none is, the normalised projection of a coordinate
/// vector onto their orthogonal complement.
pub fn descent_path(
    t_star: &Matrix,
    spectrum: &BlockSpectrum,
    i1: usize,
    i2: usize,
    theta: f64,
) -> Result<Matrix> {
    let report = analyze_candidate(t_star, spectrum, 1e-8)?;
    if !report.passes_structure() {
        return Err(Error::Construction(
            "candidate is not block diagonal with projection blocks".into(),
        ));
    }
    let r = spectrum.num_blocks();
    if i1 >= i2 || i2 >= r {
        return Err(Error::Construction(format!(
            "need block indices i1 < i2 < {r}, got ({i1}, {i2})"
        )));
    }
    if !(0.0..=std::f64::consts::FRAC_PI_2).contains(&theta) {
        return Err(Error::Construction(format!(
            "theta {theta} outside [0, pi/2]"
        )));
    }
    let ranks = &report.allocation.ranks;
    if ranks[i1] >= spectrum.multiplicities[i1] {
        return Err(Error::Construction(format!(
            "block {i1} has no spare capacity"
        )));
    }
    if ranks[i2] == 0 {
        return Err(Error::Construction(format!(
            "block {i2} holds no rank to donate"
        )));
    }
    let n = spectrum.dimension();
    let ranges = spectrum.ranges();
    let (l1, l2) = (spectrum.values[i1], spectrum.values[i2]);

    let r2 = &ranges[i2];
    let block2 = t_star
        .view((r2.start, r2.start), (r2.len(), r2.len()))
        .into_owned();
    let (_, vecs2) = symmetric_eigen(&block2)?;
    let mut u = nalgebra::DVector::zeros(n);
    u.rows_mut(r2.start, r2.len()).copy_from(&vecs2.column(0));

    let r1 = &ranges[i1];
    let block1 = t_star
        .view((r1.start, r1.start), (r1.len(), r1.len()))
        .into_owned();
    let (vals1, vecs1) = symmetric_eigen(&block1)?;
    let kept: Vec<_> = (0..r1.len())
        .filter(|j| vals1[*j] > 0.5 * l1)
        .map(|j| vecs1.column(j).into_owned())
        .collect();
    let mut best: Option<(f64, nalgebra::DVector<f64>)> = None;
    let mut chosen = None;
    for j in 0..r1.len() {
        let mut e = nalgebra::DVector::zeros(r1.len());
        e[j] = 1.0;
        let overlap = kept.iter().map(|k| k.dot(&e).abs()).fold(0.0, f64::max);
        if overlap <= 1e-10 {
            chosen = Some(e);
            break;
        }
        let mut res = e.clone();
        for k in &kept {
            let c = k.dot(&res);
            res.axpy(-c, k, 1.0);
        }
        let norm = res.norm();
        if best.as_ref().is_none_or(|(b, _)| norm > *b) {
            best = Some((norm, res));
        }
    }
    let local = match chosen {
        Some(e) => e,
        None => {
            let (norm, v) = best.ok_or_else(|| Error::Construction("empty block".into()))?;
            v / norm
        }
    };
    let mut u_bar = nalgebra::DVector::zeros(n);
    u_bar.rows_mut(r1.start, r1.len()).copy_from(&local);

    let (s, c) = theta.sin_cos();
    let w = &u * c + &u_bar * s;
    let weight = path_weight(l1, l2, theta);
    Ok(t_star - (&u * u.transpose()) * l2 + (&w * w.transpose()) * weight)
}

/// Numerical rank of a reduced-coordinate matrix at the default tolerance.
pub fn reduced_rank(t: &Matrix) -> Result<usize> {
    numerical_rank(t, DEFAULT_RANK_TOL)
}
