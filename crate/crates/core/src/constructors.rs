//! Constructions that move a deep minimum around without changing its loss.
//!
//! - [`full_rank_perturbation`]: replace a rank-deficient layer by a nearby
//!   full-rank solution of the same layerwise normal equation.
//! - [`rank_restoring_sweep`]: make every layer full rank, then walk outward
//!   from the bottleneck so that both partial products reach rank `d_p`.
//! - [`two_factor_perturbation`]: absorb a perturbation of `A B` into `B`
//!   when `A` has full row rank.
//! - [`factor_perturbed_product`]: write a nearby rank-`d_p` matrix as a
//!   product of nearby layers.
//! - [`deep_to_shallow_witness`]: the composition, producing an end-to-end
//!   matrix that is a (sampled) local minimum of the shallow problem.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{
    align_to_reference, full_svd, group_by_tolerance, max_abs, numerical_rank, pseudo_inverse, svd,
    symmetric_eigenvalues, truncate_rank, Matrix, DEFAULT_RANK_TOL, GROUP_TOL,
};
use crate::model::{gradient, hessian, loss, Dataset, WeightStack, MAX_HESSIAN_PARAMS};
use crate::shallow::{reduce_to_diagonal, shallow_loss};

/// Gradient norms up to `GRADIENT_TOL * (1 + ||Y||_F)` count as zero.
pub const GRADIENT_TOL: f64 = 1e-8;
/// Smallest Hessian eigenvalue may dip to `-CURVATURE_TOL * max(1, lambda_max)`.
pub const CURVATURE_TOL: f64 = 1e-6;
/// Largest admissible relative residual of a layerwise normal equation.
pub const NORMAL_EQUATION_TOL: f64 = 1e-8;

const MU_FLOOR: f64 = 1e-300;
const SWEEP_RETRIES: usize = 60;

/// How far a construction may move the weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PerturbationBudget {
    /// Allowed entrywise displacement; repairs stay within `delta / 2`.
    pub delta: f64,
    /// Initial step along the segment towards the full-rank solution.
    pub mu: f64,
}

impl PerturbationBudget {
    pub fn new(delta: f64, mu: f64) -> Result<Self> {
        if !(delta.is_finite() && delta > 0.0 && mu.is_finite() && mu > 0.0) {
            return Err(Error::Precondition(format!(
                "budget needs finite positive delta and mu, got ({delta}, {mu})"
            )));
        }
        Ok(Self { delta, mu })
    }

    pub fn with_delta(delta: f64) -> Result<Self> {
        Self::new(delta, 1.0)
    }

    fn halved(self) -> Self {
        Self {
            delta: self.delta / 2.0,
            mu: self.mu,
        }
    }
}

/// Outcome of a loss-preserving repair.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RepairResult {
    #[serde(skip)]
    pub repaired: WeightStack,
    pub displacement: f64,
    pub loss_before: f64,
    pub loss_after: f64,
    pub product_rank: usize,
    pub per_layer_ranks: Vec<usize>,
    /// Step actually taken towards the full-rank solution (0 when unchanged).
    pub mu: f64,
}

impl RepairResult {
    fn measure(before: &WeightStack, after: WeightStack, data: &Dataset, mu: f64) -> Result<Self> {
        Ok(Self {
            displacement: after.max_displacement(before),
            loss_before: loss(before, data)?,
            loss_after: loss(&after, data)?,
            product_rank: numerical_rank(&after.product(), DEFAULT_RANK_TOL)?,
            per_layer_ranks: after.layer_ranks(DEFAULT_RANK_TOL)?,
            repaired: after,
            mu,
        })
    }

    pub fn loss_delta(&self) -> f64 {
        (self.loss_after - self.loss_before).abs()
    }
}

/// Evidence gathered by [`check_local_minimum`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MinimalityEvidence {
    pub gradient_norm: f64,
    pub gradient_tol: f64,
    /// `None` when the network is too large for a dense Hessian.
    pub hessian_min_eig: Option<f64>,
    pub hessian_max_eig: Option<f64>,
}

/// Numerical local-minimum test: small gradient and no curvature below
/// `-CURVATURE_TOL` relative to the largest Hessian eigenvalue. The Hessian
/// part is skipped above [`MAX_HESSIAN_PARAMS`].
pub fn check_local_minimum(w: &WeightStack, data: &Dataset) -> Result<MinimalityEvidence> {
    let gradient_norm = gradient(w, data)?.frobenius_norm();
    let gradient_tol = GRADIENT_TOL * data.scale();
    if gradient_norm > gradient_tol {
        return Err(Error::NotLocalMinimum(format!(
            "gradient norm {gradient_norm:e} exceeds {gradient_tol:e}"
        )));
    }
    let mut evidence = MinimalityEvidence {
        gradient_norm,
        gradient_tol,
        hessian_min_eig: None,
        hessian_max_eig: None,
    };
    if w.dims().param_count() <= MAX_HESSIAN_PARAMS {
        let eig = symmetric_eigenvalues(&hessian(w, data)?)?;
        let (lo, hi) = (eig[0], eig[eig.len() - 1]);
        evidence.hessian_min_eig = Some(lo);
        evidence.hessian_max_eig = Some(hi);
        if lo < -CURVATURE_TOL * hi.max(1.0) {
            return Err(Error::NotLocalMinimum(format!(
                "Hessian has negative curvature {lo:e}"
            )));
        }
    }
    Ok(evidence)
}

/// Relative residual of the normal equation
/// `P^T P W_l A A^T = P^T Y A^T` of layer `l`, where `P` is the product of
/// the layers above and `A` the product of the layers below applied to `X`.
pub fn normal_equation_residual(w: &WeightStack, layer: usize, data: &Dataset) -> Result<f64> {
    let h = w.depth();
    let p = w.chain(layer + 1, h);
    let a = w.chain(0, layer) * data.x();
    let pt = p.transpose();
    let lhs = &pt * &p * &w.layers()[layer] * &a * a.transpose();
    let rhs = &pt * data.y() * a.transpose();
    let num = (&lhs - &rhs).norm();
    if num == 0.0 {
        return Ok(0.0);
    }
    Ok(num / (lhs.norm() + rhs.norm()))
}

/// Replaces a rank-deficient layer `layer` (0-based) by a full-rank matrix
/// on the segment towards another solution of its normal equation, keeping
/// the loss unchanged.
///
/// The other solution is `P^+ Y A^+ + U_B K U_A^T`, where `U_B` and `U_A`
/// are the left singular bases of `P^T` and `A`, and `K` vanishes on the
/// leading `s_B x s_A` block (so it lies in the null set of the normal
/// equation). `K` first gets ones at `(s_B + t, s_A + t)`; if that does not
/// reach full rank, further unit entries outside the leading block are added
/// greedily wherever they raise the rank. The step `mu` starts at
/// `budget.mu` and is halved until the layer is full rank and moved by at
/// most `delta / 2`.
pub fn full_rank_perturbation(
    w: &WeightStack,
    layer: usize,
    data: &Dataset,
    budget: PerturbationBudget,
) -> Result<RepairResult> {
    data.check_dims(&w.dims())?;
    let h = w.depth();
    if layer >= h {
        return Err(Error::Precondition(format!(
            "layer {layer} out of range for depth {h}"
        )));
    }
    let current = &w.layers()[layer];
    let full = current.nrows().min(current.ncols());
    if numerical_rank(current, DEFAULT_RANK_TOL)? == full {
        return RepairResult::measure(w, w.clone(), data, 0.0);
    }
    let residual = normal_equation_residual(w, layer, data)?;
    if residual > NORMAL_EQUATION_TOL {
        return Err(Error::NotLayerwiseMinimum { layer, residual });
    }
    if numerical_rank(data.y(), DEFAULT_RANK_TOL)? != data.output_dim() {
        return Err(Error::Precondition("Y must have full row rank".into()));
    }

    let above = w.chain(layer + 1, h);
    let below = w.chain(0, layer) * data.x();
    let particular = pseudo_inverse(&above, DEFAULT_RANK_TOL)?
        * data.y()
        * pseudo_inverse(&below, DEFAULT_RANK_TOL)?;
    let b_svd = full_svd(&above.transpose())?;
    let a_svd = full_svd(&below)?;
    let (s_b, s_a) = (b_svd.rank(DEFAULT_RANK_TOL), a_svd.rank(DEFAULT_RANK_TOL));
    let (u_b, u_a) = (b_svd.u, a_svd.u);

    let mut z = u_b.transpose() * &particular * &u_a;
    for i in 0..z.nrows() {
        for j in 0..z.ncols() {
            if i >= s_b || j >= s_a {
                z[(i, j)] = 0.0;
            }
        }
    }
    let k = complete_rank(&z, s_b, s_a)?.ok_or(Error::RankCompletion { layer })?;
    let target = &u_b * (z + k) * u_a.transpose();
    let direction = target - current;

    let mut mu = budget.mu;
    loop {
        let step = &direction * mu;
        let candidate = current + &step;
        if max_abs(&step) <= budget.delta / 2.0
            && numerical_rank(&candidate, DEFAULT_RANK_TOL)? == full
        {
            return RepairResult::measure(w, w.with_layer(layer, candidate)?, data, mu);
        }
        mu /= 2.0;
        if mu < MU_FLOOR {
            return Err(Error::StepUnderflow);
        }
    }
}

/// Finds a 0/1 matrix `K`, zero on the leading `s_rows x s_cols` block, with
/// `z + K` of full rank. Returns `None` if the greedy search fails.
fn complete_rank(z: &Matrix, s_rows: usize, s_cols: usize) -> Result<Option<Matrix>> {
    let (rows, cols) = z.shape();
    let target = rows.min(cols);
    let mut k = Matrix::zeros(rows, cols);
    let mut t = 0;
    while s_rows + t < rows && s_cols + t < cols {
        k[(s_rows + t, s_cols + t)] = 1.0;
        t += 1;
    }
    let mut rank = numerical_rank(&(z + &k), DEFAULT_RANK_TOL)?;
    if rank == target {
        return Ok(Some(k));
    }
    // each round adds the unit entry that makes the new singular value largest,
    // so the completed matrix is as well conditioned as the greedy allows
    while rank < target {
        let mut best: Option<((usize, usize), f64)> = None;
        for i in 0..rows {
            for j in 0..cols {
                if (i < s_rows && j < s_cols) || k[(i, j)] != 0.0 {
                    continue;
                }
                k[(i, j)] = 1.0;
                let gain = svd(&(z + &k))?.singular_values[rank];
                k[(i, j)] = 0.0;
                if best.is_none_or(|(_, g)| gain > g) {
                    best = Some(((i, j), gain));
                }
            }
        }
        let Some(((i, j), _)) = best else {
            return Ok(None);
        };
        k[(i, j)] = 1.0;
        let r = numerical_rank(&(z + &k), DEFAULT_RANK_TOL)?;
        if r <= rank {
            return Ok(None);
        }
        rank = r;
    }
    Ok(Some(k))
}

/// Given `A` of full row rank and a target `R_bar` near `A B`, returns
/// `B_bar = B + A^+ (R_bar - A B)`, so that `A B_bar = R_bar` and
/// `||B_bar - B|| <= ||A^+|| ||R_bar - A B||`.
pub fn two_factor_perturbation(a: &Matrix, b: &Matrix, r_bar: &Matrix) -> Result<Matrix> {
    let (d1, d2) = a.shape();
    if b.nrows() != d2 {
        return Err(Error::shape(
            "two_factor_perturbation",
            (d2, b.ncols()),
            b.shape(),
        ));
    }
    let d3 = b.ncols();
    if r_bar.shape() != (d1, d3) {
        return Err(Error::shape(
            "two_factor_perturbation",
            (d1, d3),
            r_bar.shape(),
        ));
    }
    if d1 > d2 || d1 > d3 {
        return Err(Error::Precondition(format!(
            "need d1 <= d2 and d1 <= d3, got {d1}x{d2} times {d2}x{d3}"
        )));
    }
    if numerical_rank(a, DEFAULT_RANK_TOL)? != d1 {
        return Err(Error::Precondition(
            "left factor must have full row rank".into(),
        ));
    }
    let r = a * b;
    Ok(b + pseudo_inverse(a, DEFAULT_RANK_TOL)? * (r_bar - r))
}

/// Mirror of [`two_factor_perturbation`]: `B` has full column rank and the
/// perturbation is absorbed into `A`, returning `A + (R_bar - A B) B^+`.
pub fn two_factor_perturbation_left(a: &Matrix, b: &Matrix, r_bar: &Matrix) -> Result<Matrix> {
    Ok(two_factor_perturbation(&b.transpose(), &a.transpose(), &r_bar.transpose())?.transpose())
}

/// Writes `r` as a product of layers close to `wbar`, given that
/// `product(wbar)` has rank `d_p` and `r` is a nearby matrix of rank at most
/// `d_p`.
///
/// Two layers are handled through aligned decompositions of the old and new
/// products; deeper stacks merge a pair of layers next to the bottleneck,
/// recurse, and then split the merged layer with the two-layer rule.
pub fn factor_perturbed_product(wbar: &WeightStack, r: &Matrix) -> Result<WeightStack> {
    let dims = wbar.dims();
    let rbar = wbar.product();
    if r.shape() != rbar.shape() {
        return Err(Error::shape(
            "factor_perturbed_product",
            rbar.shape(),
            r.shape(),
        ));
    }
    let dp = dims.bottleneck_width();
    let rank_bar = numerical_rank(&rbar, DEFAULT_RANK_TOL)?;
    if rank_bar != dp {
        return Err(Error::Precondition(format!(
            "reference product has rank {rank_bar}, expected d_p = {dp}"
        )));
    }
    let rank_r = numerical_rank(r, DEFAULT_RANK_TOL)?;
    if rank_r > dp {
        return Err(Error::Precondition(format!(
            "target has rank {rank_r}, above d_p = {dp}"
        )));
    }
    factor_recursive(wbar, r, dp)
}

fn factor_recursive(wbar: &WeightStack, r: &Matrix, dp: usize) -> Result<WeightStack> {
    let h = wbar.depth();
    match h {
        1 => WeightStack::new(vec![r.clone()]),
        2 => {
            let (w1, w2) = factor_pair(&wbar.layers()[1], &wbar.layers()[0], r, dp)?;
            WeightStack::new(vec![w1, w2])
        }
        _ => {
            let p = wbar.dims().bottleneck();
            // merge W_p W_{p-1} when p >= 2, otherwise W_{p+2} W_{p+1} (0-based layer index)
            let idx = if p >= 2 { p - 2 } else { p };
            let merged = wbar.merge(idx)?;
            let sub = factor_recursive(&merged, r, dp)?;
            let target = &sub.layers()[idx];
            let (lower, upper) =
                factor_pair(&wbar.layers()[idx + 1], &wbar.layers()[idx], target, dp)?;
            let mut layers = Vec::with_capacity(h);
            layers.extend_from_slice(&sub.layers()[..idx]);
            layers.push(lower);
            layers.push(upper);
            layers.extend_from_slice(&sub.layers()[idx + 1..]);
            WeightStack::new(layers)
        }
    }
}

/// Two-layer case: returns `(W_1, W_2)` with `W_2 W_1 = r`.
///
/// With `R_bar = W2bar W1bar = U_bar Sigma_bar V_bar^T` and an aligned
/// decomposition `r = U C V^T`, set `S1 = W1bar V_bar` and rescale the
/// leading rows of `S2 = U_bar^T W2bar` by `C Sigma_bar^{-1}`; then
/// `W_2 = U S2` and `W_1 = S1 V^T`.
fn factor_pair(
    w2bar: &Matrix,
    w1bar: &Matrix,
    r: &Matrix,
    rank: usize,
) -> Result<(Matrix, Matrix)> {
    let rbar = w2bar * w1bar;
    let reference = full_svd(&rbar)?;
    let blocks = group_by_tolerance(&reference.singular_values[..rank], GROUP_TOL);
    let aligned = align_to_reference(&reference, &blocks, r)?;

    let s1 = w1bar * &reference.v;
    let mut s2 = reference.u.transpose() * w2bar;
    let core = aligned.core.view((0, 0), (rank, rank)).into_owned();
    let mut inv = Matrix::zeros(rank, rank);
    for i in 0..rank {
        inv[(i, i)] = 1.0 / reference.singular_values[i];
    }
    let lead = &core * inv * s2.rows(0, rank);
    s2.rows_mut(0, rank).copy_from(&lead);

    let w2 = &aligned.u * s2;
    let w1 = s1 * aligned.v.transpose();
    Ok((w1, w2))
}

/// Makes every layer full rank and then restores `rank(W_H ... W_1) = d_p`
/// by sweeping outward from the bottleneck, without changing the loss.
///
/// Below the bottleneck the pair `T = W_p W_{p-1}` is repaired as a single
/// layer of the merged network and refactored into `W_p` and a perturbed
/// `W_{p-1}`; the running product then absorbs `W_{p-2}`, and so on down to
/// `W_1`. Above the bottleneck the mirrored sweep runs up to `W_H`. Every
/// layer moves by at most `delta / 2` in total.
pub fn rank_restoring_sweep(
    w: &WeightStack,
    data: &Dataset,
    budget: PerturbationBudget,
) -> Result<RepairResult> {
    data.check_dims(&w.dims())?;
    check_local_minimum(w, data)?;
    let dims = w.dims();
    let dp = dims.bottleneck_width();
    let reachable = reduce_to_diagonal(data)?
        .spectrum()
        .values()
        .iter()
        .zip(reduce_to_diagonal(data)?.spectrum().multiplicities())
        .filter(|(v, _)| **v > DEFAULT_RANK_TOL * data.y().norm())
        .map(|(_, m)| *m)
        .sum::<usize>();
    if reachable < dp {
        return Err(Error::Precondition(format!(
            "Y restricted to the row space of X has rank {reachable} < d_p = {dp}; \
             no minimum with a rank-d_p product exists"
        )));
    }

    let quarter = budget.halved();
    let mut cur = w.clone();
    for l in 0..cur.depth() {
        cur = full_rank_perturbation(&cur, l, data, quarter)?.repaired;
    }

    let h = cur.depth();
    let p = dims.bottleneck();
    if p >= 2 {
        let mut running = cur.layers()[p - 1].clone();
        for q in (0..p - 1).rev() {
            let pair = &running * &cur.layers()[q];
            let mut merged: Vec<Matrix> = cur.layers()[..q].to_vec();
            merged.push(pair.clone());
            merged.extend_from_slice(&cur.layers()[p..]);
            let merged = WeightStack::new(merged)?;
            let new_layer = sweep_step(w, &merged, q, q, data, quarter, |t| {
                two_factor_perturbation(&running, &cur.layers()[q], t)
            })?;
            cur = cur.with_layer(q, new_layer)?;
            running = &running * &cur.layers()[q];
        }
    }
    if p + 1 < h {
        let mut running = cur.layers()[p].clone();
        for q in p + 1..h {
            let pair = &cur.layers()[q] * &running;
            let mut merged: Vec<Matrix> = cur.layers()[..p].to_vec();
            merged.push(pair.clone());
            merged.extend_from_slice(&cur.layers()[q + 1..]);
            let merged = WeightStack::new(merged)?;
            let new_layer = sweep_step(w, &merged, p, q, data, quarter, |t| {
                two_factor_perturbation_left(&cur.layers()[q], &running, t)
            })?;
            cur = cur.with_layer(q, new_layer)?;
            running = &cur.layers()[q] * &running;
        }
    }

    let result = RepairResult::measure(w, cur, data, 0.0)?;
    if result.loss_delta() > 1e-8 {
        return Err(Error::Construction(format!(
            "sweep changed the loss by {:e}",
            result.loss_delta()
        )));
    }
    if result.product_rank != dp {
        return Err(Error::Construction(format!(
            "sweep ended with product rank {} instead of d_p = {dp}",
            result.product_rank
        )));
    }
    Ok(result)
}

/// Repairs the merged layer `merged_idx` and refactors it into a new value
/// for `layer` of the original stack, halving the budget until that layer
/// stays within `delta / 2` of where it started.
fn sweep_step(
    original: &WeightStack,
    merged: &WeightStack,
    merged_idx: usize,
    layer: usize,
    data: &Dataset,
    budget: PerturbationBudget,
    refactor: impl Fn(&Matrix) -> Result<Matrix>,
) -> Result<Matrix> {
    let limit = 2.0 * budget.delta;
    let start = &original.layers()[layer];
    let mut step_budget = budget;
    for _ in 0..SWEEP_RETRIES {
        let repaired = full_rank_perturbation(merged, merged_idx, data, step_budget)?;
        let candidate = refactor(&repaired.repaired.layers()[merged_idx])?;
        if max_abs(&(&candidate - start)) <= limit {
            return Ok(candidate);
        }
        step_budget = step_budget.halved();
    }
    Err(Error::Construction(format!(
        "could not keep layer {layer} within the displacement budget"
    )))
}

/// Sampling parameters for the local-minimality certificate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WitnessOptions {
    pub samples: usize,
    /// Perturbation radius; defaults to the budget's `delta`.
    pub radius: Option<f64>,
    /// Admissible sampled decrease, relative to `1 + F(R_hat)`.
    pub tolerance: f64,
}

impl Default for WitnessOptions {
    fn default() -> Self {
        Self {
            samples: 200,
            radius: None,
            tolerance: 1e-9,
        }
    }
}

/// End-to-end matrix of a deep minimum, certified as a shallow local minimum.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Witness {
    #[serde(skip)]
    pub r_hat: Matrix,
    pub rank: usize,
    pub shallow_value: f64,
    pub deep_loss: f64,
    pub samples: usize,
    pub radius: f64,
    /// Largest `F(R_hat) - F(R')` over the sampled neighbours `R'`.
    pub max_decrease: f64,
    pub repair: RepairResult,
}

/// From a deep local minimum, builds `R_hat = product(sweep(W))` of rank
/// `d_p` and checks that no sampled rank-`d_p` neighbour of `R_hat` has a
/// smaller shallow loss.
///
/// Neighbours are `trunc_{d_p}(R_hat + radius * D)` for random unit
/// directions `D` in the tangent space of the rank-`d_p` matrices at `R_hat`.
pub fn deep_to_shallow_witness<G: Rng>(
    w: &WeightStack,
    data: &Dataset,
    budget: PerturbationBudget,
    options: WitnessOptions,
    rng: &mut G,
) -> Result<Witness> {
    let repair = rank_restoring_sweep(w, data, budget)?;
    let r_hat = repair.repaired.product();
    let dp = w.dims().bottleneck_width();
    let rank = numerical_rank(&r_hat, DEFAULT_RANK_TOL)?;
    let shallow_value = shallow_loss(&r_hat, data)?;
    let deep_loss = loss(w, data)?;
    if (shallow_value - deep_loss).abs() > 1e-8 {
        return Err(Error::Construction(format!(
            "shallow value {shallow_value} differs from deep loss {deep_loss}"
        )));
    }
    let radius = options.radius.unwrap_or(budget.delta);
    let dec = svd(&r_hat)?;
    let u = dec.u.columns(0, dp).into_owned();
    let v = dec.v.columns(0, dp).into_owned();
    let pu = &u * u.transpose();
    let pv = &v * v.transpose();
    let (rows, cols) = r_hat.shape();
    let mut max_decrease = f64::NEG_INFINITY;
    for _ in 0..options.samples {
        let g = Matrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut dir = &pu * &g + &g * &pv - &pu * &g * &pv;
        let n = dir.norm();
        if n == 0.0 {
            continue;
        }
        dir /= n;
        let neighbour = truncate_rank(&(&r_hat + dir * radius), dp)?;
        let decrease = shallow_value - shallow_loss(&neighbour, data)?;
        max_decrease = max_decrease.max(decrease);
    }
    if max_decrease > options.tolerance * (1.0 + shallow_value) {
        return Err(Error::CertificationFailed {
            decrease: max_decrease,
        });
    }
    Ok(Witness {
        r_hat,
        rank,
        shallow_value,
        deep_loss,
        samples: options.samples,
        radius,
        max_decrease,
        repair,
    })
}
