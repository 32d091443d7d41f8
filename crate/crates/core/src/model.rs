//! The deep linear network `X -> W_H ... W_1 X` and its squared loss.
//!
//! Layers are stored 0-based: `layers()[l]` is `W_{l+1}` in the usual
//! 1-based notation, with shape `d_{l+1} x d_l`. The Hessian uses a fixed
//! flattening: layer by layer starting from the input side, row-major within
//! each layer.

use std::fmt;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{ensure_finite, numerical_rank, Matrix, DEFAULT_RANK_TOL};

/// Dense Hessians are only assembled up to this many parameters.
pub const MAX_HESSIAN_PARAMS: usize = 2000;

/// Layer widths `d_0, d_1, ..., d_H`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct NetworkDims {
    widths: Vec<usize>,
}

impl NetworkDims {
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Precondition(format!(
                "a network needs at least two widths, got {}",
                widths.len()
            )));
        }
        if widths.contains(&0) {
            return Err(Error::Precondition("layer widths must be positive".into()));
        }
        Ok(Self { widths })
    }

    /// Parses a comma-separated width list such as `4,3,2,3,4`.
    pub fn parse(s: &str) -> Result<Self> {
        let widths = s
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<usize>()
                    .map_err(|e| Error::Parse(format!("bad width {t:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(widths)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    /// Number of weight matrices `H`.
    pub fn depth(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        self.widths[self.depth()]
    }

    /// Index `p` of the narrowest width; ties go to the smallest index.
    pub fn bottleneck(&self) -> usize {
        let min = self.bottleneck_width();
        self.widths.iter().position(|w| *w == min).unwrap_or(0)
    }

    pub fn bottleneck_width(&self) -> usize {
        self.widths.iter().copied().min().unwrap_or(0)
    }

    /// Shape `(d_{l+1}, d_l)` of the 0-based layer `l`.
    pub fn layer_shape(&self, layer: usize) -> (usize, usize) {
        (self.widths[layer + 1], self.widths[layer])
    }

    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1]).sum()
    }

    /// Offset of each layer in the flattened parameter vector.
    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.widths
            .windows(2)
            .map(|w| {
                let o = acc;
                acc += w[0] * w[1];
                o
            })
            .collect()
    }
}

impl fmt::Display for NetworkDims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.widths.iter().map(|w| w.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

/// Ordered weights `W_1, ..., W_H` whose shapes chain together.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightStack {
    layers: Vec<Matrix>,
}

impl WeightStack {
    pub fn new(layers: Vec<Matrix>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Precondition(
                "weight stack needs at least one layer".into(),
            ));
        }
        for l in &layers {
            ensure_finite(l)?;
            if l.nrows() == 0 || l.ncols() == 0 {
                return Err(Error::Precondition("layers must be non-empty".into()));
            }
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[1].ncols() != pair[0].nrows() {
                return Err(Error::Dimension {
                    context: "weight stack chain",
                    expected: format!("layer {} with {} columns", i + 2, pair[0].nrows()),
                    found: format!("{} columns", pair[1].ncols()),
                });
            }
        }
        Ok(Self { layers })
    }

    pub fn zeros(dims: &NetworkDims) -> Self {
        let layers = (0..dims.depth())
            .map(|l| {
                let (r, c) = dims.layer_shape(l);
                Matrix::zeros(r, c)
            })
            .collect();
        Self { layers }
    }

    pub fn layers(&self) -> &[Matrix] {
        &self.layers
    }

    pub fn into_layers(self) -> Vec<Matrix> {
        self.layers
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn dims(&self) -> NetworkDims {
        let mut widths = vec![self.layers[0].ncols()];
        widths.extend(self.layers.iter().map(|l| l.nrows()));
        NetworkDims { widths }
    }

    /// Replaces layer `l` (0-based), keeping its shape.
    pub fn with_layer(&self, l: usize, m: Matrix) -> Result<Self> {
        if l >= self.layers.len() {
            return Err(Error::Precondition(format!(
                "layer index {l} out of range for depth {}",
                self.layers.len()
            )));
        }
        if m.shape() != self.layers[l].shape() {
            return Err(Error::shape(
                "with_layer",
                self.layers[l].shape(),
                m.shape(),
            ));
        }
        ensure_finite(&m)?;
        let mut layers = self.layers.clone();
        layers[l] = m;
        Ok(Self { layers })
    }

    /// Product of layers `lo..hi` (0-based, half open), i.e. `W_hi ... W_{lo+1}`.
    /// An empty range gives the identity of size `d_lo`.
    pub fn chain(&self, lo: usize, hi: usize) -> Matrix {
        let n = if lo < self.layers.len() {
            self.layers[lo].ncols()
        } else {
            self.layers[self.layers.len() - 1].nrows()
        };
        let mut acc = Matrix::identity(n, n);
        for l in &self.layers[lo..hi] {
            acc = l * acc;
        }
        acc
    }

    /// End-to-end matrix `W_H ... W_1`, evaluated right to left.
    pub fn product(&self) -> Matrix {
        let mut acc = self.layers[0].clone();
        for l in &self.layers[1..] {
            acc = l * acc;
        }
        acc
    }

    /// Collapses layers `l` and `l + 1` into their product.
    pub fn merge(&self, l: usize) -> Result<Self> {
        if l + 1 >= self.layers.len() {
            return Err(Error::Precondition(format!(
                "cannot merge layer {l} with its successor in a depth-{} stack",
                self.layers.len()
            )));
        }
        let mut layers = Vec::with_capacity(self.layers.len() - 1);
        layers.extend_from_slice(&self.layers[..l]);
        layers.push(&self.layers[l + 1] * &self.layers[l]);
        layers.extend_from_slice(&self.layers[l + 2..]);
        Ok(Self { layers })
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.norm_squared())
            .sum::<f64>()
            .sqrt()
    }

    /// `self + alpha * other`, layer by layer.
    pub fn axpy(&self, alpha: f64, other: &WeightStack) -> Self {
        let layers = self
            .layers
            .iter()
            .zip(&other.layers)
            .map(|(a, b)| a + b * alpha)
            .collect();
        Self { layers }
    }

    /// Largest entrywise displacement of any layer relative to `other`.
    pub fn max_displacement(&self, other: &WeightStack) -> f64 {
        self.layers
            .iter()
            .zip(&other.layers)
            .map(|(a, b)| crate::linalg::max_abs(&(a - b)))
            .fold(0.0, f64::max)
    }

    pub fn layer_ranks(&self, tol: f64) -> Result<Vec<usize>> {
        self.layers.iter().map(|l| numerical_rank(l, tol)).collect()
    }

    /// Row-major, layer-by-layer flattening used by [`hessian`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            for r in 0..l.nrows() {
                for c in 0..l.ncols() {
                    out.push(l[(r, c)]);
                }
            }
        }
        out
    }

    pub fn from_flat(dims: &NetworkDims, values: &[f64]) -> Result<Self> {
        if values.len() != dims.param_count() {
            return Err(Error::Dimension {
                context: "flattened parameters",
                expected: dims.param_count().to_string(),
                found: values.len().to_string(),
            });
        }
        let mut layers = Vec::with_capacity(dims.depth());
        let mut at = 0;
        for l in 0..dims.depth() {
            let (r, c) = dims.layer_shape(l);
            layers.push(Matrix::from_row_slice(r, c, &values[at..at + r * c]));
            at += r * c;
        }
        Self::new(layers)
    }
}

/// Training data: inputs `X` (`d_0 x m`) and targets `Y` (`d_H x m`), both
/// of full row rank.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: Matrix,
    y: Matrix,
}

impl Dataset {
    pub fn new(x: Matrix, y: Matrix) -> Result<Self> {
        ensure_finite(&x)?;
        ensure_finite(&y)?;
        if x.ncols() != y.ncols() {
            return Err(Error::Dimension {
                context: "dataset sample count",
                expected: format!("{} columns in Y", x.ncols()),
                found: format!("{} columns", y.ncols()),
            });
        }
        let m = x.ncols();
        if m < x.nrows().max(y.nrows()) {
            return Err(Error::Precondition(format!(
                "need at least max(d_0, d_H) = {} samples, got {m}",
                x.nrows().max(y.nrows())
            )));
        }
        let rx = numerical_rank(&x, DEFAULT_RANK_TOL)?;
        if rx != x.nrows() {
            return Err(Error::Precondition(format!(
                "X must have full row rank {}, numerical rank is {rx}",
                x.nrows()
            )));
        }
        let ry = numerical_rank(&y, DEFAULT_RANK_TOL)?;
        if ry != y.nrows() {
            return Err(Error::Precondition(format!(
                "Y must have full row rank {}, numerical rank is {ry}",
                y.nrows()
            )));
        }
        Ok(Self { x, y })
    }

    pub fn x(&self) -> &Matrix {
        &self.x
    }

    pub fn y(&self) -> &Matrix {
        &self.y
    }

    pub fn samples(&self) -> usize {
        self.x.ncols()
    }

    pub fn input_dim(&self) -> usize {
        self.x.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.y.nrows()
    }

    /// Scale used for relative tolerances: `1 + ||Y||_F`.
    pub fn scale(&self) -> f64 {
        1.0 + self.y.norm()
    }

    pub fn check_dims(&self, dims: &NetworkDims) -> Result<()> {
        if dims.input_width() != self.input_dim() || dims.output_width() != self.output_dim() {
            return Err(Error::Dimension {
                context: "network versus dataset",
                expected: format!("d_0={} and d_H={}", self.input_dim(), self.output_dim()),
                found: format!("d_0={} and d_H={}", dims.input_width(), dims.output_width()),
            });
        }
        Ok(())
    }
}

pub fn product(w: &WeightStack) -> Matrix {
    w.product()
}

/// `R X - Y` for the end-to-end matrix `R`.
pub fn residual(w: &WeightStack, data: &Dataset) -> Result<Matrix> {
    data.check_dims(&w.dims())?;
    Ok(w.product() * data.x() - data.y())
}

/// `L(W) = 1/2 ||W_H ... W_1 X - Y||_F^2`.
pub fn loss(w: &WeightStack, data: &Dataset) -> Result<f64> {
    Ok(0.5 * residual(w, data)?.norm_squared())
}

/// Analytic gradient: for each layer,
/// `dL/dW_i = (W_H...W_{i+1})^T (R X - Y) X^T (W_{i-1}...W_1)^T`.
pub fn gradient(w: &WeightStack, data: &Dataset) -> Result<WeightStack> {
    let e = residual(w, data)?;
    gradient_from_output_residual(w, &(e * data.x().transpose()))
}

/// Gradient of any loss whose derivative with respect to the end-to-end
/// matrix is `g` (a `d_H x d_0` matrix).
pub(crate) fn gradient_from_output_residual(w: &WeightStack, g: &Matrix) -> Result<WeightStack> {
    let h = w.depth();
    let layers = w.layers();
    // prefixes[l] = W_l ... W_1 (identity for l = 0)
    let mut prefixes = Vec::with_capacity(h);
    let d0 = layers[0].ncols();
    prefixes.push(Matrix::identity(d0, d0));
    for l in 0..h - 1 {
        let next = &layers[l] * &prefixes[l];
        prefixes.push(next);
    }
    let mut grads = vec![Matrix::zeros(0, 0); h];
    let dh = layers[h - 1].nrows();
    // back = (W_H ... W_{l+2})^T g, walked from the output side
    let mut back = g.clone();
    debug_assert_eq!(g.nrows(), dh);
    for l in (0..h).rev() {
        grads[l] = &back * prefixes[l].transpose();
        back = layers[l].transpose() * back;
    }
    WeightStack::new(grads)
}

/// Dense Hessian of [`loss`] in the flattening of [`WeightStack::flatten`].
pub fn hessian(w: &WeightStack, data: &Dataset) -> Result<Matrix> {
    let dims = w.dims();
    data.check_dims(&dims)?;
    let n = dims.param_count();
    if n > MAX_HESSIAN_PARAMS {
        return Err(Error::SizeLimit {
            params: n,
            limit: MAX_HESSIAN_PARAMS,
        });
    }
    let h = w.depth();
    let e = residual(w, data)?;
    let offsets = dims.offsets();
    // inputs[l] = W_l ... W_1 X, outputs[l] = W_H ... W_{l+2}
    let inputs: Vec<Matrix> = (0..h).map(|l| w.chain(0, l) * data.x()).collect();
    let outputs: Vec<Matrix> = (0..h).map(|l| w.chain(l + 1, h)).collect();

    let mut hess = Matrix::zeros(n, n);
    for a in 0..h {
        for b in a..h {
            let (ra, ca) = dims.layer_shape(a);
            let (rb, cb) = dims.layer_shape(b);
            let out_gram = outputs[a].transpose() * &outputs[b];
            let in_gram = &inputs[a] * inputs[b].transpose();
            let cross = if a < b {
                let mid = w.chain(a + 1, b);
                let g = outputs[b].transpose() * &e * inputs[a].transpose();
                Some((mid, g))
            } else {
                None
            };
            for r in 0..ra {
                for c in 0..ca {
                    let i = offsets[a] + r * ca + c;
                    for r2 in 0..rb {
                        for c2 in 0..cb {
                            let j = offsets[b] + r2 * cb + c2;
                            if j < i {
                                continue;
                            }
                            let mut v = out_gram[(r, r2)] * in_gram[(c, c2)];
                            if let Some((mid, g)) = &cross {
                                v += mid[(c2, r)] * g[(r2, c)];
                            }
                            hess[(i, j)] = v;
                            hess[(j, i)] = v;
                        }
                    }
                }
            }
        }
    }
    Ok(hess)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{max_abs, symmetric_eigenvalues};
    use nalgebra::DVector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_instance(widths: &[usize], m: usize, seed: u64) -> (WeightStack, Dataset) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = NetworkDims::new(widths.to_vec()).unwrap();
        let layers = (0..dims.depth())
            .map(|l| {
                let (r, c) = dims.layer_shape(l);
                random(r, c, &mut rng)
            })
            .collect();
        let x = random(dims.input_width(), m, &mut rng);
        let y = random(dims.output_width(), m, &mut rng);
        (
            WeightStack::new(layers).unwrap(),
            Dataset::new(x, y).unwrap(),
        )
    }

    fn i2() -> Matrix {
        Matrix::identity(2, 2)
    }

    #[test]
    fn dims_bottleneck_ties_take_smallest_index() {
        let d = NetworkDims::new(vec![3, 2, 2, 3]).unwrap();
        assert_eq!(d.bottleneck(), 1);
        assert_eq!(d.bottleneck_width(), 2);
        assert_eq!(d.depth(), 3);
        assert_eq!(d.param_count(), 6 + 4 + 6);
        assert!(NetworkDims::new(vec![4]).is_err());
        assert!(NetworkDims::parse("4,x").is_err());
        assert_eq!(NetworkDims::parse("4, 3,2").unwrap().to_string(), "4,3,2");
    }

    #[test]
    fn stack_rejects_broken_chain() {
        let r = WeightStack::new(vec![Matrix::zeros(2, 3), Matrix::zeros(2, 3)]);
        assert!(matches!(r, Err(Error::Dimension { .. })));
    }

    #[test]
    fn product_examples() {
        let w = WeightStack::new(vec![i2(), i2()]).unwrap();
        assert_eq!(w.product(), i2());
        let a = Matrix::from_row_slice(2, 3, &[1., 2., 3., 4., 5., 6.]);
        assert_eq!(WeightStack::new(vec![a.clone()]).unwrap().product(), a);
    }

    #[test]
    fn product_matches_left_to_right_evaluation() {
        let (w, _) = random_instance(&[3, 5, 2, 4, 3], 6, 1);
        let l = w.layers();
        let left = ((&l[3] * &l[2]) * &l[1]) * &l[0];
        assert!(max_abs(&(w.product() - left)) < 1e-12);
    }

    #[test]
    fn dataset_invariants() {
        let x = Matrix::from_row_slice(2, 2, &[1., 0., 1., 0.]);
        assert!(matches!(Dataset::new(x, i2()), Err(Error::Precondition(_))));
        assert!(Dataset::new(Matrix::identity(3, 2), Matrix::identity(3, 2)).is_err());
    }

    #[test]
    fn loss_examples() {
        let w = WeightStack::new(vec![i2(), i2()]).unwrap();
        let d = Dataset::new(i2(), i2()).unwrap();
        assert_eq!(loss(&w, &d).unwrap(), 0.0);
        // Y = 0 is not a valid dataset, so evaluate the residual directly
        let zero_target = 0.5 * (w.product() * i2()).norm_squared();
        assert_eq!(zero_target, 1.0);
    }

    #[test]
    fn loss_matches_elementwise_sum() {
        let (w, d) = random_instance(&[3, 4, 2], 7, 9);
        let p = w.product();
        let mut acc = 0.0;
        for i in 0..d.output_dim() {
            for j in 0..d.samples() {
                let mut pred = 0.0;
                for k in 0..d.input_dim() {
                    pred += p[(i, k)] * d.x()[(k, j)];
                }
                acc += (pred - d.y()[(i, j)]).powi(2);
            }
        }
        let l = loss(&w, &d).unwrap();
        assert!((l - 0.5 * acc).abs() <= 1e-12 * l);
    }

    #[test]
    fn gradient_vanishes_at_exact_fit() {
        let w = WeightStack::new(vec![i2(), i2()]).unwrap();
        let d = Dataset::new(i2(), i2()).unwrap();
        assert_eq!(gradient(&w, &d).unwrap().frobenius_norm(), 0.0);
    }

    #[test]
    fn gradient_hand_example() {
        let w = WeightStack::new(vec![i2(), Matrix::zeros(2, 2)]).unwrap();
        let d = Dataset::new(i2(), i2()).unwrap();
        let g = gradient(&w, &d).unwrap();
        assert_eq!(g.layers()[1], -i2());
        assert_eq!(g.layers()[0], Matrix::zeros(2, 2));
    }

    fn fd_gradient(w: &WeightStack, d: &Dataset, step: f64) -> Vec<f64> {
        let dims = w.dims();
        let base = w.flatten();
        (0..base.len())
            .map(|i| {
                let mut p = base.clone();
                p[i] += step;
                let lp = loss(&WeightStack::from_flat(&dims, &p).unwrap(), d).unwrap();
                p[i] -= 2.0 * step;
                let lm = loss(&WeightStack::from_flat(&dims, &p).unwrap(), d).unwrap();
                (lp - lm) / (2.0 * step)
            })
            .collect()
    }

    #[test]
    fn gradient_matches_central_differences() {
        for seed in 0..10 {
            let (w, d) = random_instance(&[3, 4, 2, 3], 5, seed);
            let g = DVector::from_vec(gradient(&w, &d).unwrap().flatten());
            let fd = DVector::from_vec(fd_gradient(&w, &d, 1e-5));
            assert!((&g - &fd).norm() <= 1e-5 * g.norm().max(1.0), "seed {seed}");
        }
    }

    #[test]
    fn hessian_single_layer_is_psd() {
        let (w, d) = random_instance(&[3, 2], 5, 4);
        let h = hessian(&w, &d).unwrap();
        let eig = symmetric_eigenvalues(&h).unwrap();
        assert!(eig[0] >= -1e-12);
    }

    #[test]
    fn hessian_at_origin_has_negative_curvature() {
        let w = WeightStack::zeros(&NetworkDims::new(vec![2, 2, 2]).unwrap());
        let y = Matrix::from_diagonal(&DVector::from_vec(vec![2.0, 1.0]));
        let d = Dataset::new(i2(), y).unwrap();
        let eig = symmetric_eigenvalues(&hessian(&w, &d).unwrap()).unwrap();
        assert!((eig[0] + 2.0).abs() < 1e-12);
    }

    #[test]
    fn hessian_matches_differentiated_gradient() {
        for seed in 0..5 {
            let (w, d) = random_instance(&[2, 3, 2, 2], 4, 100 + seed);
            let h = hessian(&w, &d).unwrap();
            assert!(max_abs(&(&h - h.transpose())) <= 1e-9);
            let dims = w.dims();
            let base = w.flatten();
            let step = 1e-5;
            let n = base.len();
            let mut fd = Matrix::zeros(n, n);
            for j in 0..n {
                let mut p = base.clone();
                p[j] += step;
                let gp = gradient(&WeightStack::from_flat(&dims, &p).unwrap(), &d)
                    .unwrap()
                    .flatten();
                p[j] -= 2.0 * step;
                let gm = gradient(&WeightStack::from_flat(&dims, &p).unwrap(), &d)
                    .unwrap()
                    .flatten();
                for i in 0..n {
                    fd[(i, j)] = (gp[i] - gm[i]) / (2.0 * step);
                }
            }
            assert!((&h - &fd).norm() <= 1e-4 * h.norm(), "seed {seed}");
        }
    }

    #[test]
    fn hessian_size_limit() {
        let dims = NetworkDims::new(vec![30, 40, 30]).unwrap();
        let w = WeightStack::zeros(&dims);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = Dataset::new(random(30, 40, &mut rng), random(30, 40, &mut rng)).unwrap();
        assert!(matches!(hessian(&w, &d), Err(Error::SizeLimit { .. })));
    }

    #[test]
    fn loss_invariant_under_weight_space_symmetry() {
        let (w, d) = random_instance(&[3, 4, 4, 2], 6, 17);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let c = random(4, 4, &mut rng) + Matrix::identity(4, 4) * 2.0;
        let cinv = c.clone().try_inverse().unwrap();
        let l = w.layers();
        let moved = WeightStack::new(vec![&c * &l[0], &l[1] * &cinv, l[2].clone()]).unwrap();
        let (a, b) = (loss(&w, &d).unwrap(), loss(&moved, &d).unwrap());
        assert!((a - b).abs() <= 1e-9 * a);
    }

    #[test]
    fn merge_and_chain() {
        let (w, _) = random_instance(&[3, 4, 2, 5], 6, 3);
        let merged = w.merge(1).unwrap();
        assert_eq!(merged.depth(), 2);
        assert!(max_abs(&(merged.product() - w.product())) < 1e-12);
        assert_eq!(w.chain(1, 1), Matrix::identity(4, 4));
        assert!(max_abs(&(w.chain(0, 3) - w.product())) < 1e-12);
        assert!(w.merge(2).is_err());
    }
}
