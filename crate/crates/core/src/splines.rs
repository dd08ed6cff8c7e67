//! Penalized cubic regression splines.
//!
//! The basis is parameterized by the function values at the knots. A natural
//! cubic spline through those values is evaluated between knots and extended
//! linearly outside them. The penalty is the integrated squared second
//! derivative. Smooths are made identifiable with a sum-to-zero constraint and
//! can be rewritten in mixed-model form: unpenalized fixed effects spanning the
//! penalty null space plus penalized coefficients with identity penalty.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative eigenvalue threshold separating the penalty null space.
pub const NULLSPACE_TOLERANCE: f64 = 1e-9;

/// Cubic regression spline basis on a fixed set of knots.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CubicRegressionSpline {
    knots: Vec<f64>,
    /// Maps knot values to second derivatives at the knots (`K × K`).
    f: DMatrix<f64>,
    /// Penalty `∫ f″(x)² dx` as a quadratic form in the knot values.
    s: DMatrix<f64>,
}

/// Knots at evenly spaced quantiles of the distinct covariate values, the
/// outermost knots at the minimum and maximum.
pub fn quantile_knots(x: &[f64], k: usize) -> Result<Vec<f64>> {
    if k < 3 {
        return Err(Error::Spline(format!("at least 3 knots are required, got {k}")));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Spline("covariate contains non-finite values".into()));
    }
    let mut u = x.to_vec();
    u.sort_by(|a, b| a.total_cmp(b));
    u.dedup();
    if u.len() < k {
        return Err(Error::Spline(format!(
            "{} distinct covariate values cannot support {k} knots",
            u.len()
        )));
    }
    let m = u.len();
    let knots = (0..k)
        .map(|j| {
            let pos = (m - 1) as f64 * j as f64 / (k - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(m - 1);
            let frac = pos - lo as f64;
            u[lo] + frac * (u[hi] - u[lo])
        })
        .collect();
    Ok(knots)
}

impl CubicRegressionSpline {
    /// Basis with `k` knots placed at quantiles of `x`.
    pub fn new(x: &[f64], k: usize) -> Result<Self> {
        Self::from_knots(quantile_knots(x, k)?)
    }

    pub fn from_knots(knots: Vec<f64>) -> Result<Self> {
        let k = knots.len();
        if k < 3 {
            return Err(Error::Spline(format!("at least 3 knots are required, got {k}")));
        }
        if knots.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Spline("knots must be strictly increasing".into()));
        }
        let h: Vec<f64> = knots.windows(2).map(|w| w[1] - w[0]).collect();
        let mut d = DMatrix::zeros(k - 2, k);
        let mut b = DMatrix::zeros(k - 2, k - 2);
        for i in 0..k - 2 {
            d[(i, i)] = 1.0 / h[i];
            d[(i, i + 1)] = -1.0 / h[i] - 1.0 / h[i + 1];
            d[(i, i + 2)] = 1.0 / h[i + 1];
            b[(i, i)] = (h[i] + h[i + 1]) / 3.0;
            if i + 1 < k - 2 {
                b[(i, i + 1)] = h[i + 1] / 6.0;
                b[(i + 1, i)] = h[i + 1] / 6.0;
            }
        }
        let chol = b
            .cholesky()
            .ok_or_else(|| Error::Spline("knot spacing matrix is not positive definite".into()))?;
        let binv_d = chol.solve(&d);
        let mut f = DMatrix::zeros(k, k);
        f.view_mut((1, 0), (k - 2, k)).copy_from(&binv_d);
        let mut s = d.transpose() * &binv_d;
        s = (&s + s.transpose()) * 0.5;
        Ok(CubicRegressionSpline { knots, f, s })
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn dim(&self) -> usize {
        self.knots.len()
    }

    pub fn penalty(&self) -> &DMatrix<f64> {
        &self.s
    }

    /// Matrix mapping knot values to second derivatives at the knots.
    pub fn second_derivative_map(&self) -> &DMatrix<f64> {
        &self.f
    }

    /// One row of the design matrix.
    pub fn basis_row(&self, x: f64) -> Vec<f64> {
        let k = self.dim();
        let kn = &self.knots;
        let mut row = vec![0.0; k];
        if x < kn[0] || x > kn[k - 1] {
            // Linear extension using the value and slope at the nearest boundary knot.
            let (j, at_left) = if x < kn[0] { (0, true) } else { (k - 2, false) };
            let h = kn[j + 1] - kn[j];
            let dx = if at_left { x - kn[0] } else { x - kn[k - 1] };
            // Slope coefficients at the boundary of interval j.
            let (am, ap, cm, cp) = if at_left {
                (-1.0 / h, 1.0 / h, -h / 3.0, -h / 6.0)
            } else {
                (-1.0 / h, 1.0 / h, h / 6.0, h / 3.0)
            };
            let (vm, vp) = if at_left { (1.0, 0.0) } else { (0.0, 1.0) };
            row[j] += vm + dx * am;
            row[j + 1] += vp + dx * ap;
            for c in 0..k {
                row[c] += dx * (cm * self.f[(j, c)] + cp * self.f[(j + 1, c)]);
            }
            return row;
        }
        let j = match kn.partition_point(|&t| t <= x) {
            0 => 0,
            p if p >= k => k - 2,
            p => p - 1,
        };
        let h = kn[j + 1] - kn[j];
        let dm = kn[j + 1] - x;
        let dp = x - kn[j];
        let am = dm / h;
        let ap = dp / h;
        let cm = (dm * dm * dm / h - h * dm) / 6.0;
        let cp = (dp * dp * dp / h - h * dp) / 6.0;
        row[j] += am;
        row[j + 1] += ap;
        for c in 0..k {
            row[c] += cm * self.f[(j, c)] + cp * self.f[(j + 1, c)];
        }
        row
    }

    /// Design matrix evaluated at `x` (`n × K`).
    pub fn design(&self, x: &[f64]) -> DMatrix<f64> {
        let k = self.dim();
        let mut m = DMatrix::zeros(x.len(), k);
        for (i, &xi) in x.iter().enumerate() {
            let row = self.basis_row(xi);
            for c in 0..k {
                m[(i, c)] = row[c];
            }
        }
        m
    }
}

/// Smooth with the sum-to-zero constraint `1ᵀ X β = 0` absorbed into the basis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstrainedSmooth {
    pub basis: CubicRegressionSpline,
    /// `K × (K−1)` basis of the constraint null space; `β = Z β_c`.
    pub z: DMatrix<f64>,
    /// Penalty in constrained coordinates.
    pub penalty: DMatrix<f64>,
}

impl ConstrainedSmooth {
    /// Absorb the constraint that the smooth sums to zero over `x`.
    pub fn new(basis: CubicRegressionSpline, x: &[f64]) -> Result<Self> {
        let k = basis.dim();
        let xd = basis.design(x);
        let c: DVector<f64> = xd.row_sum().transpose();
        let norm = c.norm();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::Spline("constraint vector is degenerate".into()));
        }
        // Householder reflection mapping c onto a multiple of e_1; its remaining
        // columns span the orthogonal complement of c.
        let mut v = c.clone();
        v[0] += if c[0] < 0.0 { -norm } else { norm };
        let vtv = v.dot(&v);
        let h = DMatrix::<f64>::identity(k, k) - (&v * v.transpose()) * (2.0 / vtv);
        let z = h.columns(1, k - 1).into_owned();
        let penalty = z.transpose() * basis.penalty() * &z;
        let penalty = (&penalty + penalty.transpose()) * 0.5;
        Ok(ConstrainedSmooth { basis, z, penalty })
    }

    /// Wrap a basis without imposing any constraint (`Z = I`).
    pub fn unconstrained(basis: CubicRegressionSpline) -> Self {
        let k = basis.dim();
        let penalty = basis.penalty().clone();
        ConstrainedSmooth {
            basis,
            z: DMatrix::identity(k, k),
            penalty,
        }
    }

    pub fn dim(&self) -> usize {
        self.z.ncols()
    }

    pub fn design(&self, x: &[f64]) -> DMatrix<f64> {
        self.basis.design(x) * &self.z
    }

    pub fn basis_row(&self, x: f64) -> Vec<f64> {
        let row = DVector::from_vec(self.basis.basis_row(x));
        (self.z.transpose() * row).as_slice().to_vec()
    }

    /// Mixed-model reparameterization of this smooth.
    pub fn to_mixed(&self) -> Result<MixedSmooth> {
        MixedSmooth::new(self.clone())
    }
}

/// Smooth rewritten as `X_F β_F + X_R b` with `b` penalized by the identity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixedSmooth {
    pub constrained: ConstrainedSmooth,
    /// Constrained coefficients `β_c = T [β_F; b]`.
    pub transform: DMatrix<f64>,
    pub n_fixed: usize,
    /// Positive penalty eigenvalues, in decreasing order.
    pub eigenvalues: Vec<f64>,
}

impl MixedSmooth {
    pub fn new(constrained: ConstrainedSmooth) -> Result<Self> {
        let m = constrained.dim();
        let eig = SymmetricEigen::new(constrained.penalty.clone());
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let max = eig.eigenvalues[order[0]];
        if !(max > 0.0) {
            return Err(Error::Spline("penalty has no positive eigenvalues".into()));
        }
        let positive: Vec<usize> = order
            .iter()
            .copied()
            .filter(|&i| eig.eigenvalues[i] >= NULLSPACE_TOLERANCE * max)
            .collect();
        let null: Vec<usize> = order
            .iter()
            .copied()
            .filter(|&i| eig.eigenvalues[i] < NULLSPACE_TOLERANCE * max)
            .collect();
        let mut transform = DMatrix::zeros(m, m);
        for (c, &i) in null.iter().enumerate() {
            let mut col = eig.eigenvectors.column(i).into_owned();
            // Fix the sign so that the largest-magnitude entry is positive.
            let imax = col.iamax();
            if col[imax] < 0.0 {
                col = -col;
            }
            transform.set_column(c, &col);
        }
        let mut eigenvalues = Vec::with_capacity(positive.len());
        for (c, &i) in positive.iter().enumerate() {
            let lambda = eig.eigenvalues[i];
            let mut col = eig.eigenvectors.column(i).into_owned();
            let imax = col.iamax();
            if col[imax] < 0.0 {
                col = -col;
            }
            transform.set_column(null.len() + c, &(col / lambda.sqrt()));
            eigenvalues.push(lambda);
        }
        Ok(MixedSmooth {
            constrained,
            transform,
            n_fixed: null.len(),
            eigenvalues,
        })
    }

    pub fn n_random(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn dim(&self) -> usize {
        self.transform.ncols()
    }

    /// Row of `[X_F, X_R]` at `x`.
    pub fn mixed_row(&self, x: f64) -> Vec<f64> {
        let row = DVector::from_vec(self.constrained.basis_row(x));
        (self.transform.transpose() * row).as_slice().to_vec()
    }

    /// `[X_F, X_R]` at the points `x`.
    pub fn mixed_design(&self, x: &[f64]) -> DMatrix<f64> {
        self.constrained.design(x) * &self.transform
    }

    /// Fixed-effect block `X_F`.
    pub fn fixed_design(&self, x: &[f64]) -> DMatrix<f64> {
        self.mixed_design(x).columns(0, self.n_fixed).into_owned()
    }

    /// Penalized block `X_R`.
    pub fn random_design(&self, x: &[f64]) -> DMatrix<f64> {
        self.mixed_design(x).columns(self.n_fixed, self.n_random()).into_owned()
    }

    /// Coefficients on the original knot-value basis from mixed coefficients.
    pub fn original_coefficients(&self, mixed: &[f64]) -> DVector<f64> {
        let m = DVector::from_column_slice(mixed);
        &self.constrained.z * (&self.transform * m)
    }
}

/// Effective degrees of freedom `tr((XᵀWX + λS)⁻¹ XᵀWX)` of a penalized fit.
///
/// `weights` defaults to the identity when `None`.
pub fn edf(x: &DMatrix<f64>, s: &DMatrix<f64>, lambda: f64, weights: Option<&[f64]>) -> Result<f64> {
    let mut xw = x.clone();
    if let Some(w) = weights {
        for (i, &wi) in w.iter().enumerate() {
            xw.row_mut(i).scale_mut(wi.max(0.0).sqrt());
        }
    }
    // With W^½X = QR and R⁻ᵀSR⁻¹ = UDUᵀ the trace is Σ 1/(1 + λ dᵢ), which
    // stays accurate for large λ. Rank-deficient designs use the direct solve.
    let r = xw.clone().qr().r();
    let diag_max = r.diagonal().amax();
    if r.nrows() == r.ncols() && r.diagonal().iter().all(|d| d.abs() > 1e-10 * diag_max) {
        if let Some(rt_inv) = r.transpose().try_inverse() {
            let m = &rt_inv * s * rt_inv.transpose();
            let m = (&m + m.transpose()) * 0.5;
            let d = m.symmetric_eigenvalues();
            return Ok(d.iter().map(|&di| 1.0 / (1.0 + lambda * di.max(0.0))).sum());
        }
    }
    let xtwx = xw.transpose() * &xw;
    let a = &xtwx + s * lambda;
    let sol = a
        .lu()
        .solve(&xtwx)
        .ok_or_else(|| Error::Spline("penalized normal equations are singular".into()))?;
    Ok(sol.trace())
}

/// Effective degrees of freedom of a smooth in mixed form with smoothing
/// variance `psi` (penalty `b ~ N(0, psi I)`), stable as `psi → 0`.
pub fn edf_mixed(xf: &DMatrix<f64>, xr: &DMatrix<f64>, psi: f64, weights: Option<&[f64]>) -> Result<f64> {
    let nf = xf.ncols();
    let nr = xr.ncols();
    let n = xf.nrows();
    let scale = psi.max(0.0).sqrt();
    let mut x = DMatrix::zeros(n, nf + nr);
    x.columns_mut(0, nf).copy_from(xf);
    x.columns_mut(nf, nr).copy_from(&(xr * scale));
    let mut p = DMatrix::zeros(nf + nr, nf + nr);
    for j in nf..nf + nr {
        p[(j, j)] = 1.0;
    }
    edf(&x, &p, 1.0, weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample_x(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-2.0..3.0)).collect()
    }

    #[test]
    fn knots_span_the_data() {
        let x = sample_x(200, 1);
        let knots = quantile_knots(&x, 7).unwrap();
        let min = x.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(knots[0], min);
        assert_eq!(knots[6], max);
        assert!(knots.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(quantile_knots(&[0.0, 1.0, 2.0, 3.0, 4.0], 5).unwrap(), vec![0.0, 1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn too_few_distinct_values_is_an_error() {
        assert!(quantile_knots(&[1.0, 1.0, 2.0, 2.0], 3).is_err());
        assert!(quantile_knots(&[1.0, 2.0, 3.0], 2).is_err());
    }

    #[test]
    fn basis_interpolates_knot_values() {
        let basis = CubicRegressionSpline::from_knots(vec![0.0, 0.7, 1.5, 3.0, 4.2]).unwrap();
        for (j, &t) in basis.knots().iter().enumerate() {
            let row = basis.basis_row(t);
            for (c, v) in row.iter().enumerate() {
                let expect = if c == j { 1.0 } else { 0.0 };
                assert!((v - expect).abs() < 1e-12, "knot {j} column {c}: {v}");
            }
        }
    }

    #[test]
    fn penalty_equals_integrated_squared_second_derivative() {
        let basis = CubicRegressionSpline::from_knots(vec![-1.0, 0.2, 0.5, 1.7, 2.0, 3.3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let beta: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = |x: f64| -> f64 {
            basis.basis_row(x).iter().zip(&beta).map(|(a, b)| a * b).sum()
        };
        // f″ is linear on each interval, so two-point Gauss–Legendre is exact and
        // the central second difference of a cubic has no truncation error.
        let g = 1.0 / 3.0_f64.sqrt();
        let mut integral = 0.0;
        for w in basis.knots().windows(2) {
            let (a, b) = (w[0], w[1]);
            let half = 0.5 * (b - a);
            let mid = 0.5 * (a + b);
            let hd = 0.1 * (b - a);
            for &t in &[-g, g] {
                let x = mid + half * t;
                let d2 = (f(x + hd) - 2.0 * f(x) + f(x - hd)) / (hd * hd);
                integral += half * d2 * d2;
            }
        }
        let b = DVector::from_vec(beta);
        let quad = (b.transpose() * basis.penalty() * &b)[(0, 0)];
        assert_relative_eq!(quad, integral, max_relative = 1e-8);
    }

    #[test]
    fn natural_boundary_and_linear_extension() {
        let basis = CubicRegressionSpline::from_knots(vec![0.0, 1.0, 2.5, 4.0]).unwrap();
        let beta = [0.3, -1.0, 2.0, 0.5];
        let f = |x: f64| -> f64 { basis.basis_row(x).iter().zip(&beta).map(|(a, b)| a * b).sum() };
        let h = 1e-3;
        // Second derivative vanishes at the boundary knots.
        let d2_left = (f(2.0 * h) - 2.0 * f(h) + f(0.0)) / (h * h);
        assert!(d2_left.abs() < 1e-2, "{d2_left}");
        // Outside the knots the function is linear and continuous with slope matching.
        let slope_out = (f(-1.0) - f(-2.0)) / 1.0;
        let slope_in = (f(h) - f(0.0)) / h;
        assert!((slope_out - slope_in).abs() < 1e-2);
        assert!((f(-1e-9) - f(0.0)).abs() < 1e-8);
        let slope_right = f(5.0) - f(4.0);
        let slope_end = (f(4.0) - f(4.0 - h)) / h;
        assert!((slope_right - slope_end).abs() < 1e-2);
    }

    #[test]
    fn constraint_and_nullspace_dimensions() {
        let x = sample_x(150, 2);
        let basis = CubicRegressionSpline::new(&x, 8).unwrap();
        let cs = ConstrainedSmooth::new(basis, &x).unwrap();
        let xc = cs.design(&x);
        for c in 0..xc.ncols() {
            assert!(xc.column(c).sum().abs() < 1e-10);
        }
        let mixed = cs.to_mixed().unwrap();
        assert_eq!(mixed.n_fixed, 1);
        assert_eq!(mixed.n_random(), 6);
    }

    #[test]
    fn mixed_form_reconstructs_the_smooth() {
        let x = sample_x(120, 3);
        let basis = CubicRegressionSpline::new(&x, 10).unwrap();
        let cs = ConstrainedSmooth::new(basis, &x).unwrap();
        let mixed = cs.to_mixed().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let theta: Vec<f64> = (0..mixed.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let xm = mixed.mixed_design(&x);
        let fitted_mixed = &xm * DVector::from_vec(theta.clone());
        let original = mixed.original_coefficients(&theta);
        let fitted_orig = cs.basis.design(&x) * &original;
        for i in 0..x.len() {
            assert!((fitted_mixed[i] - fitted_orig[i]).abs() <= 1e-10 * (1.0 + fitted_orig[i].abs()));
        }
        // The penalty becomes the identity on the penalized block.
        let t = &mixed.transform;
        let pen = t.transpose() * &cs.penalty * t;
        for a in 0..mixed.dim() {
            for b in 0..mixed.dim() {
                let expect = if a == b && a >= mixed.n_fixed { 1.0 } else { 0.0 };
                assert!((pen[(a, b)] - expect).abs() < 1e-9, "({a},{b}) = {}", pen[(a, b)]);
            }
        }
    }

    #[test]
    fn constrained_fit_matches_unconstrained_fit_with_intercept() {
        let x = sample_x(100, 6);
        let y: Vec<f64> = x.iter().map(|v| (1.3 * v).sin() + 0.2 * v * v).collect();
        let basis = CubicRegressionSpline::new(&x, 8).unwrap();
        let lambda = 0.3;
        // Unconstrained: the constant lies in the penalty null space.
        let xu = basis.design(&x);
        let yv = DVector::from_vec(y.clone());
        let au = xu.transpose() * &xu + basis.penalty() * lambda;
        let bu = au.lu().solve(&(xu.transpose() * &yv)).unwrap();
        let fit_u = &xu * bu;
        // Constrained with a separate intercept.
        let cs = ConstrainedSmooth::new(basis, &x).unwrap();
        let xc = cs.design(&x);
        let n = x.len();
        let p = xc.ncols() + 1;
        let mut xa = DMatrix::zeros(n, p);
        xa.column_mut(0).fill(1.0);
        xa.columns_mut(1, p - 1).copy_from(&xc);
        let mut s = DMatrix::zeros(p, p);
        s.view_mut((1, 1), (p - 1, p - 1)).copy_from(&cs.penalty);
        let ac = xa.transpose() * &xa + s * lambda;
        let bc = ac.lu().solve(&(xa.transpose() * &yv)).unwrap();
        let fit_c = &xa * bc;
        for i in 0..n {
            assert!((fit_u[i] - fit_c[i]).abs() <= 1e-8 * (1.0 + fit_u[i].abs()));
        }
    }

    #[test]
    fn edf_limits() {
        let x = sample_x(200, 7);
        let basis = CubicRegressionSpline::new(&x, 9).unwrap();
        let cs = ConstrainedSmooth::new(basis, &x).unwrap();
        let xc = cs.design(&x);
        let k = xc.ncols() as f64;
        let tiny = edf(&xc, &cs.penalty, 1e-10, None).unwrap();
        let huge = edf(&xc, &cs.penalty, 1e10, None).unwrap();
        assert!((tiny - k).abs() < 1e-4, "{tiny}");
        assert!((huge - 1.0).abs() < 1e-4, "{huge}");
        let mixed = cs.to_mixed().unwrap();
        let xf = mixed.fixed_design(&x);
        let xr = mixed.random_design(&x);
        assert_relative_eq!(edf_mixed(&xf, &xr, 0.0, None).unwrap(), 1.0, epsilon = 1e-10);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(30))]
        #[test]
        fn mixed_edf_matches_direct_edf(loglambda in -6.0f64..6.0, seed in 0u64..500) {
            let x = sample_x(80, seed);
            let basis = CubicRegressionSpline::new(&x, 7).unwrap();
            let cs = ConstrainedSmooth::new(basis, &x).unwrap();
            let mixed = cs.to_mixed().unwrap();
            let lambda = 10f64.powf(loglambda);
            let direct = edf(&cs.design(&x), &cs.penalty, lambda, None).unwrap();
            let via_mixed = edf_mixed(&mixed.fixed_design(&x), &mixed.random_design(&x), 1.0 / lambda, None).unwrap();
            prop_assert!((direct - via_mixed).abs() <= 1e-7 * direct.max(1.0));
            prop_assert!(direct >= 1.0 - 1e-8 && direct <= cs.dim() as f64 + 1e-8);
        }
    }
}
