//! Post-fit inference for smooth terms and model comparison.
//!
//! Smooth coefficients are summarized by their empirical Bayes posterior
//! given the variance parameters, loadings and structural coefficients: the
//! inverse of the joint negative Hessian of `log p(y, u | β)` in `(β, u)`.
//! Pointwise bands are Wald bands; simultaneous bands use a critical value
//! simulated from the same posterior.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::assembly::{LoweredModel, ParamKind, Params, SmoothTerm};
use crate::error::{Error, Result};
use crate::estimation::FitResult;
use crate::model_spec::TermTarget;
use crate::splines::edf_mixed;

/// Posterior draws per parallel work unit; fixed so results do not depend on
/// the number of worker threads.
const DRAW_CHUNK: usize = 2048;

/// Fitted curve on a grid with pointwise and simultaneous bands.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothEstimate {
    pub grid: Vec<f64>,
    pub fhat: Vec<f64>,
    pub se: Vec<f64>,
    pub lo_pt: Vec<f64>,
    pub hi_pt: Vec<f64>,
    pub lo_sim: Vec<f64>,
    pub hi_sim: Vec<f64>,
    /// Pointwise multiplier `z_{1−α/2}`.
    pub z: f64,
    /// Simultaneous critical value `z̃`.
    pub critical: f64,
    pub alpha: f64,
    pub n_sim: usize,
    pub seed: u64,
    pub edf: f64,
}

/// Diagonal response weights `V_ii = d″(ν_i) / φ_{g(i)}` at the modes `u`.
pub fn response_weights(model: &LoweredModel, p: &Params<f64>, u: &[f64]) -> Vec<f64> {
    let design = model.design(p);
    let nu = model.predictor(&design, u);
    (0..model.n)
        .map(|i| model.family[i].variance(nu[i], model.trials[i]) / p.phi[model.group[i]])
        .collect()
}

/// Weight per basis point of a smooth: `Σ V_ii eff_i²` over the rows using it.
fn point_weights(model: &LoweredModel, smooth: &SmoothTerm, v: &[f64], eff: &[f64]) -> Vec<f64> {
    let mut w = vec![0.0; smooth.x.len()];
    for &(i, point) in &smooth.row_points {
        let mult = match smooth.target {
            TermTarget::Latent(k) => eff[i * model.n_latent + k],
            TermTarget::Predictor { .. } => 1.0,
        };
        w[point] += v[i] * mult * mult;
    }
    w
}

/// Effective degrees of freedom of every smooth at the given parameters,
/// `tr((XᵀWX + S/ψ)⁻¹ XᵀWX)` with `ψ = φ₁ θ²` and working weights at `u`.
pub fn smooth_edfs(model: &LoweredModel, p: &Params<f64>, u: &[f64]) -> Result<Vec<f64>> {
    if model.smooths.is_empty() {
        return Ok(Vec::new());
    }
    let v = response_weights(model, p, u);
    let eff = model.effects(p);
    model
        .smooths
        .iter()
        .map(|s| {
            let w = point_weights(model, s, &v, &eff);
            let xf = s.mixed.fixed_design(&s.x);
            let xr = s.mixed.random_design(&s.x);
            let psi = model.phi1(p) * p.theta[s.theta].powi(2);
            edf_mixed(&xf, &xr, psi, Some(&w))
        })
        .collect()
}

/// Posterior covariance of selected fixed effects and random effects.
///
/// Returns the covariance of `[β_sel; u_sel]` from the inverse of the joint
/// negative Hessian of `log p(y, u | β)`, computed by a Schur complement on
/// the sparse factor of `K`.
pub fn coefficient_covariance(
    model: &LoweredModel,
    p: &Params<f64>,
    u: &[f64],
    beta_sel: &[usize],
    u_sel: &[usize],
) -> Result<DMatrix<f64>> {
    let design = model.design(p);
    let v = response_weights(model, p, u);
    let k = model.k_matrix(&design, &v, 1.0 / model.phi1(p));
    let factor = model
        .symbolic
        .factorize(&k)
        .map_err(|e| Error::Inner(format!("factorization of K failed: {e}")))?;
    let (x, _) = model.design_matrices(p);
    let np = model.p;
    // Aᵀ V X and M = K⁻¹ Aᵀ V X, column by column.
    let mut atvx = DMatrix::zeros(model.r, np);
    let mut m = DMatrix::zeros(model.r, np);
    let mut xtvx = DMatrix::zeros(np, np);
    for j in 0..np {
        let vx: Vec<f64> = (0..model.n).map(|i| v[i] * x[(i, j)]).collect();
        let col = model.a_transpose(&design, &vx);
        m.set_column(j, &DVector::from_vec(factor.solve(&col)));
        atvx.set_column(j, &DVector::from_vec(col));
        for l in 0..np {
            xtvx[(l, j)] = (0..model.n).map(|i| x[(i, l)] * vx[i]).sum::<f64>();
        }
    }
    let schur = &xtvx - atvx.transpose() * &m;
    let schur_inv = if np > 0 {
        let sym = (&schur + schur.transpose()) * 0.5;
        sym.clone()
            .cholesky()
            .map(|c| c.inverse())
            .or_else(|| sym.try_inverse())
            .ok_or_else(|| Error::FitFailure("fixed-effect information matrix is singular".into()))?
    } else {
        DMatrix::zeros(0, 0)
    };
    let nb = beta_sel.len();
    let nu_ = u_sel.len();
    let mut cov = DMatrix::zeros(nb + nu_, nb + nu_);
    for (a, &i) in beta_sel.iter().enumerate() {
        for (b, &j) in beta_sel.iter().enumerate() {
            cov[(a, b)] = schur_inv[(i, j)];
        }
    }
    if nu_ > 0 {
        // Rows of M for the selected u.
        let msel = DMatrix::from_fn(nu_, np, |a, j| m[(u_sel[a], j)]);
        let ms = &msel * &schur_inv;
        for (a, &i) in beta_sel.iter().enumerate() {
            for b in 0..nu_ {
                let c = -ms[(b, i)];
                cov[(a, nb + b)] = c;
                cov[(nb + b, a)] = c;
            }
        }
        let extra = &ms * msel.transpose();
        for (b, &j) in u_sel.iter().enumerate() {
            let mut e = vec![0.0; model.r];
            e[j] = 1.0;
            let col = factor.solve(&e);
            for (a, &i) in u_sel.iter().enumerate() {
                cov[(nb + a, nb + b)] = col[i] + extra[(a, b)];
            }
        }
    }
    Ok((&cov + cov.transpose()) * 0.5)
}

/// Linear map from a smooth's coefficients `[β_F; u_R]` to its values at `grid`,
/// with the coefficient estimates and their posterior covariance.
pub fn smooth_linear_form(
    model: &LoweredModel,
    fit: &FitResult,
    smooth: usize,
    grid: &[f64],
) -> Result<(DMatrix<f64>, DVector<f64>, DMatrix<f64>)> {
    let s = model
        .smooths
        .get(smooth)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown smooth index {smooth}")))?;
    let theta = fit.params.theta[s.theta];
    let nf = s.n_fixed();
    let nr = s.n_random();
    let mixed = s.mixed.mixed_design(grid);
    let mut l = DMatrix::zeros(grid.len(), nf + nr);
    l.columns_mut(0, nf).copy_from(&mixed.columns(0, nf));
    l.columns_mut(nf, nr).copy_from(&(mixed.columns(nf, nr) * theta));
    let beta_sel: Vec<usize> = (s.beta_offset..s.beta_offset + nf).collect();
    let u_sel: Vec<usize> = (s.u_offset..s.u_offset + nr).collect();
    let coef = DVector::from_iterator(
        nf + nr,
        beta_sel.iter().map(|&j| fit.params.beta[j]).chain(u_sel.iter().map(|&j| fit.u[j])),
    );
    let cov = coefficient_covariance(model, &fit.params, &fit.u, &beta_sel, &u_sel)?;
    Ok((l, coef, cov))
}

/// Find a smooth by name.
pub fn smooth_index(model: &LoweredModel, name: &str) -> Result<usize> {
    model
        .smooths
        .iter()
        .position(|s| s.name == name)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown smooth `{name}`")))
}

/// Normal quantile `z_{1−α/2}`.
pub fn normal_multiplier(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let n = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(n.inverse_cdf(1.0 - alpha / 2.0))
}

/// `√D Qᵀ`-style factor `G` with `G Gᵀ = C` for a positive semidefinite `C`.
fn psd_factor(c: &DMatrix<f64>) -> DMatrix<f64> {
    let n = c.nrows();
    let eig = SymmetricEigen::new((c + c.transpose()) * 0.5);
    let mut g = DMatrix::zeros(n, n);
    for k in 0..n {
        let lam = eig.eigenvalues[k].max(0.0);
        g.set_column(k, &(eig.eigenvectors.column(k) * lam.sqrt()));
    }
    g
}

/// Draws of `G z` with `z ~ N(0, I)`, mapped by `f` and collected in draw order.
fn posterior_draws<T: Send>(
    g: &DMatrix<f64>,
    n_sim: usize,
    seed: u64,
    f: impl Fn(&DVector<f64>) -> T + Sync,
) -> Vec<T> {
    let dim = g.ncols();
    let n_chunks = n_sim.div_ceil(DRAW_CHUNK);
    (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            let count = DRAW_CHUNK.min(n_sim - c * DRAW_CHUNK);
            let mut out = Vec::with_capacity(count);
            let mut z = DVector::zeros(dim);
            for _ in 0..count {
                for zi in z.iter_mut() {
                    *zi = StandardNormal.sample(&mut rng);
                }
                out.push(f(&(g * &z)));
            }
            out
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

/// Bands for values `L c` at `grid` given `ĉ` and `Cov(ĉ)`.
#[allow(clippy::too_many_arguments)]
pub fn linear_bands(
    grid: &[f64],
    l: &DMatrix<f64>,
    coef: &DVector<f64>,
    cov: &DMatrix<f64>,
    alpha: f64,
    n_sim: usize,
    seed: u64,
    edf: f64,
) -> Result<SmoothEstimate> {
    let z = normal_multiplier(alpha)?;
    let fhat: Vec<f64> = (l * coef).iter().copied().collect();
    let lc = l * cov;
    let se: Vec<f64> = (0..grid.len())
        .map(|g| (lc.row(g) * l.row(g).transpose())[(0, 0)].max(0.0).sqrt())
        .collect();
    let critical = if grid.len() <= 1 || n_sim == 0 {
        z
    } else {
        let factor = l * psd_factor(cov);
        let mut r = posterior_draws(&factor, n_sim, seed, |dev| {
            let mut m: f64 = 0.0;
            for (g, &s) in se.iter().enumerate() {
                if s > 0.0 {
                    m = m.max(dev[g].abs() / s);
                }
            }
            m
        });
        r.sort_by(f64::total_cmp);
        let idx = ((1.0 - alpha) * r.len() as f64).ceil() as usize;
        // The maximum over the grid dominates each single point, whose exact
        // quantile is z.
        r[idx.clamp(1, r.len()) - 1].max(z)
    };
    Ok(SmoothEstimate {
        grid: grid.to_vec(),
        lo_pt: fhat.iter().zip(&se).map(|(f, s)| f - z * s).collect(),
        hi_pt: fhat.iter().zip(&se).map(|(f, s)| f + z * s).collect(),
        lo_sim: fhat.iter().zip(&se).map(|(f, s)| f - critical * s).collect(),
        hi_sim: fhat.iter().zip(&se).map(|(f, s)| f + critical * s).collect(),
        fhat,
        se,
        z,
        critical,
        alpha,
        n_sim,
        seed,
        edf,
    })
}

/// Pointwise and simultaneous bands for a smooth term.
pub fn smooth_bands(
    model: &LoweredModel,
    fit: &FitResult,
    smooth: usize,
    grid: &[f64],
    alpha: f64,
    n_sim: usize,
    seed: u64,
) -> Result<SmoothEstimate> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation grid".into()));
    }
    let (l, coef, cov) = smooth_linear_form(model, fit, smooth, grid)?;
    let edf = fit.edf.get(smooth).copied().unwrap_or(f64::NAN);
    linear_bands(grid, &l, &coef, &cov, alpha, n_sim, seed, edf)
}

/// Curves `f(a) + η Σ_j λ_j m_j(a)` of a measurement smooth at fixed values
/// `η` of a latent covariate, where `m_j` is 1 or the smooth's covariate.
///
/// Band variances combine the posterior covariance of the smooth with the
/// asymptotic covariance of the loadings, treated as uncorrelated.
#[allow(clippy::too_many_arguments)]
pub fn latent_trajectory_bands(
    model: &LoweredModel,
    fit: &FitResult,
    smooth: usize,
    latent: usize,
    offsets: &[f64],
    grid: &[f64],
    alpha: f64,
    n_sim: usize,
    seed: u64,
) -> Result<Vec<SmoothEstimate>> {
    let s = model
        .smooths
        .get(smooth)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown smooth index {smooth}")))?;
    let TermTarget::Predictor { items: Some(items) } = &s.target else {
        return Err(Error::InvalidArgument(format!(
            "smooth `{}` must apply to a single item to carry latent-covariate curves",
            s.name
        )));
    };
    if items.len() != 1 {
        return Err(Error::InvalidArgument(format!(
            "smooth `{}` must apply to a single item to carry latent-covariate curves",
            s.name
        )));
    }
    // Loadings of the latent on that item: (parameter, multiplied by covariate?).
    let mut terms = Vec::new();
    for (m, item, param, cov) in &model.loading_terms {
        if *m != latent || item != &items[0] {
            continue;
        }
        match cov {
            None => terms.push((*param, false)),
            Some(c) if c == &s.covariate => terms.push((*param, true)),
            Some(c) => {
                return Err(Error::InvalidArgument(format!(
                    "loading multiplier `{c}` differs from the smooth covariate `{}`",
                    s.covariate
                )))
            }
        }
    }
    if terms.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "latent `{}` does not load on the item of smooth `{}`",
            model.latent_names.get(latent).map_or("?", |s| s.as_str()),
            s.name
        )));
    }
    let vcov = fit
        .vcov
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("latent-covariate bands need the asymptotic covariance".into()))?;
    // Packed index of each loading parameter (None when fixed).
    let packed: Vec<Option<usize>> = terms
        .iter()
        .map(|&(param, _)| {
            model
                .free
                .iter()
                .position(|f| f.kind == ParamKind::Loading && f.index == param)
        })
        .collect();
    let (l_s, coef_s, cov_s) = smooth_linear_form(model, fit, smooth, grid)?;
    let ds = coef_s.len();
    let nt = terms.len();
    let mut cov = DMatrix::zeros(ds + nt, ds + nt);
    cov.view_mut((0, 0), (ds, ds)).copy_from(&cov_s);
    for a in 0..nt {
        for b in 0..nt {
            if let (Some(i), Some(j)) = (packed[a], packed[b]) {
                cov[(ds + a, ds + b)] = vcov[(i, j)];
            }
        }
    }
    let mut coef = DVector::zeros(ds + nt);
    coef.rows_mut(0, ds).copy_from(&coef_s);
    for (a, &(param, _)) in terms.iter().enumerate() {
        coef[ds + a] = fit.params.loadings[param];
    }
    let edf = fit.edf.get(smooth).copied().unwrap_or(f64::NAN);
    offsets
        .iter()
        .enumerate()
        .map(|(o, &eta)| {
            let mut l = DMatrix::zeros(grid.len(), ds + nt);
            l.columns_mut(0, ds).copy_from(&l_s);
            for (g, &a) in grid.iter().enumerate() {
                for (t, &(_, by_cov)) in terms.iter().enumerate() {
                    l[(g, ds + t)] = eta * if by_cov { a } else { 1.0 };
                }
            }
            linear_bands(grid, &l, &coef, &cov, alpha, n_sim, seed.wrapping_add(o as u64), edf)
        })
        .collect()
}

/// Posterior distribution of the grid location maximizing a smooth, as the
/// proportion of posterior curves peaking at each grid point.
pub fn argmax_distribution(
    model: &LoweredModel,
    fit: &FitResult,
    smooth: usize,
    grid: &[f64],
    n_sim: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if grid.is_empty() || n_sim == 0 {
        return Err(Error::InvalidArgument("argmax distribution needs a grid and draws".into()));
    }
    let (l, coef, cov) = smooth_linear_form(model, fit, smooth, grid)?;
    let fhat = &l * &coef;
    let factor = &l * psd_factor(&cov);
    let idx = posterior_draws(&factor, n_sim, seed, |dev| {
        let curve = &fhat + dev;
        curve.argmax().0
    });
    let mut counts = vec![0.0; grid.len()];
    for i in idx {
        counts[i] += 1.0;
    }
    Ok(counts.iter().map(|c| c / n_sim as f64).collect())
}

/// Row of an information-criterion comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AicRow {
    pub name: String,
    pub n_params: usize,
    pub loglik: f64,
    pub aic: f64,
    /// AIC minus the reference model's AIC.
    pub delta: f64,
}

/// Marginal AIC `−2ℓ + 2k`, with `k` the number of estimated parameters.
pub fn aic_value(fit: &FitResult) -> f64 {
    -2.0 * fit.loglik + 2.0 * fit.n_params() as f64
}

/// AIC table sorted by AIC, deltas relative to `reference`.
pub fn aic(fits: &[(&str, &FitResult)], reference: &str) -> Result<Vec<AicRow>> {
    let Some(&(_, first)) = fits.first() else {
        return Err(Error::InvalidArgument("no fits to compare".into()));
    };
    for (name, f) in fits {
        if f.data_digest != first.data_digest {
            return Err(Error::Incompatible(format!("fit `{name}` was computed on a different dataset")));
        }
    }
    let ref_fit = fits
        .iter()
        .find(|(n, _)| *n == reference)
        .ok_or_else(|| Error::InvalidArgument(format!("reference fit `{reference}` not found")))?;
    let ref_aic = aic_value(ref_fit.1);
    let mut rows: Vec<AicRow> = fits
        .iter()
        .map(|(name, f)| AicRow {
            name: name.to_string(),
            n_params: f.n_params(),
            loglik: f.loglik,
            aic: aic_value(f),
            delta: aic_value(f) - ref_aic,
        })
        .collect();
    rows.sort_by(|a, b| a.aic.total_cmp(&b.aic).then_with(|| a.name.cmp(&b.name)));
    Ok(rows)
}

/// Likelihood-ratio test result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrtResult {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
    /// Some parameter absent from the null sits on a bound in the alternative,
    /// where the χ² reference distribution is not exact.
    pub boundary_warning: bool,
}

/// Likelihood-ratio statistic and χ² tail probability from log-likelihoods.
pub fn lrt_statistic(loglik_null: f64, loglik_alt: f64, df: usize) -> Result<(f64, f64)> {
    if df == 0 {
        return Err(Error::InvalidArgument("degrees of freedom must be positive".into()));
    }
    let mut stat = 2.0 * (loglik_alt - loglik_null);
    if stat < -1e-6 {
        return Err(Error::FitFailure(format!(
            "alternative log-likelihood is below the null by {:.3e}; a fit did not reach its maximum",
            -stat / 2.0
        )));
    }
    stat = stat.max(0.0);
    let chi = ChiSquared::new(df as f64).expect("positive degrees of freedom");
    Ok((stat, chi.sf(stat)))
}

/// Likelihood-ratio test of a null model nested in an alternative.
pub fn lrt(null: &FitResult, alt: &FitResult, df: usize) -> Result<LrtResult> {
    if null.data_digest != alt.data_digest {
        return Err(Error::Incompatible("fits were computed on different datasets".into()));
    }
    let (statistic, p_value) = lrt_statistic(null.loglik, alt.loglik, df)?;
    let boundary_warning = alt
        .names
        .iter()
        .zip(&alt.boundary)
        .any(|(n, &b)| b && null.index(n).is_none());
    Ok(LrtResult {
        statistic,
        df,
        p_value,
        boundary_warning,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn pointwise_multiplier() {
        assert_relative_eq!(normal_multiplier(0.05).unwrap(), 1.959964, epsilon = 1e-6);
        assert!(normal_multiplier(0.0).is_err());
    }

    #[test]
    fn chi_square_tail() {
        let (s, p) = lrt_statistic(-10.0, -10.0 + 3.841 / 2.0, 1).unwrap();
        assert_relative_eq!(s, 3.841, epsilon = 1e-12);
        assert_relative_eq!(p, 0.05, epsilon = 1e-4);
        let (s, p) = lrt_statistic(-5.0, -5.0, 1).unwrap();
        assert_eq!(s, 0.0);
        assert_eq!(p, 1.0);
        assert_eq!(lrt_statistic(-5.0, -5.0 - 1e-8, 1).unwrap().0, 0.0);
        assert!(lrt_statistic(-5.0, -6.0, 1).is_err());
    }

    #[test]
    fn simultaneous_dominates_pointwise() {
        let grid: Vec<f64> = (0..20).map(|g| g as f64 / 19.0).collect();
        let l = DMatrix::from_fn(20, 3, |g, j| grid[g].powi(j as i32));
        let coef = DVector::from_vec(vec![0.5, -1.0, 2.0]);
        let cov = DMatrix::from_row_slice(3, 3, &[0.2, 0.05, 0.0, 0.05, 0.3, 0.1, 0.0, 0.1, 0.4]);
        let est = linear_bands(&grid, &l, &coef, &cov, 0.05, 5000, 7, 3.0).unwrap();
        assert!(est.critical >= est.z);
        for g in 0..20 {
            assert!(est.lo_sim[g] <= est.lo_pt[g] && est.hi_sim[g] >= est.hi_pt[g]);
            assert_relative_eq!(est.hi_pt[g] - est.fhat[g], est.fhat[g] - est.lo_pt[g], epsilon = 1e-12);
        }
        let again = linear_bands(&grid, &l, &coef, &cov, 0.05, 5000, 7, 3.0).unwrap();
        assert_eq!(est, again);
        let single = linear_bands(&grid[..1], &l.rows(0, 1).into_owned(), &coef, &cov, 0.05, 5000, 7, 3.0).unwrap();
        assert_eq!(single.critical, single.z);
        assert_eq!(single.lo_sim, single.lo_pt);
    }
}
