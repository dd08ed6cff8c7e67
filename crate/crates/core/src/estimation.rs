//! Maximum marginal likelihood estimation.
//!
//! The inner problem finds the conditional modes `ũ` of the integrand
//! `g(u) = Σ_i log f(y_i | ν_i) − ‖u‖² / (2 φ₁)` by Newton iteration with step
//! halving, using one sparse `LDLᵀ` factorization of `K = Aᵀ V A + I / φ₁` per
//! step. The Laplace approximation then gives
//! `ℓ = g(ũ) − (r / 2) ln φ₁ − ½ ln det K(ũ)`.
//!
//! Derivatives with respect to the outer parameters are exact. The inner
//! iteration converges in `f64`; one Newton step (two for second order) taken
//! in dual arithmetic from the converged mode then carries the tangent of `ũ`,
//! since a Newton step from a fixed point maps derivative errors of order `k`
//! to order `2k`.
//!
//! The outer problem is solved by a projected limited-memory BFGS method with
//! box constraints.

use std::any::TypeId;
use std::cell::RefCell;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::assembly::{Design, LoweredModel, ParamKind, Params};
use crate::autodiff::{gradient, hessian_subset, Differentiable, HyperDual, Scalar};
use crate::error::{Error, Result};
use crate::families::{validate_binomial, Family};
use crate::sparse::{CscMatrix, LdlFactor};

/// Controls of the inner Newton iteration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InnerOptions {
    pub max_iter: usize,
    /// Convergence when `‖∇g‖∞` falls below this value.
    pub grad_tol: f64,
    /// Convergence when the relative change in `g` falls below this value.
    pub rel_tol: f64,
    pub max_halvings: usize,
}

impl Default for InnerOptions {
    fn default() -> Self {
        InnerOptions {
            max_iter: 50,
            grad_tol: 1e-8,
            rel_tol: 1e-10,
            max_halvings: 20,
        }
    }
}

/// Controls of the outer optimization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub max_iter: usize,
    /// Projected-gradient tolerance, relative to `1 + |ℓ|`.
    pub pg_tol: f64,
    /// Relative change in `ℓ` between accepted iterations.
    pub f_tol: f64,
    /// Number of stored correction pairs.
    pub memory: usize,
    /// Compute the Hessian and the asymptotic covariance at the optimum.
    pub hessian: bool,
    pub inner: InnerOptions,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_iter: 1000,
            pg_tol: 1e-5,
            f_tol: 1e-9,
            memory: 10,
            hessian: true,
            inner: InnerOptions::default(),
        }
    }
}

/// Converged (or last) state of the inner iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct InnerState {
    pub u: Vec<f64>,
    /// Integrand `g(ũ)`.
    pub g: f64,
    /// `ln det K(ũ)`.
    pub logdet: f64,
    /// Accepted Newton steps.
    pub iterations: usize,
    pub grad_norm: f64,
    pub converged: bool,
}

impl InnerState {
    /// Laplace-approximate marginal log-likelihood.
    pub fn loglik(&self, model: &LoweredModel, phi1: f64) -> f64 {
        self.g - 0.5 * model.r as f64 * phi1.ln() - 0.5 * self.logdet
    }
}

/// Quantities of the integrand at one value of `u`.
struct Conditional<S> {
    g: S,
    /// `∇g = Aᵀ W (y − μ) − u / φ₁`.
    grad: Vec<S>,
    /// `V_ii = d″(ν_i) / φ_{g(i)}`.
    v: Vec<S>,
}

pub(crate) fn check_responses(model: &LoweredModel) -> Result<()> {
    for i in 0..model.n {
        if model.family[i] == Family::Binomial {
            validate_binomial(model.y[i], model.trials[i])
                .map_err(|e| Error::Data { row: i + 1, message: e.to_string() })?;
        } else if !model.y[i].is_finite() {
            return Err(Error::Data { row: i + 1, message: "response is not finite".into() });
        }
    }
    Ok(())
}

fn conditional<S: Scalar>(
    model: &LoweredModel,
    p: &Params<S>,
    design: &Design<S>,
    u: &[S],
    derivatives: bool,
) -> Conditional<S> {
    let nu = model.predictor(design, u);
    let inv_phi: Vec<S> = p.phi.iter().map(|&f| f.recip()).collect();
    let inv_phi1 = inv_phi[0];
    let mut g = S::zero();
    let mut resid = Vec::with_capacity(if derivatives { model.n } else { 0 });
    let mut v = Vec::with_capacity(resid.capacity());
    for (grp, &fam) in model.group_family.iter().enumerate() {
        let (count, sum_y2, constant) = model.normalizer_sums[grp];
        g += match fam {
            Family::Gaussian => {
                -(inv_phi[grp] * (0.5 * sum_y2)) - (p.phi[grp] * std::f64::consts::TAU).ln() * (0.5 * count)
            }
            Family::Binomial => S::from_f64(constant),
        };
    }
    for i in 0..model.n {
        let fam = model.family[i];
        let grp = model.group[i];
        let y = model.y[i];
        let m = model.trials[i];
        g += (nu[i] * y - fam.cumulant(nu[i], m)) * inv_phi[grp];
        if derivatives {
            let (mu, var) = fam.mean_variance(nu[i], m);
            resid.push((-mu + y) * inv_phi[grp]);
            v.push(var * inv_phi[grp]);
        }
    }
    let mut uu = S::zero();
    for &uj in u {
        uu += uj * uj;
    }
    g -= uu * inv_phi1 * 0.5;
    let mut grad = Vec::new();
    if derivatives {
        grad = model.a_transpose(design, &resid);
        for (gj, &uj) in grad.iter_mut().zip(u) {
            *gj -= uj * inv_phi1;
        }
    }
    Conditional { g, grad, v }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn factor_k<'a, S: Scalar>(model: &'a LoweredModel, k: &CscMatrix<S>) -> Result<LdlFactor<'a, S>> {
    model.symbolic.factorize(k).map_err(|e| Error::Inner(format!("factorization of K failed: {e}")))
}

/// Conditional modes of `u` by Newton iteration with step halving.
pub fn pirls(
    model: &LoweredModel,
    p: &Params<f64>,
    u_start: Option<&[f64]>,
    opts: &InnerOptions,
) -> Result<InnerState> {
    let design = model.design(p);
    pirls_with_design(model, p, &design, u_start, opts)
}

fn pirls_with_design(
    model: &LoweredModel,
    p: &Params<f64>,
    design: &Design<f64>,
    u_start: Option<&[f64]>,
    opts: &InnerOptions,
) -> Result<InnerState> {
    let inv_phi1 = 1.0 / model.phi1(p);
    let gaussian = model.all_gaussian();
    let mut u = match u_start {
        Some(u0) if u0.len() == model.r => u0.to_vec(),
        _ => vec![0.0; model.r],
    };
    let mut cur = conditional(model, p, design, &u, true);
    if !cur.g.is_finite() {
        return Err(Error::Inner("integrand is not finite at the starting point".into()));
    }
    let mut iterations = 0;
    let mut converged = false;
    // Factor of K at the current u, reused for the log-determinant.
    let mut logdet_here: Option<f64> = None;
    while iterations < opts.max_iter {
        let grad_norm = inf_norm(&cur.grad);
        if grad_norm <= opts.grad_tol {
            converged = true;
            break;
        }
        let k = model.k_matrix(design, &cur.v, inv_phi1);
        let factor = factor_k(model, &k)?;
        let delta = factor.solve(&cur.grad);
        let decrement: f64 = delta.iter().zip(&cur.grad).map(|(d, g)| d * g).sum();
        let logdet_before = factor.logdet();
        let mut tau = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let trial: Vec<f64> = u.iter().zip(&delta).map(|(a, d)| a + tau * d).collect();
            let next = conditional(model, p, design, &trial, true);
            if next.g.is_finite() && next.g >= cur.g {
                accepted = Some((trial, next));
                break;
            }
            tau *= 0.5;
        }
        let Some((trial, next)) = accepted else {
            if decrement <= 1e-8 * (1.0 + cur.g.abs()) {
                converged = true;
                logdet_here = Some(logdet_before);
                break;
            }
            return Err(Error::Inner(format!(
                "step halving failed after {} halvings (Newton decrement {decrement:.3e})",
                opts.max_halvings
            )));
        };
        iterations += 1;
        let change = (next.g - cur.g).abs();
        u = trial;
        cur = next;
        if gaussian {
            // K does not depend on u, so the Newton step is exact.
            logdet_here = Some(logdet_before);
            converged = true;
            break;
        }
        if change <= opts.rel_tol * cur.g.abs().max(1.0) {
            converged = true;
            break;
        }
    }
    let logdet = match logdet_here {
        Some(l) => l,
        None => {
            let k = model.k_matrix(design, &cur.v, inv_phi1);
            factor_k(model, &k)?.logdet()
        }
    };
    Ok(InnerState {
        grad_norm: inf_norm(&cur.grad),
        u,
        g: cur.g,
        logdet,
        iterations,
        converged,
    })
}

/// Laplace-approximate marginal log-likelihood at the given parameters.
pub fn laplace_loglik(model: &LoweredModel, p: &Params<f64>, opts: &InnerOptions) -> Result<f64> {
    model.check_admissible(p)?;
    let state = pirls(model, p, None, opts)?;
    if !state.converged {
        return Err(Error::Inner(format!("no convergence in {} iterations", opts.max_iter)));
    }
    Ok(state.loglik(model, model.phi1(p)))
}

fn is_second_order<S: 'static>() -> bool {
    TypeId::of::<S>() == TypeId::of::<HyperDual>()
}

/// Laplace log-likelihood as a function of the packed free parameters.
///
/// Inner modes are cached by parameter value and used as warm starts.
pub struct LaplaceObjective<'a> {
    pub model: &'a LoweredModel,
    pub options: InnerOptions,
    cache: RefCell<Option<(Vec<f64>, InnerState)>>,
    warm: RefCell<Option<Vec<f64>>>,
}

impl<'a> LaplaceObjective<'a> {
    pub fn new(model: &'a LoweredModel, options: InnerOptions) -> Result<Self> {
        check_responses(model)?;
        Ok(LaplaceObjective {
            model,
            options,
            cache: RefCell::new(None),
            warm: RefCell::new(None),
        })
    }

    /// Inner state at packed parameters `x`, from the cache when available.
    pub fn inner(&self, x: &[f64]) -> Result<InnerState> {
        if let Some((key, state)) = self.cache.borrow().as_ref() {
            if key.as_slice() == x {
                return Ok(state.clone());
            }
        }
        let p = self.model.unpack(x)?;
        self.model.check_admissible(&p)?;
        let design = self.model.design(&p);
        let warm = self.warm.borrow().clone();
        let attempt = pirls_with_design(self.model, &p, &design, warm.as_deref(), &self.options);
        let state = match attempt {
            Ok(s) if s.converged => s,
            _ if warm.is_some() => pirls_with_design(self.model, &p, &design, None, &self.options)?,
            Ok(s) => s,
            Err(e) => return Err(e),
        };
        if !state.converged {
            return Err(Error::Inner(format!(
                "no convergence in {} iterations (‖∇g‖∞ = {:.3e})",
                self.options.max_iter, state.grad_norm
            )));
        }
        *self.warm.borrow_mut() = Some(state.u.clone());
        *self.cache.borrow_mut() = Some((x.to_vec(), state.clone()));
        Ok(state)
    }

    /// Value of the log-likelihood at `x`.
    pub fn value(&self, x: &[f64]) -> Result<f64> {
        let state = self.inner(x)?;
        let p = self.model.unpack(x)?;
        Ok(state.loglik(self.model, self.model.phi1(&p)))
    }
}

impl Differentiable for LaplaceObjective<'_> {
    fn eval<S: Scalar>(&self, x: &[S]) -> Result<S> {
        let xv: Vec<f64> = x.iter().map(|v| v.value()).collect();
        let state = self.inner(&xv)?;
        let model = self.model;
        let p = model.unpack(x)?;
        if S::IS_PLAIN {
            return Ok(S::from_f64(state.loglik(model, model.phi1(&p).value())));
        }
        let design = model.design(&p);
        let phi1 = model.phi1(&p);
        let inv_phi1 = phi1.recip();
        let gaussian = model.all_gaussian();
        let steps = if !gaussian && is_second_order::<S>() { 2 } else { 1 };
        let mut u: Vec<S> = state.u.iter().map(|&v| S::from_f64(v)).collect();
        let mut logdet = None;
        for _ in 0..steps {
            let c = conditional(model, &p, &design, &u, true);
            let k = model.k_matrix(&design, &c.v, inv_phi1);
            let factor = factor_k(model, &k)?;
            let delta = factor.solve(&c.grad);
            for (uj, dj) in u.iter_mut().zip(delta) {
                *uj += dj;
            }
            if gaussian {
                logdet = Some(factor.logdet());
            }
        }
        let c = conditional(model, &p, &design, &u, !gaussian);
        let logdet = match logdet {
            Some(l) => l,
            None => {
                let k = model.k_matrix(&design, &c.v, inv_phi1);
                factor_k(model, &k)?.logdet()
            }
        };
        Ok(c.g - phi1.ln() * (0.5 * model.r as f64) - logdet * 0.5)
    }
}

/// Result of an outer optimization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    /// Names of the free parameters, in packing order.
    pub names: Vec<String>,
    pub kinds: Vec<ParamKind>,
    /// Packed estimates.
    pub x: Vec<f64>,
    pub params: Params<f64>,
    pub loglik: f64,
    /// Conditional modes at the estimates.
    pub u: Vec<f64>,
    /// Asymptotic covariance of the packed parameters; rows and columns of
    /// boundary parameters are zero.
    pub vcov: Option<DMatrix<f64>>,
    /// Wald standard errors (absent at the boundary or without a Hessian).
    pub se: Vec<Option<f64>>,
    pub boundary: Vec<bool>,
    pub converged: bool,
    pub iterations: usize,
    pub evaluations: usize,
    pub projected_gradient: f64,
    pub message: String,
    /// Effective degrees of freedom per smooth.
    pub edf: Vec<f64>,
    pub n_obs: usize,
    /// Digest of the responses, used to check that compared fits share data.
    pub data_digest: String,
}

impl FitResult {
    pub fn n_params(&self) -> usize {
        self.x.len()
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn estimate(&self, name: &str) -> Option<f64> {
        self.index(name).map(|i| self.x[i])
    }
}

/// Evaluation counter with a value-and-gradient cache for the minimized `−ℓ`.
struct Evaluator<'o, 'm> {
    objective: &'o LaplaceObjective<'m>,
    last: Option<(Vec<f64>, f64, Vec<f64>)>,
    evaluations: usize,
}

impl Evaluator<'_, '_> {
    fn value(&mut self, x: &[f64]) -> Result<f64> {
        if let Some((k, f, _)) = &self.last {
            if k.as_slice() == x {
                return Ok(*f);
            }
        }
        self.evaluations += 1;
        let v = -self.objective.value(x)?;
        if !v.is_finite() {
            return Err(Error::Inner("log-likelihood is not finite".into()));
        }
        Ok(v)
    }

    fn value_grad(&mut self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        if let Some((k, f, g)) = &self.last {
            if k.as_slice() == x {
                return Ok((*f, g.clone()));
            }
        }
        self.evaluations += 1;
        let (v, g) = gradient(self.objective, x)?;
        let f = -v;
        let g: Vec<f64> = g.iter().map(|d| -d).collect();
        if !f.is_finite() {
            return Err(Error::Inner("log-likelihood is not finite".into()));
        }
        self.last = Some((x.to_vec(), f, g.clone()));
        Ok((f, g))
    }
}

fn project(x: &mut [f64], lo: &[f64], hi: &[f64]) {
    for i in 0..x.len() {
        x[i] = x[i].clamp(lo[i], hi[i]);
    }
}

fn projected_gradient_norm(x: &[f64], g: &[f64], lo: &[f64], hi: &[f64]) -> f64 {
    let mut m: f64 = 0.0;
    for i in 0..x.len() {
        let step = (x[i] - g[i]).clamp(lo[i], hi[i]) - x[i];
        m = m.max(step.abs());
    }
    m
}

/// Outcome of [`minimize`].
pub(crate) struct MinimizeOutcome {
    pub x: Vec<f64>,
    pub f: f64,
    pub g: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub pg_norm: f64,
    pub message: String,
}

/// Projected L-BFGS minimization of `−ℓ` within box constraints.
///
/// The iteration runs on `z = x / scale`, which acts as a diagonal
/// preconditioner; tolerances refer to the original parameters.
fn minimize(
    eval: &mut Evaluator<'_, '_>,
    x0: &[f64],
    lo: &[f64],
    hi: &[f64],
    scale: &[f64],
    opts: &FitOptions,
) -> Result<MinimizeOutcome> {
    let n = x0.len();
    let to_x = |z: &[f64]| -> Vec<f64> { z.iter().zip(scale).map(|(a, s)| a * s).collect() };
    let lo_x = lo;
    let hi_x = hi;
    let lo: Vec<f64> = lo.iter().zip(scale).map(|(a, s)| a / s).collect();
    let hi: Vec<f64> = hi.iter().zip(scale).map(|(a, s)| a / s).collect();
    let (lo, hi) = (lo.as_slice(), hi.as_slice());
    let eval_z = |eval: &mut Evaluator<'_, '_>, z: &[f64]| -> Result<(f64, Vec<f64>)> {
        let (f, g) = eval.value_grad(&to_x(z))?;
        Ok((f, g.iter().zip(scale).map(|(a, s)| a * s).collect()))
    };
    let mut x: Vec<f64> = x0.iter().zip(scale).map(|(a, s)| a / s).collect();
    project(&mut x, lo, hi);
    let pg_x = |z: &[f64], g: &[f64]| -> f64 {
        let gx: Vec<f64> = g.iter().zip(scale).map(|(a, s)| a / s).collect();
        projected_gradient_norm(&to_x(z), &gx, lo_x, hi_x)
    };
    let (mut f, mut g) = eval_z(eval, &x).map_err(|e| match e {
        Error::Inner(reason) | Error::NonDifferentiable(reason) => Error::NonFiniteStart {
            params: to_x(&x),
            reason,
        },
        other => other,
    })?;
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut iterations = 0;
    let mut message = String::from("iteration limit reached");
    let mut converged = false;
    let mut pg = pg_x(&x, &g);
    let mut small_changes = 0;
    while iterations < opts.max_iter {
        if pg <= opts.pg_tol * (1.0 + f.abs()) {
            converged = true;
            message = "projected gradient below tolerance".into();
            break;
        }
        // Variables held at a bound by the gradient.
        let free: Vec<bool> = (0..n)
            .map(|i| !((x[i] <= lo[i] && g[i] > 0.0) || (x[i] >= hi[i] && g[i] < 0.0)))
            .collect();
        let mut d = two_loop(&g, &s_hist, &y_hist, &free);
        let mut slope: f64 = d.iter().zip(&g).map(|(a, b)| a * b).sum();
        if !(slope < 0.0) {
            s_hist.clear();
            y_hist.clear();
            d = (0..n).map(|i| if free[i] { -g[i] } else { 0.0 }).collect();
            slope = d.iter().zip(&g).map(|(a, b)| a * b).sum();
            if !(slope < 0.0) {
                converged = true;
                message = "no feasible descent direction".into();
                break;
            }
        }
        let mut alpha = if s_hist.is_empty() {
            (1.0 / inf_norm(&d)).min(1.0)
        } else {
            1.0
        };
        let mut accepted = None;
        for _ in 0..40 {
            let mut trial: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + alpha * b).collect();
            project(&mut trial, lo, hi);
            let decrease: f64 = trial.iter().zip(&x).zip(&g).map(|((t, a), gi)| (t - a) * gi).sum();
            if trial == x {
                break;
            }
            if let Ok(ft) = eval.value(&to_x(&trial)) {
                if ft <= f + 1e-4 * decrease.min(0.0) {
                    accepted = Some((trial, ft));
                    break;
                }
            }
            alpha *= 0.5;
        }
        let Some((trial, ft)) = accepted else {
            if !s_hist.is_empty() {
                s_hist.clear();
                y_hist.clear();
                continue;
            }
            message = "line search failed".into();
            break;
        };
        let (_, gt) = match eval_z(eval, &trial) {
            Ok(v) => v,
            Err(e) => {
                message = format!("gradient evaluation failed: {e}");
                break;
            }
        };
        iterations += 1;
        let s: Vec<f64> = trial.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gt.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        let ss: f64 = s.iter().map(|a| a * a).sum();
        let yy: f64 = y.iter().map(|a| a * a).sum();
        if sy > 1e-10 * (ss * yy).sqrt() {
            s_hist.push(s);
            y_hist.push(y);
            if s_hist.len() > opts.memory {
                s_hist.remove(0);
                y_hist.remove(0);
            }
        }
        let f_old = f;
        x = trial;
        f = ft;
        g = gt;
        pg = pg_x(&x, &g);
        // Two consecutive negligible changes, so that a single short step
        // does not end the iteration.
        if (f_old - f).abs() <= opts.f_tol * f_old.abs().max(f.abs()).max(1.0) {
            small_changes += 1;
            if small_changes >= 2 {
                converged = true;
                message = "relative change in log-likelihood below tolerance".into();
                break;
            }
        } else {
            small_changes = 0;
        }
    }
    Ok(MinimizeOutcome {
        g: g.iter().zip(scale).map(|(a, s)| a / s).collect(),
        x: to_x(&x),
        f,
        iterations,
        converged,
        pg_norm: pg,
        message,
    })
}

/// Two-loop recursion on the free subspace.
fn two_loop(g: &[f64], s_hist: &[Vec<f64>], y_hist: &[Vec<f64>], free: &[bool]) -> Vec<f64> {
    let dot = |a: &[f64], b: &[f64]| -> f64 { (0..a.len()).filter(|&i| free[i]).map(|i| a[i] * b[i]).sum() };
    let mut q: Vec<f64> = g.iter().zip(free).map(|(gi, &f)| if f { *gi } else { 0.0 }).collect();
    let k = s_hist.len();
    let mut alphas = vec![0.0; k];
    let mut rhos = vec![0.0; k];
    for j in (0..k).rev() {
        let sy = dot(&s_hist[j], &y_hist[j]);
        if sy <= 0.0 {
            continue;
        }
        rhos[j] = 1.0 / sy;
        alphas[j] = rhos[j] * dot(&s_hist[j], &q);
        for i in 0..q.len() {
            if free[i] {
                q[i] -= alphas[j] * y_hist[j][i];
            }
        }
    }
    if k > 0 {
        let sy = dot(&s_hist[k - 1], &y_hist[k - 1]);
        let yy = dot(&y_hist[k - 1], &y_hist[k - 1]);
        if sy > 0.0 && yy > 0.0 {
            let gamma = sy / yy;
            q.iter_mut().for_each(|v| *v *= gamma);
        }
    }
    for j in 0..k {
        if rhos[j] == 0.0 {
            continue;
        }
        let beta = rhos[j] * dot(&y_hist[j], &q);
        for i in 0..q.len() {
            if free[i] {
                q[i] += (alphas[j] - beta) * s_hist[j][i];
            }
        }
    }
    q.iter().map(|v| -v).collect()
}

/// Asymptotic covariance `−H⁻¹` restricted to the directions where `H` is
/// negative definite.
pub fn covariance_from_hessian(h: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let n = h.nrows();
    if n == 0 {
        return (DMatrix::zeros(0, 0), true);
    }
    let neg = -h;
    if let Some(ch) = neg.clone().cholesky() {
        let inv = ch.inverse();
        return ((&inv + inv.transpose()) * 0.5, true);
    }
    let eig = SymmetricEigen::new((&neg + neg.transpose()) * 0.5);
    let max = eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let mut cov = DMatrix::zeros(n, n);
    for k in 0..n {
        let lam = eig.eigenvalues[k];
        if lam > 1e-10 * max {
            let q = eig.eigenvectors.column(k);
            cov += q * q.transpose() / lam;
        }
    }
    (cov, false)
}

/// SHA-256 digest of the responses and trials of a model.
pub fn data_digest(model: &LoweredModel) -> String {
    let mut h = Sha256::new();
    h.update((model.n as u64).to_le_bytes());
    for i in 0..model.n {
        h.update(model.y[i].to_le_bytes());
        h.update(model.trials[i].to_le_bytes());
        h.update((model.group[i] as u64).to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Maximize the Laplace log-likelihood from the packed start `x0`
/// (default starting values when `None`).
pub fn fit(model: &LoweredModel, x0: Option<&[f64]>, opts: &FitOptions) -> Result<FitResult> {
    let objective = LaplaceObjective::new(model, opts.inner)?;
    let start = match x0 {
        Some(x) => x.to_vec(),
        None => model.pack(&model.initial_params()),
    };
    if start.len() != model.n_free() {
        return Err(Error::InvalidArgument(format!(
            "start vector has length {}, expected {}",
            start.len(),
            model.n_free()
        )));
    }
    if let Some(i) = start.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteStart {
            params: start.clone(),
            reason: format!("{} is not finite", model.free[i].name),
        });
    }
    let (lo, hi) = model.bounds();
    let mut eval = Evaluator {
        objective: &objective,
        last: None,
        evaluations: 0,
    };
    // Scale and dispersion parameters vary over orders of magnitude; their
    // current values set the preconditioner. A second run rescales at the
    // first solution, which matters when the start is far from it.
    let scale_at = |x: &[f64]| -> Vec<f64> {
        model
            .free
            .iter()
            .zip(x)
            .map(|(info, &v)| match info.kind {
                ParamKind::Dispersion => v.abs().max(1e-3),
                ParamKind::Theta if info.lower == 0.0 => v.abs().max(0.05),
                _ => 1.0,
            })
            .collect()
    };
    let first = minimize(&mut eval, &start, &lo, &hi, &scale_at(&start), opts)?;
    let out = if first.converged && first.iterations > 0 {
        let mut second_opts = *opts;
        second_opts.max_iter = opts.max_iter.saturating_sub(first.iterations).max(1);
        let mut second = minimize(&mut eval, &first.x, &lo, &hi, &scale_at(&first.x), &second_opts)?;
        second.iterations += first.iterations;
        if second.f <= first.f {
            second
        } else {
            first
        }
    } else {
        first
    };
    let mut x = out.x;
    let mut f = out.f;
    let boundary: Vec<bool> = (0..x.len()).map(|i| x[i] <= lo[i] || x[i] >= hi[i]).collect();
    let interior: Vec<usize> = (0..x.len()).filter(|&i| !boundary[i]).collect();
    let mut vcov = None;
    let mut se = vec![None; x.len()];
    let mut message = out.message;
    if opts.hessian && out.converged && !interior.is_empty() {
        let h = hessian_subset(&objective, &x, &interior)?;
        // Newton step on the fixed effects, on which ℓ depends almost
        // quadratically (exactly for Gaussian responses).
        let beta_pos: Vec<usize> = interior
            .iter()
            .enumerate()
            .filter(|(_, &i)| model.free[i].kind == ParamKind::Beta)
            .map(|(a, _)| a)
            .collect();
        if !beta_pos.is_empty() {
            let hb = DMatrix::from_fn(beta_pos.len(), beta_pos.len(), |a, b| -h[(beta_pos[a], beta_pos[b])]);
            let gb = DVector::from_fn(beta_pos.len(), |a, _| -out.g[interior[beta_pos[a]]]);
            if let Some(ch) = hb.cholesky() {
                let step = ch.solve(&gb);
                let mut trial = x.clone();
                for (a, &pos) in beta_pos.iter().enumerate() {
                    trial[interior[pos]] += step[a];
                }
                if let Ok(ft) = eval.value(&trial) {
                    if ft <= f {
                        x = trial;
                        f = ft;
                    }
                }
            }
        }
        let (cov_int, full_rank) = covariance_from_hessian(&h);
        if !full_rank {
            message.push_str("; Hessian not negative definite, covariance restricted");
        }
        let mut cov = DMatrix::zeros(x.len(), x.len());
        for (a, &i) in interior.iter().enumerate() {
            for (b, &j) in interior.iter().enumerate() {
                cov[(i, j)] = cov_int[(a, b)];
            }
            let v = cov_int[(a, a)];
            if v > 0.0 && v.is_finite() {
                se[i] = Some(v.sqrt());
            }
        }
        vcov = Some(cov);
    }
    let state = objective.inner(&x)?;
    let params = model.unpack(&x)?;
    let edf = crate::inference::smooth_edfs(model, &params, &state.u)?;
    let pg = projected_gradient_norm(&x, &out.g, &lo, &hi);
    Ok(FitResult {
        names: model.free.iter().map(|f| f.name.clone()).collect(),
        kinds: model.free.iter().map(|f| f.kind).collect(),
        loglik: -f,
        u: state.u,
        params,
        x,
        vcov,
        se,
        boundary,
        converged: out.converged,
        iterations: out.iterations,
        evaluations: eval.evaluations,
        projected_gradient: pg.min(out.pg_norm),
        message,
        edf,
        n_obs: model.n,
        data_digest: data_digest(model),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::hessian;
    use crate::data::{Dataset, Table};
    use crate::model_spec::ModelSpec;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Binomial, Distribution, Normal};

    fn random_intercept(family: &str, clusters: usize, per: usize, seed: u64) -> LoweredModel {
        let config = format!(
            r#"
levels = ["cluster"]
[[family_groups]]
id = "g"
family = "{family}"
[[dispersion_groups]]
id = "g"
[[latent]]
name = "b"
level = "cluster"
[[loading_parameters]]
name = "one"
fixed = 1.0
[[loadings]]
latent = "b"
item = "y"
parameter = "one"
[[fixed_effects]]
name = "intercept"
[[fixed_effects]]
name = "slope"
covariate = "x"
"#
        );
        let spec = ModelSpec::from_toml_str(&config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        for c in 0..clusters {
            let b: f64 = Normal::new(0.0, 0.8).unwrap().sample(&mut rng);
            for _ in 0..per {
                let x: f64 = rng.random_range(-1.0..1.0);
                let nu = 0.3 + 0.7 * x + b;
                let y = if family == "gaussian" {
                    nu + Normal::new(0.0, 0.5).unwrap().sample(&mut rng)
                } else {
                    let p = 1.0 / (1.0 + (-nu).exp());
                    Binomial::new(6, p).unwrap().sample(&mut rng) as f64
                };
                rows.push(vec![y.to_string(), "6".into(), "g".into(), "g".into(), "y".into(), format!("c{c}"), x.to_string()]);
            }
        }
        let table = Table {
            header: ["response", "trials", "family_group", "dispersion_group", "item", "level2_id", "x"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            rows,
        };
        let data = Dataset::from_table(&table, &spec).unwrap();
        LoweredModel::new(&spec, &data).unwrap()
    }

    fn dense_marginal_gaussian(model: &LoweredModel, p: &Params<f64>) -> f64 {
        let (x, z) = model.design_matrices(p);
        let lam = model.lambda_matrix(&p.theta).to_dense();
        let zl = z.to_dense() * lam;
        let mut sigma = &zl * zl.transpose() * p.phi[0];
        for i in 0..model.n {
            sigma[(i, i)] += p.phi[model.group[i]];
        }
        let mean = x * DVector::from_vec(p.beta.clone());
        let resid = DVector::from_vec(model.y.clone()) - mean;
        let ch = sigma.cholesky().unwrap();
        let logdet: f64 = ch.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
        let quad = resid.dot(&ch.solve(&resid));
        -0.5 * (model.n as f64 * std::f64::consts::TAU.ln() + logdet + quad)
    }

    #[test]
    fn gaussian_laplace_is_exact() {
        let model = random_intercept("gaussian", 8, 5, 1);
        let p = model.unpack(&[0.2, 0.5, 0.9, 0.3]).unwrap();
        let l = laplace_loglik(&model, &p, &InnerOptions::default()).unwrap();
        assert_relative_eq!(l, dense_marginal_gaussian(&model, &p), max_relative = 1e-10);
    }

    #[test]
    fn gaussian_inner_takes_one_step() {
        let model = random_intercept("gaussian", 8, 5, 2);
        let p = model.unpack(&[0.2, 0.5, 0.9, 0.3]).unwrap();
        let s = pirls(&model, &p, None, &InnerOptions::default()).unwrap();
        assert_eq!(s.iterations, 1);
        assert!(s.grad_norm <= 1e-8);
    }

    #[test]
    fn binomial_modes_are_stationary() {
        let model = random_intercept("binomial", 4, 6, 3);
        let p = model.unpack(&[0.1, 0.4, 1.1]).unwrap();
        let s = pirls(&model, &p, None, &InnerOptions::default()).unwrap();
        assert!(s.converged);
        assert!(s.grad_norm <= 1e-8);
        assert!(s.iterations > 1);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for family in ["gaussian", "binomial"] {
            let model = random_intercept(family, 6, 5, 4);
            let obj = LaplaceObjective::new(&model, InnerOptions::default()).unwrap();
            let x = if family == "gaussian" { vec![0.2, 0.5, 0.9, 0.3] } else { vec![0.1, 0.4, 1.1] };
            let (_, g) = gradient(&obj, &x).unwrap();
            for i in 0..x.len() {
                let h = 1e-6 * x[i].abs().max(1.0);
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += h;
                xm[i] -= h;
                let fd = (obj.value(&xp).unwrap() - obj.value(&xm).unwrap()) / (2.0 * h);
                assert_relative_eq!(g[i], fd, max_relative = 1e-5, epsilon = 1e-7);
            }
            let hm = hessian(&obj, &x).unwrap();
            for i in 0..x.len() {
                let h = 1e-5 * x[i].abs().max(1.0);
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += h;
                xm[i] -= h;
                let gp = gradient(&obj, &xp).unwrap().1;
                let gm = gradient(&obj, &xm).unwrap().1;
                for j in 0..x.len() {
                    let fd = (gp[j] - gm[j]) / (2.0 * h);
                    assert_relative_eq!(hm[(i, j)], fd, max_relative = 1e-4, epsilon = 1e-6);
                }
            }
        }
    }

    #[test]
    fn fit_reaches_an_interior_maximum() {
        let model = random_intercept("gaussian", 30, 6, 5);
        let fit = fit(&model, None, &FitOptions::default()).unwrap();
        assert!(fit.converged, "{}", fit.message);
        assert!(fit.se.iter().all(|s| s.is_some()));
        assert!((fit.x[1] - 0.7).abs() < 0.3);
        let obj = LaplaceObjective::new(&model, InnerOptions::default()).unwrap();
        let mut worse = fit.x.clone();
        worse[1] += 0.05;
        assert!(obj.value(&worse).unwrap() < fit.loglik);
    }
}
