//! Forward-mode automatic differentiation.
//!
//! Numerical code in this crate is written once, generic over [`Scalar`], and
//! evaluated with `f64` for values, [`Dual`] for gradients and [`HyperDual`]
//! for exact second derivatives.
//!
//! Points where a primitive has no derivative (`abs` at zero, `ln` or `sqrt`
//! at non-positive arguments) produce NaN tangents; [`gradient`] and
//! [`hessian`] turn those into [`Error::NonDifferentiable`].

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Number type accepted by the differentiable numerical kernels.
pub trait Scalar:
    Copy
    + Debug
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    /// True for plain `f64`, which carries no derivative information.
    const IS_PLAIN: bool;

    fn from_f64(x: f64) -> Self;
    fn value(&self) -> f64;
    /// True when the value and all derivative parts are finite.
    fn is_finite(&self) -> bool;

    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn ln_1p(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;
    fn powi(self, n: i32) -> Self;

    fn zero() -> Self {
        Self::from_f64(0.0)
    }

    fn one() -> Self {
        Self::from_f64(1.0)
    }

    fn recip(self) -> Self {
        Self::one() / self
    }

    /// Logistic function `1 / (1 + exp(-x))`; saturates to 0 or 1 instead of
    /// overflowing and keeps full relative precision in both tails.
    fn expit(self) -> Self;

    /// `ln(1 + exp(x))` without overflow.
    fn softplus(self) -> Self {
        if self.value() > 0.0 {
            self + (-self).exp().ln_1p()
        } else {
            self.exp().ln_1p()
        }
    }
}

impl Scalar for f64 {
    const IS_PLAIN: bool = true;

    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn value(&self) -> f64 {
        *self
    }
    #[inline]
    fn is_finite(&self) -> bool {
        f64::is_finite(*self)
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn ln_1p(self) -> Self {
        f64::ln_1p(self)
    }
    #[inline]
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    #[inline]
    fn abs(self) -> Self {
        f64::abs(self)
    }
    #[inline]
    fn powi(self, n: i32) -> Self {
        f64::powi(self, n)
    }
    #[inline]
    fn expit(self) -> Self {
        1.0 / (1.0 + (-self).exp())
    }
}

macro_rules! assign_ops {
    ([$($gen:tt)*] $t:ty) => {
        impl<$($gen)*> AddAssign for $t {
            #[inline]
            fn add_assign(&mut self, o: Self) {
                *self = *self + o;
            }
        }
        impl<$($gen)*> SubAssign for $t {
            #[inline]
            fn sub_assign(&mut self, o: Self) {
                *self = *self - o;
            }
        }
        impl<$($gen)*> MulAssign for $t {
            #[inline]
            fn mul_assign(&mut self, o: Self) {
                *self = *self * o;
            }
        }
        impl<$($gen)*> DivAssign for $t {
            #[inline]
            fn div_assign(&mut self, o: Self) {
                *self = *self / o;
            }
        }
    };
}

assign_ops!([const N: usize] Dual<N>);
assign_ops!([] HyperDual);

/// First-order dual number carrying `N` tangent directions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual<const N: usize> {
    pub v: f64,
    pub d: [f64; N],
}

impl<const N: usize> Dual<N> {
    pub fn constant(v: f64) -> Self {
        Dual { v, d: [0.0; N] }
    }

    /// Variable with unit tangent in direction `k`.
    pub fn variable(v: f64, k: usize) -> Self {
        let mut d = [0.0; N];
        d[k] = 1.0;
        Dual { v, d }
    }

    #[inline]
    fn chain(self, v: f64, dv: f64) -> Self {
        let mut d = self.d;
        for x in d.iter_mut() {
            *x *= dv;
        }
        Dual { v, d }
    }
}

impl<const N: usize> Add for Dual<N> {
    type Output = Self;
    #[inline]
    fn add(mut self, o: Self) -> Self {
        self.v += o.v;
        for k in 0..N {
            self.d[k] += o.d[k];
        }
        self
    }
}

impl<const N: usize> Sub for Dual<N> {
    type Output = Self;
    #[inline]
    fn sub(mut self, o: Self) -> Self {
        self.v -= o.v;
        for k in 0..N {
            self.d[k] -= o.d[k];
        }
        self
    }
}

impl<const N: usize> Mul for Dual<N> {
    type Output = Self;
    #[inline]
    fn mul(self, o: Self) -> Self {
        let mut d = [0.0; N];
        for k in 0..N {
            d[k] = self.d[k] * o.v + self.v * o.d[k];
        }
        Dual { v: self.v * o.v, d }
    }
}

impl<const N: usize> Div for Dual<N> {
    type Output = Self;
    #[inline]
    fn div(self, o: Self) -> Self {
        let inv = 1.0 / o.v;
        let v = self.v * inv;
        let mut d = [0.0; N];
        for k in 0..N {
            d[k] = (self.d[k] - v * o.d[k]) * inv;
        }
        Dual { v, d }
    }
}

impl<const N: usize> Neg for Dual<N> {
    type Output = Self;
    #[inline]
    fn neg(mut self) -> Self {
        self.v = -self.v;
        for x in self.d.iter_mut() {
            *x = -*x;
        }
        self
    }
}

impl<const N: usize> Add<f64> for Dual<N> {
    type Output = Self;
    #[inline]
    fn add(mut self, o: f64) -> Self {
        self.v += o;
        self
    }
}

impl<const N: usize> Sub<f64> for Dual<N> {
    type Output = Self;
    #[inline]
    fn sub(mut self, o: f64) -> Self {
        self.v -= o;
        self
    }
}

impl<const N: usize> Mul<f64> for Dual<N> {
    type Output = Self;
    #[inline]
    fn mul(mut self, o: f64) -> Self {
        self.v *= o;
        for x in self.d.iter_mut() {
            *x *= o;
        }
        self
    }
}

impl<const N: usize> Div<f64> for Dual<N> {
    type Output = Self;
    #[inline]
    fn div(self, o: f64) -> Self {
        self * (1.0 / o)
    }
}

impl<const N: usize> Scalar for Dual<N> {
    const IS_PLAIN: bool = false;

    fn from_f64(x: f64) -> Self {
        Dual::constant(x)
    }
    #[inline]
    fn value(&self) -> f64 {
        self.v
    }
    fn is_finite(&self) -> bool {
        self.v.is_finite() && self.d.iter().all(|x| x.is_finite())
    }
    #[inline]
    fn exp(self) -> Self {
        let e = self.v.exp();
        self.chain(e, e)
    }
    #[inline]
    fn ln(self) -> Self {
        if self.v <= 0.0 {
            return self.chain(self.v.ln(), f64::NAN);
        }
        self.chain(self.v.ln(), 1.0 / self.v)
    }
    #[inline]
    fn sqrt(self) -> Self {
        if self.v <= 0.0 {
            return self.chain(self.v.sqrt(), f64::NAN);
        }
        let s = self.v.sqrt();
        self.chain(s, 0.5 / s)
    }
    #[inline]
    fn ln_1p(self) -> Self {
        if self.v <= -1.0 {
            return self.chain(self.v.ln_1p(), f64::NAN);
        }
        self.chain(self.v.ln_1p(), 1.0 / (1.0 + self.v))
    }
    #[inline]
    fn tanh(self) -> Self {
        let t = self.v.tanh();
        self.chain(t, 1.0 - t * t)
    }
    #[inline]
    fn abs(self) -> Self {
        if self.v == 0.0 {
            return self.chain(0.0, f64::NAN);
        }
        self.chain(self.v.abs(), self.v.signum())
    }
    #[inline]
    fn powi(self, n: i32) -> Self {
        let dv = if n == 0 {
            0.0
        } else {
            n as f64 * self.v.powi(n - 1)
        };
        self.chain(self.v.powi(n), dv)
    }
    #[inline]
    fn expit(self) -> Self {
        let p = Scalar::expit(self.v);
        let q = Scalar::expit(-self.v);
        self.chain(p, p * q)
    }
}

/// Hyper-dual number `v + a e1 + b e2 + c e1 e2` with `e1² = e2² = 0`.
///
/// Seeding `e1` on variable `i` and `e2` on variable `j` yields the exact
/// mixed partial `∂²f/∂x_i∂x_j` in the `e12` part.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HyperDual {
    pub v: f64,
    pub e1: f64,
    pub e2: f64,
    pub e12: f64,
}

impl HyperDual {
    pub fn constant(v: f64) -> Self {
        HyperDual {
            v,
            e1: 0.0,
            e2: 0.0,
            e12: 0.0,
        }
    }

    /// Apply a scalar function with value `f0`, first derivative `f1` and
    /// second derivative `f2` at `self.v`.
    #[inline]
    fn chain(self, f0: f64, f1: f64, f2: f64) -> Self {
        HyperDual {
            v: f0,
            e1: f1 * self.e1,
            e2: f1 * self.e2,
            e12: f1 * self.e12 + f2 * self.e1 * self.e2,
        }
    }
}

impl Add for HyperDual {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        HyperDual {
            v: self.v + o.v,
            e1: self.e1 + o.e1,
            e2: self.e2 + o.e2,
            e12: self.e12 + o.e12,
        }
    }
}

impl Sub for HyperDual {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        HyperDual {
            v: self.v - o.v,
            e1: self.e1 - o.e1,
            e2: self.e2 - o.e2,
            e12: self.e12 - o.e12,
        }
    }
}

impl Mul for HyperDual {
    type Output = Self;
    #[inline]
    fn mul(self, o: Self) -> Self {
        HyperDual {
            v: self.v * o.v,
            e1: self.e1 * o.v + self.v * o.e1,
            e2: self.e2 * o.v + self.v * o.e2,
            e12: self.e12 * o.v + self.e1 * o.e2 + self.e2 * o.e1 + self.v * o.e12,
        }
    }
}

impl Div for HyperDual {
    type Output = Self;
    #[inline]
    fn div(self, o: Self) -> Self {
        let inv = 1.0 / o.v;
        self * o.chain(inv, -inv * inv, 2.0 * inv * inv * inv)
    }
}

impl Neg for HyperDual {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        HyperDual {
            v: -self.v,
            e1: -self.e1,
            e2: -self.e2,
            e12: -self.e12,
        }
    }
}

impl Add<f64> for HyperDual {
    type Output = Self;
    #[inline]
    fn add(mut self, o: f64) -> Self {
        self.v += o;
        self
    }
}

impl Sub<f64> for HyperDual {
    type Output = Self;
    #[inline]
    fn sub(mut self, o: f64) -> Self {
        self.v -= o;
        self
    }
}

impl Mul<f64> for HyperDual {
    type Output = Self;
    #[inline]
    fn mul(self, o: f64) -> Self {
        HyperDual {
            v: self.v * o,
            e1: self.e1 * o,
            e2: self.e2 * o,
            e12: self.e12 * o,
        }
    }
}

impl Div<f64> for HyperDual {
    type Output = Self;
    #[inline]
    fn div(self, o: f64) -> Self {
        self * (1.0 / o)
    }
}

impl Scalar for HyperDual {
    const IS_PLAIN: bool = false;

    fn from_f64(x: f64) -> Self {
        HyperDual::constant(x)
    }
    #[inline]
    fn value(&self) -> f64 {
        self.v
    }
    fn is_finite(&self) -> bool {
        self.v.is_finite() && self.e1.is_finite() && self.e2.is_finite() && self.e12.is_finite()
    }
    #[inline]
    fn exp(self) -> Self {
        let e = self.v.exp();
        self.chain(e, e, e)
    }
    #[inline]
    fn ln(self) -> Self {
        if self.v <= 0.0 {
            return self.chain(self.v.ln(), f64::NAN, f64::NAN);
        }
        let inv = 1.0 / self.v;
        self.chain(self.v.ln(), inv, -inv * inv)
    }
    #[inline]
    fn sqrt(self) -> Self {
        if self.v <= 0.0 {
            return self.chain(self.v.sqrt(), f64::NAN, f64::NAN);
        }
        let s = self.v.sqrt();
        self.chain(s, 0.5 / s, -0.25 / (s * self.v))
    }
    #[inline]
    fn ln_1p(self) -> Self {
        if self.v <= -1.0 {
            return self.chain(self.v.ln_1p(), f64::NAN, f64::NAN);
        }
        let inv = 1.0 / (1.0 + self.v);
        self.chain(self.v.ln_1p(), inv, -inv * inv)
    }
    #[inline]
    fn tanh(self) -> Self {
        let t = self.v.tanh();
        let d1 = 1.0 - t * t;
        self.chain(t, d1, -2.0 * t * d1)
    }
    #[inline]
    fn abs(self) -> Self {
        if self.v == 0.0 {
            return self.chain(0.0, f64::NAN, f64::NAN);
        }
        self.chain(self.v.abs(), self.v.signum(), 0.0)
    }
    #[inline]
    fn powi(self, n: i32) -> Self {
        let nf = n as f64;
        let d1 = if n == 0 { 0.0 } else { nf * self.v.powi(n - 1) };
        let d2 = if n == 0 || n == 1 {
            0.0
        } else {
            nf * (nf - 1.0) * self.v.powi(n - 2)
        };
        self.chain(self.v.powi(n), d1, d2)
    }
    #[inline]
    fn expit(self) -> Self {
        let p = Scalar::expit(self.v);
        let q = Scalar::expit(-self.v);
        self.chain(p, p * q, p * q * (q - p))
    }
}

/// Tangent directions evaluated per forward pass by [`gradient`].
pub const CHUNK: usize = 8;

/// Function that can be evaluated with any [`Scalar`] type.
pub trait Differentiable {
    fn eval<S: Scalar>(&self, x: &[S]) -> Result<S>;
}

/// Value and gradient of `f` at `x` using chunked forward passes.
///
/// Full chunks carry [`CHUNK`] tangents; the remainder is covered by
/// narrower passes so no pass carries unused tangent slots beyond a factor of two.
pub fn gradient<F: Differentiable + ?Sized>(f: &F, x: &[f64]) -> Result<(f64, Vec<f64>)> {
    let n = x.len();
    let mut grad = vec![0.0; n];
    if n == 0 {
        let v = f.eval::<f64>(&[])?;
        return Ok((v, grad));
    }
    let mut value = f64::NAN;
    let mut start = 0;
    while start < n {
        let rest = n - start;
        let width = if rest >= CHUNK {
            value = tangent_pass::<F, CHUNK>(f, x, start, &mut grad)?;
            CHUNK
        } else if rest > 2 {
            value = tangent_pass::<F, 4>(f, x, start, &mut grad)?;
            4
        } else if rest == 2 {
            value = tangent_pass::<F, 2>(f, x, start, &mut grad)?;
            2
        } else {
            value = tangent_pass::<F, 1>(f, x, start, &mut grad)?;
            1
        };
        start += width;
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonDifferentiable(format!(
            "derivative with respect to argument {i} is not finite"
        )));
    }
    Ok((value, grad))
}

fn tangent_pass<F: Differentiable + ?Sized, const N: usize>(
    f: &F,
    x: &[f64],
    start: usize,
    grad: &mut [f64],
) -> Result<f64> {
    let end = (start + N).min(x.len());
    let args: Vec<Dual<N>> = x
        .iter()
        .enumerate()
        .map(|(i, &xi)| {
            if i >= start && i < end {
                Dual::variable(xi, i - start)
            } else {
                Dual::constant(xi)
            }
        })
        .collect();
    let out = f.eval(&args)?;
    grad[start..end].copy_from_slice(&out.d[..end - start]);
    Ok(out.v)
}

/// Single mixed partial `∂²f/∂x_i∂x_j` from one hyper-dual pass.
pub fn mixed_partial<F: Differentiable + ?Sized>(f: &F, x: &[f64], i: usize, j: usize) -> Result<f64> {
    let args: Vec<HyperDual> = x
        .iter()
        .enumerate()
        .map(|(k, &xk)| HyperDual {
            v: xk,
            e1: if k == i { 1.0 } else { 0.0 },
            e2: if k == j { 1.0 } else { 0.0 },
            e12: 0.0,
        })
        .collect();
    let out = f.eval(&args)?;
    if !out.e12.is_finite() {
        return Err(Error::NonDifferentiable(format!(
            "second derivative with respect to arguments ({i}, {j}) is not finite"
        )));
    }
    Ok(out.e12)
}

/// Exact Hessian of `f` restricted to the coordinates in `which`.
///
/// Each unordered pair is evaluated once and mirrored, so the result is
/// symmetric by construction.
pub fn hessian_subset<F: Differentiable + ?Sized>(
    f: &F,
    x: &[f64],
    which: &[usize],
) -> Result<DMatrix<f64>> {
    let m = which.len();
    let mut h = DMatrix::zeros(m, m);
    for a in 0..m {
        for b in a..m {
            let v = mixed_partial(f, x, which[a], which[b])?;
            h[(a, b)] = v;
            h[(b, a)] = v;
        }
    }
    Ok(h)
}

/// Exact Hessian of `f` at `x`.
pub fn hessian<F: Differentiable + ?Sized>(f: &F, x: &[f64]) -> Result<DMatrix<f64>> {
    let which: Vec<usize> = (0..x.len()).collect();
    hessian_subset(f, x, &which)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    struct Poly;
    impl Differentiable for Poly {
        fn eval<S: Scalar>(&self, x: &[S]) -> Result<S> {
            Ok(x[0] * x[0] * x[1] + x[1].exp() * x[0] - (x[0] * x[1]).sqrt())
        }
    }

    struct Kitchen;
    impl Differentiable for Kitchen {
        fn eval<S: Scalar>(&self, x: &[S]) -> Result<S> {
            let a = x[0].expit() * x[1].ln() + (x[2] / x[1]).ln_1p();
            let b = x[2].abs() * x[0].tanh() - x[1].powi(3) / (x[0] * x[0] + 1.0);
            Ok(a * b + x[0].softplus() - x[2].sqrt())
        }
    }

    fn central_gradient(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut xp = x.to_vec();
                let mut xm = x.to_vec();
                xp[i] += h;
                xm[i] -= h;
                (f(&xp) - f(&xm)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn polynomial_derivatives_are_exact() {
        let x = [1.3, 0.7];
        let (v, g) = gradient(&Poly, &x).unwrap();
        let (a, b) = (x[0], x[1]);
        assert_relative_eq!(v, a * a * b + b.exp() * a - (a * b).sqrt(), max_relative = 1e-15);
        let s = (a * b).sqrt();
        assert_relative_eq!(g[0], 2.0 * a * b + b.exp() - 0.5 * b / s, max_relative = 1e-14);
        assert_relative_eq!(g[1], a * a + b.exp() * a - 0.5 * a / s, max_relative = 1e-14);
        let h = hessian(&Poly, &x).unwrap();
        let h01 = 2.0 * a + b.exp() - 0.5 / s + 0.25 * a * b / (s * a * b);
        assert_relative_eq!(h[(0, 1)], h01, max_relative = 1e-13);
        assert_relative_eq!(h[(1, 1)], b.exp() * a + 0.25 * a * a / (s * a * b), max_relative = 1e-13);
    }

    #[test]
    fn abs_at_zero_is_signalled() {
        struct AbsZero;
        impl Differentiable for AbsZero {
            fn eval<S: Scalar>(&self, x: &[S]) -> Result<S> {
                Ok(x[0].abs())
            }
        }
        assert!(matches!(gradient(&AbsZero, &[0.0]), Err(Error::NonDifferentiable(_))));
        assert!(gradient(&AbsZero, &[-2.0]).is_ok());
    }

    #[test]
    fn log_of_nonpositive_is_signalled() {
        struct LogF;
        impl Differentiable for LogF {
            fn eval<S: Scalar>(&self, x: &[S]) -> Result<S> {
                Ok(x[0].ln())
            }
        }
        assert!(matches!(gradient(&LogF, &[0.0]), Err(Error::NonDifferentiable(_))));
        assert!(matches!(gradient(&LogF, &[-1.0]), Err(Error::NonDifferentiable(_))));
        assert!(matches!(mixed_partial(&LogF, &[-1.0], 0, 0), Err(Error::NonDifferentiable(_))));
    }

    #[test]
    fn chunking_covers_many_arguments() {
        struct SumSq;
        impl Differentiable for SumSq {
            fn eval<S: Scalar>(&self, x: &[S]) -> Result<S> {
                let mut s = S::zero();
                for (i, &xi) in x.iter().enumerate() {
                    s += xi * xi * (i as f64 + 1.0);
                }
                Ok(s)
            }
        }
        let x: Vec<f64> = (0..19).map(|i| 0.1 * i as f64 - 0.4).collect();
        let (_, g) = gradient(&SumSq, &x).unwrap();
        for (i, gi) in g.iter().enumerate() {
            assert_relative_eq!(*gi, 2.0 * x[i] * (i as f64 + 1.0), epsilon = 1e-15);
        }
    }

    #[test]
    fn expit_is_stable_at_extremes() {
        for &x in &[-800.0, -710.0, 710.0, 800.0, 1e6, -1e6] {
            let p = Scalar::expit(x);
            assert!(p.is_finite());
            let d = Dual::<1>::variable(x, 0).expit();
            assert!(d.is_finite());
            let s = Scalar::softplus(x);
            assert!(s.is_finite());
        }
        assert_eq!(Scalar::expit(800.0_f64), 1.0);
        assert_eq!(Scalar::expit(-800.0_f64), 0.0);
    }

    proptest! {
        #[test]
        fn gradient_matches_central_differences(
            a in 0.2f64..2.0, b in 0.3f64..2.0, c in 0.2f64..3.0
        ) {
            let x = [a, b, c];
            let (_, g) = gradient(&Kitchen, &x).unwrap();
            let f = |z: &[f64]| Kitchen.eval::<f64>(z).unwrap();
            let fd = central_gradient(&f, &x, 1e-6);
            for i in 0..3 {
                prop_assert!((g[i] - fd[i]).abs() <= 1e-6 * (1.0 + fd[i].abs()));
            }
        }

        #[test]
        fn hessian_matches_differences_of_gradient(
            a in 0.2f64..2.0, b in 0.3f64..2.0, c in 0.2f64..3.0
        ) {
            let x = [a, b, c];
            let h = hessian(&Kitchen, &x).unwrap();
            for j in 0..3 {
                let mut xp = x;
                let mut xm = x;
                xp[j] += 1e-5;
                xm[j] -= 1e-5;
                let gp = gradient(&Kitchen, &xp).unwrap().1;
                let gm = gradient(&Kitchen, &xm).unwrap().1;
                for i in 0..3 {
                    let fd = (gp[i] - gm[i]) / 2e-5;
                    prop_assert!((h[(i, j)] - fd).abs() <= 1e-5 * (1.0 + fd.abs()));
                }
            }
        }

        #[test]
        fn mixed_partials_are_symmetric(
            a in 0.2f64..2.0, b in 0.3f64..2.0, c in 0.2f64..3.0
        ) {
            let x = [a, b, c];
            for i in 0..3 {
                for j in 0..3 {
                    let hij = mixed_partial(&Kitchen, &x, i, j).unwrap();
                    let hji = mixed_partial(&Kitchen, &x, j, i).unwrap();
                    prop_assert!((hij - hji).abs() <= 1e-12 * (1.0 + hij.abs()));
                }
            }
        }
    }
}
