//! The one-site potential b e^{-δ q²/2}, its rescaled form, the Gaussian
//! integral representation, derivative recursion and bounds, and the
//! doubled auxiliary potential.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::quadrature::gauss_hermite_normal;

/// Largest derivative order the recursion accepts.
pub const MAX_DERIVATIVE_ORDER: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PotentialParams {
    pub b_m: f64,
    pub delta_m: f64,
    pub d: usize,
}

impl PotentialParams {
    pub fn new(b_m: f64, delta_m: f64, d: usize) -> Result<Self> {
        if !(b_m >= 0.0 && b_m.is_finite()) {
            return Err(invalid("b_m", "must be finite and nonnegative"));
        }
        if !(delta_m >= 0.0 && delta_m.is_finite()) {
            return Err(invalid("delta_m", "must be finite and nonnegative"));
        }
        if d == 0 {
            return Err(invalid("d", "must be positive"));
        }
        Ok(PotentialParams { b_m, delta_m, d })
    }

    /// V̂(x) = b_m e^{-δ_m |x|²/2}.
    pub fn value(&self, x: &[f64]) -> f64 {
        rescaled_potential(x, self.b_m, self.delta_m)
    }

    /// V̂ and its gradient with respect to x.
    pub fn value_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let v = self.value(x);
        for (g, xi) in grad.iter_mut().zip(x) {
            *g = -self.delta_m * xi * v;
        }
        v
    }

    pub fn auxiliary(&self, x: &[f64], y: &[f64]) -> f64 {
        auxiliary_potential(x, y, self.b_m, self.delta_m)
    }
}

fn norm2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// V(q) = b e^{-δ |q|²/2}.
pub fn potential(q: &[f64], b: f64, delta: f64) -> f64 {
    b * (-0.5 * delta * norm2(q)).exp()
}

/// V̂(x) = b_m e^{-δ_m |x|²/2}.
pub fn rescaled_potential(x: &[f64], b_m: f64, delta_m: f64) -> f64 {
    b_m * (-0.5 * delta_m * norm2(x)).exp()
}

/// b_m [e^{-δ_m |x+y|²/4} + e^{-δ_m |x-y|²/4}].
pub fn auxiliary_potential(x: &[f64], y: &[f64], b_m: f64, delta_m: f64) -> f64 {
    let plus: f64 = x.iter().zip(y).map(|(a, b)| (a + b).powi(2)).sum();
    let minus: f64 = x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum();
    b_m * ((-0.25 * delta_m * plus).exp() + (-0.25 * delta_m * minus).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RepresentationCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub abs_diff: f64,
}

/// Compares b ∫ dμ(α) e^{i√δ α·q} (Gauss-Hermite, `nodes` per axis) with
/// b e^{-δ|q|²/2}.
pub fn gaussian_representation_check(q: &[f64], b: f64, delta: f64, nodes: usize) -> Result<RepresentationCheck> {
    if q.is_empty() || q.len() > 3 {
        return Err(invalid("q", "quadrature supports 1 to 3 components"));
    }
    if nodes == 0 {
        return Err(invalid("nodes", "must be positive"));
    }
    let (xs, ws) = gauss_hermite_normal(nodes);
    // The integrand factorizes over components; the imaginary part vanishes by symmetry.
    let lhs = b * q
        .iter()
        .map(|&qi| {
            xs.iter()
                .zip(&ws)
                .map(|(a, w)| w * (delta.sqrt() * a * qi).cos())
                .sum::<f64>()
        })
        .product::<f64>();
    let rhs = potential(q, b, delta);
    Ok(RepresentationCheck { lhs, rhs, abs_diff: (lhs - rhs).abs() })
}

/// n-th derivative of the scalar prototype X(x) = -b_m e^{-δ_m x²/2}.
pub fn nth_derivative(x: f64, n: usize, b_m: f64, delta_m: f64) -> Result<f64> {
    Ok(derivatives(x, n, b_m, delta_m)?[n])
}

/// X, X', ..., X^{(n)} at x via the three-term recursion.
pub fn derivatives(x: f64, n: usize, b_m: f64, delta_m: f64) -> Result<Vec<f64>> {
    if n > MAX_DERIVATIVE_ORDER {
        return Err(Error::TooLarge { what: "derivative order", value: n, max: MAX_DERIVATIVE_ORDER });
    }
    let g = (-0.25 * delta_m * x * x).exp();
    let mut i_prev = -b_m * g;
    let mut out = Vec::with_capacity(n + 1);
    out.push(g * i_prev);
    if n == 0 {
        return Ok(out);
    }
    let mut i_cur = b_m * delta_m * x * g;
    out.push(g * i_cur);
    for k in 2..=n {
        let next = -delta_m * x * i_cur - (k - 1) as f64 * delta_m * i_prev;
        i_prev = i_cur;
        i_cur = next;
        out.push(g * i_cur);
    }
    Ok(out)
}

/// Derivatives of e^{f} from the derivatives of f:
/// E^{(j)} = Σ_{i<j} C(j-1, i) f^{(i+1)} E^{(j-1-i)}.
pub fn exp_derivatives(f: &[f64]) -> Vec<f64> {
    let n = f.len().saturating_sub(1);
    let mut e = Vec::with_capacity(n + 1);
    if f.is_empty() {
        return e;
    }
    e.push(f[0].exp());
    for j in 1..=n {
        let mut acc = 0.0;
        let mut binom = 1.0;
        for i in 0..j {
            acc += binom * f[i + 1] * e[j - 1 - i];
            binom = binom * (j - 1 - i) as f64 / (i + 1) as f64;
        }
        e.push(acc);
    }
    e
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum BoundKind {
    /// |X^{(n)}| ≤ b_m 2^n δ^{n/2} √(n!) e^{-δx²/4}
    Derivative,
    /// |dⁿ e^X| ≤ 2^n b_m δ^{n/2} n! e^{-δx²/4}, n ≥ 1
    Exponential,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundViolation {
    pub kind: BoundKind,
    pub n: usize,
    pub x: f64,
    pub lhs: f64,
    pub rhs: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundRow {
    pub n: usize,
    /// Largest lhs/rhs over the grid for each bound; NaN when not checked.
    pub derivative_ratio: f64,
    pub exponential_ratio: f64,
}

/// Checks both derivative bounds for orders 0..=n_max on `grid`. The
/// exponential bound is checked for n ≥ 1 only, and only when b_m < 1.
/// Returns the per-order worst ratios, or the first violation.
pub fn derivative_bound_check(
    n_max: usize,
    grid: &[f64],
    b_m: f64,
    delta_m: f64,
) -> Result<std::result::Result<Vec<BoundRow>, BoundViolation>> {
    let check_exp = b_m < 1.0;
    let mut rows: Vec<BoundRow> = (0..=n_max)
        .map(|n| BoundRow {
            n,
            derivative_ratio: 0.0,
            exponential_ratio: if check_exp && n >= 1 { 0.0 } else { f64::NAN },
        })
        .collect();
    for &x in grid {
        let xs = derivatives(x, n_max, b_m, delta_m)?;
        let es = exp_derivatives(&xs);
        let env = (-0.25 * delta_m * x * x).exp();
        for n in 0..=n_max {
            let scale = 2f64.powi(n as i32) * b_m * delta_m.powf(n as f64 / 2.0) * env;
            let rhs = scale * factorial(n).sqrt();
            if xs[n].abs() > rhs * (1.0 + 1e-12) {
                return Ok(Err(BoundViolation { kind: BoundKind::Derivative, n, x, lhs: xs[n].abs(), rhs }));
            }
            if rhs > 0.0 {
                rows[n].derivative_ratio = rows[n].derivative_ratio.max(xs[n].abs() / rhs);
            }
            if check_exp && n >= 1 {
                let rhs = scale * factorial(n);
                if es[n].abs() > rhs * (1.0 + 1e-12) {
                    return Ok(Err(BoundViolation { kind: BoundKind::Exponential, n, x, lhs: es[n].abs(), rhs }));
                }
                if rhs > 0.0 {
                    rows[n].exponential_ratio = rows[n].exponential_ratio.max(es[n].abs() / rhs);
                }
            }
        }
    }
    Ok(Ok(rows))
}

/// Coefficients of the probabilists' Hermite polynomial He_n, lowest first.
pub fn hermite_he_coefficients(n: usize) -> Vec<i64> {
    let mut prev = vec![1i64];
    if n == 0 {
        return prev;
    }
    let mut cur = vec![0i64, 1];
    for k in 1..n {
        // He_{k+1} = x He_k - k He_{k-1}
        let mut next = vec![0i64; k + 2];
        for (i, c) in cur.iter().enumerate() {
            next[i + 1] += c;
        }
        for (i, c) in prev.iter().enumerate() {
            next[i] -= k as i64 * c;
        }
        prev = cur;
        cur = next;
    }
    cur
}

/// X^{(n)}(x) through -b_m (-√δ_m)^n He_n(√δ_m x) e^{-δ_m x²/2}.
pub fn nth_derivative_hermite(x: f64, n: usize, b_m: f64, delta_m: f64) -> f64 {
    let s = delta_m.sqrt();
    let u = s * x;
    let he = hermite_he_coefficients(n).iter().rev().fold(0.0, |acc, &c| acc * u + c as f64);
    -b_m * (-s).powi(n as i32) * he * (-0.5 * delta_m * x * x).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn potential_basics() {
        assert_eq!(potential(&[0.0, 0.0], 0.7, 3.0), 0.7);
        assert!(potential(&[0.5], 1.0, 1e6) < 1e-100);
        // m^{1/2} V(αx) = V̂(x) with α = m^{-1/4}
        let (m, b, delta) = (0.04f64, 0.5, 1.2);
        let alpha = m.powf(-0.25);
        let x = [0.3, -0.8];
        let q: Vec<f64> = x.iter().map(|v| alpha * v).collect();
        let lhs = m.sqrt() * potential(&q, b, delta);
        assert_relative_eq!(lhs, rescaled_potential(&x, b * m.sqrt(), delta / m.sqrt()), epsilon = 1e-15);
    }

    #[test]
    fn gaussian_representation() {
        let r = gaussian_representation_check(&[0.0], 0.9, 1.0, 64).unwrap();
        assert_relative_eq!(r.lhs, 0.9, epsilon = 1e-12);
        let r = gaussian_representation_check(&[1.0], 1.0, 1.0, 64).unwrap();
        assert!(r.abs_diff < 1e-8 && (r.lhs - 0.60653).abs() < 1e-5);
        let r = gaussian_representation_check(&[1.0, 1.0], 1.0, 2.0, 64).unwrap();
        assert!(r.abs_diff < 1e-8);
        assert_relative_eq!(r.rhs, (-2.0f64).exp());
        let r = gaussian_representation_check(&[0.4, -0.2, 1.1], 0.3, 0.8, 64).unwrap();
        assert!(r.abs_diff < 1e-8);
        assert!(gaussian_representation_check(&[0.0; 4], 1.0, 1.0, 64).is_err());
    }

    #[test]
    fn low_order_derivatives() {
        let (b, dl) = (0.6, 1.7);
        let x = 0.8f64;
        let e = (-0.5 * dl * x * x).exp();
        assert_relative_eq!(nth_derivative(x, 0, b, dl).unwrap(), -b * e, epsilon = 1e-15);
        assert_relative_eq!(nth_derivative(x, 1, b, dl).unwrap(), b * dl * x * e, epsilon = 1e-15);
        assert_relative_eq!(nth_derivative(0.0, 2, b, dl).unwrap(), b * dl, epsilon = 1e-15);
        assert!(nth_derivative(0.0, 31, b, dl).is_err());
        assert!(nth_derivative(0.0, 30, b, dl).is_ok());
    }

    #[test]
    fn recursion_matches_finite_differences() {
        let (b, dl) = (0.5, 2.0);
        let f = |x: f64, k: usize| nth_derivative(x, k, b, dl).unwrap();
        let h = 1e-4;
        let mut x = -3.0;
        while x <= 3.0 {
            for n in 1..=5 {
                let fd = (f(x + h, n - 1) - f(x - h, n - 1)) / (2.0 * h);
                let exact = f(x, n);
                let scale = exact.abs().max(1e-3 * b * dl.powf(n as f64 / 2.0));
                assert!((fd - exact).abs() / scale < 1e-5, "n={n} x={x} {fd} {exact}");
            }
            x += 0.05;
        }
    }

    #[test]
    fn hermite_coefficients_exact() {
        assert_eq!(hermite_he_coefficients(2), vec![-1, 0, 1]);
        assert_eq!(hermite_he_coefficients(4), vec![3, 0, -6, 0, 1]);
        assert_eq!(hermite_he_coefficients(5), vec![0, 15, 0, -10, 0, 1]);
    }

    #[test]
    fn hermite_matches_recursion() {
        for n in 0..=10 {
            for &x in &[-2.5, -0.3, 0.0, 0.7, 1.9] {
                let r = nth_derivative(x, n, 0.4, 1.3).unwrap();
                let h = nth_derivative_hermite(x, n, 0.4, 1.3);
                assert!((r - h).abs() <= 1e-10 * (1.0 + h.abs()), "n={n} x={x}");
            }
        }
    }

    #[test]
    fn exp_derivatives_match_closed_form() {
        // e^{sin x}: second derivative is (cos² x - sin x) e^{sin x}
        let x = 0.4f64;
        let f = [x.sin(), x.cos(), -x.sin()];
        let e = exp_derivatives(&f);
        assert_relative_eq!(e[1], x.cos() * x.sin().exp(), epsilon = 1e-15);
        assert_relative_eq!(e[2], (x.cos().powi(2) - x.sin()) * x.sin().exp(), epsilon = 1e-15);
    }

    #[test]
    fn bounds_on_reference_grid() {
        let grid: Vec<f64> = (0..=1000).map(|i| -5.0 + 0.01 * i as f64).collect();
        let rows = derivative_bound_check(10, &grid, 0.5, 2.0).unwrap().unwrap();
        assert_eq!(rows.len(), 11);
        assert!(rows[0].exponential_ratio.is_nan());
        assert!(rows.iter().all(|r| r.derivative_ratio <= 1.0));
        // X'(0) = 0 so the first-order ratio at 0 alone is 0
        let at0 = derivative_bound_check(1, &[0.0], 0.5, 2.0).unwrap().unwrap();
        assert_eq!(at0[1].derivative_ratio, 0.0);
    }

    #[test]
    fn auxiliary() {
        let v = auxiliary_potential(&[1.0], &[0.0], 0.8, 1.4);
        assert_relative_eq!(v, 2.0 * 0.8 * (-0.25f64 * 1.4).exp(), epsilon = 1e-15);
        assert_relative_eq!(auxiliary_potential(&[1.0], &[1.0], 1.0, 1.0), (-1.0f64).exp() + 1.0, epsilon = 1e-15);
        assert_eq!(
            auxiliary_potential(&[0.3, 1.0], &[0.2, -0.5], 0.5, 1.0),
            auxiliary_potential(&[0.3, 1.0], &[-0.2, 0.5], 0.5, 1.0)
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(20))]
        #[test]
        fn bounds_hold_below_unit_coupling(b in 0.01f64..0.99, dl in 0.05f64..5.0) {
            let grid: Vec<f64> = (0..=240).map(|i| -6.0 + 0.05 * i as f64).collect();
            let res = derivative_bound_check(12, &grid, b, dl).unwrap();
            prop_assert!(res.is_ok(), "{:?}", res.err());
        }
    }
}
