//! Gauss rules via the Golub-Welsch eigenvalue method.

use nalgebra::{DMatrix, SymmetricEigen};

fn golub_welsch(diag: &[f64], off: &[f64], mu0: f64) -> (Vec<f64>, Vec<f64>) {
    let n = diag.len();
    let mut jac = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        jac[(i, i)] = diag[i];
        if i + 1 < n {
            jac[(i, i + 1)] = off[i];
            jac[(i + 1, i)] = off[i];
        }
    }
    let eig = SymmetricEigen::new(jac);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| (eig.eigenvalues[i], mu0 * eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0));
    pairs.into_iter().unzip()
}

/// Gauss-Legendre nodes and weights on [0, 1].
pub fn gauss_legendre_unit(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let off: Vec<f64> = (1..n)
        .map(|k| {
            let k = k as f64;
            k / (4.0 * k * k - 1.0).sqrt()
        })
        .collect();
    let (x, w) = golub_welsch(&vec![0.0; n], &off, 2.0);
    (
        x.into_iter().map(|v| 0.5 * (v + 1.0)).collect(),
        w.into_iter().map(|v| 0.5 * v).collect(),
    )
}

/// Composite Gauss-Legendre on [lo, hi] with `panels` equal panels.
pub fn gauss_legendre_composite(lo: f64, hi: f64, order: usize, panels: usize) -> (Vec<f64>, Vec<f64>) {
    let (x, w) = gauss_legendre_unit(order);
    let h = (hi - lo) / panels as f64;
    let mut nodes = Vec::with_capacity(order * panels);
    let mut weights = Vec::with_capacity(order * panels);
    for p in 0..panels {
        let start = lo + p as f64 * h;
        for (xi, wi) in x.iter().zip(&w) {
            nodes.push(start + h * xi);
            weights.push(h * wi);
        }
    }
    (nodes, weights)
}

/// Gauss-Hermite rule for the standard normal measure (probabilists').
pub fn gauss_hermite_normal(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let off: Vec<f64> = (1..n).map(|k| (k as f64).sqrt()).collect();
    golub_welsch(&vec![0.0; n], &off, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre_unit(8);
        for p in 0..16 {
            let q: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(p)).sum();
            assert_relative_eq!(q, 1.0 / (p as f64 + 1.0), epsilon = 1e-13);
        }
    }

    #[test]
    fn hermite_moments() {
        let (x, w) = gauss_hermite_normal(20);
        let m = |p: i32| x.iter().zip(&w).map(|(x, w)| w * x.powi(p)).sum::<f64>();
        assert_relative_eq!(m(0), 1.0, epsilon = 1e-13);
        assert!(m(1).abs() < 1e-13);
        assert_relative_eq!(m(2), 1.0, epsilon = 1e-12);
        assert_relative_eq!(m(4), 3.0, epsilon = 1e-11);
        assert_relative_eq!(m(6), 15.0, epsilon = 1e-10);
    }
}
