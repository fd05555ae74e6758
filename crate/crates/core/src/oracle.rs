//! Exact diagonalization of the rescaled one- and two-site Hamiltonians
//! (d = 1) for thermal traces and imaginary-time correlations.
//!
//! One site: three-point finite differences on [-X, X] with G interior
//! points. Two sites: the single-site operator with the full diagonal
//! harmonic constant is diagonalized in an oscillator basis, and the coupled
//! problem is solved in the product basis of its lowest K eigenstates.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleSpec {
    pub sites: usize,
    pub a: f64,
    /// Nearest-neighbour coupling; with two periodic sites the bond is doubled.
    pub j: f64,
    pub b_m: f64,
    pub delta_m: f64,
    pub extent: f64,
    pub grid: usize,
    /// Two sites: single-site states kept per site.
    pub basis: usize,
    /// Two sites: oscillator functions used for the single-site problem.
    pub oscillator: usize,
}

impl OracleSpec {
    pub fn single(a: f64, b_m: f64, delta_m: f64) -> Self {
        OracleSpec { sites: 1, a, j: 0.0, b_m, delta_m, extent: 8.0, grid: 512, basis: 0, oscillator: 0 }
    }

    pub fn pair(a: f64, j: f64, b_m: f64, delta_m: f64) -> Self {
        OracleSpec { sites: 2, a, j, b_m, delta_m, extent: 8.0, grid: 512, basis: 20, oscillator: 60 }
    }

    /// (1.25 X, 2 G) and, for two sites, a larger product basis.
    pub fn refined(&self) -> Self {
        OracleSpec {
            extent: 1.25 * self.extent,
            grid: 2 * self.grid,
            basis: self.basis + self.basis / 2,
            oscillator: self.oscillator + self.oscillator / 2,
            ..*self
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.sites == 1 || self.sites == 2) {
            return Err(invalid("sites", "the oracle handles 1 or 2 sites"));
        }
        if !(self.a > 0.0) || !(self.j >= 0.0) || !(self.b_m >= 0.0) || !(self.delta_m >= 0.0) {
            return Err(invalid("oracle", "need a > 0 and nonnegative J, b_m, delta_m"));
        }
        if !(self.extent > 0.0) || self.grid < 16 {
            return Err(invalid("grid", "need a positive extent and at least 16 points"));
        }
        if self.sites == 2 && !(2 <= self.basis && self.basis <= self.oscillator) {
            return Err(invalid("basis", "two sites need 2 <= K <= oscillator states"));
        }
        Ok(())
    }
}

/// Spectrum and position operators in the energy eigenbasis.
#[derive(Debug, Clone)]
pub struct GridHamiltonian {
    pub spec: OracleSpec,
    /// Eigenvalues with the harmonic zero-point energy subtracted, ascending.
    pub energies: Vec<f64>,
    /// <i| x_site |j> for each site.
    pub x: Vec<DMatrix<f64>>,
}

fn single_site(a_eff: f64, b_m: f64, delta_m: f64, extent: f64, grid: usize) -> (Vec<f64>, DMatrix<f64>) {
    let h = 2.0 * extent / (grid + 1) as f64;
    let xs: Vec<f64> = (1..=grid).map(|i| -extent + i as f64 * h).collect();
    let kin = 0.5 / (h * h);
    let mut m = DMatrix::<f64>::zeros(grid, grid);
    for (i, &x) in xs.iter().enumerate() {
        m[(i, i)] = 2.0 * kin + 0.5 * a_eff * x * x + b_m * (-0.5 * delta_m * x * x).exp();
        if i + 1 < grid {
            m[(i, i + 1)] = -kin;
            m[(i + 1, i)] = -kin;
        }
    }
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..grid).collect();
    order.sort_by(|&p, &q| eig.eigenvalues[p].total_cmp(&eig.eigenvalues[q]));
    let energies: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let vecs = DMatrix::from_fn(grid, grid, |r, c| eig.eigenvectors[(r, order[c])]);
    // position operator in the eigenbasis: V^T diag(x) V
    let xv = DMatrix::from_fn(grid, grid, |r, c| xs[r] * vecs[(r, c)]);
    (energies, vecs.transpose() * xv)
}

/// Lowest eigenpairs of -½∂² + ½ω²x² + b e^{-δx²/2} from `n` oscillator
/// functions of frequency ω; returns energies and <i|x|j>.
fn oscillator_site(omega: f64, b_m: f64, delta_m: f64, n: usize) -> (Vec<f64>, DMatrix<f64>) {
    // Gaussian matrix elements by the trapezoid rule, which is spectrally
    // accurate for these smooth, rapidly decaying integrands.
    let reach = ((2 * n + 1) as f64).sqrt() + 8.0;
    let points = 40 * n + 400;
    let dy = 2.0 * reach / points as f64;
    let mut gauss = DMatrix::<f64>::zeros(n, n);
    let mut psi = vec![0.0; n];
    for k in 0..=points {
        let y = -reach + k as f64 * dy;
        psi[0] = std::f64::consts::PI.powf(-0.25) * (-0.5 * y * y).exp();
        if n > 1 {
            psi[1] = 2f64.sqrt() * y * psi[0];
        }
        for m in 1..n - 1 {
            psi[m + 1] = (2.0 / (m + 1) as f64).sqrt() * y * psi[m] - (m as f64 / (m + 1) as f64).sqrt() * psi[m - 1];
        }
        let g = (-0.5 * delta_m * y * y / omega).exp() * dy;
        for p in 0..n {
            for q in 0..=p {
                gauss[(p, q)] += psi[p] * psi[q] * g;
            }
        }
    }
    let mut m = DMatrix::<f64>::zeros(n, n);
    for p in 0..n {
        for q in 0..=p {
            m[(p, q)] = b_m * gauss[(p, q)];
            m[(q, p)] = m[(p, q)];
        }
        m[(p, p)] += omega * (p as f64 + 0.5);
    }
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&p, &q| eig.eigenvalues[p].total_cmp(&eig.eigenvalues[q]));
    let energies: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let vecs = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    let x_ho = DMatrix::from_fn(n, n, |p, q| {
        if p + 1 == q || q + 1 == p {
            (p.max(q) as f64 / (2.0 * omega)).sqrt()
        } else {
            0.0
        }
    });
    (energies, vecs.transpose() * x_ho * &vecs)
}

impl GridHamiltonian {
    pub fn build(spec: OracleSpec) -> Result<Self> {
        spec.validate()?;
        if spec.sites == 1 {
            let (e, x) = single_site(spec.a, spec.b_m, spec.delta_m, spec.extent, spec.grid);
            let zero_point = 0.5 * spec.a.sqrt();
            return Ok(GridHamiltonian { spec, energies: e.iter().map(|v| v - zero_point).collect(), x: vec![x] });
        }
        // two periodic sites: J (x1 - x2)^2 = J x1² + J x2² - 2 J x1 x2
        let k = spec.basis;
        let (e1, x1) = oscillator_site((spec.a + 2.0 * spec.j).sqrt(), spec.b_m, spec.delta_m, spec.oscillator);
        let xk = x1.view((0, 0), (k, k)).into_owned();
        let dim = k * k;
        let mut hm = DMatrix::<f64>::zeros(dim, dim);
        for i1 in 0..k {
            for i2 in 0..k {
                let row = i1 * k + i2;
                hm[(row, row)] += e1[i1] + e1[i2];
                for j1 in 0..k {
                    for j2 in 0..k {
                        hm[(row, j1 * k + j2)] -= 2.0 * spec.j * xk[(i1, j1)] * xk[(i2, j2)];
                    }
                }
            }
        }
        let eig = SymmetricEigen::new(hm);
        let mut order: Vec<usize> = (0..dim).collect();
        order.sort_by(|&p, &q| eig.eigenvalues[p].total_cmp(&eig.eigenvalues[q]));
        let zero_point = 0.5 * (spec.a.sqrt() + (spec.a + 4.0 * spec.j).sqrt());
        let energies: Vec<f64> = order.iter().map(|&c| eig.eigenvalues[c] - zero_point).collect();
        let vecs = DMatrix::from_fn(dim, dim, |r, c| eig.eigenvectors[(r, order[c])]);
        let id = DMatrix::<f64>::identity(k, k);
        let xa = xk.kronecker(&id);
        let xb = id.kronecker(&xk);
        let vt = vecs.transpose();
        Ok(GridHamiltonian { spec, energies, x: vec![&vt * xa * &vecs, &vt * xb * &vecs] })
    }

    /// log Σ e^{-β E_i}, dropping terms below 1e-16 of the largest.
    pub fn log_trace(&self, beta: f64) -> f64 {
        let e0 = self.energies[0];
        let s: f64 = self
            .energies
            .iter()
            .map(|e| beta * (e - e0))
            .take_while(|&u| u < 36.8)
            .map(|u| (-u).exp())
            .sum();
        s.ln() - beta * e0
    }

    /// Tr[x_a e^{-τH} x_b e^{-(β-τ)H}] / Tr e^{-βH}.
    pub fn correlation(&self, beta: f64, tau: f64, site_a: usize, site_b: usize) -> f64 {
        let e0 = self.energies[0];
        let n = self.energies.len();
        let (xa, xb) = (&self.x[site_a], &self.x[site_b]);
        let weights_z: Vec<f64> = self.energies.iter().map(|e| (-beta * (e - e0)).exp()).collect();
        let z: f64 = weights_z.iter().sum();
        let left: Vec<f64> = self.energies.iter().map(|e| (-tau * (e - e0)).exp()).collect();
        let right: Vec<f64> = self.energies.iter().map(|e| (-(beta - tau) * (e - e0)).exp()).collect();
        let mut acc = 0.0;
        for i in 0..n {
            if left[i] == 0.0 {
                continue;
            }
            for j in 0..n {
                let w = left[i] * right[j];
                if w != 0.0 {
                    acc += xa[(j, i)] * xb[(i, j)] * w;
                }
            }
        }
        acc / z
    }
}

/// Extrapolated value, the refined-grid value and the refinement shift.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleValue {
    pub value: f64,
    pub refined: f64,
    pub shift: f64,
}

const CONVERGENCE_TOL: f64 = 1e-4;

impl GridHamiltonian {
    fn spacing(&self) -> f64 {
        2.0 * self.spec.extent / (self.spec.grid + 1) as f64
    }
}

/// The stencil error is O(h²) once the box holds the tails, so the reported
/// single-site value is the h² extrapolation of the two resolutions. The
/// oscillator basis converges much faster and reports the refined value.
fn checked(coarse: (&GridHamiltonian, f64), fine: (&GridHamiltonian, f64), what: &str) -> Result<OracleValue> {
    let (v0, v1) = (coarse.1, fine.1);
    let shift = (v0 - v1).abs();
    if shift > CONVERGENCE_TOL {
        return Err(Error::OracleNotConverged(format!("{what} moved by {shift:.2e} under grid refinement")));
    }
    if coarse.0.spec.sites == 2 {
        return Ok(OracleValue { value: v1, refined: v1, shift });
    }
    let r = (coarse.0.spacing() / fine.0.spacing()).powi(2);
    Ok(OracleValue { value: (r * v1 - v0) / (r - 1.0), refined: v1, shift })
}

/// A Hamiltonian at the requested resolution together with its refinement.
#[derive(Debug, Clone)]
pub struct Oracle {
    pub coarse: GridHamiltonian,
    pub fine: GridHamiltonian,
}

impl Oracle {
    pub fn new(spec: OracleSpec) -> Result<Self> {
        Ok(Oracle { coarse: GridHamiltonian::build(spec)?, fine: GridHamiltonian::build(spec.refined())? })
    }

    /// log Z with the zero-point energy subtracted.
    pub fn log_trace(&self, beta: f64) -> Result<OracleValue> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::InfiniteBeta);
        }
        checked((&self.coarse, self.coarse.log_trace(beta)), (&self.fine, self.fine.log_trace(beta)), "log Z")
    }

    /// <x_a(0) x_b(τ)> for 0 <= τ <= β.
    pub fn correlation(&self, beta: f64, taus: &[f64], site_a: usize, site_b: usize) -> Result<Vec<OracleValue>> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::InfiniteBeta);
        }
        if site_a >= self.coarse.spec.sites || site_b >= self.coarse.spec.sites {
            return Err(invalid("site", "outside the oracle system"));
        }
        if taus.iter().any(|&t| !(0.0..=beta).contains(&t)) {
            return Err(invalid("tau", "must lie in [0, beta]"));
        }
        taus.iter()
            .map(|&t| {
                checked(
                    (&self.coarse, self.coarse.correlation(beta, t, site_a, site_b)),
                    (&self.fine, self.fine.correlation(beta, t, site_a, site_b)),
                    "correlation",
                )
            })
            .collect()
    }
}

pub fn thermal_trace(spec: OracleSpec, beta: f64) -> Result<OracleValue> {
    Oracle::new(spec)?.log_trace(beta)
}

pub fn thermal_correlation(spec: OracleSpec, beta: f64, taus: &[f64], site_a: usize, site_b: usize) -> Result<Vec<OracleValue>> {
    Oracle::new(spec)?.correlation(beta, taus, site_a, site_b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::{mode_propagator, CovarianceKernel};
    use crate::lattice::{Boundary, Lattice};
    use crate::params::Beta;

    #[test]
    fn harmonic_single_site() {
        let oracle = Oracle::new(OracleSpec::single(1.0, 0.0, 1.0)).unwrap();
        for beta in [1.0, 2.0, 5.0] {
            let z = oracle.log_trace(beta).unwrap();
            assert!((z.value + (1.0 - (-beta).exp()).ln()).abs() < 1e-4, "{z:?}");
        }
        let taus = [0.0, 0.5, 1.0, 1.5];
        let c = oracle.correlation(2.0, &taus, 0, 0).unwrap();
        for (t, v) in taus.iter().zip(&c) {
            assert!((v.value - mode_propagator(1.0, Beta::Finite(2.0), *t)).abs() < 1e-4);
        }
    }

    #[test]
    fn correlation_is_symmetric_in_time() {
        let h = GridHamiltonian::build(OracleSpec { grid: 128, ..OracleSpec::single(1.0, 0.5, 1.0) }).unwrap();
        for t in [0.1, 0.4, 0.8] {
            assert!((h.correlation(2.0, t, 0, 0) - h.correlation(2.0, 2.0 - t, 0, 0)).abs() < 1e-10);
        }
    }

    #[test]
    fn potential_effects_on_trace() {
        let base = GridHamiltonian::build(OracleSpec { grid: 256, ..OracleSpec::single(1.0, 0.0, 1.0) }).unwrap();
        let flat = GridHamiltonian::build(OracleSpec { grid: 256, ..OracleSpec::single(1.0, 0.7, 0.0) }).unwrap();
        // δ = 0: a constant shift b_m
        assert!((flat.log_trace(1.5) - base.log_trace(1.5) + 1.5 * 0.7).abs() < 1e-9);
        let mut last = base.log_trace(2.0);
        for b in [0.2, 0.5, 1.0] {
            let z = GridHamiltonian::build(OracleSpec { grid: 256, ..OracleSpec::single(1.0, b, 1.0) }).unwrap().log_trace(2.0);
            assert!(z < last);
            last = z;
        }
    }

    #[test]
    fn harmonic_pair_matches_kernel() {
        let (a, j, beta) = (1.0, 0.25, 2.0);
        let oracle = Oracle::new(OracleSpec::pair(a, j, 0.0, 1.0)).unwrap();
        let kern = CovarianceKernel::new(Lattice::chain(2, Boundary::Periodic).unwrap(), a, j, Beta::Finite(beta)).unwrap();
        let z = oracle.log_trace(beta).unwrap();
        assert!((z.value - kern.harmonic_log_partition(1).unwrap()).abs() < 1e-4, "{z:?}");
        let taus = [0.0, 0.7, 1.3];
        let c00 = oracle.correlation(beta, &taus, 0, 0).unwrap();
        let c01 = oracle.correlation(beta, &taus, 0, 1).unwrap();
        for (i, &t) in taus.iter().enumerate() {
            assert!((c00[i].value - kern.covariance_closed(0, 0, t)).abs() < 1e-4, "{:?}", c00[i]);
            assert!((c01[i].value - kern.covariance_closed(0, 1, t)).abs() < 1e-4, "{:?}", c01[i]);
        }
    }

    #[test]
    fn oscillator_basis_matches_grid() {
        let (e_grid, x_grid) = single_site(1.5, 0.4, 1.0, 8.0, 1024);
        let (e_ho, x_ho) = oscillator_site(1.5f64.sqrt(), 0.4, 1.0, 60);
        for k in 0..6 {
            // the grid error is O(h² E²)
            assert!((e_grid[k] - e_ho[k]).abs() < 1e-3, "{k}: {} {}", e_grid[k], e_ho[k]);
        }
        assert!((x_grid[(0, 1)].abs() - x_ho[(0, 1)].abs()).abs() < 1e-4);
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(GridHamiltonian::build(OracleSpec { sites: 3, ..OracleSpec::single(1.0, 0.0, 1.0) }).is_err());
        let spec = OracleSpec { grid: 64, ..OracleSpec::single(1.0, 0.0, 1.0) };
        assert!(thermal_trace(spec, f64::INFINITY).is_err());
        // a box far too small for β = 0.1 must be reported, not trusted
        let tight = OracleSpec { extent: 2.0, grid: 64, ..OracleSpec::single(1.0, 0.0, 1.0) };
        assert!(matches!(thermal_trace(tight, 0.1), Err(Error::OracleNotConverged(_))));
    }
}
