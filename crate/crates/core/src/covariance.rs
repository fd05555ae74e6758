//! The reference Gaussian structure: the lattice Green function of
//! -d^2/dtau^2 + B^2 with periodic time, in Matsubara-series and summed
//! forms, its Dirichlet variant, interpolated covariances, their convex
//! block decomposition, C_G and the harmonic partition function.

use std::f64::consts::PI;

use num_complex::Complex64;
use rustfft::FftDirection;

use crate::error::{invalid, Error, Result};
use crate::fftn::fft_nd;
use crate::lattice::{Boundary, Lattice};
use crate::params::Beta;
use crate::quadrature::gauss_legendre_composite;

/// One spatial eigenmode of B^2 = a - J Laplacian on the box.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialMode {
    /// Plane-wave momentum (periodic) or sine labels m_mu in 1..=N_mu (Dirichlet).
    pub label: Vec<f64>,
    pub eps: f64,
}

/// Temporal factor of one mode: the Green function of -d^2/dtau^2 + eps on
/// the circle of length beta_hat, or on the line when beta_hat is infinite.
pub fn mode_propagator(eps: f64, beta_hat: Beta, tau: f64) -> f64 {
    let lam = eps.sqrt();
    match beta_hat {
        Beta::Infinite => (-tau.abs() * lam).exp() / (2.0 * lam),
        Beta::Finite(b) => {
            let t = tau.rem_euclid(b);
            // [e^{(b-t) lam} + e^{t lam}] / (2 lam (e^{b lam} - 1)), scaled by e^{-b lam}
            ((-t * lam).exp() + (-(b - t) * lam).exp()) / (2.0 * lam * -(-b * lam).exp_m1())
        }
    }
}

/// Partial Matsubara sum of the same temporal factor, |n| <= n_max.
pub fn mode_propagator_matsubara(eps: f64, beta_hat: f64, tau: f64, n_max: usize) -> f64 {
    let w = 2.0 * PI / beta_hat;
    let mut acc = 0.0;
    // largest terms last is irrelevant here; sum from the tail for accuracy
    for n in (1..=n_max).rev() {
        let nf = n as f64;
        acc += 2.0 * (w * nf * tau).cos() / ((w * nf).powi(2) + eps);
    }
    (acc + 1.0 / eps) / beta_hat
}

#[derive(Debug, Clone)]
pub struct CovarianceKernel {
    lattice: Lattice,
    pub a: f64,
    pub j: f64,
    pub beta_hat: Beta,
    modes: Vec<SpatialMode>,
}

impl CovarianceKernel {
    pub fn new(lattice: Lattice, a: f64, j: f64, beta_hat: Beta) -> Result<Self> {
        if !(a > 0.0) {
            return Err(invalid("a", "must be positive"));
        }
        if !(j >= 0.0) {
            return Err(invalid("J", "must be nonnegative"));
        }
        if let Beta::Finite(b) = beta_hat {
            if !(b > 0.0 && b.is_finite()) {
                return Err(invalid("beta_hat", "must be positive"));
            }
        }
        let modes = match lattice.boundary() {
            Boundary::Periodic => lattice
                .dual_modes(a, j)?
                .into_iter()
                .map(|m| SpatialMode { label: m.k, eps: m.eps })
                .collect(),
            Boundary::Dirichlet => dirichlet_modes(&lattice, a, j),
        };
        Ok(CovarianceKernel { lattice, a, j, beta_hat, modes })
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn modes(&self) -> &[SpatialMode] {
        &self.modes
    }

    pub fn boundary(&self) -> Boundary {
        self.lattice.boundary()
    }

    pub fn beta_finite(&self) -> Result<f64> {
        self.beta_hat.finite().ok_or(Error::InfiniteBeta)
    }

    /// Spatial eigenvector product psi_mode(j) psi_mode(k), summed against
    /// the temporal factor to build G.
    fn mode_weight(&self, mode: &SpatialMode, j: usize, k: usize) -> f64 {
        let (cj, ck) = (self.lattice.coords(j), self.lattice.coords(k));
        match self.lattice.boundary() {
            Boundary::Periodic => {
                let phase: f64 = mode
                    .label
                    .iter()
                    .zip(cj.iter().zip(&ck))
                    .map(|(&km, (&x, &y))| km * (x as f64 - y as f64))
                    .sum();
                phase.cos() / self.lattice.n_sites() as f64
            }
            Boundary::Dirichlet => {
                let dims = self.lattice.dims();
                let mut w = 1.0;
                for axis in 0..dims.len() {
                    let np1 = (dims[axis] + 1) as f64;
                    let m = mode.label[axis];
                    w *= 2.0 / np1
                        * (PI * m * (cj[axis] + 1) as f64 / np1).sin()
                        * (PI * m * (ck[axis] + 1) as f64 / np1).sin();
                }
                w
            }
        }
    }

    /// G(j, k; tau) by summing the series over Matsubara frequencies |n| <= n_max.
    pub fn covariance_matsubara(&self, j: usize, k: usize, tau: f64, n_max: usize) -> Result<f64> {
        let b = self.beta_finite()?;
        if n_max < 1 {
            return Err(invalid("n_max", "must be at least 1"));
        }
        Ok(self
            .modes
            .iter()
            .map(|m| self.mode_weight(m, j, k) * mode_propagator_matsubara(m.eps, b, tau, n_max))
            .sum())
    }

    /// G(j, k; tau) in closed form; tau is reduced by periodicity.
    pub fn covariance_closed(&self, j: usize, k: usize, tau: f64) -> f64 {
        self.modes
            .iter()
            .map(|m| self.mode_weight(m, j, k) * mode_propagator(m.eps, self.beta_hat, tau))
            .sum()
    }

    /// G(0, j; tau) for every site j at once, via an inverse FFT over the
    /// dual lattice. Periodic boxes only.
    pub fn covariance_row_fft(&self, tau: f64) -> Result<Vec<f64>> {
        if self.boundary() != Boundary::Periodic {
            return Err(Error::RequiresPeriodic);
        }
        let n = self.lattice.n_sites();
        // The dual-mode list is ordered like the sites, i.e. FFT index order.
        let mut buf: Vec<Complex64> = self
            .modes
            .iter()
            .map(|m| Complex64::new(mode_propagator(m.eps, self.beta_hat, tau), 0.0))
            .collect();
        fft_nd(&mut buf, self.lattice.dims(), FftDirection::Inverse);
        Ok(buf.into_iter().map(|c| c.re / n as f64).collect())
    }

    /// D(j) = int_0^beta G(0, j; tau) dtau evaluated in closed form per mode.
    pub fn integrated_covariance(&self, j: usize) -> f64 {
        self.modes.iter().map(|m| self.mode_weight(m, 0, j) / m.eps).sum()
    }

    /// C_G = sum_j int_0^beta G(0, j; tau) dtau, by composite Gauss-Legendre
    /// quadrature in tau and a plain sum over the box.
    pub fn integrated_covariance_cg(&self) -> Result<f64> {
        if self.boundary() != Boundary::Periodic {
            return Err(Error::RequiresPeriodic);
        }
        let b = self.beta_finite()?;
        let (nodes, weights) = gauss_legendre_composite(0.0, b, 16, 16);
        let mut total = 0.0;
        for (t, w) in nodes.iter().zip(&weights) {
            let row = self.covariance_row_fft(*t)?;
            total += w * row.iter().sum::<f64>();
        }
        Ok(total)
    }

    /// log Z^0 = -d sum_modes log(1 - e^{-beta lam}); ground energy subtracted.
    pub fn harmonic_log_partition(&self, d: usize) -> Result<f64> {
        let b = self.beta_finite()?;
        Ok(-(d as f64)
            * self
                .modes
                .iter()
                .map(|m| (-(-b * m.eps.sqrt()).exp()).ln_1p())
                .sum::<f64>())
    }
}

/// |j| -> int_0^beta G(0, j; tau) dtau along the first axis, j = 0..max_dist.
pub fn decay_profile(kern: &CovarianceKernel, max_dist: usize) -> Vec<f64> {
    let dims = kern.lattice().dims();
    let stride: usize = dims[1..].iter().product();
    (0..=max_dist.min(dims[0] / 2)).map(|j| kern.integrated_covariance(j * stride)).collect()
}

fn dirichlet_modes(lattice: &Lattice, a: f64, j: f64) -> Vec<SpatialMode> {
    let dims = lattice.dims();
    let n_sites = lattice.n_sites();
    (0..n_sites)
        .map(|idx| {
            let c = lattice.coords(idx);
            let label: Vec<f64> = c.iter().map(|&x| (x + 1) as f64).collect();
            let eps = a + 4.0
                * j
                * label
                    .iter()
                    .zip(dims)
                    .map(|(&m, &n)| (PI * m / (2.0 * (n + 1) as f64)).sin().powi(2))
                    .sum::<f64>();
            SpatialMode { label, eps }
        })
        .collect()
}

/// Interpolation weights p(l, m) between the members of a sequence
/// Y_0, ..., Y_{n-1} and the complement Y_n (0-based). Bond k joins Y_k and
/// Y_{k+1} and carries s_k.
#[derive(Debug, Clone, PartialEq)]
pub struct Interpolation {
    pub s: Vec<f64>,
}

impl Interpolation {
    pub fn new(s: Vec<f64>) -> Result<Self> {
        if s.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
            return Err(invalid("s", "interpolation parameters must lie in [0, 1]"));
        }
        Ok(Interpolation { s })
    }

    /// Number of blocks including the complement.
    pub fn n_blocks(&self) -> usize {
        self.s.len() + 1
    }

    /// 1 inside one block, s_l s_{l+1} ... s_{m-1} between blocks l < m.
    pub fn p(&self, l: usize, m: usize) -> f64 {
        let (lo, hi) = if l <= m { (l, m) } else { (m, l) };
        self.s[lo..hi].iter().product()
    }

    /// Convex decomposition sum_i lambda_i * (block-diagonal kernel_i).
    ///
    /// Each term is an interval partition of the block indices 0..=n, given
    /// as the list of half-open index ranges, with weight prod s_k over open
    /// bonds and prod (1 - s_k) over cut bonds.
    pub fn convex_decomposition(&self) -> Result<Vec<(f64, Vec<std::ops::Range<usize>>)>> {
        const MAX_BONDS: usize = 12;
        let n = self.s.len();
        if n > MAX_BONDS {
            return Err(Error::TooLarge { what: "number of interpolation parameters", value: n, max: MAX_BONDS });
        }
        let mut out = Vec::new();
        for open_mask in 0u32..(1 << n) {
            let mut weight = 1.0;
            let mut blocks = Vec::new();
            let mut start = 0;
            for k in 0..n {
                if open_mask & (1 << k) != 0 {
                    weight *= self.s[k];
                } else {
                    weight *= 1.0 - self.s[k];
                    blocks.push(start..k + 1);
                    start = k + 1;
                }
            }
            blocks.push(start..n + 1);
            if weight > 0.0 {
                out.push((weight, blocks));
            }
        }
        Ok(out)
    }
}

/// G0 weakened between rod groups: G(t, t') p(block(t), block(t')).
#[derive(Debug, Clone)]
pub struct InterpolatedCovariance<'k> {
    pub base: &'k CovarianceKernel,
    pub interpolation: Interpolation,
}

impl InterpolatedCovariance<'_> {
    /// Covariance between (site, tau) in block `bl` and (site', tau') in block `bm`.
    pub fn value(&self, j: usize, tau: f64, bl: usize, k: usize, tau2: f64, bm: usize) -> f64 {
        self.base.covariance_closed(j, k, tau - tau2) * self.interpolation.p(bl, bm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::Boundary;
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, SymmetricEigen};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn chain(n: usize, a: f64, j: f64, beta: f64) -> CovarianceKernel {
        CovarianceKernel::new(Lattice::chain(n, Boundary::Periodic).unwrap(), a, j, Beta::Finite(beta)).unwrap()
    }

    #[test]
    fn zero_temperature_single_site() {
        let k = CovarianceKernel::new(Lattice::chain(2, Boundary::Periodic).unwrap(), 1.0, 0.0, Beta::Infinite).unwrap();
        // J = 0 decouples the two sites
        assert_relative_eq!(k.covariance_closed(0, 0, 0.0), 0.5, epsilon = 1e-15);
        assert!(k.covariance_matsubara(0, 0, 0.0, 10).is_err());
    }

    #[test]
    fn matsubara_matches_closed_single_site() {
        let k = chain(2, 1.0, 0.0, 2.0);
        let closed = k.covariance_closed(0, 0, 0.0);
        let series = k.covariance_matsubara(0, 0, 0.0, 2_000_000).unwrap();
        assert!((closed - series).abs() < 1e-6, "{closed} {series}");
    }

    #[test]
    fn matsubara_truncation_is_first_order() {
        let k = chain(2, 1.0, 0.0, 2.0);
        let exact = k.covariance_closed(0, 0, 0.0);
        let e1 = (k.covariance_matsubara(0, 0, 0.0, 1000).unwrap() - exact).abs();
        let e2 = (k.covariance_matsubara(0, 0, 0.0, 2000).unwrap() - exact).abs();
        let ratio = e1 / e2;
        assert!((ratio - 2.0).abs() < 0.05, "ratio {ratio}");
    }

    #[test]
    fn symmetries() {
        let k = chain(8, 1.0, 0.25, 3.0);
        for (j, l) in [(0, 3), (2, 7), (5, 5)] {
            for tau in [0.0, 0.4, 1.3, 2.9] {
                let g = k.covariance_closed(j, l, tau);
                assert_relative_eq!(g, k.covariance_closed(l, j, -tau), epsilon = 1e-14);
                assert_relative_eq!(g, k.covariance_closed(j, l, 3.0 - tau), epsilon = 1e-14);
                assert_relative_eq!(g, k.covariance_closed(j, l, tau + 3.0), epsilon = 1e-13);
            }
        }
    }

    #[test]
    fn fft_row_matches_mode_sum() {
        let k = CovarianceKernel::new(
            Lattice::new(vec![4, 6], Boundary::Periodic).unwrap(),
            0.8,
            0.4,
            Beta::Finite(1.7),
        )
        .unwrap();
        for tau in [0.0, 0.3, 1.1] {
            let row = k.covariance_row_fft(tau).unwrap();
            for (j, g) in row.iter().enumerate() {
                assert!((g - k.covariance_closed(0, j, tau)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn c_g_is_inverse_a() {
        for a in [1.0, 4.0] {
            for j in [0.0, 0.25, 1.0] {
                let cg = chain(8, a, j, 2.0).integrated_covariance_cg().unwrap();
                assert_relative_eq!(cg, 1.0 / a, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn dirichlet_matches_dense_inverse() {
        // Time-integrated Dirichlet kernel is (B_D^2)^{-1}.
        let lat = Lattice::new(vec![4, 2], Boundary::Dirichlet).unwrap();
        let (a, j) = (0.6, 0.8);
        let k = CovarianceKernel::new(lat.clone(), a, j, Beta::Finite(2.0)).unwrap();
        let n = lat.n_sites();
        let mut b2 = DMatrix::<f64>::zeros(n, n);
        for s in 0..n {
            b2[(s, s)] = a + 2.0 * lat.nu() as f64 * j;
            for nb in lat.neighbors(s) {
                b2[(s, nb)] -= j;
            }
        }
        let inv = b2.try_inverse().unwrap();
        for s in 0..n {
            for t in 0..n {
                let integrated: f64 = k.modes().iter().map(|m| k.mode_weight(m, s, t) / m.eps).sum();
                assert!((integrated - inv[(s, t)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn spatial_decay_is_exponential() {
        let k = chain(64, 1.0, 0.25, 2.0);
        let prof = decay_profile(&k, 10);
        let xs: Vec<f64> = (0..prof.len()).map(|j| j as f64).collect();
        let ys: Vec<f64> = prof.iter().map(|v| v.abs().ln()).collect();
        let fit = crate::stats::linear_fit(&xs[2..], &ys[2..]);
        assert!(fit.slope < 0.0 && fit.r_squared > 0.999);
        // lattice rate acosh(1 + a/(2J)) for the integrated kernel
        assert_relative_eq!(-fit.slope, (1.0f64 + 1.0 / 0.5).acosh(), epsilon = 1e-6);
    }

    #[test]
    fn log_partition() {
        let k = chain(2, 1.0, 0.0, 1.0);
        // two decoupled sites
        assert_relative_eq!(k.harmonic_log_partition(1).unwrap(), -2.0 * (1.0 - (-1.0f64).exp()).ln(), epsilon = 1e-14);
        assert_relative_eq!(k.harmonic_log_partition(2).unwrap(), 2.0 * k.harmonic_log_partition(1).unwrap());
        assert!(chain(2, 1.0, 0.0, 200.0).harmonic_log_partition(1).unwrap() < 1e-80);
    }

    #[test]
    fn p_function_and_decomposition() {
        let ip = Interpolation::new(vec![0.3, 0.6]).unwrap();
        assert_eq!(ip.p(1, 1), 1.0);
        assert_relative_eq!(ip.p(0, 2), 0.18);
        assert_eq!(ip.p(2, 0), ip.p(0, 2));
        let ones = Interpolation::new(vec![1.0; 4]).unwrap();
        assert!((0..5).all(|l| (0..5).all(|m| ones.p(l, m) == 1.0)));
        let zeros = Interpolation::new(vec![0.0; 3]).unwrap().convex_decomposition().unwrap();
        assert_eq!(zeros.len(), 1);
        assert_eq!(zeros[0].1.len(), 4);
        let one = Interpolation::new(vec![0.4]).unwrap().convex_decomposition().unwrap();
        assert_eq!(one.len(), 2);
        assert!(Interpolation::new(vec![1.2]).is_err());
        assert!(Interpolation::new(vec![0.5; 13]).unwrap().convex_decomposition().is_err());
    }

    #[test]
    fn decomposition_reconstructs_p() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let n = rng.random_range(1..7);
            let ip = Interpolation::new((0..n).map(|_| rng.random::<f64>()).collect()).unwrap();
            let terms = ip.convex_decomposition().unwrap();
            let total: f64 = terms.iter().map(|t| t.0).sum();
            assert_relative_eq!(total, 1.0, epsilon = 1e-12);
            for l in 0..=n {
                for m in 0..=n {
                    let rebuilt: f64 = terms
                        .iter()
                        .filter(|(_, blocks)| blocks.iter().any(|b| b.contains(&l) && b.contains(&m)))
                        .map(|t| t.0)
                        .sum();
                    assert!((rebuilt - ip.p(l, m)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn interpolated_matrices_are_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = chain(4, 1.0, 0.5, 3.0);
        for _ in 0..100 {
            let n = rng.random_range(1..5);
            let ip = Interpolation::new((0..n).map(|_| rng.random::<f64>()).collect()).unwrap();
            let ic = InterpolatedCovariance { base: &k, interpolation: ip };
            // 12 random points, each assigned a random block
            let pts: Vec<(usize, f64, usize)> = (0..12)
                .map(|_| (rng.random_range(0..4), rng.random_range(0.0..3.0), rng.random_range(0..=n)))
                .collect();
            let m = DMatrix::from_fn(12, 12, |r, c| {
                let (j, t, b) = pts[r];
                let (k2, t2, b2) = pts[c];
                ic.value(j, t, b, k2, t2, b2)
            });
            let trace = m.trace();
            let eig = SymmetricEigen::new(m);
            assert!(eig.eigenvalues.iter().all(|&e| e >= -1e-10 * trace));
        }
    }
}
