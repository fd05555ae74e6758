//! Exact-on-grid sampling of the reference Gaussian field, boundary data,
//! the discretized action and the observable mini-grammar.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::{Fft, FftDirection, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::covariance::{mode_propagator, CovarianceKernel};
use crate::error::{invalid, Error, Result};
use crate::fftn::FftNd;
use crate::lattice::{Boundary, Lattice};
use crate::potential::PotentialParams;

/// Default time resolution in slices per unit of rescaled inverse temperature.
pub const DEFAULT_SLICES_PER_UNIT: usize = 16;

/// M = ceil(slices_per_unit * beta_hat), at least 2.
pub fn slice_count(beta_hat: f64, slices_per_unit: usize) -> usize {
    ((slices_per_unit as f64 * beta_hat - 1e-9).ceil() as usize).max(2)
}

/// A trajectory field on the space-time grid, periodic in time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldConfiguration {
    pub n_sites: usize,
    pub slices: usize,
    pub d: usize,
    pub dtau: f64,
    /// Layout ((site * slices) + slice) * d + component.
    pub values: Vec<f64>,
}

impl FieldConfiguration {
    pub fn zeros(n_sites: usize, slices: usize, d: usize, dtau: f64) -> Self {
        FieldConfiguration { n_sites, slices, d, dtau, values: vec![0.0; n_sites * slices * d] }
    }

    pub fn constant(n_sites: usize, slices: usize, dtau: f64, value: &[f64]) -> Self {
        let d = value.len();
        let mut f = Self::zeros(n_sites, slices, d, dtau);
        for (i, v) in f.values.iter_mut().enumerate() {
            *v = value[i % d];
        }
        f
    }

    #[inline]
    pub fn index(&self, site: usize, slice: usize, comp: usize) -> usize {
        (site * self.slices + slice % self.slices) * self.d + comp
    }

    #[inline]
    pub fn get(&self, site: usize, slice: usize, comp: usize) -> f64 {
        self.values[self.index(site, slice, comp)]
    }

    /// The d-vector at one space-time point.
    pub fn point(&self, site: usize, slice: usize) -> &[f64] {
        let i = self.index(site, slice, 0);
        &self.values[i..i + self.d]
    }

    pub fn beta_hat(&self) -> f64 {
        self.dtau * self.slices as f64
    }

    /// Copies a single-component field (layout site * slices + slice) into `comp`.
    pub fn set_component(&mut self, comp: usize, data: &[f64]) {
        for (p, v) in data.iter().enumerate() {
            self.values[p * self.d + comp] = *v;
        }
    }

    pub fn component(&self, comp: usize) -> Vec<f64> {
        self.values.iter().skip(comp).step_by(self.d).copied().collect()
    }
}

/// Exact sampler for the grid restriction of a covariance kernel.
#[derive(Clone)]
pub struct GaussianSampler {
    lattice: Lattice,
    slices: usize,
    dtau: f64,
    /// Eigenvalues of the grid covariance, index mode * slices + q.
    lam: Vec<f64>,
    /// sqrt(lam / n) with n the length of the transform used for sampling.
    amp: Vec<f64>,
    /// Dirichlet sine basis, index mode * n_sites + site.
    basis: Option<Vec<f64>>,
    fft_full: FftNd,
    fft_time_fwd: Arc<dyn Fft<f64>>,
    fft_time_inv: Arc<dyn Fft<f64>>,
    fft_full_inv: FftNd,
}

impl std::fmt::Debug for GaussianSampler {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GaussianSampler")
            .field("lattice", &self.lattice)
            .field("slices", &self.slices)
            .field("dtau", &self.dtau)
            .finish()
    }
}

impl GaussianSampler {
    pub fn new(kern: &CovarianceKernel, slices: usize) -> Result<Self> {
        if slices < 2 {
            return Err(invalid("M", "need at least 2 time slices"));
        }
        let beta = kern.beta_finite()?;
        let dtau = beta / slices as f64;
        let lattice = kern.lattice().clone();
        let n_sites = lattice.n_sites();
        let mut planner = FftPlanner::new();
        let fft_time_fwd = planner.plan_fft_forward(slices);
        let fft_time_inv = planner.plan_fft_inverse(slices);

        let mut lam = Vec::with_capacity(n_sites * slices);
        let mut line = vec![Complex64::new(0.0, 0.0); slices];
        for (mi, mode) in kern.modes().iter().enumerate() {
            for (r, v) in line.iter_mut().enumerate() {
                *v = Complex64::new(mode_propagator(mode.eps, kern.beta_hat, r as f64 * dtau), 0.0);
            }
            fft_time_fwd.process(&mut line);
            for (q, v) in line.iter().enumerate() {
                if v.re < -1e-10 {
                    return Err(Error::NegativeSpectralWeight { mode: mi * slices + q, value: v.re });
                }
                lam.push(v.re.max(0.0));
            }
        }
        let (amp, basis) = match lattice.boundary() {
            Boundary::Periodic => {
                let total = (n_sites * slices) as f64;
                (lam.iter().map(|l| (l / total).sqrt()).collect(), None)
            }
            Boundary::Dirichlet => {
                let dims = lattice.dims().to_vec();
                let mut basis = vec![0.0; n_sites * n_sites];
                for (mi, mode) in kern.modes().iter().enumerate() {
                    for s in 0..n_sites {
                        let c = lattice.coords(s);
                        let mut v = 1.0;
                        for axis in 0..dims.len() {
                            let np1 = (dims[axis] + 1) as f64;
                            v *= (2.0 / np1).sqrt() * (PI * mode.label[axis] * (c[axis] + 1) as f64 / np1).sin();
                        }
                        basis[mi * n_sites + s] = v;
                    }
                }
                (lam.iter().map(|l| (l / slices as f64).sqrt()).collect(), Some(basis))
            }
        };
        let mut shape = lattice.dims().to_vec();
        shape.push(slices);
        Ok(GaussianSampler {
            fft_full: FftNd::new(&shape, FftDirection::Forward),
            fft_full_inv: FftNd::new(&shape, FftDirection::Inverse),
            lattice,
            slices,
            dtau,
            lam,
            amp,
            basis,
            fft_time_fwd,
            fft_time_inv,
        })
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn slices(&self) -> usize {
        self.slices
    }

    pub fn dtau(&self) -> f64 {
        self.dtau
    }

    pub fn n_points(&self) -> usize {
        self.lattice.n_sites() * self.slices
    }

    /// Grid covariance eigenvalues, index mode * slices + q.
    pub fn spectrum(&self) -> &[f64] {
        &self.lam
    }

    /// Two independent single-component draws, layout site * slices + slice.
    pub fn draw_pair<R: Rng>(&self, rng: &mut R, buf: &mut Vec<Complex64>, out_a: &mut [f64], out_b: &mut [f64]) {
        let n = self.n_points();
        buf.clear();
        buf.extend(self.amp.iter().map(|&a| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            Complex64::new(a * re, a * im)
        }));
        match &self.basis {
            None => {
                let mut fft = self.fft_full.clone();
                fft.process(buf);
                for i in 0..n {
                    out_a[i] = buf[i].re;
                    out_b[i] = buf[i].im;
                }
            }
            Some(basis) => {
                let ns = self.lattice.n_sites();
                let m = self.slices;
                for mode in 0..ns {
                    self.fft_time_fwd.process(&mut buf[mode * m..(mode + 1) * m]);
                }
                out_a.iter_mut().for_each(|v| *v = 0.0);
                out_b.iter_mut().for_each(|v| *v = 0.0);
                for mode in 0..ns {
                    let row = &buf[mode * m..(mode + 1) * m];
                    for s in 0..ns {
                        let w = basis[mode * ns + s];
                        let (oa, ob) = (&mut out_a[s * m..(s + 1) * m], &mut out_b[s * m..(s + 1) * m]);
                        for r in 0..m {
                            oa[r] += w * row[r].re;
                            ob[r] += w * row[r].im;
                        }
                    }
                }
            }
        }
    }

    /// Applies the grid covariance to a single-component field.
    pub fn apply_kernel(&self, x: &[f64]) -> Vec<f64> {
        let n = self.n_points();
        let ns = self.lattice.n_sites();
        let m = self.slices;
        match &self.basis {
            None => {
                let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
                self.fft_full.clone().process(&mut buf);
                for (b, l) in buf.iter_mut().zip(&self.lam) {
                    *b *= l / n as f64;
                }
                self.fft_full_inv.clone().process(&mut buf);
                buf.iter().map(|c| c.re).collect()
            }
            Some(basis) => {
                let mut buf = vec![Complex64::new(0.0, 0.0); n];
                for mode in 0..ns {
                    for s in 0..ns {
                        let w = basis[mode * ns + s];
                        for r in 0..m {
                            buf[mode * m + r].re += w * x[s * m + r];
                        }
                    }
                }
                for mode in 0..ns {
                    let row = &mut buf[mode * m..(mode + 1) * m];
                    self.fft_time_fwd.process(row);
                    for (q, v) in row.iter_mut().enumerate() {
                        *v *= self.lam[mode * m + q] / m as f64;
                    }
                    self.fft_time_inv.process(row);
                }
                let mut out = vec![0.0; n];
                for mode in 0..ns {
                    for s in 0..ns {
                        let w = basis[mode * ns + s];
                        for r in 0..m {
                            out[s * m + r] += w * buf[mode * m + r].re;
                        }
                    }
                }
                out
            }
        }
    }

    pub fn stream(&self, seed: u64, stream: u64) -> GaussianStream<'_> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        GaussianStream { sampler: self, rng, buf: Vec::new(), spare: None }
    }

    /// One full d-component draw, deterministic in `seed`.
    pub fn sample_gaussian_field(&self, d: usize, seed: u64) -> FieldConfiguration {
        let mut s = self.stream(seed, 0);
        let mut f = FieldConfiguration::zeros(self.lattice.n_sites(), self.slices, d, self.dtau);
        s.fill(&mut f);
        f
    }
}

/// A seeded source of independent single-component draws.
pub struct GaussianStream<'s> {
    sampler: &'s GaussianSampler,
    pub rng: ChaCha8Rng,
    buf: Vec<Complex64>,
    spare: Option<Vec<f64>>,
}

impl GaussianStream<'_> {
    pub fn next_component(&mut self, out: &mut [f64]) {
        if let Some(s) = self.spare.take() {
            out.copy_from_slice(&s);
            return;
        }
        let mut other = vec![0.0; out.len()];
        self.sampler.draw_pair(&mut self.rng, &mut self.buf, out, &mut other);
        self.spare = Some(other);
    }

    /// Overwrites every component of `field` with a fresh mean-zero draw.
    pub fn fill(&mut self, field: &mut FieldConfiguration) {
        let mut comp = vec![0.0; self.sampler.n_points()];
        for c in 0..field.d {
            self.next_component(&mut comp);
            field.set_component(c, &comp);
        }
    }
}

/// Boundary data for the Gibbs measure on a finite box.
#[derive(Debug, Clone, PartialEq)]
pub enum BoundaryCondition {
    Periodic,
    Zero,
    /// Exterior trajectory seen by each interior boundary site, stored as a
    /// field over the box (entries at non-boundary sites are ignored).
    Tempered(FieldConfiguration),
}

impl BoundaryCondition {
    pub fn expected_boundary(&self) -> Boundary {
        match self {
            BoundaryCondition::Periodic => Boundary::Periodic,
            _ => Boundary::Dirichlet,
        }
    }

    /// Reads CSV rows `site,slice,component,value`; lines starting with `#` are skipped.
    pub fn tempered_from_csv(text: &str, n_sites: usize, slices: usize, d: usize, dtau: f64) -> Result<Self> {
        let mut xi = FieldConfiguration::zeros(n_sites, slices, d, dtau);
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with("site") {
                continue;
            }
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            let bad = |reason: String| Error::Config { line: i + 1, reason };
            if cols.len() != 4 {
                return Err(bad(format!("expected 4 columns, got {}", cols.len())));
            }
            let site: usize = cols[0].parse().map_err(|e| bad(format!("site: {e}")))?;
            let slice: usize = cols[1].parse().map_err(|e| bad(format!("slice: {e}")))?;
            let comp: usize = cols[2].parse().map_err(|e| bad(format!("component: {e}")))?;
            let value: f64 = cols[3].parse().map_err(|e| bad(format!("value: {e}")))?;
            if site >= n_sites || slice >= slices || comp >= d {
                return Err(bad("index out of range".into()));
            }
            let k = xi.index(site, slice, comp);
            xi.values[k] = value;
        }
        Ok(BoundaryCondition::Tempered(xi))
    }
}

/// Weighted norm sum_l e^{-rho |l|} ||xi_l||_{L2[0, beta]} over boundary sites,
/// with |l| measured from the box centre. Requires rho < sqrt(a).
pub fn tempered_norm(lat: &Lattice, xi: &FieldConfiguration, rho: f64, a: f64) -> Result<f64> {
    if !(rho > 0.0 && rho < a.sqrt()) {
        return Err(Error::NotTempered(format!("rho = {rho} must lie in (0, sqrt(a) = {})", a.sqrt())));
    }
    let centre: Vec<f64> = lat.dims().iter().map(|&n| (n as f64 - 1.0) / 2.0).collect();
    let mut total = 0.0;
    for site in 0..lat.n_sites() {
        if lat.exterior_bonds(site) == 0 {
            continue;
        }
        let c = lat.coords(site);
        let dist: f64 = c.iter().zip(&centre).map(|(&x, m)| (x as f64 - m).abs()).sum::<f64>() + 1.0;
        let l2: f64 = (0..xi.slices)
            .flat_map(|r| xi.point(site, r).iter().map(|v| v * v).collect::<Vec<_>>())
            .sum::<f64>()
            * xi.dtau;
        total += (-rho * dist).exp() * l2.sqrt();
    }
    if total.is_finite() {
        Ok(total)
    } else {
        Err(Error::NotTempered("weighted boundary norm is not finite".into()))
    }
}

/// Coefficient field L of the linear part of the action, so that the action
/// is dtau sum V(phi) + <L, phi>. One vector per component.
pub fn linear_coefficients(
    lat: &Lattice,
    slices: usize,
    dtau: f64,
    h_hat: &[f64],
    j: f64,
    bc: &BoundaryCondition,
) -> Vec<Vec<f64>> {
    let n = lat.n_sites() * slices;
    let mut out: Vec<Vec<f64>> = h_hat.iter().map(|h| vec![dtau * h; n]).collect();
    if let BoundaryCondition::Tempered(xi) = bc {
        for site in 0..lat.n_sites() {
            let bonds = lat.exterior_bonds(site) as f64;
            if bonds == 0.0 {
                continue;
            }
            for r in 0..slices {
                for (c, l) in out.iter_mut().enumerate() {
                    l[site * slices + r] -= 0.5 * j * dtau * bonds * xi.get(site, r, c);
                }
            }
        }
    }
    out
}

/// dtau sum_{slices, sites} [V(phi) + h . phi] - (J/2) dtau sum_boundary phi . xi.
pub fn action_integral(
    phi: &FieldConfiguration,
    lat: &Lattice,
    pot: &PotentialParams,
    h_hat: &[f64],
    j: f64,
    bc: &BoundaryCondition,
) -> f64 {
    let mut s = 0.0;
    for site in 0..phi.n_sites {
        for r in 0..phi.slices {
            let x = phi.point(site, r);
            s += pot.value(x) + x.iter().zip(h_hat).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    s *= phi.dtau;
    if let BoundaryCondition::Tempered(xi) = bc {
        let mut b = 0.0;
        for site in 0..phi.n_sites {
            let bonds = lat.exterior_bonds(site) as f64;
            if bonds == 0.0 {
                continue;
            }
            for r in 0..phi.slices {
                let dot: f64 = phi.point(site, r).iter().zip(xi.point(site, r)).map(|(a, b)| a * b).sum();
                b += bonds * dot;
            }
        }
        s -= 0.5 * j * phi.dtau * b;
    }
    s
}

/// One factor phi[j, tau, alpha] of an observable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldPoint {
    pub site: usize,
    pub tau: f64,
    pub comp: usize,
}

/// A product c * phi[j1,tau1,a1] * phi[j2,tau2,a2] * ...
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observable {
    pub coeff: f64,
    pub factors: Vec<FieldPoint>,
}

impl Observable {
    pub fn product(factors: Vec<FieldPoint>) -> Self {
        Observable { coeff: 1.0, factors }
    }

    pub fn two_point(l: usize, tau: f64, l2: usize, tau2: f64) -> Self {
        Observable::product(vec![
            FieldPoint { site: l, tau, comp: 0 },
            FieldPoint { site: l2, tau: tau2, comp: 0 },
        ])
    }

    /// Parses `phi[j,tau,alpha]*phi[...]`, optionally with numeric factors.
    /// Sites and components count from 0.
    pub fn parse(text: &str) -> Result<Self> {
        let mut coeff = 1.0;
        let mut factors = Vec::new();
        let err = |m: String| Error::Observable(m);
        for raw in text.split('*') {
            let term = raw.trim();
            if term.is_empty() {
                return Err(err(format!("empty factor in `{text}`")));
            }
            if let Some(inner) = term.strip_prefix("phi[").and_then(|t| t.strip_suffix(']')) {
                let parts: Vec<&str> = inner.split(',').map(str::trim).collect();
                if parts.len() != 3 {
                    return Err(err(format!("`{term}` needs three indices")));
                }
                let site = parts[0].parse().map_err(|_| err(format!("bad site in `{term}`")))?;
                let tau: f64 = parts[1].parse().map_err(|_| err(format!("bad time in `{term}`")))?;
                let comp = parts[2].parse().map_err(|_| err(format!("bad component in `{term}`")))?;
                factors.push(FieldPoint { site, tau, comp });
            } else {
                coeff *= term.parse::<f64>().map_err(|_| err(format!("unrecognised factor `{term}`")))?;
            }
        }
        Ok(Observable { coeff, factors })
    }

    /// Resolves times to slice indices; times must sit on the grid.
    pub fn bind(&self, n_sites: usize, slices: usize, d: usize, dtau: f64) -> Result<BoundObservable> {
        let mut idx = Vec::with_capacity(self.factors.len());
        for f in &self.factors {
            if f.site >= n_sites || f.comp >= d {
                return Err(Error::Observable(format!("phi[{},{},{}] is outside the box", f.site, f.tau, f.comp)));
            }
            let x = f.tau / dtau;
            let r = x.round();
            if (x - r).abs() > 1e-6 {
                return Err(Error::Observable(format!("time {} is not a multiple of the slice width {dtau}", f.tau)));
            }
            let slice = (r as i64).rem_euclid(slices as i64) as usize;
            idx.push((f.site * slices + slice) * d + f.comp);
        }
        Ok(BoundObservable { coeff: self.coeff, idx })
    }
}

/// An observable with flat indices into [`FieldConfiguration::values`].
#[derive(Debug, Clone, PartialEq)]
pub struct BoundObservable {
    pub coeff: f64,
    pub idx: Vec<usize>,
}

impl BoundObservable {
    #[inline]
    pub fn eval(&self, phi: &FieldConfiguration) -> f64 {
        self.idx.iter().fold(self.coeff, |acc, &i| acc * phi.values[i])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Beta;
    use approx::assert_relative_eq;

    fn periodic(n: usize, beta: f64) -> CovarianceKernel {
        CovarianceKernel::new(Lattice::chain(n, Boundary::Periodic).unwrap(), 1.0, 0.25, Beta::Finite(beta)).unwrap()
    }

    /// Empirical covariance check of the grid kernel over `n` draws.
    fn covariance_check(kern: &CovarianceKernel, slices: usize, n: usize) {
        let s = GaussianSampler::new(kern, slices).unwrap();
        let np = s.n_points();
        let mut st = s.stream(3, 0);
        let mut x = vec![0.0; np];
        let pairs = [(0, 0), (0, 1), (0, np - 1), (1, slices + 2), (np / 2, 3)];
        let mut acc = vec![0.0; pairs.len()];
        let mut acc2 = vec![0.0; pairs.len()];
        for _ in 0..n {
            st.next_component(&mut x);
            for (k, &(p, q)) in pairs.iter().enumerate() {
                let v = x[p] * x[q];
                acc[k] += v;
                acc2[k] += v * v;
            }
        }
        let dtau = s.dtau();
        for (k, &(p, q)) in pairs.iter().enumerate() {
            let (sp, rp) = (p / slices, p % slices);
            let (sq, rq) = (q / slices, q % slices);
            let exact = kern.covariance_closed(sp, sq, (rp as f64 - rq as f64) * dtau);
            let m = acc[k] / n as f64;
            let se = ((acc2[k] / n as f64 - m * m) / n as f64).sqrt();
            assert!((m - exact).abs() < 5.0 * se, "pair {:?}: {m} vs {exact} (se {se})", (p, q));
        }
    }

    #[test]
    fn slice_counts() {
        assert_eq!(slice_count(2.0, 16), 32);
        assert_eq!(slice_count(0.01, 16), 2);
        assert_eq!(slice_count(0.2, 16), 4);
    }

    #[test]
    fn spectrum_matches_closed_form() {
        // lattice sum of e^{-lam |t|}: sinh(lam dt) / (2 lam (cosh(lam dt) - cos theta))
        let kern = periodic(4, 2.0);
        let s = GaussianSampler::new(&kern, 16).unwrap();
        for (mi, mode) in kern.modes().iter().enumerate() {
            let lam = mode.eps.sqrt();
            for q in 0..16 {
                let th = 2.0 * PI * q as f64 / 16.0;
                let x = lam * s.dtau();
                let exact = x.sinh() / (2.0 * lam * (x.cosh() - th.cos()));
                assert_relative_eq!(s.spectrum()[mi * 16 + q], exact, max_relative = 1e-10);
            }
        }
    }

    #[test]
    fn periodic_sampler_covariance() {
        covariance_check(&periodic(4, 2.0), 8, 100_000);
    }

    #[test]
    fn dirichlet_sampler_covariance() {
        let kern =
            CovarianceKernel::new(Lattice::chain(3, Boundary::Dirichlet).unwrap(), 0.7, 0.5, Beta::Finite(1.5)).unwrap();
        covariance_check(&kern, 6, 100_000);
    }

    #[test]
    fn two_dimensional_box() {
        let kern = CovarianceKernel::new(Lattice::new(vec![2, 4], Boundary::Periodic).unwrap(), 1.0, 0.3, Beta::Finite(1.0))
            .unwrap();
        covariance_check(&kern, 4, 100_000);
    }

    #[test]
    fn deterministic_given_seed() {
        let s = GaussianSampler::new(&periodic(4, 2.0), 8).unwrap();
        let a = s.sample_gaussian_field(3, 42);
        let b = s.sample_gaussian_field(3, 42);
        assert_eq!(a, b);
        assert_ne!(a, s.sample_gaussian_field(3, 43));
    }

    #[test]
    fn apply_kernel_matches_dense() {
        for kern in [
            periodic(4, 2.0),
            CovarianceKernel::new(Lattice::chain(5, Boundary::Dirichlet).unwrap(), 1.0, 0.4, Beta::Finite(1.0)).unwrap(),
        ] {
            let m = 6;
            let s = GaussianSampler::new(&kern, m).unwrap();
            let np = s.n_points();
            let x: Vec<f64> = (0..np).map(|i| ((i * 7) as f64).sin()).collect();
            let y = s.apply_kernel(&x);
            for p in 0..np {
                let mut acc = 0.0;
                for q in 0..np {
                    let tau = ((p % m) as f64 - (q % m) as f64) * s.dtau();
                    acc += kern.covariance_closed(p / m, q / m, tau) * x[q];
                }
                assert!((acc - y[p]).abs() < 1e-12, "{acc} {}", y[p]);
            }
        }
    }

    #[test]
    fn action_examples() {
        let lat = Lattice::single_site();
        let pot = PotentialParams::new(1.0, 1.0, 1).unwrap();
        let x0 = 0.7f64;
        let phi = FieldConfiguration::constant(1, 20, 0.1, &[x0]);
        let s = action_integral(&phi, &lat, &pot, &[0.0], 0.0, &BoundaryCondition::Periodic);
        assert_relative_eq!(s, 2.0 * (-x0 * x0 / 2.0).exp(), epsilon = 1e-13);
        let phi2 = FieldConfiguration::constant(1, 40, 0.1, &[x0]);
        let s2 = action_integral(&phi2, &lat, &pot, &[0.0], 0.0, &BoundaryCondition::Periodic);
        assert_relative_eq!(s2, 2.0 * s, epsilon = 1e-13);
        let free = PotentialParams::new(0.0, 1.0, 1).unwrap();
        assert_eq!(action_integral(&phi, &lat, &free, &[0.0], 0.0, &BoundaryCondition::Periodic), 0.0);
    }

    #[test]
    fn linear_coefficients_match_action() {
        let lat = Lattice::chain(4, Boundary::Dirichlet).unwrap();
        let free = PotentialParams::new(0.0, 1.0, 2).unwrap();
        let xi = FieldConfiguration::constant(4, 5, 0.2, &[1.0, -2.0]);
        let bc = BoundaryCondition::Tempered(xi);
        let mut phi = FieldConfiguration::zeros(4, 5, 2, 0.2);
        for (i, v) in phi.values.iter_mut().enumerate() {
            *v = (i as f64 * 0.3).cos();
        }
        let h = [0.3, 0.1];
        let s = action_integral(&phi, &lat, &free, &h, 0.8, &bc);
        let l = linear_coefficients(&lat, 5, 0.2, &h, 0.8, &bc);
        let dot: f64 = (0..2).map(|c| l[c].iter().zip(phi.component(c)).map(|(a, b)| a * b).sum::<f64>()).sum();
        assert_relative_eq!(s, dot, epsilon = 1e-12);
    }

    #[test]
    fn tempered_norm_requires_small_rho() {
        let lat = Lattice::chain(4, Boundary::Dirichlet).unwrap();
        let xi = FieldConfiguration::constant(4, 4, 0.25, &[1.0]);
        assert!(tempered_norm(&lat, &xi, 0.5, 1.0).unwrap() > 0.0);
        assert!(tempered_norm(&lat, &xi, 1.5, 1.0).is_err());
    }

    #[test]
    fn observable_grammar() {
        let o = Observable::parse("phi[0,0.5,0] * phi[3, 1.0, 1]").unwrap();
        assert_eq!(o.factors.len(), 2);
        let o2 = Observable::parse("2*phi[1,0,0]").unwrap();
        assert_eq!(o2.coeff, 2.0);
        assert!(Observable::parse("psi[0,0,0]").is_err());
        assert!(Observable::parse("phi[0,0]").is_err());
        let b = o.bind(4, 8, 2, 0.25).unwrap();
        assert_eq!(b.idx, vec![(2) * 2, (3 * 8 + 4) * 2 + 1]);
        assert!(o.bind(4, 8, 2, 0.3).is_err());
        assert!(o.bind(2, 8, 2, 0.25).is_err());
    }

    #[test]
    fn csv_boundary() {
        let bc = BoundaryCondition::tempered_from_csv("site,slice,component,value\n0,1,0,2.5\n", 2, 4, 1, 0.25).unwrap();
        match bc {
            BoundaryCondition::Tempered(xi) => assert_eq!(xi.get(0, 1, 0), 2.5),
            _ => unreachable!(),
        }
        assert!(BoundaryCondition::tempered_from_csv("9,0,0,1", 2, 4, 1, 0.25).is_err());
    }
}
