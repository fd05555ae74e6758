//! Estimators for the perturbed measure: self-normalized reweighting of
//! exact Gaussian draws, a pCN Metropolis fallback, truncated correlations,
//! clustering fits, the order parameter and the boundary-condition gap.
//!
//! Linear terms of the action (external field, tempered boundary coupling)
//! are absorbed into the mean of the reference Gaussian, so that the
//! importance weights only involve the one-site potential.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::CovarianceKernel;
use crate::error::{invalid, Error, Result};
use crate::lattice::{Boundary, Lattice};
use crate::params::{rescale_on, Beta, ModelParams};
use crate::potential::PotentialParams;
use crate::sampler::{
    linear_coefficients, slice_count, BoundObservable, BoundaryCondition, FieldConfiguration, GaussianSampler,
    Observable,
};
use crate::stats::{batch_stderr, integrated_autocorrelation_time, jackknife, kish_ess, weighted_linear_fit, EstimatorResult};

/// ESS below which estimates are flagged.
pub const LOW_ESS: f64 = 100.0;

#[derive(Debug, Clone, PartialEq)]
pub enum OneSitePotential {
    Standard(PotentialParams),
    /// b_m [e^{-δ(x+y)²/4} + e^{-δ(x-y)²/4}] with a frozen trajectory y.
    Doubled { params: PotentialParams, y: FieldConfiguration },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Backend {
    Reweight,
    /// Crank-Nicolson proposal with mixing parameter rho.
    Mcmc { rho: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub n_samples: usize,
    pub seed: u64,
    pub batches: usize,
    pub chains: usize,
    pub backend: Backend,
}

impl McConfig {
    pub fn new(n_samples: usize, seed: u64) -> Self {
        McConfig { n_samples, seed, batches: 50, chains: 4, backend: Backend::Reweight }
    }

    fn batch_sizes(&self) -> Vec<usize> {
        let k = self.batches.max(1);
        (0..k).map(|b| self.n_samples / k + usize::from(b < self.n_samples % k)).collect()
    }
}

/// The finite-volume Gibbs measure on the time grid.
#[derive(Debug, Clone)]
pub struct GibbsModel {
    pub sampler: GaussianSampler,
    pub potential: OneSitePotential,
    pub d: usize,
    pub h_hat: Vec<f64>,
    pub j: f64,
    pub bc: BoundaryCondition,
    /// Additive energy constant; it cancels from every expectation.
    pub energy_offset: f64,
    mean: FieldConfiguration,
    log_weight_ref: f64,
}

impl GibbsModel {
    pub fn new(
        kern: &CovarianceKernel,
        slices: usize,
        potential: OneSitePotential,
        h_hat: Vec<f64>,
        bc: BoundaryCondition,
    ) -> Result<Self> {
        let d = h_hat.len();
        if d == 0 {
            return Err(invalid("h", "need one entry per component"));
        }
        let pd = match &potential {
            OneSitePotential::Standard(p) => p.d,
            OneSitePotential::Doubled { params, .. } => params.d,
        };
        if pd != d {
            return Err(invalid("d", "potential and field dimensions differ"));
        }
        if bc.expected_boundary() != kern.boundary() {
            return Err(invalid("bc", "boundary condition does not match the covariance box"));
        }
        let sampler = GaussianSampler::new(kern, slices)?;
        let lat = kern.lattice().clone();
        let n_sites = lat.n_sites();
        if let BoundaryCondition::Tempered(xi) = &bc {
            if xi.n_sites != n_sites || xi.slices != slices || xi.d != d {
                return Err(invalid("xi", "boundary field does not match the grid"));
            }
        }
        if let OneSitePotential::Doubled { y, .. } = &potential {
            if y.n_sites != n_sites || y.slices != slices || y.d != d {
                return Err(invalid("y", "auxiliary field does not match the grid"));
            }
        }
        let coeffs = linear_coefficients(&lat, slices, sampler.dtau(), &h_hat, kern.j, &bc);
        let mut mean = FieldConfiguration::zeros(n_sites, slices, d, sampler.dtau());
        for (c, l) in coeffs.iter().enumerate() {
            if l.iter().any(|&v| v != 0.0) {
                let mu: Vec<f64> = sampler.apply_kernel(l).into_iter().map(|v| -v).collect();
                mean.set_component(c, &mu);
            }
        }
        let mut model = GibbsModel {
            sampler,
            potential,
            d,
            h_hat,
            j: kern.j,
            bc,
            energy_offset: 0.0,
            mean,
            log_weight_ref: 0.0,
        };
        model.log_weight_ref = model.raw_log_weight(&model.mean.clone());
        Ok(model)
    }

    pub fn lattice(&self) -> &Lattice {
        self.sampler.lattice()
    }

    pub fn slices(&self) -> usize {
        self.sampler.slices()
    }

    pub fn dtau(&self) -> f64 {
        self.sampler.dtau()
    }

    /// Mean of the shifted reference Gaussian.
    pub fn mean_field(&self) -> &FieldConfiguration {
        &self.mean
    }

    fn raw_log_weight(&self, phi: &FieldConfiguration) -> f64 {
        let mut s = 0.0;
        match &self.potential {
            OneSitePotential::Standard(p) => {
                for x in phi.values.chunks_exact(self.d) {
                    s += p.value(x);
                }
            }
            OneSitePotential::Doubled { params, y } => {
                for (x, yy) in phi.values.chunks_exact(self.d).zip(y.values.chunks_exact(self.d)) {
                    s += params.auxiliary(x, yy);
                }
            }
        }
        -phi.dtau * s - self.energy_offset * phi.beta_hat()
    }

    /// log of the importance weight, up to a model-fixed constant.
    pub fn log_weight(&self, phi: &FieldConfiguration) -> f64 {
        self.raw_log_weight(phi) - self.log_weight_ref
    }

    pub fn bind(&self, obs: &Observable) -> Result<BoundObservable> {
        obs.bind(self.lattice().n_sites(), self.slices(), self.d, self.dtau())
    }

    fn blank(&self) -> FieldConfiguration {
        FieldConfiguration::zeros(self.lattice().n_sites(), self.slices(), self.d, self.dtau())
    }
}

/// Per-batch sums under common random numbers. For each model the row holds
/// [Σw, Σw², Σw f_0, ..., Σw f_{width-1}]. All models must share one grid.
pub fn crn_sums<F>(models: &[&GibbsModel], cfg: &McConfig, width: usize, f: F) -> Vec<Vec<Vec<f64>>>
where
    F: Fn(usize, &FieldConfiguration, &mut [f64]) + Sync,
{
    let base = models[0];
    let sizes = cfg.batch_sizes();
    sizes
        .par_iter()
        .enumerate()
        .map(|(b, &n_b)| {
            let mut stream = base.sampler.stream(cfg.seed, b as u64);
            let mut psi = base.blank();
            let mut phi = base.blank();
            let mut vals = vec![0.0; width];
            let mut sums = vec![vec![0.0; width + 2]; models.len()];
            for _ in 0..n_b {
                stream.fill(&mut psi);
                for (k, model) in models.iter().enumerate() {
                    for ((p, s), m) in phi.values.iter_mut().zip(&psi.values).zip(&model.mean.values) {
                        *p = s + m;
                    }
                    let w = model.log_weight(&phi).exp();
                    f(k, &phi, &mut vals);
                    let row = &mut sums[k];
                    row[0] += w;
                    row[1] += w * w;
                    for (r, v) in row[2..].iter_mut().zip(&vals) {
                        *r += w * v;
                    }
                }
            }
            sums
        })
        .collect()
}

fn totals(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut t = vec![0.0; rows[0].len()];
    for r in rows {
        for (a, b) in t.iter_mut().zip(r) {
            *a += b;
        }
    }
    t
}

/// Self-normalized mean of column `col` with batch-means error.
fn ratio_result(rows: &[Vec<f64>], col: usize, cfg: &McConfig) -> EstimatorResult {
    let t = totals(rows);
    let batch_means: Vec<f64> = rows.iter().filter(|r| r[0] > 0.0).map(|r| r[2 + col] / r[0]).collect();
    EstimatorResult {
        mean: t[2 + col] / t[0],
        stderr: batch_stderr(&batch_means),
        n_samples: cfg.n_samples,
        seed: cfg.seed,
        effective_sample_size: kish_ess(t[0], t[1]),
    }
}

/// <A> under the model, by reweighting or by pCN Metropolis.
pub fn expectation(obs: &BoundObservable, model: &GibbsModel, cfg: &McConfig) -> Result<EstimatorResult> {
    expectation_fn(model, cfg, |phi| obs.eval(phi))
}

/// As [`expectation`] for an arbitrary field functional.
pub fn expectation_fn<F>(model: &GibbsModel, cfg: &McConfig, f: F) -> Result<EstimatorResult>
where
    F: Fn(&FieldConfiguration) -> f64 + Sync,
{
    if cfg.n_samples < 2 {
        return Err(invalid("samples", "need at least 2 samples"));
    }
    match cfg.backend {
        Backend::Reweight => {
            let rows = crn_sums(&[model], cfg, 1, |_, phi, out| out[0] = f(phi));
            let rows: Vec<Vec<f64>> = rows.into_iter().map(|mut r| r.remove(0)).collect();
            Ok(ratio_result(&rows, 0, cfg))
        }
        Backend::Mcmc { rho } => mcmc_expectation(model, cfg, rho, f),
    }
}

fn mcmc_expectation<F>(model: &GibbsModel, cfg: &McConfig, rho: f64, f: F) -> Result<EstimatorResult>
where
    F: Fn(&FieldConfiguration) -> f64 + Sync,
{
    if !(0.0..1.0).contains(&rho) {
        return Err(invalid("rho_prop", "must lie in [0, 1)"));
    }
    let chains = cfg.chains.max(1);
    let per_chain = cfg.n_samples.div_ceil(chains);
    let burn = per_chain / 10;
    let mix = (1.0 - rho * rho).sqrt();
    let results: Vec<(f64, f64, f64, usize)> = (0..chains)
        .into_par_iter()
        .map(|c| {
            let mut stream = model.sampler.stream(cfg.seed, 1_000_000 + c as u64);
            let mut psi = model.blank();
            let mut prop = model.blank();
            let mut phi = model.blank();
            let mut noise = model.blank();
            stream.fill(&mut psi);
            let shift = |dst: &mut FieldConfiguration, src: &FieldConfiguration| {
                for ((p, s), m) in dst.values.iter_mut().zip(&src.values).zip(&model.mean.values) {
                    *p = s + m;
                }
            };
            shift(&mut phi, &psi);
            let mut lw = model.log_weight(&phi);
            let mut series = Vec::with_capacity(per_chain);
            for step in 0..burn + per_chain {
                stream.fill(&mut noise);
                for ((p, s), z) in prop.values.iter_mut().zip(&psi.values).zip(&noise.values) {
                    *p = rho * s + mix * z;
                }
                shift(&mut phi, &prop);
                let lw_new = model.log_weight(&phi);
                let u: f64 = stream.rng.random();
                if u.ln() < lw_new - lw {
                    std::mem::swap(&mut psi, &mut prop);
                    lw = lw_new;
                } else {
                    shift(&mut phi, &psi);
                }
                if step >= burn {
                    series.push(f(&phi));
                }
            }
            let n = series.len() as f64;
            let m = series.iter().sum::<f64>() / n;
            let var = series.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
            let tau = integrated_autocorrelation_time(&series);
            (m, var, tau, series.len())
        })
        .collect();
    let k = results.len() as f64;
    let mean = results.iter().map(|r| r.0).sum::<f64>() / k;
    let var_mean = results.iter().map(|r| r.1 * 2.0 * r.2 / r.3 as f64).sum::<f64>() / (k * k);
    let ess = results.iter().map(|r| r.3 as f64 / (2.0 * r.2)).sum::<f64>();
    Ok(EstimatorResult {
        mean,
        stderr: var_mean.sqrt(),
        n_samples: results.iter().map(|r| r.3).sum(),
        seed: cfg.seed,
        effective_sample_size: ess,
    })
}

/// K = <A B> - <A><B> with a jackknife error.
pub fn truncated_two_point(a: &BoundObservable, b: &BoundObservable, model: &GibbsModel, cfg: &McConfig) -> EstimatorResult {
    let rows = crn_sums(&[model], cfg, 3, |_, phi, out| {
        let (x, y) = (a.eval(phi), b.eval(phi));
        out[0] = x;
        out[1] = y;
        out[2] = x * y;
    });
    let rows: Vec<Vec<f64>> = rows.into_iter().map(|mut r| r.remove(0)).collect();
    truncated_from_sums(&rows, 2, 3, 4, cfg)
}

fn truncated_from_sums(rows: &[Vec<f64>], ia: usize, ib: usize, iab: usize, cfg: &McConfig) -> EstimatorResult {
    let (mean, stderr) = jackknife(rows, |s| s[iab] / s[0] - (s[ia] / s[0]) * (s[ib] / s[0]));
    let t = totals(rows);
    EstimatorResult {
        mean,
        stderr,
        n_samples: cfg.n_samples,
        seed: cfg.seed,
        effective_sample_size: kish_ess(t[0], t[1]),
    }
}

/// Equal-time truncated correlation K(r) along the first lattice axis,
/// averaged over translations and time slices, for r = 0..=max_dist.
pub fn correlation_profile(model: &GibbsModel, max_dist: usize, cfg: &McConfig) -> Result<Vec<EstimatorResult>> {
    let lat = model.lattice().clone();
    if lat.boundary() != Boundary::Periodic {
        return Err(Error::RequiresPeriodic);
    }
    let n0 = lat.dims()[0];
    if n0 < 2 * max_dist.max(1) {
        return Err(invalid("max_dist", "box too small for the requested distances"));
    }
    let ns = lat.n_sites();
    let m = model.slices();
    let d = model.d;
    let stride: usize = lat.dims()[1..].iter().product();
    let partner: Vec<Vec<usize>> = (0..=max_dist)
        .map(|r| {
            (0..ns)
                .map(|s| {
                    let x0 = s / stride;
                    ((x0 + r) % n0) * stride + s % stride
                })
                .collect()
        })
        .collect();
    let norm = (ns * m) as f64;
    let rows = crn_sums(&[model], cfg, max_dist + 2, |_, phi, out| {
        let v = &phi.values;
        out[0] = (0..ns * m).map(|p| v[p * d]).sum::<f64>() / norm;
        for r in 0..=max_dist {
            let mut acc = 0.0;
            for s in 0..ns {
                let t = partner[r][s];
                for k in 0..m {
                    acc += v[(s * m + k) * d] * v[(t * m + k) * d];
                }
            }
            out[1 + r] = acc / norm;
        }
    });
    let rows: Vec<Vec<f64>> = rows.into_iter().map(|mut r| r.remove(0)).collect();
    Ok((0..=max_dist).map(|r| truncated_from_sums(&rows, 2, 2, 3 + r, cfg)).collect())
}

/// Exponential fit of correlations against distance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringFit {
    pub rate: f64,
    pub rate_stderr: f64,
    pub intercept: f64,
    pub residuals: Vec<f64>,
    pub distances: Vec<usize>,
    /// The one-site harmonic value sqrt(a), for comparison only.
    pub reference_rate: f64,
}

/// Weighted fit of log K(r) = c - rate r over r = 1..=max_dist.
pub fn clustering_fit(profile: &[EstimatorResult], max_dist: usize, a: f64) -> Result<ClusteringFit> {
    if max_dist < 2 || profile.len() <= max_dist {
        return Err(invalid("max_dist", "need at least two distances inside the profile"));
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut ss = Vec::new();
    for (r, k) in profile.iter().enumerate().take(max_dist + 1).skip(1) {
        if k.mean <= 2.0 * k.stderr {
            return Err(Error::FitRefused(format!("K({r}) = {:.3e} is within 2 stderr ({:.3e}) of zero", k.mean, k.stderr)));
        }
        xs.push(r as f64);
        ys.push(k.mean.ln());
        ss.push(if k.stderr > 0.0 { k.stderr / k.mean } else { 1e-12 });
    }
    let (fit, se_slope, _) = weighted_linear_fit(&xs, &ys, &ss);
    Ok(ClusteringFit {
        rate: -fit.slope,
        rate_stderr: se_slope,
        intercept: fit.intercept,
        residuals: fit.residuals,
        distances: (1..=max_dist).collect(),
        reference_rate: a.sqrt(),
    })
}

/// G(0, r; 0) along the first axis, r = 0..=max_dist.
pub fn harmonic_profile(kern: &CovarianceKernel, max_dist: usize) -> Vec<EstimatorResult> {
    let stride: usize = kern.lattice().dims()[1..].iter().product();
    (0..=max_dist)
        .map(|r| EstimatorResult {
            mean: kern.covariance_closed(0, r * stride, 0.0),
            stderr: 0.0,
            n_samples: 0,
            seed: 0,
            effective_sample_size: f64::INFINITY,
        })
        .collect()
}

/// Physical setting shared by the order-parameter and gap scans.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanSetup {
    pub params: ModelParams,
    pub slices_per_unit: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderParameterRow {
    pub n: usize,
    pub h: f64,
    pub sigma: EstimatorResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderParameterTable {
    pub rows: Vec<OrderParameterRow>,
    /// sigma at the largest box and smallest |h|.
    pub diagonal_value: EstimatorResult,
    /// Intercept of a weighted linear fit in h at the largest box, with its error.
    pub extrapolated: (f64, f64),
}

/// sigma = alpha <|Λ|^{-1} Σ_j x_j . e> on periodic boxes with side n and field h e.
pub fn order_parameter(
    setup: &ScanSetup,
    direction: &[f64],
    h_values: &[f64],
    sides: &[usize],
    cfg: &McConfig,
) -> Result<OrderParameterTable> {
    let p0 = &setup.params;
    if direction.len() != p0.d {
        return Err(invalid("direction", "must have d components"));
    }
    let norm = direction.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0) {
        return Err(invalid("direction", "must be nonzero"));
    }
    let e: Vec<f64> = direction.iter().map(|x| x / norm).collect();
    if h_values.is_empty() || sides.is_empty() {
        return Err(invalid("h_sequence", "need at least one field value and one box"));
    }
    let mut rows = Vec::new();
    for &n in sides {
        for &h in h_values {
            let mut p = p0.clone();
            p.dims = vec![n; p.nu];
            p.h = e.iter().map(|x| x * h).collect();
            let r = rescale_on(&p, Boundary::Periodic)?;
            let beta_hat = r.beta_hat.finite().ok_or(Error::InfiniteBeta)?;
            let kern = CovarianceKernel::new(p.lattice(Boundary::Periodic)?, p.a, p.j, r.beta_hat)?;
            let slices = slice_count(beta_hat, setup.slices_per_unit);
            let pot = PotentialParams::new(r.b_m, r.delta_m, p.d)?;
            let model =
                GibbsModel::new(&kern, slices, OneSitePotential::Standard(pot), r.h_hat.clone(), BoundaryCondition::Periodic)?;
            let scale = r.alpha / (kern.lattice().n_sites() * slices) as f64;
            let d = p.d;
            let sigma = expectation_fn(&model, cfg, |phi| {
                scale * phi.values.chunks_exact(d).map(|x| x.iter().zip(&e).map(|(a, b)| a * b).sum::<f64>()).sum::<f64>()
            })?;
            rows.push(OrderParameterRow { n, h, sigma });
        }
    }
    let n_max = *sides.iter().max().unwrap();
    let largest: Vec<&OrderParameterRow> = rows.iter().filter(|r| r.n == n_max).collect();
    let diagonal_value = largest
        .iter()
        .min_by(|a, b| a.h.abs().total_cmp(&b.h.abs()))
        .map(|r| r.sigma.clone())
        .unwrap();
    let extrapolated = if largest.len() >= 2 {
        let xs: Vec<f64> = largest.iter().map(|r| r.h).collect();
        let ys: Vec<f64> = largest.iter().map(|r| r.sigma.mean).collect();
        let ss: Vec<f64> = largest.iter().map(|r| r.sigma.stderr.max(1e-300)).collect();
        let (fit, _, se) = weighted_linear_fit(&xs, &ys, &ss);
        (fit.intercept, se)
    } else {
        (diagonal_value.mean, diagonal_value.stderr)
    };
    Ok(OrderParameterTable { rows, diagonal_value, extrapolated })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub n: usize,
    pub site: usize,
    pub dist_to_boundary: usize,
    pub gap: EstimatorResult,
}

/// <phi_{l0}> with boundary data xi minus the same with eta, on zero-boundary
/// chains of each side in `sides`, l0 the central site. Both measures are
/// estimated from the same Gaussian draws. With `tau0 = None` the estimate
/// averages over time slices, which is exact for time-independent data.
pub fn uniqueness_gap(
    setup: &ScanSetup,
    xi: &[f64],
    eta: &[f64],
    sides: &[usize],
    tau0: Option<f64>,
    cfg: &McConfig,
) -> Result<Vec<GapRow>> {
    let p0 = &setup.params;
    if xi.len() != p0.d || eta.len() != p0.d {
        return Err(invalid("xi", "boundary values need d components"));
    }
    let mut rows = Vec::new();
    for &n in sides {
        let mut p = p0.clone();
        p.nu = 1;
        p.dims = vec![n];
        let r = rescale_on(&p, Boundary::Dirichlet)?;
        let beta_hat = r.beta_hat.finite().ok_or(Error::InfiniteBeta)?;
        let lat = p.lattice(Boundary::Dirichlet)?;
        let kern = CovarianceKernel::new(lat.clone(), p.a, p.j, r.beta_hat)?;
        let slices = slice_count(beta_hat, setup.slices_per_unit);
        let dtau = beta_hat / slices as f64;
        let pot = PotentialParams::new(r.b_m, r.delta_m, p.d)?;
        let bc_of = |v: &[f64]| BoundaryCondition::Tempered(FieldConfiguration::constant(n, slices, dtau, v));
        let mx = GibbsModel::new(&kern, slices, OneSitePotential::Standard(pot), r.h_hat.clone(), bc_of(xi))?;
        let me = GibbsModel::new(&kern, slices, OneSitePotential::Standard(pot), r.h_hat.clone(), bc_of(eta))?;
        let l0 = n / 2;
        let slice0 = match tau0 {
            Some(t) => Some(((t / dtau).round() as i64).rem_euclid(slices as i64) as usize),
            None => None,
        };
        let d = p.d;
        let rows_b = crn_sums(&[&mx, &me], cfg, 1, |_, phi, out| {
            out[0] = match slice0 {
                Some(s) => phi.get(l0, s, 0),
                None => (0..slices).map(|s| phi.values[(l0 * slices + s) * d]).sum::<f64>() / slices as f64,
            };
        });
        // pooled columns: [w1, w1², w1 f, w2, w2², w2 f]
        let flat: Vec<Vec<f64>> = rows_b.into_iter().map(|r| r.concat()).collect();
        let (gap, se) = jackknife(&flat, |s| s[2] / s[0] - s[5] / s[3]);
        let t = totals(&flat);
        rows.push(GapRow {
            n,
            site: l0,
            dist_to_boundary: lat.distance_to_boundary(l0),
            gap: EstimatorResult {
                mean: gap,
                stderr: se,
                n_samples: cfg.n_samples,
                seed: cfg.seed,
                effective_sample_size: kish_ess(t[0], t[1]).min(kish_ess(t[3], t[4])),
            },
        });
    }
    Ok(rows)
}

/// <x_l(τ) x_l'(τ')> under the doubled-potential measure with frozen y.
pub fn doubled_measure_correlation(
    kern: &CovarianceKernel,
    slices: usize,
    params: PotentialParams,
    y: FieldConfiguration,
    obs: &Observable,
    cfg: &McConfig,
) -> Result<EstimatorResult> {
    let bc = match kern.boundary() {
        Boundary::Periodic => BoundaryCondition::Periodic,
        Boundary::Dirichlet => BoundaryCondition::Zero,
    };
    let model = GibbsModel::new(kern, slices, OneSitePotential::Doubled { params, y }, vec![0.0; params.d], bc)?;
    let bound = model.bind(obs)?;
    expectation(&bound, &model, cfg)
}

/// Convenience constructor for a model from physical parameters.
pub fn model_from_params(p: &ModelParams, boundary: Boundary, slices_per_unit: usize, bc: BoundaryCondition) -> Result<GibbsModel> {
    let r = rescale_on(p, boundary)?;
    let beta_hat = match r.beta_hat {
        Beta::Finite(b) => b,
        Beta::Infinite => return Err(Error::InfiniteBeta),
    };
    let kern = CovarianceKernel::new(p.lattice(boundary)?, p.a, p.j, r.beta_hat)?;
    let pot = PotentialParams::new(r.b_m, r.delta_m, p.d)?;
    GibbsModel::new(&kern, slice_count(beta_hat, slices_per_unit), OneSitePotential::Standard(pot), r.h_hat, bc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::Lattice;

    fn free_chain(n: usize, beta: f64, b: f64) -> (CovarianceKernel, GibbsModel) {
        let kern = CovarianceKernel::new(Lattice::chain(n, Boundary::Periodic).unwrap(), 1.0, 0.25, Beta::Finite(beta)).unwrap();
        let pot = PotentialParams::new(b, 1.0, 1).unwrap();
        let model = GibbsModel::new(&kern, 8, OneSitePotential::Standard(pot), vec![0.0], BoundaryCondition::Periodic).unwrap();
        (kern, model)
    }

    #[test]
    fn free_two_point_matches_kernel() {
        let (kern, model) = free_chain(4, 2.0, 0.0);
        let cfg = McConfig::new(40_000, 1);
        for (l, r, l2, r2) in [(0, 0, 0, 0), (0, 0, 1, 3), (2, 5, 3, 1)] {
            let obs = Observable::two_point(l, r as f64 * 0.25, l2, r2 as f64 * 0.25);
            let est = expectation(&model.bind(&obs).unwrap(), &model, &cfg).unwrap();
            let exact = kern.covariance_closed(l, l2, (r as f64 - r2 as f64) * 0.25);
            assert!(est.agrees_with(exact, 4.0), "{est:?} vs {exact}");
            let a = model.bind(&Observable::product(vec![obs.factors[0]])).unwrap();
            let b = model.bind(&Observable::product(vec![obs.factors[1]])).unwrap();
            let k = truncated_two_point(&a, &b, &model, &cfg);
            assert!(k.agrees_with(exact, 4.0));
        }
    }

    #[test]
    fn odd_moments_vanish() {
        let (_, model) = free_chain(4, 2.0, 0.8);
        let cfg = McConfig::new(20_000, 9);
        for obs in ["phi[0,0,0]", "phi[1,0.5,0]*phi[1,0.5,0]*phi[2,1.25,0]"] {
            let e = expectation(&model.bind(&Observable::parse(obs).unwrap()).unwrap(), &model, &cfg).unwrap();
            assert!(e.agrees_with(0.0, 4.0), "{obs}: {e:?}");
        }
    }

    #[test]
    fn energy_constant_cancels() {
        let (_, mut model) = free_chain(4, 2.0, 0.5);
        let cfg = McConfig::new(5_000, 2);
        let obs = model.bind(&Observable::parse("phi[0,0,0]*phi[1,0,0]").unwrap()).unwrap();
        let a = expectation(&obs, &model, &cfg).unwrap();
        model.energy_offset = 3.7;
        let b = expectation(&obs, &model, &cfg).unwrap();
        assert!((a.mean - b.mean).abs() < 1e-12 * a.mean.abs().max(1.0));
    }

    #[test]
    fn reweight_and_mcmc_agree() {
        let kern = CovarianceKernel::new(Lattice::single_site(), 1.0, 0.0, Beta::Finite(2.0)).unwrap();
        let pot = PotentialParams::new(0.5, 1.0, 1).unwrap();
        let model = GibbsModel::new(&kern, 16, OneSitePotential::Standard(pot), vec![0.0], BoundaryCondition::Zero).unwrap();
        let rw = McConfig::new(40_000, 5);
        let mc = McConfig { backend: Backend::Mcmc { rho: 0.5 }, ..McConfig::new(40_000, 6) };
        for obs in ["phi[0,0,0]*phi[0,0,0]", "phi[0,0,0]*phi[0,0.5,0]", "phi[0,0,0]*phi[0,1,0]"] {
            let b = model.bind(&Observable::parse(obs).unwrap()).unwrap();
            let x = expectation(&b, &model, &rw).unwrap();
            let y = expectation(&b, &model, &mc).unwrap();
            assert!(x.z_score(y.mean, y.stderr) < 4.0, "{obs}: {x:?} {y:?}");
        }
    }

    #[test]
    fn field_shifts_mean() {
        // b = 0: <phi> = -h dtau sum_t G(t), the rectangle rule for -h / a
        let kern = CovarianceKernel::new(Lattice::chain(2, Boundary::Periodic).unwrap(), 2.0, 0.25, Beta::Finite(1.0)).unwrap();
        let pot = PotentialParams::new(0.0, 1.0, 1).unwrap();
        let model = GibbsModel::new(&kern, 8, OneSitePotential::Standard(pot), vec![0.3], BoundaryCondition::Periodic).unwrap();
        let (lam, dt) = (2f64.sqrt(), 0.125);
        let exact = -0.3 * dt / (2.0 * lam) / (0.5 * lam * dt).tanh();
        assert!((exact + 0.15).abs() < 1e-3);
        for v in &model.mean_field().values {
            assert!((v - exact).abs() < 1e-12);
        }
    }

    #[test]
    fn clustering_fit_on_exact_profile() {
        let kern = CovarianceKernel::new(Lattice::chain(32, Boundary::Periodic).unwrap(), 1.0, 1.0, Beta::Finite(1.0)).unwrap();
        let prof = harmonic_profile(&kern, 6);
        let fit = clustering_fit(&prof, 6, 1.0).unwrap();
        assert!(fit.rate > 0.0);
        let mut noisy = prof.clone();
        noisy[3].stderr = noisy[3].mean;
        assert!(matches!(clustering_fit(&noisy, 6, 1.0), Err(Error::FitRefused(_))));
    }

    #[test]
    fn gap_symmetries() {
        let mut p = ModelParams::default();
        p.b = 0.1;
        p.j = 1.0;
        p.beta = Beta::Finite(1.0);
        let setup = ScanSetup { params: p, slices_per_unit: 8 };
        let cfg = McConfig::new(4_000, 3);
        let same = uniqueness_gap(&setup, &[1.0], &[1.0], &[6], None, &cfg).unwrap();
        assert_eq!(same[0].gap.mean, 0.0);
        let plus = uniqueness_gap(&setup, &[1.0], &[0.0], &[6], None, &cfg).unwrap();
        let both = uniqueness_gap(&setup, &[1.0], &[-1.0], &[6], None, &cfg).unwrap();
        assert!(both[0].gap.z_score(2.0 * plus[0].gap.mean, 2.0 * plus[0].gap.stderr) < 4.0);
    }

    #[test]
    fn doubled_measure_symmetry() {
        let kern = CovarianceKernel::new(Lattice::chain(2, Boundary::Dirichlet).unwrap(), 1.0, 0.25, Beta::Finite(1.0)).unwrap();
        let params = PotentialParams::new(0.3, 1.0, 1).unwrap();
        let cfg = McConfig::new(20_000, 4);
        let obs = Observable::two_point(0, 0.0, 1, 0.25);
        let mut y = FieldConfiguration::zeros(2, 8, 1, 0.125);
        let zero = doubled_measure_correlation(&kern, 8, params, y.clone(), &obs, &cfg).unwrap();
        // y = 0 reduces to 2 b_m e^{-δ x²/4}
        let direct_pot = PotentialParams::new(0.6, 0.5, 1).unwrap();
        let direct = GibbsModel::new(&kern, 8, OneSitePotential::Standard(direct_pot), vec![0.0], BoundaryCondition::Zero).unwrap();
        let e = expectation(&direct.bind(&obs).unwrap(), &direct, &cfg).unwrap();
        assert!((zero.mean - e.mean).abs() < 1e-12);
        for (i, v) in y.values.iter_mut().enumerate() {
            *v = (i as f64).sin();
        }
        let plus = doubled_measure_correlation(&kern, 8, params, y.clone(), &obs, &cfg).unwrap();
        y.values.iter_mut().for_each(|v| *v = -*v);
        let minus = doubled_measure_correlation(&kern, 8, params, y, &obs, &cfg).unwrap();
        assert!((plus.mean - minus.mean).abs() < 1e-12);
    }
}
