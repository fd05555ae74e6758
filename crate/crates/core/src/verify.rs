//! Quick invariant suite behind `qcrystal verify`.
//!
//! Every check is small enough to finish in a few seconds; the long Monte
//! Carlo runs live in the acceptance test target.

use serde::Serialize;

use crate::cluster::{battle_federbush_sum, enumerate_trees, ClusterEngine};
use crate::config::RunConfig;
use crate::covariance::CovarianceKernel;
use crate::error::Result;
use crate::estimator::{expectation_fn, model_from_params, McConfig};
use crate::lattice::{Boundary, ExpansionMode, Lattice};
use crate::oracle::{thermal_correlation, OracleSpec};
use crate::params::{mass_threshold, thresholds, Beta, ModelParams};
use crate::potential::{derivative_bound_check, gaussian_representation_check, BoundRow};
use crate::sampler::{BoundaryCondition, GaussianSampler, Observable};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyRow {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn row(name: &str, passed: bool, detail: String) -> VerifyRow {
    VerifyRow { name: name.into(), passed, detail }
}

/// Errors inside a check count as failures of that check.
fn guarded(name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> VerifyRow {
    match f() {
        Ok((ok, detail)) => row(name, ok, detail),
        Err(e) => row(name, false, format!("error: {e}")),
    }
}

fn covariance_identity() -> Result<(bool, String)> {
    let kern = CovarianceKernel::new(Lattice::chain(8, Boundary::Periodic)?, 1.0, 0.25, Beta::Finite(2.0))?;
    let mut worst: f64 = 0.0;
    for j in [0, 1, 4] {
        for tau in [0.1, 0.7, 1.3] {
            let m = kern.covariance_matsubara(0, j, tau, 50_000)?;
            let c = kern.covariance_closed(0, j, tau);
            worst = worst.max(((m - c) / c).abs());
        }
    }
    Ok((worst <= 1e-6, format!("max relative error {worst:.2e}")))
}

fn integrated_covariance() -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for a in [0.5, 1.0, 4.0] {
        for j in [0.0, 0.5] {
            let kern = CovarianceKernel::new(Lattice::chain(8, Boundary::Periodic)?, a, j, Beta::Finite(2.0))?;
            worst = worst.max((kern.integrated_covariance_cg()? - 1.0 / a).abs());
        }
    }
    Ok((worst <= 1e-8, format!("max |C_G - 1/a| {worst:.2e}")))
}

fn threshold_arithmetic() -> Result<(bool, String)> {
    let p = ModelParams { b: 1.0, a: 1.0, d: 8, h: vec![0.0; 8], ..ModelParams::default() };
    let t = thresholds(&p, 0.0)?;
    let direct = mass_threshold(1.0, 1.0, 1.0, 0.0, 8)?;
    let ok = (t.m_star - 0.015625).abs() < 1e-15
        && (direct - t.m_star).abs() < 1e-15
        && (t.beta_star - t.m_star.powf(0.25)).abs() < 1e-12;
    Ok((ok, format!("m_star {} beta_star {}", t.m_star, t.beta_star)))
}

/// Derivative bounds for orders up to `n_max` on `grid`, for each (b_m, δ_m).
pub fn potential_bounds(n_max: usize, grid: &[f64], couplings: &[(f64, f64)]) -> Vec<VerifyRow> {
    couplings
        .iter()
        .map(|&(b, d)| {
            let name = format!("derivative bounds b_m={b} delta_m={d}");
            guarded(&name, || {
                Ok(match derivative_bound_check(n_max, grid, b, d)? {
                    Ok(rows) => {
                        let worst = |f: fn(&BoundRow) -> f64| rows.iter().map(f).filter(|v| !v.is_nan()).fold(0.0, f64::max);
                        (
                            true,
                            format!(
                                "n <= {n_max}: worst ratios {:.3} (derivative) {:.3} (exponential)",
                                worst(|r| r.derivative_ratio),
                                worst(|r| r.exponential_ratio)
                            ),
                        )
                    }
                    Err(v) => (false, format!("{:?} bound fails at n={} x={}: {:.3e} > {:.3e}", v.kind, v.n, v.x, v.lhs, v.rhs)),
                })
            })
        })
        .collect()
}

/// x from -5 to 5 in steps of 0.01.
pub fn default_bound_grid() -> Vec<f64> {
    (0..=1000).map(|i| -5.0 + 0.01 * i as f64).collect()
}

fn gaussian_representation() -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for q in [0.0, 0.5, 1.3, 2.0] {
        worst = worst.max(gaussian_representation_check(&[q], 0.5, 1.0, 64)?.abs_diff);
    }
    Ok((worst < 1e-10, format!("max deviation {worst:.2e}")))
}

fn trees_and_sums() -> Result<(bool, String)> {
    // (n-1)! increasing trees on n labelled vertices
    let counts: Vec<usize> = (1..=6).map(|n| enumerate_trees(n).map(|t| t.len())).collect::<Result<_>>()?;
    let mut ok = counts == [1, 1, 2, 6, 24, 120];
    let mut worst: f64 = 0.0;
    for n in 2..=7 {
        let s = battle_federbush_sum(n)?;
        ok &= s.holds;
        worst = worst.max(s.ratio_to_bound);
        if n == 3 {
            ok &= s.sum == "2";
        }
    }
    Ok((ok, format!("tree counts {counts:?}, max sum/4^n {worst:.3}")))
}

fn sampler_harmonic() -> Result<(bool, String)> {
    let kern = CovarianceKernel::new(Lattice::chain(2, Boundary::Periodic)?, 1.0, 0.25, Beta::Finite(2.0))?;
    let sampler = GaussianSampler::new(&kern, 8)?;
    let n = 20_000;
    let mut stream = sampler.stream(11, 0);
    let mut buf = vec![0.0; 16];
    let (mut s00, mut s01) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for _ in 0..n {
        stream.next_component(&mut buf);
        s00.push(buf[0] * buf[0]);
        s01.push(buf[0] * buf[8 + 3]);
    }
    let dtau = sampler.dtau();
    let mut worst: f64 = 0.0;
    for (xs, exact) in [(&s00, kern.covariance_closed(0, 0, 0.0)), (&s01, kern.covariance_closed(0, 1, 3.0 * dtau))] {
        let m = crate::stats::mean(xs);
        let se = (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n * (n - 1)) as f64).sqrt();
        worst = worst.max((m - exact).abs() / se);
    }
    Ok((worst <= 5.0, format!("max deviation {worst:.2} stderr")))
}

fn oracle_harmonic() -> Result<(bool, String)> {
    let beta: f64 = 2.0;
    let taus = [0.0, 0.5, 1.0];
    let vals = thermal_correlation(OracleSpec::single(1.0, 0.0, 1.0), beta, &taus, 0, 0)?;
    let mut worst: f64 = 0.0;
    for (t, v) in taus.iter().zip(&vals) {
        let exact = ((beta - t).exp() + t.exp()) / (2.0 * (beta.exp() - 1.0));
        worst = worst.max((v.value - exact).abs());
    }
    Ok((worst <= 1e-4, format!("max deviation {worst:.2e}")))
}

fn cluster_free_limit() -> Result<(bool, String)> {
    let kern = CovarianceKernel::new(Lattice::chain(2, Boundary::Periodic)?, 1.0, 0.25, Beta::Finite(2.0))?;
    let obs = Observable::two_point(0, 0.0, 0, 0.0);
    let engine = ClusterEngine::new(&kern, 8, 0.0, 1.0, ExpansionMode::LowTemperature, &obs)?;
    let rep = engine.truncated_expansion(2, &McConfig::new(2_000, 3))?;
    let order2 = rep.orders[1].contribution;
    Ok((order2 == 0.0, format!("order-2 contribution at b=0: {order2}")))
}

fn odd_box() -> Result<(bool, String)> {
    let msg = match Lattice::chain(5, Boundary::Periodic) {
        Ok(_) => return Ok((false, "odd periodic side accepted".into())),
        Err(e) => e.to_string(),
    };
    Ok((msg.contains("even"), msg))
}

/// h = 0 makes the field distribution even, so the mean of phi vanishes.
fn config_symmetry(cfg: &RunConfig) -> Result<(bool, String)> {
    cfg.validate()?;
    let p = &cfg.params;
    if p.h.iter().any(|&h| h != 0.0) || p.beta.is_infinite() {
        return Ok((true, "skipped (nonzero field or infinite beta)".into()));
    }
    let bc = match cfg.boundary {
        Boundary::Periodic => BoundaryCondition::Periodic,
        Boundary::Dirichlet => BoundaryCondition::Zero,
    };
    let model = model_from_params(p, cfg.boundary, cfg.slices_per_unit, bc)?;
    let r = expectation_fn(&model, &McConfig::new(cfg.samples.min(20_000), cfg.seed), |phi| phi.values[0])?;
    let z = r.mean.abs() / r.stderr;
    Ok((z <= 4.0, format!("<phi> = {:.2e} +- {:.1e} ({z:.2} stderr)", r.mean, r.stderr)))
}

/// The full suite on a configuration.
pub fn run_all(cfg: &RunConfig) -> Vec<VerifyRow> {
    let mut rows = vec![
        guarded("config validates", || cfg.validate().map(|_| (true, "ok".into()))),
        guarded("odd periodic box rejected", odd_box),
        guarded("Matsubara vs closed covariance", covariance_identity),
        guarded("integrated covariance equals 1/a", integrated_covariance),
        guarded("threshold arithmetic", threshold_arithmetic),
        guarded("Gaussian representation of the potential", gaussian_representation),
        guarded("tree counts and Battle-Federbush sums", trees_and_sums),
        guarded("harmonic sampler covariance", sampler_harmonic),
        guarded("oracle harmonic limit", oracle_harmonic),
        guarded("cluster expansion free limit", cluster_free_limit),
    ];
    rows.extend(potential_bounds(10, &default_bound_grid(), &[(0.1, 1.0), (0.5, 2.0), (0.9, 0.3)]));
    rows.push(guarded("h = 0 odd moment vanishes", || config_symmetry(cfg)));
    rows
}

/// Fixed-width pass/fail table.
pub fn format_table(rows: &[VerifyRow]) -> String {
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(0);
    let mut s = String::new();
    for r in rows {
        s += &format!("{} {:width$}  {}\n", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    s
}
