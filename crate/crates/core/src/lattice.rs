//! Lattice boxes, the dual lattice and its dispersion, torus distances and
//! the rod decomposition of the space-time box.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Boundary {
    Periodic,
    Dirichlet,
}

/// Hypercubic box with nearest-neighbour bonds. Sites are numbered
/// row-major with coordinates `0..N_mu` on each axis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lattice {
    dims: Vec<usize>,
    boundary: Boundary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualMode {
    /// Momentum, k_mu = 2 pi n_mu / N_mu with n_mu in {-N_mu/2 + 1, ..., N_mu/2}.
    pub k: Vec<f64>,
    /// Integer labels n_mu of the momentum.
    pub n: Vec<i64>,
    pub eps: f64,
    pub lam: f64,
}

/// eps(k) = a + 4 J sum_mu sin^2(k_mu / 2).
pub fn dispersion(k: &[f64], a: f64, j: f64) -> f64 {
    a + 4.0 * j * k.iter().map(|&km| (0.5 * km).sin().powi(2)).sum::<f64>()
}

impl Lattice {
    pub fn new(dims: Vec<usize>, boundary: Boundary) -> Result<Self> {
        if dims.is_empty() {
            return Err(invalid("dims", "lattice dimension must be at least 1"));
        }
        for (axis, &n) in dims.iter().enumerate() {
            // only the torus needs N_mu / 2 to be an integer
            if n == 0 || (boundary == Boundary::Periodic && n % 2 != 0) {
                return Err(Error::OddBoxSide { axis: axis + 1, value: n });
            }
        }
        Ok(Lattice { dims, boundary })
    }

    /// One site with zero boundary; pair it with J = 0 for an isolated oscillator.
    pub fn single_site() -> Self {
        Lattice { dims: vec![1], boundary: Boundary::Dirichlet }
    }

    pub fn chain(n: usize, boundary: Boundary) -> Result<Self> {
        Lattice::new(vec![n], boundary)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn nu(&self) -> usize {
        self.dims.len()
    }

    pub fn boundary(&self) -> Boundary {
        self.boundary
    }

    pub fn with_boundary(&self, boundary: Boundary) -> Lattice {
        Lattice { dims: self.dims.clone(), boundary }
    }

    pub fn n_sites(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn coords(&self, site: usize) -> Vec<usize> {
        let mut rest = site;
        let mut c = vec![0; self.dims.len()];
        for axis in (0..self.dims.len()).rev() {
            c[axis] = rest % self.dims[axis];
            rest /= self.dims[axis];
        }
        c
    }

    pub fn site(&self, coords: &[usize]) -> usize {
        coords
            .iter()
            .zip(&self.dims)
            .fold(0, |acc, (&c, &n)| acc * n + c % n)
    }

    /// Nearest neighbours inside the box. Under periodic boundaries a site
    /// on an `N_mu = 2` axis sees the same neighbour twice.
    pub fn neighbors(&self, site: usize) -> Vec<usize> {
        let c = self.coords(site);
        let mut out = Vec::with_capacity(2 * self.nu());
        for axis in 0..self.nu() {
            let n = self.dims[axis];
            let x = c[axis];
            let candidates = [
                if x == 0 { None } else { Some(x - 1) },
                if x + 1 == n { None } else { Some(x + 1) },
            ];
            let wrapped = [n - 1, 0];
            for (cand, wrap) in candidates.into_iter().zip(wrapped) {
                let target = match (cand, self.boundary) {
                    (Some(t), _) => t,
                    (None, Boundary::Periodic) => wrap,
                    (None, Boundary::Dirichlet) => continue,
                };
                let mut cc = c.clone();
                cc[axis] = target;
                out.push(self.site(&cc));
            }
        }
        out
    }

    /// Number of bonds from `site` to sites outside a Dirichlet box.
    pub fn exterior_bonds(&self, site: usize) -> usize {
        if self.boundary == Boundary::Periodic {
            return 0;
        }
        let c = self.coords(site);
        c.iter()
            .zip(&self.dims)
            .map(|(&x, &n)| usize::from(x == 0) + usize::from(x == n - 1))
            .sum()
    }

    /// Graph distance: torus metric for periodic boxes, box metric otherwise.
    pub fn torus_distance(&self, i: usize, j: usize) -> usize {
        let (ci, cj) = (self.coords(i), self.coords(j));
        ci.iter()
            .zip(&cj)
            .zip(&self.dims)
            .map(|((&x, &y), &n)| {
                let d = x.abs_diff(y);
                match self.boundary {
                    Boundary::Periodic => d.min(n - d),
                    Boundary::Dirichlet => d,
                }
            })
            .sum()
    }

    /// Distance from a site to the outside of the box (1 for a face site).
    pub fn distance_to_boundary(&self, site: usize) -> usize {
        self.coords(site)
            .iter()
            .zip(&self.dims)
            .map(|(&x, &n)| (x + 1).min(n - x))
            .min()
            .unwrap_or(0)
    }

    /// The dual lattice with dispersion attached; periodic boxes only.
    pub fn dual_modes(&self, a: f64, j: f64) -> Result<Vec<DualMode>> {
        if self.boundary != Boundary::Periodic {
            return Err(Error::RequiresPeriodic);
        }
        let n_sites = self.n_sites();
        let mut modes = Vec::with_capacity(n_sites);
        for idx in 0..n_sites {
            let c = self.coords(idx);
            let n: Vec<i64> = c
                .iter()
                .zip(&self.dims)
                .map(|(&x, &nn)| {
                    let half = (nn / 2) as i64;
                    let x = x as i64;
                    // index 0..N-1 -> window -N/2+1 ..= N/2
                    if x <= half {
                        x
                    } else {
                        x - nn as i64
                    }
                })
                .collect();
            let k: Vec<f64> = n
                .iter()
                .zip(&self.dims)
                .map(|(&ni, &nn)| 2.0 * PI * ni as f64 / nn as f64)
                .collect();
            let eps = dispersion(&k, a, j);
            modes.push(DualMode { k, n, eps, lam: eps.sqrt() });
        }
        Ok(modes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExpansionMode {
    /// Unit-length rods (j, [tau, tau + 1]).
    LowTemperature,
    /// One rod per site spanning the whole time circle.
    HighTemperature,
}

/// Space-time cell (site, time interval).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Rod {
    pub site: usize,
    pub time_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RodPartition {
    pub mode: ExpansionMode,
    pub n_sites: usize,
    pub rods_per_site: usize,
    pub beta_hat: f64,
}

impl RodPartition {
    pub fn len(&self) -> usize {
        self.n_sites * self.rods_per_site
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rods(&self) -> impl Iterator<Item = Rod> + '_ {
        (0..self.n_sites).flat_map(move |site| {
            (0..self.rods_per_site).map(move |time_index| Rod { site, time_index })
        })
    }

    pub fn index(&self, rod: Rod) -> usize {
        rod.site * self.rods_per_site + rod.time_index
    }

    pub fn rod(&self, index: usize) -> Rod {
        Rod { site: index / self.rods_per_site, time_index: index % self.rods_per_site }
    }

    /// Time extent [start, end) of a rod in rescaled units.
    pub fn interval(&self, rod: Rod) -> (f64, f64) {
        match self.mode {
            ExpansionMode::LowTemperature => (rod.time_index as f64, rod.time_index as f64 + 1.0),
            ExpansionMode::HighTemperature => (0.0, self.beta_hat),
        }
    }

    /// Rod containing the space-time point (site, tau), tau in [0, beta_hat).
    pub fn locate(&self, site: usize, tau: f64) -> Rod {
        let time_index = match self.mode {
            ExpansionMode::LowTemperature => {
                (tau.rem_euclid(self.beta_hat).floor() as usize).min(self.rods_per_site - 1)
            }
            ExpansionMode::HighTemperature => 0,
        };
        Rod { site, time_index }
    }
}

pub fn rod_partition(lat: &Lattice, beta_hat: f64, mode: ExpansionMode) -> Result<RodPartition> {
    if !(beta_hat > 0.0) || !beta_hat.is_finite() {
        return Err(invalid("beta_hat", format!("must be positive and finite, got {beta_hat}")));
    }
    let rods_per_site = match mode {
        ExpansionMode::LowTemperature => {
            if (beta_hat - beta_hat.round()).abs() > 1e-12 {
                return Err(Error::NonIntegerBeta(beta_hat));
            }
            beta_hat.round() as usize
        }
        ExpansionMode::HighTemperature => 1,
    };
    Ok(RodPartition { mode, n_sites: lat.n_sites(), rods_per_site, beta_hat })
}
