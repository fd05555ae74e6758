//! Rod-set cluster expansion on the imaginary-time grid (d = 1).
//!
//! Order n: for every ordered sequence of distinct rods Y_2..Y_n outside
//! Y_1 = B x Δ_B and every tree η,
//!
//!   K = ∫ ds f(η; s) E_{X_n, s}[ Π_l Δ_{η(l), l} (A e^{-U(X_n)}) ],
//!   F = Z(X_n^c) / Z,
//!
//! with Δ_{p,q} = Σ_{t∈Y_p, t'∈Y_q} C(t,t') ∂_t ∂_t' on grid variables and
//! U = Δτ Σ V̂. Summed over all orders this reproduces <A> exactly.
//!
//! The interpolated Gaussian on X_n is sampled as the superposition
//! Σ_i √λ_i ψ^(i) over the block-diagonal terms of its convex
//! decomposition, each ψ^(i) built from independent full-field draws. The
//! draws do not depend on s, b_m or the rod sequence, so all of these are
//! compared with common random numbers.

use nalgebra::DMatrix;
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::{CovarianceKernel, Interpolation};
use crate::error::{invalid, Error, Result};
use crate::estimator::McConfig;
use crate::lattice::{rod_partition, ExpansionMode, RodPartition};
use crate::quadrature::gauss_legendre_unit;
use crate::sampler::Observable;
use crate::stats::{jackknife, linear_fit, EstimatorResult};

pub const MAX_TREE_ORDER: usize = 8;
pub const MAX_BF_ORDER: usize = 7;
/// Gauss-Legendre nodes per interpolation parameter.
pub const GL_NODES: usize = 8;
const MAX_GRID_POINTS: usize = 256;
const MAX_DERIV: usize = 8;

/// Highest expansion order evaluated in each mode.
pub fn order_cap(mode: ExpansionMode) -> usize {
    match mode {
        ExpansionMode::LowTemperature => 3,
        ExpansionMode::HighTemperature => 4,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tree {
    pub n: usize,
    /// parent[l - 2] = η(l) for l = 2..=n, vertices numbered from 1.
    pub parent: Vec<usize>,
}

impl Tree {
    pub fn eta(&self, l: usize) -> usize {
        self.parent[l - 2]
    }

    /// d_η(k) for k = 1..=n; index 0 unused.
    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n + 1];
        for &p in &self.parent {
            c[p] += 1;
        }
        c
    }

    /// η_k = 1 + #{2 <= l < k : η(l) = η(k)}.
    pub fn branch_index(&self, k: usize) -> usize {
        1 + (2..k).filter(|&l| self.eta(l) == self.eta(k)).count()
    }

    /// Number of derivatives landing in Y_k: d_η(k), plus one for k >= 2.
    pub fn degrees(&self) -> Vec<usize> {
        let mut d = self.counts();
        for k in 2..=self.n {
            d[k] += 1;
        }
        d
    }

    /// Power of s_k in f(η; s) for k = 1..n-1; index 0 unused.
    pub fn s_exponents(&self) -> Vec<usize> {
        let mut e = vec![0; self.n.max(1)];
        for m in 2..=self.n {
            for k in self.eta(m)..=m.saturating_sub(2) {
                if k >= 1 && k + 2 <= m {
                    e[k] += 1;
                }
            }
        }
        e
    }

    /// Children of each vertex, 0-based.
    fn children(&self) -> Vec<Vec<usize>> {
        let mut ch = vec![Vec::new(); self.n];
        for l in 2..=self.n {
            ch[self.eta(l) - 1].push(l - 1);
        }
        ch
    }
}

/// All (n-1)! maps η with η(l) ∈ {1, ..., l-1}.
pub fn enumerate_trees(n: usize) -> Result<Vec<Tree>> {
    if n == 0 {
        return Err(invalid("n", "tree order starts at 1"));
    }
    if n > MAX_TREE_ORDER {
        return Err(Error::TooLarge { what: "tree order", value: n, max: MAX_TREE_ORDER });
    }
    let mut out = vec![Vec::new()];
    for l in 2..=n {
        out = out
            .into_iter()
            .flat_map(|p: Vec<usize>| {
                (1..l).map(move |e| {
                    let mut q = p.clone();
                    q.push(e);
                    q
                })
            })
            .collect();
    }
    Ok(out.into_iter().map(|parent| Tree { n, parent }).collect())
}

/// f(η; s) = Π_{m=2..n} s_{η(m)} ... s_{m-2}; s has n-1 entries.
pub fn f_factor(tree: &Tree, s: &[f64]) -> Result<f64> {
    if s.len() != tree.n - 1 {
        return Err(invalid("s", format!("expected {} parameters, got {}", tree.n - 1, s.len())));
    }
    if s.iter().any(|x| !(0.0..=1.0).contains(x)) {
        return Err(invalid("s", "entries must lie in [0, 1]"));
    }
    Ok(f_factor_unchecked(&tree.s_exponents(), s))
}

fn f_factor_unchecked(exponents: &[usize], s: &[f64]) -> f64 {
    (1..exponents.len()).map(|k| s[k - 1].powi(exponents[k] as i32)).product()
}

fn rational_string(r: &BigRational) -> String {
    if r.is_integer() { r.to_integer().to_string() } else { format!("{}/{}", r.numer(), r.denom()) }
}

fn big_factorial(n: usize) -> BigInt {
    (1..=n).fold(BigInt::one(), |acc, k| acc * BigInt::from(k))
}

/// Σ_η Π_p d_η(p)! ∫ f(η; s) ds and the same sum without the factorials.
pub fn battle_federbush_exact(n: usize) -> Result<(BigRational, BigRational)> {
    if n > MAX_BF_ORDER {
        return Err(Error::TooLarge { what: "Battle-Federbush order", value: n, max: MAX_BF_ORDER });
    }
    let mut with_fact = BigRational::zero();
    let mut plain = BigRational::zero();
    for tree in enumerate_trees(n)? {
        let integral = tree
            .s_exponents()
            .iter()
            .skip(1)
            .fold(BigRational::one(), |acc, &e| acc / BigRational::from_integer(BigInt::from(e + 1)));
        let fact = tree.counts().iter().skip(1).fold(BigInt::one(), |acc, &c| acc * big_factorial(c));
        with_fact += &integral * BigRational::from_integer(fact);
        plain += integral;
    }
    Ok((with_fact, plain))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BattleFederbushSum {
    pub n: usize,
    pub sum: String,
    pub sum_f64: f64,
    pub bound: String,
    pub holds: bool,
    pub ratio_to_bound: f64,
    /// Variant without the factorials, compared with e^n.
    pub factorial_free: String,
    pub factorial_free_f64: f64,
    pub e_bound_holds: bool,
}

pub fn battle_federbush_sum(n: usize) -> Result<BattleFederbushSum> {
    let (sum, plain) = battle_federbush_exact(n)?;
    let bound = BigInt::from(4).pow(n as u32);
    let bound_r = BigRational::from_integer(bound.clone());
    // a partial Taylor sum is a rational lower bound for e^n
    let mut e_lower = BigRational::zero();
    let mut term = BigRational::one();
    for k in 0..60 {
        e_lower += &term;
        term = term * BigRational::from_integer(BigInt::from(n)) / BigRational::from_integer(BigInt::from(k + 1));
    }
    Ok(BattleFederbushSum {
        n,
        sum: rational_string(&sum),
        sum_f64: sum.to_f64().unwrap_or(f64::NAN),
        bound: bound.to_string(),
        holds: sum <= bound_r,
        ratio_to_bound: (&sum / &bound_r).to_f64().unwrap_or(f64::NAN),
        factorial_free: rational_string(&plain),
        factorial_free_f64: plain.to_f64().unwrap_or(f64::NAN),
        e_bound_holds: plain <= e_lower,
    })
}

/// Per-point factor g(x) = x^k e^{Δτ X(x)}, X = -b_m e^{-δ_m x²/2}: fills
/// out[c] with g^{(c)}(x) / e^{Δτ X(x)} for c = 0..=max_deg and returns Δτ X(x).
fn point_table(x: f64, power: u32, dtau: f64, b_m: f64, delta_m: f64, max_deg: usize, out: &mut [f64; MAX_DERIV]) -> f64 {
    let g = (-0.25 * delta_m * x * x).exp();
    let mut f = [0.0; MAX_DERIV];
    let mut i_prev = -b_m * g;
    f[0] = dtau * g * i_prev;
    if max_deg >= 1 {
        let mut i_cur = b_m * delta_m * x * g;
        f[1] = dtau * g * i_cur;
        for k in 2..=max_deg {
            let next = -delta_m * x * i_cur - (k - 1) as f64 * delta_m * i_prev;
            i_prev = i_cur;
            i_cur = next;
            f[k] = dtau * g * i_cur;
        }
    }
    // derivatives of e^{f} / e^{f}
    let mut e = [0.0; MAX_DERIV];
    e[0] = 1.0;
    for j in 1..=max_deg {
        let mut acc = 0.0;
        let mut binom = 1.0;
        for i in 0..j {
            acc += binom * f[i + 1] * e[j - 1 - i];
            binom = binom * (j - 1 - i) as f64 / (i + 1) as f64;
        }
        e[j] = acc;
    }
    if power == 0 {
        out[..=max_deg].copy_from_slice(&e[..=max_deg]);
    } else {
        // Leibniz rule with the monomial x^power
        for c in 0..=max_deg {
            let mut acc = 0.0;
            let mut binom = 1.0;
            for i in 0..=c.min(power as usize) {
                let falling: f64 = (0..i).map(|r| (power as usize - r) as f64).product();
                acc += binom * falling * x.powi(power as i32 - i as i32) * e[c - i];
                binom = binom * (c - i) as f64 / (i + 1) as f64;
            }
            out[c] = acc;
        }
    }
    f[0]
}

/// Σ_{t∈P, t'∈Q} C(t,t') ∂_t ∂_t' of Π_t g_t(φ_t) over `points`, where g_t
/// carries the monomial powers in `powers` and e^{-Δτ V̂}. P and Q are lists
/// of positions into `points`.
#[allow(clippy::too_many_arguments)]
pub fn delta_apply(
    phi: &[f64],
    powers: &[u32],
    cov: &DMatrix<f64>,
    p: &[usize],
    q: &[usize],
    dtau: f64,
    b_m: f64,
    delta_m: f64,
) -> f64 {
    let n = phi.len();
    let mut tables = vec![[0.0; MAX_DERIV]; n];
    let mut log_base = 0.0;
    for t in 0..n {
        log_base += point_table(phi[t], powers[t], dtau, b_m, delta_m, 2, &mut tables[t]);
    }
    let mut acc = 0.0;
    for &t in p {
        for &u in q {
            let others: f64 = (0..n).filter(|&r| r != t && r != u).map(|r| tables[r][0]).product();
            let d = if t == u { tables[t][2] } else { tables[t][1] * tables[u][1] };
            acc += cov[(t, u)] * d * others;
        }
    }
    acc * log_base.exp()
}

#[derive(Debug, Clone)]
struct Node {
    weight: f64,
    s: Vec<f64>,
    /// √λ per partition mask.
    sqrt_lambda: Vec<f64>,
    /// f(η; s) per tree.
    f: Vec<f64>,
}

/// Precomputed layout of one rod sequence Y_1..Y_n.
#[derive(Debug, Clone)]
struct Plan {
    order: usize,
    /// Grid points of X_n grouped by block.
    points: Vec<usize>,
    block_ranges: Vec<std::ops::Range<usize>>,
    /// Pool index of the draw feeding each local point, per mask.
    draw: Vec<Vec<usize>>,
    /// Rods in X_n^c.
    complement: Vec<usize>,
    cov: DMatrix<f64>,
    trees: Vec<Tree>,
    children: Vec<Vec<Vec<usize>>>,
    max_deg: usize,
    nodes: Vec<Node>,
}

/// Partition masks over `bonds` bonds; bit k set means bond k is open.
/// Returns, per mask, the block id of each of the bonds+1 blocks, and the pool
/// index of each (mask, block), with the all-open block first.
fn mask_layout(bonds: usize) -> (Vec<Vec<usize>>, Vec<Vec<usize>>, usize) {
    let masks = 1usize << bonds;
    let full = masks - 1;
    let mut block_id = Vec::with_capacity(masks);
    for m in 0..masks {
        let mut ids = vec![0; bonds + 1];
        for p in 1..=bonds {
            ids[p] = ids[p - 1] + usize::from(m & (1 << (p - 1)) == 0);
        }
        block_id.push(ids);
    }
    let mut pool = vec![Vec::new(); masks];
    pool[full] = vec![0];
    let mut next = 1;
    for m in 0..masks {
        if m == full {
            continue;
        }
        let nb = block_id[m][bonds] + 1;
        pool[m] = (next..next + nb).collect();
        next += nb;
    }
    (block_id, pool, next)
}

/// Mask of an interval partition of the blocks 0..=bonds.
fn ranges_to_mask(ranges: &[std::ops::Range<usize>], bonds: usize) -> usize {
    let mut mask = (1usize << bonds) - 1;
    for r in ranges {
        if r.end <= bonds {
            mask &= !(1 << (r.end - 1));
        }
    }
    mask
}

fn sqrt_lambdas(s: &[f64]) -> Result<Vec<f64>> {
    let bonds = s.len();
    let mut out = vec![0.0; 1 << bonds];
    for (w, ranges) in Interpolation::new(s.to_vec())?.convex_decomposition()? {
        out[ranges_to_mask(&ranges, bonds)] = w.sqrt();
    }
    Ok(out)
}

fn tensor_nodes(dim: usize) -> Vec<(f64, Vec<f64>)> {
    let (x, w) = gauss_legendre_unit(GL_NODES);
    let mut out = vec![(1.0, Vec::new())];
    for _ in 0..dim {
        out = out
            .into_iter()
            .flat_map(|(wt, s)| {
                x.iter().zip(&w).map(move |(xi, wi)| {
                    let mut s2 = s.clone();
                    s2.push(*xi);
                    (wt * wi, s2)
                })
            })
            .collect();
    }
    out
}

/// One term of the expansion with its error bar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderRow {
    pub order: usize,
    pub n_terms: usize,
    pub contribution: f64,
    pub contribution_stderr: f64,
    pub partial_sum: f64,
    pub residual: f64,
    pub residual_stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionReport {
    pub mode: ExpansionMode,
    pub direct: EstimatorResult,
    pub orders: Vec<OrderRow>,
    /// Every rod has been absorbed, so the sum is exact.
    pub complete: bool,
}

impl ExpansionReport {
    pub fn residuals_decrease(&self) -> bool {
        self.orders.windows(2).all(|w| w[1].residual.abs() < w[0].residual.abs())
    }

    /// Σ_{k>n} contribution_k, available once the expansion is complete.
    pub fn tail_residuals(&self) -> Option<Vec<f64>> {
        self.complete.then(|| {
            (0..self.orders.len()).map(|n| self.orders[n + 1..].iter().map(|r| r.contribution).sum()).collect()
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewtonLeibnizReport {
    pub direct: f64,
    pub factorized: f64,
    pub remainder_finite_difference: f64,
    pub remainder_delta: f64,
    /// direct - factorized - remainder, with jackknife errors.
    pub mismatch_finite_difference: (f64, f64),
    pub mismatch_delta: (f64, f64),
    pub remainder_difference: (f64, f64),
}

impl NewtonLeibnizReport {
    pub fn consistent(&self, sigmas: f64) -> bool {
        [self.mismatch_finite_difference, self.mismatch_delta, self.remainder_difference]
            .iter()
            .all(|(v, se)| v.abs() <= sigmas * se.max(1e-15))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub order: usize,
    pub slope: f64,
    pub slope_stderr: f64,
    pub contributions: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ClusterEngine {
    partition: RodPartition,
    slices: usize,
    dtau: f64,
    pub b_m: f64,
    pub delta_m: f64,
    cov: DMatrix<f64>,
    chol: DMatrix<f64>,
    rod_points: Vec<Vec<usize>>,
    y1: Vec<usize>,
    free: Vec<usize>,
    coeff: f64,
    powers: Vec<u32>,
    obs_points: Vec<usize>,
}

impl ClusterEngine {
    pub fn new(
        kern: &CovarianceKernel,
        slices: usize,
        b_m: f64,
        delta_m: f64,
        mode: ExpansionMode,
        observable: &Observable,
    ) -> Result<Self> {
        let beta = kern.beta_finite()?;
        if !(b_m >= 0.0 && delta_m >= 0.0) {
            return Err(invalid("b_m", "coupling and width must be nonnegative"));
        }
        let lat = kern.lattice();
        let n_sites = lat.n_sites();
        let n_points = n_sites * slices;
        if n_points > MAX_GRID_POINTS {
            return Err(Error::TooLarge { what: "cluster grid points", value: n_points, max: MAX_GRID_POINTS });
        }
        let partition = rod_partition(lat, beta, mode)?;
        let dtau = beta / slices as f64;
        let per_rod = slices / partition.rods_per_site;
        if per_rod * partition.rods_per_site != slices {
            return Err(invalid("slices", "each rod must hold a whole number of time slices"));
        }
        let bound = observable.bind(n_sites, slices, 1, dtau)?;
        if bound.idx.is_empty() {
            return Err(invalid("observable", "needs at least one field factor"));
        }
        let mut powers = vec![0u32; n_points];
        for &i in &bound.idx {
            powers[i] += 1;
        }
        let rod_of_point = |p: usize| partition.index(crate::lattice::Rod { site: p / slices, time_index: (p % slices) / per_rod });
        let rod_points: Vec<Vec<usize>> = (0..partition.len())
            .map(|r| {
                let rod = partition.rod(r);
                (0..per_rod).map(|k| rod.site * slices + rod.time_index * per_rod + k).collect()
            })
            .collect();
        // Y_1 = B x Δ_B
        let mut sites: Vec<usize> = bound.idx.iter().map(|p| p / slices).collect();
        sites.sort_unstable();
        sites.dedup();
        let mut times: Vec<usize> = bound.idx.iter().map(|&p| partition.rod(rod_of_point(p)).time_index).collect();
        times.sort_unstable();
        times.dedup();
        let mut y1: Vec<usize> = sites
            .iter()
            .flat_map(|&site| times.iter().map(move |&t| (site, t)))
            .map(|(site, time_index)| partition.index(crate::lattice::Rod { site, time_index }))
            .collect();
        y1.sort_unstable();
        let free: Vec<usize> = (0..partition.len()).filter(|r| !y1.contains(r)).collect();

        let cov = DMatrix::from_fn(n_points, n_points, |p, q| {
            kern.covariance_closed(p / slices, q / slices, (p % slices) as f64 * dtau - (q % slices) as f64 * dtau)
        });
        let chol = cov
            .clone()
            .cholesky()
            .ok_or(Error::NegativeSpectralWeight { mode: 0, value: f64::NAN })?
            .l();
        let mut obs_points: Vec<usize> = bound.idx.clone();
        obs_points.sort_unstable();
        obs_points.dedup();
        Ok(ClusterEngine {
            partition,
            slices,
            dtau,
            b_m,
            delta_m,
            cov,
            chol,
            rod_points,
            y1,
            free,
            coeff: bound.coeff,
            powers,
            obs_points,
        })
    }

    /// Same instance with another coupling b_m.
    pub fn with_coupling(&self, b_m: f64) -> Self {
        ClusterEngine { b_m, ..self.clone() }
    }

    pub fn partition(&self) -> &RodPartition {
        &self.partition
    }

    pub fn dtau(&self) -> f64 {
        self.dtau
    }

    pub fn slices(&self) -> usize {
        self.slices
    }

    pub fn y1(&self) -> &[usize] {
        &self.y1
    }

    pub fn free_rods(&self) -> &[usize] {
        &self.free
    }

    /// n_T: the order at which every rod has been absorbed.
    pub fn max_order(&self) -> usize {
        1 + self.free.len()
    }

    /// Ordered sequences of n-1 distinct rods outside Y_1.
    pub fn sequences(&self, order: usize) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new()];
        for _ in 1..order {
            out = out
                .into_iter()
                .flat_map(|seq: Vec<usize>| {
                    self.free
                        .iter()
                        .filter(|r| !seq.contains(r))
                        .map(|&r| {
                            let mut s2 = seq.clone();
                            s2.push(r);
                            s2
                        })
                        .collect::<Vec<_>>()
                })
                .collect();
        }
        out
    }

    fn check_order(&self, order: usize) -> Result<()> {
        let cap = order_cap(self.partition.mode);
        if order == 0 || order > cap {
            return Err(Error::TooLarge { what: "expansion order", value: order, max: cap });
        }
        if order > self.max_order() {
            return Err(invalid("order", format!("only {} rods remain outside Y_1", self.free.len())));
        }
        Ok(())
    }

    fn plan(&self, seq: &[usize], trees: Vec<Tree>) -> Result<Plan> {
        let order = seq.len() + 1;
        let mut points = Vec::new();
        let mut block_ranges = Vec::new();
        let blocks: Vec<Vec<usize>> = std::iter::once(self.y1.iter().flat_map(|&r| self.rod_points[r].clone()).collect())
            .chain(seq.iter().map(|&r| self.rod_points[r].clone()))
            .collect();
        for b in &blocks {
            let start = points.len();
            points.extend_from_slice(b);
            block_ranges.push(start..points.len());
        }
        let bonds = order - 1;
        let (block_id, pool, _) = mask_layout(bonds);
        let draw: Vec<Vec<usize>> = (0..1usize << bonds)
            .map(|m| {
                let mut v = vec![0; points.len()];
                for (blk, range) in block_ranges.iter().enumerate() {
                    for i in range.clone() {
                        v[i] = pool[m][block_id[m][blk]];
                    }
                }
                v
            })
            .collect();
        let in_x: Vec<usize> = self.y1.iter().chain(seq).copied().collect();
        let complement = (0..self.partition.len()).filter(|r| !in_x.contains(r)).collect();
        let cov = DMatrix::from_fn(points.len(), points.len(), |i, j| self.cov[(points[i], points[j])]);
        let max_deg = trees.iter().flat_map(|t| t.degrees().into_iter().skip(1)).max().unwrap_or(0);
        let exps: Vec<Vec<usize>> = trees.iter().map(|t| t.s_exponents()).collect();
        let nodes = if bonds == 0 {
            vec![Node { weight: 1.0, s: Vec::new(), sqrt_lambda: vec![1.0], f: vec![1.0; trees.len()] }]
        } else {
            tensor_nodes(bonds)
                .into_iter()
                .map(|(weight, s)| {
                    let f = exps.iter().map(|e| f_factor_unchecked(e, &s)).collect();
                    Ok(Node { weight, sqrt_lambda: sqrt_lambdas(&s)?, s, f })
                })
                .collect::<Result<Vec<_>>>()?
        };
        let children = trees.iter().map(|t| t.children()).collect();
        Ok(Plan { order, points, block_ranges, draw, complement, cov, trees, children, max_deg, nodes })
    }

    fn pool_size(plans: &[Plan]) -> usize {
        plans.iter().map(|p| mask_layout(p.order - 1).2).max().unwrap_or(1).max(1)
    }

    fn fill_pool(&self, rng: &mut ChaCha8Rng, pool: &mut [Vec<f64>], z: &mut [f64]) {
        let n = self.cov.nrows();
        for d in pool.iter_mut() {
            for v in z.iter_mut() {
                *v = StandardNormal.sample(rng);
            }
            for i in 0..n {
                let mut acc = 0.0;
                for k in 0..=i {
                    acc += self.chol[(i, k)] * z[k];
                }
                d[i] = acc;
            }
        }
    }

    fn vhat(&self, x: f64) -> f64 {
        self.b_m * (-0.5 * self.delta_m * x * x).exp()
    }

    fn observable_value(&self, phi: &[f64]) -> f64 {
        self.coeff * self.obs_points.iter().map(|&p| phi[p].powi(self.powers[p] as i32)).product::<f64>()
    }

    fn field_at(plan: &Plan, sqrt_lambda: &[f64], pool: &[Vec<f64>], out: &mut [f64]) {
        for (i, &p) in plan.points.iter().enumerate() {
            let mut acc = 0.0;
            for (m, &w) in sqrt_lambda.iter().enumerate() {
                if w != 0.0 {
                    acc += w * pool[plan.draw[m][i]][p];
                }
            }
            out[i] = acc;
        }
    }

    /// Π_l Δ_{η(l),l} (A e^{-U(X_n)}) at the local field `phi`, for every tree.
    fn tree_values(&self, plan: &Plan, phi: &[f64], scratch: &mut Scratch, out: &mut [f64]) {
        let n = plan.points.len();
        scratch.tables.resize(n, [0.0; MAX_DERIV]);
        let mut log_base = 0.0;
        for i in 0..n {
            log_base += point_table(
                phi[i],
                self.powers[plan.points[i]],
                self.dtau,
                self.b_m,
                self.delta_m,
                plan.max_deg,
                &mut scratch.tables[i],
            );
        }
        let base = self.coeff * log_base.exp();
        for (ti, children) in plan.children.iter().enumerate() {
            out[ti] = base * dp_root(plan, children, &scratch.tables, &mut scratch.dp);
        }
    }

    /// Per-batch additive statistics:
    /// [count, Σ e^{-U(T)}, Σ A e^{-U(T)}, then per plan Σ K, Σ e^{-U(X^c)},
    /// then per plan and tree Σ K_tree, then `extra` columns].
    fn batch_sums<E>(&self, plans: &[Plan], cfg: &McConfig, stream_offset: u64, extra_width: usize, extra: E) -> Result<Vec<Vec<f64>>>
    where
        E: Fn(&[Vec<f64>], &mut Scratch, &mut [f64]) + Sync,
    {
        if cfg.n_samples < cfg.batches || cfg.batches < 2 {
            return Err(invalid("samples", "need at least two batches and one sample per batch"));
        }
        let n_trees: usize = plans.iter().map(|p| p.trees.len()).sum();
        let width = 3 + 2 * plans.len() + n_trees + extra_width;
        let pool_size = Self::pool_size(plans);
        let n_points = self.cov.nrows();
        let per_batch = cfg.n_samples / cfg.batches;
        let sums: Vec<Vec<f64>> = (0..cfg.batches)
            .into_par_iter()
            .map(|b| {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream(stream_offset + b as u64);
                let mut pool = vec![vec![0.0; n_points]; pool_size];
                let mut z = vec![0.0; n_points];
                let mut acc = vec![0.0; width];
                let mut scratch = Scratch::default();
                let mut phi = vec![0.0; n_points];
                let mut vals = vec![0.0; 16];
                let mut extra_out = vec![0.0; extra_width];
                let mut ksum: Vec<f64> = Vec::new();
                let mut u_rod = vec![0.0; self.rod_points.len()];
                for _ in 0..per_batch {
                    self.fill_pool(&mut rng, &mut pool, &mut z);
                    let base = &pool[0];
                    for (u, pts) in u_rod.iter_mut().zip(&self.rod_points) {
                        *u = self.dtau * pts.iter().map(|&p| self.vhat(base[p])).sum::<f64>();
                    }
                    let u_total: f64 = u_rod.iter().sum();
                    let a = self.observable_value(base);
                    acc[0] += 1.0;
                    acc[1] += (-u_total).exp();
                    acc[2] += a * (-u_total).exp();
                    let mut col = 3 + 2 * plans.len();
                    for (pi, plan) in plans.iter().enumerate() {
                        let u_c: f64 = plan.complement.iter().map(|&r| u_rod[r]).sum();
                        acc[3 + 2 * pi + 1] += (-u_c).exp();
                        let nt = plan.trees.len();
                        if plan.order == 1 {
                            let u_x = u_total - u_c;
                            let k = a * (-u_x).exp();
                            acc[3 + 2 * pi] += k;
                            acc[col] += k;
                        } else {
                            vals.resize(nt, 0.0);
                            ksum.clear();
                            ksum.resize(nt, 0.0);
                            for node in &plan.nodes {
                                Self::field_at(plan, &node.sqrt_lambda, &pool, &mut phi);
                                self.tree_values(plan, &phi[..plan.points.len()], &mut scratch, &mut vals);
                                for t in 0..nt {
                                    ksum[t] += node.weight * node.f[t] * vals[t];
                                }
                            }
                            for t in 0..nt {
                                acc[3 + 2 * pi] += ksum[t];
                                acc[col + t] += ksum[t];
                            }
                        }
                        col += nt;
                    }
                    if extra_width > 0 {
                        extra(&pool, &mut scratch, &mut extra_out);
                        for (a, e) in acc[col..].iter_mut().zip(&extra_out) {
                            *a += e;
                        }
                    }
                }
                acc
            })
            .collect();
        Ok(sums)
    }

    fn plans_up_to(&self, n_max: usize) -> Result<Vec<Plan>> {
        let mut plans = Vec::new();
        for order in 1..=n_max {
            self.check_order(order)?;
            let trees = enumerate_trees(order)?;
            for seq in self.sequences(order) {
                plans.push(self.plan(&seq, trees.clone())?);
            }
        }
        Ok(plans)
    }

    /// E over the interpolated measure of Δ(η, Ȳ)(A e^{-U(X_n)}), integrated
    /// against f(η; s): the K factor of one (tree, sequence) pair.
    pub fn cluster_term(&self, tree: &Tree, seq: &[usize], cfg: &McConfig) -> Result<EstimatorResult> {
        let order = seq.len() + 1;
        self.check_order(order)?;
        if tree.n != order {
            return Err(invalid("tree", "tree order must match the sequence length plus one"));
        }
        if seq.iter().any(|r| !self.free.contains(r)) || (1..seq.len()).any(|i| seq[..i].contains(&seq[i])) {
            return Err(invalid("sequence", "rods must be distinct and lie outside Y_1"));
        }
        let plan = self.plan(seq, vec![tree.clone()])?;
        let sums = self.batch_sums(std::slice::from_ref(&plan), cfg, 0, 0, |_, _, _| {})?;
        let (mean, stderr) = jackknife(&sums, |s| s[3] / s[0]);
        Ok(EstimatorResult { mean, stderr, n_samples: cfg.n_samples, seed: cfg.seed, effective_sample_size: cfg.n_samples as f64 })
    }

    /// Z(X^c) / Z for the rods in `complement`, with common random numbers.
    pub fn ratio_f(&self, complement: &[usize], cfg: &McConfig) -> Result<EstimatorResult> {
        if complement.iter().any(|&r| r >= self.partition.len()) {
            return Err(invalid("complement", "rod index out of range"));
        }
        let rods = complement.to_vec();
        let sums = self.batch_sums(&[], cfg, 0, 1, |pool, _, out| {
            let u: f64 = rods
                .iter()
                .map(|&r| self.dtau * self.rod_points[r].iter().map(|&p| self.vhat(pool[0][p])).sum::<f64>())
                .sum();
            out[0] = (-u).exp();
        })?;
        let (mean, stderr) = jackknife(&sums, |s| s[3] / s[1]);
        Ok(EstimatorResult { mean, stderr, n_samples: cfg.n_samples, seed: cfg.seed, effective_sample_size: cfg.n_samples as f64 })
    }

    fn order_stats(plans: &[Plan], n_max: usize) -> impl Fn(&[f64], usize) -> f64 + '_ {
        move |s: &[f64], order: usize| {
            debug_assert!(order <= n_max);
            plans
                .iter()
                .enumerate()
                .filter(|(_, p)| p.order == order)
                .map(|(i, _)| (s[3 + 2 * i] / s[0]) * (s[4 + 2 * i] / s[1]))
                .sum::<f64>()
        }
    }

    /// Partial sums of the expansion through `n_max` and residuals against
    /// the direct estimate of <A> from the same samples.
    pub fn truncated_expansion(&self, n_max: usize, cfg: &McConfig) -> Result<ExpansionReport> {
        let plans = self.plans_up_to(n_max)?;
        let sums = self.batch_sums(&plans, cfg, 0, 0, |_, _, _| {})?;
        let term = Self::order_stats(&plans, n_max);
        let (direct, direct_se) = jackknife(&sums, |s| s[2] / s[1]);
        let mut orders = Vec::new();
        for order in 1..=n_max {
            let (c, c_se) = jackknife(&sums, |s| term(s, order));
            let (partial, _) = jackknife(&sums, |s| (1..=order).map(|k| term(s, k)).sum());
            let (res, res_se) = jackknife(&sums, |s| s[2] / s[1] - (1..=order).map(|k| term(s, k)).sum::<f64>());
            orders.push(OrderRow {
                order,
                n_terms: plans.iter().filter(|p| p.order == order).map(|p| p.trees.len()).sum(),
                contribution: c,
                contribution_stderr: c_se,
                partial_sum: partial,
                residual: res,
                residual_stderr: res_se,
            });
        }
        let direct = EstimatorResult {
            mean: direct,
            stderr: direct_se,
            n_samples: cfg.n_samples,
            seed: cfg.seed,
            effective_sample_size: cfg.n_samples as f64,
        };
        Ok(ExpansionReport { mode: self.partition.mode, direct, orders, complete: n_max == self.max_order() })
    }

    /// As `truncated_expansion`, but order n runs on its own independent
    /// samples, `samples[n - 1]` of them. The order-1 run carries the direct
    /// estimate, so its residual is a common-random-number difference; the
    /// errors of higher orders add in quadrature.
    pub fn truncated_expansion_split(&self, samples: &[usize], cfg: &McConfig) -> Result<ExpansionReport> {
        const STREAM_STRIDE: u64 = 1 << 32;
        let n_max = samples.len();
        let mut orders = Vec::new();
        let mut direct = None;
        let (mut residual, mut residual_var, mut partial) = (0.0, 0.0, 0.0);
        for order in 1..=n_max {
            self.check_order(order)?;
            let trees = enumerate_trees(order)?;
            let plans: Vec<Plan> =
                self.sequences(order).iter().map(|seq| self.plan(seq, trees.clone())).collect::<Result<_>>()?;
            let run = McConfig { n_samples: samples[order - 1], ..*cfg };
            let sums = self.batch_sums(&plans, &run, (order as u64 - 1) * STREAM_STRIDE, 0, |_, _, _| {})?;
            let term = Self::order_stats(&plans, order);
            let (c, c_se) = jackknife(&sums, |s| term(s, order));
            if order == 1 {
                let (d, d_se) = jackknife(&sums, |s| s[2] / s[1]);
                direct = Some(EstimatorResult {
                    mean: d,
                    stderr: d_se,
                    n_samples: run.n_samples,
                    seed: cfg.seed,
                    effective_sample_size: run.n_samples as f64,
                });
                let (r, r_se) = jackknife(&sums, |s| s[2] / s[1] - term(s, 1));
                residual = r;
                residual_var = r_se * r_se;
            } else {
                residual -= c;
                residual_var += c_se * c_se;
            }
            partial += c;
            orders.push(OrderRow {
                order,
                n_terms: plans.iter().map(|p| p.trees.len()).sum(),
                contribution: c,
                contribution_stderr: c_se,
                partial_sum: partial,
                residual,
                residual_stderr: residual_var.sqrt(),
            });
        }
        let direct = direct.ok_or_else(|| invalid("samples", "need at least one order"))?;
        Ok(ExpansionReport { mode: self.partition.mode, direct, orders, complete: n_max == self.max_order() })
    }

    /// Log-log slopes of |order-n contribution| against b_m, with the same
    /// random numbers at every b_m and jackknife errors on the slopes.
    pub fn order_scaling(&self, b_values: &[f64], n_max: usize, cfg: &McConfig) -> Result<Vec<ScalingRow>> {
        if b_values.len() < 2 || b_values.iter().any(|&b| !(b > 0.0)) {
            return Err(invalid("b_values", "need at least two positive couplings"));
        }
        let plans = self.plans_up_to(n_max)?;
        let per_b: Vec<Vec<Vec<f64>>> = b_values
            .iter()
            .map(|&b| self.with_coupling(b).batch_sums(&plans, cfg, 0, 0, |_, _, _| {}))
            .collect::<Result<_>>()?;
        let width = per_b[0][0].len();
        let joined: Vec<Vec<f64>> = (0..cfg.batches).map(|k| per_b.iter().flat_map(|s| s[k].clone()).collect()).collect();
        let term = Self::order_stats(&plans, n_max);
        let logb: Vec<f64> = b_values.iter().map(|b| b.ln()).collect();
        let mut rows = Vec::new();
        for order in 1..=n_max {
            let slope = |s: &[f64]| {
                let ys: Vec<f64> = (0..b_values.len()).map(|i| term(&s[i * width..(i + 1) * width], order).abs().ln()).collect();
                linear_fit(&logb, &ys).slope
            };
            let (sl, se) = jackknife(&joined, slope);
            let total: Vec<f64> = joined.iter().fold(vec![0.0; joined[0].len()], |mut acc, s| {
                acc.iter_mut().zip(s).for_each(|(a, v)| *a += v);
                acc
            });
            let contributions = (0..b_values.len()).map(|i| term(&total[i * width..(i + 1) * width], order)).collect();
            rows.push(ScalingRow { order, slope: sl, slope_stderr: se, contributions });
        }
        Ok(rows)
    }

    /// First step of the expansion on a two-rod instance, with the remainder
    /// evaluated by pathwise finite differences in s and by the Δ form.
    pub fn newton_leibniz(&self, cfg: &McConfig) -> Result<NewtonLeibnizReport> {
        if self.partition.len() != 2 || self.y1.len() != 1 {
            return Err(invalid("instance", "the Newton-Leibniz check needs exactly two rods with Y_1 one of them"));
        }
        let plans = self.plans_up_to(2)?;
        let fd_plan = plans[1].clone();
        let h = 1e-4;
        let steps: Vec<(f64, Vec<f64>, Vec<f64>)> = fd_plan
            .nodes
            .iter()
            .map(|node| {
                let s = node.s[0];
                Ok((node.weight, sqrt_lambdas(&[s + h])?, sqrt_lambdas(&[s - h])?))
            })
            .collect::<Result<_>>()?;
        let g = |pool: &[Vec<f64>], lam: &[f64], phi: &mut [f64]| {
            Self::field_at(&fd_plan, lam, pool, phi);
            let mut full = vec![0.0; self.cov.nrows()];
            for (i, &p) in fd_plan.points.iter().enumerate() {
                full[p] = phi[i];
            }
            let u: f64 = full.iter().map(|&x| self.dtau * self.vhat(x)).sum();
            self.observable_value(&full) * (-u).exp()
        };
        let sums = self.batch_sums(&plans, cfg, 0, 1, |pool, _, out| {
            let mut phi = vec![0.0; fd_plan.points.len()];
            out[0] = steps
                .iter()
                .map(|(w, up, down)| w * (g(pool, up, &mut phi) - g(pool, down, &mut phi)) / (2.0 * h))
                .sum();
        })?;
        // columns: plan 0 (order 1) at 3, 4; plan 1 (order 2) at 5, 6; trees 7, 8; fd at 9
        let direct = |s: &[f64]| s[2] / s[1];
        let fact = |s: &[f64]| (s[3] / s[0]) * (s[4] / s[1]);
        let r_delta = |s: &[f64]| (s[5] / s[0]) * (s[6] / s[1]);
        let r_fd = |s: &[f64]| (s[9] / s[0]) / (s[1] / s[0]);
        Ok(NewtonLeibnizReport {
            direct: jackknife(&sums, direct).0,
            factorized: jackknife(&sums, fact).0,
            remainder_finite_difference: jackknife(&sums, r_fd).0,
            remainder_delta: jackknife(&sums, r_delta).0,
            mismatch_finite_difference: jackknife(&sums, |s| direct(s) - fact(s) - r_fd(s)),
            mismatch_delta: jackknife(&sums, |s| direct(s) - fact(s) - r_delta(s)),
            remainder_difference: jackknife(&sums, |s| r_fd(s) - r_delta(s)),
        })
    }
}

#[derive(Default)]
struct Scratch {
    tables: Vec<[f64; MAX_DERIV]>,
    dp: DpBuf,
}

#[derive(Default)]
struct DpBuf {
    messages: Vec<Vec<f64>>,
    values: Vec<f64>,
    counts: Vec<usize>,
    choice: Vec<usize>,
    parent_of: Vec<usize>,
}

/// Tree dynamic programme: the message of block c is, for each point u of
/// its parent block, Σ_{t∈Y_c} C(u,t) (value of the subtree of c with the
/// parent edge ending at t).
fn dp_root(plan: &Plan, children: &[Vec<usize>], tables: &[[f64; MAX_DERIV]], buf: &mut DpBuf) -> f64 {
    let nb = plan.block_ranges.len();
    buf.messages.resize(nb, Vec::new());
    buf.parent_of.clear();
    buf.parent_of.resize(nb, usize::MAX);
    for (p, ch) in children.iter().enumerate() {
        for &c in ch {
            buf.parent_of[c] = p;
        }
    }
    // children carry larger indices than their parents
    for c in (1..nb).rev() {
        let range = plan.block_ranges[c].clone();
        buf.values.clear();
        for t in range.clone() {
            let v = block_value(plan, c, Some(t), children, tables, &buf.messages, &mut buf.counts, &mut buf.choice);
            buf.values.push(v);
        }
        let prange = plan.block_ranges[buf.parent_of[c]].clone();
        let mut msg = std::mem::take(&mut buf.messages[c]);
        msg.clear();
        for u in prange {
            msg.push(range.clone().zip(&buf.values).map(|(t, v)| plan.cov[(u, t)] * v).sum());
        }
        buf.messages[c] = msg;
    }
    block_value(plan, 0, None, children, tables, &buf.messages, &mut buf.counts, &mut buf.choice)
}

#[allow(clippy::too_many_arguments)]
fn block_value(
    plan: &Plan,
    p: usize,
    parent_pt: Option<usize>,
    children: &[Vec<usize>],
    tables: &[[f64; MAX_DERIV]],
    messages: &[Vec<f64>],
    counts: &mut Vec<usize>,
    choice: &mut Vec<usize>,
) -> f64 {
    let range = plan.block_ranges[p].clone();
    let len = range.len();
    let ch = &children[p];
    let k = ch.len();
    counts.clear();
    counts.resize(len, 0);
    choice.clear();
    choice.resize(k, 0);
    let mut total = 0.0;
    loop {
        counts.iter_mut().for_each(|c| *c = 0);
        if let Some(t) = parent_pt {
            counts[t - range.start] += 1;
        }
        let mut w = 1.0;
        for (ci, &c) in ch.iter().enumerate() {
            counts[choice[ci]] += 1;
            w *= messages[c][choice[ci]];
        }
        if w != 0.0 {
            let prod: f64 = range.clone().zip(counts.iter()).map(|(t, &c)| tables[t][c]).product();
            total += w * prod;
        }
        // odometer over child endpoints
        let mut i = 0;
        while i < k {
            choice[i] += 1;
            if choice[i] < len {
                break;
            }
            choice[i] = 0;
            i += 1;
        }
        if i == k {
            break;
        }
    }
    total
}
