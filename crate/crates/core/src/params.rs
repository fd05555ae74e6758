//! Physical parameters, the light-mass rescaling and the closed-form
//! thresholds (mass, field and temperature).
//!
//! Units are hbar = k_B = 1 throughout.

use serde::{Deserialize, Serialize};

use crate::covariance::CovarianceKernel;
use crate::error::{invalid, Result};
use crate::lattice::{Boundary, Lattice};

/// Inverse temperature; `Infinite` is the zero-temperature marker.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Beta {
    Finite(f64),
    Infinite,
}

impl Beta {
    pub fn finite(self) -> Option<f64> {
        match self {
            Beta::Finite(b) => Some(b),
            Beta::Infinite => None,
        }
    }

    pub fn is_infinite(self) -> bool {
        matches!(self, Beta::Infinite)
    }

    fn scale(self, factor: f64) -> Beta {
        match self {
            Beta::Finite(b) => Beta::Finite(b * factor),
            Beta::Infinite => Beta::Infinite,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Particle mass.
    pub m: f64,
    /// One-site harmonic constant.
    pub a: f64,
    /// Anharmonic amplitude.
    pub b: f64,
    /// Anharmonic width.
    pub delta: f64,
    /// Nearest-neighbour coupling.
    pub j: f64,
    pub beta: Beta,
    /// External field, one entry per displacement component.
    pub h: Vec<f64>,
    /// Displacement dimension.
    pub d: usize,
    /// Lattice dimension.
    pub nu: usize,
    /// Box side lengths, all even.
    pub dims: Vec<usize>,
}

impl Default for ModelParams {
    fn default() -> Self {
        ModelParams {
            m: 1.0,
            a: 1.0,
            b: 0.5,
            delta: 1.0,
            j: 0.25,
            beta: Beta::Finite(2.0),
            h: vec![0.0],
            d: 1,
            nu: 1,
            dims: vec![2],
        }
    }
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.m > 0.0) {
            return Err(invalid("m", format!("mass must be positive, got {}", self.m)));
        }
        if !(self.a > 0.0) {
            return Err(invalid("a", format!("must be positive, got {}", self.a)));
        }
        if !(self.b >= 0.0) {
            return Err(invalid("b", format!("must be nonnegative, got {}", self.b)));
        }
        if !(self.delta >= 0.0) {
            return Err(invalid("delta", format!("must be nonnegative, got {}", self.delta)));
        }
        // J = 0 is kept for isolated sites
        if !(self.j >= 0.0) {
            return Err(invalid("J", format!("must be nonnegative, got {}", self.j)));
        }
        if let Beta::Finite(b) = self.beta {
            if !(b > 0.0) {
                return Err(invalid("beta", format!("must be positive, got {b}")));
            }
        }
        if self.d == 0 {
            return Err(invalid("d", "displacement dimension must be at least 1"));
        }
        if self.h.len() != self.d {
            return Err(invalid("h", format!("expected {} components, got {}", self.d, self.h.len())));
        }
        if self.nu == 0 || self.dims.len() != self.nu {
            return Err(invalid("dims", format!("expected {} side lengths, got {}", self.nu, self.dims.len())));
        }
        Ok(())
    }

    /// Validates the parameters together with the box; periodic boxes need even sides.
    pub fn lattice(&self, boundary: Boundary) -> Result<Lattice> {
        self.validate()?;
        Lattice::new(self.dims.clone(), boundary)
    }

    pub fn h_norm(&self) -> f64 {
        self.h.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Parameters after the substitution q = alpha x, alpha = m^{-1/4}.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RescaledParams {
    pub alpha: f64,
    pub b_m: f64,
    pub delta_m: f64,
    pub beta_hat: Beta,
    pub h_hat: Vec<f64>,
    /// Rescaled additive constant C_m = (d/2) Tr B on the periodic box.
    pub c_m: f64,
}

impl RescaledParams {
    /// Inverse of [`rescale`]: recovers (m, b, delta, beta, h).
    pub fn unscale(&self) -> (f64, f64, f64, Beta, Vec<f64>) {
        let m = self.alpha.powi(-4);
        let sqrt_m = m.sqrt();
        (
            m,
            self.b_m / sqrt_m,
            self.delta_m * sqrt_m,
            self.beta_hat.scale(sqrt_m),
            self.h_hat.iter().map(|x| x / self.alpha).collect(),
        )
    }
}

pub fn rescale(p: &ModelParams) -> Result<RescaledParams> {
    rescale_on(p, Boundary::Periodic)
}

/// As [`rescale`], with C_m taken from the spectrum of B on the given box.
pub fn rescale_on(p: &ModelParams, boundary: Boundary) -> Result<RescaledParams> {
    let lat = p.lattice(boundary)?;
    let alpha = p.m.powf(-0.25);
    let sqrt_m = p.m.sqrt();
    let trace_b: f64 = CovarianceKernel::new(lat, p.a, p.j, Beta::Infinite)?
        .modes()
        .iter()
        .map(|mode| mode.eps.sqrt())
        .sum();
    Ok(RescaledParams {
        alpha,
        b_m: p.b * sqrt_m,
        delta_m: p.delta / sqrt_m,
        beta_hat: p.beta.scale(1.0 / sqrt_m),
        h_hat: p.h.iter().map(|x| x * alpha).collect(),
        c_m: 0.5 * p.d as f64 * trace_b,
    })
}

fn positive(name: &'static str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(name, format!("must be positive and finite, got {v}")))
    }
}

/// 64 b sqrt(a) C_G e^c, the common base of the mass and temperature thresholds.
fn threshold_base(b: f64, a: f64, c_g: f64, c: f64) -> f64 {
    64.0 * b * a.sqrt() * c_g * c.exp()
}

/// Light-mass threshold m* = (64 b sqrt(a) C_G e^c)^{-8/d}.
pub fn mass_threshold(b: f64, a: f64, c_g: f64, c: f64, d: usize) -> Result<f64> {
    positive("b", b)?;
    positive("a", a)?;
    positive("C_G", c_g)?;
    if d == 0 {
        return Err(invalid("d", "must be at least 1"));
    }
    Ok(threshold_base(b, a, c_g, c).powf(-8.0 / d as f64))
}

/// Small parameter of the expansion, eps(m) = 64 b sqrt(a) C_G m^{d/8}.
pub fn epsilon_of_m(b: f64, a: f64, c_g: f64, m: f64, d: usize) -> Result<f64> {
    positive("b", b)?;
    positive("a", a)?;
    positive("C_G", c_g)?;
    if !(m >= 0.0) {
        return Err(invalid("m", format!("must be nonnegative, got {m}")));
    }
    Ok(64.0 * b * a.sqrt() * c_g * m.powf(d as f64 / 8.0))
}

/// Threshold in the presence of an external field: min{m*, m* (|h| C_G e^{c+1})^{-4}}.
///
/// `h_norm = 0` makes the second branch unbounded, so the result is m*.
pub fn field_threshold(m_star: f64, h_norm: f64, c_g: f64, c: f64) -> Result<f64> {
    positive("m_star", m_star)?;
    if !(h_norm >= 0.0) {
        return Err(invalid("h_norm", format!("must be nonnegative, got {h_norm}")));
    }
    let x = h_norm * c_g * (c + 1.0).exp();
    if x <= 1.0 {
        return Ok(m_star);
    }
    Ok(m_star.min(m_star * x.powi(-4)))
}

/// High-temperature threshold beta* = (64 b sqrt(a) C_G e^c)^{-2/d}.
pub fn beta_threshold(b: f64, a: f64, c_g: f64, c: f64, d: usize) -> Result<f64> {
    positive("b", b)?;
    positive("a", a)?;
    positive("C_G", c_g)?;
    if d == 0 {
        return Err(invalid("d", "must be at least 1"));
    }
    Ok(threshold_base(b, a, c_g, c).powf(-2.0 / d as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub m_star: f64,
    pub beta_star: f64,
    pub m_star_h: f64,
    pub epsilon_m: f64,
    #[serde(rename = "C_G")]
    pub c_g: f64,
    pub c: f64,
}

/// All thresholds for a parameter set. C_G is the exact integrated
/// periodic covariance 1/a.
pub fn thresholds(p: &ModelParams, c: f64) -> Result<Thresholds> {
    p.validate()?;
    let c_g = 1.0 / p.a;
    let m_star = mass_threshold(p.b, p.a, c_g, c, p.d)?;
    Ok(Thresholds {
        m_star,
        beta_star: beta_threshold(p.b, p.a, c_g, c, p.d)?,
        m_star_h: field_threshold(m_star, p.h_norm(), c_g, c)?,
        epsilon_m: epsilon_of_m(p.b, p.a, c_g, p.m, p.d)?,
        c_g,
        c,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params(m: f64, b: f64, delta: f64, beta: f64) -> ModelParams {
        ModelParams { m, b, delta, beta: Beta::Finite(beta), ..Default::default() }
    }

    #[test]
    fn unit_mass_is_identity() {
        let r = rescale(&params(1.0, 0.5, 1.0, 2.0)).unwrap();
        assert_eq!(r.alpha, 1.0);
        assert_eq!(r.b_m, 0.5);
        assert_eq!(r.delta_m, 1.0);
        assert_eq!(r.beta_hat, Beta::Finite(2.0));
    }

    #[test]
    fn quarter_mass() {
        let r = rescale(&params(0.25, 2.0, 1.0, 3.0)).unwrap();
        assert_relative_eq!(r.b_m, 1.0, epsilon = 1e-15);
        assert_relative_eq!(r.delta_m, 2.0, epsilon = 1e-15);
        assert_relative_eq!(r.beta_hat.finite().unwrap(), 6.0, epsilon = 1e-15);
        assert_relative_eq!(r.alpha, 2f64.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn zero_temperature_marker_survives() {
        let mut p = params(0.3, 1.0, 1.0, 1.0);
        p.beta = Beta::Infinite;
        assert_eq!(rescale(&p).unwrap().beta_hat, Beta::Infinite);
    }

    #[test]
    fn rejects_bad_mass_and_odd_sides() {
        assert!(rescale(&params(0.0, 1.0, 1.0, 1.0)).is_err());
        let mut p = params(1.0, 1.0, 1.0, 1.0);
        p.dims = vec![3];
        let msg = rescale(&p).unwrap_err().to_string();
        assert!(msg.contains("even"), "{msg}");
    }

    #[test]
    fn c_m_is_half_trace_b() {
        // N = 2, a = 1, J = 0.25: eps in {1, 2}
        let r = rescale(&params(1.0, 0.5, 1.0, 2.0)).unwrap();
        assert_relative_eq!(r.c_m, 0.5 * (1.0 + 2f64.sqrt()), epsilon = 1e-14);
    }

    #[test]
    fn mass_threshold_examples() {
        let base_one_b = 1.0 / 64.0;
        assert_relative_eq!(mass_threshold(base_one_b, 1.0, 1.0, 0.0, 3).unwrap(), 1.0);
        assert_relative_eq!(mass_threshold(1.0, 1.0, 1.0, 0.0, 8).unwrap(), 0.015625, epsilon = 1e-15);
        assert_relative_eq!(mass_threshold(1.0, 1.0, 1.0, 0.0, 4).unwrap(), 64f64.powi(-2), epsilon = 1e-18);
        assert!(mass_threshold(0.0, 1.0, 1.0, 0.0, 4).is_err());
        assert!(mass_threshold(1.0, -1.0, 1.0, 0.0, 4).is_err());
    }

    #[test]
    fn epsilon_examples() {
        assert_eq!(epsilon_of_m(1.0, 1.0, 1.0, 0.0, 8).unwrap(), 0.0);
        assert_relative_eq!(epsilon_of_m(1.0, 1.0, 1.0, 1.0, 8).unwrap(), 64.0);
        let (b, a, cg, c, d) = (0.7, 2.0, 0.5, 1.3, 3);
        let m_star = mass_threshold(b, a, cg, c, d).unwrap();
        let eps = epsilon_of_m(b, a, cg, m_star, d).unwrap();
        assert_relative_eq!(eps * c.exp(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn field_threshold_examples() {
        let c = 0.0;
        let unit_h = 1.0 / (c + 1.0f64).exp();
        assert_eq!(field_threshold(0.1, 0.0, 1.0, c).unwrap(), 0.1);
        assert_relative_eq!(field_threshold(0.1, unit_h, 1.0, c).unwrap(), 0.1, epsilon = 1e-15);
        assert_relative_eq!(field_threshold(0.1, 2.0 * unit_h, 1.0, c).unwrap(), 0.1 / 16.0, epsilon = 1e-15);
    }

    #[test]
    fn beta_threshold_examples() {
        assert_relative_eq!(beta_threshold(1.0 / 64.0, 1.0, 1.0, 0.0, 5).unwrap(), 1.0);
        assert_relative_eq!(beta_threshold(1.0, 1.0, 1.0, 0.0, 2).unwrap(), 1.0 / 64.0, epsilon = 1e-15);
    }

    #[test]
    fn random_threshold_relations() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let b = rng.random_range(0.01..3.0);
            let a = rng.random_range(0.1..5.0);
            let cg = rng.random_range(0.1..5.0);
            let c = rng.random_range(-1.0..2.0);
            let d = rng.random_range(1..9usize);
            let m_star = mass_threshold(b, a, cg, c, d).unwrap();
            let beta_star = beta_threshold(b, a, cg, c, d).unwrap();
            assert_relative_eq!(beta_star.powi(4), m_star, max_relative = 1e-12);
            let m = m_star * rng.random_range(0.01..4.0);
            let eps = epsilon_of_m(b, a, cg, m, d).unwrap();
            assert_eq!(eps < (-c).exp(), m < m_star);
            let h = rng.random_range(0.0..3.0);
            let mh = field_threshold(m_star, h, cg, c).unwrap();
            assert!(mh <= m_star);
            assert_eq!(mh == m_star, h * cg * (c + 1.0).exp() <= 1.0);
        }
    }

    #[test]
    fn unscale_recovers_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let mut p = params(
                rng.random_range(0.001..4.0),
                rng.random_range(0.0..3.0),
                rng.random_range(0.0..3.0),
                rng.random_range(0.1..10.0),
            );
            p.h = vec![rng.random_range(-1.0..1.0)];
            let r = rescale(&p).unwrap();
            assert_relative_eq!(r.b_m * r.delta_m, p.b * p.delta, max_relative = 1e-13);
            let (m, b, delta, beta, h) = r.unscale();
            assert_relative_eq!(m, p.m, max_relative = 1e-13);
            assert_relative_eq!(b, p.b, max_relative = 1e-13);
            assert_relative_eq!(delta, p.delta, max_relative = 1e-13);
            assert_relative_eq!(beta.finite().unwrap(), p.beta.finite().unwrap(), max_relative = 1e-13);
            assert_relative_eq!(h[0], p.h[0], max_relative = 1e-13);
        }
    }
}
