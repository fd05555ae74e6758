//! Flat `key = value` run configuration.
//!
//! One assignment per line, `#` starts a comment. Keys:
//!
//! | key | meaning | default |
//! |---|---|---|
//! | `m`, `a`, `b`, `delta`, `J` | model parameters | 1, 1, 0.5, 1, 0.25 |
//! | `beta` | inverse temperature, number or `inf` | 2 |
//! | `h` | field components, comma separated; one value fills all d | 0 |
//! | `d`, `nu` | displacement and lattice dimension | 1, 1 |
//! | `dims` | box sides, comma separated; one value fills all nu | 2 |
//! | `boundary` | `periodic` or `dirichlet` | periodic |
//! | `c` | threshold constant | 1 |
//! | `slices_per_unit` | time slices per unit rescaled time | 16 |
//! | `matsubara_cutoff` | n_max of the frequency sum | 50000 |
//! | `samples`, `seed` | Monte Carlo budget and seed | 100000, 1 |
//! | `backend` | `reweight` or `mcmc` | reweight |
//! | `order`, `mode` | expansion order and `lowT` / `highT` | 3, lowT |
//! | `out` | output directory | unset |

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{Boundary, ExpansionMode};
use crate::params::{Beta, ModelParams};
use crate::sampler::DEFAULT_SLICES_PER_UNIT;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub params: ModelParams,
    pub boundary: Boundary,
    pub c: f64,
    pub slices_per_unit: usize,
    pub matsubara_cutoff: usize,
    pub samples: usize,
    pub seed: u64,
    pub backend: String,
    pub order: usize,
    pub mode: ExpansionMode,
    pub out: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            params: ModelParams::default(),
            boundary: Boundary::Periodic,
            c: 1.0,
            slices_per_unit: DEFAULT_SLICES_PER_UNIT,
            matsubara_cutoff: 50_000,
            samples: 100_000,
            seed: 1,
            backend: "reweight".into(),
            order: 3,
            mode: ExpansionMode::LowTemperature,
            out: None,
        }
    }
}

fn list<T: std::str::FromStr>(v: &str) -> std::result::Result<Vec<T>, String> {
    v.split(',').map(|x| x.trim().parse::<T>().map_err(|_| format!("cannot parse `{}`", x.trim()))).collect()
}

fn num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse::<T>().map_err(|_| format!("cannot parse `{v}`"))
}

pub fn parse_beta(v: &str) -> std::result::Result<Beta, String> {
    match v.to_ascii_lowercase().as_str() {
        "inf" | "infinity" => Ok(Beta::Infinite),
        _ => num::<f64>(v).map(Beta::Finite),
    }
}

pub fn parse_boundary(v: &str) -> std::result::Result<Boundary, String> {
    match v {
        "periodic" => Ok(Boundary::Periodic),
        "dirichlet" => Ok(Boundary::Dirichlet),
        _ => Err(format!("unknown boundary `{v}`")),
    }
}

pub fn parse_mode(v: &str) -> std::result::Result<ExpansionMode, String> {
    match v {
        "lowT" => Ok(ExpansionMode::LowTemperature),
        "highT" => Ok(ExpansionMode::HighTemperature),
        _ => Err(format!("unknown mode `{v}` (expected lowT or highT)")),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |reason: String| Error::Config { line: i + 1, reason };
            let (key, value) = line.split_once('=').ok_or_else(|| err("expected `key = value`".into()))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(err(format!("duplicate key `{key}`")));
            }
            cfg.set(key, value.trim()).map_err(err)?;
        }
        cfg.broadcast();
        Ok(cfg)
    }

    /// Applies `key=value` overrides on top of a parsed file; later entries win.
    /// Errors report the position of the override as the line.
    pub fn with_overrides(mut self, overrides: &[String]) -> Result<Self> {
        for (i, o) in overrides.iter().enumerate() {
            let err = |reason: String| Error::Config { line: i + 1, reason: format!("override `{o}`: {reason}") };
            let (key, value) = o.split_once('=').ok_or_else(|| err("expected `key=value`".into()))?;
            self.set(key.trim(), value.trim()).map_err(err)?;
        }
        self.broadcast();
        Ok(self)
    }

    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let p = &mut self.params;
        match key {
            "m" => num(value).map(|v| p.m = v),
            "a" => num(value).map(|v| p.a = v),
            "b" => num(value).map(|v| p.b = v),
            "delta" => num(value).map(|v| p.delta = v),
            "J" => num(value).map(|v| p.j = v),
            "beta" => parse_beta(value).map(|v| p.beta = v),
            "h" => list(value).map(|v| p.h = v),
            "d" => num(value).map(|v| p.d = v),
            "nu" => num(value).map(|v| p.nu = v),
            "dims" => list(value).map(|v| p.dims = v),
            "boundary" => parse_boundary(value).map(|v| self.boundary = v),
            "c" => num(value).map(|v| self.c = v),
            "slices_per_unit" => num(value).map(|v| self.slices_per_unit = v),
            "matsubara_cutoff" => num(value).map(|v| self.matsubara_cutoff = v),
            "samples" => num(value).map(|v| self.samples = v),
            "seed" => num(value).map(|v| self.seed = v),
            "backend" => match value {
                "reweight" | "mcmc" => {
                    self.backend = value.into();
                    Ok(())
                }
                _ => Err(format!("unknown backend `{value}`")),
            },
            "order" => num(value).map(|v| self.order = v),
            "mode" => parse_mode(value).map(|v| self.mode = v),
            "out" => {
                self.out = Some(value.into());
                Ok(())
            }
            _ => Err(format!("unknown key `{key}`")),
        }
    }

    /// A single `h` or `dims` entry stands for all components or axes. A
    /// uniform list of the wrong length (left over from an earlier
    /// broadcast) is resized the same way.
    pub fn broadcast(&mut self) {
        fn fill<T: Copy + PartialEq>(v: &mut Vec<T>, n: usize) {
            if !v.is_empty() && v.len() != n && n > 0 && v.iter().all(|x| *x == v[0]) {
                *v = vec![v[0]; n];
            }
        }
        let p = &mut self.params;
        fill(&mut p.h, p.d);
        fill(&mut p.dims, p.nu);
    }

    /// Model parameters and box, validated together.
    pub fn validate(&self) -> Result<()> {
        self.params.lattice(self.boundary)?;
        if self.slices_per_unit == 0 || self.samples == 0 {
            return Err(crate::error::invalid("config", "slices_per_unit and samples must be positive"));
        }
        Ok(())
    }

    /// Inverse of `parse` for the keys it understands.
    pub fn to_text(&self) -> String {
        let p = &self.params;
        let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let beta = match p.beta {
            Beta::Finite(b) => b.to_string(),
            Beta::Infinite => "inf".into(),
        };
        let mut s = format!(
            "m = {}\na = {}\nb = {}\ndelta = {}\nJ = {}\nbeta = {}\nh = {}\nd = {}\nnu = {}\ndims = {}\n",
            p.m,
            p.a,
            p.b,
            p.delta,
            p.j,
            beta,
            join(&p.h),
            p.d,
            p.nu,
            p.dims.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
        );
        s += &format!(
            "boundary = {}\nc = {}\nslices_per_unit = {}\nmatsubara_cutoff = {}\nsamples = {}\nseed = {}\nbackend = {}\norder = {}\nmode = {}\n",
            match self.boundary {
                Boundary::Periodic => "periodic",
                Boundary::Dirichlet => "dirichlet",
            },
            self.c,
            self.slices_per_unit,
            self.matsubara_cutoff,
            self.samples,
            self.seed,
            self.backend,
            self.order,
            match self.mode {
                ExpansionMode::LowTemperature => "lowT",
                ExpansionMode::HighTemperature => "highT",
            }
        );
        if let Some(out) = &self.out {
            s += &format!("out = {out}\n");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let text = "# instance\nm = 0.01\nb=0.5 # comment\nbeta = inf\nh = 0.1\ndims = 16\nmode = highT\nseed = 7\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.params.m, 0.01);
        assert_eq!(cfg.params.beta, Beta::Infinite);
        assert_eq!(cfg.params.dims, vec![16]);
        assert_eq!(cfg.mode, ExpansionMode::HighTemperature);
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
        let wide = RunConfig::parse("d = 3\nnu = 2\ndims = 4").unwrap();
        assert_eq!(wide.params.h, vec![0.0; 3]);
        assert_eq!(wide.params.dims, vec![4, 4]);
        let over = RunConfig::default().with_overrides(&["b=1".into(), "d=8".into()]).unwrap();
        assert_eq!((over.params.b, over.params.h.len()), (1.0, 8));
        let back = over.with_overrides(&["d=2".into()]).unwrap();
        assert_eq!(back.params.h, vec![0.0; 2]);
        assert!(RunConfig::default().with_overrides(&["bogus=1".into()]).is_err());
    }

    #[test]
    fn errors_name_the_line() {
        for (text, line) in [("m = 1\nfoo = 2", 2), ("m = x", 1), ("a = 1\n\nnoequals", 3), ("m = 1\nm = 2", 2)] {
            match RunConfig::parse(text) {
                Err(Error::Config { line: l, .. }) => assert_eq!(l, line, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn odd_periodic_box_is_rejected() {
        let cfg = RunConfig::parse("dims = 5").unwrap();
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("even"), "{msg}");
        assert!(RunConfig::parse("dims = 5\nboundary = dirichlet").unwrap().validate().is_ok());
    }
}
