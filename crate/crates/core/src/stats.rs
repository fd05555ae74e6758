//! Estimator bookkeeping: batch means, jackknife, autocorrelation times and
//! least-squares fits.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorResult {
    pub mean: f64,
    pub stderr: f64,
    #[serde(rename = "n")]
    pub n_samples: usize,
    pub seed: u64,
    #[serde(rename = "ess")]
    pub effective_sample_size: f64,
}

impl EstimatorResult {
    /// |self - other| in units of the combined standard error.
    pub fn z_score(&self, other_mean: f64, other_stderr: f64) -> f64 {
        let s = (self.stderr.powi(2) + other_stderr.powi(2)).sqrt();
        if s == 0.0 {
            if self.mean == other_mean { 0.0 } else { f64::INFINITY }
        } else {
            (self.mean - other_mean).abs() / s
        }
    }

    pub fn agrees_with(&self, value: f64, sigmas: f64) -> bool {
        self.z_score(value, 0.0) <= sigmas
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Standard error of the mean of (approximately independent) batch values.
pub fn batch_stderr(batches: &[f64]) -> f64 {
    let k = batches.len();
    if k < 2 {
        return f64::NAN;
    }
    let m = mean(batches);
    let var = batches.iter().map(|b| (b - m).powi(2)).sum::<f64>() / (k - 1) as f64;
    (var / k as f64).sqrt()
}

/// Jackknife over batches for a statistic computed from pooled batch sums.
///
/// `sums[i]` holds the additive sufficient statistics of batch i; `stat`
/// maps pooled sums to the estimate.
pub fn jackknife<F>(sums: &[Vec<f64>], stat: F) -> (f64, f64)
where
    F: Fn(&[f64]) -> f64,
{
    let k = sums.len();
    let width = sums[0].len();
    let mut total = vec![0.0; width];
    for s in sums {
        for (t, v) in total.iter_mut().zip(s) {
            *t += v;
        }
    }
    let full = stat(&total);
    let leave_one: Vec<f64> = sums
        .iter()
        .map(|s| {
            let reduced: Vec<f64> = total.iter().zip(s).map(|(t, v)| t - v).collect();
            stat(&reduced)
        })
        .collect();
    let lm = mean(&leave_one);
    let var = leave_one.iter().map(|x| (x - lm).powi(2)).sum::<f64>() * (k - 1) as f64 / k as f64;
    (full, var.sqrt())
}

/// Integrated autocorrelation time with Geyer's initial positive sequence
/// truncation, normalized so that iid samples give 1/2 and ESS = n / (2 tau).
pub fn integrated_autocorrelation_time(chain: &[f64]) -> f64 {
    let n = chain.len();
    if n < 4 {
        return 0.5;
    }
    let m = mean(chain);
    let c0 = chain.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64;
    if c0 == 0.0 {
        return 0.5;
    }
    let rho = |lag: usize| {
        chain[..n - lag]
            .iter()
            .zip(&chain[lag..])
            .map(|(x, y)| (x - m) * (y - m))
            .sum::<f64>()
            / (n as f64 * c0)
    };
    // Geyer: sum pairs Gamma_k = rho(2k) + rho(2k+1) while positive.
    let mut tau = -0.5;
    let mut k = 0;
    while 2 * k + 1 < n {
        let gamma = rho(2 * k) + rho(2 * k + 1);
        if gamma <= 0.0 {
            break;
        }
        tau += gamma;
        k += 1;
    }
    tau.max(0.5)
}

/// Kish effective sample size of importance weights.
pub fn kish_ess(sum_w: f64, sum_w2: f64) -> f64 {
    if sum_w2 == 0.0 { 0.0 } else { sum_w * sum_w / sum_w2 }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub residuals: Vec<f64>,
    pub r_squared: f64,
}

/// Ordinary least squares y = intercept + slope x.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> LinearFit {
    let mx = mean(xs);
    let my = mean(ys);
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residuals: Vec<f64> = xs.iter().zip(ys).map(|(x, y)| y - intercept - slope * x).collect();
    let ss_res: f64 = residuals.iter().map(|r| r * r).sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    LinearFit {
        slope,
        intercept,
        residuals,
        r_squared: if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot },
    }
}

/// Weighted least squares with known standard errors on y; also returns
/// the standard errors of slope and intercept.
pub fn weighted_linear_fit(xs: &[f64], ys: &[f64], sigmas: &[f64]) -> (LinearFit, f64, f64) {
    let w: Vec<f64> = sigmas.iter().map(|s| 1.0 / (s * s)).collect();
    let sw: f64 = w.iter().sum();
    let mx = xs.iter().zip(&w).map(|(x, w)| x * w).sum::<f64>() / sw;
    let my = ys.iter().zip(&w).map(|(y, w)| y * w).sum::<f64>() / sw;
    let sxx: f64 = xs.iter().zip(&w).map(|(x, w)| w * (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).zip(&w).map(|((x, y), w)| w * (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residuals: Vec<f64> = xs.iter().zip(ys).map(|(x, y)| y - intercept - slope * x).collect();
    let ss_res: f64 = residuals.iter().zip(&w).map(|(r, w)| w * r * r).sum();
    let ss_tot: f64 = ys.iter().zip(&w).map(|(y, w)| w * (y - my).powi(2)).sum();
    let se_slope = (1.0 / sxx).sqrt();
    let se_intercept = (1.0 / sw + mx * mx / sxx).sqrt();
    let fit = LinearFit {
        slope,
        intercept,
        residuals,
        r_squared: if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot },
    };
    (fit, se_slope, se_intercept)
}
