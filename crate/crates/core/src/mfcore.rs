//! Intensity-histogram multifractal measures.
//!
//! The intensity codomain `[0, G]` is cut into `N_s = floor(G / s)` bins of
//! width `s`. Bin `j` (1-based) collects intensities `(j-1)s+1 ..= js`;
//! intensity 0 is folded into bin 1 and anything above `N_s * s` into the
//! last bin, so every pixel is counted exactly once.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Orders within this distance of 1 use the Shannon branch.
pub const Q_TOL: f64 = 1e-9;

/// Default number of intensity levels.
pub const DEFAULT_LEVELS: u32 = 255;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntensityHistogram {
    pub counts: Vec<u64>,
    pub spacing: u32,
    pub levels: u32,
    pub total: u64,
}

impl IntensityHistogram {
    pub fn num_bins(&self) -> usize {
        self.counts.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityDistribution {
    pub probs: Vec<f64>,
    pub support_size: usize,
}

impl ProbabilityDistribution {
    /// Builds a distribution from raw probabilities, checking they are
    /// non-negative and sum to 1.
    pub fn from_probs(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::DegenerateInput("empty distribution".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidArgument(
                "probabilities must be finite and non-negative".into(),
            ));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "probabilities sum to {sum}, expected 1"
            )));
        }
        let support_size = probs.iter().filter(|p| **p > 0.0).count();
        Ok(Self {
            probs,
            support_size,
        })
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    fn positive(&self) -> impl Iterator<Item = f64> + '_ {
        self.probs.iter().copied().filter(|p| *p > 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenyiResult {
    pub q: f64,
    pub s: u32,
    /// Partition function value `sum p_j^q`.
    pub z: f64,
    /// Entropy in nats.
    pub entropy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauEstimate {
    pub q: f64,
    pub tau: f64,
    pub scales: Vec<u32>,
    pub r_squared: f64,
}

/// Number of bins at spacing `s` over `levels` intensity levels.
pub fn num_bins(s: u32, levels: u32) -> usize {
    (levels / s) as usize
}

/// 1-based bin index of intensity `v`, clamped into `[1, n_bins]`.
#[inline]
pub fn bin_index(v: u32, s: u32, n_bins: usize) -> usize {
    let j = v.div_ceil(s).max(1) as usize;
    j.min(n_bins)
}

pub fn build_histogram<P>(pixels: &[P], s: u32, levels: u32) -> Result<IntensityHistogram>
where
    P: Copy + Into<u32>,
{
    if s == 0 || levels == 0 {
        return Err(Error::InvalidArgument(format!(
            "spacing and levels must be positive (s={s}, G={levels})"
        )));
    }
    if s > levels {
        return Err(Error::InvalidArgument(format!(
            "spacing s={s} exceeds intensity levels G={levels}"
        )));
    }
    if pixels.is_empty() {
        return Err(Error::DegenerateInput("empty pixel sequence".into()));
    }
    let n_bins = num_bins(s, levels);
    let mut counts = vec![0u64; n_bins];
    for &p in pixels {
        counts[bin_index(p.into(), s, n_bins) - 1] += 1;
    }
    Ok(IntensityHistogram {
        counts,
        spacing: s,
        levels,
        total: pixels.len() as u64,
    })
}

pub fn normalize(hist: &IntensityHistogram) -> Result<ProbabilityDistribution> {
    if hist.total == 0 {
        return Err(Error::DegenerateInput("histogram has no samples".into()));
    }
    let total = hist.total as f64;
    let probs: Vec<f64> = hist.counts.iter().map(|&c| c as f64 / total).collect();
    let support_size = hist.counts.iter().filter(|&&c| c > 0).count();
    Ok(ProbabilityDistribution {
        probs,
        support_size,
    })
}

/// `sum p_j^q` over strictly positive bins.
pub fn partition_function(dist: &ProbabilityDistribution, q: f64) -> f64 {
    if (q - 1.0).abs() <= Q_TOL {
        return 1.0;
    }
    dist.positive().map(|p| p.powf(q)).sum()
}

pub fn shannon_entropy(dist: &ProbabilityDistribution) -> f64 {
    let h: f64 = dist.positive().map(|p| -p * p.ln()).sum();
    h.max(0.0)
}

pub fn renyi_entropy(dist: &ProbabilityDistribution, q: f64, s: u32) -> RenyiResult {
    let z = partition_function(dist, q);
    let entropy = if (q - 1.0).abs() <= Q_TOL {
        shannon_entropy(dist)
    } else {
        z.ln() / (1.0 - q)
    };
    RenyiResult {
        q,
        s,
        z,
        // -0.0 and tiny negative round-off from ln(1 - eps)
        entropy: entropy.max(0.0),
    }
}

/// Histogram, normalize and score a pixel collection in one call.
pub fn pixel_entropy<P>(pixels: &[P], q: f64, s: u32, levels: u32) -> Result<RenyiResult>
where
    P: Copy + Into<u32>,
{
    let hist = build_histogram(pixels, s, levels)?;
    Ok(renyi_entropy(&normalize(&hist)?, q, s))
}

/// Ordinary least squares of `ln z` on `ln s`. Returns `(slope, r_squared)`.
pub fn fit_log_log(scales: &[u32], z: &[f64]) -> Result<(f64, f64)> {
    if scales.len() != z.len() {
        return Err(Error::InvalidArgument(format!(
            "{} scales but {} partition values",
            scales.len(),
            z.len()
        )));
    }
    if scales.len() < 2 {
        return Err(Error::InvalidArgument(
            "at least 2 scales are required for a scaling fit".into(),
        ));
    }
    if z.iter().any(|v| *v <= 0.0 || !v.is_finite()) {
        return Err(Error::DegenerateInput(
            "partition function values must be positive and finite".into(),
        ));
    }
    let xs: Vec<f64> = scales.iter().map(|&s| (s as f64).ln()).collect();
    let ys: Vec<f64> = z.iter().map(|v| v.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidArgument("scales must be distinct".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| {
            let e = y - (intercept + slope * x);
            e * e
        })
        .sum();
    let r_squared = if syy <= f64::EPSILON * f64::EPSILON * n {
        1.0
    } else {
        (1.0 - ss_res / syy).clamp(0.0, 1.0)
    };
    Ok((slope, r_squared))
}

/// Scaling exponent `tau(q)` from `Z_s^q ~ s^tau(q)` over the given spacings.
pub fn estimate_tau<P>(pixels: &[P], scales: &[u32], q: f64, levels: u32) -> Result<TauEstimate>
where
    P: Copy + Into<u32>,
{
    if (q - 1.0).abs() <= Q_TOL {
        return Err(Error::InvalidArgument(
            "tau(q) is undefined at q = 1 (the partition function is identically 1)".into(),
        ));
    }
    let mut scales = scales.to_vec();
    scales.sort_unstable();
    scales.dedup();
    if scales.len() < 2 {
        return Err(Error::InvalidArgument(
            "at least 2 distinct scales are required".into(),
        ));
    }
    let z = scales
        .iter()
        .map(|&s| {
            let dist = normalize(&build_histogram(pixels, s, levels)?)?;
            Ok(partition_function(&dist, q))
        })
        .collect::<Result<Vec<_>>>()?;
    let (tau, r_squared) = fit_log_log(&scales, &z)?;
    Ok(TauEstimate {
        q,
        tau,
        scales,
        r_squared,
    })
}
