//! Aggregation of per-domain posteriors into one domain-invariant posterior.
//!
//! The equal-weight mixture `(1/N) sum_i N(mu_i, s_i^2)` is replaced,
//! coordinate by coordinate, by the single Gaussian with the same first two
//! moments:
//!
//! ```text
//! mu  = (1/N) sum_i mu_i
//! s^2 = (1/N) sum_i s_i^2  +  (1/N) sum_i (mu_i - mu)^2
//! ```
//!
//! The second term is the between-domain spread of the means; it is what
//! widens the aggregate on parameters the domains disagree about.
//!
//! Every per-coordinate reduction sorts its inputs first, so results are
//! bitwise independent of the order in which domains are supplied.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{NetworkSpec, WeightSet};
use crate::variational::{sigma, sigma_inv, GaussianVariational};

/// Default guard added to `|mean|` in the coefficient of variation.
pub const COV_EPSILON: f64 = 1e-8;

/// Mean of `values` after sorting them in place, as `v_min + mean(v - v_min)`.
///
/// Equal inputs return that value exactly.
pub(crate) fn canonical_mean(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let base = values[0];
    let shift: f64 = values.iter().map(|v| v - base).sum();
    base + shift / values.len() as f64
}

/// Population variance around `mean`, summed in the (already sorted) order of `values`.
fn spread(values: &[f64], mean: f64) -> f64 {
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateResult {
    pub q0: GaussianVariational,
    /// `(1/N) sum_i s_i^2` per parameter.
    pub within_variance: Vec<f64>,
    /// `(1/N) sum_i (mu_i - mu)^2` per parameter.
    pub between_variance: Vec<f64>,
}

impl AggregateResult {
    /// Moment-matched variance `within + between` per parameter.
    pub fn variance(&self) -> Vec<f64> {
        self.within_variance
            .iter()
            .zip(&self.between_variance)
            .map(|(w, b)| w + b)
            .collect()
    }
}

fn common_spec<'a>(specs: impl IntoIterator<Item = &'a NetworkSpec>) -> Result<NetworkSpec> {
    let mut it = specs.into_iter();
    let first = it
        .next()
        .ok_or_else(|| Error::invalid("aggregation needs at least one input"))?;
    for (i, s) in it.enumerate() {
        if s != first {
            return Err(Error::shape(
                "aggregation inputs",
                format!("{:?}", first.dims()),
                format!("input {} has {:?}", i + 1, s.dims()),
            ));
        }
    }
    Ok(first.clone())
}

/// Moment-matches the equal-weight mixture of `posteriors` with a single
/// diagonal Gaussian.
pub fn moment_match(posteriors: &[GaussianVariational]) -> Result<AggregateResult> {
    let spec = common_spec(posteriors.iter().map(GaussianVariational::spec))?;
    let p = spec.param_count();
    let mut mu = Vec::with_capacity(p);
    let mut rho = Vec::with_capacity(p);
    let mut within_variance = Vec::with_capacity(p);
    let mut between_variance = Vec::with_capacity(p);

    let mut mus = Vec::with_capacity(posteriors.len());
    let mut vars = Vec::with_capacity(posteriors.len());
    for j in 0..p {
        mus.clear();
        vars.clear();
        mus.extend(posteriors.iter().map(|q| q.mu()[j]));
        vars.extend(posteriors.iter().map(|q| sigma(q.rho()[j]).powi(2)));
        let rho_first = posteriors[0].rho()[j];
        let degenerate = posteriors
            .iter()
            .all(|q| q.mu()[j] == mus[0] && q.rho()[j] == rho_first);

        let m = canonical_mean(&mut mus);
        let within = canonical_mean(&mut vars);
        let between = spread(&mus, m);
        mu.push(m);
        within_variance.push(within);
        between_variance.push(between);
        // A mixture of identical components is that component; keep rho as is
        // rather than passing it through softplus and back.
        rho.push(if degenerate {
            rho_first
        } else {
            sigma_inv((within + between).sqrt())
        });
    }

    Ok(AggregateResult {
        q0: GaussianVariational::new(spec, mu, rho)?,
        within_variance,
        between_variance,
    })
}

/// Coordinate-wise mean of deterministic networks.
pub fn map_mean(weight_sets: &[WeightSet]) -> Result<WeightSet> {
    let spec = common_spec(weight_sets.iter().map(WeightSet::spec))?;
    let mut buf = Vec::with_capacity(weight_sets.len());
    let params = (0..spec.param_count())
        .map(|j| {
            buf.clear();
            buf.extend(weight_sets.iter().map(|w| w.as_slice()[j]));
            canonical_mean(&mut buf)
        })
        .collect();
    WeightSet::from_flat(&spec, params)
}

/// Per-parameter `population_std / (|mean| + epsilon)` across `weight_sets`.
///
/// Parameters that agree exactly across all sets get 0, even at a zero mean.
pub fn coefficient_of_variation(weight_sets: &[WeightSet], epsilon: f64) -> Result<Vec<f64>> {
    if weight_sets.len() < 2 {
        return Err(Error::invalid(format!(
            "coefficient of variation needs at least 2 weight sets, got {}",
            weight_sets.len()
        )));
    }
    if !(epsilon >= 0.0) {
        return Err(Error::invalid(format!("epsilon must be >= 0, got {epsilon}")));
    }
    let spec = common_spec(weight_sets.iter().map(WeightSet::spec))?;
    let mut buf = Vec::with_capacity(weight_sets.len());
    Ok((0..spec.param_count())
        .map(|j| {
            buf.clear();
            buf.extend(weight_sets.iter().map(|w| w.as_slice()[j]));
            let m = canonical_mean(&mut buf);
            let sd = spread(&buf, m).sqrt();
            if sd == 0.0 {
                0.0
            } else {
                sd / (m.abs() + epsilon)
            }
        })
        .collect())
}

/// Outcome of thresholding the coefficient of variation at `beta`.
#[derive(Debug, Clone, PartialEq)]
pub struct CovReport {
    pub cov: Vec<f64>,
    /// `true` where the parameter is kept (`cov <= beta`).
    pub mask: Vec<bool>,
    pub dropped_count: usize,
    pub beta: f64,
}

/// Upper-open histogram bin edges for [`CovSummary`]; the last bin is `[10, inf]`.
pub const COV_HISTOGRAM_EDGES: [f64; 11] =
    [0.0, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0];

/// Serialized form of a [`CovReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovSummary {
    pub beta: f64,
    pub dropped_count: usize,
    pub total: usize,
    pub bin_edges: Vec<f64>,
    pub cov_histogram: Vec<usize>,
}

impl CovReport {
    pub fn summary(&self) -> CovSummary {
        let edges = COV_HISTOGRAM_EDGES;
        let mut counts = vec![0usize; edges.len()];
        for &c in &self.cov {
            let bin = edges.iter().rposition(|&e| c >= e).unwrap_or(0);
            // NaN compares false everywhere; file it with the largest values
            let bin = if c.is_nan() { edges.len() - 1 } else { bin };
            counts[bin] += 1;
        }
        CovSummary {
            beta: self.beta,
            dropped_count: self.dropped_count,
            total: self.cov.len(),
            bin_edges: edges.to_vec(),
            cov_histogram: counts,
        }
    }
}

/// Zeroes every parameter whose coefficient of variation exceeds `beta`.
pub fn cov_dropout(mean_weights: &WeightSet, cov: &[f64], beta: f64) -> Result<(WeightSet, CovReport)> {
    if !(beta > 0.0) {
        return Err(Error::invalid(format!("beta must be > 0, got {beta}")));
    }
    if cov.len() != mean_weights.len() {
        return Err(Error::shape("cov_dropout", mean_weights.len(), cov.len()));
    }
    let mask: Vec<bool> = cov.iter().map(|&c| c <= beta).collect();
    let mut out = mean_weights.clone();
    for (w, &keep) in out.as_mut_slice().iter_mut().zip(&mask) {
        if !keep {
            *w = 0.0;
        }
    }
    let dropped_count = mask.iter().filter(|&&k| !k).count();
    Ok((
        out,
        CovReport {
            cov: cov.to_vec(),
            mask,
            dropped_count,
            beta,
        },
    ))
}
