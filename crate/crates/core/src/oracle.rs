//! Exact checks of posterior aggregation on finite models.
//!
//! A [`DiscreteGenerativeModel`] is a joint distribution over a finite
//! parameter set `omega`, a domain-invariant statistic `d_c`, a
//! domain-specific statistic `d_v`, and i.i.d. observations. The two
//! statistics are independent by construction: the joint is
//! `p(d_c) p(d_v) p(omega | d_c, d_v)`. Under that independence the
//! posterior given `d_c` alone equals the `p(d_v)`-average of the posteriors
//! given `(d_c, d_v)`; [`verify_theorem`] measures the gap by enumeration.

use std::time::Instant;

use rand::Rng as _;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::aggregate::moment_match;
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::nn::NetworkSpec;
use crate::seed;
use crate::variational::{sigma_inv, GaussianVariational};

const NORM_TOL: f64 = 1e-12;

/// Probability table over the omega support.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretePosterior(pub Vec<f64>);

impl DiscretePosterior {
    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn total_variation(&self, other: &Self) -> f64 {
        0.5 * self.0.iter().zip(&other.0).map(|(a, b)| (a - b).abs()).sum::<f64>()
    }

    fn normalized(weights: Vec<f64>) -> Result<Self> {
        let z: f64 = weights.iter().sum();
        if !(z > 0.0) {
            return Err(Error::ImpossibleObservation);
        }
        Ok(Self(weights.into_iter().map(|w| w / z).collect()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteGenerativeModel {
    dc_prior: Vec<f64>,
    dv_prior: Vec<f64>,
    /// `p(omega | d_c, d_v)`, indexed `[dc][dv][omega]`.
    omega_given: Vec<Vec<Vec<f64>>>,
    /// `p(obs | omega, d_c, d_v)`, indexed `[dc][dv][omega][obs]`.
    likelihood: Vec<Vec<Vec<Vec<f64>>>>,
}

fn check_distribution(name: &str, p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::invalid(format!("{name}: empty support")));
    }
    if p.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::invalid(format!("{name}: negative or non-finite entry")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > NORM_TOL {
        return Err(Error::invalid(format!("{name}: sums to {s}, not 1")));
    }
    Ok(())
}

fn dirichlet_ones<R: rand::Rng + ?Sized>(rng: &mut R, k: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| Exp1.sample(rng)).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Support sizes for [`DiscreteGenerativeModel::random`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSizes {
    pub omega: usize,
    pub dc: usize,
    pub dv: usize,
    pub obs: usize,
}

impl DiscreteGenerativeModel {
    /// `omega` independent of both statistics a priori: `p(omega | d_c, d_v) = p(omega)`.
    pub fn new(
        omega_prior: Vec<f64>,
        dc_prior: Vec<f64>,
        dv_prior: Vec<f64>,
        likelihood: Vec<Vec<Vec<Vec<f64>>>>,
    ) -> Result<Self> {
        let omega_given = vec![vec![omega_prior; dv_prior.len()]; dc_prior.len()];
        Self::with_coupling(dc_prior, dv_prior, omega_given, likelihood)
    }

    /// General form with `omega` depending on both statistics.
    pub fn with_coupling(
        dc_prior: Vec<f64>,
        dv_prior: Vec<f64>,
        omega_given: Vec<Vec<Vec<f64>>>,
        likelihood: Vec<Vec<Vec<Vec<f64>>>>,
    ) -> Result<Self> {
        check_distribution("p(d_c)", &dc_prior)?;
        check_distribution("p(d_v)", &dv_prior)?;
        let (ndc, ndv) = (dc_prior.len(), dv_prior.len());
        if omega_given.len() != ndc || omega_given.iter().any(|t| t.len() != ndv) {
            return Err(Error::shape("p(omega | d_c, d_v)", format!("{ndc}x{ndv}"), "ragged table"));
        }
        let n_omega = omega_given[0][0].len();
        for (c, row) in omega_given.iter().enumerate() {
            for (v, p) in row.iter().enumerate() {
                if p.len() != n_omega {
                    return Err(Error::shape("p(omega | d_c, d_v)", n_omega, p.len()));
                }
                check_distribution(&format!("p(omega | d_c={c}, d_v={v})"), p)?;
            }
        }
        if likelihood.len() != ndc || likelihood.iter().any(|t| t.len() != ndv) {
            return Err(Error::shape("likelihood", format!("{ndc}x{ndv}"), "ragged table"));
        }
        let n_obs = likelihood[0][0].first().map_or(0, Vec::len);
        for (c, row) in likelihood.iter().enumerate() {
            for (v, per_omega) in row.iter().enumerate() {
                if per_omega.len() != n_omega {
                    return Err(Error::shape("likelihood omega axis", n_omega, per_omega.len()));
                }
                for (w, p) in per_omega.iter().enumerate() {
                    if p.len() != n_obs {
                        return Err(Error::shape("likelihood obs axis", n_obs, p.len()));
                    }
                    check_distribution(&format!("p(obs | omega={w}, d_c={c}, d_v={v})"), p)?;
                }
            }
        }
        Ok(Self {
            dc_prior,
            dv_prior,
            omega_given,
            likelihood,
        })
    }

    /// Draws every table from a flat Dirichlet. With `coupled`, `p(omega | d_c, d_v)`
    /// gets its own table per `(d_c, d_v)` cell; otherwise one shared prior.
    pub fn random<R: rand::Rng + ?Sized>(rng: &mut R, sizes: ModelSizes, coupled: bool) -> Self {
        let dc_prior = dirichlet_ones(rng, sizes.dc);
        let dv_prior = dirichlet_ones(rng, sizes.dv);
        let shared = dirichlet_ones(rng, sizes.omega);
        let omega_given = (0..sizes.dc)
            .map(|_| {
                (0..sizes.dv)
                    .map(|_| {
                        if coupled {
                            dirichlet_ones(rng, sizes.omega)
                        } else {
                            shared.clone()
                        }
                    })
                    .collect()
            })
            .collect();
        let likelihood = (0..sizes.dc)
            .map(|_| {
                (0..sizes.dv)
                    .map(|_| (0..sizes.omega).map(|_| dirichlet_ones(rng, sizes.obs)).collect())
                    .collect()
            })
            .collect();
        Self::with_coupling(dc_prior, dv_prior, omega_given, likelihood)
            .expect("random tables are normalized")
    }

    pub fn n_omega(&self) -> usize {
        self.omega_given[0][0].len()
    }

    pub fn n_dc(&self) -> usize {
        self.dc_prior.len()
    }

    pub fn n_dv(&self) -> usize {
        self.dv_prior.len()
    }

    pub fn n_obs(&self) -> usize {
        self.likelihood[0][0][0].len()
    }

    pub fn dc_prior(&self) -> &[f64] {
        &self.dc_prior
    }

    pub fn dv_prior(&self) -> &[f64] {
        &self.dv_prior
    }

    pub fn omega_given(&self, dc: usize, dv: usize) -> &[f64] {
        &self.omega_given[dc][dv]
    }

    pub fn likelihood(&self, dc: usize, dv: usize, omega: usize) -> &[f64] {
        &self.likelihood[dc][dv][omega]
    }

    /// Marginal `p(omega)`.
    pub fn omega_prior(&self) -> Vec<f64> {
        let mut p = vec![0.0; self.n_omega()];
        for (c, pc) in self.dc_prior.iter().enumerate() {
            for (v, pv) in self.dv_prior.iter().enumerate() {
                for (acc, r) in p.iter_mut().zip(&self.omega_given[c][v]) {
                    *acc += pc * pv * r;
                }
            }
        }
        p
    }

    fn check_symbols(&self, dc: usize, dv: Option<usize>, obs: &[usize]) -> Result<()> {
        if dc >= self.n_dc() {
            return Err(Error::invalid(format!("d_c = {dc} outside support of size {}", self.n_dc())));
        }
        if let Some(dv) = dv {
            if dv >= self.n_dv() {
                return Err(Error::invalid(format!("d_v = {dv} outside support of size {}", self.n_dv())));
            }
        }
        if let Some(o) = obs.iter().find(|&&o| o >= self.n_obs()) {
            return Err(Error::invalid(format!("observation {o} outside support of size {}", self.n_obs())));
        }
        Ok(())
    }

    fn obs_likelihood(&self, dc: usize, dv: usize, omega: usize, obs: &[usize]) -> f64 {
        let table = &self.likelihood[dc][dv][omega];
        obs.iter().map(|&o| table[o]).product()
    }
}

/// `p(omega | d_c, d_v, obs)` by enumeration.
pub fn posterior_given(
    model: &DiscreteGenerativeModel,
    dc: usize,
    dv: usize,
    observations: &[usize],
) -> Result<DiscretePosterior> {
    model.check_symbols(dc, Some(dv), observations)?;
    let w = (0..model.n_omega())
        .map(|om| model.omega_given[dc][dv][om] * model.obs_likelihood(dc, dv, om, observations))
        .collect();
    DiscretePosterior::normalized(w)
}

/// `p(omega | d_c, obs)` with `d_v` marginalized out of the joint before
/// conditioning.
pub fn invariant_posterior_exact(
    model: &DiscreteGenerativeModel,
    dc: usize,
    observations: &[usize],
) -> Result<DiscretePosterior> {
    model.check_symbols(dc, None, observations)?;
    let w = (0..model.n_omega())
        .map(|om| {
            model
                .dv_prior
                .iter()
                .enumerate()
                .map(|(dv, pv)| {
                    pv * model.omega_given[dc][dv][om] * model.obs_likelihood(dc, dv, om, observations)
                })
                .sum()
        })
        .collect();
    DiscretePosterior::normalized(w)
}

/// `sum_{d_v} p(d_v) p(omega | d_c, d_v, obs)`: the prior-weighted average of
/// the per-domain posteriors.
pub fn invariant_posterior_aggregated(
    model: &DiscreteGenerativeModel,
    dc: usize,
    observations: &[usize],
) -> Result<DiscretePosterior> {
    model.check_symbols(dc, None, observations)?;
    let mut acc = vec![0.0; model.n_omega()];
    for (dv, pv) in model.dv_prior.iter().enumerate() {
        if *pv == 0.0 {
            continue;
        }
        let post = posterior_given(model, dc, dv, observations)?;
        acc.iter_mut().zip(&post.0).for_each(|(a, p)| *a += pv * p);
    }
    Ok(DiscretePosterior(acc))
}

/// Largest total-variation distance between the exact invariant posterior
/// and the aggregated one, over `trials` values of `d_c` drawn from `p(d_c)`.
pub fn verify_theorem(model: &DiscreteGenerativeModel, trials: usize, seed: u64) -> Result<f64> {
    let mut rng = seed::rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let u: f64 = rng.random();
        let mut cum = 0.0;
        let mut dc = model.n_dc() - 1;
        for (c, p) in model.dc_prior.iter().enumerate() {
            cum += p;
            if u < cum {
                dc = c;
                break;
            }
        }
        let exact = invariant_posterior_exact(model, dc, &[])?;
        let agg = invariant_posterior_aggregated(model, dc, &[])?;
        worst = worst.max(exact.total_variation(&agg));
    }
    Ok(worst)
}

/// Gap between the exact invariant posterior and the plain average over
/// `n_domains` values of `d_v` sampled from `p(d_v)`: the finite-domain
/// approximation that training on N observed domains actually makes.
/// Averaged over `draws` independent domain samples.
pub fn domain_average_gap(
    model: &DiscreteGenerativeModel,
    dc: usize,
    n_domains: usize,
    draws: usize,
    seed: u64,
) -> Result<f64> {
    if n_domains == 0 || draws == 0 {
        return Err(Error::invalid("domain_average_gap needs n_domains >= 1 and draws >= 1"));
    }
    let exact = invariant_posterior_exact(model, dc, &[])?;
    let per_dv: Vec<DiscretePosterior> = (0..model.n_dv())
        .map(|dv| posterior_given(model, dc, dv, &[]))
        .collect::<Result<_>>()?;
    let mut rng = seed::rng(seed);
    let mut total = 0.0;
    for _ in 0..draws {
        let mut avg = vec![0.0; model.n_omega()];
        for _ in 0..n_domains {
            let u: f64 = rng.random();
            let mut cum = 0.0;
            let mut pick = model.n_dv() - 1;
            for (v, p) in model.dv_prior.iter().enumerate() {
                cum += p;
                if u < cum {
                    pick = v;
                    break;
                }
            }
            avg.iter_mut()
                .zip(&per_dv[pick].0)
                .for_each(|(a, p)| *a += p / n_domains as f64);
        }
        total += exact.total_variation(&DiscretePosterior(avg));
    }
    Ok(total / draws as f64)
}

/// Sample mean and population variance of `n_samples` draws from the
/// equal-weight mixture of `N(mean_i, std_i^2)`.
pub fn mixture_moments_mc(components: &[(f64, f64)], n_samples: usize, seed: u64) -> Result<(f64, f64)> {
    if components.is_empty() || n_samples == 0 {
        return Err(Error::invalid("mixture sampling needs components and n_samples >= 1"));
    }
    let mut rng = seed::rng(seed);
    // Welford
    let (mut mean, mut m2) = (0.0, 0.0);
    for k in 0..n_samples {
        let (mu, sd) = components[rng.random_range(0..components.len())];
        let z: f64 = StandardNormal.sample(&mut rng);
        let x = mu + sd * z;
        let delta = x - mean;
        mean += delta / (k + 1) as f64;
        m2 += delta * (x - mean);
    }
    Ok((mean, m2 / n_samples as f64))
}

/// Settings for [`run_oracle_check`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleCheckConfig {
    pub seed: u64,
    pub theorem_models: usize,
    pub theorem_trials: usize,
    pub mixture_instances: usize,
    pub mixture_samples: usize,
    pub domain_counts: Vec<usize>,
}

impl Default for OracleCheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            theorem_models: 1000,
            theorem_trials: 8,
            mixture_instances: 50,
            mixture_samples: 1_000_000,
            domain_counts: vec![2, 3, 5, 10, 50],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TheoremReport {
    pub models: usize,
    pub trials_per_model: usize,
    pub max_tv_gap: f64,
    /// Same sweep with the independence between `d_c` and `d_v` broken;
    /// shows the check is able to detect a gap.
    pub dependent_control_max_tv_gap: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixtureReport {
    pub instances: usize,
    pub samples: usize,
    /// `|mc - matched| / max(|matched mean|, mixture std)`.
    pub max_mean_rel_err: f64,
    pub max_var_rel_err: f64,
    /// Identical-component mixtures: largest deviation from the component.
    pub identical_max_abs_err: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainGapRow {
    pub n_domains: usize,
    pub mean_tv_gap: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleReport {
    pub theorem: TheoremReport,
    pub moment_matching: MixtureReport,
    pub finite_domain_gap: Vec<DomainGapRow>,
}

/// A random mixture: 2..=8 components, means in [-3, 3], stds in [0.2, 2].
pub fn random_mixture<R: rand::Rng + ?Sized>(rng: &mut R) -> Vec<(f64, f64)> {
    let n = rng.random_range(2..=8);
    (0..n)
        .map(|_| (rng.random_range(-3.0..3.0), rng.random_range(0.2..2.0)))
        .collect()
}

/// Scalar posteriors (one-parameter networks) for each mixture component.
pub fn scalar_posteriors(components: &[(f64, f64)]) -> Vec<GaussianVariational> {
    let spec = NetworkSpec::relu(&[1, 1]).expect("valid dims");
    components
        .iter()
        .map(|&(m, s)| {
            let r = sigma_inv(s);
            GaussianVariational::new(spec.clone(), vec![m, m], vec![r, r]).expect("finite")
        })
        .collect()
}

/// Builds a joint `p(omega, d_c, d_v)` where `d_c` and `d_v` are dependent and
/// returns the theorem gap computed directly from it.
fn dependent_gap<R: rand::Rng + ?Sized>(rng: &mut R, sizes: ModelSizes) -> f64 {
    let cells = sizes.omega * sizes.dc * sizes.dv;
    let joint = dirichlet_ones(rng, cells);
    let at = |w: usize, c: usize, v: usize| joint[(w * sizes.dc + c) * sizes.dv + v];
    let p_dv: Vec<f64> = (0..sizes.dv)
        .map(|v| (0..sizes.omega).flat_map(|w| (0..sizes.dc).map(move |c| (w, c))).map(|(w, c)| at(w, c, v)).sum())
        .collect();
    let mut worst: f64 = 0.0;
    for c in 0..sizes.dc {
        let p_c: f64 = (0..sizes.omega).flat_map(|w| (0..sizes.dv).map(move |v| (w, v))).map(|(w, v)| at(w, c, v)).sum();
        let exact: Vec<f64> = (0..sizes.omega)
            .map(|w| (0..sizes.dv).map(|v| at(w, c, v)).sum::<f64>() / p_c)
            .collect();
        let mut agg = vec![0.0; sizes.omega];
        for v in 0..sizes.dv {
            let p_cv: f64 = (0..sizes.omega).map(|w| at(w, c, v)).sum();
            for (w, a) in agg.iter_mut().enumerate() {
                *a += p_dv[v] * at(w, c, v) / p_cv;
            }
        }
        let tv = 0.5 * exact.iter().zip(&agg).map(|(a, b)| (a - b).abs()).sum::<f64>();
        worst = worst.max(tv);
    }
    worst
}

pub fn run_oracle_check(cfg: &OracleCheckConfig) -> Result<OracleReport> {
    let start = Instant::now();
    let mut rng = seed::rng(derive_seed!(cfg.seed, "theorem-models"));
    let mut max_gap: f64 = 0.0;
    let mut control: f64 = 0.0;
    for i in 0..cfg.theorem_models {
        let sizes = ModelSizes {
            omega: rng.random_range(2..=6),
            dc: rng.random_range(1..=4),
            dv: rng.random_range(1..=4),
            obs: rng.random_range(2..=4),
        };
        let coupled = i % 2 == 0;
        let model = DiscreteGenerativeModel::random(&mut rng, sizes, coupled);
        let trial_seed = derive_seed!(cfg.seed, "theorem-trials", i);
        max_gap = max_gap.max(verify_theorem(&model, cfg.theorem_trials, trial_seed)?);
        control = control.max(dependent_gap(&mut rng, sizes));
    }
    let seconds = start.elapsed().as_secs_f64();

    let mut rng = seed::rng(derive_seed!(cfg.seed, "mixtures"));
    let (mut mean_err, mut var_err, mut ident_err): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for i in 0..cfg.mixture_instances {
        let comps = random_mixture(&mut rng);
        let agg = moment_match(&scalar_posteriors(&comps))?;
        let (m, v) = (agg.q0.mu()[0], agg.variance()[0]);
        let (mc_m, mc_v) = mixture_moments_mc(&comps, cfg.mixture_samples, derive_seed!(cfg.seed, "mc", i))?;
        mean_err = mean_err.max((mc_m - m).abs() / m.abs().max(v.sqrt()));
        var_err = var_err.max((mc_v - v).abs() / v);

        let one = comps[0];
        let same = vec![one; comps.len()];
        let agg = moment_match(&scalar_posteriors(&same))?;
        ident_err = ident_err
            .max((agg.q0.mu()[0] - one.0).abs())
            .max((agg.q0.sigmas()[0] - one.1).abs());
    }

    let mut rng = seed::rng(derive_seed!(cfg.seed, "domain-gap"));
    let models: Vec<DiscreteGenerativeModel> = (0..20)
        .map(|_| {
            DiscreteGenerativeModel::random(
                &mut rng,
                ModelSizes {
                    omega: 4,
                    dc: 2,
                    dv: 6,
                    obs: 2,
                },
                true,
            )
        })
        .collect();
    let finite_domain_gap = cfg
        .domain_counts
        .iter()
        .map(|&n| {
            let mut total = 0.0;
            for (i, m) in models.iter().enumerate() {
                total += domain_average_gap(m, 0, n, 200, derive_seed!(cfg.seed, "gap", n, i))?;
            }
            Ok(DomainGapRow {
                n_domains: n,
                mean_tv_gap: total / models.len() as f64,
            })
        })
        .collect::<Result<_>>()?;

    Ok(OracleReport {
        theorem: TheoremReport {
            models: cfg.theorem_models,
            trials_per_model: cfg.theorem_trials,
            max_tv_gap: max_gap,
            dependent_control_max_tv_gap: control,
            seconds,
        },
        moment_matching: MixtureReport {
            instances: cfg.mixture_instances,
            samples: cfg.mixture_samples,
            max_mean_rel_err: mean_err,
            max_var_rel_err: var_err,
            identical_max_abs_err: ident_err,
        },
        finite_domain_gap,
    })
}
