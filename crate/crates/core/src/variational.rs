//! Diagonal-Gaussian posteriors over featurizer weights.
//!
//! Each parameter `j` has a mean `mu[j]` and a pre-scale `rho[j]` with standard
//! deviation `softplus(rho[j])`. Weights are drawn by reparameterization,
//! `w = mu + softplus(rho) * eps`, so gradients reach `mu` and `rho` through
//! a fixed noise vector.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{backward, cross_entropy, forward, Matrix, NetworkSpec, WeightSet};

/// `ln(1 + e^rho)`, computed without overflow.
pub fn sigma(rho: f64) -> f64 {
    if rho > 0.0 {
        rho + (-rho).exp().ln_1p()
    } else {
        rho.exp().ln_1p()
    }
}

/// Inverse of [`sigma`]: `ln(e^s - 1)` for `s > 0`.
pub fn sigma_inv(s: f64) -> f64 {
    if s > 20.0 {
        s + (-(-s).exp_m1()).ln()
    } else {
        s.exp_m1().ln()
    }
}

/// Derivative of softplus.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorSpec {
    pub mean: f64,
    pub std: f64,
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self {
            mean: 0.0,
            std: 1.0,
        }
    }
}

impl PriorSpec {
    pub fn new(mean: f64, std: f64) -> Result<Self> {
        let p = Self { mean, std };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.std > 0.0 && self.std.is_finite() && self.mean.is_finite()) {
            return Err(Error::invalid(format!(
                "prior needs finite mean and std > 0, got N({}, {}^2)",
                self.mean, self.std
            )));
        }
        Ok(())
    }
}

/// Factorized Gaussian `q(w) = N(mu, diag(softplus(rho))^2)` over one network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "VariationalFile")]
pub struct GaussianVariational {
    spec: NetworkSpec,
    mu: Vec<f64>,
    rho: Vec<f64>,
}

#[derive(Deserialize)]
struct VariationalFile {
    spec: NetworkSpec,
    mu: Vec<f64>,
    rho: Vec<f64>,
}

impl TryFrom<VariationalFile> for GaussianVariational {
    type Error = Error;

    fn try_from(f: VariationalFile) -> Result<Self> {
        GaussianVariational::new(f.spec, f.mu, f.rho)
    }
}

impl GaussianVariational {
    pub fn new(spec: NetworkSpec, mu: Vec<f64>, rho: Vec<f64>) -> Result<Self> {
        let p = spec.param_count();
        if mu.len() != p || rho.len() != p {
            return Err(Error::shape(
                "GaussianVariational",
                p,
                format!("mu {} / rho {}", mu.len(), rho.len()),
            ));
        }
        if let Some(i) = mu.iter().chain(&rho).position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "variational parameters".into(),
                detail: format!("entry {i} of mu++rho"),
            });
        }
        Ok(Self { spec, mu, rho })
    }

    /// `mu = flatten(w)` and every standard deviation equal to `sigma0`.
    pub fn from_deterministic(w: &WeightSet, sigma0: f64) -> Result<Self> {
        if !(sigma0 > 0.0 && sigma0.is_finite()) {
            return Err(Error::invalid(format!("sigma0 must be > 0, got {sigma0}")));
        }
        let rho0 = sigma_inv(sigma0);
        Ok(Self {
            spec: w.spec().clone(),
            mu: w.flatten(),
            rho: vec![rho0; w.len()],
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn rho(&self) -> &[f64] {
        &self.rho
    }

    pub fn mu_mut(&mut self) -> &mut [f64] {
        &mut self.mu
    }

    pub fn rho_mut(&mut self) -> &mut [f64] {
        &mut self.rho
    }

    pub fn sigmas(&self) -> Vec<f64> {
        self.rho.iter().map(|&r| sigma(r)).collect()
    }

    /// The posterior mean as a deterministic network.
    pub fn mean_weights(&self) -> WeightSet {
        WeightSet::from_flat(&self.spec, self.mu.clone()).expect("length checked at construction")
    }

    /// `w_j = mu_j + sigma_j * eps_j`.
    pub fn sample_weights(&self, eps: &[f64]) -> Result<WeightSet> {
        if eps.len() != self.mu.len() {
            return Err(Error::shape("sample_weights eps", self.mu.len(), eps.len()));
        }
        let w = self
            .mu
            .iter()
            .zip(&self.rho)
            .zip(eps)
            .map(|((m, r), e)| m + sigma(*r) * e)
            .collect();
        WeightSet::from_flat(&self.spec, w)
    }

    /// Closed-form `KL(q || prior)` summed over all coordinates.
    pub fn kl_to_prior(&self, prior: &PriorSpec) -> f64 {
        self.mu
            .iter()
            .zip(&self.rho)
            .map(|(&m, &r)| kl_coordinate(m, sigma(r), prior))
            .sum()
    }
}

/// `KL(N(mu, s^2) || N(prior.mean, prior.std^2))` for one coordinate.
pub fn kl_coordinate(mu: f64, s: f64, prior: &PriorSpec) -> f64 {
    let ps = prior.std;
    let d = mu - prior.mean;
    (ps / s).ln() + (s * s + d * d) / (2.0 * ps * ps) - 0.5
}

/// Value and gradients of the minibatch ELBO loss.
#[derive(Debug, Clone)]
pub struct ElboOutput {
    /// `kl_weight * kl + nll`.
    pub loss: f64,
    pub kl: f64,
    /// Mean cross-entropy of the batch; zero for an empty batch.
    pub nll: f64,
    pub grad_mu: Vec<f64>,
    pub grad_rho: Vec<f64>,
    pub grad_classifier: WeightSet,
}

/// `kl_weight * KL(q || prior) + CE(classifier(w(eps)(x)), labels)` with
/// `w(eps) = mu + softplus(rho) * eps`.
///
/// An empty batch drops the likelihood term, leaving only the weighted KL.
pub fn elbo_loss(
    q: &GaussianVariational,
    classifier: &WeightSet,
    x: &Matrix,
    labels: &[usize],
    kl_weight: f64,
    eps: &[f64],
    prior: &PriorSpec,
) -> Result<ElboOutput> {
    if kl_weight < 0.0 || !kl_weight.is_finite() {
        return Err(Error::invalid(format!("kl_weight must be >= 0, got {kl_weight}")));
    }
    let w = q.sample_weights(eps)?;
    let p = q.len();

    let (nll, grad_w, grad_classifier) = if labels.is_empty() {
        (0.0, vec![0.0; p], WeightSet::zeros(classifier.spec()))
    } else {
        let (feats, f_tape) = forward(q.spec(), &w, x)?;
        let (logits, c_tape) = forward(classifier.spec(), classifier, &feats)?;
        let (nll, d_logits) = cross_entropy(&logits, labels)?;
        let c_grad = backward(classifier.spec(), classifier, &c_tape, &d_logits)?;
        let f_grad = backward(q.spec(), &w, &f_tape, &c_grad.input)?;
        (nll, f_grad.weights.into_flat(), c_grad.weights)
    };

    let ps2 = prior.std * prior.std;
    let mut kl = 0.0;
    let mut grad_mu = Vec::with_capacity(p);
    let mut grad_rho = Vec::with_capacity(p);
    for j in 0..p {
        let (m, r) = (q.mu[j], q.rho[j]);
        let s = sigma(r);
        kl += kl_coordinate(m, s, prior);
        let dkl_dmu = (m - prior.mean) / ps2;
        let dkl_dsigma = -1.0 / s + s / ps2;
        let ds_drho = sigmoid(r);
        grad_mu.push(grad_w[j] + kl_weight * dkl_dmu);
        grad_rho.push((grad_w[j] * eps[j] + kl_weight * dkl_dsigma) * ds_drho);
    }

    let loss = kl_weight * kl + nll;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            context: "elbo loss".into(),
            detail: format!("kl = {kl}, nll = {nll}, kl_weight = {kl_weight}"),
        });
    }
    Ok(ElboOutput {
        loss,
        kl,
        nll,
        grad_mu,
        grad_rho,
        grad_classifier,
    })
}
