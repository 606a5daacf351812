//! Training algorithms: the ERM and ERM-Bayesian baselines, PTG (variational
//! per-domain posteriors, moment-matched into an invariant featurizer) and
//! PTG-Lite (deterministic per-domain MAP weights, averaged, with
//! coefficient-of-variation dropout).
//!
//! Every trainer is deterministic given its [`TrainConfig`]: minibatch order
//! and reparameterization noise come from streams derived from `seed` and the
//! domain id, so reordering the input domains changes nothing.

mod algorithms;
mod baselines;

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::aggregate::CovReport;
use crate::error::{Error, Result};
use crate::nn::{predict_logits, softmax, AdamConfig, Matrix, NetworkSpec, WeightSet};
use crate::seed;
use crate::synth::{DomainDataset, Standardizer};
use crate::variational::{GaussianVariational, PriorSpec};

pub use algorithms::{ptg_lite_train, ptg_train};
pub use baselines::{erm_bayesian_train, erm_train, erm_train_from, init_network, BayesOutput, ErmOutput};

/// Where the reparameterization noise comes from during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    #[default]
    Gaussian,
    /// `eps = 0`: every step uses the posterior mean.
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub outer_iterations: usize,
    /// Learning-rate decay factor for every PTG / PTG-Lite update.
    pub alpha: f64,
    /// CoV threshold (PTG-Lite only).
    pub beta: f64,
    pub base_lr: f64,
    pub batch_size: usize,
    /// KL (or L2) weight per step. `None` uses `1 / n`, with `n` the number of
    /// training samples behind the step's batch: the per-sample ELBO.
    pub kl_weight: Option<f64>,
    pub mc_eval_samples: usize,
    /// Initial posterior std when lifting a deterministic network.
    pub sigma0: f64,
    pub seed: u64,
    /// ERM steps from a fresh initialization.
    pub erm_steps: usize,
    /// ERM-Bayesian steps from the ERM prior.
    pub bayes_steps: usize,
    pub noise: NoiseMode,
    pub prior: PriorSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            outer_iterations: 100,
            alpha: 0.1,
            beta: 0.1,
            base_lr: 1e-3,
            batch_size: 64,
            kl_weight: None,
            mc_eval_samples: 10,
            sigma0: 0.01,
            seed: 0,
            erm_steps: 1000,
            bayes_steps: 300,
            noise: NoiseMode::Gaussian,
            prior: PriorSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.outer_iterations == 0 {
            return Err(Error::invalid("outer_iterations must be >= 1"));
        }
        // Zero is allowed: it freezes every update and is a useful check.
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!("alpha must be in [0, 1], got {}", self.alpha)));
        }
        if !(self.beta > 0.0) {
            return Err(Error::invalid(format!("beta must be > 0, got {}", self.beta)));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::invalid(format!("base_lr must be finite and >= 0, got {}", self.base_lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if self.mc_eval_samples == 0 {
            return Err(Error::invalid("mc_eval_samples must be >= 1"));
        }
        if !(self.sigma0 > 0.0 && self.sigma0.is_finite()) {
            return Err(Error::invalid(format!("sigma0 must be > 0, got {}", self.sigma0)));
        }
        if let Some(k) = self.kl_weight {
            if !(k >= 0.0 && k.is_finite()) {
                return Err(Error::invalid(format!("kl_weight must be >= 0, got {k}")));
            }
        }
        self.prior.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.base_lr,
            ..AdamConfig::default()
        }
    }

    fn kl_weight_for(&self, n: usize) -> f64 {
        self.kl_weight.unwrap_or(1.0 / n as f64)
    }
}

/// Shuffled-epoch minibatches. A batch never straddles two epochs: the
/// trailing partial batch of an epoch is skipped. When the batch covers the
/// whole dataset, rows come back in their original order.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    batch: usize,
    order: Vec<usize>,
    pos: usize,
    rng: seed::Rng,
}

impl BatchSampler {
    pub fn new(n: usize, batch: usize, seed: u64) -> Self {
        let mut s = Self {
            batch: batch.min(n),
            order: (0..n).collect(),
            pos: 0,
            rng: seed::rng(seed),
        };
        if s.batch < n {
            s.order.shuffle(&mut s.rng);
        }
        s
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        let n = self.order.len();
        if self.batch == n {
            return self.order.clone();
        }
        if self.pos + self.batch > n {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let out = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        out
    }
}

pub(crate) fn draw_noise(rng: &mut seed::Rng, len: usize, mode: NoiseMode) -> Vec<f64> {
    match mode {
        NoiseMode::Gaussian => (0..len).map(|_| StandardNormal.sample(rng)).collect(),
        NoiseMode::Zero => vec![0.0; len],
    }
}

/// Training domains sorted by id, after checking they are usable together.
pub(crate) fn sorted_domains(domains: &[DomainDataset], min: usize) -> Result<Vec<&DomainDataset>> {
    if domains.len() < min {
        return Err(Error::invalid(format!(
            "need at least {min} training domain(s), got {}",
            domains.len()
        )));
    }
    let mut sorted: Vec<&DomainDataset> = domains.iter().collect();
    sorted.sort_by(|a, b| a.domain_id().cmp(b.domain_id()));
    let mut seen = BTreeSet::new();
    for d in &sorted {
        if !seen.insert(d.domain_id()) {
            return Err(Error::invalid(format!("duplicate domain id '{}'", d.domain_id())));
        }
        if d.is_empty() {
            return Err(Error::invalid(format!("domain '{}' has no samples", d.domain_id())));
        }
        if d.x.cols() != sorted[0].x.cols() {
            return Err(Error::shape("domain feature count", sorted[0].x.cols(), d.x.cols()));
        }
    }
    Ok(sorted)
}

pub(crate) fn check_pair(featurizer: &NetworkSpec, classifier: &NetworkSpec, input_dim: usize) -> Result<()> {
    if featurizer.input_dim() != input_dim {
        return Err(Error::shape("featurizer input", input_dim, featurizer.input_dim()));
    }
    if classifier.input_dim() != featurizer.output_dim() {
        return Err(Error::shape("classifier input", featurizer.output_dim(), classifier.input_dim()));
    }
    Ok(())
}

/// A featurizer of either family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Featurizer {
    Deterministic(WeightSet),
    Bayesian(GaussianVariational),
}

impl Featurizer {
    pub fn spec(&self) -> &NetworkSpec {
        match self {
            Featurizer::Deterministic(w) => w.spec(),
            Featurizer::Bayesian(q) => q.spec(),
        }
    }

    pub fn as_deterministic(&self) -> Option<&WeightSet> {
        match self {
            Featurizer::Deterministic(w) => Some(w),
            Featurizer::Bayesian(_) => None,
        }
    }

    pub fn as_bayesian(&self) -> Option<&GaussianVariational> {
        match self {
            Featurizer::Bayesian(q) => Some(q),
            Featurizer::Deterministic(_) => None,
        }
    }
}

/// The aggregate featurizer, the per-domain featurizers it was built from
/// (sorted by domain id), and the shared classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturizerBank {
    pub f0: Featurizer,
    pub per_domain: Vec<Featurizer>,
    pub domain_ids: Vec<String>,
    pub classifier: WeightSet,
}

/// One row of the per-iteration training log.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationLog {
    pub iteration: usize,
    /// Per-domain step loss, in sorted domain order.
    pub domain_losses: Vec<f64>,
    /// KL of `f_0` at the merged step (PTG) or its L2 penalty (PTG-Lite).
    pub kl: f64,
    pub merged_loss: f64,
    pub dropped_count: usize,
}

#[derive(Debug, Clone)]
pub struct PtgOutput {
    pub bank: FeaturizerBank,
    pub log: Vec<IterationLog>,
    /// Dropout report from the last aggregation (PTG-Lite only).
    pub cov_report: Option<CovReport>,
}

pub fn write_iteration_log(path: &Path, domain_ids: &[String], log: &[IterationLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::invalid(format!("{other:?}")),
    })?;
    let mut header = vec!["iteration".to_string()];
    header.extend(domain_ids.iter().map(|id| format!("loss_{id}")));
    header.extend(["kl", "merged_loss", "dropped_count"].map(String::from));
    w.write_record(&header)?;
    for row in log {
        let mut rec = vec![row.iteration.to_string()];
        rec.extend(row.domain_losses.iter().map(|l| l.to_string()));
        rec.push(row.kl.to_string());
        rec.push(row.merged_loss.to_string());
        rec.push(row.dropped_count.to_string());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Borrowed view of the per-domain featurizers handed to observers.
#[derive(Debug, Clone, Copy)]
pub enum Members<'a> {
    Bayesian(&'a [GaussianVariational]),
    Deterministic(&'a [WeightSet]),
}

#[derive(Debug, Clone, Copy)]
pub enum FeaturizerRef<'a> {
    Bayesian(&'a GaussianVariational),
    Deterministic(&'a WeightSet),
}

/// Training checkpoints reported to an observer.
#[derive(Debug, Clone, Copy)]
pub enum Event<'a> {
    /// After domain `domain`'s inner step of `iteration`.
    DomainStep {
        iteration: usize,
        domain: &'a str,
        classifier: &'a WeightSet,
    },
    /// Right after `f_0` was rebuilt from the per-domain featurizers.
    Aggregated {
        iteration: usize,
        members: Members<'a>,
        f0: FeaturizerRef<'a>,
        cov: Option<&'a CovReport>,
    },
    /// After the merged-batch step on `f_0` and the classifier.
    MergedStep {
        iteration: usize,
        f0: FeaturizerRef<'a>,
        classifier: &'a WeightSet,
    },
}

/// Observer that ignores every event.
pub fn no_observer(_: &Event<'_>) {}

fn deterministic_probs(w: &WeightSet, classifier: &WeightSet, x: &Matrix) -> Result<Matrix> {
    let feats = predict_logits(w.spec(), w, x)?;
    Ok(softmax(&predict_logits(classifier.spec(), classifier, &feats)?))
}

/// Mean of the softmax outputs obtained with each noise vector in `noise`.
pub fn predict_with_noise(
    q: &GaussianVariational,
    classifier: &WeightSet,
    x: &Matrix,
    noise: &[Vec<f64>],
) -> Result<Matrix> {
    if noise.is_empty() {
        return Err(Error::invalid("need at least one noise sample"));
    }
    let mut acc = Matrix::zeros(x.rows(), classifier.spec().output_dim());
    for eps in noise {
        let p = deterministic_probs(&q.sample_weights(eps)?, classifier, x)?;
        acc.as_mut_slice().iter_mut().zip(p.as_slice()).for_each(|(a, v)| *a += v);
    }
    let k = noise.len() as f64;
    acc.as_mut_slice().iter_mut().for_each(|a| *a /= k);
    Ok(acc)
}

/// Class probabilities of `classifier(featurizer(x))`. Bayesian featurizers
/// average the softmax over `mc_samples` weight draws from `rng`;
/// deterministic ones ignore both.
pub fn predict(
    featurizer: &Featurizer,
    classifier: &WeightSet,
    x: &Matrix,
    mc_samples: usize,
    rng: &mut seed::Rng,
) -> Result<Matrix> {
    if mc_samples == 0 {
        return Err(Error::invalid("mc_samples must be >= 1"));
    }
    check_pair(featurizer.spec(), classifier.spec(), x.cols())?;
    match featurizer {
        Featurizer::Deterministic(w) => deterministic_probs(w, classifier, x),
        Featurizer::Bayesian(q) => {
            let noise: Vec<Vec<f64>> = (0..mc_samples)
                .map(|_| draw_noise(rng, q.len(), NoiseMode::Gaussian))
                .collect();
            predict_with_noise(q, classifier, x, &noise)
        }
    }
}

/// A trained model on disk: featurizer, classifier, and the input
/// standardization it expects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub algorithm: String,
    pub featurizer: Featurizer,
    pub classifier: WeightSet,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub standardizer: Option<Standardizer>,
}

impl ModelCheckpoint {
    pub fn validate(&self) -> Result<()> {
        check_pair(self.featurizer.spec(), self.classifier.spec(), self.featurizer.spec().input_dim())?;
        if let Some(s) = &self.standardizer {
            if s.mean.len() != self.featurizer.spec().input_dim() || s.std.len() != s.mean.len() {
                return Err(Error::shape("standardizer", self.featurizer.spec().input_dim(), s.mean.len()));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Self = serde_json::from_str(&text)?;
        ck.validate()?;
        Ok(ck)
    }
}
