use crate::derive_seed;
use crate::error::{Error, Result};
use crate::nn::{composite_cross_entropy, Matrix, NetworkSpec, OptimizerState, WeightSet};
use crate::seed;
use crate::synth::DomainDataset;
use crate::variational::{elbo_loss, GaussianVariational};

use super::{check_pair, draw_noise, sorted_domains, BatchSampler, TrainConfig};

#[derive(Debug, Clone)]
pub struct ErmOutput {
    pub featurizer: WeightSet,
    pub classifier: WeightSet,
    /// Minibatch loss per step.
    pub losses: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BayesOutput {
    pub featurizer: GaussianVariational,
    pub classifier: WeightSet,
    /// Minibatch ELBO loss per step.
    pub losses: Vec<f64>,
}

/// Glorot initialization of a featurizer / classifier pair from `seed`.
pub fn init_network(featurizer: &NetworkSpec, classifier: &NetworkSpec, seed: u64) -> (WeightSet, WeightSet) {
    let f = WeightSet::glorot(featurizer, &mut seed::rng(derive_seed!(seed, "init", "featurizer")));
    let c = WeightSet::glorot(classifier, &mut seed::rng(derive_seed!(seed, "init", "classifier")));
    (f, c)
}

/// All training rows, concatenated in sorted domain order.
pub(crate) fn merged(domains: &[&DomainDataset]) -> Result<(Matrix, Vec<usize>)> {
    let parts: Vec<&Matrix> = domains.iter().map(|d| &d.x).collect();
    let x = Matrix::vstack(&parts)?;
    let y = domains.iter().flat_map(|d| d.y.iter().copied()).collect();
    Ok((x, y))
}

pub(crate) fn non_finite(context: String, loss: f64) -> Error {
    Error::NonFinite {
        context,
        detail: format!("loss = {loss}"),
    }
}

/// ERM from a fresh Glorot initialization on the union of `domains`.
pub fn erm_train(
    domains: &[DomainDataset],
    featurizer: &NetworkSpec,
    classifier: &NetworkSpec,
    cfg: &TrainConfig,
) -> Result<ErmOutput> {
    let (f, c) = init_network(featurizer, classifier, cfg.seed);
    erm_train_from(domains, f, c, cfg.erm_steps, cfg)
}

/// `steps` Adam steps of mean cross-entropy on merged minibatches at `base_lr`.
pub fn erm_train_from(
    domains: &[DomainDataset],
    mut featurizer: WeightSet,
    mut classifier: WeightSet,
    steps: usize,
    cfg: &TrainConfig,
) -> Result<ErmOutput> {
    cfg.validate()?;
    let sorted = sorted_domains(domains, 1)?;
    let (x, y) = merged(&sorted)?;
    check_pair(featurizer.spec(), classifier.spec(), x.cols())?;

    let mut sampler = BatchSampler::new(y.len(), cfg.batch_size, derive_seed!(cfg.seed, "batch", "merged"));
    let mut opt_f = OptimizerState::new(featurizer.len(), cfg.adam());
    let mut opt_c = OptimizerState::new(classifier.len(), cfg.adam());
    let mut losses = Vec::with_capacity(steps);
    for t in 0..steps {
        let idx = sampler.next_batch();
        let xb = x.select_rows(&idx);
        let yb: Vec<usize> = idx.iter().map(|&i| y[i]).collect();
        let g = composite_cross_entropy(&featurizer, &classifier, &xb, &yb)?;
        if !g.loss.is_finite() {
            return Err(non_finite(format!("erm step {t}"), g.loss));
        }
        opt_f.step(featurizer.as_mut_slice(), g.featurizer.as_slice(), cfg.base_lr)?;
        opt_c.step(classifier.as_mut_slice(), g.classifier.as_slice(), cfg.base_lr)?;
        losses.push(g.loss);
    }
    Ok(ErmOutput {
        featurizer,
        classifier,
        losses,
    })
}

/// Variational training of the featurizer on merged data, starting from a
/// deterministic prior network lifted to `N(w, sigma0^2)`; the classifier
/// stays deterministic and is trained jointly.
pub fn erm_bayesian_train(
    domains: &[DomainDataset],
    prior_featurizer: &WeightSet,
    prior_classifier: &WeightSet,
    cfg: &TrainConfig,
) -> Result<BayesOutput> {
    cfg.validate()?;
    let sorted = sorted_domains(domains, 1)?;
    let (x, y) = merged(&sorted)?;
    check_pair(prior_featurizer.spec(), prior_classifier.spec(), x.cols())?;

    let mut q = GaussianVariational::from_deterministic(prior_featurizer, cfg.sigma0)?;
    let mut classifier = prior_classifier.clone();
    let kl_weight = cfg.kl_weight_for(y.len());
    let mut sampler = BatchSampler::new(y.len(), cfg.batch_size, derive_seed!(cfg.seed, "batch", "merged"));
    let mut noise = seed::rng(derive_seed!(cfg.seed, "eps", "merged"));
    let mut opt_mu = OptimizerState::new(q.len(), cfg.adam());
    let mut opt_rho = OptimizerState::new(q.len(), cfg.adam());
    let mut opt_c = OptimizerState::new(classifier.len(), cfg.adam());
    let mut losses = Vec::with_capacity(cfg.bayes_steps);
    for t in 0..cfg.bayes_steps {
        let idx = sampler.next_batch();
        let xb = x.select_rows(&idx);
        let yb: Vec<usize> = idx.iter().map(|&i| y[i]).collect();
        let eps = draw_noise(&mut noise, q.len(), cfg.noise);
        let out = elbo_loss(&q, &classifier, &xb, &yb, kl_weight, &eps, &cfg.prior)
            .map_err(|e| match e {
                Error::NonFinite { detail, .. } => Error::NonFinite {
                    context: format!("erm-bayesian step {t}"),
                    detail,
                },
                other => other,
            })?;
        opt_mu.step(q.mu_mut(), &out.grad_mu, cfg.base_lr)?;
        opt_rho.step(q.rho_mut(), &out.grad_rho, cfg.base_lr)?;
        opt_c.step(classifier.as_mut_slice(), out.grad_classifier.as_slice(), cfg.base_lr)?;
        losses.push(out.loss);
    }
    Ok(BayesOutput {
        featurizer: q,
        classifier,
        losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{accuracy, predict_logits};
    use crate::ptg::{predict, Featurizer, NoiseMode};
    use crate::synth::{DatasetMeta, DomainSpec, SpuriousBlobs};

    fn meta(id: &str, n: usize) -> DatasetMeta {
        DatasetMeta {
            domain_id: id.into(),
            family: "toy".into(),
            n_samples: n,
            n_classes: 2,
            invariant_columns: vec![0, 1],
            spurious_columns: vec![],
            spurious_correlation: 0.0,
            rotation_deg: 0.0,
            noise_std: 0.0,
        }
    }

    /// Two clusters separated by a margin along x0 + x1.
    fn separable(id: &str, n: usize, seed_: u64) -> DomainDataset {
        use rand::Rng as _;
        let mut rng = seed::rng(seed_);
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let label = i % 2;
            let sign = if label == 1 { 1.0 } else { -1.0 };
            let a: f64 = rng.random_range(-1.0..1.0);
            let b: f64 = rng.random_range(0.3..1.5);
            rows.push(vec![a + sign * b, -a + sign * b]);
            y.push(label);
        }
        DomainDataset {
            x: Matrix::from_rows(&rows).unwrap(),
            y,
            meta: meta(id, n),
            spurious_labels: vec![],
        }
    }

    fn specs() -> (NetworkSpec, NetworkSpec) {
        (NetworkSpec::relu(&[2, 8, 4]).unwrap(), NetworkSpec::relu(&[4, 2]).unwrap())
    }

    #[test]
    fn erm_separates_linearly_separable_data() {
        let data = [separable("a", 200, 1)];
        let (fs, cs) = specs();
        let cfg = TrainConfig {
            base_lr: 1e-2,
            erm_steps: 500,
            ..Default::default()
        };
        let out = erm_train(&data, &fs, &cs, &cfg).unwrap();
        let h = predict_logits(&fs, &out.featurizer, &data[0].x).unwrap();
        let z = predict_logits(&cs, &out.classifier, &h).unwrap();
        assert!(accuracy(&z, &data[0].y) >= 0.99);
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let data = [separable("a", 50, 1)];
        let (fs, cs) = specs();
        let cfg = TrainConfig {
            erm_steps: 0,
            ..Default::default()
        };
        let out = erm_train(&data, &fs, &cs, &cfg).unwrap();
        let (f, c) = init_network(&fs, &cs, cfg.seed);
        assert_eq!(out.featurizer, f);
        assert_eq!(out.classifier, c);
    }

    #[test]
    fn erm_is_deterministic() {
        let data = [separable("a", 100, 1), separable("b", 80, 2)];
        let (fs, cs) = specs();
        let cfg = TrainConfig {
            erm_steps: 50,
            ..Default::default()
        };
        let a = erm_train(&data, &fs, &cs, &cfg).unwrap();
        let b = erm_train(&data, &fs, &cs, &cfg).unwrap();
        assert_eq!(a.featurizer, b.featurizer);
        assert_eq!(a.classifier, b.classifier);
        let c = erm_train(&[data[1].clone(), data[0].clone()], &fs, &cs, &cfg).unwrap();
        assert_eq!(a.featurizer, c.featurizer);
    }

    #[test]
    fn bayesian_with_zero_noise_and_no_kl_is_continued_erm() {
        let data = [separable("a", 120, 3), separable("b", 120, 4)];
        let (fs, cs) = specs();
        let cfg = TrainConfig {
            erm_steps: 30,
            bayes_steps: 40,
            kl_weight: Some(0.0),
            noise: NoiseMode::Zero,
            sigma0: 1e-12,
            ..Default::default()
        };
        let prior = erm_train(&data, &fs, &cs, &cfg).unwrap();
        let bayes = erm_bayesian_train(&data, &prior.featurizer, &prior.classifier, &cfg).unwrap();
        let cont = erm_train_from(&data, prior.featurizer, prior.classifier, cfg.bayes_steps, &cfg).unwrap();
        assert_eq!(bayes.losses.len(), cont.losses.len());
        for (a, b) in bayes.losses.iter().zip(&cont.losses) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn posterior_std_shrinks_on_informative_data() {
        let blobs = SpuriousBlobs::default();
        let specs_: Vec<DomainSpec> = [("d0", 0.9), ("d1", 0.8)]
            .iter()
            .map(|(id, r)| DomainSpec::spurious(id, 400, *r))
            .collect();
        let data = blobs.generate(&specs_, 5).unwrap();
        let fs = NetworkSpec::relu(&[blobs.dims(), 8, 4]).unwrap();
        let cs = NetworkSpec::relu(&[4, 2]).unwrap();
        let cfg = TrainConfig {
            erm_steps: 200,
            bayes_steps: 400,
            base_lr: 1e-2,
            sigma0: 1.0,
            ..Default::default()
        };
        let prior = erm_train(&data, &fs, &cs, &cfg).unwrap();
        let bayes = erm_bayesian_train(&data, &prior.featurizer, &prior.classifier, &cfg).unwrap();
        let mean_sigma = bayes.featurizer.sigmas().iter().sum::<f64>() / bayes.featurizer.len() as f64;
        assert!(mean_sigma < 1.0, "mean sigma {mean_sigma}");
    }

    #[test]
    fn bayesian_predictions_normalize() {
        let data = [separable("a", 60, 3)];
        let (fs, cs) = specs();
        let cfg = TrainConfig {
            erm_steps: 10,
            bayes_steps: 10,
            ..Default::default()
        };
        let prior = erm_train(&data, &fs, &cs, &cfg).unwrap();
        let b = erm_bayesian_train(&data, &prior.featurizer, &prior.classifier, &cfg).unwrap();
        let p = predict(&Featurizer::Bayesian(b.featurizer), &b.classifier, &data[0].x, 10, &mut seed::rng(1)).unwrap();
        for r in p.iter_rows() {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn divergence_aborts() {
        let mut d = separable("a", 20, 3);
        d.x.as_mut_slice()[0] = f64::NAN;
        let (fs, cs) = specs();
        let cfg = TrainConfig {
            erm_steps: 5,
            batch_size: 100,
            ..Default::default()
        };
        assert!(matches!(erm_train(&[d], &fs, &cs, &cfg), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn mismatched_specs_rejected() {
        let data = [separable("a", 20, 3)];
        let fs = NetworkSpec::relu(&[3, 4]).unwrap();
        let cs = NetworkSpec::relu(&[4, 2]).unwrap();
        assert!(matches!(erm_train(&data, &fs, &cs, &TrainConfig::default()), Err(Error::Shape { .. })));
    }
}
