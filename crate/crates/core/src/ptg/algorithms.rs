use crate::aggregate::{coefficient_of_variation, cov_dropout, map_mean, moment_match, CovReport, COV_EPSILON};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::nn::{composite_cross_entropy, Matrix, OptimizerState, WeightSet};
use crate::seed;
use crate::synth::DomainDataset;
use crate::variational::{elbo_loss, ElboOutput, GaussianVariational, PriorSpec};

use super::baselines::non_finite;
use super::{
    check_pair, draw_noise, sorted_domains, BatchSampler, Event, Featurizer, FeaturizerBank, FeaturizerRef,
    IterationLog, Members, PtgOutput, TrainConfig,
};

/// Per-domain data and sampling state, in sorted domain order.
struct DomainStreams<'a> {
    domains: Vec<&'a DomainDataset>,
    samplers: Vec<BatchSampler>,
    noise: Vec<seed::Rng>,
    total: usize,
}

impl<'a> DomainStreams<'a> {
    fn new(domains: &'a [DomainDataset], cfg: &TrainConfig, input_dim_check: impl Fn(usize) -> Result<()>) -> Result<Self> {
        let domains = sorted_domains(domains, 2)?;
        input_dim_check(domains[0].x.cols())?;
        let samplers = domains
            .iter()
            .map(|d| BatchSampler::new(d.len(), cfg.batch_size, derive_seed!(cfg.seed, "batch", d.domain_id())))
            .collect();
        let noise = domains
            .iter()
            .map(|d| seed::rng(derive_seed!(cfg.seed, "eps", d.domain_id())))
            .collect();
        let total = domains.iter().map(|d| d.len()).sum();
        Ok(Self {
            domains,
            samplers,
            noise,
            total,
        })
    }

    fn ids(&self) -> Vec<String> {
        self.domains.iter().map(|d| d.domain_id().to_string()).collect()
    }

    /// One minibatch per domain.
    fn draw(&mut self) -> Vec<(Matrix, Vec<usize>)> {
        self.domains
            .iter()
            .zip(&mut self.samplers)
            .map(|(d, s)| {
                let idx = s.next_batch();
                (d.x.select_rows(&idx), idx.iter().map(|&i| d.y[i]).collect())
            })
            .collect()
    }
}

fn merge(batches: &[(Matrix, Vec<usize>)]) -> Result<(Matrix, Vec<usize>)> {
    let parts: Vec<&Matrix> = batches.iter().map(|b| &b.0).collect();
    Ok((Matrix::vstack(&parts)?, batches.iter().flat_map(|b| b.1.iter().copied()).collect()))
}

fn elbo_at(
    context: impl FnOnce() -> String,
    q: &GaussianVariational,
    classifier: &WeightSet,
    batch: (&Matrix, &[usize]),
    kl_weight: f64,
    eps: &[f64],
    prior: &PriorSpec,
) -> Result<ElboOutput> {
    elbo_loss(q, classifier, batch.0, batch.1, kl_weight, eps, prior).map_err(|e| match e {
        Error::NonFinite { detail, .. } => Error::NonFinite {
            context: context(),
            detail,
        },
        other => other,
    })
}

/// Variational PTG.
///
/// Each outer iteration: (a) one ELBO step per domain on its own featurizer
/// `f_i` at `alpha * base_lr`, classifier frozen; (b) `f_0` is replaced by the
/// moment match of `f_1..f_N`; (c) one ELBO step on the union of this
/// iteration's minibatches, updating `f_0` and the classifier. `f_0` does not
/// feed back into the `f_i`: its refinement survives only through the
/// classifier and the final output.
pub fn ptg_train(
    domains: &[DomainDataset],
    init_featurizer: &GaussianVariational,
    init_classifier: &WeightSet,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&Event<'_>),
) -> Result<PtgOutput> {
    cfg.validate()?;
    let mut streams = DomainStreams::new(domains, cfg, |d| {
        check_pair(init_featurizer.spec(), init_classifier.spec(), d)
    })?;
    let ids = streams.ids();
    let n = ids.len();
    let p = init_featurizer.len();
    let lr = cfg.alpha * cfg.base_lr;
    let adam = cfg.adam();

    let mut members = vec![init_featurizer.clone(); n];
    let mut opt_members: Vec<(OptimizerState, OptimizerState)> =
        (0..n).map(|_| (OptimizerState::new(p, adam), OptimizerState::new(p, adam))).collect();
    let mut f0 = init_featurizer.clone();
    let mut classifier = init_classifier.clone();
    let (mut opt_mu0, mut opt_rho0) = (OptimizerState::new(p, adam), OptimizerState::new(p, adam));
    let mut opt_cls = OptimizerState::new(classifier.len(), adam);
    let mut merged_noise = seed::rng(derive_seed!(cfg.seed, "eps", "merged"));
    let merged_kl_weight = cfg.kl_weight_for(streams.total);

    let mut log = Vec::with_capacity(cfg.outer_iterations);
    for it in 0..cfg.outer_iterations {
        let batches = streams.draw();

        let mut domain_losses = Vec::with_capacity(n);
        for i in 0..n {
            let eps = draw_noise(&mut streams.noise[i], p, cfg.noise);
            let kw = cfg.kl_weight_for(streams.domains[i].len());
            let out = elbo_at(
                || format!("ptg iteration {it}, domain '{}'", ids[i]),
                &members[i],
                &classifier,
                (&batches[i].0, &batches[i].1),
                kw,
                &eps,
                &cfg.prior,
            )?;
            let (om, or) = &mut opt_members[i];
            om.step(members[i].mu_mut(), &out.grad_mu, lr)?;
            or.step(members[i].rho_mut(), &out.grad_rho, lr)?;
            domain_losses.push(out.loss);
            observer(&Event::DomainStep {
                iteration: it,
                domain: &ids[i],
                classifier: &classifier,
            });
        }

        f0 = moment_match(&members)?.q0;
        observer(&Event::Aggregated {
            iteration: it,
            members: Members::Bayesian(&members),
            f0: FeaturizerRef::Bayesian(&f0),
            cov: None,
        });

        let (xm, ym) = merge(&batches)?;
        let eps = draw_noise(&mut merged_noise, p, cfg.noise);
        let out = elbo_at(
            || format!("ptg iteration {it}, merged step"),
            &f0,
            &classifier,
            (&xm, &ym),
            merged_kl_weight,
            &eps,
            &cfg.prior,
        )?;
        opt_mu0.step(f0.mu_mut(), &out.grad_mu, lr)?;
        opt_rho0.step(f0.rho_mut(), &out.grad_rho, lr)?;
        opt_cls.step(classifier.as_mut_slice(), out.grad_classifier.as_slice(), lr)?;
        observer(&Event::MergedStep {
            iteration: it,
            f0: FeaturizerRef::Bayesian(&f0),
            classifier: &classifier,
        });
        log.push(IterationLog {
            iteration: it,
            domain_losses,
            kl: out.kl,
            merged_loss: out.loss,
            dropped_count: 0,
        });
    }

    Ok(PtgOutput {
        bank: FeaturizerBank {
            f0: Featurizer::Bayesian(f0),
            per_domain: members.into_iter().map(Featurizer::Bayesian).collect(),
            domain_ids: ids,
            classifier,
        },
        log,
        cov_report: None,
    })
}

/// Mean cross-entropy plus `l2 * ||w - anchor||^2` on the featurizer, and the
/// corresponding gradients.
fn map_objective(
    featurizer: &WeightSet,
    classifier: &WeightSet,
    x: &Matrix,
    y: &[usize],
    l2: f64,
    anchor: f64,
) -> Result<(f64, f64, Vec<f64>, WeightSet)> {
    let g = composite_cross_entropy(featurizer, classifier, x, y)?;
    let mut grad = g.featurizer.into_flat();
    let mut penalty = 0.0;
    if l2 != 0.0 {
        for (gj, w) in grad.iter_mut().zip(featurizer.as_slice()) {
            let d = w - anchor;
            penalty += d * d;
            *gj += 2.0 * l2 * d;
        }
        penalty *= l2;
    }
    Ok((g.loss + penalty, penalty, grad, g.classifier))
}

/// Deterministic PTG-Lite.
///
/// Same loop as [`ptg_train`] with MAP steps (cross-entropy plus an L2 pull
/// toward the prior mean with coefficient `kl_weight / (2 prior_std^2)`) and
/// `f_0 = cov_dropout(mean(f_i))`. Parameters dropped at step (b) stay at zero
/// through step (c): their gradient is masked and they are re-zeroed after the
/// optimizer update. The mask is recomputed at every aggregation.
pub fn ptg_lite_train(
    domains: &[DomainDataset],
    init_featurizer: &WeightSet,
    init_classifier: &WeightSet,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&Event<'_>),
) -> Result<PtgOutput> {
    cfg.validate()?;
    let mut streams = DomainStreams::new(domains, cfg, |d| {
        check_pair(init_featurizer.spec(), init_classifier.spec(), d)
    })?;
    let ids = streams.ids();
    let n = ids.len();
    let p = init_featurizer.len();
    let lr = cfg.alpha * cfg.base_lr;
    let adam = cfg.adam();
    let l2_for = |n_samples: usize| cfg.kl_weight_for(n_samples) / (2.0 * cfg.prior.std * cfg.prior.std);

    let mut members = vec![init_featurizer.clone(); n];
    let mut opt_members: Vec<OptimizerState> = (0..n).map(|_| OptimizerState::new(p, adam)).collect();
    let mut f0 = init_featurizer.clone();
    let mut classifier = init_classifier.clone();
    let mut opt_f0 = OptimizerState::new(p, adam);
    let mut opt_cls = OptimizerState::new(classifier.len(), adam);
    let mut last_report: Option<CovReport> = None;

    let mut log = Vec::with_capacity(cfg.outer_iterations);
    for it in 0..cfg.outer_iterations {
        let batches = streams.draw();

        let mut domain_losses = Vec::with_capacity(n);
        for i in 0..n {
            let (loss, _, grad, _) = map_objective(
                &members[i],
                &classifier,
                &batches[i].0,
                &batches[i].1,
                l2_for(streams.domains[i].len()),
                cfg.prior.mean,
            )?;
            if !loss.is_finite() {
                return Err(non_finite(format!("ptg-lite iteration {it}, domain '{}'", ids[i]), loss));
            }
            opt_members[i].step(members[i].as_mut_slice(), &grad, lr)?;
            domain_losses.push(loss);
            observer(&Event::DomainStep {
                iteration: it,
                domain: &ids[i],
                classifier: &classifier,
            });
        }

        let mean = map_mean(&members)?;
        let cov = coefficient_of_variation(&members, COV_EPSILON)?;
        let (dropped, report) = cov_dropout(&mean, &cov, cfg.beta)?;
        f0 = dropped;
        observer(&Event::Aggregated {
            iteration: it,
            members: Members::Deterministic(&members),
            f0: FeaturizerRef::Deterministic(&f0),
            cov: Some(&report),
        });

        let (xm, ym) = merge(&batches)?;
        let (loss, penalty, mut grad, grad_cls) =
            map_objective(&f0, &classifier, &xm, &ym, l2_for(streams.total), cfg.prior.mean)?;
        if !loss.is_finite() {
            return Err(non_finite(format!("ptg-lite iteration {it}, merged step"), loss));
        }
        for (g, &keep) in grad.iter_mut().zip(&report.mask) {
            if !keep {
                *g = 0.0;
            }
        }
        opt_f0.step(f0.as_mut_slice(), &grad, lr)?;
        for (w, &keep) in f0.as_mut_slice().iter_mut().zip(&report.mask) {
            if !keep {
                *w = 0.0;
            }
        }
        opt_cls.step(classifier.as_mut_slice(), grad_cls.as_slice(), lr)?;
        observer(&Event::MergedStep {
            iteration: it,
            f0: FeaturizerRef::Deterministic(&f0),
            classifier: &classifier,
        });
        log.push(IterationLog {
            iteration: it,
            domain_losses,
            kl: penalty,
            merged_loss: loss,
            dropped_count: report.dropped_count,
        });
        last_report = Some(report);
    }

    Ok(PtgOutput {
        bank: FeaturizerBank {
            f0: Featurizer::Deterministic(f0),
            per_domain: members.into_iter().map(Featurizer::Deterministic).collect(),
            domain_ids: ids,
            classifier,
        },
        log,
        cov_report: last_report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::NetworkSpec;
    use crate::ptg::{erm_bayesian_train, erm_train, no_observer, NoiseMode};
    use crate::synth::{DomainSpec, SpuriousBlobs};

    fn data(ids: &[(&str, f64)], n: usize) -> Vec<DomainDataset> {
        let specs: Vec<DomainSpec> = ids.iter().map(|(id, r)| DomainSpec::spurious(id, n, *r)).collect();
        SpuriousBlobs::default().generate(&specs, 9).unwrap()
    }

    fn specs() -> (NetworkSpec, NetworkSpec) {
        (NetworkSpec::relu(&[10, 8, 6]).unwrap(), NetworkSpec::relu(&[6, 2]).unwrap())
    }

    fn priors(d: &[DomainDataset], cfg: &TrainConfig) -> (WeightSet, WeightSet, GaussianVariational, WeightSet) {
        let (fs, cs) = specs();
        let erm = erm_train(d, &fs, &cs, cfg).unwrap();
        let b = erm_bayesian_train(d, &erm.featurizer, &erm.classifier, cfg).unwrap();
        (erm.featurizer, erm.classifier, b.featurizer, b.classifier)
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            outer_iterations: 15,
            erm_steps: 40,
            bayes_steps: 20,
            batch_size: 32,
            base_lr: 1e-2,
            alpha: 0.5,
            ..Default::default()
        }
    }

    #[test]
    fn alpha_zero_freezes_everything() {
        let d = data(&[("a", 0.9), ("b", 0.8), ("c", 0.7)], 120);
        let cfg = quick();
        let (ef, ec, bf, bc) = priors(&d, &cfg);
        let frozen = TrainConfig { alpha: 0.0, ..cfg };

        let out = ptg_train(&d, &bf, &bc, &frozen, &mut no_observer).unwrap();
        assert_eq!(out.bank.f0, Featurizer::Bayesian(bf.clone()));
        assert!(out.bank.per_domain.iter().all(|f| *f == Featurizer::Bayesian(bf.clone())));
        assert_eq!(out.bank.classifier, bc);

        let out = ptg_lite_train(&d, &ef, &ec, &frozen, &mut no_observer).unwrap();
        assert_eq!(out.bank.f0, Featurizer::Deterministic(ef.clone()));
        assert_eq!(out.bank.classifier, ec);
        assert!(out.log.iter().all(|r| r.dropped_count == 0));
    }

    #[test]
    fn classifier_frozen_during_domain_steps_and_f0_matches_recomputation() {
        let d = data(&[("a", 0.9), ("b", 0.8), ("c", 0.7)], 120);
        let cfg = quick();
        let (_, _, bf, bc) = priors(&d, &cfg);
        let mut cls_at_start: Option<WeightSet> = None;
        let mut checks = 0;
        let mut obs = |e: &Event<'_>| match e {
            Event::DomainStep { classifier, .. } => {
                let c = cls_at_start.get_or_insert_with(|| (*classifier).clone());
                assert_eq!(c, *classifier);
            }
            Event::Aggregated {
                members: Members::Bayesian(m),
                f0: FeaturizerRef::Bayesian(f0),
                ..
            } => {
                assert_eq!(&moment_match(m).unwrap().q0, *f0);
                checks += 1;
            }
            Event::MergedStep { .. } => cls_at_start = None,
            _ => panic!("unexpected event"),
        };
        ptg_train(&d, &bf, &bc, &cfg, &mut obs).unwrap();
        assert_eq!(checks, cfg.outer_iterations);
    }

    #[test]
    fn lite_f0_matches_recomputation_and_dropped_stay_zero() {
        let d = data(&[("a", 0.9), ("b", 0.8), ("c", 0.7)], 120);
        let cfg = TrainConfig { beta: 0.05, ..quick() };
        let (ef, ec, _, _) = priors(&d, &cfg);
        let mut mask: Vec<bool> = vec![];
        let mut any_dropped = false;
        let mut obs = |e: &Event<'_>| match e {
            Event::Aggregated {
                members: Members::Deterministic(m),
                f0: FeaturizerRef::Deterministic(f0),
                cov: Some(report),
                ..
            } => {
                let cov = coefficient_of_variation(m, COV_EPSILON).unwrap();
                let (want, _) = cov_dropout(&map_mean(m).unwrap(), &cov, cfg.beta).unwrap();
                assert_eq!(&want, *f0);
                mask = report.mask.clone();
                any_dropped |= report.dropped_count > 0;
            }
            Event::MergedStep {
                f0: FeaturizerRef::Deterministic(f0),
                ..
            } => {
                for (w, &keep) in f0.as_slice().iter().zip(&mask) {
                    if !keep {
                        assert_eq!(*w, 0.0);
                    }
                }
            }
            _ => {}
        };
        ptg_lite_train(&d, &ef, &ec, &cfg, &mut obs).unwrap();
        assert!(any_dropped);
    }

    #[test]
    fn huge_beta_is_plain_mean() {
        let d = data(&[("a", 0.9), ("b", 0.8)], 100);
        let cfg = TrainConfig { beta: 1e300, ..quick() };
        let (ef, ec, _, _) = priors(&d, &cfg);
        let mut obs = |e: &Event<'_>| {
            if let Event::Aggregated {
                members: Members::Deterministic(m),
                f0: FeaturizerRef::Deterministic(f0),
                cov: Some(r),
                ..
            } = e
            {
                assert_eq!(r.dropped_count, 0);
                assert_eq!(&map_mean(m).unwrap(), *f0);
            }
        };
        let out = ptg_lite_train(&d, &ef, &ec, &cfg, &mut obs).unwrap();
        assert!(out.log.iter().all(|r| r.dropped_count == 0));
    }

    #[test]
    fn identical_domains_keep_identical_members() {
        let one = data(&[("a", 0.9)], 60).remove(0);
        let mut d = Vec::new();
        for id in ["a", "b", "c"] {
            let mut x = one.clone();
            x.meta.domain_id = id.into();
            d.push(x);
        }
        let cfg = TrainConfig {
            batch_size: 1000,
            noise: NoiseMode::Zero,
            ..quick()
        };
        let (_, _, bf, bc) = priors(&d, &cfg);
        let mut between_checked = 0;
        let mut obs = |e: &Event<'_>| {
            if let Event::Aggregated {
                members: Members::Bayesian(m),
                ..
            } = e
            {
                assert!(m.iter().all(|q| q == &m[0]));
                assert!(moment_match(m).unwrap().between_variance.iter().all(|v| *v == 0.0));
                between_checked += 1;
            }
        };
        ptg_train(&d, &bf, &bc, &cfg, &mut obs).unwrap();
        assert_eq!(between_checked, cfg.outer_iterations);
    }

    #[test]
    fn domain_order_does_not_matter() {
        let d = data(&[("a", 0.9), ("b", 0.8), ("c", 0.7)], 100);
        let cfg = quick();
        let (ef, ec, bf, bc) = priors(&d, &cfg);
        let rev: Vec<DomainDataset> = d.iter().rev().cloned().collect();
        let a = ptg_train(&d, &bf, &bc, &cfg, &mut no_observer).unwrap();
        let b = ptg_train(&rev, &bf, &bc, &cfg, &mut no_observer).unwrap();
        assert_eq!(a.bank, b.bank);
        let a = ptg_lite_train(&d, &ef, &ec, &cfg, &mut no_observer).unwrap();
        let b = ptg_lite_train(&rev, &ef, &ec, &cfg, &mut no_observer).unwrap();
        assert_eq!(a.bank, b.bank);
    }

    #[test]
    fn alpha_zero_predictions_match_initialization() {
        let d = data(&[("a", 0.9), ("b", 0.8)], 100);
        let cfg = TrainConfig { alpha: 0.0, ..quick() };
        let (ef, ec, _, _) = priors(&d, &cfg);
        let out = ptg_lite_train(&d, &ef, &ec, &cfg, &mut no_observer).unwrap();
        let x = &d[0].x;
        let before = crate::ptg::predict(&Featurizer::Deterministic(ef), &ec, x, 1, &mut seed::rng(0)).unwrap();
        let after = crate::ptg::predict(&out.bank.f0, &out.bank.classifier, x, 1, &mut seed::rng(0)).unwrap();
        let am = |m: &Matrix| m.iter_rows().map(crate::nn::argmax).collect::<Vec<_>>();
        assert_eq!(am(&before), am(&after));
    }

    #[test]
    fn single_domain_rejected() {
        let d = data(&[("a", 0.9)], 50);
        let cfg = quick();
        let (ef, ec, bf, bc) = priors(&d, &cfg);
        assert!(ptg_train(&d, &bf, &bc, &cfg, &mut no_observer).is_err());
        assert!(ptg_lite_train(&d, &ef, &ec, &cfg, &mut no_observer).is_err());
    }

    #[test]
    fn log_has_one_row_per_iteration() {
        let d = data(&[("a", 0.9), ("b", 0.8)], 80);
        let cfg = quick();
        let (_, _, bf, bc) = priors(&d, &cfg);
        let out = ptg_train(&d, &bf, &bc, &cfg, &mut no_observer).unwrap();
        assert_eq!(out.log.len(), cfg.outer_iterations);
        assert!(out.log.iter().all(|r| r.domain_losses.len() == 2 && r.kl >= 0.0));
    }
}
