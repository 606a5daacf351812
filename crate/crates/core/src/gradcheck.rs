//! Central finite-difference checks of the analytic gradients.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::error::Result;
use crate::nn::{backward, forward, predict_logits, Matrix, NetworkSpec, WeightSet};
use crate::seed;
use crate::variational::{elbo_loss, kl_coordinate, sigma, GaussianVariational, PriorSpec};

pub const FD_STEP: f64 = 1e-5;

/// Gradients at or below this magnitude are compared absolutely. A central
/// difference at `FD_STEP` on an O(1) loss resolves gradients only to about
/// `ulp(loss) / FD_STEP ~ 1e-10`, so relative error is meaningless far below this.
pub const REL_FLOOR: f64 = 1e-5;

/// Instances with a hidden pre-activation this close to the ReLU kink are
/// redrawn: a central difference straddling the kink does not estimate
/// either one-sided derivative.
pub const KINK_MARGIN: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub fn central_difference(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|j| {
            probe[j] = x[j] + h;
            let up = f(&probe);
            probe[j] = x[j] - h;
            let down = f(&probe);
            probe[j] = x[j];
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn max_rel(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| relative_error(*a, *n))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub instances: usize,
    pub step: f64,
    pub backward_max_rel_err: f64,
    pub elbo_max_rel_err: f64,
}

fn random_spec(rng: &mut seed::Rng, out: Option<usize>) -> NetworkSpec {
    let layers = rng.random_range(1..=3);
    let mut dims: Vec<usize> = (0..=layers).map(|_| rng.random_range(1..=5)).collect();
    if let Some(o) = out {
        *dims.last_mut().unwrap() = o;
    }
    NetworkSpec::relu(&dims).expect("dims >= 1")
}

/// Every parameter, biases included, uniform in [-1, 1]: zero biases behind a
/// dead unit would put the next layer exactly on the ReLU kink.
fn random_weights(rng: &mut seed::Rng, spec: &NetworkSpec) -> WeightSet {
    let p = (0..spec.param_count()).map(|_| rng.random_range(-1.0..1.0)).collect();
    WeightSet::from_flat(spec, p).expect("sized")
}

/// Smallest `|pre-activation|` over every hidden unit and batch row.
fn kink_distance(spec: &NetworkSpec, w: &WeightSet, x: &Matrix) -> f64 {
    let dims = spec.dims();
    (1..spec.num_layers())
        .map(|l| {
            let prefix = NetworkSpec::relu(&dims[..=l]).expect("dims >= 1");
            let ws = WeightSet::from_flat(&prefix, w.as_slice()[..prefix.param_count()].to_vec()).expect("sized");
            let z = predict_logits(&prefix, &ws, x).expect("shapes");
            z.as_slice().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()))
        })
        .fold(f64::INFINITY, f64::min)
}

fn random_matrix(rng: &mut seed::Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}

/// Random network, batch and linear read-out `L = sum(out * R)`; returns the
/// worst relative error over weights and inputs.
pub fn check_backward_instance(seed_: u64) -> Result<f64> {
    let mut rng = seed::rng(seed_);
    let (spec, w, x, batch) = loop {
        let spec = random_spec(&mut rng, None);
        let w = random_weights(&mut rng, &spec);
        let batch = rng.random_range(1..=4);
        let x = random_matrix(&mut rng, batch, spec.input_dim());
        if kink_distance(&spec, &w, &x) > KINK_MARGIN {
            break (spec, w, x, batch);
        }
    };
    let r = random_matrix(&mut rng, batch, spec.output_dim());

    let (_, tape) = forward(&spec, &w, &x)?;
    let g = backward(&spec, &w, &tape, &r)?;

    let readout = |out: &Matrix| out.as_slice().iter().zip(r.as_slice()).map(|(a, b)| a * b).sum::<f64>();
    let num_w = central_difference(
        &mut |p| {
            let ws = WeightSet::from_flat(&spec, p.to_vec()).expect("sized");
            readout(&forward(&spec, &ws, &x).expect("shapes").0)
        },
        w.as_slice(),
        FD_STEP,
    );
    let num_x = central_difference(
        &mut |p| {
            let xs = Matrix::from_vec(batch, spec.input_dim(), p.to_vec()).expect("sized");
            readout(&forward(&spec, &w, &xs).expect("shapes").0)
        },
        x.as_slice(),
        FD_STEP,
    );
    Ok(max_rel(g.weights.as_slice(), &num_w).max(max_rel(g.input.as_slice(), &num_x)))
}

/// Random variational featurizer, classifier, batch and fixed noise; checks
/// the ELBO gradients with respect to `mu`, `rho` and the classifier.
pub fn check_elbo_instance(seed_: u64) -> Result<f64> {
    let mut rng = seed::rng(seed_);
    let (fspec, cspec, q, cls, x, y, eps) = loop {
        let fspec = random_spec(&mut rng, None);
        let classes = rng.random_range(2..=4);
        let cspec = NetworkSpec::relu(&[fspec.output_dim(), classes]).expect("dims >= 1");
        let base = random_weights(&mut rng, &fspec);
        let rho: Vec<f64> = (0..base.len()).map(|_| rng.random_range(-4.0..0.5)).collect();
        let q = GaussianVariational::new(fspec.clone(), base.flatten(), rho)?;
        let cls = random_weights(&mut rng, &cspec);
        let batch = rng.random_range(1..=4);
        let x = random_matrix(&mut rng, batch, fspec.input_dim());
        let y: Vec<usize> = (0..batch).map(|_| rng.random_range(0..classes)).collect();
        let eps: Vec<f64> = (0..q.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
        if kink_distance(&fspec, &q.sample_weights(&eps)?, &x) > KINK_MARGIN {
            break (fspec, cspec, q, cls, x, y, eps);
        }
    };
    let kl_weight = rng.random_range(0.0..1.0);
    let prior = PriorSpec::new(rng.random_range(-0.5..0.5), rng.random_range(0.5..2.0))?;

    let out = elbo_loss(&q, &cls, &x, &y, kl_weight, &eps, &prior)?;
    let eval = |mu: &[f64], rho: &[f64], c: &WeightSet| {
        let qq = GaussianVariational::new(fspec.clone(), mu.to_vec(), rho.to_vec()).expect("finite");
        elbo_loss(&qq, c, &x, &y, kl_weight, &eps, &prior).expect("finite")
    };
    // The loss is `kl_weight * KL + nll` and the KL is a sum of per-coordinate
    // terms. Differencing the whole loss buries gradients near 1e-6 under its
    // rounding noise (~ulp(loss) / h), so each summand is differenced on its
    // own: the likelihood over the full network, the KL through the one
    // coordinate it depends on.
    let kl_diff = |(m_up, s_up): (f64, f64), (m_down, s_down): (f64, f64)| {
        (kl_coordinate(m_up, s_up, &prior) - kl_coordinate(m_down, s_down, &prior)) / (2.0 * FD_STEP)
    };
    let mut num_mu = central_difference(&mut |m| eval(m, q.rho(), &cls).nll, q.mu(), FD_STEP);
    let mut num_rho = central_difference(&mut |r| eval(q.mu(), r, &cls).nll, q.rho(), FD_STEP);
    for (j, (&m, &r)) in q.mu().iter().zip(q.rho()).enumerate() {
        let s = sigma(r);
        num_mu[j] += kl_weight * kl_diff((m + FD_STEP, s), (m - FD_STEP, s));
        num_rho[j] += kl_weight * kl_diff((m, sigma(r + FD_STEP)), (m, sigma(r - FD_STEP)));
    }
    let num_c = central_difference(
        &mut |c| eval(q.mu(), q.rho(), &WeightSet::from_flat(&cspec, c.to_vec()).expect("sized")).nll,
        cls.as_slice(),
        FD_STEP,
    );
    let split = relative_error(out.loss, kl_weight * out.kl + out.nll);
    Ok(split
        .max(max_rel(&out.grad_mu, &num_mu))
        .max(max_rel(&out.grad_rho, &num_rho))
        .max(max_rel(out.grad_classifier.as_slice(), &num_c)))
}

pub fn run_grad_check(instances: usize, seed_: u64) -> Result<GradCheckReport> {
    let mut b: f64 = 0.0;
    let mut e: f64 = 0.0;
    for i in 0..instances {
        b = b.max(check_backward_instance(derive_seed!(seed_, "backward", i))?);
        e = e.max(check_elbo_instance(derive_seed!(seed_, "elbo", i))?);
    }
    Ok(GradCheckReport {
        instances,
        step: FD_STEP,
        backward_max_rel_err: b,
        elbo_max_rel_err: e,
    })
}
