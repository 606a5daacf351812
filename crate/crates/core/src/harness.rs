//! Leave-one-domain-out experiments: data generation, per-run training and
//! evaluation, hyperparameter selection on validation data, and result tables.
//!
//! Every run gets its own seed, derived from the base seed and the run's
//! coordinates (algorithm, held-out domain, grid index, repetition), so runs
//! can execute in any order or in parallel and still produce identical rows.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::error::{Error, Result};
use crate::nn::{accuracy, Matrix, NetworkSpec, WeightSet};
use crate::ptg::{
    erm_bayesian_train, erm_train, no_observer, predict, ptg_lite_train, ptg_train, BayesOutput, ErmOutput,
    Featurizer, PtgOutput, TrainConfig,
};
use crate::seed;
use crate::synth::{gen_rotated_moons, split_train_val, DomainDataset, DomainSpec, SpuriousBlobs, Standardizer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Erm,
    ErmBayesian,
    Ptg,
    PtgLite,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [Algorithm::Erm, Algorithm::ErmBayesian, Algorithm::Ptg, Algorithm::PtgLite];

    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Erm => "erm",
            Algorithm::ErmBayesian => "erm_bayesian",
            Algorithm::Ptg => "ptg",
            Algorithm::PtgLite => "ptg_lite",
        }
    }

    pub fn sweeps_alpha(self) -> bool {
        matches!(self, Algorithm::Ptg | Algorithm::PtgLite)
    }

    pub fn sweeps_beta(self) -> bool {
        self == Algorithm::PtgLite
    }

    fn min_training_domains(self) -> usize {
        if self.sweeps_alpha() {
            2
        } else {
            1
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Algorithm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown algorithm '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    #[default]
    SpuriousBlobs,
    RotatedMoons,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    /// Pooled validation splits of the training domains.
    #[default]
    TrainingDomain,
    /// Mean accuracy on each training domain when it is held out of training.
    LeaveOneOut,
}

impl FromStr for SelectionMode {
    type Err = Error;
    /// Accepts `training_domain` / `leave_one_out`, with `-` or `_`.
    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "training_domain" => Ok(SelectionMode::TrainingDomain),
            "leave_one_out" => Ok(SelectionMode::LeaveOneOut),
            _ => Err(Error::invalid(format!("unknown selection mode '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub featurizer_hidden: Vec<usize>,
    pub feature_dim: usize,
    pub classifier_hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            featurizer_hidden: vec![32],
            feature_dim: 16,
            classifier_hidden: vec![],
        }
    }
}

impl ModelConfig {
    pub fn specs(&self, input_dim: usize, classes: usize) -> Result<(NetworkSpec, NetworkSpec)> {
        let mut f = vec![input_dim];
        f.extend(&self.featurizer_hidden);
        f.push(self.feature_dim);
        let mut c = vec![self.feature_dim];
        c.extend(&self.classifier_hidden);
        c.push(classes);
        Ok((NetworkSpec::relu(&f)?, NetworkSpec::relu(&c)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            alpha: vec![0.05, 0.1, 0.5],
            beta: vec![0.05, 0.1],
        }
    }
}

/// One hyperparameter setting; `None` where the algorithm has no such knob.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub family: Family,
    /// Shape of the spurious-blobs family; ignored for other families.
    pub blobs: SpuriousBlobs,
    pub domains: Vec<DomainSpec>,
    /// Domains to hold out in turn; all domains when absent.
    pub test_domains: Option<Vec<String>>,
    pub algorithms: Vec<Algorithm>,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub n_seeds: usize,
    pub seed: u64,
    pub sweep: SweepGrid,
    pub selection: SelectionMode,
    pub split_ratio: f64,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            family: Family::SpuriousBlobs,
            blobs: SpuriousBlobs::default(),
            domains: vec![
                DomainSpec::spurious("rho_+0.95", 2000, 0.95),
                DomainSpec::spurious("rho_+0.90", 2000, 0.9),
                DomainSpec::spurious("rho_+0.80", 2000, 0.8),
                DomainSpec::spurious("rho_-0.90", 2000, -0.9),
            ],
            test_domains: Some(vec!["rho_-0.90".into()]),
            algorithms: Algorithm::ALL.to_vec(),
            train: TrainConfig::default(),
            model: ModelConfig::default(),
            n_seeds: 3,
            seed: 0,
            sweep: SweepGrid::default(),
            selection: SelectionMode::TrainingDomain,
            split_ratio: 0.8,
            out_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.n_seeds == 0 {
            return Err(Error::invalid("n_seeds must be >= 1"));
        }
        if self.algorithms.is_empty() {
            return Err(Error::invalid("no algorithms configured"));
        }
        if self.domains.len() < 2 {
            return Err(Error::invalid("need at least 2 domains for leave-one-domain-out"));
        }
        for d in &self.domains {
            d.validate()?;
        }
        let mut ids: Vec<&str> = self.domains.iter().map(|d| d.domain_id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::invalid(format!("duplicate domain id '{}'", w[0])));
        }
        if let Some(t) = &self.test_domains {
            if t.is_empty() {
                return Err(Error::invalid("test_domains is empty"));
            }
            if let Some(bad) = t.iter().find(|id| !ids.contains(&id.as_str())) {
                return Err(Error::invalid(format!("test domain '{bad}' is not among the domains")));
            }
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::invalid(format!("split_ratio must be in (0, 1), got {}", self.split_ratio)));
        }
        let swept = |f: fn(Algorithm) -> bool| self.algorithms.iter().any(|a| f(*a));
        if swept(Algorithm::sweeps_alpha) && self.sweep.alpha.is_empty() {
            return Err(Error::invalid("alpha grid is empty"));
        }
        if swept(Algorithm::sweeps_beta) && self.sweep.beta.is_empty() {
            return Err(Error::invalid("beta grid is empty"));
        }
        for (i, a) in self.sweep.alpha.iter().enumerate() {
            TrainConfig { alpha: *a, ..self.train.clone() }
                .validate()
                .map_err(|e| Error::invalid(format!("alpha grid entry {i}: {e}")))?;
        }
        for (i, b) in self.sweep.beta.iter().enumerate() {
            TrainConfig { beta: *b, ..self.train.clone() }
                .validate()
                .map_err(|e| Error::invalid(format!("beta grid entry {i}: {e}")))?;
        }
        let min_train = self.domains.len() - 1;
        if self.selection == SelectionMode::LeaveOneOut && min_train < 2 {
            return Err(Error::invalid("leave-one-out selection needs at least 3 domains"));
        }
        for a in &self.algorithms {
            let inner = if self.selection == SelectionMode::LeaveOneOut { 1 } else { 0 };
            if min_train - inner < a.min_training_domains() {
                return Err(Error::invalid(format!(
                    "{a} needs at least {} training domains",
                    a.min_training_domains()
                )));
            }
            if a.sweeps_alpha() && min_train < 3 {
                log::warn!("{a} with {min_train} training domains; 3 or more are recommended");
            }
        }
        Ok(())
    }

    /// Held-out domains, sorted.
    pub fn test_domain_ids(&self) -> Vec<String> {
        let mut ids = match &self.test_domains {
            Some(t) => t.clone(),
            None => self.domains.iter().map(|d| d.domain_id.clone()).collect(),
        };
        ids.sort();
        ids.dedup();
        ids
    }

    /// Grid for `alg`, alpha-major.
    pub fn grid(&self, alg: Algorithm) -> Vec<GridPoint> {
        match (alg.sweeps_alpha(), alg.sweeps_beta()) {
            (false, _) => vec![GridPoint { alpha: None, beta: None }],
            (true, false) => self
                .sweep
                .alpha
                .iter()
                .map(|&a| GridPoint { alpha: Some(a), beta: None })
                .collect(),
            (true, true) => self
                .sweep
                .alpha
                .iter()
                .flat_map(|&a| self.sweep.beta.iter().map(move |&b| GridPoint { alpha: Some(a), beta: Some(b) }))
                .collect(),
        }
    }

    pub fn expected_rows(&self) -> usize {
        let grid: usize = self.algorithms.iter().map(|a| self.grid(*a).len()).sum();
        self.test_domain_ids().len() * self.n_seeds * grid
    }

    pub fn generate(&self, rep: usize) -> Result<Vec<DomainDataset>> {
        let s = derive_seed!(self.seed, "data", rep);
        match self.family {
            Family::SpuriousBlobs => self.blobs.generate(&self.domains, s),
            Family::RotatedMoons => gen_rotated_moons(&self.domains, s),
        }
    }
}

/// One training run's outcome. Failed runs carry no accuracies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub algorithm: Algorithm,
    pub test_domain: String,
    pub seed: usize,
    pub grid_index: usize,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub val_acc: Option<f64>,
    pub test_acc: Option<f64>,
    pub wall_ms: u64,
    pub error: Option<String>,
}

impl ResultRow {
    fn key(&self) -> (Algorithm, &str, usize, usize) {
        (self.algorithm, &self.test_domain, self.seed, self.grid_index)
    }
}

pub const RESULTS_HEADER: &str = "algorithm,test_domain,seed,alpha,beta,val_acc,test_acc,wall_ms";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn results_csv(rows: &[ResultRow]) -> String {
    let mut out = String::from(RESULTS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.algorithm,
            r.test_domain,
            r.seed,
            opt(r.alpha),
            opt(r.beta),
            opt(r.val_acc),
            opt(r.test_acc),
            r.wall_ms
        ));
    }
    out
}

/// Parses a results CSV; `grid_index` is recovered from `config`'s grids.
pub fn read_results(path: &Path, config: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
    if header.join(",") != RESULTS_HEADER {
        return Err(Error::invalid(format!("{}: unexpected header", path.display())));
    }
    let parse_opt = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|_| Error::invalid(format!("bad number '{s}'")))
        }
    };
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let algorithm: Algorithm = rec[0].parse()?;
        let alpha = parse_opt(&rec[3])?;
        let beta = parse_opt(&rec[4])?;
        let grid_index = config
            .grid(algorithm)
            .iter()
            .position(|p| p.alpha == alpha && p.beta == beta)
            .ok_or_else(|| Error::invalid(format!("row {alpha:?}/{beta:?} for {algorithm} not in the configured grid")))?;
        let val_acc = parse_opt(&rec[5])?;
        rows.push(ResultRow {
            algorithm,
            test_domain: rec[1].to_string(),
            seed: rec[2].parse().map_err(|_| Error::invalid(format!("bad seed '{}'", &rec[2])))?,
            grid_index,
            alpha,
            beta,
            val_acc,
            test_acc: parse_opt(&rec[6])?,
            wall_ms: rec[7].parse().unwrap_or(0),
            error: if val_acc.is_none() { Some("failed".into()) } else { None },
        });
    }
    Ok(rows)
}

/// Training and validation splits of the training domains, standardized with
/// statistics of the training splits, plus the standardizer itself.
#[derive(Debug, Clone)]
pub struct Fold {
    pub train: Vec<DomainDataset>,
    pub val: Vec<DomainDataset>,
    pub standardizer: Standardizer,
}

impl Fold {
    /// Splits each of `train_ids` 8:2 (or `ratio`) with a seed keyed by the
    /// repetition and domain id, so a domain splits identically in every fold.
    pub fn prepare(all: &[DomainDataset], train_ids: &[&str], cfg: &ExperimentConfig, rep: usize) -> Result<Self> {
        let mut train = Vec::new();
        let mut val = Vec::new();
        for d in all.iter().filter(|d| train_ids.contains(&d.domain_id())) {
            let (t, v) = split_train_val(d, cfg.split_ratio, derive_seed!(cfg.seed, "split", rep, d.domain_id()))?;
            train.push(t);
            val.push(v);
        }
        let parts: Vec<&Matrix> = train.iter().map(|d| &d.x).collect();
        let standardizer = Standardizer::fit(&parts)?;
        Ok(Self {
            train: train.iter().map(|d| standardizer.apply_dataset(d)).collect(),
            val: val.iter().map(|d| standardizer.apply_dataset(d)).collect(),
            standardizer,
        })
    }
}

/// A trained featurizer and classifier.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub featurizer: Featurizer,
    pub classifier: WeightSet,
}

impl TrainedModel {
    pub fn accuracy(&self, x: &Matrix, y: &[usize], mc_samples: usize, eval_seed: u64) -> Result<f64> {
        let p = predict(&self.featurizer, &self.classifier, x, mc_samples, &mut seed::rng(eval_seed))?;
        Ok(accuracy(&p, y))
    }
}

/// Prior models a fold needs, trained once and shared by the runs that start from them.
struct Priors {
    erm: Option<std::result::Result<ErmOutput, String>>,
    bayes: Option<std::result::Result<BayesOutput, String>>,
}

fn run_seed(cfg: &ExperimentConfig, alg: Algorithm, test: &str, grid_idx: usize, rep: usize, inner: Option<&str>) -> u64 {
    match inner {
        None => derive_seed!(cfg.seed, alg.as_str(), test, grid_idx, rep),
        Some(j) => derive_seed!(cfg.seed, alg.as_str(), test, grid_idx, rep, "inner", j),
    }
}

fn fit_priors(
    cfg: &ExperimentConfig,
    fold: &Fold,
    specs: &(NetworkSpec, NetworkSpec),
    test: &str,
    rep: usize,
    inner: Option<&str>,
    algorithms: &[Algorithm],
) -> Priors {
    let need_bayes = algorithms.iter().any(|a| matches!(a, Algorithm::ErmBayesian | Algorithm::Ptg));
    let need_erm = need_bayes || algorithms.iter().any(|a| matches!(a, Algorithm::Erm | Algorithm::PtgLite));
    let erm = need_erm.then(|| {
        let tc = TrainConfig {
            seed: run_seed(cfg, Algorithm::Erm, test, 0, rep, inner),
            ..cfg.train.clone()
        };
        erm_train(&fold.train, &specs.0, &specs.1, &tc).map_err(|e| e.to_string())
    });
    let bayes = need_bayes.then(|| match erm.as_ref().expect("erm computed") {
        Ok(e) => {
            let tc = TrainConfig {
                seed: run_seed(cfg, Algorithm::ErmBayesian, test, 0, rep, inner),
                ..cfg.train.clone()
            };
            erm_bayesian_train(&fold.train, &e.featurizer, &e.classifier, &tc).map_err(|e| e.to_string())
        }
        Err(msg) => Err(format!("prior failed: {msg}")),
    });
    Priors { erm, bayes }
}

fn train_config_for(cfg: &ExperimentConfig, point: GridPoint, seed_: u64) -> TrainConfig {
    TrainConfig {
        alpha: point.alpha.unwrap_or(cfg.train.alpha),
        beta: point.beta.unwrap_or(cfg.train.beta),
        seed: seed_,
        ..cfg.train.clone()
    }
}

fn train_one(
    alg: Algorithm,
    fold: &Fold,
    priors: &Priors,
    tc: &TrainConfig,
) -> std::result::Result<TrainedModel, String> {
    let erm = || priors.erm.as_ref().expect("erm prior requested").as_ref().map_err(Clone::clone);
    let bayes = || priors.bayes.as_ref().expect("bayesian prior requested").as_ref().map_err(Clone::clone);
    let from_bank = |o: PtgOutput| TrainedModel {
        featurizer: o.bank.f0,
        classifier: o.bank.classifier,
    };
    match alg {
        Algorithm::Erm => erm().map(|e| TrainedModel {
            featurizer: Featurizer::Deterministic(e.featurizer.clone()),
            classifier: e.classifier.clone(),
        }),
        Algorithm::ErmBayesian => bayes().map(|b| TrainedModel {
            featurizer: Featurizer::Bayesian(b.featurizer.clone()),
            classifier: b.classifier.clone(),
        }),
        Algorithm::Ptg => {
            let b = bayes()?;
            ptg_train(&fold.train, &b.featurizer, &b.classifier, tc, &mut no_observer)
                .map(from_bank)
                .map_err(|e| e.to_string())
        }
        Algorithm::PtgLite => {
            let e = erm()?;
            ptg_lite_train(&fold.train, &e.featurizer, &e.classifier, tc, &mut no_observer)
                .map(from_bank)
                .map_err(|e| e.to_string())
        }
    }
}

fn pooled(sets: &[DomainDataset]) -> Result<(Matrix, Vec<usize>)> {
    let parts: Vec<&Matrix> = sets.iter().map(|d| &d.x).collect();
    Ok((Matrix::vstack(&parts)?, sets.iter().flat_map(|d| d.y.iter().copied()).collect()))
}

/// All rows for one held-out domain and repetition.
fn run_cell(cfg: &ExperimentConfig, all: &[DomainDataset], test: &str, rep: usize) -> Result<Vec<ResultRow>> {
    let train_ids: Vec<&str> = all.iter().map(|d| d.domain_id()).filter(|id| *id != test).collect();
    let test_ds = all.iter().find(|d| d.domain_id() == test).expect("validated test domain");
    let fold = Fold::prepare(all, &train_ids, cfg, rep)?;
    let specs = cfg.model.specs(test_ds.x.cols(), test_ds.meta.n_classes)?;
    let test_x = fold.standardizer.apply(&test_ds.x);
    let (val_x, val_y) = pooled(&fold.val)?;

    let prior_start = Instant::now();
    let priors = fit_priors(cfg, &fold, &specs, test, rep, None, &cfg.algorithms);
    let prior_ms = prior_start.elapsed().as_millis() as u64;

    // Inner folds for leave-one-out selection: each training domain held out in turn.
    let inner: Vec<(String, Fold, Priors)> = if cfg.selection == SelectionMode::LeaveOneOut {
        train_ids
            .iter()
            .map(|j| {
                let ids: Vec<&str> = train_ids.iter().copied().filter(|i| i != j).collect();
                let f = Fold::prepare(all, &ids, cfg, rep)?;
                let p = fit_priors(cfg, &f, &specs, test, rep, Some(j), &cfg.algorithms);
                Ok((j.to_string(), f, p))
            })
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };

    let jobs: Vec<(Algorithm, usize, GridPoint)> = cfg
        .algorithms
        .iter()
        .flat_map(|&a| cfg.grid(a).into_iter().enumerate().map(move |(g, p)| (a, g, p)))
        .collect();

    let rows = jobs
        .par_iter()
        .map(|&(alg, g, point)| {
            let start = Instant::now();
            let s = run_seed(cfg, alg, test, g, rep, None);
            let tc = train_config_for(cfg, point, s);
            let eval = derive_seed!(s, "eval");
            let outcome = train_one(alg, &fold, &priors, &tc).and_then(|m| {
                let test_acc = m
                    .accuracy(&test_x, &test_ds.y, tc.mc_eval_samples, derive_seed!(eval, "test"))
                    .map_err(|e| e.to_string())?;
                let val_acc = if inner.is_empty() {
                    m.accuracy(&val_x, &val_y, tc.mc_eval_samples, derive_seed!(eval, "val"))
                        .map_err(|e| e.to_string())?
                } else {
                    let mut total = 0.0;
                    for (j, f, p) in &inner {
                        let si = run_seed(cfg, alg, test, g, rep, Some(j));
                        let mi = train_one(alg, f, p, &train_config_for(cfg, point, si))?;
                        let held = all.iter().find(|d| d.domain_id() == j).expect("training domain");
                        total += mi
                            .accuracy(
                                &f.standardizer.apply(&held.x),
                                &held.y,
                                tc.mc_eval_samples,
                                derive_seed!(si, "eval", "val"),
                            )
                            .map_err(|e| e.to_string())?;
                    }
                    total / inner.len() as f64
                };
                Ok((val_acc, test_acc))
            });
            let mut wall_ms = start.elapsed().as_millis() as u64;
            if !alg.sweeps_alpha() {
                wall_ms += prior_ms;
            }
            let (val_acc, test_acc, error) = match outcome {
                Ok((v, t)) => (Some(v), Some(t), None),
                Err(msg) => {
                    log::warn!("{alg} test={test} seed={rep} grid={g} failed: {msg}");
                    (None, None, Some(msg))
                }
            };
            ResultRow {
                algorithm: alg,
                test_domain: test.to_string(),
                seed: rep,
                grid_index: g,
                alpha: point.alpha,
                beta: point.beta,
                val_acc,
                test_acc,
                wall_ms,
                error,
            }
        })
        .collect();
    Ok(rows)
}

/// Runs every (held-out domain, repetition, algorithm, grid point) and
/// returns the rows sorted by (algorithm, test domain, seed, grid index).
/// Training failures become rows without accuracies; setup failures
/// (bad data, impossible splits) abort.
pub fn run_leave_one_out(cfg: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    run_leave_one_out_with(cfg, &|_| {})
}

/// As [`run_leave_one_out`], calling `on_row` as each cell's rows complete.
pub fn run_leave_one_out_with(cfg: &ExperimentConfig, on_row: &(dyn Fn(&ResultRow) + Sync)) -> Result<Vec<ResultRow>> {
    cfg.validate()?;
    let data: Vec<Vec<DomainDataset>> = (0..cfg.n_seeds).map(|r| cfg.generate(r)).collect::<Result<_>>()?;
    let cells: Vec<(String, usize)> = cfg
        .test_domain_ids()
        .into_iter()
        .flat_map(|t| (0..cfg.n_seeds).map(move |r| (t.clone(), r)))
        .collect();
    let per_cell: Vec<Vec<ResultRow>> = cells
        .par_iter()
        .map(|(t, r)| {
            let rows = run_cell(cfg, &data[*r], t, *r)?;
            rows.iter().for_each(on_row);
            Ok(rows)
        })
        .collect::<Result<_>>()?;
    let mut rows: Vec<ResultRow> = per_cell.into_iter().flatten().collect();
    rows.sort_by(|a, b| a.key().cmp(&b.key()));
    Ok(rows)
}

/// Chosen hyperparameters for one (algorithm, held-out domain).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub algorithm: Algorithm,
    pub test_domain: String,
    pub grid_index: usize,
    pub point: GridPoint,
    /// Mean validation accuracy over seeds; `-inf` when any seed failed.
    pub mean_val_acc: f64,
}

fn cmp_opt(a: Option<f64>, b: Option<f64>) -> Ordering {
    match (a, b) {
        (Some(x), Some(y)) => x.total_cmp(&y),
        _ => Ordering::Equal,
    }
}

/// Picks, per (algorithm, held-out domain), the grid point with the highest
/// mean validation accuracy over seeds. Ties go to the smaller alpha, then the
/// smaller beta, then the earlier grid point. Every (grid point, seed) must
/// have a row; failed runs count as `-inf`.
pub fn select_model(rows: &[ResultRow], cfg: &ExperimentConfig) -> Result<Vec<Selection>> {
    let mut by_key: BTreeMap<(Algorithm, &str, usize, usize), &ResultRow> = BTreeMap::new();
    for r in rows {
        by_key.insert(r.key(), r);
    }
    let mut missing = Vec::new();
    let mut out = Vec::new();
    let mut algorithms = cfg.algorithms.clone();
    algorithms.sort();
    algorithms.dedup();
    for alg in algorithms {
        let grid = cfg.grid(alg);
        for test in cfg.test_domain_ids() {
            let mut best: Option<Selection> = None;
            for (g, point) in grid.iter().enumerate() {
                let mut sum = 0.0;
                for s in 0..cfg.n_seeds {
                    match by_key.get(&(alg, test.as_str(), s, g)) {
                        Some(r) => sum += r.val_acc.unwrap_or(f64::NEG_INFINITY),
                        None => missing.push(format!(
                            "{alg} test={test} seed={s} alpha={} beta={}",
                            opt(point.alpha),
                            opt(point.beta)
                        )),
                    }
                }
                let cand = Selection {
                    algorithm: alg,
                    test_domain: test.clone(),
                    grid_index: g,
                    point: *point,
                    mean_val_acc: sum / cfg.n_seeds as f64,
                };
                let better = match &best {
                    None => true,
                    Some(b) => cand
                        .mean_val_acc
                        .total_cmp(&b.mean_val_acc)
                        .then_with(|| cmp_opt(b.point.alpha, cand.point.alpha))
                        .then_with(|| cmp_opt(b.point.beta, cand.point.beta))
                        .then_with(|| b.grid_index.cmp(&cand.grid_index))
                        == Ordering::Greater,
                };
                if better {
                    best = Some(cand);
                }
            }
            out.extend(best);
        }
    }
    if missing.is_empty() {
        Ok(out)
    } else {
        Err(Error::MissingCells(missing))
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryCell {
    pub algorithm: Algorithm,
    pub test_domain: String,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    /// Out-of-domain accuracy over the seeds that completed.
    pub mean: Option<f64>,
    /// Population standard deviation.
    pub std: Option<f64>,
    pub n: usize,
    /// In-domain validation accuracy of the same runs.
    pub val_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub test_domains: Vec<String>,
    pub cells: Vec<SummaryCell>,
    /// Per algorithm: unweighted mean of the per-domain means.
    pub averages: Vec<(Algorithm, Option<f64>)>,
}

impl Summary {
    pub fn cell(&self, alg: Algorithm, test: &str) -> Option<&SummaryCell> {
        self.cells.iter().find(|c| c.algorithm == alg && c.test_domain == test)
    }

    pub fn average(&self, alg: Algorithm) -> Option<f64> {
        self.averages.iter().find(|(a, _)| *a == alg).and_then(|(_, m)| *m)
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| Algorithm |");
        for t in &self.test_domains {
            s.push_str(&format!(" {t} |"));
        }
        s.push_str(" Avg |\n|---|");
        s.push_str(&"---|".repeat(self.test_domains.len() + 1));
        s.push('\n');
        for (alg, avg) in &self.averages {
            s.push_str(&format!("| {alg} |"));
            for t in &self.test_domains {
                let cell = self.cell(*alg, t);
                match cell.and_then(|c| c.mean.zip(c.std)) {
                    Some((m, sd)) => s.push_str(&format!(" {m:.3} ± {sd:.3} |")),
                    None => s.push_str(" n/a |"),
                }
            }
            match avg {
                Some(m) => s.push_str(&format!(" {m:.3} |\n")),
                None => s.push_str(" n/a |\n"),
            }
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("algorithm,test_domain,alpha,beta,mean,std,n,val_mean\n");
        for c in &self.cells {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                c.algorithm,
                c.test_domain,
                opt(c.alpha),
                opt(c.beta),
                opt(c.mean),
                opt(c.std),
                c.n,
                opt(c.val_mean)
            ));
        }
        s
    }
}

/// Mean and population std of out-of-domain accuracy of the selected runs.
pub fn summarize(rows: &[ResultRow], selection: &[Selection]) -> Summary {
    let mut test_domains: Vec<String> = selection.iter().map(|s| s.test_domain.clone()).collect();
    test_domains.sort();
    test_domains.dedup();
    let mut cells = Vec::new();
    for sel in selection {
        let picked: Vec<&ResultRow> = rows
            .iter()
            .filter(|r| r.algorithm == sel.algorithm && r.test_domain == sel.test_domain && r.grid_index == sel.grid_index)
            .collect();
        let tests: Vec<f64> = picked.iter().filter_map(|r| r.test_acc).collect();
        let vals: Vec<f64> = picked.iter().filter_map(|r| r.val_acc).collect();
        let (mean, std) = if tests.is_empty() {
            (None, None)
        } else {
            let (m, s) = mean_std(&tests);
            (Some(m), Some(s))
        };
        cells.push(SummaryCell {
            algorithm: sel.algorithm,
            test_domain: sel.test_domain.clone(),
            alpha: sel.point.alpha,
            beta: sel.point.beta,
            mean,
            std,
            n: tests.len(),
            val_mean: (!vals.is_empty()).then(|| mean_std(&vals).0),
        });
    }
    cells.sort_by(|a, b| (a.algorithm, &a.test_domain).cmp(&(b.algorithm, &b.test_domain)));
    let mut algs: Vec<Algorithm> = cells.iter().map(|c| c.algorithm).collect();
    algs.dedup();
    let averages = algs
        .into_iter()
        .map(|a| {
            let means: Option<Vec<f64>> = cells.iter().filter(|c| c.algorithm == a).map(|c| c.mean).collect();
            (a, means.map(|m| m.iter().sum::<f64>() / m.len() as f64))
        })
        .collect();
    Summary {
        test_domains,
        cells,
        averages,
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `results.csv`, `selection.json`, `summary.md`, `summary.csv` and the
/// resolved `config.json` into `dir`.
pub fn write_outputs(
    dir: &Path,
    cfg: &ExperimentConfig,
    rows: &[ResultRow],
    selection: &[Selection],
    summary: &Summary,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(&dir.join("results.csv"), &results_csv(rows))?;
    write(&dir.join("selection.json"), &serde_json::to_string_pretty(selection)?)?;
    write(&dir.join("summary.md"), &summary.to_markdown())?;
    write(&dir.join("summary.csv"), &summary.to_csv())?;
    write(&dir.join("config.json"), &serde_json::to_string_pretty(cfg)?)
}

/// Trains `alg` once on every domain except `test` (repetition 0) and returns
/// the model with its fold, the full trainer output where there is one, and
/// validation / held-out accuracies.
pub fn train_single(
    cfg: &ExperimentConfig,
    alg: Algorithm,
    test: &str,
) -> Result<(TrainedModel, Fold, Option<PtgOutput>, f64, f64)> {
    cfg.validate()?;
    let all = cfg.generate(0)?;
    let test_ds = all
        .iter()
        .find(|d| d.domain_id() == test)
        .ok_or_else(|| Error::invalid(format!("unknown test domain '{test}'")))?;
    let train_ids: Vec<&str> = all.iter().map(|d| d.domain_id()).filter(|id| *id != test).collect();
    let fold = Fold::prepare(&all, &train_ids, cfg, 0)?;
    let specs = cfg.model.specs(test_ds.x.cols(), test_ds.meta.n_classes)?;
    let priors = fit_priors(cfg, &fold, &specs, test, 0, None, &[alg]);
    let s = run_seed(cfg, alg, test, 0, 0, None);
    let tc = TrainConfig {
        seed: s,
        ..cfg.train.clone()
    };
    let (model, full) = match alg {
        Algorithm::Ptg | Algorithm::PtgLite => {
            let out = match alg {
                Algorithm::Ptg => {
                    let b = priors.bayes.expect("requested").map_err(Error::InvalidArgument)?;
                    ptg_train(&fold.train, &b.featurizer, &b.classifier, &tc, &mut no_observer)?
                }
                _ => {
                    let e = priors.erm.expect("requested").map_err(Error::InvalidArgument)?;
                    ptg_lite_train(&fold.train, &e.featurizer, &e.classifier, &tc, &mut no_observer)?
                }
            };
            let m = TrainedModel {
                featurizer: out.bank.f0.clone(),
                classifier: out.bank.classifier.clone(),
            };
            (m, Some(out))
        }
        _ => (train_one(alg, &fold, &priors, &tc).map_err(Error::InvalidArgument)?, None),
    };
    let (vx, vy) = pooled(&fold.val)?;
    let eval = derive_seed!(s, "eval");
    let val = model.accuracy(&vx, &vy, tc.mc_eval_samples, derive_seed!(eval, "val"))?;
    let held = model.accuracy(&fold.standardizer.apply(&test_ds.x), &test_ds.y, tc.mc_eval_samples, derive_seed!(eval, "test"))?;
    Ok((model, fold, full, val, held))
}
