//! Seeded multi-domain classification datasets.
//!
//! Two families:
//!
//! * **spurious blobs**: `d_inv` invariant coordinates drawn from a
//!   class-conditional Gaussian that is the same in every domain, followed by
//!   `d_spur` spurious coordinates centred on a domain-specific direction.
//!   The spurious "label" agrees with the true label with probability
//!   `(1 + rho_d) / 2`, so a negative correlation flips the shortcut.
//! * **rotated moons**: two interleaved half circles, rotated per domain.
//!
//! All families are binary. Each domain draws from its own RNG stream keyed
//! by `(seed, domain_id)`, so a domain's samples do not depend on which other
//! domains are generated alongside it.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::error::{Error, Result};
use crate::nn::Matrix;
use crate::seed;

pub const NUM_CLASSES: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain_id: String,
    #[serde(default = "default_n_samples")]
    pub n_samples: usize,
    /// Correlation between the spurious signal and the label, in `[-1, 1]`.
    #[serde(default)]
    pub spurious_correlation: f64,
    #[serde(default)]
    pub rotation_deg: f64,
    #[serde(default = "default_noise")]
    pub noise_std: f64,
}

fn default_n_samples() -> usize {
    2000
}

fn default_noise() -> f64 {
    0.5
}

impl DomainSpec {
    pub fn spurious(id: &str, n_samples: usize, rho: f64) -> Self {
        Self {
            domain_id: id.to_string(),
            n_samples,
            spurious_correlation: rho,
            rotation_deg: 0.0,
            noise_std: default_noise(),
        }
    }

    pub fn rotated(id: &str, n_samples: usize, rotation_deg: f64, noise_std: f64) -> Self {
        Self {
            domain_id: id.to_string(),
            n_samples,
            spurious_correlation: 0.0,
            rotation_deg,
            noise_std,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::invalid(format!("domain {}: n_samples must be >= 1", self.domain_id)));
        }
        if !(self.spurious_correlation.abs() <= 1.0) {
            return Err(Error::invalid(format!(
                "domain {}: spurious correlation {} outside [-1, 1]",
                self.domain_id, self.spurious_correlation
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::invalid(format!(
                "domain {}: noise_std must be >= 0",
                self.domain_id
            )));
        }
        if !self.rotation_deg.is_finite() {
            return Err(Error::invalid(format!("domain {}: rotation must be finite", self.domain_id)));
        }
        Ok(())
    }
}

/// Generator metadata carried alongside each dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub domain_id: String,
    pub family: String,
    pub n_samples: usize,
    pub n_classes: usize,
    pub invariant_columns: Vec<usize>,
    pub spurious_columns: Vec<usize>,
    pub spurious_correlation: f64,
    pub rotation_deg: f64,
    pub noise_std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    pub x: Matrix,
    pub y: Vec<usize>,
    pub meta: DatasetMeta,
    /// Class the spurious coordinates were drawn for, per sample. Empty when
    /// the family has no spurious signal or the data was imported from CSV.
    pub spurious_labels: Vec<usize>,
}

impl DomainDataset {
    pub fn domain_id(&self) -> &str {
        &self.meta.domain_id
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        let mut meta = self.meta.clone();
        meta.n_samples = indices.len();
        Self {
            x: self.x.select_rows(indices),
            y: indices.iter().map(|&i| self.y[i]).collect(),
            spurious_labels: if self.spurious_labels.is_empty() {
                Vec::new()
            } else {
                indices.iter().map(|&i| self.spurious_labels[i]).collect()
            },
            meta,
        }
    }
}

/// Shape of the spurious-blobs family. Everything here is shared by all domains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpuriousBlobs {
    pub d_inv: usize,
    pub d_spur: usize,
    /// Distance of each invariant class centre from the origin.
    pub inv_separation: f64,
    pub inv_noise_std: f64,
    /// Distance of each spurious class centre from the origin.
    pub spur_separation: f64,
    /// Weight of the domain-specific component of the spurious direction
    /// relative to the shared one.
    pub spur_domain_spread: f64,
}

impl Default for SpuriousBlobs {
    fn default() -> Self {
        Self {
            d_inv: 5,
            d_spur: 5,
            inv_separation: 0.6,
            inv_noise_std: 0.5,
            spur_separation: 1.0,
            spur_domain_spread: 1.0,
        }
    }
}

impl SpuriousBlobs {
    pub fn dims(&self) -> usize {
        self.d_inv + self.d_spur
    }

    /// Unit direction the spurious class centres sit on for this domain.
    /// Depends on the domain id only, never on the sampling seed.
    pub fn spurious_direction(&self, domain_id: &str) -> Vec<f64> {
        let mut rng = seed::rng(derive_seed!(0, "spurious-direction", domain_id));
        let shared = 1.0 / (self.d_spur as f64).sqrt();
        let mut v: Vec<f64> = (0..self.d_spur)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                shared + self.spur_domain_spread * z / (self.d_spur as f64).sqrt()
            })
            .collect();
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.iter_mut().for_each(|a| *a /= norm);
        v
    }

    /// Invariant class centre for `class`.
    pub fn invariant_center(&self, class: usize) -> Vec<f64> {
        let sign = if class == 0 { -1.0 } else { 1.0 };
        let c = sign * self.inv_separation / (self.d_inv as f64).sqrt();
        vec![c; self.d_inv]
    }

    pub fn generate(&self, specs: &[DomainSpec], seed: u64) -> Result<Vec<DomainDataset>> {
        if self.d_inv == 0 || self.d_spur == 0 {
            return Err(Error::invalid("spurious blobs need d_inv >= 1 and d_spur >= 1"));
        }
        if !(self.inv_noise_std >= 0.0) {
            return Err(Error::invalid("inv_noise_std must be >= 0"));
        }
        specs.iter().map(|s| self.generate_one(s, seed)).collect()
    }

    fn generate_one(&self, spec: &DomainSpec, seed: u64) -> Result<DomainDataset> {
        spec.validate()?;
        let mut rng = seed::rng(derive_seed!(seed, "blobs", &spec.domain_id));
        let dir = self.spurious_direction(&spec.domain_id);
        let centers = [self.invariant_center(0), self.invariant_center(1)];
        let p_align = (1.0 + spec.spurious_correlation) / 2.0;
        let d = self.dims();

        let mut data = Vec::with_capacity(spec.n_samples * d);
        let mut y = Vec::with_capacity(spec.n_samples);
        let mut spur = Vec::with_capacity(spec.n_samples);
        for _ in 0..spec.n_samples {
            let label = rng.random_range(0..NUM_CLASSES);
            let s = if rng.random::<f64>() < p_align { label } else { 1 - label };
            for &c in &centers[label] {
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push(c + self.inv_noise_std * z);
            }
            let sign = if s == 0 { -1.0 } else { 1.0 };
            for &v in &dir {
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push(sign * self.spur_separation * v + spec.noise_std * z);
            }
            y.push(label);
            spur.push(s);
        }
        Ok(DomainDataset {
            x: Matrix::from_vec(spec.n_samples, d, data)?,
            y,
            spurious_labels: spur,
            meta: DatasetMeta {
                domain_id: spec.domain_id.clone(),
                family: "spurious_blobs".into(),
                n_samples: spec.n_samples,
                n_classes: NUM_CLASSES,
                invariant_columns: (0..self.d_inv).collect(),
                spurious_columns: (self.d_inv..d).collect(),
                spurious_correlation: spec.spurious_correlation,
                rotation_deg: spec.rotation_deg,
                noise_std: spec.noise_std,
            },
        })
    }
}

/// Spurious blobs with the default family shape and the given dimensions.
pub fn gen_spurious_blobs(
    specs: &[DomainSpec],
    d_inv: usize,
    d_spur: usize,
    seed: u64,
) -> Result<Vec<DomainDataset>> {
    SpuriousBlobs {
        d_inv,
        d_spur,
        ..SpuriousBlobs::default()
    }
    .generate(specs, seed)
}

/// Point on one of the two unit half-circle arcs at parameter `t in [0, pi]`.
pub fn moon_arc(class: usize, t: f64) -> [f64; 2] {
    if class == 0 {
        [t.cos(), t.sin()]
    } else {
        [1.0 - t.cos(), 0.5 - t.sin()]
    }
}

pub fn rotate(p: [f64; 2], deg: f64) -> [f64; 2] {
    let (s, c) = deg.to_radians().sin_cos();
    [c * p[0] - s * p[1], s * p[0] + c * p[1]]
}

/// Two interleaved half circles per domain; noise is added on the arc, then
/// the whole cloud is rotated about the origin by `rotation_deg`.
pub fn gen_rotated_moons(specs: &[DomainSpec], seed: u64) -> Result<Vec<DomainDataset>> {
    specs
        .iter()
        .map(|spec| {
            spec.validate()?;
            let mut rng = seed::rng(derive_seed!(seed, "moons", &spec.domain_id));
            let mut data = Vec::with_capacity(spec.n_samples * 2);
            let mut y = Vec::with_capacity(spec.n_samples);
            for _ in 0..spec.n_samples {
                let label = rng.random_range(0..NUM_CLASSES);
                let t = rng.random_range(0.0..=std::f64::consts::PI);
                let [a, b] = moon_arc(label, t);
                let za: f64 = StandardNormal.sample(&mut rng);
                let zb: f64 = StandardNormal.sample(&mut rng);
                let p = rotate([a + spec.noise_std * za, b + spec.noise_std * zb], spec.rotation_deg);
                data.extend_from_slice(&p);
                y.push(label);
            }
            Ok(DomainDataset {
                x: Matrix::from_vec(spec.n_samples, 2, data)?,
                y,
                spurious_labels: Vec::new(),
                meta: DatasetMeta {
                    domain_id: spec.domain_id.clone(),
                    family: "rotated_moons".into(),
                    n_samples: spec.n_samples,
                    n_classes: NUM_CLASSES,
                    invariant_columns: vec![0, 1],
                    spurious_columns: Vec::new(),
                    spurious_correlation: 0.0,
                    rotation_deg: spec.rotation_deg,
                    noise_std: spec.noise_std,
                },
            })
        })
        .collect()
}

/// Seeded shuffle split into `floor(n * ratio)` training rows and the rest.
pub fn split_train_val(ds: &DomainDataset, ratio: f64, seed: u64) -> Result<(DomainDataset, DomainDataset)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!("split ratio must be in (0, 1), got {ratio}")));
    }
    let n = ds.len();
    let n_train = (n as f64 * ratio).floor() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::invalid(format!(
            "split of {n} samples at ratio {ratio} leaves one side empty"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::rng(seed));
    let (train, val) = idx.split_at(n_train);
    Ok((ds.select(train), ds.select(val)))
}

/// Per-column centring and scaling fitted on training rows only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(parts: &[&Matrix]) -> Result<Self> {
        let cols = parts.first().map_or(0, |m| m.cols());
        let rows: usize = parts.iter().map(|m| m.rows()).sum();
        if rows == 0 {
            return Err(Error::invalid("cannot standardize with zero training rows"));
        }
        let mut mean = vec![0.0; cols];
        for m in parts {
            if m.cols() != cols {
                return Err(Error::shape("Standardizer::fit", cols, m.cols()));
            }
            for r in m.iter_rows() {
                mean.iter_mut().zip(r).for_each(|(a, v)| *a += v);
            }
        }
        mean.iter_mut().for_each(|a| *a /= rows as f64);
        let mut var = vec![0.0; cols];
        for m in parts {
            for r in m.iter_rows() {
                for ((a, v), mu) in var.iter_mut().zip(r).zip(&mean) {
                    *a += (v - mu) * (v - mu);
                }
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = (v / rows as f64).sqrt();
                if s > 0.0 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, x: &Matrix) -> Matrix {
        let mut out = x.clone();
        for r in 0..out.rows() {
            for ((v, m), s) in out.row_mut(r).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        out
    }

    pub fn apply_dataset(&self, ds: &DomainDataset) -> DomainDataset {
        DomainDataset {
            x: self.apply(&ds.x),
            ..ds.clone()
        }
    }
}

/// Writes `<dir>/<domain_id>.csv` (features..., label, domain_id) and the
/// `<dir>/<domain_id>.json` metadata sidecar. Returns the CSV path.
pub fn export_dataset(ds: &DomainDataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join(format!("{}.csv", ds.domain_id()));
    let mut w = csv::Writer::from_path(&csv_path)?;
    let mut header: Vec<String> = (0..ds.x.cols()).map(|j| format!("x{j}")).collect();
    header.push("label".into());
    header.push("domain_id".into());
    w.write_record(&header)?;
    for (row, y) in ds.x.iter_rows().zip(&ds.y) {
        let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        rec.push(y.to_string());
        rec.push(ds.domain_id().to_string());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    let meta_path = csv_path.with_extension("json");
    let meta = serde_json::to_string_pretty(&ds.meta)?;
    fs::write(&meta_path, meta).map_err(|e| Error::io(&meta_path, e))?;
    Ok(csv_path)
}

/// Reads a dataset written by [`export_dataset`], sidecar included.
pub fn import_dataset(csv_path: &Path) -> Result<DomainDataset> {
    let meta_path = csv_path.with_extension("json");
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: DatasetMeta = serde_json::from_str(&text)?;
    let mut r = csv::Reader::from_path(csv_path)?;
    let n_cols = r.headers()?.len();
    if n_cols < 3 {
        return Err(Error::invalid(format!("{}: too few columns", csv_path.display())));
    }
    let d = n_cols - 2;
    let mut data = Vec::new();
    let mut y = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        for j in 0..d {
            data.push(parse_field::<f64>(&rec[j], csv_path)?);
        }
        y.push(parse_field::<usize>(&rec[d], csv_path)?);
        if &rec[d + 1] != meta.domain_id.as_str() {
            return Err(Error::invalid(format!(
                "{}: row domain {} does not match sidecar {}",
                csv_path.display(),
                &rec[d + 1],
                meta.domain_id
            )));
        }
    }
    let n = y.len();
    Ok(DomainDataset {
        x: Matrix::from_vec(n, d, data)?,
        y,
        spurious_labels: Vec::new(),
        meta,
    })
}

fn parse_field<T: std::str::FromStr>(s: &str, path: &Path) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| Error::invalid(format!("{}: cannot parse field {s:?}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(specs: &[DomainSpec], seed: u64) -> Vec<DomainDataset> {
        SpuriousBlobs::default().generate(specs, seed).unwrap()
    }

    #[test]
    fn perfect_correlation_always_aligns() {
        let ds = &blobs(&[DomainSpec::spurious("a", 500, 1.0)], 1)[0];
        assert!(ds.y.iter().zip(&ds.spurious_labels).all(|(a, b)| a == b));
    }

    #[test]
    fn alignment_frequency_matches() {
        let ds = &blobs(&[DomainSpec::spurious("a", 10_000, 0.8)], 2)[0];
        let aligned = ds.y.iter().zip(&ds.spurious_labels).filter(|(a, b)| a == b).count();
        let freq = aligned as f64 / 10_000.0;
        // 99% normal-approximation interval around p = 0.9
        let half = 2.576 * (0.9f64 * 0.1 / 10_000.0).sqrt();
        assert!((freq - 0.9).abs() < half, "freq {freq}");
    }

    #[test]
    fn generation_is_deterministic_and_order_free() {
        let specs = [DomainSpec::spurious("a", 200, 0.9), DomainSpec::spurious("b", 200, -0.9)];
        let one = blobs(&specs, 7);
        let two = blobs(&specs, 7);
        assert_eq!(one, two);
        let swapped = blobs(&[specs[1].clone(), specs[0].clone()], 7);
        assert_eq!(one[0], swapped[1]);
        assert_ne!(blobs(&specs, 8)[0], one[0]);
    }

    #[test]
    fn invalid_correlation_rejected() {
        assert!(SpuriousBlobs::default()
            .generate(&[DomainSpec::spurious("a", 10, 1.5)], 0)
            .is_err());
    }

    #[test]
    fn metadata_partitions_columns() {
        let ds = &gen_spurious_blobs(&[DomainSpec::spurious("a", 10, 0.5)], 3, 4, 0).unwrap()[0];
        let mut cols = ds.meta.invariant_columns.clone();
        cols.extend(&ds.meta.spurious_columns);
        assert_eq!(cols, (0..7).collect::<Vec<_>>());
        assert_eq!(ds.x.cols(), 7);
    }

    #[test]
    fn moons_periodic_in_rotation() {
        let a = &gen_rotated_moons(&[DomainSpec::rotated("m", 300, 0.0, 0.1)], 4).unwrap()[0];
        let b = &gen_rotated_moons(&[DomainSpec::rotated("m", 300, 360.0, 0.1)], 4).unwrap()[0];
        for (p, q) in a.x.as_slice().iter().zip(b.x.as_slice()) {
            assert!((p - q).abs() < 1e-9);
        }
    }

    #[test]
    fn noiseless_moons_lie_on_arcs() {
        let ds = &gen_rotated_moons(&[DomainSpec::rotated("m", 300, 0.0, 0.0)], 5).unwrap()[0];
        for (p, &y) in ds.x.iter_rows().zip(&ds.y) {
            let (cx, cy) = if y == 0 { (0.0, 0.0) } else { (1.0, 0.5) };
            let r = ((p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sqrt();
            assert!((r - 1.0).abs() < 1e-12);
            if y == 0 {
                assert!(p[1] >= -1e-12);
            } else {
                assert!(p[1] <= 0.5 + 1e-12);
            }
        }
    }

    #[test]
    fn quarter_turn_matches_rotation_matrix() {
        let a = &gen_rotated_moons(&[DomainSpec::rotated("m", 200, 0.0, 0.2)], 6).unwrap()[0];
        let b = &gen_rotated_moons(&[DomainSpec::rotated("m", 200, 90.0, 0.2)], 6).unwrap()[0];
        for (p, q) in a.x.iter_rows().zip(b.x.iter_rows()) {
            // exact 90 degree rotation: (x, y) -> (-y, x)
            assert!((q[0] + p[1]).abs() < 1e-12 && (q[1] - p[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn split_sizes_and_partition() {
        let ds = &blobs(&[DomainSpec::spurious("a", 100, 0.5)], 9)[0];
        let (tr, va) = split_train_val(ds, 0.8, 1).unwrap();
        assert_eq!((tr.len(), va.len()), (80, 20));
        let key = |r: &[f64]| r.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        let mut all: Vec<_> = tr.x.iter_rows().chain(va.x.iter_rows()).map(key).collect();
        let mut orig: Vec<_> = ds.x.iter_rows().map(key).collect();
        all.sort();
        orig.sort();
        assert_eq!(all, orig);

        let (tr2, _) = split_train_val(ds, 0.8, 1).unwrap();
        assert_eq!(tr, tr2);
        let (tr3, _) = split_train_val(ds, 0.8, 2).unwrap();
        assert_ne!(tr, tr3);
    }

    #[test]
    fn split_rejects_empty_side() {
        let ds = &blobs(&[DomainSpec::spurious("a", 3, 0.5)], 9)[0];
        assert!(split_train_val(ds, 0.2, 0).is_err());
        assert!(split_train_val(ds, 1.0, 0).is_err());
    }

    #[test]
    fn invariant_features_match_across_domains() {
        let n = 10_000;
        let sets = blobs(
            &[DomainSpec::spurious("a", n, 0.95), DomainSpec::spurious("b", n, -0.9)],
            11,
        );
        let means: Vec<Vec<f64>> = sets
            .iter()
            .map(|ds| {
                let mut m = vec![0.0; 5];
                for r in ds.x.iter_rows() {
                    m.iter_mut().zip(&r[..5]).for_each(|(a, v)| *a += v / n as f64);
                }
                m
            })
            .collect();
        for j in 0..5 {
            assert!((means[0][j] - means[1][j]).abs() < 4.0 / (n as f64).sqrt());
        }
    }

    #[test]
    fn invariant_oracle_accuracy_is_domain_free() {
        let fam = SpuriousBlobs::default();
        let sets = fam
            .generate(
                &[
                    DomainSpec::spurious("a", 10_000, 0.95),
                    DomainSpec::spurious("b", 10_000, 0.8),
                    DomainSpec::spurious("t", 10_000, -0.9),
                ],
                12,
            )
            .unwrap();
        let accs: Vec<f64> = sets
            .iter()
            .map(|ds| {
                let hits = ds
                    .x
                    .iter_rows()
                    .zip(&ds.y)
                    .filter(|(r, &y)| (r[..fam.d_inv].iter().sum::<f64>() > 0.0) == (y == 1))
                    .count();
                hits as f64 / ds.len() as f64
            })
            .collect();
        for a in &accs {
            assert!((a - accs[0]).abs() < 0.02, "{accs:?}");
        }
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = &blobs(&[DomainSpec::spurious("dom", 50, 0.3)], 13)[0];
        let path = export_dataset(ds, dir.path()).unwrap();
        let back = import_dataset(&path).unwrap();
        assert_eq!(back.x, ds.x);
        assert_eq!(back.y, ds.y);
        assert_eq!(back.meta, ds.meta);
    }

    #[test]
    fn standardizer_uses_training_statistics() {
        let train = Matrix::from_rows(&[[1.0, 5.0], [3.0, 5.0]]).unwrap();
        let s = Standardizer::fit(&[&train]).unwrap();
        assert_eq!(s.mean, vec![2.0, 5.0]);
        assert_eq!(s.std, vec![1.0, 1.0]);
        let other = Matrix::from_rows(&[[4.0, 6.0]]).unwrap();
        assert_eq!(s.apply(&other).row(0), &[2.0, 1.0]);
    }
}
