//! Labelled datasets and the synthetic multi-domain generator.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Row-major feature matrix with one integer label per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
    classes: usize,
    pub domain_id: usize,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        labels: Vec<usize>,
        dim: usize,
        classes: usize,
        domain_id: usize,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Empty("dataset has no rows".into()));
        }
        if dim == 0 || classes == 0 {
            return Err(Error::invalid("dataset", "need at least one feature and class"));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::DimensionMismatch(format!(
                "{} feature values for {} rows of width {dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::invalid(
                "labels",
                format!("label {bad} outside [0, {classes})"),
            ));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset features".into()));
        }
        Ok(Dataset {
            features,
            labels,
            dim,
            classes,
            domain_id,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub(crate) fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub(crate) fn set_label(&mut self, i: usize, y: usize) {
        self.labels[i] = y;
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Rows `rows` as a new dataset.
    pub fn subset(&self, rows: &[usize]) -> Result<Dataset> {
        let mut features = Vec::with_capacity(rows.len() * self.dim);
        for &r in rows {
            features.extend_from_slice(self.row(r));
        }
        Dataset::new(
            features,
            rows.iter().map(|&r| self.labels[r]).collect(),
            self.dim,
            self.classes,
            self.domain_id,
        )
    }

    /// Stacks datasets of equal width; the result takes the first domain id.
    pub fn concat(parts: &[&Dataset]) -> Result<Dataset> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Empty("nothing to concatenate".into()))?;
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            if p.dim != first.dim || p.classes != first.classes {
                return Err(Error::DimensionMismatch(
                    "datasets differ in width or class count".into(),
                ));
            }
            features.extend_from_slice(&p.features);
            labels.extend_from_slice(&p.labels);
        }
        Dataset::new(features, labels, first.dim, first.classes, first.domain_id)
    }

    /// Writes a header row (`x0..x{d-1},label`) followed by one row per sample.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = (0..self.dim).map(|j| format!("x{j}")).collect();
        header.push("label".into());
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.row(i).iter().map(|v| v.to_string()).collect();
            rec.push(self.labels[i].to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R, classes: usize, domain_id: usize) -> Result<Dataset> {
        let mut r = csv::Reader::from_reader(input);
        let width = r.headers()?.len();
        if width < 2 {
            return Err(Error::MalformedCsv("need at least one feature and a label".into()));
        }
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::MalformedCsv(format!("row {line}: {e}")))
            };
            for field in rec.iter().take(width - 1) {
                features.push(parse(field)?);
            }
            let label = rec[width - 1]
                .trim()
                .parse::<usize>()
                .map_err(|e| Error::MalformedCsv(format!("row {line} label: {e}")))?;
            labels.push(label);
        }
        Dataset::new(features, labels, width - 1, classes, domain_id)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn load_csv(path: &Path, classes: usize, domain_id: usize) -> Result<Dataset> {
        Dataset::read_csv(std::fs::File::open(path)?, classes, domain_id)
    }
}

/// Shape of the synthetic task family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domains: usize,
    pub features: usize,
    pub classes: usize,
    pub samples_per_domain: usize,
    /// Spread of the shared class prototypes.
    #[serde(default = "default_separation")]
    pub separation: f64,
    /// Largest rotation angle (radians) applied per random plane.
    #[serde(default = "default_rotation")]
    pub rotation: f64,
    /// Scale of the per-domain, per-class prototype offsets.
    #[serde(default = "default_shift")]
    pub shift: f64,
    /// Trailing features that carry no class signal (pure noise).
    #[serde(default)]
    pub nuisance: usize,
}

fn default_separation() -> f64 {
    1.0
}

fn default_rotation() -> f64 {
    0.5
}

fn default_shift() -> f64 {
    0.9
}

impl Default for DomainSpec {
    fn default() -> Self {
        DomainSpec {
            domains: 8,
            features: 20,
            classes: 4,
            samples_per_domain: 2000,
            separation: default_separation(),
            rotation: default_rotation(),
            shift: default_shift(),
            nuisance: 4,
        }
    }
}

/// Train and test split of one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainData {
    pub train: Dataset,
    pub test: Dataset,
}

/// Generates `spec.domains` related but shifted classification domains.
///
/// All domains share one set of class prototypes over the leading
/// `features - nuisance` coordinates; the trailing `nuisance` coordinates are
/// pure noise. Each domain rotates the prototypes through random planes and
/// then offsets every class by its own random vector, so decision boundaries
/// move from domain to domain. Samples are the domain's prototype plus unit
/// Gaussian noise, with classes balanced round-robin. The first 80% of each
/// domain (after shuffling) is training data and the remaining 20% test data.
pub fn synth_domains(spec: &DomainSpec, seed: u64) -> Result<Vec<DomainData>> {
    let DomainSpec {
        domains,
        features: d,
        classes,
        samples_per_domain,
        ..
    } = *spec;
    if domains == 0 || d == 0 || classes == 0 {
        return Err(Error::invalid("data", "domains, features and classes must be >= 1"));
    }
    if samples_per_domain < 5 {
        return Err(Error::invalid("data.samples_per_domain", "need at least 5 samples"));
    }

    if spec.nuisance >= d {
        return Err(Error::invalid("data.nuisance", "must leave at least one informative feature"));
    }
    let informative = d - spec.nuisance;

    let mut proto_rng = rng::stream(seed, "prototypes", &[]);
    let prototypes: Vec<Vec<f64>> = (0..classes)
        .map(|_| gaussian_vec(&mut proto_rng, informative, spec.separation))
        .collect();

    let mut out = Vec::with_capacity(domains);
    for k in 0..domains {
        let mut drng = rng::stream(seed, "domain", &[k as u64]);
        let planes = if informative >= 2 { informative } else { 0 };
        let rotations: Vec<(usize, usize, f64)> = (0..planes)
            .map(|_| {
                let a = drng.random_range(0..informative);
                let mut b = drng.random_range(0..informative - 1);
                if b >= a {
                    b += 1;
                }
                (a, b, drng.random_range(-spec.rotation..=spec.rotation))
            })
            .collect();
        let means: Vec<Vec<f64>> = prototypes
            .iter()
            .map(|p| {
                let mut v = p.clone();
                for &(a, b, theta) in &rotations {
                    let (s, c) = theta.sin_cos();
                    let (va, vb) = (v[a], v[b]);
                    v[a] = c * va - s * vb;
                    v[b] = s * va + c * vb;
                }
                let offset = gaussian_vec(&mut drng, informative, spec.shift);
                let mut mean: Vec<f64> = v.iter().zip(offset).map(|(x, o)| x + o).collect();
                mean.resize(d, 0.0);
                mean
            })
            .collect();

        let mut features = Vec::with_capacity(samples_per_domain * d);
        let mut labels = Vec::with_capacity(samples_per_domain);
        for s in 0..samples_per_domain {
            let y = s % classes;
            let noise = gaussian_vec(&mut drng, d, 1.0);
            features.extend(means[y].iter().zip(noise).map(|(m, e)| m + e));
            labels.push(y);
        }
        let all = Dataset::new(features, labels, d, classes, k)?;
        let mut order: Vec<usize> = (0..samples_per_domain).collect();
        order.shuffle(&mut drng);
        let cut = samples_per_domain * 4 / 5;
        out.push(DomainData {
            train: all.subset(&order[..cut])?,
            test: all.subset(&order[cut..])?,
        });
    }
    Ok(out)
}

/// Samples from the undistorted class prototypes that every domain is derived
/// from, i.e. before any domain rotation or offset.
///
/// This stands in for the broad, general-purpose data a base model is
/// pretrained on before federated fine-tuning. The result carries
/// `domain_id = spec.domains`.
pub fn synth_base(spec: &DomainSpec, seed: u64, samples: usize) -> Result<Dataset> {
    let DomainSpec {
        features: d,
        classes,
        ..
    } = *spec;
    if d == 0 || classes == 0 || samples == 0 {
        return Err(Error::invalid("data", "features, classes and samples must be >= 1"));
    }
    if spec.nuisance >= d {
        return Err(Error::invalid("data.nuisance", "must leave at least one informative feature"));
    }
    let informative = d - spec.nuisance;
    let mut proto_rng = rng::stream(seed, "prototypes", &[]);
    let prototypes: Vec<Vec<f64>> = (0..classes)
        .map(|_| gaussian_vec(&mut proto_rng, informative, spec.separation))
        .collect();
    let mut brng = rng::stream(seed, "base", &[]);
    let mut features = Vec::with_capacity(samples * d);
    let mut labels = Vec::with_capacity(samples);
    for s in 0..samples {
        let y = s % classes;
        let noise = gaussian_vec(&mut brng, d, 1.0);
        features.extend(
            noise
                .iter()
                .enumerate()
                .map(|(k, e)| prototypes[y].get(k).copied().unwrap_or(0.0) + e),
        );
        labels.push(y);
    }
    Dataset::new(features, labels, d, classes, spec.domains)
}

fn gaussian_vec<R: Rng>(rng: &mut R, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DomainSpec {
        DomainSpec {
            domains: 3,
            features: 6,
            classes: 3,
            samples_per_domain: 100,
            nuisance: 2,
            ..DomainSpec::default()
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = synth_domains(&small(), 11).unwrap();
        let b = synth_domains(&small(), 11).unwrap();
        let c = synth_domains(&small(), 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn split_sizes_and_domain_ids() {
        let doms = synth_domains(&small(), 1).unwrap();
        for (k, dd) in doms.iter().enumerate() {
            assert_eq!(dd.train.len(), 80);
            assert_eq!(dd.test.len(), 20);
            assert_eq!(dd.train.domain_id, k);
        }
    }

    #[test]
    fn domain_means_differ() {
        let doms = synth_domains(&small(), 5).unwrap();
        let mean = |ds: &Dataset| -> Vec<f64> {
            let mut m = vec![0.0; ds.dim()];
            for i in 0..ds.len() {
                for (a, b) in m.iter_mut().zip(ds.row(i)) {
                    *a += b / ds.len() as f64;
                }
            }
            m
        };
        let m0 = mean(&doms[0].train);
        let m1 = mean(&doms[1].train);
        let gap: f64 = m0.iter().zip(&m1).map(|(a, b)| (a - b).abs()).sum();
        assert!(gap > 0.1, "domain means too close: {gap}");
    }

    #[test]
    fn nuisance_features_ignore_the_class() {
        let spec = DomainSpec {
            samples_per_domain: 4000,
            ..small()
        };
        let ds = &synth_domains(&spec, 9).unwrap()[0].train;
        // per-class means of a nuisance coordinate stay near zero, unlike informative ones
        let class_mean = |col: usize, y: usize| {
            let rows: Vec<f64> = (0..ds.len()).filter(|&i| ds.label(i) == y).map(|i| ds.row(i)[col]).collect();
            rows.iter().sum::<f64>() / rows.len() as f64
        };
        for y in 0..3 {
            for col in 4..6 {
                assert!(class_mean(col, y).abs() < 0.1, "class {y} col {col}");
            }
        }
        let spread: f64 = (0..4).map(|c| (class_mean(c, 0) - class_mean(c, 1)).abs()).sum();
        assert!(spread > 0.3);
        assert!(synth_domains(&DomainSpec { nuisance: 6, ..small() }, 1).is_err());
    }

    #[test]
    fn base_set_is_deterministic_and_balanced() {
        let a = synth_base(&small(), 4, 90).unwrap();
        assert_eq!(a, synth_base(&small(), 4, 90).unwrap());
        assert_eq!(a.len(), 90);
        assert_eq!(a.domain_id, 3);
        for y in 0..3 {
            assert_eq!(a.labels().iter().filter(|&&l| l == y).count(), 30);
        }
        assert!(synth_base(&small(), 4, 0).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let ds = synth_domains(&small(), 3).unwrap().remove(0).test;
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("x0,x1,x2,x3,x4,x5,label\n"));
        let back = Dataset::read_csv(buf.as_slice(), 3, 0).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn rejects_bad_datasets() {
        assert!(Dataset::new(vec![], vec![], 2, 2, 0).is_err());
        assert!(Dataset::new(vec![1.0, 2.0], vec![2], 2, 2, 0).is_err());
        assert!(Dataset::new(vec![1.0, f64::NAN], vec![0], 2, 2, 0).is_err());
        assert!(Dataset::read_csv("x0,label\nfoo,1\n".as_bytes(), 2, 0).is_err());
    }
}
