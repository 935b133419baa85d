//! Identity datasets: synthetic generation, feature-CSV ingestion and
//! identity-disjoint splitting.
//!
//! CSV layout is `person_id,camera_id,f0,...,f{d-1}` with a header row,
//! UTF-8 and `.` as the decimal separator.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numeric::{streams, Matrix, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub person_id: u32,
    pub camera_id: u32,
}

/// Immutable collection of samples sharing one feature dimension.
///
/// Every identity holds at least two samples and there are at least three
/// identities, which is what quadruplet sampling needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    dim: usize,
    identities: Vec<u32>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        let dim = samples
            .first()
            .map(|s| s.features.len())
            .ok_or_else(|| Error::Constraint("dataset has no samples".into()))?;
        let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            if s.features.len() != dim {
                return Err(Error::shape(
                    "Dataset::new",
                    format!("{dim} features"),
                    format!("{} features in sample {i}", s.features.len()),
                ));
            }
            if s.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite feature in sample {i}")));
            }
            *counts.entry(s.person_id).or_default() += 1;
        }
        if counts.len() < 3 {
            return Err(Error::Constraint(format!(
                "need at least 3 identities, found {}",
                counts.len()
            )));
        }
        if let Some((id, n)) = counts.iter().find(|(_, &n)| n < 2) {
            return Err(Error::Constraint(format!(
                "identity {id} has {n} sample(s), need at least 2"
            )));
        }
        Ok(Self {
            samples,
            dim,
            identities: counts.into_keys().collect(),
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Sorted unique person ids.
    pub fn identities(&self) -> &[u32] {
        &self.identities
    }

    /// Sorted unique camera ids.
    pub fn cameras(&self) -> Vec<u32> {
        let set: BTreeSet<u32> = self.samples.iter().map(|s| s.camera_id).collect();
        set.into_iter().collect()
    }

    /// Sample indices grouped by identity, in identity order.
    pub fn indices_by_identity(&self) -> Vec<Vec<usize>> {
        let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, s) in self.samples.iter().enumerate() {
            groups.entry(s.person_id).or_default().push(i);
        }
        groups.into_values().collect()
    }

    /// Number of unordered same-identity sample pairs.
    pub fn positive_pair_count(&self) -> usize {
        self.indices_by_identity()
            .iter()
            .map(|g| g.len() * (g.len() - 1) / 2)
            .sum()
    }

    /// All feature vectors stacked as rows.
    pub fn feature_matrix(&self) -> Matrix {
        let mut values = Vec::with_capacity(self.samples.len() * self.dim);
        for s in &self.samples {
            values.extend_from_slice(&s.features);
        }
        Matrix::new(self.samples.len(), self.dim, values).expect("validated on construction")
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str("person_id,camera_id");
        for k in 0..self.dim {
            out.push_str(&format!(",f{k}"));
        }
        out.push('\n');
        for s in &self.samples {
            out.push_str(&format!("{},{}", s.person_id, s.camera_id));
            for v in &s.features {
                // `Display` for f64 prints the shortest round-trip representation.
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub num_ids: usize,
    pub samples_per_id_per_camera: usize,
    pub cameras: usize,
    pub dim: usize,
    pub intra_sigma: f64,
    pub inter_spread: f64,
    pub camera_shift_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_ids: 60,
            samples_per_id_per_camera: 3,
            cameras: 2,
            dim: 16,
            intra_sigma: 0.3,
            inter_spread: 1.0,
            camera_shift_sigma: 0.3,
            seed: 0,
        }
    }
}

/// Generates clustered identities observed from several cameras.
///
/// Each identity gets a center uniform in `[-inter_spread, inter_spread]^dim`
/// and, per camera, one offset drawn from `N(0, camera_shift_sigma²)`. A sample
/// is center + camera offset + `N(0, intra_sigma²)` noise. Person ids are
/// `0..num_ids` and camera ids `0..cameras`.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.num_ids < 3 {
        return Err(Error::Constraint(format!(
            "need at least 3 identities, got {}",
            cfg.num_ids
        )));
    }
    if cfg.dim < 2 {
        return Err(Error::Config(format!("dim must be >= 2, got {}", cfg.dim)));
    }
    if cfg.cameras == 0 || cfg.samples_per_id_per_camera == 0 {
        return Err(Error::Config("cameras and samples per camera must be positive".into()));
    }
    if cfg.cameras * cfg.samples_per_id_per_camera < 2 {
        return Err(Error::Constraint("each identity needs at least 2 samples".into()));
    }
    for (name, v) in [
        ("intra_sigma", cfg.intra_sigma),
        ("camera_shift_sigma", cfg.camera_shift_sigma),
        ("inter_spread", cfg.inter_spread),
    ] {
        if !(v >= 0.0) || !v.is_finite() {
            return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
        }
    }

    let mut rng = Rng::with_stream(cfg.seed, streams::DATA);
    let mut samples =
        Vec::with_capacity(cfg.num_ids * cfg.cameras * cfg.samples_per_id_per_camera);
    for pid in 0..cfg.num_ids {
        let center: Vec<f64> = (0..cfg.dim)
            .map(|_| rng.uniform(-cfg.inter_spread, cfg.inter_spread))
            .collect();
        for cam in 0..cfg.cameras {
            let offset: Vec<f64> = (0..cfg.dim)
                .map(|_| rng.gaussian(cfg.camera_shift_sigma))
                .collect();
            for _ in 0..cfg.samples_per_id_per_camera {
                let features = center
                    .iter()
                    .zip(&offset)
                    .map(|(c, o)| c + o + rng.gaussian(cfg.intra_sigma))
                    .collect();
                samples.push(Sample {
                    features,
                    person_id: pid as u32,
                    camera_id: cam as u32,
                });
            }
        }
    }
    Dataset::new(samples)
}

pub fn load_csv(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);

    let header = reader
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let names: Vec<&str> = header.iter().collect();
    if names.len() < 3 || names[0] != "person_id" || names[1] != "camera_id" {
        return Err(Error::Parse {
            line: 1,
            message: "header must start with person_id,camera_id followed by feature columns"
                .into(),
        });
    }
    for (k, name) in names[2..].iter().enumerate() {
        if *name != format!("f{k}") {
            return Err(Error::Parse {
                line: 1,
                message: format!("unknown header column '{name}', expected 'f{k}'"),
            });
        }
    }
    let dim = names.len() - 2;

    let mut samples = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != dim + 2 {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, found {}", dim + 2, record.len()),
            });
        }
        let parse_id = |k: usize| -> Result<u32> {
            record[k].parse::<u32>().map_err(|_| Error::Parse {
                line,
                message: format!("invalid {} '{}'", names[k], &record[k]),
            })
        };
        let person_id = parse_id(0)?;
        let camera_id = parse_id(1)?;
        let features = (2..dim + 2)
            .map(|k| {
                record[k]
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Parse {
                        line,
                        message: format!("non-numeric feature {} '{}'", names[k], &record[k]),
                    })
            })
            .collect::<Result<Vec<f64>>>()?;
        samples.push(Sample {
            features,
            person_id,
            camera_id,
        });
    }
    Dataset::new(samples)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub test: Dataset,
}

/// Partitions identities (not samples) into train and test sets.
///
/// `round(test_fraction · n)` identities go to the test side; both sides must
/// keep at least three identities.
pub fn split_identities(dataset: &Dataset, test_fraction: f64, seed: u64) -> Result<Split> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::Config(format!(
            "test fraction must be in [0, 1), got {test_fraction}"
        )));
    }
    let n = dataset.identities().len();
    let n_test = (test_fraction * n as f64).round() as usize;
    if n_test < 3 || n - n_test < 3 {
        return Err(Error::Constraint(format!(
            "{n} identities cannot be split into {} train / {n_test} test with >= 3 each",
            n - n_test
        )));
    }
    let mut ids = dataset.identities().to_vec();
    Rng::with_stream(seed, streams::SPLIT).shuffle(&mut ids);
    let test_ids: BTreeSet<u32> = ids[..n_test].iter().copied().collect();

    let (test, train): (Vec<Sample>, Vec<Sample>) = dataset
        .samples()
        .iter()
        .cloned()
        .partition(|s| test_ids.contains(&s.person_id));
    Ok(Split {
        train: Dataset::new(train)?,
        test: Dataset::new(test)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            num_ids: 10,
            samples_per_id_per_camera: 2,
            cameras: 2,
            dim: 4,
            intra_sigma: 0.3,
            inter_spread: 1.0,
            camera_shift_sigma: 0.2,
            seed: 9,
        }
    }

    #[test]
    fn synth_is_deterministic() {
        assert_eq!(synth_generate(&small_cfg()).unwrap(), synth_generate(&small_cfg()).unwrap());
        let mut other = small_cfg();
        other.seed = 10;
        assert_ne!(synth_generate(&small_cfg()).unwrap(), synth_generate(&other).unwrap());
    }

    #[test]
    fn synth_zero_variance_collapses_identities() {
        let cfg = SynthConfig {
            intra_sigma: 0.0,
            camera_shift_sigma: 0.0,
            ..small_cfg()
        };
        let ds = synth_generate(&cfg).unwrap();
        for group in ds.indices_by_identity() {
            let first = &ds.samples()[group[0]].features;
            for &i in &group[1..] {
                assert_eq!(&ds.samples()[i].features, first);
            }
        }
    }

    #[test]
    fn synth_requires_three_identities() {
        let cfg = SynthConfig {
            num_ids: 2,
            ..small_cfg()
        };
        assert!(matches!(synth_generate(&cfg), Err(Error::Constraint(_))));
    }

    #[test]
    fn synth_within_identity_variance() {
        // 100 identities x 20 cameras x 5 samples = 10k samples.
        let cfg = SynthConfig {
            num_ids: 100,
            samples_per_id_per_camera: 5,
            cameras: 20,
            dim: 8,
            intra_sigma: 0.4,
            inter_spread: 3.0,
            camera_shift_sigma: 0.3,
            seed: 123,
        };
        let ds = synth_generate(&cfg).unwrap();
        assert_eq!(ds.len(), 10_000);
        let mut sum_sq = 0.0;
        let mut dof = 0usize;
        for group in ds.indices_by_identity() {
            for k in 0..cfg.dim {
                let vals: Vec<f64> = group.iter().map(|&i| ds.samples()[i].features[k]).collect();
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                sum_sq += vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
                dof += vals.len() - 1;
            }
        }
        let var = sum_sq / dof as f64;
        let expected = cfg.intra_sigma.powi(2) + cfg.camera_shift_sigma.powi(2);
        assert!((var - expected).abs() / expected < 0.2, "{var} vs {expected}");
    }

    #[test]
    fn dataset_invariants() {
        let s = |p: u32| Sample {
            features: vec![0.0, 1.0],
            person_id: p,
            camera_id: 0,
        };
        assert!(Dataset::new(vec![s(0), s(0), s(1), s(1)]).is_err());
        assert!(Dataset::new(vec![s(0), s(0), s(1), s(1), s(2)]).is_err());
        let ds = Dataset::new(vec![s(2), s(0), s(0), s(1), s(1), s(2)]).unwrap();
        assert_eq!(ds.identities(), &[0, 1, 2]);
        assert_eq!(ds.positive_pair_count(), 3);
    }

    #[test]
    fn split_ten_identities_in_half() {
        let ds = synth_generate(&small_cfg()).unwrap();
        let split = split_identities(&ds, 0.5, 4).unwrap();
        assert_eq!(split.train.identities().len(), 5);
        assert_eq!(split.test.identities().len(), 5);
        assert!(split_identities(&ds, 0.2, 4).is_err());
    }

    #[test]
    fn split_mirrors_half_half_protocol_shape() {
        let cfg = SynthConfig {
            num_ids: 632,
            samples_per_id_per_camera: 1,
            dim: 2,
            ..small_cfg()
        };
        let ds = synth_generate(&cfg).unwrap();
        let split = split_identities(&ds, 0.5, 1).unwrap();
        assert_eq!(split.train.identities().len(), 316);
        assert_eq!(split.test.identities().len(), 316);
    }
}
