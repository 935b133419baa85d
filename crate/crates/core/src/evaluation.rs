//! Single-shot CMC evaluation and intra/inter-identity distance statistics.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{embed_batch, forward_pairs, HeadKind, ModelParams};
use crate::numeric::{Matrix, Rng};

/// Default number of gallery resampling trials.
pub const DEFAULT_TRIALS: usize = 10;

/// Histogram bin width for [`variation_stats`].
pub const BIN_WIDTH: f64 = 0.05;
const NUM_BINS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMode {
    /// Halved Euclidean distance between normalized embeddings.
    Embed,
    /// Metric-head score `g(probe, gallery)`.
    Metric,
    /// `(g(a, b) + g(b, a)) / 2`.
    MetricSymmetrized,
}

impl std::str::FromStr for DistanceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "embed" => Ok(Self::Embed),
            "metric" => Ok(Self::Metric),
            "metric_symmetrized" => Ok(Self::MetricSymmetrized),
            other => Err(Error::Config(format!("unknown distance mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for DistanceMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Embed => "embed",
            Self::Metric => "metric",
            Self::MetricSymmetrized => "metric_symmetrized",
        })
    }
}

fn stack(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let mut values = a.as_slice().to_vec();
    values.extend_from_slice(b.as_slice());
    Matrix::new(a.rows() + b.rows(), a.cols(), values)
}

/// Distances from every probe row to every gallery row.
pub fn distance_matrix(
    params: &ModelParams,
    probes: &Matrix,
    gallery: &Matrix,
    mode: DistanceMode,
) -> Result<Matrix> {
    for m in [probes, gallery] {
        if m.cols() != params.input_dim() {
            return Err(Error::shape("distance_matrix", params.input_dim(), m.cols()));
        }
    }
    let (np, ng) = (probes.rows(), gallery.rows());
    let mut out = Matrix::zeros(np, ng);
    if np == 0 || ng == 0 {
        return Ok(out);
    }
    match mode {
        DistanceMode::Embed => {
            let ep = embed_batch(params, probes)?;
            let eg = embed_batch(params, gallery)?;
            for p in 0..np {
                for g in 0..ng {
                    let d = half_distance(ep.embeddings().row(p), eg.embeddings().row(g));
                    out.set(p, g, d);
                }
            }
        }
        DistanceMode::Metric | DistanceMode::MetricSymmetrized => {
            let x = stack(probes, gallery)?;
            let forward: Vec<(usize, usize)> = (0..np)
                .flat_map(|p| (0..ng).map(move |g| (p, np + g)))
                .collect();
            let (scores, _) = forward_pairs(params, &x, &forward)?;
            for (n, s) in scores.iter().enumerate() {
                out.as_mut_slice()[n] = s.g;
            }
            if mode == DistanceMode::MetricSymmetrized {
                let backward: Vec<(usize, usize)> = forward.iter().map(|&(a, b)| (b, a)).collect();
                let (rev, _) = forward_pairs(params, &x, &backward)?;
                for (n, s) in rev.iter().enumerate() {
                    let v = &mut out.as_mut_slice()[n];
                    *v = 0.5 * (*v + s.g);
                }
            }
        }
    }
    Ok(out)
}

fn half_distance(a: &[f64], b: &[f64]) -> f64 {
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    0.5 * sq.sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmcResult {
    /// Entry `n − 1` is the rank-`n` accuracy.
    pub rank_accuracy: Vec<f64>,
    pub trials: usize,
    pub probes: usize,
    pub gallery_size: usize,
    pub protocol: String,
}

impl CmcResult {
    pub fn rank1(&self) -> f64 {
        self.rank_accuracy[0]
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        w.write_record(["rank", "accuracy"]).map_err(|e| csv_error(path, e))?;
        for (n, a) in self.rank_accuracy.iter().enumerate() {
            w.write_record([(n + 1).to_string(), a.to_string()])
                .map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

/// 1-based rank of gallery column `truth`: one plus the number of columns
/// strictly closer, or equally close with a lower index.
pub fn rank_of(row: &[f64], truth: usize) -> usize {
    let d = row[truth];
    1 + row
        .iter()
        .enumerate()
        .filter(|&(c, &v)| v < d || (v == d && c < truth))
        .count()
}

/// Single-shot CMC from a precomputed probe × candidate distance matrix.
///
/// Each trial draws one candidate per identity (identities in sorted order)
/// to form the gallery, ranks every probe against it and counts the depth of
/// its true match.
pub fn cmc_from_distances(
    distances: &Matrix,
    probe_ids: &[u32],
    candidate_ids: &[u32],
    trials: usize,
    rng: &mut Rng,
) -> Result<CmcResult> {
    if distances.shape() != (probe_ids.len(), candidate_ids.len()) {
        return Err(Error::shape(
            "cmc_from_distances",
            format!("{}x{}", probe_ids.len(), candidate_ids.len()),
            format!("{}x{}", distances.rows(), distances.cols()),
        ));
    }
    if trials == 0 {
        return Err(Error::Config("CMC needs at least one trial".into()));
    }
    if probe_ids.is_empty() {
        return Err(Error::Constraint("CMC needs at least one probe".into()));
    }
    let mut by_id: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (c, &id) in candidate_ids.iter().enumerate() {
        by_id.entry(id).or_default().push(c);
    }
    let ids: Vec<u32> = by_id.keys().copied().collect();
    let mut truth = Vec::with_capacity(probe_ids.len());
    for &id in probe_ids {
        match ids.binary_search(&id) {
            Ok(pos) => truth.push(pos),
            Err(_) => {
                return Err(Error::Constraint(format!(
                    "identity {id} has no sample in the gallery camera"
                )))
            }
        }
    }

    let n = ids.len();
    let mut hits = vec![0usize; n];
    let mut row = vec![0.0; n];
    for _ in 0..trials {
        let gallery: Vec<usize> = by_id.values().map(|cands| cands[rng.below(cands.len())]).collect();
        for (p, &t) in truth.iter().enumerate() {
            for (dst, &c) in row.iter_mut().zip(&gallery) {
                *dst = distances.get(p, c);
            }
            hits[rank_of(&row, t) - 1] += 1;
        }
    }
    let total = (trials * probe_ids.len()) as f64;
    let mut cumulative = 0;
    let rank_accuracy = hits
        .iter()
        .map(|&h| {
            cumulative += h;
            cumulative as f64 / total
        })
        .collect();
    Ok(CmcResult {
        rank_accuracy,
        trials,
        probes: probe_ids.len(),
        gallery_size: n,
        protocol: "single-shot".into(),
    })
}

/// Probe and gallery-candidate sample indices of a single-shot split: probes
/// come from the lowest camera id, candidates from the next one.
pub fn single_shot_views(dataset: &Dataset) -> Result<(Vec<usize>, Vec<usize>)> {
    let cams = dataset.cameras();
    if cams.len() < 2 {
        return Err(Error::Constraint(format!(
            "single-shot evaluation needs two cameras, found {}",
            cams.len()
        )));
    }
    let (a, b) = (cams[0], cams[1]);
    let mut probes = Vec::new();
    let mut candidates = Vec::new();
    for (i, s) in dataset.samples().iter().enumerate() {
        if s.camera_id == a {
            probes.push(i);
        } else if s.camera_id == b {
            candidates.push(i);
        }
    }
    for &id in dataset.identities() {
        for (cam, idx) in [(a, &probes), (b, &candidates)] {
            if !idx.iter().any(|&i| dataset.samples()[i].person_id == id) {
                return Err(Error::Constraint(format!("identity {id} has no view in camera {cam}")));
            }
        }
    }
    Ok((probes, candidates))
}

fn rows_of(dataset: &Dataset, idx: &[usize]) -> Result<Matrix> {
    let rows: Vec<&[f64]> = idx.iter().map(|&i| dataset.samples()[i].features.as_slice()).collect();
    if rows.is_empty() {
        return Ok(Matrix::zeros(0, dataset.dim()));
    }
    Matrix::from_rows(&rows)
}

pub fn cmc_single_shot(
    params: &ModelParams,
    dataset: &Dataset,
    mode: DistanceMode,
    trials: usize,
    rng: &mut Rng,
) -> Result<CmcResult> {
    let (probes, candidates) = single_shot_views(dataset)?;
    let d = distance_matrix(params, &rows_of(dataset, &probes)?, &rows_of(dataset, &candidates)?, mode)?;
    let ids = |idx: &[usize]| -> Vec<u32> { idx.iter().map(|&i| dataset.samples()[i].person_id).collect() };
    cmc_from_distances(&d, &ids(&probes), &ids(&candidates), trials, rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub low: f64,
    pub high: f64,
    pub intra: usize,
    pub inter: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationStats {
    pub intra_mean: f64,
    pub inter_mean: f64,
    pub intra_pairs: usize,
    pub inter_pairs: usize,
    pub bins: Vec<HistogramBin>,
}

impl VariationStats {
    /// Aggregates `(distance, same_identity)` values already in `[0, 1]`.
    pub fn from_distances(values: &[(f64, bool)]) -> Result<Self> {
        let mut bins: Vec<HistogramBin> = (0..NUM_BINS)
            .map(|b| HistogramBin {
                low: b as f64 * BIN_WIDTH,
                high: (b + 1) as f64 * BIN_WIDTH,
                intra: 0,
                inter: 0,
            })
            .collect();
        let (mut intra_sum, mut inter_sum, mut intra, mut inter) = (0.0, 0.0, 0, 0);
        for &(v, same) in values {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Domain(format!("distance {v} is outside [0, 1]")));
            }
            let b = ((v / BIN_WIDTH) as usize).min(NUM_BINS - 1);
            if same {
                intra_sum += v;
                intra += 1;
                bins[b].intra += 1;
            } else {
                inter_sum += v;
                inter += 1;
                bins[b].inter += 1;
            }
        }
        let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
        Ok(Self {
            intra_mean: mean(intra_sum, intra),
            inter_mean: mean(inter_sum, inter),
            intra_pairs: intra,
            inter_pairs: inter,
            bins,
        })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        w.write_record(["bin_low", "bin_high", "intra_count", "inter_count"])
            .map_err(|e| csv_error(path, e))?;
        for b in &self.bins {
            w.write_record([
                b.low.to_string(),
                b.high.to_string(),
                b.intra.to_string(),
                b.inter.to_string(),
            ])
            .map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Intra- and inter-identity distance statistics over every unordered sample
/// pair of `dataset`.
///
/// Embedding distances and softmax-head scores already lie in `[0, 1]`. The
/// unnormalized linear head is mapped there by `|g|` followed by min-max
/// scaling over all pairs.
pub fn variation_stats(params: &ModelParams, dataset: &Dataset, mode: DistanceMode) -> Result<VariationStats> {
    if dataset.identities().len() < 2 {
        return Err(Error::Constraint("variation statistics need two identities".into()));
    }
    let x = dataset.feature_matrix();
    let d = distance_matrix(params, &x, &x, mode)?;
    let s = dataset.samples();
    let mut values = Vec::with_capacity(s.len() * (s.len() - 1) / 2);
    for a in 0..s.len() {
        for b in a + 1..s.len() {
            values.push((d.get(a, b), s[a].person_id == s[b].person_id));
        }
    }
    if mode != DistanceMode::Embed && params.head_kind == HeadKind::Linear1 {
        for v in &mut values {
            v.0 = v.0.abs();
        }
        let lo = values.iter().map(|v| v.0).fold(f64::INFINITY, f64::min);
        let hi = values.iter().map(|v| v.0).fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        for v in &mut values {
            v.0 = if span > 0.0 { ((v.0 - lo) / span).clamp(0.0, 1.0) } else { 0.0 };
        }
    } else {
        // Clamp away roundoff just above 1 for antipodal embeddings.
        for v in &mut values {
            v.0 = v.0.min(1.0);
        }
    }
    VariationStats::from_distances(&values)
}
