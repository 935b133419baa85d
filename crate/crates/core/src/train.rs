//! Per-mode batch objectives and the SGD training loop.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{Mode, TrainConfig};
use crate::data::Dataset;
use crate::equivalence::Doublet;
use crate::error::{Error, Result};
use crate::losses::{
    contrastive_loss, hinge_arg, pair_softmax_loss, triplet_embed_loss, triplet_hinge, triplet_metric_loss,
    MarginConfig, PairLabel,
};
use crate::model::{
    backward_distances, backward_pairs_logits, dlogits_from_dg, forward_distances, forward_pairs, Architecture,
    ModelParams, PairScore,
};
use crate::numeric::{streams, Matrix, Rng};
use crate::quadruplets::{batch_loss_with_margins, compute_margins, GradientMode, Quadruplet, QuadrupletSampler};

#[derive(Debug, Clone, PartialEq)]
pub enum Batch {
    Quadruplets(Vec<Quadruplet>),
    Doublets(Vec<Doublet>),
}

impl Batch {
    pub fn len(&self) -> usize {
        match self {
            Batch::Quadruplets(q) => q.len(),
            Batch::Doublets(d) => d.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Draws `m` doublets, the first `m / 2` of them positive. Positives pick an
/// identity and two of its samples; negatives pick two distinct identities and
/// one sample of each.
pub fn sample_doublets(dataset: &Dataset, m: usize, rng: &mut Rng) -> Vec<Doublet> {
    let groups = dataset.indices_by_identity();
    let ids = dataset.identities();
    let n = groups.len();
    (0..m)
        .map(|t| {
            let a = rng.below(n);
            let first = groups[a][rng.below(groups[a].len())];
            let b = if t < m / 2 {
                a
            } else {
                let other = rng.below(n - 1);
                if other >= a {
                    other + 1
                } else {
                    other
                }
            };
            let second = if a == b {
                let g = &groups[a];
                let pos = g.iter().position(|&x| x == first).expect("sample in its group");
                let other = rng.below(g.len() - 1);
                g[if other >= pos { other + 1 } else { other }]
            } else {
                groups[b][rng.below(groups[b].len())]
            };
            Doublet {
                first,
                second,
                first_id: ids[a],
                second_id: ids[b],
            }
        })
        .collect()
}

/// Scores of the last batch, kept so margins can be recomputed offline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchScores {
    pub ij: Vec<f64>,
    pub ik: Vec<f64>,
    pub lk: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Objective {
    /// Sum over the batch.
    pub loss: f64,
    pub grads: ModelParams,
    /// Fraction of ranking or contrastive hinges with a positive argument.
    pub active_fraction: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub scores: Option<BatchScores>,
    /// Distance from the current point to the nearest non-differentiable
    /// point: hinge arguments, ReLU inputs, zero embedding distances and the
    /// adaptive margin clip.
    pub kink_distance: f64,
}

/// Maps dataset indices to rows of a batch-local feature matrix.
struct LocalRows {
    index: BTreeMap<usize, usize>,
    x: Matrix,
}

impl LocalRows {
    fn new(dataset: &Dataset, indices: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut index = BTreeMap::new();
        for i in indices {
            let next = index.len();
            index.entry(i).or_insert(next);
        }
        let mut rows = vec![&[][..]; index.len()];
        for (&global, &local) in &index {
            rows[local] = dataset.samples()[global].features.as_slice();
        }
        Ok(Self {
            index,
            x: Matrix::from_rows(&rows)?,
        })
    }

    fn pair(&self, a: usize, b: usize) -> (usize, usize) {
        (self.index[&a], self.index[&b])
    }
}

fn add_softmax_aux(
    scores: &[PairScore],
    labels: impl Iterator<Item = PairLabel>,
    weight: f64,
    dlogits: &mut Matrix,
) -> Result<f64> {
    let mut total = 0.0;
    for ((p, s), label) in scores.iter().enumerate().zip(labels) {
        let l = pair_softmax_loss(s.logits, label)?;
        total += weight * l.total;
        let row = dlogits.row_mut(p);
        row[0] += weight * l.grads[0];
        row[1] += weight * l.grads[1];
    }
    Ok(total)
}

fn check_finite_scores(scores: &[PairScore]) -> Result<()> {
    match scores.iter().find(|s| !s.g.is_finite()) {
        Some(s) => Err(Error::Numeric(format!("non-finite score {}", s.g))),
        None => Ok(()),
    }
}

/// Loss and parameter gradient of one batch under `mode`. `adaptive` selects
/// batch-derived margins for the quadruplet objectives.
pub fn objective(
    params: &ModelParams,
    mode: Mode,
    margins: &MarginConfig,
    adaptive: bool,
    dataset: &Dataset,
    batch: &Batch,
) -> Result<Objective> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    match (mode.uses_quadruplets(), batch) {
        (true, Batch::Quadruplets(q)) => quadruplet_objective(params, mode, margins, adaptive, dataset, q),
        (false, Batch::Doublets(d)) => doublet_objective(params, margins, dataset, d),
        _ => Err(Error::Config(format!("batch kind does not match mode {mode}"))),
    }
}

fn quadruplet_objective(
    params: &ModelParams,
    mode: Mode,
    margins: &MarginConfig,
    adaptive: bool,
    dataset: &Dataset,
    quads: &[Quadruplet],
) -> Result<Objective> {
    let m = quads.len();
    let with_lk = matches!(mode, Mode::Quadruplet | Mode::QuadrupletMargohnm);
    let rows = LocalRows::new(
        dataset,
        quads.iter().flat_map(|q| {
            let n = if with_lk { 4 } else { 3 };
            [q.i, q.j, q.k, q.l].into_iter().take(n)
        }),
    )?;
    let mut pairs: Vec<(usize, usize)> = quads.iter().map(|q| rows.pair(q.i, q.j)).collect();
    pairs.extend(quads.iter().map(|q| rows.pair(q.i, q.k)));
    if with_lk {
        pairs.extend(quads.iter().map(|q| rows.pair(q.l, q.k)));
    }

    if mode == Mode::TripletEmbed {
        let (d, cache) = forward_distances(params, &rows.x, &pairs)?;
        let mut dl_dd = vec![0.0; 2 * m];
        let (mut loss, mut active) = (0.0, 0);
        let mut kink = cache.embed_cache().min_abs_pre_activation();
        for q in 0..m {
            let l = triplet_embed_loss(d[q], d[m + q], margins.alpha1)?;
            loss += l.total;
            dl_dd[q] = l.grads[0];
            dl_dd[m + q] = l.grads[1];
            let arg = hinge_arg(d[q], d[m + q], margins.alpha1);
            active += usize::from(arg > 0.0);
            kink = kink.min(arg.abs()).min(d[q]).min(d[m + q]);
        }
        return Ok(Objective {
            loss,
            grads: backward_distances(params, &cache, &dl_dd)?,
            active_fraction: active as f64 / m as f64,
            alpha1: margins.alpha1,
            alpha2: 0.0,
            scores: None,
            kink_distance: kink,
        });
    }

    let (scores, cache) = forward_pairs(params, &rows.x, &pairs)?;
    check_finite_scores(&scores)?;
    let g: Vec<f64> = scores.iter().map(|s| s.g).collect();
    let mut kink = cache.embed_cache().min_abs_pre_activation();
    let mut dl_dg = vec![0.0; pairs.len()];
    let (mut loss, active_fraction, alpha1, alpha2, logged);

    if with_lk {
        let (g_ij, g_ik, g_lk) = (&g[..m], &g[m..2 * m], &g[2 * m..]);
        let mut stats = compute_margins(g_ij, g_ik, g_lk)?;
        if adaptive {
            kink = kink.min(stats.mu.abs());
        } else {
            stats.alpha1 = margins.alpha1;
            stats.alpha2 = margins.alpha2;
        }
        let res = batch_loss_with_margins(g_ij, g_ik, g_lk, stats, GradientMode::Exact, adaptive);
        for q in 0..m {
            kink = kink
                .min(hinge_arg(g_ij[q], g_ik[q], stats.alpha1).abs())
                .min(hinge_arg(g_ij[q], g_lk[q], stats.alpha2).abs());
        }
        dl_dg[..m].copy_from_slice(&res.grads.ij);
        dl_dg[m..2 * m].copy_from_slice(&res.grads.ik);
        dl_dg[2 * m..].copy_from_slice(&res.grads.lk);
        loss = res.loss.total;
        let active = res.mask.term1.iter().chain(&res.mask.term2).filter(|&&a| a).count();
        active_fraction = active as f64 / (2 * m) as f64;
        alpha1 = stats.alpha1;
        alpha2 = stats.alpha2;
        logged = Some(BatchScores {
            ij: g_ij.to_vec(),
            ik: g_ik.to_vec(),
            lk: g_lk.to_vec(),
        });
    } else {
        let (mut total, mut active) = (0.0, 0);
        for q in 0..m {
            let l = if mode == Mode::TripletMetric {
                triplet_hinge(g[q], g[m + q], margins.alpha1)
            } else {
                triplet_metric_loss(g[q], g[m + q], margins.alpha1)?
            };
            total += l.total;
            dl_dg[q] = l.grads[0];
            dl_dg[m + q] = l.grads[1];
            let arg = hinge_arg(g[q], g[m + q], margins.alpha1);
            active += usize::from(arg > 0.0);
            kink = kink.min(arg.abs());
        }
        loss = total;
        active_fraction = active as f64 / m as f64;
        alpha1 = margins.alpha1;
        alpha2 = 0.0;
        logged = None;
    }

    let mut dlogits = dlogits_from_dg(params.head_kind, &scores, &dl_dg)?;
    if mode.uses_softmax_aux() {
        let labels = (0..m)
            .map(|_| PairLabel::Similar)
            .chain((0..m).map(|_| PairLabel::Dissimilar));
        loss += add_softmax_aux(&scores[..2 * m], labels, margins.softmax_aux_weight, &mut dlogits)?;
    }
    Ok(Objective {
        loss,
        grads: backward_pairs_logits(params, &cache, &dlogits)?,
        active_fraction,
        alpha1,
        alpha2,
        scores: logged,
        kink_distance: kink,
    })
}

fn doublet_objective(
    params: &ModelParams,
    margins: &MarginConfig,
    dataset: &Dataset,
    doublets: &[Doublet],
) -> Result<Objective> {
    let rows = LocalRows::new(dataset, doublets.iter().flat_map(|d| [d.first, d.second]))?;
    let pairs: Vec<(usize, usize)> = doublets.iter().map(|d| rows.pair(d.first, d.second)).collect();
    let (scores, cache) = forward_pairs(params, &rows.x, &pairs)?;
    check_finite_scores(&scores)?;
    let mut kink = cache.embed_cache().min_abs_pre_activation();
    let mut dl_dg = Vec::with_capacity(doublets.len());
    let (mut loss, mut active, mut negatives) = (0.0, 0, 0);
    for (d, s) in doublets.iter().zip(&scores) {
        let l = contrastive_loss(s.g, d.label(), margins.alpha_cts)?;
        loss += l.total;
        dl_dg.push(l.grads[0]);
        if d.label() == 0 {
            let arg = margins.alpha_cts - s.g * s.g;
            negatives += 1;
            active += usize::from(arg > 0.0);
            kink = kink.min(arg.abs());
        }
    }
    let mut dlogits = dlogits_from_dg(params.head_kind, &scores, &dl_dg)?;
    let labels = doublets.iter().map(|d| {
        if d.label() == 1 {
            PairLabel::Similar
        } else {
            PairLabel::Dissimilar
        }
    });
    loss += add_softmax_aux(&scores, labels, margins.softmax_aux_weight, &mut dlogits)?;
    Ok(Objective {
        loss,
        grads: backward_pairs_logits(params, &cache, &dlogits)?,
        active_fraction: if negatives == 0 { 0.0 } else { active as f64 / negatives as f64 },
        alpha1: margins.alpha_cts,
        alpha2: 0.0,
        scores: None,
        kink_distance: kink,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean over the epoch's batches of the summed batch loss.
    pub loss: f64,
    pub active_fraction: f64,
    pub adaptive: bool,
    /// Margins used by the epoch's last batch.
    pub alpha1: f64,
    pub alpha2: f64,
    /// Scores of the epoch's last batch (quadruplet objectives only).
    pub last_batch_scores: Option<BatchScores>,
    /// Not serialized, so logs stay byte-identical across reruns.
    #[serde(skip)]
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub mode: Mode,
    pub seed: u64,
    pub batches_per_epoch: usize,
    pub warm_start_epochs: usize,
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Json {
            path: path.into(),
            source: e,
        })?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// `⌈positive pairs / M⌉`, at least one.
pub fn batches_per_epoch(dataset: &Dataset, batch_size: usize) -> usize {
    dataset.positive_pair_count().div_ceil(batch_size).max(1)
}

/// Trains a fresh model on `dataset` and returns it with its log.
pub fn train(cfg: &TrainConfig, dataset: &Dataset) -> Result<(ModelParams, TrainLog)> {
    cfg.validate()?;
    let arch = Architecture::new(dataset.dim(), cfg.hidden.clone(), cfg.mode.head_kind())
        .with_pair_features(cfg.pair_features);
    let mut params = ModelParams::init(&arch, &mut Rng::with_stream(cfg.seed, streams::INIT))?;
    let mut rng = Rng::with_stream(cfg.seed, streams::SAMPLING);
    let sampler = QuadrupletSampler::new(dataset)?;
    let per_epoch = batches_per_epoch(dataset, cfg.batch_size);
    let warm = cfg.warm_start_epochs();
    let mut velocity = params.zeros_like();
    let mut log = TrainLog {
        mode: cfg.mode,
        seed: cfg.seed,
        batches_per_epoch: per_epoch,
        warm_start_epochs: if cfg.mode == Mode::QuadrupletMargohnm { warm } else { 0 },
        epochs: Vec::with_capacity(cfg.epochs),
    };

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let adaptive = cfg.mode == Mode::QuadrupletMargohnm && epoch >= warm;
        let (mut loss_sum, mut active_sum) = (0.0, 0.0);
        let mut last = None;
        for _ in 0..per_epoch {
            let batch = if cfg.mode.uses_quadruplets() {
                Batch::Quadruplets(sampler.sample_batch(cfg.batch_size, &mut rng))
            } else {
                Batch::Doublets(sample_doublets(dataset, cfg.batch_size, &mut rng))
            };
            let obj = match objective(&params, cfg.mode, &cfg.margins, adaptive, dataset, &batch) {
                Err(Error::Numeric(_)) => return Err(Error::Diverged { epoch, loss: f64::NAN }),
                other => other?,
            };
            if !obj.loss.is_finite() {
                return Err(Error::Diverged { epoch, loss: obj.loss });
            }
            if cfg.momentum == 0.0 {
                params.sgd_step(&obj.grads, cfg.learning_rate)?;
            } else {
                velocity.scale(cfg.momentum);
                velocity.add_assign(&obj.grads)?;
                params.sgd_step(&velocity, cfg.learning_rate)?;
            }
            if !params.is_finite() {
                return Err(Error::Diverged { epoch, loss: obj.loss });
            }
            loss_sum += obj.loss;
            active_sum += obj.active_fraction;
            last = Some(obj);
        }
        let last = last.expect("at least one batch per epoch");
        log.epochs.push(EpochRecord {
            epoch,
            loss: loss_sum / per_epoch as f64,
            active_fraction: active_sum / per_epoch as f64,
            adaptive,
            alpha1: last.alpha1,
            alpha2: last.alpha2,
            last_batch_scores: last.scores,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok((params, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthConfig};

    fn small() -> (TrainConfig, Dataset) {
        let ds = synth_generate(&SynthConfig {
            num_ids: 8,
            dim: 5,
            ..SynthConfig::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            hidden: vec![6],
            ..TrainConfig::default()
        };
        (cfg, ds)
    }

    #[test]
    fn doublets_are_labelled_half_positive() {
        let (_, ds) = small();
        let d = sample_doublets(&ds, 10, &mut Rng::new(0));
        assert_eq!(d.iter().filter(|x| x.label() == 1).count(), 5);
        for x in &d {
            assert_ne!(x.first, x.second);
            assert_eq!(ds.samples()[x.first].person_id, x.first_id);
            assert_eq!(ds.samples()[x.second].person_id, x.second_id);
        }
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let (mut cfg, ds) = small();
        cfg.epochs = 0;
        let (p, log) = train(&cfg, &ds).unwrap();
        let arch = Architecture::new(ds.dim(), cfg.hidden.clone(), cfg.mode.head_kind());
        let init = ModelParams::init(&arch, &mut Rng::with_stream(cfg.seed, streams::INIT)).unwrap();
        assert_eq!(p, init);
        assert!(log.epochs.is_empty());
    }

    #[test]
    fn every_mode_trains() {
        let (mut cfg, ds) = small();
        for mode in Mode::ALL {
            cfg.mode = mode;
            let (p, log) = train(&cfg, &ds).unwrap();
            assert!(p.is_finite());
            assert_eq!(log.epochs.len(), 2);
            assert!(log.epochs.iter().all(|e| e.alpha1 >= 0.0 && e.alpha2 >= 0.0));
        }
    }

    #[test]
    fn batch_kind_must_match_mode() {
        let (cfg, ds) = small();
        let arch = Architecture::new(ds.dim(), vec![4], cfg.mode.head_kind());
        let p = ModelParams::init(&arch, &mut Rng::new(0)).unwrap();
        let d = Batch::Doublets(sample_doublets(&ds, 4, &mut Rng::new(0)));
        assert!(objective(&p, Mode::Quadruplet, &cfg.margins, false, &ds, &d).is_err());
    }

    #[test]
    fn diverging_run_reports_epoch() {
        let (mut cfg, ds) = small();
        cfg.mode = Mode::TripletMetric;
        cfg.learning_rate = 1e6;
        cfg.epochs = 50;
        match train(&cfg, &ds) {
            Err(Error::Diverged { .. }) => {}
            other => panic!("expected divergence, got {:?}", other.map(|_| ())),
        }
    }
}
