//! Quadruplet sampling, batch-adaptive margins and margin-based online hard
//! negative mining.
//!
//! A quadruplet `(i, j, k, l)` pairs a positive `(i, j)` with two negatives:
//! `(i, k)` shares the probe `i`, and `(l, k)` has a probe from a third
//! identity. In a batch of `M` quadruplets there are `M` positive and `2M`
//! negative pairs. The adaptive margins are
//!
//! ```text
//! μ  = mean(g_ik², g_lk²) − mean(g_ij²)
//! α₁ = max(μ, 0)        α₂ = max(μ / 2, 0)
//! ```
//!
//! and a hinge term is back-propagated only when it is active, i.e. when the
//! negative pair is closer than the positive one plus the margin.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{hinge, hinge_arg, LossValue};
use crate::numeric::Rng;

/// Default batch size in quadruplets.
pub const DEFAULT_BATCH_SIZE: usize = 128;
/// Margin weight for the strong (same-probe) term.
pub const W_STRONG: f64 = 1.0;
/// Margin weight for the weak (different-probe) term.
pub const W_WEAK: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Quadruplet {
    pub i: usize,
    pub j: usize,
    pub k: usize,
    pub l: usize,
}

impl Quadruplet {
    /// `s_i = s_j`, `s_l ≠ s_k`, `s_i ≠ s_l`, `s_i ≠ s_k` and `i ≠ j`.
    pub fn is_valid(&self, dataset: &Dataset) -> bool {
        let s = dataset.samples();
        let n = s.len();
        if [self.i, self.j, self.k, self.l].iter().any(|&x| x >= n) {
            return false;
        }
        let id = |x: usize| s[x].person_id;
        self.i != self.j
            && id(self.i) == id(self.j)
            && id(self.l) != id(self.k)
            && id(self.i) != id(self.l)
            && id(self.i) != id(self.k)
    }
}

/// Draws quadruplets from a dataset.
///
/// The anchor identity is uniform over identities, `i ≠ j` are uniform among
/// its samples, the identity of `k` is uniform over the remaining identities
/// and the identity of `l` is uniform over those differing from both.
#[derive(Debug, Clone)]
pub struct QuadrupletSampler {
    groups: Vec<Vec<usize>>,
}

impl QuadrupletSampler {
    pub fn new(dataset: &Dataset) -> Result<Self> {
        let groups = dataset.indices_by_identity();
        if groups.len() < 3 {
            return Err(Error::Constraint(format!(
                "quadruplets need 3 identities, dataset has {}",
                groups.len()
            )));
        }
        if groups.iter().any(|g| g.len() < 2) {
            return Err(Error::Constraint(
                "every identity needs 2 samples to form a positive pair".into(),
            ));
        }
        Ok(Self { groups })
    }

    pub fn sample(&self, rng: &mut Rng) -> Quadruplet {
        let n = self.groups.len();
        let anchor = rng.below(n);
        let group = &self.groups[anchor];
        let a = rng.below(group.len());
        let mut b = rng.below(group.len() - 1);
        if b >= a {
            b += 1;
        }

        let mut neg = rng.below(n - 1);
        if neg >= anchor {
            neg += 1;
        }
        let (lo, hi) = if anchor < neg { (anchor, neg) } else { (neg, anchor) };
        let mut third = rng.below(n - 2);
        if third >= lo {
            third += 1;
        }
        if third >= hi {
            third += 1;
        }

        let pick = |id: usize, rng: &mut Rng| {
            let g = &self.groups[id];
            g[rng.below(g.len())]
        };
        let k = pick(neg, rng);
        let l = pick(third, rng);
        Quadruplet {
            i: group[a],
            j: group[b],
            k,
            l,
        }
    }

    pub fn sample_batch(&self, m: usize, rng: &mut Rng) -> Vec<Quadruplet> {
        (0..m).map(|_| self.sample(rng)).collect()
    }
}

pub fn sample_batch(dataset: &Dataset, m: usize, rng: &mut Rng) -> Result<Vec<Quadruplet>> {
    if m == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    Ok(QuadrupletSampler::new(dataset)?.sample_batch(m, rng))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchMarginStats {
    pub m: usize,
    pub n_p: usize,
    pub n_n: usize,
    pub mu_p: f64,
    pub mu_n: f64,
    pub mu: f64,
    pub w1: f64,
    pub w2: f64,
    pub alpha1: f64,
    pub alpha2: f64,
}

fn check_lengths(g_ij: &[f64], g_ik: &[f64], g_lk: &[f64]) -> Result<()> {
    if g_ij.is_empty() || g_ij.len() != g_ik.len() || g_ij.len() != g_lk.len() {
        return Err(Error::shape(
            "quadruplet batch",
            format!("three equal non-empty arrays (g_ij has {})", g_ij.len()),
            format!("g_ik {}, g_lk {}", g_ik.len(), g_lk.len()),
        ));
    }
    Ok(())
}

fn check_scores(name: &str, values: &[f64]) -> Result<()> {
    if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Domain(format!("{name} score {v} is outside [0, 1]")));
    }
    Ok(())
}

pub fn compute_margins(g_ij: &[f64], g_ik: &[f64], g_lk: &[f64]) -> Result<BatchMarginStats> {
    check_lengths(g_ij, g_ik, g_lk)?;
    let m = g_ij.len();
    let sum_sq = |v: &[f64]| v.iter().fold(0.0, |acc, g| acc + g * g);
    let mu_p = sum_sq(g_ij) / m as f64;
    let mu_n = (sum_sq(g_ik) + sum_sq(g_lk)) / (2 * m) as f64;
    let mu = mu_n - mu_p;
    Ok(BatchMarginStats {
        m,
        n_p: m,
        n_n: 2 * m,
        mu_p,
        mu_n,
        mu,
        w1: W_STRONG,
        w2: W_WEAK,
        alpha1: (W_STRONG * mu).max(0.0),
        alpha2: (W_WEAK * mu).max(0.0),
    })
}

/// Per-quadruplet hinge indicators.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MiningMask {
    pub term1: Vec<bool>,
    pub term2: Vec<bool>,
}

impl MiningMask {
    /// `g_ik² − g_ij² < α₁` and `g_lk² − g_ij² < α₂`.
    pub fn from_scores(g_ij: &[f64], g_ik: &[f64], g_lk: &[f64], stats: &BatchMarginStats) -> Self {
        let active = |pos: f64, neg: f64, alpha: f64| neg * neg - pos * pos < alpha;
        Self {
            term1: g_ij
                .iter()
                .zip(g_ik)
                .map(|(&p, &n)| active(p, n, stats.alpha1))
                .collect(),
            term2: g_ij
                .iter()
                .zip(g_lk)
                .map(|(&p, &n)| active(p, n, stats.alpha2))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.term1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.term1.is_empty()
    }
}

/// How gradients of the adaptive batch loss are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    /// Exact derivative, including the paths through `μ_p` and `μ_n`.
    Exact,
    /// Published closed-form coefficients `(2 − 2/M)`, `(2 − 1/M)` and
    /// `(−2 + 3/(2M))`, kept for comparison.
    ClosedForm,
}

/// Per-score gradients of a quadruplet batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchGradients {
    pub ij: Vec<f64>,
    pub ik: Vec<f64>,
    pub lk: Vec<f64>,
}

impl BatchGradients {
    fn zeros(m: usize) -> Self {
        Self {
            ij: vec![0.0; m],
            ik: vec![0.0; m],
            lk: vec![0.0; m],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveBatchLoss {
    /// `terms` holds `[Σ strong, Σ weak]`; `grads` is `ij ‖ ik ‖ lk`.
    pub loss: LossValue,
    /// Per-quadruplet `[strong, weak]` hinge values.
    pub per_quadruplet: Vec<[f64; 2]>,
    pub stats: BatchMarginStats,
    pub mask: MiningMask,
    pub grads: BatchGradients,
    /// Direct hinge derivatives with the margins held constant.
    pub hinge_grads: BatchGradients,
}

/// Quadruplet loss of a batch with margins taken from the same batch, with
/// exact gradients.
pub fn batch_loss_adaptive(g_ij: &[f64], g_ik: &[f64], g_lk: &[f64]) -> Result<AdaptiveBatchLoss> {
    batch_loss_adaptive_with(g_ij, g_ik, g_lk, GradientMode::Exact)
}

pub fn batch_loss_adaptive_with(
    g_ij: &[f64],
    g_ik: &[f64],
    g_lk: &[f64],
    mode: GradientMode,
) -> Result<AdaptiveBatchLoss> {
    check_lengths(g_ij, g_ik, g_lk)?;
    check_scores("g_ij", g_ij)?;
    check_scores("g_ik", g_ik)?;
    check_scores("g_lk", g_lk)?;
    let stats = compute_margins(g_ij, g_ik, g_lk)?;
    Ok(batch_loss_with_margins(g_ij, g_ik, g_lk, stats, mode, true))
}

/// Shared pass 2: hinge values, mask and gradients for given margins.
///
/// `adaptive` selects whether the margins are functions of the scores (and so
/// receive gradient) or constants.
pub(crate) fn batch_loss_with_margins(
    g_ij: &[f64],
    g_ik: &[f64],
    g_lk: &[f64],
    stats: BatchMarginStats,
    mode: GradientMode,
    adaptive: bool,
) -> AdaptiveBatchLoss {
    let m = g_ij.len();
    let mask = MiningMask::from_scores(g_ij, g_ik, g_lk, &stats);

    let mut total = 0.0;
    let mut strong_total = 0.0;
    let mut weak_total = 0.0;
    let mut per_quadruplet = Vec::with_capacity(m);
    let mut hinge_grads = BatchGradients::zeros(m);
    for q in 0..m {
        let strong = if mask.term1[q] {
            hinge(hinge_arg(g_ij[q], g_ik[q], stats.alpha1))
        } else {
            0.0
        };
        let weak = if mask.term2[q] {
            hinge(hinge_arg(g_ij[q], g_lk[q], stats.alpha2))
        } else {
            0.0
        };
        total += strong + weak;
        strong_total += strong;
        weak_total += weak;
        per_quadruplet.push([strong, weak]);
        if mask.term1[q] {
            hinge_grads.ij[q] += 2.0 * g_ij[q];
            hinge_grads.ik[q] = -2.0 * g_ik[q];
        }
        if mask.term2[q] {
            hinge_grads.ij[q] += 2.0 * g_ij[q];
            hinge_grads.lk[q] = -2.0 * g_lk[q];
        }
    }

    let grads = match mode {
        GradientMode::Exact => {
            // ∂L/∂μ counts every active hinge, weighted by its margin weight.
            let dl_dmu = if adaptive && stats.mu > 0.0 {
                let n1 = mask.term1.iter().filter(|&&a| a).count() as f64;
                let n2 = mask.term2.iter().filter(|&&a| a).count() as f64;
                stats.w1 * n1 + stats.w2 * n2
            } else {
                0.0
            };
            let mf = m as f64;
            let mut grads = hinge_grads.clone();
            for q in 0..m {
                grads.ij[q] -= 2.0 * g_ij[q] * dl_dmu / mf;
                grads.ik[q] += 2.0 * g_ik[q] * dl_dmu / (2.0 * mf);
                grads.lk[q] += 2.0 * g_lk[q] * dl_dmu / (2.0 * mf);
            }
            grads
        }
        GradientMode::ClosedForm => closed_form_gradients(g_ij, g_ik, g_lk, &mask),
    };

    let mut flat = Vec::with_capacity(3 * m);
    flat.extend_from_slice(&grads.ij);
    flat.extend_from_slice(&grads.ik);
    flat.extend_from_slice(&grads.lk);
    AdaptiveBatchLoss {
        loss: LossValue {
            total,
            terms: vec![strong_total, weak_total],
            grads: flat,
        },
        per_quadruplet,
        stats,
        mask,
        grads,
        hinge_grads,
    }
}

/// The published closed-form gradient coefficients applied under `mask`.
pub fn closed_form_gradients(
    g_ij: &[f64],
    g_ik: &[f64],
    g_lk: &[f64],
    mask: &MiningMask,
) -> BatchGradients {
    let mf = g_ij.len() as f64;
    let c_pos_strong = 2.0 - 2.0 / mf;
    let c_pos_weak = 2.0 - 1.0 / mf;
    let c_neg = -2.0 + 3.0 / (2.0 * mf);
    let mut out = BatchGradients::zeros(g_ij.len());
    for q in 0..g_ij.len() {
        if mask.term1[q] {
            out.ij[q] += c_pos_strong * g_ij[q];
            out.ik[q] = c_neg * g_ik[q];
        }
        if mask.term2[q] {
            out.ij[q] += c_pos_weak * g_ij[q];
            out.lk[q] = c_neg * g_lk[q];
        }
    }
    out
}

/// Largest absolute gap between exact and closed-form gradients per score class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientModeComparison {
    pub m: usize,
    pub max_abs_dev_ij: f64,
    pub max_abs_dev_ik: f64,
    pub max_abs_dev_lk: f64,
}

pub fn compare_gradient_modes(g_ij: &[f64], g_ik: &[f64], g_lk: &[f64]) -> Result<GradientModeComparison> {
    let exact = batch_loss_adaptive_with(g_ij, g_ik, g_lk, GradientMode::Exact)?;
    let closed = batch_loss_adaptive_with(g_ij, g_ik, g_lk, GradientMode::ClosedForm)?;
    let dev = |a: &[f64], b: &[f64]| a.iter().zip(b).fold(0.0f64, |acc, (x, y)| acc.max((x - y).abs()));
    Ok(GradientModeComparison {
        m: g_ij.len(),
        max_abs_dev_ij: dev(&exact.grads.ij, &closed.grads.ij),
        max_abs_dev_ik: dev(&exact.grads.ik, &closed.grads.ik),
        max_abs_dev_lk: dev(&exact.grads.lk, &closed.grads.lk),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiningReport {
    pub quadruplets: usize,
    pub term1_active: usize,
    pub term2_active: usize,
    pub term1_fraction: f64,
    pub term2_fraction: f64,
}

pub fn mining_report(mask: &MiningMask) -> MiningReport {
    let n = mask.len();
    let t1 = mask.term1.iter().filter(|&&a| a).count();
    let t2 = mask.term2.iter().filter(|&&a| a).count();
    let frac = |c: usize| if n == 0 { 0.0 } else { c as f64 / n as f64 };
    MiningReport {
        quadruplets: n,
        term1_active: t1,
        term2_active: t2,
        term1_fraction: frac(t1),
        term2_fraction: frac(t2),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthConfig};
    use crate::losses::{quadruplet_loss, MarginConfig};

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn margins_direct_evaluation() {
        let s = compute_margins(&[0.2, 0.4], &[0.8, 0.9], &[0.6, 0.7]).unwrap();
        assert_eq!((s.m, s.n_p, s.n_n), (2, 2, 4));
        assert!(close(s.mu_p, 0.1));
        assert!(close(s.mu_n, 0.575));
        assert!(close(s.alpha1, 0.475));
        assert!(close(s.alpha2, 0.2375));
        assert_eq!(s.alpha1, 2.0 * s.alpha2);
    }

    #[test]
    fn margins_degenerate_and_clipped() {
        let s = compute_margins(&[0.5; 3], &[0.5; 3], &[0.5; 3]).unwrap();
        assert_eq!((s.mu, s.alpha1, s.alpha2), (0.0, 0.0, 0.0));
        let s = compute_margins(&[0.9, 0.8], &[0.1, 0.2], &[0.3, 0.1]).unwrap();
        assert!(s.mu < 0.0);
        assert_eq!((s.alpha1, s.alpha2), (0.0, 0.0));
        assert!(compute_margins(&[0.1], &[0.2, 0.3], &[0.1]).is_err());
        assert!(compute_margins(&[], &[], &[]).is_err());
    }

    #[test]
    fn all_inactive_batch_has_zero_loss_and_report() {
        // Equal scores give μ = 0 and zero gaps, so no indicator fires.
        let l = batch_loss_adaptive(&[0.5; 3], &[0.5; 3], &[0.5; 3]).unwrap();
        assert_eq!(l.loss.total, 0.0);
        let r = mining_report(&l.mask);
        assert_eq!((r.term1_active, r.term2_active), (0, 0));
        assert_eq!(r.term1_fraction, 0.0);
    }

    #[test]
    fn non_positive_mu_activates_only_inverted_pairs() {
        // μ < 0: quadruplet 0 is correctly ordered, quadruplet 1 is inverted.
        let g_ij = [0.1, 0.95];
        let g_ik = [0.3, 0.2];
        let g_lk = [0.35, 0.25];
        let l = batch_loss_adaptive(&g_ij, &g_ik, &g_lk).unwrap();
        assert!(l.stats.mu <= 0.0);
        assert_eq!(l.mask.term1, vec![false, true]);
        assert_eq!(l.mask.term2, vec![false, true]);
    }

    #[test]
    fn inactive_quadruplet_only_gets_margin_path_gradient() {
        // Quadruplet 1 is well separated, quadruplet 0 is hard.
        let g_ij = [0.6, 0.05];
        let g_ik = [0.5, 0.99];
        let g_lk = [0.55, 0.98];
        let l = batch_loss_adaptive(&g_ij, &g_ik, &g_lk).unwrap();
        assert!(l.stats.mu > 0.0);
        assert_eq!(l.mask.term1, vec![true, false]);
        assert_eq!(l.mask.term2, vec![true, false]);
        assert_eq!(l.per_quadruplet[1], [0.0, 0.0]);
        assert_eq!(l.hinge_grads.ik[1], 0.0);
        assert_eq!(l.hinge_grads.ij[1], 0.0);
        // Margin path: ∂L/∂g_ik[1] = 2 g (w1·n1 + w2·n2) / (2M).
        let expected = 2.0 * 0.99 * (1.0 + 0.5) / 4.0;
        assert!(close(l.grads.ik[1], expected));
    }

    #[test]
    fn frozen_margins_match_quadruplet_loss() {
        let mut rng = Rng::new(17);
        for _ in 0..200 {
            let m = 1 + rng.below(16);
            let gen = |rng: &mut Rng| (0..m).map(|_| rng.uniform(0.0, 1.0)).collect::<Vec<_>>();
            let (a, b, c) = (gen(&mut rng), gen(&mut rng), gen(&mut rng));
            let l = batch_loss_adaptive(&a, &b, &c).unwrap();
            let margins = MarginConfig {
                alpha1: l.stats.alpha1,
                alpha2: l.stats.alpha2,
                ..MarginConfig::default()
            };
            let mut sum = 0.0;
            for q in 0..m {
                sum += quadruplet_loss(a[q], b[q], c[q], &margins).unwrap().total;
            }
            assert_eq!(sum, l.loss.total);
        }
    }

    #[test]
    fn closed_form_coefficients() {
        let g = [0.5, 0.5];
        let mask = MiningMask {
            term1: vec![true, false],
            term2: vec![true, true],
        };
        let p = closed_form_gradients(&g, &g, &g, &mask);
        assert!(close(p.ij[0], (2.0 - 1.0) * 0.5 + (2.0 - 0.5) * 0.5));
        assert!(close(p.ik[0], (-2.0 + 0.75) * 0.5));
        assert_eq!(p.ik[1], 0.0);
        assert!(close(p.lk[1], (-2.0 + 0.75) * 0.5));
    }

    #[test]
    fn minimal_dataset_yields_valid_quadruplets() {
        let ds = synth_generate(&SynthConfig {
            num_ids: 3,
            samples_per_id_per_camera: 1,
            cameras: 2,
            dim: 2,
            ..SynthConfig::default()
        })
        .unwrap();
        let mut rng = Rng::new(0);
        let batch = sample_batch(&ds, DEFAULT_BATCH_SIZE, &mut rng).unwrap();
        assert_eq!(batch.len(), 128);
        assert!(batch.iter().all(|q| q.is_valid(&ds)));
        assert!(sample_batch(&ds, 0, &mut rng).is_err());
    }
}
