//! Executable checks relating the contrastive, triplet and quadruplet losses.
//!
//! A batch of `M` labelled doublets with `a` positives is rewritten as the
//! `a·(M − a)` quadruplets pairing every positive doublet `(i, j)` with every
//! negative doublet `(l, k)`. Summed over that product the contrastive loss
//! becomes `Σ max[g_ij², g_ij² + α − g_lk²]`, which splits into the quadruplets
//! whose negative shares the positive's probe identity and the rest.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{contrastive_loss, hinge, quadruplet_terms, MarginConfig};
use crate::numeric::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Doublet {
    pub first: usize,
    pub second: usize,
    pub first_id: u32,
    pub second_id: u32,
}

impl Doublet {
    /// 1 for a same-identity pair, 0 otherwise.
    pub fn label(&self) -> u8 {
        u8::from(self.first_id == self.second_id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DoubletBatch {
    doublets: Vec<Doublet>,
    positives: usize,
}

impl DoubletBatch {
    /// Requires at least one positive and one negative doublet.
    pub fn new(doublets: Vec<Doublet>) -> Result<Self> {
        let positives = doublets.iter().filter(|d| d.label() == 1).count();
        if positives == 0 || positives == doublets.len() {
            return Err(Error::Constraint(format!(
                "need 0 < a < M, got a = {positives}, M = {}",
                doublets.len()
            )));
        }
        Ok(Self { doublets, positives })
    }

    pub fn doublets(&self) -> &[Doublet] {
        &self.doublets
    }

    /// `M`
    pub fn len(&self) -> usize {
        self.doublets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doublets.is_empty()
    }

    /// `a`
    pub fn positives(&self) -> usize {
        self.positives
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformedQuadruplet {
    /// Index of the positive doublet `(i, j)` in the source batch.
    pub positive: usize,
    /// Index of the negative doublet `(l, k)` in the source batch.
    pub negative: usize,
    /// `s_l = s_i`: both pairs share the probe identity.
    pub same_probe: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransformedBatch {
    pub quadruplets: Vec<TransformedQuadruplet>,
    /// `b`, the size of the same-probe subset.
    pub same_probe: usize,
}

impl TransformedBatch {
    pub fn different_probe(&self) -> usize {
        self.quadruplets.len() - self.same_probe
    }
}

pub fn transform(batch: &DoubletBatch) -> TransformedBatch {
    let d = batch.doublets();
    let mut quadruplets = Vec::with_capacity(batch.positives() * (d.len() - batch.positives()));
    let mut same_probe = 0;
    for (p, pos) in d.iter().enumerate().filter(|(_, x)| x.label() == 1) {
        for (n, neg) in d.iter().enumerate().filter(|(_, x)| x.label() == 0) {
            let same = neg.first_id == pos.first_id;
            same_probe += usize::from(same);
            quadruplets.push(TransformedQuadruplet {
                positive: p,
                negative: n,
                same_probe: same,
            });
        }
    }
    TransformedBatch {
        quadruplets,
        same_probe,
    }
}

/// `max[g_ij², g_ij² + α − g_lk²]` with the hinge argument grouped as
/// `g_ij² + (α − g_lk²)`.
pub fn transformed_term(g_ij: f64, g_lk: f64, alpha: f64) -> f64 {
    let c = g_ij * g_ij;
    c.max(c + (alpha - g_lk * g_lk))
}

/// Returns `(g_ij² + max(0, α − g_lk²), max(g_ij², g_ij² + α − g_lk²))`.
pub fn max_identity_check(g_ij: f64, g_lk: f64, alpha: f64) -> (f64, f64) {
    let c = g_ij * g_ij;
    let lhs = c + (alpha - g_lk * g_lk).max(0.0);
    (lhs, transformed_term(g_ij, g_lk, alpha))
}

/// Transformed contrastive term minus the triplet hinge on the same scores.
///
/// Equals `g_ij²` when the relative error `g_ij² + α − g_lk²` is `≤ 0` and 0
/// once that error reaches `g_ij²`.
pub fn threshold_gap(g_ij: f64, g_lk: f64, alpha: f64) -> f64 {
    let c = g_ij * g_ij;
    transformed_term(g_ij, g_lk, alpha) - hinge(c + (alpha - g_lk * g_lk))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SumEquivalence {
    pub m: usize,
    pub a: usize,
    pub same_probe: usize,
    /// Sum of transformed terms over all `a·(M − a)` quadruplets.
    pub transformed_sum: f64,
    /// `Σ_pos g²` over the doublet batch.
    pub positive_part: f64,
    /// `Σ_neg max(0, α − g²)` over the doublet batch.
    pub negative_part: f64,
    /// `(M − a)·positive_part + a·negative_part`.
    pub expected: f64,
    pub deviation: f64,
    /// Contrastive loss of the doublet batch.
    pub contrastive: f64,
    /// `transformed_sum / contrastive`; equals `M/2` when `a = M/2`.
    pub ratio: f64,
}

pub fn contrastive_sum_equivalence(batch: &DoubletBatch, scores: &[f64], alpha_cts: f64) -> Result<SumEquivalence> {
    if scores.len() != batch.len() {
        return Err(Error::shape("contrastive_sum_equivalence", batch.len(), scores.len()));
    }
    let t = transform(batch);
    let transformed_sum: f64 = t
        .quadruplets
        .iter()
        .map(|q| transformed_term(scores[q.positive], scores[q.negative], alpha_cts))
        .sum();

    let mut positive_part = 0.0;
    let mut negative_part = 0.0;
    let mut contrastive = 0.0;
    for (d, &g) in batch.doublets().iter().zip(scores) {
        let l = contrastive_loss(g, d.label(), alpha_cts)?;
        contrastive += l.total;
        if d.label() == 1 {
            positive_part += l.total;
        } else {
            negative_part += l.total;
        }
    }
    let m = batch.len();
    let a = batch.positives();
    let expected = (m - a) as f64 * positive_part + a as f64 * negative_part;
    Ok(SumEquivalence {
        m,
        a,
        same_probe: t.same_probe,
        transformed_sum,
        positive_part,
        negative_part,
        expected,
        deviation: (transformed_sum - expected).abs(),
        contrastive,
        ratio: transformed_sum / contrastive,
    })
}

/// Draws a labelled doublet batch over `num_ids` identities with exactly
/// `positives` same-identity pairs, plus a score in `[0, 1]` per doublet.
pub fn random_doublet_batch(
    m: usize,
    positives: usize,
    num_ids: u32,
    rng: &mut Rng,
) -> Result<(DoubletBatch, Vec<f64>)> {
    if num_ids < 2 {
        return Err(Error::Constraint("need at least two identities".into()));
    }
    let mut doublets = Vec::with_capacity(m);
    for n in 0..m {
        let first_id = rng.below(num_ids as usize) as u32;
        let second_id = if n < positives {
            first_id
        } else {
            let mut other = rng.below(num_ids as usize - 1) as u32;
            if other >= first_id {
                other += 1;
            }
            other
        };
        doublets.push(Doublet {
            first: 2 * n,
            second: 2 * n + 1,
            first_id,
            second_id,
        });
    }
    rng.shuffle(&mut doublets);
    let scores = (0..m).map(|_| rng.uniform(0.0, 1.0)).collect();
    Ok((DoubletBatch::new(doublets)?, scores))
}

/// One probe of the three-person preference example, with dissimilarity
/// scores for its positive pair and its negatives against the other persons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeScores {
    pub probe: String,
    pub positive: f64,
    pub negatives: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseEvaluation {
    pub name: String,
    pub probes: Vec<ProbeScores>,
    pub rank1_errors: usize,
    pub best_threshold: f64,
    pub min_misclassifications: usize,
    pub contrastive_loss: f64,
    pub quadruplet_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceReport {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha_cts: f64,
    pub case1: CaseEvaluation,
    pub case2: CaseEvaluation,
    pub classification_prefers_case2: bool,
    pub contrastive_prefers_case2: bool,
    pub ranking_prefers_case1: bool,
}

fn probe(name: &str, positive: f64, negatives: [(&str, f64); 2]) -> ProbeScores {
    ProbeScores {
        probe: name.into(),
        positive,
        negatives: negatives.iter().map(|(n, g)| (n.to_string(), *g)).collect(),
    }
}

/// Case 1: every probe ranks its positive first, but positive and negative
/// scores interleave globally so no single threshold makes fewer than two
/// mistakes. Case 2: one threshold separates all pairs but one, and that one
/// is a negative outranking probe C's positive.
pub fn preference_cases() -> (Vec<ProbeScores>, Vec<ProbeScores>) {
    let case1 = vec![
        probe("A", 0.10, [("B", 0.50), ("C", 0.90)]),
        probe("B", 0.52, [("C", 0.72), ("A", 0.92)]),
        probe("C", 0.75, [("A", 0.88), ("B", 0.95)]),
    ];
    let case2 = vec![
        probe("A", 0.10, [("B", 0.80), ("C", 0.85)]),
        probe("B", 0.15, [("C", 0.82), ("A", 0.90)]),
        probe("C", 0.60, [("A", 0.20), ("B", 0.95)]),
    ];
    (case1, case2)
}

/// Ranking errors: probes whose positive is not strictly below every negative.
fn rank1_errors(probes: &[ProbeScores]) -> usize {
    probes
        .iter()
        .filter(|p| p.negatives.iter().any(|&(_, g)| g <= p.positive))
        .count()
}

/// Sweeps every distinct cut (pairs with `g < t` are called "same") and
/// returns the best threshold with its error count.
fn best_threshold(probes: &[ProbeScores]) -> (f64, usize) {
    let mut labelled: Vec<(f64, bool)> = Vec::new();
    for p in probes {
        labelled.push((p.positive, true));
        labelled.extend(p.negatives.iter().map(|&(_, g)| (g, false)));
    }
    let mut values: Vec<f64> = labelled.iter().map(|&(g, _)| g).collect();
    values.sort_by(f64::total_cmp);
    values.dedup();
    let mut cuts = vec![values[0] - 1.0];
    cuts.extend(values.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    cuts.push(values[values.len() - 1] + 1.0);

    let errors = |t: f64| {
        labelled
            .iter()
            .filter(|&&(g, positive)| (g < t) != positive)
            .count()
    };
    cuts.into_iter()
        .map(|t| (t, errors(t)))
        .min_by_key(|&(_, e)| e)
        .expect("at least two cuts")
}

fn contrastive_total(probes: &[ProbeScores], alpha_cts: f64) -> Result<f64> {
    let mut total = 0.0;
    for p in probes {
        total += contrastive_loss(p.positive, 1, alpha_cts)?.total;
        for &(_, g) in &p.negatives {
            total += contrastive_loss(g, 0, alpha_cts)?.total;
        }
    }
    Ok(total)
}

/// Strong term over each probe's own negatives; weak term pairs each probe's
/// positive with negatives of other probes that do not involve it.
fn quadruplet_total(probes: &[ProbeScores], alpha1: f64, alpha2: f64) -> f64 {
    let mut total = 0.0;
    for p in probes {
        for &(_, g_ik) in &p.negatives {
            total += quadruplet_terms(p.positive, g_ik, 0.0, alpha1, 0.0).terms[0];
        }
        for other in probes.iter().filter(|o| o.probe != p.probe) {
            for (k_id, g_lk) in &other.negatives {
                if *k_id != p.probe {
                    total += quadruplet_terms(p.positive, 1.0, *g_lk, 0.0, alpha2).terms[1];
                }
            }
        }
    }
    total
}

fn evaluate_case(name: &str, probes: Vec<ProbeScores>, margins: &MarginConfig) -> Result<CaseEvaluation> {
    let (t, errors) = best_threshold(&probes);
    Ok(CaseEvaluation {
        name: name.into(),
        rank1_errors: rank1_errors(&probes),
        best_threshold: t,
        min_misclassifications: errors,
        contrastive_loss: contrastive_total(&probes, margins.alpha_cts)?,
        quadruplet_loss: quadruplet_total(&probes, margins.alpha1, margins.alpha2),
        probes,
    })
}

/// Margins used by the preference example: a strong same-probe margin and a
/// much weaker different-probe margin.
pub fn preference_margins() -> MarginConfig {
    MarginConfig {
        alpha1: 0.2,
        alpha2: 0.02,
        alpha_cts: 1.0,
        softmax_aux_weight: 0.0,
    }
}

pub fn preference_demo() -> Result<PreferenceReport> {
    let margins = preference_margins();
    margins.validate_quadruplet()?;
    let (c1, c2) = preference_cases();
    let case1 = evaluate_case("case1", c1, &margins)?;
    let case2 = evaluate_case("case2", c2, &margins)?;
    Ok(PreferenceReport {
        alpha1: margins.alpha1,
        alpha2: margins.alpha2,
        alpha_cts: margins.alpha_cts,
        classification_prefers_case2: case2.min_misclassifications < case1.min_misclassifications,
        contrastive_prefers_case2: case2.contrastive_loss < case1.contrastive_loss,
        ranking_prefers_case1: case1.quadruplet_loss < case2.quadruplet_loss
            && case1.rank1_errors < case2.rank1_errors,
        case1,
        case2,
    })
}

/// Aggregate of every equivalence check, emitted as JSON by the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub seed: u64,
    pub max_identity_triples: usize,
    pub max_identity_max_deviation: f64,
    pub sum_equivalence_batches: usize,
    pub sum_equivalence_max_deviation: f64,
    pub half_ratio_batches: usize,
    /// Largest `|transformed_sum − (M/2)·L_cts|` over batches with `a = M/2`.
    pub half_ratio_max_deviation: f64,
    pub threshold_gap_checks: usize,
    pub threshold_gap_max_deviation: f64,
    pub preference: PreferenceReport,
}

pub fn run_equivalence_suite(seed: u64, triples: usize, batches: usize) -> Result<EquivalenceReport> {
    let mut rng = Rng::new(seed);
    let mut max_identity_dev = 0.0f64;
    let mut gap_dev = 0.0f64;
    let mut gap_checks = 0;
    for _ in 0..triples {
        let g_ij = rng.uniform(0.0, 1.0);
        let g_lk = rng.uniform(0.0, 1.0);
        let alpha = rng.uniform(0.0, 2.0);
        let (lhs, rhs) = max_identity_check(g_ij, g_lk, alpha);
        max_identity_dev = max_identity_dev.max((lhs - rhs).abs());

        let c = g_ij * g_ij;
        let err = c + (alpha - g_lk * g_lk);
        let gap = threshold_gap(g_ij, g_lk, alpha);
        if err <= 0.0 {
            gap_dev = gap_dev.max((gap - c).abs());
            gap_checks += 1;
        } else if err >= c {
            gap_dev = gap_dev.max(gap.abs());
            gap_checks += 1;
        }
    }

    let mut sum_dev = 0.0f64;
    for _ in 0..batches {
        let m = 2 + rng.below(31);
        let a = 1 + rng.below(m - 1);
        let (batch, scores) = random_doublet_batch(m, a, 2 + rng.below(8) as u32, &mut rng)?;
        let alpha = rng.uniform(0.0, 1.5);
        let eq = contrastive_sum_equivalence(&batch, &scores, alpha)?;
        sum_dev = sum_dev.max(eq.deviation / eq.expected.abs().max(1.0));
    }

    let mut half_dev = 0.0f64;
    for _ in 0..batches {
        let m = 2 * (1 + rng.below(16));
        let (batch, scores) = random_doublet_batch(m, m / 2, 2 + rng.below(8) as u32, &mut rng)?;
        let alpha = rng.uniform(0.0, 1.5);
        let eq = contrastive_sum_equivalence(&batch, &scores, alpha)?;
        let target = (m / 2) as f64 * eq.contrastive;
        half_dev = half_dev.max((eq.transformed_sum - target).abs() / target.abs().max(1.0));
    }

    Ok(EquivalenceReport {
        seed,
        max_identity_triples: triples,
        max_identity_max_deviation: max_identity_dev,
        sum_equivalence_batches: batches,
        sum_equivalence_max_deviation: sum_dev,
        half_ratio_batches: batches,
        half_ratio_max_deviation: half_dev,
        threshold_gap_checks: gap_checks,
        threshold_gap_max_deviation: gap_dev,
        preference: preference_demo()?,
    })
}
