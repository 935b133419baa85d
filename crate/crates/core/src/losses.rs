//! Ranking and pair losses with analytic gradients with respect to the
//! scores or distances they consume.
//!
//! Hinges use `[z]₊ = max(z, 0)` and a zero subgradient at `z = 0`. Every
//! ranking hinge argument is evaluated as `(pos² − neg²) + α` through
//! [`hinge_arg`] so that callers reproduce identical values.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::softmax2_forward;
use crate::model::{DISSIMILAR, SIMILAR};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginConfig {
    /// Triplet margin, and the strong-push margin of the quadruplet loss.
    pub alpha1: f64,
    /// Weak-push margin of the quadruplet loss.
    pub alpha2: f64,
    /// Contrastive margin.
    pub alpha_cts: f64,
    /// Weight of the auxiliary pair softmax loss.
    pub softmax_aux_weight: f64,
}

impl Default for MarginConfig {
    fn default() -> Self {
        Self {
            alpha1: 1.0,
            alpha2: 0.5,
            alpha_cts: 1.0,
            softmax_aux_weight: 1.0,
        }
    }
}

impl MarginConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha1", self.alpha1),
            ("alpha2", self.alpha2),
            ("alpha_cts", self.alpha_cts),
            ("softmax_aux_weight", self.softmax_aux_weight),
        ] {
            check_margin(name, v)?;
        }
        Ok(())
    }

    pub fn validate_quadruplet(&self) -> Result<()> {
        self.validate()?;
        if self.alpha1 < self.alpha2 {
            return Err(Error::Config(format!(
                "alpha1 ({}) must not be smaller than alpha2 ({})",
                self.alpha1, self.alpha2
            )));
        }
        Ok(())
    }
}

fn check_margin(name: &str, v: f64) -> Result<()> {
    if !(v >= 0.0) || !v.is_finite() {
        return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
    }
    Ok(())
}

/// Loss total, per-term breakdown and the gradient with respect to each input
/// in argument order.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub terms: Vec<f64>,
    pub grads: Vec<f64>,
}

/// `(pos² − neg²) + α`.
#[inline]
pub fn hinge_arg(pos: f64, neg: f64, alpha: f64) -> f64 {
    (pos * pos - neg * neg) + alpha
}

#[inline]
pub fn hinge(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        0.0
    }
}

fn check_unit(name: &str, g: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&g) {
        return Err(Error::Domain(format!(
            "{name} = {g} is outside [0, 1]; the metric head is not normalized"
        )));
    }
    Ok(())
}

/// `[s_ij² − s_ik² + α]₊` for any real scores.
///
/// This is the unchecked form shared by both triplet variants; the
/// unnormalized baseline head trains through it directly.
pub fn triplet_hinge(s_ij: f64, s_ik: f64, alpha: f64) -> LossValue {
    let z = hinge_arg(s_ij, s_ik, alpha);
    if z > 0.0 {
        LossValue {
            total: z,
            terms: vec![z],
            grads: vec![2.0 * s_ij, -2.0 * s_ik],
        }
    } else {
        LossValue {
            total: 0.0,
            terms: vec![0.0],
            grads: vec![0.0, 0.0],
        }
    }
}

/// Triplet loss on embedding distances.
pub fn triplet_embed_loss(d_ij: f64, d_ik: f64, alpha: f64) -> Result<LossValue> {
    check_margin("alpha", alpha)?;
    if !(d_ij >= 0.0) || !(d_ik >= 0.0) {
        return Err(Error::Domain(format!(
            "distances must be non-negative, got {d_ij}, {d_ik}"
        )));
    }
    Ok(triplet_hinge(d_ij, d_ik, alpha))
}

/// Triplet loss on learned metric scores in `[0, 1]`.
pub fn triplet_metric_loss(g_ij: f64, g_ik: f64, alpha: f64) -> Result<LossValue> {
    check_margin("alpha", alpha)?;
    check_unit("g_ij", g_ij)?;
    check_unit("g_ik", g_ik)?;
    Ok(triplet_hinge(g_ij, g_ik, alpha))
}

/// Quadruplet loss: the same-probe triplet hinge with margin `alpha1` plus a
/// different-probe hinge against `g_lk` with margin `alpha2`.
///
/// `grads` is `[∂/∂g_ij, ∂/∂g_ik, ∂/∂g_lk]`; `terms` is `[strong, weak]`.
pub fn quadruplet_loss(g_ij: f64, g_ik: f64, g_lk: f64, margins: &MarginConfig) -> Result<LossValue> {
    check_margin("alpha1", margins.alpha1)?;
    check_margin("alpha2", margins.alpha2)?;
    if margins.alpha1 < margins.alpha2 {
        return Err(Error::Config(format!(
            "alpha1 ({}) must not be smaller than alpha2 ({})",
            margins.alpha1, margins.alpha2
        )));
    }
    check_unit("g_ij", g_ij)?;
    check_unit("g_ik", g_ik)?;
    check_unit("g_lk", g_lk)?;
    Ok(quadruplet_terms(g_ij, g_ik, g_lk, margins.alpha1, margins.alpha2))
}

pub(crate) fn quadruplet_terms(g_ij: f64, g_ik: f64, g_lk: f64, alpha1: f64, alpha2: f64) -> LossValue {
    let strong = triplet_hinge(g_ij, g_ik, alpha1);
    let weak = triplet_hinge(g_ij, g_lk, alpha2);
    LossValue {
        total: strong.total + weak.total,
        terms: vec![strong.total, weak.total],
        grads: vec![strong.grads[0] + weak.grads[0], strong.grads[1], weak.grads[1]],
    }
}

/// Contrastive loss on a distance or metric score `s`, with `v = s²`:
/// `label·v + (1 − label)·max(0, α − v)`. `label` is 1 for positive pairs.
pub fn contrastive_loss(s: f64, label: u8, alpha_cts: f64) -> Result<LossValue> {
    check_margin("alpha_cts", alpha_cts)?;
    if !s.is_finite() {
        return Err(Error::Numeric(format!("non-finite score {s}")));
    }
    let v = s * s;
    match label {
        1 => Ok(LossValue {
            total: v,
            terms: vec![v],
            grads: vec![2.0 * s],
        }),
        0 => {
            let z = alpha_cts - v;
            let (total, grad) = if z > 0.0 { (z, -2.0 * s) } else { (0.0, 0.0) };
            Ok(LossValue {
                total,
                terms: vec![total],
                grads: vec![grad],
            })
        }
        other => Err(Error::Domain(format!("contrastive label must be 0 or 1, got {other}"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairLabel {
    Similar,
    Dissimilar,
}

impl PairLabel {
    pub fn index(self) -> usize {
        match self {
            PairLabel::Similar => SIMILAR,
            PairLabel::Dissimilar => DISSIMILAR,
        }
    }
}

/// Cross-entropy of the two-way softmax against the pair label.
///
/// `grads` is `softmax(logits) − onehot(label)`, indexed like the logits.
pub fn pair_softmax_loss(logits: [f64; 2], label: PairLabel) -> Result<LossValue> {
    let p = softmax2_forward(logits)?;
    let t = label.index();
    let m = logits[0].max(logits[1]);
    let lse = m + ((logits[0] - m).exp() + (logits[1] - m).exp()).ln();
    let total = lse - logits[t];
    let mut grads = vec![p[0], p[1]];
    grads[t] -= 1.0;
    Ok(LossValue {
        total,
        terms: vec![total],
        grads,
    })
}
