//! Central finite-difference checks of every analytic gradient: the scalar
//! losses, the adaptive-margin batch loss and the full parameter gradient of
//! each training objective.
//!
//! Instances that land within [`KINK_GUARD`] of a non-differentiable point
//! (hinge boundary, ReLU input at zero, margin clip) are redrawn, since finite
//! differences straddling a kink measure the wrong quantity.

use serde::{Deserialize, Serialize};

use crate::config::Mode;
use crate::data::{synth_generate, SynthConfig};
use crate::error::Result;
use crate::losses::{
    contrastive_loss, hinge_arg, pair_softmax_loss, quadruplet_loss, triplet_embed_loss, triplet_metric_loss,
    LossValue, MarginConfig, PairLabel,
};
use crate::model::{Architecture, ModelParams, PairFeatures};
use crate::numeric::{relative_error, Rng};
use crate::quadruplets::{batch_loss_adaptive, compare_gradient_modes, GradientModeComparison, QuadrupletSampler};
use crate::train::{objective, sample_doublets, Batch};

pub const EPSILON: f64 = 1e-5;
pub const KINK_GUARD: f64 = 1e-4;
/// Tolerance for scalar losses and model parameters.
pub const TOLERANCE: f64 = 1e-5;
/// Tolerance for the adaptive batch loss with respect to its scores.
pub const ADAPTIVE_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub name: String,
    pub instances: usize,
    /// Number of gradient entries compared.
    pub entries: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub suites: Vec<SuiteResult>,
    /// Closed-form vs exact adaptive gradients, informational only.
    pub closed_form_comparison: Vec<GradientModeComparison>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(|s| s.passed)
    }
}

struct Accumulator {
    name: String,
    instances: usize,
    entries: usize,
    max_rel_error: f64,
    tolerance: f64,
}

impl Accumulator {
    fn new(name: impl Into<String>, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            instances: 0,
            entries: 0,
            max_rel_error: 0.0,
            tolerance,
        }
    }

    fn compare(&mut self, analytic: f64, numeric: f64) {
        self.entries += 1;
        let e = relative_error(analytic, numeric);
        // NaN must fail, so compare with `!(e <= max)` rather than `e > max`.
        if !(e <= self.max_rel_error) {
            self.max_rel_error = e;
        }
    }

    fn finish(self) -> SuiteResult {
        SuiteResult {
            passed: self.max_rel_error < self.tolerance,
            name: self.name,
            instances: self.instances,
            entries: self.entries,
            max_rel_error: self.max_rel_error,
            tolerance: self.tolerance,
        }
    }
}

fn central_difference(mut f: impl FnMut(f64) -> f64, x: f64) -> f64 {
    (f(x + EPSILON) - f(x - EPSILON)) / (2.0 * EPSILON)
}

/// Checks `f`'s analytic gradient at `x` against central differences in each
/// coordinate.
fn check_scalar_fn(acc: &mut Accumulator, x: &[f64], f: impl Fn(&[f64]) -> Result<LossValue>) -> Result<()> {
    let analytic = f(x)?.grads;
    for (n, &a) in analytic.iter().enumerate() {
        let mut probe = x.to_vec();
        let numeric = central_difference(
            |v| {
                probe[n] = v;
                f(&probe).map(|l| l.total).unwrap_or(f64::NAN)
            },
            x[n],
        );
        acc.compare(a, numeric);
    }
    acc.instances += 1;
    Ok(())
}

/// Uniform value in `[lo, hi]` kept `KINK_GUARD + EPSILON` away from the ends
/// so that perturbed inputs stay in the loss domain.
fn inner(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    let pad = KINK_GUARD + EPSILON;
    rng.uniform(lo + pad, hi - pad)
}

fn loss_suites(rng: &mut Rng, instances: usize) -> Result<Vec<SuiteResult>> {
    let mut embed = Accumulator::new("triplet_embed_loss", TOLERANCE);
    let mut metric = Accumulator::new("triplet_metric_loss", TOLERANCE);
    let mut quad = Accumulator::new("quadruplet_loss", TOLERANCE);
    let mut cts = Accumulator::new("contrastive_loss", TOLERANCE);
    let mut sfx = Accumulator::new("pair_softmax_loss", TOLERANCE);

    while embed.instances < instances {
        let (p, n, a) = (inner(rng, 0.0, 1.0), inner(rng, 0.0, 1.0), rng.uniform(0.0, 1.5));
        if hinge_arg(p, n, a).abs() < KINK_GUARD {
            continue;
        }
        check_scalar_fn(&mut embed, &[p, n], |x| triplet_embed_loss(x[0], x[1], a))?;
        check_scalar_fn(&mut metric, &[p, n], |x| triplet_metric_loss(x[0], x[1], a))?;
    }

    while quad.instances < instances {
        let x = [inner(rng, 0.0, 1.0), inner(rng, 0.0, 1.0), inner(rng, 0.0, 1.0)];
        let a1 = rng.uniform(0.0, 1.5);
        let margins = MarginConfig {
            alpha1: a1,
            alpha2: rng.uniform(0.0, a1),
            ..MarginConfig::default()
        };
        if hinge_arg(x[0], x[1], margins.alpha1).abs() < KINK_GUARD
            || hinge_arg(x[0], x[2], margins.alpha2).abs() < KINK_GUARD
        {
            continue;
        }
        check_scalar_fn(&mut quad, &x, |v| quadruplet_loss(v[0], v[1], v[2], &margins))?;
    }

    while cts.instances < instances {
        let s = rng.uniform(-1.5, 1.5);
        let alpha = rng.uniform(0.0, 1.5);
        let label = u8::from(cts.instances.is_multiple_of(2));
        if (alpha - s * s).abs() < KINK_GUARD {
            continue;
        }
        check_scalar_fn(&mut cts, &[s], |v| contrastive_loss(v[0], label, alpha))?;
    }

    while sfx.instances < instances {
        let z = [rng.uniform(-4.0, 4.0), rng.uniform(-4.0, 4.0)];
        let label = if sfx.instances.is_multiple_of(2) {
            PairLabel::Similar
        } else {
            PairLabel::Dissimilar
        };
        check_scalar_fn(&mut sfx, &z, |v| pair_softmax_loss([v[0], v[1]], label))?;
    }

    Ok(vec![embed.finish(), metric.finish(), quad.finish(), cts.finish(), sfx.finish()])
}

/// Draws scores for an adaptive batch away from every kink of the composite
/// loss: `μ = 0` and each hinge boundary.
fn adaptive_scores(rng: &mut Rng, m: usize) -> [Vec<f64>; 3] {
    loop {
        let mut draw = || (0..m).map(|_| inner(rng, 0.0, 1.0)).collect::<Vec<f64>>();
        let (ij, ik, lk) = (draw(), draw(), draw());
        let Ok(res) = batch_loss_adaptive(&ij, &ik, &lk) else {
            continue;
        };
        let s = res.stats;
        let near = (0..m).any(|q| {
            hinge_arg(ij[q], ik[q], s.alpha1).abs() < KINK_GUARD
                || hinge_arg(ij[q], lk[q], s.alpha2).abs() < KINK_GUARD
        });
        if s.mu.abs() >= KINK_GUARD && !near {
            return [ij, ik, lk];
        }
    }
}

pub fn adaptive_suite(rng: &mut Rng, m: usize, instances: usize) -> Result<SuiteResult> {
    let mut acc = Accumulator::new(format!("batch_loss_adaptive_m{m}"), ADAPTIVE_TOLERANCE);
    for _ in 0..instances {
        let scores = adaptive_scores(rng, m);
        let res = batch_loss_adaptive(&scores[0], &scores[1], &scores[2])?;
        let analytic = [&res.grads.ij, &res.grads.ik, &res.grads.lk];
        for part in 0..3 {
            for q in 0..m {
                let numeric = central_difference(
                    |v| {
                        let mut s = scores.clone();
                        s[part][q] = v;
                        batch_loss_adaptive(&s[0], &s[1], &s[2])
                            .map(|r| r.loss.total)
                            .unwrap_or(f64::NAN)
                    },
                    scores[part][q],
                );
                acc.compare(analytic[part][q], numeric);
            }
        }
        acc.instances += 1;
    }
    Ok(acc.finish())
}

/// Full parameter gradient of one training objective on small random
/// networks and batches.
pub fn model_suite(rng: &mut Rng, mode: Mode, pair_features: PairFeatures, instances: usize) -> Result<SuiteResult> {
    let name = match pair_features {
        PairFeatures::ConcatProduct => format!("model_{}", mode.name()),
        other => format!("model_{}_{other}", mode.name()),
    };
    let mut acc = Accumulator::new(name, TOLERANCE);
    let margins = MarginConfig {
        alpha1: 0.6,
        alpha2: 0.3,
        alpha_cts: 0.7,
        softmax_aux_weight: 1.0,
    };
    while acc.instances < instances {
        let data = synth_generate(&SynthConfig {
            num_ids: 4,
            samples_per_id_per_camera: 2,
            cameras: 2,
            dim: 4,
            intra_sigma: 0.5,
            inter_spread: 1.0,
            camera_shift_sigma: 0.3,
            seed: rng.next_u64(),
        })?;
        let arch = Architecture::new(4, vec![6, 4], mode.head_kind()).with_pair_features(pair_features);
        let mut params = ModelParams::init(&arch, rng)?;
        let batch = if mode.uses_quadruplets() {
            Batch::Quadruplets(QuadrupletSampler::new(&data)?.sample_batch(3, rng))
        } else {
            Batch::Doublets(sample_doublets(&data, 4, rng))
        };
        let adaptive = mode == Mode::QuadrupletMargohnm && acc.instances % 2 == 1;
        let obj = objective(&params, mode, &margins, adaptive, &data, &batch)?;
        if obj.kink_distance < KINK_GUARD {
            continue;
        }
        let analytic = obj.grads.flat();
        for (n, &a) in analytic.iter().enumerate() {
            let x0 = params.get_flat(n);
            let mut eval = |v: f64| {
                params.set_flat(n, v);
                objective(&params, mode, &margins, adaptive, &data, &batch)
                    .map(|o| o.loss)
                    .unwrap_or(f64::NAN)
            };
            let numeric = (eval(x0 + EPSILON) - eval(x0 - EPSILON)) / (2.0 * EPSILON);
            params.set_flat(n, x0);
            acc.compare(a, numeric);
        }
        acc.instances += 1;
    }
    Ok(acc.finish())
}

/// Runs every suite: 100 instances per scalar loss, 100 adaptive batches for
/// each of `M ∈ {2, 8, 32}` and 15 networks per training mode, plus 15 with
/// the plain concatenation head.
pub fn run_gradcheck(seed: u64) -> Result<GradcheckReport> {
    let mut rng = Rng::new(seed);
    let mut suites = loss_suites(&mut rng, 100)?;
    let mut closed_form_comparison = Vec::new();
    for m in [2, 8, 32] {
        suites.push(adaptive_suite(&mut rng, m, 100)?);
        let s = adaptive_scores(&mut rng, m);
        closed_form_comparison.push(compare_gradient_modes(&s[0], &s[1], &s[2])?);
    }
    for mode in Mode::ALL {
        suites.push(model_suite(&mut rng, mode, PairFeatures::ConcatProduct, 15)?);
    }
    suites.push(model_suite(&mut rng, Mode::Quadruplet, PairFeatures::Concat, 15)?);
    Ok(GradcheckReport {
        seed,
        suites,
        closed_form_comparison,
    })
}

pub fn format_report(r: &GradcheckReport) -> String {
    let mut out = String::new();
    for s in &r.suites {
        out.push_str(&format!(
            "{:<4} {:<36} instances={:<4} entries={:<6} max_rel_err={:.3e} (tol {:.0e})\n",
            if s.passed { "ok" } else { "FAIL" },
            s.name,
            s.instances,
            s.entries,
            s.max_rel_error,
            s.tolerance
        ));
    }
    for c in &r.closed_form_comparison {
        out.push_str(&format!(
            "info closed-form vs exact, M={:<3} max |dev| ij={:.3e} ik={:.3e} lk={:.3e}\n",
            c.m, c.max_abs_dev_ij, c.max_abs_dev_ik, c.max_abs_dev_lk
        ));
    }
    out
}
